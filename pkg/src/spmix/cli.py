"""Command-line entry point: ``spmix <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Logs go to stderr; data products only to files.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("spmix")

SUBCOMMANDS = ("gen-synthetic", "split", "saliency", "augment", "train", "probe", "eval",
               "ablate", "convert-csv")
DEFAULT_ABLATION = "vanilla-mixup,patch-only,saliency-only,spmix"
# Many/Few thresholds for the built-in synthetic counts (500, 200, 80, 30, 10);
# they give the same partition on overall and training-split counts
SYNTHETIC_THRESHOLDS = {"many_min": 150, "few_max": 40}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parser

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_flag(p, flag: str, key: str, typ, help_text: str) -> None:
    """A flag that overrides a RunConfig field; unset flags leave the config value alone."""
    from .config import RunConfig, format_value
    default = format_value(RunConfig.defaults()[key])
    p.add_argument(flag, dest=key, type=typ, default=None,
                   help=f"{help_text} (default: {default}, or the --config value)")


def _common(p, seed=True, config=False) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    if config:
        p.add_argument("--config", type=Path, default=None,
                       help="key = value run configuration file (default: none, built-in defaults)")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                   help="stderr log verbosity (default: %(default)s)")


def _mixing_flags(p) -> None:
    _config_flag(p, "--alpha", "alpha", float, "clip threshold on mixup ratios")
    _config_flag(p, "--grid", "grid", int, "patch grid side G")
    _config_flag(p, "--noise", "noise", float, "saliency noise amplitude")
    _config_flag(p, "--windows", "windows", _int_list, "center-surround window sizes")


def _protocol_flags(p) -> None:
    _config_flag(p, "--many-min", "many_min", int, "classes with at least this many training samples are Many")
    _config_flag(p, "--few-max", "few_max", int, "classes with at most this many training samples are Few")


def build_parser() -> argparse.ArgumentParser:
    from .training import VARIANTS

    parser = argparse.ArgumentParser(prog="spmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("gen-synthetic", help="write the synthetic long-tailed lesion dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--counts", type=_int_list, default=(500, 200, 80, 30, 10),
                   help="images per class (default: 500,200,80,30,10)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default: %(default)s)")
    p.add_argument("--prefix", default="", help="file-name prefix for images and manifest (default: empty)")
    _common(p)

    p = sub.add_parser("split", help="balanced val/test, long-tailed train split of a manifest")
    p.add_argument("--manifest", type=Path, required=True, help="input manifest (required)")
    p.add_argument("--out", type=Path, required=True,
                   help="directory for train.tsv, val.tsv, test.tsv (required)")
    p.add_argument("--ratios", type=_int_list, default=(7, 1, 2),
                   help="train:val:test ratios (default: 7,1,2)")
    _common(p)

    p = sub.add_parser("saliency", help="saliency maps, merged map and patch ratios")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True,
                   help="one image, or a tail image then a head image (required)")
    p.add_argument("--out", type=Path, required=True,
                   help="grayscale PNG of the normalized (merged) saliency map (required)")
    p.add_argument("--ratios-out", type=Path, default=None,
                   help="write the G x G patch ratios as TSV (default: not written)")
    p.add_argument("--composite", type=Path, default=None,
                   help="side-by-side figure of inputs, maps and ratios (default: not written)")
    p.add_argument("--size", type=int, default=None,
                   help="resize inputs to this square side (default: keep size; pairs must match)")
    _mixing_flags(p)
    _common(p, config=True)

    p = sub.add_parser("augment", help="write image-level mixed samples plus a manifest")
    p.add_argument("--manifest", type=Path, required=True, help="input manifest (required)")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--count", type=int, default=8, help="mixed samples to write (default: %(default)s)")
    _config_flag(p, "--variant", "variant", str, "mixing recipe whose ratios are used")
    _mixing_flags(p)
    _protocol_flags(p)
    _common(p, config=True)

    p = sub.add_parser("train", help="train a query/key encoder pair")
    p.add_argument("--manifest", type=Path, required=True, help="training manifest (required)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory (required)")
    p.add_argument("--materialize", type=Path, default=None,
                   help="also write one epoch of mixed samples here for inspection (default: off)")
    _config_flag(p, "--variant", "variant", str, "training recipe, one of " + ", ".join(VARIANTS))
    _config_flag(p, "--epochs", "epochs", int, "training epochs")
    _config_flag(p, "--key-momentum", "key_momentum", float, "key encoder momentum m")
    _config_flag(p, "--lr", "lr", float, "AdamW learning rate")
    _config_flag(p, "--batch-size", "batch_size", int, "batch size")
    _config_flag(p, "--precision", "precision", str, "float32 or float64")
    _mixing_flags(p)
    _protocol_flags(p)
    _common(p, config=True)

    p = sub.add_parser("probe", help="fit a linear probe on frozen query-encoder features")
    p.add_argument("--checkpoint", type=Path, required=True, help="directory written by train (required)")
    p.add_argument("--manifest", type=Path, required=True, help="training manifest (required)")
    p.add_argument("--out", type=Path, default=None,
                   help="probe checkpoint path (default: CHECKPOINT/probe.ckpt)")
    _config_flag(p, "--epochs", "probe_epochs", int, "probe epochs")
    _common(p)

    p = sub.add_parser("eval", help="Many/Medium/Few accuracy, macro-F1 and confusion matrix")
    p.add_argument("--checkpoint", type=Path, required=True, help="directory written by train (required)")
    p.add_argument("--probe", type=Path, default=None, help="probe checkpoint (default: CHECKPOINT/probe.ckpt)")
    p.add_argument("--manifest", type=Path, required=True, help="evaluation manifest (required)")
    p.add_argument("--out", type=Path, required=True,
                   help="directory for metrics.txt, metrics.kv and confusion.png (required)")
    _common(p, seed=False)

    p = sub.add_parser("ablate", help="train, probe and evaluate a grid of variants over seeds")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--variants", default=DEFAULT_ABLATION,
                   help="comma-separated variants (default: %(default)s)")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, counted up from --seed (default: %(default)s)")
    p.add_argument("--manifest", type=Path, default=None,
                   help="full dataset manifest, split by --seed (default: generate the synthetic dataset)")
    p.add_argument("--test-manifest", type=Path, default=None,
                   help="evaluate on this manifest instead of the split's test set (default: split test; "
                        "the synthetic dataset adds a generated balanced held-out set)")
    p.add_argument("--heldout-per-class", type=int, default=60,
                   help="synthetic held-out test images per class (default: %(default)s)")
    _config_flag(p, "--epochs", "epochs", int, "training epochs per run")
    _config_flag(p, "--probe-epochs", "probe_epochs", int, "probe epochs per run")
    _mixing_flags(p)
    _protocol_flags(p)
    _common(p, config=True)

    p = sub.add_parser("convert-csv", help="one-hot label CSV (ISIC style) to a manifest")
    p.add_argument("--csv", type=Path, required=True, help="label CSV (required)")
    p.add_argument("--images", type=Path, required=True, help="image directory (required)")
    p.add_argument("--out", type=Path, required=True, help="manifest to write (required)")
    p.add_argument("--image-column", default="image", help="image id column (default: %(default)s)")
    p.add_argument("--extension", default=".jpg", help="appended to image ids (default: %(default)s)")
    _common(p, seed=False)
    return parser


# ---------------------------------------------------------------- helpers

def _overrides(args) -> dict:
    from .config import RunConfig
    keys = RunConfig.defaults().keys()
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


def resolve_config(args, base: dict | None = None):
    """defaults < ``base`` < --config file < flags."""
    from .config import RunConfig, read_kv
    values = RunConfig.defaults()
    values.update(base or {})
    try:
        if getattr(args, "config", None) is not None:
            values.update(read_kv(args.config))
        values.update(_overrides(args))
        cfg = RunConfig(**values)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    try:
        cfg.encoder()
        cfg.policy()
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    log.info("resolved config (seed %d):", cfg.seed)
    for line in cfg.to_text().splitlines():
        if not line.startswith("#"):
            log.info("  %s", line)
    return cfg


def _log_args(args) -> None:
    shown = {k: v for k, v in vars(args).items() if k not in ("func", "log_level")}
    log.info("%s %s", args.command, " ".join(f"{k}={v}" for k, v in sorted(shown.items())))


def _seed(args) -> int:
    return 0 if getattr(args, "seed", None) is None else args.seed


def _manifest_with_classes(path, classes):
    from .data import Manifest
    m = Manifest.read(path)
    return Manifest(m.records, m.root, list(classes))


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_partition(path, partition, classes) -> None:
    lines = [f"# many_min={partition.many_min} few_max={partition.few_max}", "class\tcount\tsubset"]
    lines += [f"{c}\t{partition.counts[k]}\t{partition.assignment[k]}" for k, c in enumerate(classes)]
    _write_lines(path, lines)


def _read_partition(path):
    from .data import SubsetPartition
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {path}; was the checkpoint written by 'spmix train'?")
    classes, counts, assign = [], [], {}
    many_min = few_max = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            fields = dict(kv.split("=") for kv in line[1:].split())
            many_min, few_max = int(fields["many_min"]), int(fields["few_max"])
            continue
        name, count, subset = line.split("\t")
        if name == "class":
            continue
        assign[len(classes)] = subset
        classes.append(name)
        counts.append(int(count))
    return classes, SubsetPartition(assign, many_min, few_max, counts)


def _load_checkpoint(directory):
    from .config import RunConfig
    from .encoder import EncoderPair
    directory = Path(directory)
    cfg_path = directory / "config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"missing {cfg_path}; was the checkpoint written by 'spmix train'?")
    cfg = RunConfig.build(cfg_path)
    classes, partition = _read_partition(directory / "partition.tsv")
    pair = EncoderPair.load(directory, cfg.encoder(), cfg.key_momentum, cfg.dtype)
    return cfg, pair, classes, partition


def write_mixed_samples(images, labels, classes, head_classes, cfg, count: int, out_dir, rng,
                        names=None) -> None:
    """Image-level mixed samples (first view), their ratio grids and a tail/head/mixed panel."""
    import numpy as np

    from .data import Manifest
    from .imaging import save_image
    from .mixup import build_mixed_pair
    from .plotting import mixed_panels
    from .training import sample_balanced_batch

    settings = cfg.train_settings()
    _, _, mode = settings.recipe()
    if mode is None:
        raise UsageError(f"variant {cfg.variant!r} does not mix samples")
    if not head_classes:
        raise UsageError("no Many (head) classes under the current thresholds; lower --many-min")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, ratio_lines, panels, captions = [], [], [], []
    made = 0
    while made < count:
        draws = sample_balanced_batch(labels, head_classes, count, rng)
        for i, partner in draws:
            if partner is None or made >= count:
                continue
            pair = build_mixed_pair(images[i], images[partner], int(labels[i]), settings.policy,
                                    cfg.alpha, cfg.grid, cfg.noise, rng, mode, cfg.windows,
                                    cfg.ratio_order, cfg.mixup_beta)
            mixed, _ = pair.images()
            rel = f"images/{made:05d}.png"
            save_image(mixed, out_dir / rel)
            records.append((rel, classes[labels[i]]))
            src = f"{names[i]}+{names[partner]}" if names is not None else f"{i}+{partner}"
            ratio_lines.append(f"{rel}\t{src}\t" + ",".join(f"{v:.6f}" for v in pair.r1.ravel()))
            if len(panels) < 6:
                panels.append((pair.x_t1, pair.x_h1, mixed))
                captions.append(f"{classes[labels[i]]} + {classes[labels[partner]]}")
            made += 1
    Manifest(records, out_dir, list(classes)).write(out_dir / "manifest.tsv")
    _write_lines(out_dir / "ratios.tsv", ["path\tsources\tratios_row_major"] + ratio_lines)
    mixed_panels(out_dir / "panels.png", panels, captions)
    log.info("wrote %d mixed samples to %s", made, out_dir)


# ---------------------------------------------------------------- subcommands

def cmd_gen_synthetic(args) -> None:
    from .data import SyntheticSpec, generate_synthetic_lt
    _log_args(args)
    if not args.counts or min(args.counts) <= 0:
        raise UsageError(f"--counts must be positive integers, got {args.counts}")
    spec = SyntheticSpec(counts=args.counts, size=args.size)
    m = generate_synthetic_lt(args.out, spec, _seed(args), args.prefix)
    log.info("wrote %d images in %d classes to %s", len(m), len(m.classes), args.out)


def cmd_split(args) -> None:
    import numpy as np

    from .data import Manifest, split_dataset
    _log_args(args)
    if len(args.ratios) != 3:
        raise UsageError("--ratios needs three values")
    m = Manifest.read(args.manifest)
    parts = split_dataset(m, np.random.default_rng(_seed(args)), args.ratios)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        part.write(args.out / f"{name}.tsv")
        log.info("%s: %d records, per-class %s", name, len(part), part.counts().tolist())


def cmd_saliency(args) -> None:
    import numpy as np

    from .imaging import load_image
    from .saliency import add_noise, merge_saliency, minmax_normalize, patch_ratios, static_saliency
    cfg = resolve_config(args)
    if len(args.inputs) > 2:
        raise UsageError("--in takes one image or a tail/head pair")
    imgs = [load_image(p, args.size) for p in args.inputs]
    if len(imgs) == 2 and imgs[0].shape != imgs[1].shape:
        raise UsageError(f"image sizes differ: {imgs[0].shape} vs {imgs[1].shape}; pass --size")
    rng = np.random.default_rng(cfg.seed)
    maps = [static_saliency(im, cfg.windows) for im in imgs]
    merged = maps[0] if len(maps) == 1 else merge_saliency(maps[0], maps[1])
    norm = minmax_normalize(add_noise(merged, cfg.noise, rng))
    from .imaging import save_saliency
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_saliency(norm, args.out)
    ratios = patch_ratios(norm, cfg.grid, cfg.alpha, cfg.ratio_order)
    if args.ratios_out is not None:
        _write_lines(args.ratios_out, ["\t".join(f"{v:.6f}" for v in row) for row in ratios])
    if args.composite is not None:
        from .plotting import saliency_composite
        titles = [p.name for p in args.inputs]
        shown = [minmax_normalize(s) for s in maps]
        if len(imgs) == 2:
            imgs_c, shown, titles = imgs + [imgs[0]], shown + [norm], titles + ["merged"]
        else:
            imgs_c = imgs
        saliency_composite(args.composite, imgs_c, shown, titles, ratios)
    log.info("wrote %s (ratio mean %.4f)", args.out, float(ratios.mean()))


def cmd_augment(args) -> None:
    import numpy as np

    from .data import Manifest, partition_subsets
    cfg = resolve_config(args)
    m = Manifest.read(args.manifest)
    part = partition_subsets(m.counts(), cfg.many_min, cfg.few_max)
    images = m.load_images(cfg.input_size)
    rng = np.random.default_rng(cfg.seed)
    write_mixed_samples(images, m.labels, m.classes, part.head_classes, cfg, args.count, args.out, rng,
                        names=[p for p, _ in m.records])


def cmd_train(args) -> None:
    import numpy as np

    from .data import Manifest, partition_subsets
    from .training import train
    cfg = resolve_config(args)
    m = Manifest.read(args.manifest)
    part = partition_subsets(m.counts(), cfg.many_min, cfg.few_max)
    log.info("subsets: %s", {m.classes[k]: s for k, s in part.assignment.items()})
    _, _, mode = cfg.train_settings().recipe()
    if mode is not None and not part.head_classes:
        raise UsageError("no Many (head) classes to mix with under the current thresholds; lower --many-min")
    images = m.load_images(cfg.input_size)
    labels = m.labels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    _write_partition(out / "partition.tsv", part, m.classes)
    if args.materialize is not None:
        write_mixed_samples(images, labels, m.classes, part.head_classes, cfg, len(labels),
                            args.materialize, np.random.default_rng([cfg.seed, 7]),
                            names=[p for p, _ in m.records])
    metrics = open(out / "metrics.log", "w", encoding="utf-8", newline="\n")
    timing = open(out / "timing.log", "w", encoding="utf-8", newline="\n")

    def on_epoch(epoch, row):
        metrics.write(f"epoch={epoch}\tloss={row['loss']:.8f}\tgrad_norm={row['grad_norm']:.8f}\n")
        metrics.flush()
        timing.write(f"epoch={epoch}\twall_time={row['wall_time']:.3f}\n")
        timing.flush()

    with metrics, timing:
        state = train(images, labels, len(m.classes), part.head_classes, cfg.encoder(),
                      cfg.train_settings(), cfg.seed, dtype=cfg.dtype, on_epoch=on_epoch)
    state.pair.save(out)
    if state.classifier:
        from .autodiff import save_tensors
        save_tensors(out / "classifier.ckpt", state.classifier)
    log.info("saved checkpoint to %s", out)


def cmd_probe(args) -> None:
    import numpy as np

    from .evaluation import extract_features, train_linear_probe
    _log_args(args)
    cfg, pair, classes, _ = _load_checkpoint(args.checkpoint)
    seed = _seed(args)
    epochs = cfg.probe_epochs if args.probe_epochs is None else args.probe_epochs
    m = _manifest_with_classes(args.manifest, classes)
    feats = extract_features(m.load_images(cfg.input_size).astype(cfg.dtype), pair.query, cfg.encoder())
    probe = train_linear_probe(feats, m.labels, len(classes), epochs, np.random.default_rng([seed, 3]),
                               lr=cfg.probe_lr)
    out = args.out or Path(args.checkpoint) / "probe.ckpt"
    probe.save(out)
    _write_lines(Path(out).with_suffix(".log"),
                 [f"epoch={i + 1}\tbalanced_loss={v:.8f}" for i, v in enumerate(probe.history)])
    log.info("probe saved to %s (final balanced loss %.4f)", out, probe.history[-1] if probe.history else float("nan"))


def cmd_eval(args) -> None:
    from .evaluation import LinearProbe, evaluate
    from .plotting import confusion_figure
    _log_args(args)
    cfg, pair, classes, partition = _load_checkpoint(args.checkpoint)
    probe = LinearProbe.load(args.probe or Path(args.checkpoint) / "probe.ckpt")
    m = _manifest_with_classes(args.manifest, classes)
    images = m.load_images(cfg.input_size).astype(cfg.dtype)
    report = evaluate(probe, pair.query, cfg.encoder(), images, m.labels, partition, classes)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.txt").write_text(report.table() + "\n", encoding="utf-8")
    report.write_kv(args.out / "metrics.kv")
    confusion_figure(args.out / "confusion.png", report.confusion, classes)
    log.info("\n%s", report.table())


def cmd_ablate(args) -> None:
    import numpy as np

    from .data import Manifest, SyntheticSpec, generate_synthetic_lt, partition_subsets, split_dataset
    from .experiment import format_ablation, format_runs, run_variant, settings_for
    from .plotting import training_curves, variant_bars
    from .training import VARIANTS

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown variants {bad}; expected from {', '.join(VARIANTS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    synthetic = args.manifest is None
    cfg = resolve_config(args, base=SYNTHETIC_THRESHOLDS if synthetic else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test_path = args.test_manifest
    if synthetic:
        spec = SyntheticSpec(size=cfg.input_size)
        full = generate_synthetic_lt(out / "data", spec, cfg.seed)
        if test_path is None:
            held = SyntheticSpec(counts=(args.heldout_per_class,) * spec.n_classes, size=cfg.input_size)
            generate_synthetic_lt(out / "data", held, cfg.seed + 1000, prefix="heldout_")
            test_path = out / "data" / "heldout_manifest.tsv"
    else:
        full = Manifest.read(args.manifest)
    train_m, _, test_m = split_dataset(full, np.random.default_rng(cfg.seed))
    train_m.write(out / "train.tsv")
    if test_path is not None:
        test_m = _manifest_with_classes(test_path, full.classes)
    test_m.write(out / "test.tsv")
    part = partition_subsets(train_m.counts(), cfg.many_min, cfg.few_max)
    _write_partition(out / "partition.tsv", part, full.classes)
    log.info("subsets: %s", {full.classes[k]: s for k, s in part.assignment.items()})
    x_train = train_m.load_images(cfg.input_size)
    x_test = test_m.load_images(cfg.input_size)
    base = cfg.train_settings()
    results, curves = [], {}
    for v in variants:
        for s in range(cfg.seed, cfg.seed + args.seeds):
            run_dir = out / "runs" / f"{v}_seed{s}"
            run_dir.mkdir(parents=True, exist_ok=True)
            log.info("run %s seed %d", v, s)
            r = run_variant(x_train, train_m.labels, x_test, test_m.labels, part, full.classes,
                            cfg.encoder(), settings_for(base, v), s, cfg.probe_epochs, cfg.dtype)
            _write_lines(run_dir / "metrics.log",
                         [f"epoch={e['epoch']}\tloss={e['loss']:.8f}\tgrad_norm={e['grad_norm']:.8f}"
                          for e in r.epoch_log])
            _write_lines(run_dir / "timing.log",
                         [f"epoch={e['epoch']}\twall_time={e['wall_time']:.3f}" for e in r.epoch_log])
            r.metrics.write_kv(run_dir / "metrics.kv")
            curves.setdefault(v, [e["loss"] for e in r.epoch_log])
            results.append(r)
            # partial tables keep finished runs visible if a later run fails
            (out / "runs.tsv").write_text(format_runs(results), encoding="utf-8")
    (out / "ablation.tsv").write_text(format_ablation(results), encoding="utf-8")
    from .experiment import median_by_variant
    cols = {
        "Many": median_by_variant(results, lambda m: m.subset_accuracy.get("Many")),
        "Medium": median_by_variant(results, lambda m: m.subset_accuracy.get("Medium")),
        "Few": median_by_variant(results, lambda m: m.subset_accuracy.get("Few")),
        "Total": median_by_variant(results, lambda m: m.total_accuracy),
        "F1": median_by_variant(results, lambda m: m.macro_f1),
    }
    variant_bars(out / "ablation.png", variants, {k: [c.get(v) for v in variants] for k, c in cols.items()})
    training_curves(out / "curves.png", curves)
    log.info("\n%s", format_runs(results))


def cmd_convert_csv(args) -> None:
    from .data import manifest_from_label_csv
    _log_args(args)
    m = manifest_from_label_csv(args.csv, args.images, args.image_column, args.extension)
    m.write(args.out)
    log.info("wrote %d records in %d classes to %s", len(m), len(m.classes), args.out)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "split": cmd_split, "saliency": cmd_saliency,
    "augment": cmd_augment, "train": cmd_train, "probe": cmd_probe, "eval": cmd_eval,
    "ablate": cmd_ablate, "convert-csv": cmd_convert_csv,
}


def _thread_limit():
    raw = os.environ.get("SPMIX_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPMIX_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"SPMIX_THREADS must be >= 0, got {n}")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        limiter = _thread_limit()
        try:
            COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spmix {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line diagnostic, full trace only at DEBUG
        log.debug("traceback", exc_info=True)
        print(f"spmix {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
