"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line to the terminal."""
import math
import time

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from test_cli import TINY_CFG, run_pipeline_twice
from test_data_eval import manifest_with_counts
from test_mixup import patchify_average
from test_training import TINY_SETTINGS, oracle_supcon, tiny_data
from spmix import autodiff as ad
from spmix.cli import main
from spmix.data import partition_subsets, split_dataset
from spmix.encoder import EncoderConfig, EncoderPair, init_params
from spmix.evaluation import evaluate_predictions, metrics_from_confusion
from spmix.mixup import mix_features, mix_images
from spmix.saliency import (lesion_ratio, merge_saliency, minmax_normalize, patch_ratios,
                            static_saliency)
from spmix.training import batch_loss, new_state, prepare_batch, sample_balanced_batch, scl_loss


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nAC{n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1

def test_ac1_ratio_formula_exact(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    alpha = 0.8
    bad = 0
    cases = [rng.random((2, 16, 16)) for _ in range(300)]
    cases += [np.zeros((2, 4, 4)), np.ones((2, 4, 4)), np.full((2, 3, 3), 0.8), np.full((2, 3, 3), 0.5)]
    for s_t, s_h in cases:
        expect = np.minimum(alpha, np.maximum(s_t, s_h))
        bad += not np.array_equal(lesion_ratio(s_t, s_h, alpha), expect)
        bad += not np.array_equal(merge_saliency(s_t, s_h), np.maximum(s_t, s_h))
    # clip, degenerate and merge cases
    exact = [
        np.all(patch_ratios(np.ones((8, 8)), 4, alpha) == alpha),
        np.all(patch_ratios(np.zeros((8, 8)), 4, alpha) == 0.0),
        np.all(patch_ratios(np.ones((10, 10)), 4, alpha) == alpha),
        np.all(minmax_normalize(np.full((5, 5), 3.0)) == 0.5),
        np.all(static_saliency(np.full((16, 16, 3), 0.3), (3, 9)) == 0.0),
        merge_saliency(np.array([[0.2, 0.9]]), np.array([[0.5, 0.1]])).tolist() == [[0.5, 0.9]],
        minmax_normalize(np.array([[2.0, 4.0, 6.0]])).tolist() == [[0.0, 0.5, 1.0]],
    ]
    bad += exact.count(False)
    dt = time.perf_counter() - t0
    report(1, bad == 0 and dt < 1.0, f"{len(cases)} random map pairs + {len(exact)} fixed cases, "
                                     f"{bad} mismatches, {dt:.2f}s")


# ---------------------------------------------------------------- 2

def test_ac2_feature_mixing_exact(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(50):
        f_t, f_h = rng.normal(size=(16, 5)), rng.normal(size=(16, 5))
        r = rng.integers(0, 9, (4, 4)) / 8.0          # dyadic, so 1 - (1 - r) == r
        bad += not np.array_equal(mix_features(f_t, f_h, np.zeros((4, 4))).data, f_h)
        bad += not np.array_equal(mix_features(f_t, f_h, np.ones((4, 4))).data, f_t)
        bad += not np.array_equal(mix_features(f_t, f_h, r).data, mix_features(f_h, f_t, 1 - r).data)
    worst = 0.0
    for grid in (1, 2, 4, 8):
        for _ in range(10):
            x_t, x_h = rng.random((16, 16, 3)), rng.random((16, 16, 3))
            r = rng.random((grid, grid))
            feat = mix_features(patchify_average(x_t, grid), patchify_average(x_h, grid), r).data
            img = patchify_average(mix_images(x_t, x_h, r), grid)
            worst = max(worst, float(np.max(np.abs(feat - img))))
    dt = time.perf_counter() - t0
    report(2, bad == 0 and worst <= 1e-9 and dt < 1.0,
           f"{bad} boundary/symmetry mismatches, identity-stem gap {worst:.1e}, {dt:.2f}s")


# ---------------------------------------------------------------- 3

def loop_saliency(img: np.ndarray, windows) -> np.ndarray:
    """Per-pixel loops; each clipped box mean taken directly from its pixels."""
    gray = (img[:, :, 0] + img[:, :, 1] + img[:, :, 2]) / 3.0
    h, w = gray.shape
    out = np.zeros((h, w))
    for k in windows:
        half = k // 2
        for y in range(h):
            for x in range(w):
                box = gray[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1]
                out[y, x] += abs(gray[y, x] - box.sum() / box.size)
    return out


def test_ac3_saliency_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(3, 33, 2)
        side = min(h, w)
        choices = list(range(3, side + 1, 2))
        windows = tuple(sorted(set(rng.choice(choices, size=min(3, len(choices)), replace=False).tolist())))
        img = rng.random((h, w, 3))
        worst = max(worst, float(np.max(np.abs(static_saliency(img, windows) - loop_saliency(img, windows)))))
    dt = time.perf_counter() - t0
    report(3, worst <= 1e-9 and dt < 30, f"200 images up to 32x32, max gap {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 4

def test_ac4_scl_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_val = 0.0
    worst_grad = 0.0
    for i in range(100):
        b = int(rng.integers(2, 17))
        k = int(rng.integers(1, 5))
        q = rng.normal(size=(b, 6))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        key = rng.normal(size=(b, 6))
        key /= np.linalg.norm(key, axis=1, keepdims=True)
        y = rng.integers(0, k, b)
        ref = oracle_supcon(np.concatenate([q, key]), np.concatenate([y, y]), 0.2)
        worst_val = max(worst_val, abs(scl_loss(q, key, y, 0.2).item() - ref))
        if i % 10 == 0:
            qt = ad.Tensor(q.copy(), requires_grad=True)
            with ad.Graph() as g:
                loss = scl_loss(qt, key, y, 0.2)
            ad.backward(g, loss)
            num = numeric_grad(lambda: oracle_supcon(np.concatenate([qt.data, key]),
                                                     np.concatenate([y, y]), 0.2), qt.data, 1e-6)
            worst_grad = max(worst_grad, rel_error(qt.grad, num))
    dt = time.perf_counter() - t0
    report(4, worst_val <= 1e-9 and worst_grad < 1e-4 and dt < 60,
           f"100 batches, max loss gap {worst_val:.1e}, max grad rel err {worst_grad:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 5

def test_ac5_end_to_end_gradient(report):
    t0 = time.perf_counter()
    cfg = EncoderConfig.tiny()
    assert (cfg.grid, cfg.dim, cfg.depth, TINY_SETTINGS.batch_size) == (2, 8, 1, 4)
    images, labels = tiny_data()
    state = new_state(cfg, TINY_SETTINGS, 2, seed=0)
    rng = np.random.default_rng(0)
    draws = sample_balanced_batch(labels, [0], 4, rng)
    batch = prepare_batch(images, labels, draws, TINY_SETTINGS, "saliency_patch", rng)
    with ad.Graph() as g:
        loss = batch_loss(state, batch, TINY_SETTINGS)
    ad.backward(g, loss)

    def value():
        with ad.no_grad():
            return batch_loss(state, batch, TINY_SETTINGS).item()

    pick = np.random.default_rng(5)
    worst, checked = 0.0, 0
    for name, t in state.pair.query.items():
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        for j in pick.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + 1e-6
            hi = value()
            flat[j] = old - 1e-6
            lo = value()
            flat[j] = old
            num = (hi - lo) / 2e-6
            worst = max(worst, abs(grad[j] - num) / max(1.0, abs(grad[j]), abs(num)))
            checked += 1
    dt = time.perf_counter() - t0
    report(5, worst < 1e-4 and dt < 120,
           f"{checked} coordinates over {len(state.pair.query)} tensors, max rel err {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------- 6

def test_ac6_momentum_contract(report):
    t0 = time.perf_counter()
    cfg = EncoderConfig.tiny()
    worst = 0.0
    for m in (0.0, 0.9, 0.99):
        pair = EncoderPair(cfg, init_params(cfg, np.random.default_rng(0)),
                           init_params(cfg, np.random.default_rng(1)), momentum=m)

        def distance():
            return math.sqrt(sum(float(np.sum((pair.key[n].data - pair.query[n].data) ** 2))
                                 for n in pair.query))

        d0 = distance()
        for k in range(1, 21):
            pair.momentum_update()
            worst = max(worst, abs(distance() - m ** k * d0))
    dt = time.perf_counter() - t0
    report(6, worst <= 1e-9 and dt < 1.0, f"m in (0, 0.9, 0.99), 20 steps, max gap {worst:.1e}, {dt:.2f}s")


# ---------------------------------------------------------------- 7 and 8

DESK_VARIANTS = ("ce", "vanilla-mixup", "saliency-only", "spmix")


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """3 seeds x 4 variants on the synthetic long-tailed set, through `spmix ablate`."""
    out = tmp_path_factory.mktemp("desk")
    started = time.perf_counter()
    code = main(["ablate", "--out", str(out), "--variants", ",".join(DESK_VARIANTS),
                 "--seeds", "3", "--seed", "0", "--epochs", "30"])
    assert code == 0
    elapsed = time.perf_counter() - started
    rows = [line.split("\t") for line in (out / "runs.tsv").read_text().splitlines()[1:]]
    runs = [r for r in rows if r[1] != "median"]
    medians = {r[0]: dict(zip(("many", "medium", "few", "total", "f1"), map(float, r[2:7])))
               for r in rows if r[1] == "median"}
    print((out / "runs.tsv").read_text())
    return {"medians": medians, "runs": runs, "elapsed": elapsed, "dir": out}


@pytest.mark.slow
def test_ac7_spmix_lifts_few_without_hurting_many(desk_runs, report):
    med = desk_runs["medians"]
    sp, ce, va = med["spmix"], med["ce"], med["vanilla-mixup"]
    # share of the grid's wall time spent on the three variants this criterion needs
    per_run = desk_runs["elapsed"] / len(desk_runs["runs"])
    minutes = 9 * per_run / 60
    ok = (sp["few"] - va["few"] >= 5 and sp["few"] - ce["few"] >= 5
          and ce["many"] - sp["many"] <= 5 and minutes <= 30)
    report(7, ok, f"median Few spmix {sp['few']:.2f} vs vanilla {va['few']:.2f} / ce {ce['few']:.2f} "
                  f"(need +5 each); Many spmix {sp['many']:.2f} vs ce {ce['many']:.2f} (max drop 5); "
                  f"~{minutes:.1f} min")


@pytest.mark.slow
def test_ac8_ablation_ordering(desk_runs, report):
    med = desk_runs["medians"]
    both, sal, neither = med["spmix"]["total"], med["saliency-only"]["total"], med["vanilla-mixup"]["total"]
    minutes = desk_runs["elapsed"] / 60
    ok = both >= sal - 1 and sal >= neither - 1 and minutes <= 60
    report(8, ok, f"median total both {both:.2f} >= saliency-only {sal:.2f} >= neither {neither:.2f} "
                  f"(1-point ties allowed); {minutes:.1f} min")


# ---------------------------------------------------------------- 9

def test_ac9_protocol(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(30):
        counts = rng.integers(4, 80, rng.integers(1, 6)).tolist()
        m = manifest_with_counts(counts)
        parts = split_dataset(m, np.random.default_rng(int(rng.integers(1 << 31))))
        sets = [set(p for p, _ in s.records) for s in parts]
        bad += sets[0] | sets[1] | sets[2] != set(p for p, _ in m.records)
        bad += sum(len(s) for s in sets) != len(m)
        bad += len(set(parts[1].counts().tolist())) != 1 or len(set(parts[2].counts().tolist())) != 1
    f1 = metrics_from_confusion(np.array([[3, 1], [2, 4]]), None).macro_f1
    bad += abs(f1 - 0.6970) >= 1e-4
    part = partition_subsets([100, 40, 40, 5], 80, 10)
    for _ in range(30):
        y, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        r = evaluate_predictions(y, p, 4, part)
        cm = r.confusion
        for name, cls in (("Many", [0]), ("Medium", [1, 2]), ("Few", [3])):
            n = cm[cls].sum()
            want = None if n == 0 else np.diag(cm)[cls].sum() / n
            got = r.subset_accuracy[name]
            bad += (want is None) != (got is None) or (want is not None and abs(got - want) > 1e-12)
        bad += abs(r.total_accuracy - np.trace(cm) / cm.sum()) > 1e-12
    dt = time.perf_counter() - t0
    report(9, bad == 0 and dt < 5, f"split/F1/subset checks, {bad} failures, macro-F1 {f1:.4f}, {dt:.2f}s")


# ---------------------------------------------------------------- 10

def test_ac10_cli_determinism(tmp_path, report):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    a, b = run_pipeline_twice(tmp_path, cfg)
    # wall-clock timings are the only non-deterministic output and live in their own file
    a.pop("ck/timing.log")
    b.pop("ck/timing.log")
    differ = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(a) ^ set(b))
    kinds = {k.split("/")[0] for k in a}
    report(10, not differ, f"{len(a)} files across {sorted(kinds)}, {len(differ)} differ")
