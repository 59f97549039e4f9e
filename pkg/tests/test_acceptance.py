"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 6 and 7 train real models and take several minutes.
"""
import hashlib
import statistics
import time

import numpy as np
import pytest

from modenorm import checkpoint as ck
from modenorm.cli import main
from modenorm.data import idx_parse, synth_generate
from modenorm.harness import (
    RunConfig,
    evaluate,
    first_layer_purity,
    gate_report,
    load_checkpoint,
    run_gradcheck,
    sweep,
    train,
)
from modenorm.norm import (
    BatchNorm,
    GroupNorm,
    InstanceNorm,
    LayerNorm,
    ModeGroupNorm,
    ModeNorm,
)
from tests.test_data import IMAGE_FIXTURE, LABEL_FIXTURE


def random_batch(rng):
    n, c = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return rng.normal(size=(n, c, h, w)) * rng.uniform(0.5, 3.0) + rng.normal() * 2


def test_c1_equivalence_lattice(record):
    rng = np.random.default_rng(2024)
    worst = {"mn1-bn": 0.0, "mn-uniform-bn": 0.0, "gn1-ln": 0.0, "gnC-in": 0.0}
    start = time.perf_counter()
    for _ in range(100):
        x = random_batch(rng)
        c = x.shape[1]
        bn = BatchNorm(c).forward(x)
        k = int(rng.integers(2, 5))
        worst["mn1-bn"] = max(worst["mn1-bn"], np.abs(ModeNorm(c, modes=1).forward(x) - bn).max())
        worst["mn-uniform-bn"] = max(worst["mn-uniform-bn"], np.abs(ModeNorm(c, modes=k).forward(x) - bn).max())
        worst["gn1-ln"] = max(worst["gn1-ln"], np.abs(GroupNorm(c, 1).forward(x) - LayerNorm(c).forward(x)).max())
        worst["gnC-in"] = max(worst["gnC-in"], np.abs(GroupNorm(c, c).forward(x) - InstanceNorm(c).forward(x)).max())
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-10 for v in worst.values()) and elapsed < 5.0
    record("C1 equivalence lattice", ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s")
    assert ok


def test_c2_weighted_moments(record):
    rng = np.random.default_rng(7)
    worst_first, worst_second, floored = 0.0, 0.0, 0
    start = time.perf_counter()
    for _ in range(100):
        x = random_batch(rng)
        n, c, h, w = x.shape
        k = int(rng.integers(1, 4))
        layer = ModeNorm(c, modes=k)
        layer.params["gate_weight"][...] = rng.normal(size=(k, c))
        layer.params["gate_bias"][...] = rng.normal(size=k)
        layer.forward(x)
        cache = layer._cache
        for mode in range(k):
            if cache.floored[mode]:
                # below the mass floor the mode uses plain batch statistics
                floored += 1
                continue
            g = cache.gates[:, mode][:, None, None, None]
            mass = cache.counts[mode] * h * w
            xhat = cache.xhat[:, mode]
            var = np.maximum(layer.stats.batch_m2[mode] - layer.stats.batch_m1[mode] ** 2, 0.0)
            first = (g * xhat).sum(axis=(0, 2, 3)) / mass
            second = (g * xhat**2).sum(axis=(0, 2, 3)) / mass
            worst_first = max(worst_first, np.abs(first).max())
            worst_second = max(worst_second, np.abs(second - var / (var + layer.eps)).max())
    elapsed = time.perf_counter() - start
    ok = worst_first < 1e-8 and worst_second < 1e-6 and elapsed < 5.0
    record("C2 weighted-moment invariants", ok,
           f"max |mean|={worst_first:.1e}, max |second - s/(s+eps)|={worst_second:.1e}, "
           f"{floored} floored modes skipped, {elapsed:.2f}s")
    assert ok


def test_c3_gradient_certification(record):
    start = time.perf_counter()
    summary = []
    ok = True
    for kind in ("bn", "in", "ln", "gn", "mn", "mgn", "dense", "xent"):
        reports = run_gradcheck(kind, seeds=range(20), h=1e-6, rtol=1e-5, atol=1e-8)
        passed = all(r.passed for r in reports)
        ok &= passed
        summary.append(f"{kind}:{len(reports)}{'ok' if passed else 'FAIL'}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    record("C3 gradient certification (20 seeds each, rtol 1e-5, atol 1e-8)", ok, " ".join(summary) + f", {elapsed:.1f}s")
    assert ok


def test_c4_mgn_phase_identity(record):
    rng = np.random.default_rng(3)
    identical = True
    for _ in range(20):
        x = random_batch(rng)
        layer = ModeGroupNorm(x.shape[1], modes=int(rng.integers(1, 4)))
        layer.params["gate_weight"][...] = rng.normal(size=layer.modes)
        layer.params["gate_bias"][...] = rng.normal(size=layer.modes)
        identical &= layer.train().forward(x).tobytes() == layer.eval().forward(x).tobytes()
    record("C4 MGN train/eval bit-identical", identical, "20 random inputs")
    assert identical


def test_c5_test_phase_semantics(record):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        x = random_batch(rng)
        c = x.shape[1]
        layer = ModeNorm(c, modes=2, lam=1.0)
        layer.params["gate_weight"][...] = rng.normal(size=(2, c))
        y_train = layer.train().forward(x)
        worst = max(worst, np.abs(layer.eval().forward(x) - y_train).max())

    cfg = RunConfig(norm="mn", epochs=1, n_train=256, n_test=128, batch_size=64, hidden=8, out="unused")
    res = train(cfg, write=False)
    model, cfg2, echo = load_checkpoint(res.checkpoint_bytes)
    before = hashlib.sha256(ck.dumps(model.state_tensors(), echo)).hexdigest()
    evaluate(model, synth_generate(cfg2.synth_config())[1])
    after = hashlib.sha256(ck.dumps(model.state_tensors(), echo)).hexdigest()
    ok = worst < 1e-12 and before == after == hashlib.sha256(res.checkpoint_bytes).hexdigest()
    record("C5 eval after one lambda=1 batch", ok, f"max |eval - train|={worst:.1e}, checkpoint hash unchanged={before == after}")
    assert ok


def _bench(norm, seed):
    cfg = RunConfig(norm=norm, modes=2, epochs=15, seed=seed, out="unused")
    start = time.perf_counter()
    res = train(cfg, write=False)
    elapsed = time.perf_counter() - start
    pur = None
    if norm == "mn":
        _, test_ds = synth_generate(cfg.synth_config())
        pur = first_layer_purity(gate_report(res.model, test_ds))
    return res.final_test_error, res.rows[-1][2], pur, elapsed


def test_c6_heterogeneity_benchmark(record):
    seeds = range(5)
    bn = [_bench("bn", s) for s in seeds]
    mn = [_bench("mn", s) for s in seeds]
    med = lambda rows, i: statistics.median(r[i] for r in rows)
    slowest = max(r[3] for r in bn + mn)
    ok = med(mn, 0) <= med(bn, 0) and med(mn, 2) >= 0.9 and slowest < 120
    record("C6 heterogeneity benchmark", ok,
           f"median test error MN={med(mn, 0):.4f} BN={med(bn, 0):.4f}; median test loss MN={med(mn, 1):.2e} "
           f"BN={med(bn, 1):.2e}; median purity={med(mn, 2):.3f}; slowest run {slowest:.1f}s")
    assert ok


def test_c7_batch_size_mode_sweep(record, tmp_path):
    start = time.perf_counter()
    base = RunConfig(epochs=15, out=str(tmp_path / "sweep"))
    out = sweep(base, [32, 128, 512], [1, 2, 4, 6], range(5), jobs=1)
    elapsed = time.perf_counter() - start
    med = out["medians"]
    best_multi = min(med[(512, k)] for k in (2, 4, 6))
    rows_ok = len(out["rows"]) == 60 and all(r[4] == "ok" for r in out["rows"])
    ok = rows_ok and best_multi <= med[(512, 1)] and elapsed < 1800 and (tmp_path / "sweep" / "trend.txt").exists()
    record("C7 batch-size x K sweep", ok,
           f"N=512: best K>1 median={best_multi:.4f} vs K=1 median={med[(512, 1)]:.4f}; {elapsed:.0f}s")
    assert ok


def test_c8_running_estimate_convergence(record):
    rng = np.random.default_rng(8)
    means = np.array([[-4.0, 1.0], [4.0, -2.0]])  # mode x channel
    layer = ModeNorm(2, modes=2, lam=0.1)
    # channel 0 alone decides the mode
    layer.params["gate_weight"][...] = [[-20.0, 0.0], [20.0, 0.0]]
    for _ in range(1000):
        modes = rng.integers(0, 2, size=4096)
        x = rng.normal(size=(4096, 2, 4, 4)) + means[modes][:, :, None, None]
        layer.forward(x)
    err = np.abs(layer.stats.run_m1 - means).max()
    ok = err < 1e-2
    record("C8 running-estimate convergence", ok, f"max |running mean - true mode mean|={err:.1e} after 1000 batches")
    assert ok


def test_c9_persistence_and_ingestion(record, tmp_path, capsys):
    res = train(RunConfig(norm="mn", epochs=1, n_train=256, n_test=64, batch_size=64, hidden=8,
                          out=str(tmp_path / "run")))
    tensors, config = ck.loads(res.checkpoint_bytes)
    round_trip = ck.dumps(tensors, config) == res.checkpoint_bytes

    images = idx_parse(IMAGE_FIXTURE)
    want = np.array(list(IMAGE_FIXTURE[16:]), dtype=float).reshape(2, 1, 3, 3) / 255.0
    idx_ok = images.shape == (2, 1, 3, 3) and np.array_equal(images, want)
    idx_ok &= idx_parse(LABEL_FIXTURE).tolist() == [7, 3]

    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "train-images-idx3-ubyte").write_bytes(bytes([0, 0, 8, 7]) + IMAGE_FIXTURE[4:])
    (bad / "train-labels-idx1-ubyte").write_bytes(LABEL_FIXTURE)
    bad_idx = main(["train", "--data", "idx", "--data-dir", str(bad), "--out", str(tmp_path / "o")])
    bad_ckpt = tmp_path / "bad.mncp"
    bad_ckpt.write_bytes(b"XXXX" + res.checkpoint_bytes[4:])
    bad_magic = main(["eval", str(bad_ckpt)])
    capsys.readouterr()
    ok = round_trip and idx_ok and bad_idx == 1 and bad_magic == 1
    record("C9 persistence and ingestion", ok,
           f"round trip={round_trip}, idx fixtures={idx_ok}, bad idx exit={bad_idx}, bad checkpoint exit={bad_magic}")
    assert ok


def test_c10_determinism(record, tmp_path, capsys):
    args = ["train", "--norm", "mn", "--modes", "2", "--epochs", "3", "--n-train", "1024", "--n-test", "256",
            "--seed", "11"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = a == b
    record("C10 determinism", ok, f"metrics CSVs byte-identical ({len(a)} bytes)")
    assert ok
