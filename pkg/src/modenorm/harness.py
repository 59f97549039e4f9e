"""Training, evaluation, gradient certification, sweeps and gate reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import checkpoint
from .data import Dataset, SynthConfig, batches, load_idx_dataset, synth_generate
from .gradcheck import DEFAULT_ATOL, DEFAULT_RTOL, DEFAULT_STEP, GradReport, check, numeric_grad
from .nn import (
    Dense,
    Model,
    NumericalError,
    ReLU,
    SgdConfig,
    default_milestones,
    lr_schedule,
    softmax_xent,
)
from .norm import KINDS, ModeGroupNorm, ModeNorm, NonFiniteError, NormLayer, make_norm
from .tensor import Rng, randn

log = logging.getLogger(__name__)

METRICS_VERSION = "modenorm-metrics v1"
CHECKPOINT_NAME = "checkpoint.mncp"
METRICS_NAME = "metrics.csv"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    norm: str = "bn"
    modes: int = 2
    groups: int = 2
    batch_size: int = 128
    epochs: int = 15
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 0.1
    eps: float = 1e-5
    seed: int = 0
    data: str = "synth"
    data_dir: str = ""
    milestones: tuple = ()  # empty: decay at 65% and 80% of the epochs
    out: str = "runs/default"
    hidden: int = 32
    gate_noise: float = 1e-3
    # synthetic data
    synth_modes: int = 2
    classes: int = 4
    n_train: int = 8000
    n_test: int = 2000
    separation: float = 6.0
    scale_ratio: float = 2.0

    def validate(self) -> "RunConfig":
        if self.norm not in KINDS:
            raise ConfigError(f"norm must be one of {KINDS}")
        if self.data not in ("synth", "idx"):
            raise ConfigError("data must be 'synth' or 'idx'")
        if self.data == "idx" and not self.data_dir:
            raise ConfigError("--data idx needs --data-dir")
        checks = [
            (self.modes >= 1, "modes must be >= 1"),
            (self.groups >= 1, "groups must be >= 1"),
            (self.batch_size >= 1, "batch size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.lr > 0, "learning rate must be positive"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0, "weight decay must be >= 0"),
            (0 < self.lam <= 1, "lambda must lie in (0, 1]"),
            (self.eps > 0, "eps must be positive"),
            (self.hidden >= 1, "hidden width must be >= 1"),
            (list(self.milestones) == sorted(self.milestones), "milestones must be sorted"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def schedule(self) -> tuple:
        return tuple(self.milestones) or default_milestones(self.epochs)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            modes=self.synth_modes,
            classes=self.classes,
            n_train=self.n_train,
            n_test=self.n_test,
            separation=self.separation,
            scale_ratio=self.scale_ratio,
            seed=self.seed,
        )

    def echo(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_echo(cls, echo: dict) -> "RunConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in echo:
                continue
            raw = echo[f.name]
            default = f.default
            if isinstance(default, bool):
                kwargs[f.name] = raw == "True"
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            elif isinstance(default, tuple):
                kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.data == "synth":
        return synth_generate(cfg.synth_config())
    return load_idx_dataset(cfg.data_dir, "train"), load_idx_dataset(cfg.data_dir, "test")


def build_model(cfg: RunConfig, input_shape, classes: int, gate_noise: float | None = None) -> Model:
    return Model.mlp(
        input_shape, cfg.hidden, classes, cfg.norm, Rng(cfg.seed),
        modes=cfg.modes, groups=cfg.groups, lam=cfg.lam, eps=cfg.eps,
        gate_noise=cfg.gate_noise if gate_noise is None else gate_noise,
    )


def model_modes(model: Model) -> int:
    return max([l.modes for l in model.norm_layers()] + [1])


def _gate_usage(model: Model, k: int) -> np.ndarray:
    usages = [u for u in (l.gate_usage() for l in model.norm_layers()) if u is not None]
    if not usages:
        return np.ones(k) / k if k > 1 else np.ones(1)
    return np.mean(usages, axis=0)


class _Accumulator:
    def __init__(self, k):
        self.n = 0
        self.loss = 0.0
        self.errors = 0
        self.usage = np.zeros(k)

    def add(self, loss, logits, labels, usage):
        n = len(labels)
        self.n += n
        self.loss += loss * n
        self.errors += int(np.sum(logits.argmax(axis=1) != labels))
        self.usage += usage * n

    def row(self, epoch, split):
        return [epoch, split, self.loss / self.n, self.errors / self.n] + list(self.usage / self.n)


def evaluate(model: Model, ds: Dataset, batch_size: int = 1000) -> dict:
    """Eval-phase pass over ``ds``; never touches running statistics."""
    k = model_modes(model)
    was_training = [l.training for l in model.norm_layers()]
    model.eval()
    acc = _Accumulator(k)
    try:
        for x, y, _ in batches(ds, min(batch_size, len(ds))):
            logits = model.forward(x)
            loss, _ = softmax_xent(logits, y)
            acc.add(loss, logits, y, _gate_usage(model, k))
    finally:
        for l, t in zip(model.norm_layers(), was_training):
            l.training = t
    return {"loss": acc.loss / acc.n, "error_rate": acc.errors / acc.n, "gate_usage": acc.usage / acc.n}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_header(k: int) -> list:
    return ["epoch", "split", "loss", "error_rate"] + [f"gate_usage_{i + 1}" for i in range(k)]


@dataclass
class TrainResult:
    model: Model
    rows: list
    metrics_csv: str
    checkpoint_bytes: bytes
    final_test_error: float
    final_train_loss: float
    first_train_loss: float
    out_dir: Path | None = None
    extra: dict = field(default_factory=dict)


def train(cfg: RunConfig, data: tuple[Dataset, Dataset] | None = None, write: bool = True) -> TrainResult:
    """Train the MLP described by ``cfg`` and return metrics plus checkpoint bytes.

    Raises NumericalError (after recording an ``abort`` row) on a non-finite loss.
    """
    cfg.validate()
    train_ds, test_ds = data if data is not None else load_data(cfg)
    classes = max(train_ds.num_classes, test_ds.num_classes)
    model = build_model(cfg, train_ds.features.shape[1:], classes)
    k = model_modes(model)
    sgd = SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    order_rng = Rng(cfg.seed).spawn(3)
    milestones = cfg.schedule()
    rows = []
    out_dir = Path(cfg.out) if write else None

    def flush():
        buf = io.StringIO()
        buf.write(f"# {METRICS_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(metrics_header(k))
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        text = buf.getvalue()
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / METRICS_NAME).write_text(text)
        return text

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch - 1, cfg.lr, milestones)
        acc = _Accumulator(k)
        for x, y, _ in batches(train_ds, cfg.batch_size, order_rng, shuffle=True):
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    logits = model.forward(x)
                    loss, dlogits = softmax_xent(logits, y)
                except NonFiniteError:
                    loss = float("nan")
            if not math.isfinite(loss):
                rows.append([epoch, "abort", loss, float("nan")] + [float("nan")] * k)
                flush()
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            model.backward(dlogits)
            model.step(sgd, lr)
            acc.add(loss, logits, y, _gate_usage(model, k))
        rows.append(acc.row(epoch, "train"))
        ev = evaluate(model, test_ds)
        rows.append([epoch, "test", ev["loss"], ev["error_rate"]] + list(ev["gate_usage"]))
        log.info("epoch %d train_loss=%.4f test_err=%.4f", epoch, rows[-2][2], ev["error_rate"])
        model.train()

    text = flush()
    ckpt = checkpoint.dumps(model.state_tensors(), checkpoint_config(cfg, train_ds, classes))
    if out_dir is not None:
        (out_dir / CHECKPOINT_NAME).write_bytes(ckpt)
    train_rows = [r for r in rows if r[1] == "train"]
    return TrainResult(model, rows, text, ckpt, rows[-1][3], train_rows[-1][2], train_rows[0][2], out_dir)


def checkpoint_config(cfg: RunConfig, ds: Dataset, classes: int) -> dict:
    echo = cfg.echo()
    echo["input_shape"] = tuple(ds.features.shape[1:])
    echo["num_classes"] = classes
    return echo


def load_checkpoint(path_or_bytes) -> tuple[Model, RunConfig, dict]:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        tensors, echo = checkpoint.loads(bytes(path_or_bytes))
    else:
        tensors, echo = checkpoint.load(path_or_bytes)
    try:
        cfg = RunConfig.from_echo(echo)
        shape = tuple(int(v) for v in echo["input_shape"].split(","))
        classes = int(echo["num_classes"])
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"checkpoint config incomplete: {exc}") from exc
    model = build_model(cfg, shape, classes, gate_noise=0.0)
    model.load_state_tensors(tensors)
    return model, cfg, echo


def eval_checkpoint(path, ds: Dataset | None = None) -> dict:
    model, cfg, echo = load_checkpoint(path)
    if ds is None:
        ds = load_data(cfg)[1]
    expected = tuple(int(v) for v in echo["input_shape"].split(","))
    if tuple(ds.features.shape[1:]) != expected:
        raise ConfigError(f"data samples have shape {ds.features.shape[1:]}; checkpoint expects {expected}")
    return evaluate(model, ds)


# -- gradient certification -------------------------------------------------

GRAD_KINDS = KINDS + ("dense", "xent", "relu", "model")


def _random_layer(kind: str, rng: np.random.Generator):
    n = int(rng.integers(2, 7))
    c = int(rng.choice([2, 4])) if kind == "gn" else int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    layer = make_norm(kind, c, modes=k, groups=2 if kind == "gn" else 1)
    layer.params["alpha"][...] = 1.0 + 0.3 * rng.normal(size=c)
    layer.params["beta"][...] = rng.normal(size=c)
    if "gate_weight" in layer.params:
        layer.params["gate_weight"][...] = rng.normal(size=layer.params["gate_weight"].shape)
        layer.params["gate_bias"][...] = 0.5 * rng.normal(size=layer.params["gate_bias"].shape)
    x = rng.normal(size=(n, c, h, w)) * rng.uniform(0.5, 2.0) + rng.normal()
    return layer, x


def gradcheck_layer(layer, x: np.ndarray, rng: np.random.Generator, h=DEFAULT_STEP,
                    rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, tag="") -> list[GradReport]:
    """Compare layer.backward against central differences of sum(upstream * forward(x))."""
    upstream = rng.normal(size=layer.forward(x).shape)

    def f(_):
        return float(np.sum(upstream * layer.forward(x)))

    layer.forward(x)
    dx = layer.backward(upstream)
    analytic = {name: g.copy() for name, g in layer.grads.items()}
    reports = [check(dx, numeric_grad(f, x, h), rtol, atol, name=f"{tag}x")]
    for name, p in layer.params.items():
        reports.append(check(analytic[name], numeric_grad(f, p, h), rtol, atol, name=f"{tag}{name}"))
    return reports


def _model_case(rng: np.random.Generator, norm: str):
    n = int(rng.integers(2, 5))
    c, hh, ww = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    hidden = int(rng.integers(2, 7))
    classes = int(rng.integers(2, 5))
    model = Model.mlp((c, hh, ww), hidden, classes, norm, Rng(int(rng.integers(1 << 30))), modes=2,
                      groups=2, gate_noise=0.5)
    # keep norm outputs off the ReLU kink even when a window is a single value
    for layer in model.norm_layers():
        layer.params["beta"][...] = 0.5 + 0.3 * rng.normal(size=layer.channels)
    x = rng.normal(size=(n, c, hh, ww))
    y = rng.integers(0, classes, size=n)
    return model, x, y


def gradcheck_model(rng, norm="mn", h=DEFAULT_STEP, rtol=1e-4, atol=DEFAULT_ATOL) -> list[GradReport]:
    """End-to-end check of norm -> dense -> norm -> relu -> ... -> cross-entropy."""
    model, x, y = _model_case(rng, norm)

    def f(_):
        return softmax_xent(model.forward(x), y)[0]

    _, d = softmax_xent(model.forward(x), y)
    dx = model.backward(d)
    analytic = {k: v.copy() for k, v in model.named_grads().items()}
    reports = [check(dx, numeric_grad(f, x, h), rtol, atol, name=f"model[{norm}].x")]
    for name, p in model.named_params().items():
        reports.append(check(analytic[name], numeric_grad(f, p, h), rtol, atol, name=f"model[{norm}].{name}"))
    return reports


def run_gradcheck(kind: str, seeds=range(20), h=DEFAULT_STEP, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                  layer_factory=None) -> list[GradReport]:
    """Randomized finite-difference certification for one layer kind."""
    if kind not in GRAD_KINDS:
        raise ConfigError(f"unknown gradcheck kind {kind!r}; expected one of {GRAD_KINDS}")
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        tag = f"{kind}[seed={seed}]."
        if kind in KINDS:
            layer, x = _random_layer(kind, rng)
            if layer_factory is not None:
                layer = layer_factory(layer)
            reports += gradcheck_layer(layer, x, rng, h, rtol, atol, tag)
        elif kind == "dense":
            n_in, n_out = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            layer = Dense(n_in, n_out, Rng(seed))
            layer.params["bias"][...] = rng.normal(size=n_out)
            x = rng.normal(size=(int(rng.integers(1, 6)), n_in))
            reports += gradcheck_layer(layer, x, rng, h, rtol, atol, tag)
        elif kind == "relu":
            x = rng.normal(size=(4, 5))
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
            reports += gradcheck_layer(ReLU(), x, rng, h, rtol, atol, tag)
        elif kind == "xent":
            n, classes = int(rng.integers(1, 7)), int(rng.integers(2, 7))
            logits = 2.0 * rng.normal(size=(n, classes))
            labels = rng.integers(0, classes, size=n)
            _, d = softmax_xent(logits, labels)
            num = numeric_grad(lambda z: softmax_xent(z, labels)[0], logits, h)
            reports.append(check(d, num, rtol, atol, name=f"{tag}logits"))
        else:
            reports += gradcheck_model(rng, "mn", h, max(rtol, 1e-4), atol)
    return reports


# -- sweep -------------------------------------------------------------------

SWEEP_HEADER = ["batch_size", "modes", "seed", "final_test_error", "status"]


def _sweep_cell(args):
    base, n, k, seed = args
    cfg = dataclasses.replace(base, norm="mn", batch_size=n, modes=k, seed=seed,
                              out=str(Path(base.out) / "cells" / f"N{n}_K{k}_s{seed}"))
    try:
        res = train(cfg)
        return n, k, seed, res.final_test_error, "ok"
    except (NumericalError, ValueError) as exc:
        log.error("sweep cell N=%d K=%d seed=%d failed: %s", n, k, seed, exc)
        return n, k, seed, float("nan"), f"failed: {exc}".replace(",", ";")


def sweep(base: RunConfig, batch_sizes, modes, seeds, jobs: int = 1) -> dict:
    """Train MN for every (N, K, seed); write sweep.csv and trend.txt under base.out."""
    base.validate()
    cells = [(base, n, k, s) for n in batch_sizes for k in modes for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    medians = {}
    for n in batch_sizes:
        for k in modes:
            errs = [r[3] for r in results if r[0] == n and r[1] == k and r[4] == "ok"]
            medians[(n, k)] = float(np.median(errs)) if errs else float("nan")

    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in results:
        w.writerow([r[0], r[1], r[2], _fmt(float(r[3])), r[4]])
    for (n, k), med in medians.items():
        w.writerow([n, k, "median", _fmt(med), "summary"])
    (out / "sweep.csv").write_text(buf.getvalue())

    lines = ["median final test error by batch size (rows) and mode count (columns)",
             "N\t" + "\t".join(f"K={k}" for k in modes)]
    for n in batch_sizes:
        lines.append(f"{n}\t" + "\t".join(f"{medians[(n, k)]:.4f}" for k in modes))
        multi = [(medians[(n, k)], k) for k in modes if k > 1 and not math.isnan(medians[(n, k)])]
        if 1 in modes and multi:
            best, kbest = min(multi)
            verdict = "<=" if best <= medians[(n, 1)] else ">"
            lines.append(f"  N={n}: best K>1 is K={kbest} ({best:.4f}) {verdict} K=1 ({medians[(n, 1)]:.4f})")
    trend = "\n".join(lines) + "\n"
    (out / "trend.txt").write_text(trend)
    return {"rows": results, "medians": medians, "trend": trend}


# -- gate reports ------------------------------------------------------------

def purity(assign: np.ndarray, truth: np.ndarray) -> float:
    """Accuracy of the best one-to-one matching between gate argmax and true modes."""
    assign = np.asarray(assign, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    conf = np.zeros((assign.max() + 1, truth.max() + 1))
    np.add.at(conf, (assign, truth), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    return float(conf[rows, cols].sum() / len(truth))


def sample_gates(layer: NormLayer) -> np.ndarray:
    """N x K gates from the layer's last forward (channel gates averaged for MGN)."""
    g = layer._last_gates
    return g.mean(axis=1) if isinstance(layer, ModeGroupNorm) else g


def gate_report(model: Model, ds: Dataset, top_p: int = 5) -> list[dict]:
    gated = [(i, l) for i, l in enumerate(model.layers) if isinstance(l, (ModeNorm, ModeGroupNorm))]
    if not gated:
        raise ConfigError("model has no gated normalization layer")
    collected = {i: [] for i, _ in gated}
    model.eval()
    for x, _, _ in batches(ds, min(1000, len(ds))):
        model.forward(x)
        for i, l in gated:
            collected[i].append(sample_gates(l))
    report = []
    for i, l in gated:
        g = np.concatenate(collected[i])
        pur = None
        if ds.mode_labels is not None:
            pur = purity(g.argmax(axis=1), ds.mode_labels)
        for k in range(g.shape[1]):
            # stable sort so ties resolve to the lowest sample index
            top = np.argsort(-g[:, k], kind="stable")[:top_p]
            report.append({
                "layer": i, "kind": l.kind, "mode": k + 1, "mean_gate": float(g[:, k].mean()),
                "purity": pur, "top_samples": [int(t) for t in top],
            })
    return report


def format_gate_report(report: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "mode", "mean_gate", "purity", "top_samples"])
    for r in report:
        pur = "" if r["purity"] is None else _fmt(r["purity"])
        w.writerow([r["layer"], r["kind"], r["mode"], _fmt(r["mean_gate"]), pur,
                    " ".join(str(t) for t in r["top_samples"])])
    return buf.getvalue()


def first_layer_purity(report: list[dict]) -> float | None:
    first = min(r["layer"] for r in report)
    return next(r["purity"] for r in report if r["layer"] == first)


def default_jobs() -> int:
    return max(1, min(8, os.cpu_count() or 1))
