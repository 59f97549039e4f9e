"""Normalization layers: BN, IN, LN, GN, mode norm (MN) and mode group norm (MGN).

All layers take ``N x C x H x W`` float64 tensors and share one interface:

    y = layer.forward(x)        # honours layer.training
    dx = layer.backward(dy)     # fills layer.grads; needs a training-phase forward

Variances are biased (divided by the effective count). ``eps`` is added to
the variance before the square root.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gating import (
    ChannelGatingParams,
    SampleGatingParams,
    gate_backward,
    gate_channels,
    gate_samples,
    pool_spatial,
)

DEFAULT_EPS = 1e-5
DEFAULT_LAMBDA = 0.1
# below this gate mass a mode falls back to the unweighted statistics
MIN_MODE_MASS = 1e-6

KINDS = ("bn", "in", "ln", "gn", "mn", "mgn")


class NormError(ValueError):
    pass


class UninitializedStatsError(NormError):
    pass


class NonFiniteError(NormError, ArithmeticError):
    pass


class MissingCacheError(RuntimeError):
    pass


def _chan(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def _check_input(x: np.ndarray, channels: int) -> None:
    if x.ndim != 4:
        raise NormError(f"expected N x C x H x W input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise NormError(f"expected {channels} channels, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite values in normalization input")


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam <= 1.0:
        raise NormError(f"running-estimate memory must lie in (0, 1], got {lam}")


@dataclass
class ModeStats:
    """Per-mode raw moments: batch-local and running (exponential average)."""

    modes: int
    channels: int
    batch_m1: np.ndarray = None
    batch_m2: np.ndarray = None
    counts: np.ndarray = None
    run_m1: np.ndarray = None
    run_m2: np.ndarray = None
    initialized: bool = False

    def __post_init__(self):
        shape = (self.modes, self.channels)
        for name in ("batch_m1", "batch_m2", "run_m1", "run_m2"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        if self.counts is None:
            self.counts = np.zeros(self.modes)


def mn_stats(x: np.ndarray, gates: np.ndarray):
    """Gate-weighted per-(mode, channel) raw moments of a batch.

    Returns ``(counts, m1, m2, weights, floored)``. ``weights[n, k]`` is the
    factor sample n contributes to mode k's pooled moments; modes whose gate
    mass is below ``MIN_MODE_MASS`` use the plain batch average instead.
    """
    n = x.shape[0]
    counts = gates.sum(axis=0)
    floored = counts < MIN_MODE_MASS
    weights = gates / np.where(floored, 1.0, counts)
    weights[:, floored] = 1.0 / n
    xp = x.mean(axis=(2, 3))
    xp2 = (x * x).mean(axis=(2, 3))
    return counts, weights.T @ xp, weights.T @ xp2, weights, floored


def mn_update_running(stats: ModeStats, lam: float, skip=None) -> None:
    """Blend batch moments into the running ones: run <- lam*batch + (1-lam)*run.

    The first update copies the batch moments. Modes flagged in ``skip`` keep
    their running values.
    """
    _check_lambda(lam)
    rate = 1.0 if not stats.initialized else lam
    keep = np.zeros(stats.modes, dtype=bool) if skip is None else np.asarray(skip, dtype=bool)
    upd = ~keep[:, None]
    new_m1 = rate * stats.batch_m1 + (1.0 - rate) * stats.run_m1
    new_m2 = rate * stats.batch_m2 + (1.0 - rate) * stats.run_m2
    stats.run_m1 = np.where(upd, new_m1, stats.run_m1)
    stats.run_m2 = np.where(upd, new_m2, stats.run_m2)
    stats.initialized = True


def _inv_std(m1, m2, eps):
    raw = m2 - m1 * m1
    var = np.maximum(raw, 0.0)
    return 1.0 / np.sqrt(var + eps), var, raw >= 0.0


class NormLayer:
    kind = ""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS):
        if channels < 1:
            raise NormError("channels must be >= 1")
        if eps <= 0:
            raise NormError("eps must be positive")
        self.channels = channels
        self.eps = eps
        self.training = True
        self.params = {"alpha": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def modes(self) -> int:
        return 1

    def buffers(self) -> dict:
        return {}

    def load_buffers(self, buffers: dict) -> None:
        pass

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def _affine(self, xhat):
        return _chan(self.params["alpha"]) * xhat + _chan(self.params["beta"])

    def _affine_backward(self, dy, xhat):
        self.grads["alpha"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        return dy * _chan(self.params["alpha"])

    def _need_cache(self):
        if self._cache is None:
            raise MissingCacheError(f"{self.kind}: backward needs a training-phase forward first")
        return self._cache

    def gate_usage(self):
        return None


def _normalize(x, axes, eps):
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv, inv, mean, var


def _normalize_backward(dxhat, xhat, inv, axes):
    return inv * (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    )


class _WindowNorm(NormLayer):
    """Per-sample normalization over a fixed window of a reshaped view."""

    def _view(self, x):
        raise NotImplementedError

    axes: tuple = ()

    def forward(self, x):
        _check_input(x, self.channels)
        v = self._view(x)
        xhat, inv, _, _ = _normalize(v, self.axes, self.eps)
        xhat = xhat.reshape(x.shape)
        self._cache = (xhat, inv)
        return self._affine(xhat)

    def backward(self, dy):
        xhat, inv = self._need_cache()
        dxhat = self._affine_backward(dy, xhat)
        dx = _normalize_backward(self._view(dxhat), self._view(xhat), inv, self.axes)
        return dx.reshape(dy.shape)


class InstanceNorm(_WindowNorm):
    kind = "in"
    axes = (2, 3)

    def _view(self, x):
        return x


class LayerNorm(_WindowNorm):
    kind = "ln"
    axes = (1, 2, 3)

    def _view(self, x):
        return x


class GroupNorm(_WindowNorm):
    """Channels split into ``groups`` contiguous blocks, normalized per sample and block."""

    kind = "gn"
    axes = (2, 3, 4)

    def __init__(self, channels, groups, eps=DEFAULT_EPS):
        super().__init__(channels, eps)
        if groups < 1 or channels % groups:
            raise NormError(f"groups={groups} must divide channels={channels}")
        self.groups = groups

    def _view(self, x):
        n, c, h, w = x.shape
        return x.reshape(n, self.groups, c // self.groups, h, w)


class BatchNorm(NormLayer):
    kind = "bn"

    def __init__(self, channels, lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS):
        super().__init__(channels, eps)
        _check_lambda(lam)
        self.lam = lam
        self.stats = ModeStats(1, channels)

    def buffers(self):
        return _stats_buffers(self.stats)

    def load_buffers(self, buffers):
        _load_stats_buffers(self.stats, buffers)

    def forward(self, x):
        _check_input(x, self.channels)
        if not self.training:
            if not self.stats.initialized:
                raise UninitializedStatsError("bn: eval before any training batch")
            inv, _, _ = _inv_std(self.stats.run_m1[0], self.stats.run_m2[0], self.eps)
            xhat = (x - _chan(self.stats.run_m1[0])) * _chan(inv)
            return self._affine(xhat)
        axes = (0, 2, 3)
        xhat, inv, mean, var = _normalize(x, axes, self.eps)
        st = self.stats
        st.batch_m1 = mean.reshape(1, -1)
        st.batch_m2 = (var + mean * mean).reshape(1, -1)
        st.counts = np.array([float(x.shape[0])])
        mn_update_running(st, self.lam)
        self._cache = (xhat, inv)
        return self._affine(xhat)

    def backward(self, dy):
        xhat, inv = self._need_cache()
        dxhat = self._affine_backward(dy, xhat)
        return _normalize_backward(dxhat, xhat, inv, (0, 2, 3))

    def gate_usage(self):
        return np.ones(1)


def _stats_buffers(st: ModeStats) -> dict:
    return {
        "run_m1": st.run_m1,
        "run_m2": st.run_m2,
        "initialized": np.array([1.0 if st.initialized else 0.0]),
    }


def _load_stats_buffers(st: ModeStats, buffers: dict) -> None:
    st.run_m1 = np.array(buffers["run_m1"], dtype=np.float64).reshape(st.modes, st.channels)
    st.run_m2 = np.array(buffers["run_m2"], dtype=np.float64).reshape(st.modes, st.channels)
    st.initialized = bool(np.asarray(buffers["initialized"]).reshape(-1)[0])


@dataclass
class _ModeCache:
    x: np.ndarray
    gates: np.ndarray
    gate_cache: object
    weights: np.ndarray
    floored: np.ndarray
    counts: np.ndarray
    m1: np.ndarray
    inv: np.ndarray
    var_ok: np.ndarray
    xhat: np.ndarray  # per-mode normalized input, mode on axis 1
    yhat: np.ndarray  # pre-affine output
    extra: dict = field(default_factory=dict)


class ModeNorm(NormLayer):
    """Mode normalization: each sample is normalized under a gate-weighted mix
    of K per-mode (mean, variance) estimates.

    Gates come from a softmax over an affine map of the spatially pooled
    input. Training uses gate-weighted batch moments and updates running
    moments; evaluation uses the running moments but still gates per sample.
    """

    kind = "mn"

    def __init__(self, channels, modes=2, lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS):
        super().__init__(channels, eps)
        _check_lambda(lam)
        self.lam = lam
        self.gating = SampleGatingParams.zeros(modes, channels)
        self.params["gate_weight"] = self.gating.weight
        self.params["gate_bias"] = self.gating.bias
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.stats = ModeStats(modes, channels)
        self._last_gates = None

    @property
    def modes(self):
        return self.gating.modes

    def _sync_gating(self):
        self.gating.weight = self.params["gate_weight"]
        self.gating.bias = self.params["gate_bias"]

    def buffers(self):
        return _stats_buffers(self.stats)

    def load_buffers(self, buffers):
        _load_stats_buffers(self.stats, buffers)

    def gates(self, x):
        self._sync_gating()
        g, _ = gate_samples(pool_spatial(x), self.gating)
        return g

    def gate_usage(self):
        if self._last_gates is None:
            return None
        return self._last_gates.mean(axis=0)

    def forward(self, x):
        _check_input(x, self.channels)
        return self.forward_train(x) if self.training else self.forward_eval(x)

    def _combine(self, x, gates, m1, inv):
        xhat = (x[:, None] - m1[None, :, :, None, None]) * inv[None, :, :, None, None]
        yhat = np.einsum("nk,nkchw->nchw", gates, xhat)
        return xhat, yhat

    def forward_train(self, x):
        self._sync_gating()
        xp = pool_spatial(x)
        g, gcache = gate_samples(xp, self.gating)
        counts, m1, m2, weights, floored = mn_stats(x, g)
        inv, _, var_ok = _inv_std(m1, m2, self.eps)
        xhat, yhat = self._combine(x, g, m1, inv)
        st = self.stats
        st.batch_m1, st.batch_m2, st.counts = m1, m2, counts
        mn_update_running(st, self.lam, skip=floored)
        self._last_gates = g
        self._cache = _ModeCache(x, g, gcache, weights, floored, counts, m1, inv, var_ok, xhat, yhat)
        return self._affine(yhat)

    def forward_eval(self, x):
        if not self.stats.initialized:
            raise UninitializedStatsError("mn: eval before any training batch")
        g = self.gates(x)
        inv, _, _ = _inv_std(self.stats.run_m1, self.stats.run_m2, self.eps)
        _, yhat = self._combine(x, g, self.stats.run_m1, inv)
        self._last_gates = g
        return self._affine(yhat)

    def backward(self, dy):
        c = self._need_cache()
        x, g, xhat = c.x, c.gates, c.xhat
        hw = x.shape[2] * x.shape[3]
        dyhat = self._affine_backward(dy, c.yhat)
        inv5 = c.inv[None, :, :, None, None]

        dxhat = g[:, :, None, None, None] * dyhat[:, None]
        dg = np.einsum("nchw,nkchw->nk", dyhat, xhat)
        dx = (dxhat * inv5).sum(axis=1)

        # mean and inverse-std paths, per (mode, channel)
        diff = x[:, None] - c.m1[None, :, :, None, None]
        dm1 = -(dxhat * inv5).sum(axis=(0, 3, 4))
        dinv = (dxhat * diff).sum(axis=(0, 3, 4))
        dvar = np.where(c.var_ok, -0.5 * c.inv**3 * dinv, 0.0)
        dm2 = dvar
        dm1 = dm1 - 2.0 * c.m1 * dvar

        # m1 = w.T @ mean_hw(x), m2 = w.T @ mean_hw(x^2)
        xp = x.mean(axis=(2, 3))
        xp2 = (x * x).mean(axis=(2, 3))
        dw = xp @ dm1.T + xp2 @ dm2.T
        dxp = c.weights @ dm1
        dxp2 = c.weights @ dm2
        dx = dx + dxp[:, :, None, None] / hw + 2.0 * x * dxp2[:, :, None, None] / hw

        # w = g / N_k for modes with enough mass
        live = ~c.floored
        nk = np.where(live, c.counts, 1.0)
        dg_w = dw / nk - np.sum(dw * g, axis=0, keepdims=True) / nk**2
        dg = dg + np.where(live[None, :], dg_w, 0.0)

        dxp_g, dW, db = gate_backward(dg, c.gate_cache)
        self.grads["gate_weight"] = dW
        self.grads["gate_bias"] = db
        return dx + dxp_g[:, :, None, None] / hw


class ModeGroupNorm(NormLayer):
    """Mode group normalization: channels of each sample are softly assigned
    to K modes from their spatially pooled values; the sample is normalized
    by every mode's scalar statistics and the results averaged.

    The same transform is applied in training and evaluation.
    """

    kind = "mgn"

    def __init__(self, channels, modes=2, eps=DEFAULT_EPS):
        super().__init__(channels, eps)
        self.gating = ChannelGatingParams.zeros(modes)
        self.params["gate_weight"] = self.gating.weight
        self.params["gate_bias"] = self.gating.bias
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._last_gates = None

    @property
    def modes(self):
        return self.gating.modes

    def _sync_gating(self):
        self.gating.weight = self.params["gate_weight"]
        self.gating.bias = self.params["gate_bias"]

    def gates(self, x):
        """Channel gates, N x C x K."""
        self._sync_gating()
        g, _ = gate_channels(pool_spatial(x), self.gating)
        return g

    def gate_usage(self):
        if self._last_gates is None:
            return None
        return self._last_gates.mean(axis=(0, 1))

    def forward(self, x):
        _check_input(x, self.channels)
        self._sync_gating()
        n, ch = x.shape[:2]
        xp = pool_spatial(x)
        g, gcache = gate_channels(xp, self.gating)
        counts = g.sum(axis=1)  # N x K
        floored = counts < MIN_MODE_MASS
        weights = g / np.where(floored, 1.0, counts)[:, None, :]
        weights = np.where(floored[:, None, :], 1.0 / ch, weights)
        mu = np.einsum("nck,nc->nk", weights, xp)
        # two-pass variance: equal to m2 - mu^2 because the weights sum to one,
        # but free of the cancellation that form suffers when channels agree
        dev = xp[:, :, None] - mu[:, None, :]
        var = np.einsum("nck,nck->nk", weights, dev * dev)
        inv = 1.0 / np.sqrt(var + self.eps)
        var_ok = np.ones_like(var, dtype=bool)
        xhat = (x[:, None] - mu[:, :, None, None, None]) * inv[:, :, None, None, None]
        yhat = xhat.mean(axis=1)
        self._last_gates = g
        self._cache = _ModeCache(x, g, gcache, weights, floored, counts, mu, inv, var_ok, xhat, yhat,
                                 extra={"xp": xp, "dev": dev})
        return self._affine(yhat)

    def backward(self, dy):
        c = self._need_cache()
        x, g = c.x, c.gates
        k = g.shape[-1]
        hw = x.shape[2] * x.shape[3]
        xp = c.extra["xp"]
        dyhat = self._affine_backward(dy, c.yhat)

        dx = dyhat * c.inv.sum(axis=1)[:, None, None, None] / k
        ssum = dyhat.sum(axis=(1, 2, 3))  # N
        dmu = -(ssum[:, None] * c.inv) / k
        # sum over (c, h, w) of dyhat * (x - mu_k), expanded to skip the K-fold tensor
        dinv = ((dyhat * x).sum(axis=(1, 2, 3))[:, None] - c.m1 * ssum[:, None]) / k
        dvar = -0.5 * c.inv**3 * dinv

        # mu = sum_c w * xp, var = sum_c w * (xp - mu)^2; the mu-dependence of
        # var drops out since the weights sum to one
        dev = c.extra["dev"]
        dw = xp[:, :, None] * dmu[:, None, :] + dev * dev * dvar[:, None, :]
        dxp = np.einsum("nck,nk->nc", c.weights, dmu) + 2.0 * np.einsum("nck,nck,nk->nc", c.weights, dev, dvar)

        live = ~c.floored
        ck = np.where(live, c.counts, 1.0)[:, None, :]
        dg_w = dw / ck - np.sum(dw * g, axis=1, keepdims=True) / ck**2
        dg = np.where(live[:, None, :], dg_w, 0.0)

        dxp_g, dW, db = gate_backward(dg, c.gate_cache)
        self.grads["gate_weight"] = dW
        self.grads["gate_bias"] = db
        return dx + (dxp + dxp_g)[:, :, None, None] / hw


def make_norm(kind: str, channels: int, modes: int = 2, groups: int = 2,
              lam: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPS) -> NormLayer:
    if kind == "bn":
        return BatchNorm(channels, lam=lam, eps=eps)
    if kind == "in":
        return InstanceNorm(channels, eps=eps)
    if kind == "ln":
        return LayerNorm(channels, eps=eps)
    if kind == "gn":
        return GroupNorm(channels, groups, eps=eps)
    if kind == "mn":
        return ModeNorm(channels, modes, lam=lam, eps=eps)
    if kind == "mgn":
        return ModeGroupNorm(channels, modes, eps=eps)
    raise NormError(f"unknown normalization kind {kind!r}; expected one of {KINDS}")
