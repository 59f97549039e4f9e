"""Softmax-of-affine gating networks.

Sample gates map a spatially pooled feature vector (length C) to K mode
weights; channel gates map each pooled channel scalar to K mode weights.
Both start at zero weights, i.e. uniform gates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GatingError(ValueError):
    pass


@dataclass
class SampleGatingParams:
    weight: np.ndarray  # K x C
    bias: np.ndarray  # K

    @classmethod
    def zeros(cls, modes: int, channels: int) -> "SampleGatingParams":
        if modes < 1 or channels < 1:
            raise GatingError("modes and channels must be >= 1")
        return cls(np.zeros((modes, channels)), np.zeros(modes))

    @property
    def modes(self) -> int:
        return self.weight.shape[0]


@dataclass
class ChannelGatingParams:
    weight: np.ndarray  # K
    bias: np.ndarray  # K

    @classmethod
    def zeros(cls, modes: int) -> "ChannelGatingParams":
        if modes < 1:
            raise GatingError("modes must be >= 1")
        return cls(np.zeros(modes), np.zeros(modes))

    @property
    def modes(self) -> int:
        return self.weight.shape[0]


@dataclass
class GateCache:
    kind: str  # "sample" or "channel"
    xp: np.ndarray
    gates: np.ndarray
    weight: np.ndarray


def pool_spatial(x: np.ndarray) -> np.ndarray:
    """Average over height and width: N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise GatingError(f"expected a 4-D tensor, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise GatingError("non-finite gating logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gate_samples(xp: np.ndarray, p: SampleGatingParams) -> tuple[np.ndarray, GateCache]:
    if xp.ndim != 2 or xp.shape[1] != p.weight.shape[1]:
        raise GatingError(f"pooled input {xp.shape} does not match gating weight {p.weight.shape}")
    g = softmax(xp @ p.weight.T + p.bias)
    return g, GateCache("sample", xp, g, p.weight)


def gate_channels(xp: np.ndarray, p: ChannelGatingParams) -> tuple[np.ndarray, GateCache]:
    """Gates for every scalar of ``xp``; output shape is ``xp.shape + (K,)``."""
    logits = xp[..., None] * p.weight + p.bias
    g = softmax(logits)
    return g, GateCache("channel", xp, g, p.weight)


def gate_backward(dg: np.ndarray, cache: GateCache | None):
    """Returns (d_xp, d_weight, d_bias)."""
    if cache is None:
        raise GatingError("gate_backward called without a forward cache")
    g = cache.gates
    dz = g * (dg - np.sum(dg * g, axis=-1, keepdims=True))
    if cache.kind == "sample":
        return dz @ cache.weight, dz.T @ cache.xp, dz.sum(axis=0)
    dz_flat = dz.reshape(-1, g.shape[-1])
    d_xp = dz @ cache.weight
    d_weight = cache.xp.reshape(-1) @ dz_flat
    return d_xp, d_weight, dz_flat.sum(axis=0)
