"""Dense layers, ReLU, softmax cross-entropy, SGD with momentum, and a
sequential model that threads norm layers through a small MLP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .norm import NormLayer, make_norm
from .tensor import Rng, randn


class NumericalError(ArithmeticError):
    pass


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: Rng | None = None):
        limit = math.sqrt(6.0 / (n_in + n_out))
        if rng is None:
            weight = np.zeros((n_out, n_in))
        else:
            weight = (2.0 * rng.uniform((n_out, n_in)) - 1.0) * limit
        self.params = {"weight": weight, "bias": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"dense layer expects N x {w.shape[1]}, got {x.shape}")
        self._x = x
        return x @ w.T + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] = dy.T @ self._x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class ReLU:
    params: dict = {}
    grads: dict = {}

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        # subgradient 0 at exactly 0
        return np.where(self._mask, dy, 0.0)


class Flatten:
    params: dict = {}
    grads: dict = {}

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Spatial:
    """N x F -> N x F x 1 x 1 so dense features can feed a norm layer."""

    params: dict = {}
    grads: dict = {}

    def forward(self, x):
        return x.reshape(x.shape[0], x.shape[1], 1, 1)

    def backward(self, dy):
        return dy.reshape(dy.shape[0], dy.shape[1])


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"labels must be {n} ints in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def sgd_step(params: dict, grads: dict, cfg: SgdConfig, lr: float | None = None) -> None:
    """In place: v <- momentum*v + (g + wd*p); p <- p - lr*v."""
    lr = cfg.lr if lr is None else lr
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        v = cfg.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = cfg.momentum * v + (g + cfg.weight_decay * p)
        cfg.velocity[name] = v
        p -= lr * v


def lr_schedule(epoch: int, base_lr: float, milestones=()) -> float:
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * 0.1**passed


def default_milestones(epochs: int) -> tuple[int, ...]:
    """Tenfold decays at 65% and 80% of training."""
    return tuple(sorted({int(round(0.65 * epochs)), int(round(0.8 * epochs))}))


class Model:
    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def mlp(cls, input_shape, hidden: int, classes: int, norm: str, rng: Rng,
            modes: int = 2, groups: int = 2, lam: float = 0.1, eps: float = 1e-5,
            gate_noise: float = 1e-3) -> "Model":
        """norm(input) -> [dense -> norm -> relu] x 2 -> dense."""
        c, h, w = input_shape
        dense_rng = rng.spawn(1)
        gate_rng = rng.spawn(2)
        layers = [make_norm(norm, c, modes=modes, groups=_groups_for(groups, c), lam=lam, eps=eps), Flatten()]
        width = c * h * w
        for _ in range(2):
            layers += [
                Dense(width, hidden, dense_rng),
                Spatial(),
                make_norm(norm, hidden, modes=modes, groups=_groups_for(groups, hidden), lam=lam, eps=eps),
                Flatten(),
                ReLU(),
            ]
            width = hidden
        layers.append(Dense(width, classes, dense_rng))
        model = cls(layers)
        if gate_noise > 0:
            # zero gates are a symmetric fixed point; a small kick lets modes split
            for layer in model.norm_layers():
                if "gate_weight" in layer.params and layer.modes > 1:
                    gw = layer.params["gate_weight"]
                    gw += gate_noise * randn(gw.shape, gate_rng)
        return model

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def norm_layers(self):
        return [l for l in self.layers if isinstance(l, NormLayer)]

    def train(self):
        for l in self.norm_layers():
            l.train()
        return self

    def eval(self):
        for l in self.norm_layers():
            l.eval()
        return self

    def named_params(self) -> dict:
        return {f"layer{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def named_grads(self) -> dict:
        return {f"layer{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def state_tensors(self) -> dict:
        out = self.named_params()
        for i, l in enumerate(self.layers):
            if isinstance(l, NormLayer):
                out.update({f"layer{i}.{k}": v for k, v in l.buffers().items()})
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        expected = self.state_tensors()
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ValueError(f"checkpoint tensors do not match model (missing={missing}, unexpected={extra})")
        for i, l in enumerate(self.layers):
            for k, v in l.params.items():
                src = tensors[f"layer{i}.{k}"]
                if src.shape != v.shape:
                    raise ValueError(f"shape mismatch for layer{i}.{k}: {src.shape} vs {v.shape}")
                v[...] = src
            if isinstance(l, NormLayer):
                l.load_buffers({k: tensors[f"layer{i}.{k}"] for k in l.buffers()})

    def step(self, cfg: SgdConfig, lr: float) -> None:
        sgd_step(self.named_params(), self.named_grads(), cfg, lr)


def _groups_for(groups: int, channels: int) -> int:
    # largest divisor of channels not exceeding the requested group count
    g = max(1, min(groups, channels))
    while channels % g:
        g -= 1
    return g
