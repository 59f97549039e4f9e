"""Datasets: a synthetic multi-modal mixture, IDX (MNIST-format) ingestion, batching."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng, randn

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_UBYTE = 0x08


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # N x C x H x W
    labels: np.ndarray
    mode_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if len(self.labels) != n:
            raise DataError(f"{len(self.labels)} labels for {n} samples")
        if self.mode_labels is not None and len(self.mode_labels) != n:
            raise DataError(f"{len(self.mode_labels)} mode labels for {n} samples")

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("classes", int(self.labels.max()) + 1))


@dataclass
class SynthConfig:
    modes: int = 2
    classes: int = 4
    n_train: int = 8000
    n_test: int = 2000
    channels: int = 4
    height: int = 4
    width: int = 4
    separation: float = 6.0
    scale_ratio: float = 2.0
    weights: tuple | None = None  # mixture weights; uniform when None
    seed: int = 0

    def mixture(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.modes, 1.0 / self.modes)
        pi = np.asarray(self.weights, dtype=np.float64)
        if pi.shape != (self.modes,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise DataError(f"mixture weights must be {self.modes} non-negative values summing to 1")
        return pi

    def validate(self):
        if self.modes < 1 or self.classes < 1:
            raise DataError("modes and classes must be >= 1")
        if self.separation < 0:
            raise DataError("separation must be >= 0")
        if self.scale_ratio <= 0:
            raise DataError("scale ratio must be positive")
        if self.modes > self.channels:
            raise DataError("need at least one channel per mode for the shift directions")
        self.mixture()


def mode_shift(cfg: SynthConfig) -> np.ndarray:
    """M x C x H x W offsets: mode m is moved by ``separation`` along channel m."""
    shift = np.zeros((cfg.modes, cfg.channels, cfg.height, cfg.width))
    for m in range(cfg.modes):
        shift[m, m] = cfg.separation
    return shift


def mode_scale(cfg: SynthConfig) -> np.ndarray:
    """Per-mode multiplicative scale, geometric from 1 up to ``scale_ratio``."""
    if cfg.modes == 1:
        return np.ones(1)
    return cfg.scale_ratio ** (np.arange(cfg.modes) / (cfg.modes - 1))


def _draw(cfg, n, templates, rng: Rng, pi):
    shape = (cfg.channels, cfg.height, cfg.width)
    modes = np.minimum(np.searchsorted(np.cumsum(pi), rng.uniform(n)), cfg.modes - 1)
    labels = rng.integers(0, cfg.classes, size=n)
    noise = randn((n,) + shape, rng)
    scale = mode_scale(cfg)[modes][:, None, None, None]
    x = scale * (templates[labels] + noise) + mode_shift(cfg)[modes]
    return x, labels.astype(np.int64), modes.astype(np.int64)


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Train/test splits of x = scale_m * (template_y + noise) + shift_m.

    Class templates are shared across modes, so only the feature statistics
    depend on the (hidden) mode.
    """
    cfg.validate()
    pi = cfg.mixture()
    rng = Rng(cfg.seed)
    templates = randn((cfg.classes, cfg.channels, cfg.height, cfg.width), rng)
    meta = {
        "classes": cfg.classes,
        "modes": cfg.modes,
        "mixture": pi.tolist(),
        "separation": cfg.separation,
        "scale_ratio": cfg.scale_ratio,
        "seed": cfg.seed,
    }
    out = []
    for n in (cfg.n_train, cfg.n_test):
        x, y, m = _draw(cfg, n, templates, rng, pi)
        out.append(Dataset(x, y, m, dict(meta)))
    return out[0], out[1]


def idx_parse(raw: bytes) -> np.ndarray:
    """Decode an IDX stream of unsigned bytes.

    Image files (magic 0x803) become N x 1 x H x W float64 in [0, 1]; label
    files (0x801) become an int64 vector. Gzip input is detected and inflated.
    """
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DataError("truncated IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0:
        raise DataError(f"bad IDX magic 0x{magic:08x}")
    if dtype != _UBYTE:
        raise DataError(f"unsupported IDX element type 0x{dtype:02x} (magic 0x{magic:08x})")
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataError(f"unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise DataError(f"truncated IDX payload: expected {count} bytes, got {len(payload)}")
    if len(payload) > count:
        raise DataError(f"trailing bytes after IDX payload ({len(payload) - count})")
    values = np.frombuffer(payload, dtype=np.uint8)
    if magic == IDX_LABELS:
        return values.astype(np.int64)
    n, h, w = dims
    return (values.astype(np.float64) / 255.0).reshape(n, 1, h, w)


def idx_serialize(values: np.ndarray, labels: bool = False) -> bytes:
    """Inverse of idx_parse for label vectors or N x 1 x H x W images in [0, 1]."""
    if labels:
        arr = np.asarray(values, dtype=np.uint8).reshape(-1)
        return struct.pack(">II", IDX_LABELS, arr.size) + arr.tobytes()
    n, _, h, w = values.shape
    arr = np.rint(np.asarray(values) * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IDX_IMAGES, n, h, w) + arr.tobytes()


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(f"missing IDX file {stem}[.gz] in {data_dir}")


def load_idx_dataset(data_dir, split: str = "train") -> Dataset:
    """Load MNIST-style ``{train,t10k}-{images-idx3,labels-idx1}-ubyte`` files."""
    data_dir = Path(data_dir)
    prefix = "train" if split == "train" else "t10k"
    images = idx_parse(_find(data_dir, f"{prefix}-images-idx3-ubyte").read_bytes())
    labels = idx_parse(_find(data_dir, f"{prefix}-labels-idx1-ubyte").read_bytes())
    if images.ndim != 4 or labels.ndim != 1:
        raise DataError("IDX image/label files swapped or malformed")
    return Dataset(images, labels, None, {"classes": int(labels.max()) + 1, "source": str(data_dir)})


def batches(ds: Dataset, batch_size: int, rng: Rng | None = None, shuffle: bool = False):
    """Yield (features, labels, mode_labels) batches covering one epoch."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    n = len(ds)
    if batch_size > n:
        log.warning("batch size %d exceeds dataset size %d; using one full batch", batch_size, n)
        batch_size = n
    if shuffle and rng is None:
        raise DataError("shuffling needs an Rng")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        modes = None if ds.mode_labels is None else ds.mode_labels[idx]
        yield ds.features[idx], ds.labels[idx], modes
