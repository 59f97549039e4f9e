"""Mode normalization and its baselines (BN, IN, LN, GN, MGN) in numpy."""
from .gating import gate_channels, gate_samples, pool_spatial
from .norm import (
    BatchNorm,
    GroupNorm,
    InstanceNorm,
    LayerNorm,
    ModeGroupNorm,
    ModeNorm,
    ModeStats,
    make_norm,
    mn_stats,
    mn_update_running,
)

__all__ = [
    "BatchNorm",
    "GroupNorm",
    "InstanceNorm",
    "LayerNorm",
    "ModeGroupNorm",
    "ModeNorm",
    "ModeStats",
    "gate_channels",
    "gate_samples",
    "make_norm",
    "mn_stats",
    "mn_update_running",
    "pool_spatial",
]
