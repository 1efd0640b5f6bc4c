"""Toy decoder-only transformer with cross-layer vision smoothing (CLVS)."""

from .engine import (
    AttentionSnapshot,
    Intervention,
    KVCache,
    ModelConfig,
    ModelWeights,
    StepOutput,
    TokenLayout,
    forward_step,
    generate,
    layer_probe,
    load_model,
    save_model,
)
from .smoothing import ClvsConfig, ClvsSession, Observer, unified_positions, uncertainty

__version__ = "0.1.0"
