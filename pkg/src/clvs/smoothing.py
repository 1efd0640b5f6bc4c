"""Cross-layer vision smoothing of the generating token's visual attention.

Per decoding step the session:

* rotates layer 1 with unified visual positions (every image token shares one
  index) and seeds a vision memory with the head-wise max of that layer's
  visual attention;
* at each later layer blends every head's visual slice with the memory,
  renormalizes the row, and folds the layer's original visual attention back
  into the memory;
* from ``gate_start_layer`` on, reads the logit-lens distribution of the block
  output and stops intervening once its top-k normalized entropy drops below
  ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .engine import AttentionSnapshot, Intervention, ModelWeights, TokenLayout, layer_probe
from .errors import ConfigError, InputError, InvariantError, ProtocolError


def default_gate_start(n_layers: int) -> int:
    """First layer that checks uncertainty: ceil((L + 1) / 2)."""
    return (n_layers + 2) // 2


@dataclass(frozen=True)
class ClvsConfig:
    beta: float = 0.8
    gamma: float = 0.8
    delta: float = 0.5
    gate_start_layer: int | None = None
    topk: int = 10
    unified_positions: bool = True

    def __post_init__(self):
        for name in ("beta", "gamma", "delta"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ConfigError("must be a number in [0, 1]", name)
        if self.topk < 1:
            raise ConfigError("must be >= 1", "topk")
        if self.gate_start_layer is not None and self.gate_start_layer < 1:
            raise ConfigError("must be >= 1", "gate_start_layer")

    def gate_for(self, n_layers: int) -> int:
        gate = default_gate_start(n_layers) if self.gate_start_layer is None else self.gate_start_layer
        if not 1 <= gate <= n_layers:
            raise ConfigError(f"must lie in 1..{n_layers}", "gate_start_layer")
        return gate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisionMemory:
    values: np.ndarray
    layer_of_last_update: int


# -- pure operations ----------------------------------------------------------


def unified_positions(layout: TokenLayout, generated: int | None = None) -> list[int]:
    """Position indices with every visual token sharing index ``n_sys``.

    Covers the prompt plus ``generated`` tokens (defaults to
    ``layout.generated_so_far``), which continue after the user span.
    """
    if generated is None:
        generated = layout.generated_so_far
    s, v, u = layout.n_sys, layout.n_vis, layout.n_usr
    return list(range(s)) + [s] * v + list(range(s + 1, s + 1 + u + generated))


def init_memory(layer1_visual: np.ndarray) -> VisionMemory:
    vis = np.asarray(layer1_visual, dtype=np.float64)
    if vis.ndim != 2 or vis.shape[0] == 0:
        raise ConfigError("init_memory needs at least one head of visual attention")
    return VisionMemory(vis.max(axis=0), 1)


def smooth(lambda_h: np.ndarray, memory: np.ndarray, beta: float) -> np.ndarray:
    lam = np.asarray(lambda_h, dtype=np.float64)
    mem = np.asarray(memory, dtype=np.float64)
    if lam.shape[-1] != mem.shape[-1]:
        raise InputError(f"visual length {lam.shape[-1]} != memory length {mem.shape[-1]}")
    return beta * lam + (1.0 - beta) * mem


def renormalize(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    total = row.sum(axis=-1, keepdims=True)
    if np.any(row < 0) or np.any(total <= 0):
        raise InvariantError("cannot renormalize a row with negative entries or zero mass")
    return row / total


def update_memory(memory: VisionMemory, current_visual: np.ndarray, gamma: float, layer: int | None = None) -> VisionMemory:
    cur = np.asarray(current_visual, dtype=np.float64)
    if cur.ndim != 2 or cur.shape[1] != memory.values.shape[0]:
        raise InputError(f"visual attention {cur.shape} does not match memory length {memory.values.shape[0]}")
    values = gamma * memory.values + (1.0 - gamma) * cur.max(axis=0)
    if layer is None:
        layer = memory.layer_of_last_update + 1
    return VisionMemory(values, layer)


def uncertainty(probs: np.ndarray, topk: int = 10) -> float:
    """Entropy of the renormalized top-k probabilities divided by log(k)."""
    probs = np.asarray(probs, dtype=np.float64)
    if topk < 1:
        raise ConfigError("must be >= 1", "topk")
    if topk > probs.shape[-1]:
        raise InputError(f"topk={topk} exceeds vocabulary size {probs.shape[-1]}")
    if topk == 1:
        return 0.0
    top = np.sort(probs)[::-1][:topk]
    top = top / top.sum()
    nz = top[top > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    return min(max(entropy / math.log(topk), 0.0), 1.0)


# -- stateful session ---------------------------------------------------------


class Observer(Intervention):
    """Non-modifying intervention that records uncertainty at gated layers.

    Used for vanilla runs so their traces carry the same observables.
    """

    def __init__(self, model: ModelWeights, layout: TokenLayout, config: ClvsConfig | None = None):
        self.model = model
        self.layout = layout
        self.config = config or ClvsConfig()
        self.gate = self.config.gate_for(model.config.n_layers)
        self._uncertainty: dict[int, float] = {}

    def begin_step(self, step):
        self._uncertainty = {}

    def layer_output(self, layer, hidden):
        if layer >= self.gate:
            self._uncertainty[layer] = uncertainty(layer_probe(hidden, self.model), self.config.topk)

    def layer_state(self, layer):
        return {"uncertainty": self._uncertainty.get(layer)}


class ClvsSession(Intervention):
    """Stateful CLVS hook for one generation session.

    ``history`` holds, for the current step, one dict per layer with the
    memory after that layer and the smoothed visual slices before
    renormalization (None where the layer was not smoothed).
    """

    def __init__(self, model: ModelWeights, layout: TokenLayout, config: ClvsConfig | None = None):
        self.model = model
        self.layout = layout
        self.config = config or ClvsConfig()
        self.n_layers = model.config.n_layers
        self.gate = self.config.gate_for(self.n_layers)
        self.memory: VisionMemory | None = None
        self.terminated = False
        self._termination_layer: int | None = None
        self._next_layer = None
        self._after_output = False
        self.history: list[dict] = []

    @property
    def termination_layer(self):
        return self._termination_layer

    def position_overrides(self, context_len):
        if not self.config.unified_positions:
            return None
        generated = context_len - self.layout.prompt_len
        return {1: np.asarray(unified_positions(self.layout, generated))}

    def begin_step(self, step):
        self.memory = None
        self.terminated = False
        self._termination_layer = None
        self._next_layer = 1
        self._after_output = False
        self.history = []

    def attention(self, snapshot: AttentionSnapshot):
        layer = snapshot.layer
        if self._next_layer is None or layer != self._next_layer or self._after_output:
            raise ProtocolError(f"attention for layer {layer} out of order (expected {self._next_layer})")
        self._after_output = True
        cfg = self.config
        a, b = snapshot.visual_span
        if b - a != self.layout.n_vis:
            raise InputError("snapshot visual span does not match the layout")
        lam = snapshot.visual
        entry = {"layer": layer, "smoothed": None, "uncertainty": None}
        self.history.append(entry)

        if layer == 1:
            self.memory = init_memory(lam)
            entry["memory"] = self.memory.values.copy()
            return None
        if self.terminated:
            entry["memory"] = self.memory.values.copy()
            return None

        smoothed = smooth(lam, self.memory.values[None, :], cfg.beta)
        rows = snapshot.rows.copy()
        rows[:, a:b] = smoothed
        rows = renormalize(rows)
        self.memory = update_memory(self.memory, lam, cfg.gamma, layer)
        entry["smoothed"] = smoothed
        entry["memory"] = self.memory.values.copy()
        return rows

    def layer_output(self, layer, hidden):
        if layer != self._next_layer or not self._after_output:
            raise ProtocolError(f"layer_output for layer {layer} out of order")
        self._after_output = False
        self._next_layer = layer + 1
        if layer >= self.gate and not self.terminated:
            u = uncertainty(layer_probe(hidden, self.model), self.config.topk)
            self.history[-1]["uncertainty"] = u
            if u < self.config.delta:
                self.terminated = True
                self._termination_layer = layer

    def layer_state(self, layer):
        entry = self.history[layer - 1]
        term = self._termination_layer
        return {
            "memory": entry["memory"],
            "uncertainty": entry["uncertainty"],
            "terminated": term is not None and layer >= term,
        }

    def memory_trajectory(self) -> np.ndarray:
        """Memory after each layer of the current step, shape (L, N_v)."""
        return np.stack([e["memory"] for e in self.history])
