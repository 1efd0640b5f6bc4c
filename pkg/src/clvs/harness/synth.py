"""Seeded synthetic models, scenes, scripted attention schedules and traces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..analysis import ObjectOverlap
from ..engine import ModelConfig, ModelWeights
from ..errors import ConfigError, InputError
from ..tracing import TraceFile, TraceRecord
from .prng import SplitMix64

DIM_KEYS = ("n_layers", "n_heads", "head_dim", "hidden", "vocab", "rope_base", "ffn_dim", "attn_scale", "logit_scale")


def gen_model(seed: int, dims: dict) -> ModelWeights:
    """Random weights from one SplitMix64 stream, tensors in canonical order.

    Matrices are uniform with variance 1/fan_in (half-width sqrt(3/fan_in)).
    The embedding is a lookup, i.e. fan-in 1. Norm gains are 1. The unembedding
    is further multiplied by ``logit_scale`` (default 1), which sharpens
    logit-lens distributions.
    """
    unknown = set(dims) - set(DIM_KEYS)
    if unknown:
        raise ConfigError(f"unknown dimension keys {sorted(unknown)}", "dims")
    dims = dict(dims)
    logit_scale = float(dims.pop("logit_scale", 1.0))
    if "hidden" not in dims and "n_heads" in dims and "head_dim" in dims:
        dims["hidden"] = dims["n_heads"] * dims["head_dim"]
    try:
        config = ModelConfig(seed=int(seed), **dims)
    except TypeError as exc:
        raise ConfigError(str(exc), "dims") from exc

    rng = SplitMix64(config.seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        size = math.prod(shape)
        if name.endswith("norm"):
            tensors[name] = np.ones(shape)
            continue
        fan_in = 1 if name == "tok_embed" else shape[0]
        values = rng.symmetric(size, math.sqrt(3.0 / fan_in)).reshape(shape)
        if name == "unembed":
            values = values * logit_scale
        tensors[name] = values
    return ModelWeights(config, tensors)


def box_overlap(rows: int, cols: int, box) -> list[float]:
    """Fraction of each unit cell covered by ``box = (x0, y0, x1, y1)``, row-major."""
    x0, y0, x1, y1 = box
    out = []
    for r in range(rows):
        dy = max(0.0, min(y1, r + 1) - max(y0, r))
        for c in range(cols):
            dx = max(0.0, min(x1, c + 1) - max(x0, c))
            out.append(dx * dy)
    return out


def gen_scene(seed: int, rows: int, cols: int, n_objects: int = 1) -> dict:
    """Random axis-aligned object boxes on a ``rows x cols`` patch grid."""
    if rows < 1 or cols < 1 or n_objects < 0:
        raise ConfigError("grid dimensions must be positive")
    rng = SplitMix64(seed)
    objects = []
    for k in range(n_objects):
        u = rng.uniform(4)
        w = 0.5 + u[0] * (cols - 0.5) * 0.6
        h = 0.5 + u[1] * (rows - 0.5) * 0.6
        x0 = u[2] * (cols - w)
        y0 = u[3] * (rows - h)
        objects.append({"name": f"obj{k}", "overlap": box_overlap(rows, cols, (x0, y0, x0 + w, y0 + h))})
    return {"grid": [rows, cols], "objects": objects}


def scene_objects(scene: dict) -> dict:
    rows, cols = scene["grid"]
    return {"grid": (rows, cols), "objects": [ObjectOverlap(o["name"], o["overlap"]) for o in scene["objects"]]}


@dataclass
class ScriptedSchedule:
    """Visual attention rows injected at the generating position, shape (L, H, N_v).

    The non-visual part of each computed row is rescaled to carry the
    remaining mass, so the row stays normalized while keeping its text-side
    proportions.
    """

    rows: np.ndarray
    key_index: int
    decay_layer: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 3:
            raise ConfigError("schedule rows must have shape (layers, heads, n_vis)", "schedule.rows")
        if np.any(self.rows < 0) or np.any(self.rows.sum(axis=-1) > 1.0):
            raise ConfigError("injected slices must be nonnegative with mass <= 1", "schedule.rows")
        if not 0 <= self.key_index < self.rows.shape[2]:
            raise ConfigError("outside the visual span", "schedule.key_index")

    def check(self, n_layers: int, n_heads: int, n_vis: int):
        if self.rows.shape != (n_layers, n_heads, n_vis):
            raise ConfigError(
                f"shape {self.rows.shape} != (L, H, N_v) = {(n_layers, n_heads, n_vis)}", "schedule.rows"
            )

    def inject(self, layer: int, rows: np.ndarray, visual_span) -> np.ndarray:
        a, b = visual_span
        vis = self.rows[layer - 1]
        out = rows.copy()
        nonvis_mass = 1.0 - rows[:, a:b].sum(axis=1, keepdims=True)
        has_text = out.shape[1] > b - a
        out[:, a:b] = vis
        if has_text:
            scale = (1.0 - vis.sum(axis=1, keepdims=True)) / nonvis_mass
            out[:, :a] *= scale
            out[:, b:] *= scale
        else:
            out = out / out.sum(axis=1, keepdims=True)
        return out


def make_decay_schedule(
    seed: int,
    n_layers: int,
    n_heads: int,
    n_vis: int,
    key_index: int,
    decay_layer: int,
    key_weight: float = 0.6,
    background: float = 0.2,
) -> ScriptedSchedule:
    """Key-token attention ramps up to ``key_weight`` at ``decay_layer - 1``, then drops to 0.

    The ramp is linear over layers ``1..decay_layer-1`` and identical in every
    head; the other visual tokens share ``background`` mass with seeded random
    proportions per layer and head.
    """
    if not 2 <= decay_layer <= n_layers:
        raise ConfigError(f"must lie in 2..{n_layers}", "schedule.decay_layer")
    if not 0 <= key_index < n_vis:
        raise ConfigError("outside the visual span", "schedule.key_index")
    if key_weight + background > 1:
        raise ConfigError("key_weight + background must be <= 1", "schedule.key_weight")
    rng = SplitMix64(seed)
    rows = np.zeros((n_layers, n_heads, n_vis))
    others = [i for i in range(n_vis) if i != key_index]
    for l in range(n_layers):
        for h in range(n_heads):
            if others:
                w = 0.05 + rng.uniform(len(others))
                rows[l, h, others] = background * w / w.sum()
            if l + 1 < decay_layer:
                rows[l, h, key_index] = key_weight * (l + 1) / (decay_layer - 1)
    return ScriptedSchedule(rows, key_index, decay_layer)


def schedule_from_dict(doc: dict, n_layers: int, n_heads: int, n_vis: int) -> ScriptedSchedule:
    try:
        key = int(doc["key_index"])
        decay = int(doc["decay_layer"])
    except KeyError as exc:
        raise ConfigError("missing field", f"schedule.{exc.args[0]}") from exc
    if "rows" in doc:
        sched = ScriptedSchedule(doc["rows"], key, decay)
    else:
        sched = make_decay_schedule(
            int(doc.get("seed", 0)),
            n_layers,
            n_heads,
            n_vis,
            key,
            decay,
            float(doc.get("key_weight", 0.6)),
            float(doc.get("background", 0.2)),
        )
    sched.check(n_layers, n_heads, n_vis)
    return sched


def planted_convergence_trace(seed: int, n_steps: int = 40, n_layers: int = 12, n_vis: int = 4, gate: int | None = None) -> TraceFile:
    """Synthetic trace where each step converges at a planted layer.

    Uncertainty falls after convergence (plus noise), so uncertainty and
    convergence are negatively associated by construction.
    """
    if gate is None:
        gate = (n_layers + 2) // 2
    rng = SplitMix64(seed)
    header = {
        "model": {"n_layers": n_layers, "n_heads": 1, "head_dim": 2, "hidden": 2, "vocab": 10},
        "layout": {"n_sys": 0, "n_vis": n_vis, "n_usr": 0},
        "clvs": {"gate_start_layer": gate},
        "mode": "planted",
        "seed": seed,
    }
    flat = [[1.0 / n_vis] * n_vis]
    records = []
    for s in range(n_steps):
        conv = 1 + int(rng.integers(1, n_layers)[0])
        noise = rng.uniform(n_layers)
        for l in range(1, n_layers + 1):
            converged = l >= conv
            token = 7 if converged else int(l % 5)
            u = None
            if l >= gate:
                base = 0.25 if converged else 0.7
                u = min(1.0, max(0.0, base + 0.8 * (noise[l - 1] - 0.5)))
            records.append(TraceRecord(s, l, flat, flat, [0.0] * n_vis, u, False, token))
    return TraceFile(header, records)


def random_prompt(seed: int, length: int, vocab: int) -> list[int]:
    if length < 1:
        raise InputError("prompt must hold at least one token")
    return SplitMix64(seed ^ 0x5EED).integers(length, vocab).tolist()
