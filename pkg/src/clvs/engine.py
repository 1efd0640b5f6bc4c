"""Minimal decoder-only transformer with a KV cache and per-layer attention hooks.

Everything runs in float64 numpy on a single sequence. Blocks are
pre-normalized (RMSNorm, no biases) with rotary position encoding on queries
and keys and a GELU feed-forward. Each call to :func:`forward_step` pushes one
token through all layers, appends its keys/values to the cache, and exposes the
token's attention row at every layer to an :class:`Intervention`, which may
replace it before value mixing.

Weight layout (all matrices are applied as ``x @ W``)::

    tok_embed            (vocab, d)
    layers.{i}.attn_norm (d,)
    layers.{i}.wq/wk/wv  (d, d)
    layers.{i}.wo        (d, d)
    layers.{i}.ffn_norm  (d,)
    layers.{i}.w_up      (d, ffn_dim)
    layers.{i}.w_down    (ffn_dim, d)
    final_norm           (d,)
    unembed              (d, vocab)

Layers are numbered from 1 in every public surface (snapshots, hooks, traces).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, InvariantError

ENGINE_VERSION = "0.1.0"
RMS_EPS = 1e-6
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    hidden: int
    vocab: int
    rope_base: float = 10000.0
    seed: int = 0
    ffn_dim: int | None = None
    # "head" scales scores by 1/sqrt(head_dim); "model" by 1/sqrt(hidden)
    attn_scale: str = "head"

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        self.validate()

    def validate(self):
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers", "n_layers")
        if self.n_heads < 1:
            raise ConfigError("need at least 1 head", "n_heads")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError("head_dim must be even and positive for rotary encoding", "head_dim")
        if self.hidden != self.n_heads * self.head_dim:
            raise ConfigError(
                f"hidden ({self.hidden}) != n_heads*head_dim ({self.n_heads * self.head_dim})",
                "hidden",
            )
        if self.vocab < 10:
            raise ConfigError("vocabulary must hold at least 10 tokens", "vocab")
        if not self.rope_base > 0:
            raise ConfigError("must be positive", "rope_base")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        if self.ffn_dim < 1:
            raise ConfigError("must be positive", "ffn_dim")
        if self.attn_scale not in ("head", "model"):
            raise ConfigError("must be 'head' or 'model'", "attn_scale")

    @property
    def scale(self) -> float:
        dim = self.head_dim if self.attn_scale == "head" else self.hidden
        return 1.0 / math.sqrt(dim)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, v = self.hidden, self.ffn_dim, self.vocab
        shapes: dict[str, tuple[int, ...]] = {"tok_embed": (v, d)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attn_norm"] = (d,)
            for name in ("wq", "wk", "wv", "wo"):
                shapes[p + name] = (d, d)
            shapes[p + "ffn_norm"] = (d,)
            shapes[p + "w_up"] = (d, f)
            shapes[p + "w_down"] = (f, d)
        shapes["final_norm"] = (d,)
        shapes["unembed"] = (d, v)
        return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise ConfigError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"shape {arr.shape} != expected {shape}", name)
            if not np.all(np.isfinite(arr)):
                raise ConfigError("contains non-finite values", name)
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, index: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{index}.{name}"]


@dataclass(frozen=True)
class TokenLayout:
    """Prompt layout: system tokens, then visual tokens, then user tokens."""

    n_sys: int
    n_vis: int
    n_usr: int
    generated_so_far: int = 0

    def __post_init__(self):
        if self.n_sys < 0:
            raise ConfigError("must be >= 0", "n_sys")
        if self.n_vis < 1:
            raise ConfigError("must be >= 1", "n_vis")
        if self.n_usr < 0:
            raise ConfigError("must be >= 0", "n_usr")
        if self.generated_so_far < 0:
            raise ConfigError("must be >= 0", "generated_so_far")

    @property
    def prompt_len(self) -> int:
        return self.n_sys + self.n_vis + self.n_usr

    @property
    def visual_span(self) -> tuple[int, int]:
        return self.n_sys, self.n_sys + self.n_vis


@dataclass
class AttentionSnapshot:
    """Attention rows of the generating token at one layer, shape (H, context)."""

    layer: int
    rows: np.ndarray
    visual_span: tuple[int, int]

    @property
    def visual(self) -> np.ndarray:
        a, b = self.visual_span
        return self.rows[:, a:b]

    @property
    def non_visual(self) -> np.ndarray:
        a, b = self.visual_span
        return np.concatenate([self.rows[:, :a], self.rows[:, b:]], axis=1)


@dataclass
class StepOutput:
    logits: np.ndarray
    hidden: list[np.ndarray]
    pre: list[AttentionSnapshot]
    post: list[AttentionSnapshot]
    termination_layer: int | None = None


class Intervention:
    """No-op base for per-layer attention interventions.

    ``generate`` drives one instance per session: ``begin_step`` once per
    decoding step, then for each layer in ascending order ``attention`` (may
    return replacement rows) followed by ``layer_output``.
    """

    def position_overrides(self, context_len: int) -> dict[int, np.ndarray] | None:
        return None

    def begin_step(self, step: int) -> None:
        pass

    def attention(self, snapshot: AttentionSnapshot) -> np.ndarray | None:
        return None

    def layer_output(self, layer: int, hidden: np.ndarray) -> None:
        pass

    def layer_state(self, layer: int) -> dict:
        """Per-layer observables for tracing: memory, uncertainty, terminated."""
        return {}

    @property
    def termination_layer(self) -> int | None:
        return None


class KVCache:
    """Per-layer key/value history for one sequence.

    Keys are stored both raw and rotated at their own position, so a layer can
    re-rotate the whole history under alternative position indices.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.k_raw: list[list[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self.k_rot: list[list[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self.v: list[list[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self.positions: list[int] = []

    def __len__(self) -> int:
        return len(self.positions)

    def append(self, layer: int, k_raw, k_rot, v):
        self.k_raw[layer].append(k_raw)
        self.k_rot[layer].append(k_rot)
        self.v[layer].append(v)

    def keys(self, layer: int, rotated: bool = True) -> np.ndarray:
        src = self.k_rot if rotated else self.k_raw
        return np.stack(src[layer], axis=1)  # (H, n, d_h)

    def values(self, layer: int) -> np.ndarray:
        return np.stack(self.v[layer], axis=1)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_row(query: np.ndarray, keys: np.ndarray, scale: float) -> np.ndarray:
    """Softmax of ``scale * keys @ query`` over the context axis."""
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or query.ndim != 1 or keys.shape[1] != query.shape[0]:
        raise ConfigError(f"query {query.shape} incompatible with keys {keys.shape}")
    return softmax(keys @ query * scale)


def rope_frequencies(head_dim: int, base: float) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError("rotary encoding needs an even head_dim", "head_dim")
    return base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def rope_positions(vec: np.ndarray, position, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``position * base**(-2i/d)``.

    ``vec`` may have any leading shape; its last axis is the head dimension.
    ``position`` is a scalar or an array broadcastable against ``vec.shape[:-1]``.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] % 2:
        raise ConfigError("rotary encoding needs an even head_dim", "head_dim")
    if np.any(np.asarray(position) < 0):
        raise InputError("position indices must be >= 0")
    freqs = rope_frequencies(vec.shape[-1], base)
    theta = np.asarray(position, dtype=np.float64)[..., None] * freqs
    cos, sin = np.cos(theta), np.sin(theta)
    x0, x1 = vec[..., 0::2], vec[..., 1::2]
    out = np.empty(np.broadcast_shapes(vec.shape, theta.shape[:-1] + (vec.shape[-1],)))
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def final_logits(hidden: np.ndarray, model: ModelWeights) -> np.ndarray:
    return rms_norm(hidden, model["final_norm"]) @ model["unembed"]


def layer_probe(hidden: np.ndarray, model: ModelWeights) -> np.ndarray:
    """Logit-lens distribution: final norm, unembedding, softmax."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (model.config.hidden,):
        raise InputError(f"hidden shape {hidden.shape} != ({model.config.hidden},)")
    return softmax(final_logits(hidden, model))


def greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(logits))


def _check_rows(rows: np.ndarray, layer: int):
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise InvariantError(f"layer {layer}: attention rows not normalized")


def forward_step(
    model: ModelWeights,
    cache: KVCache,
    token_id: int,
    position: int,
    hook: Intervention | None = None,
    visual_span: tuple[int, int] | None = None,
    position_overrides: dict[int, np.ndarray] | None = None,
    script=None,
) -> StepOutput:
    """Process one token, appending one key/value entry per layer.

    ``position_overrides`` maps a layer (1-based) to position indices for the
    whole context including this token; that layer's query and keys are
    rotated with them for this row only, the cache keeps the regular rotation.
    ``script`` replaces computed attention rows before the hook sees them.
    """
    cfg = model.config
    if not 0 <= token_id < cfg.vocab:
        raise InputError(f"token id {token_id} outside vocabulary of {cfg.vocab}")
    if visual_span is None:
        visual_span = (0, 0)
    H, dh = cfg.n_heads, cfg.head_dim

    x = model["tok_embed"][token_id].copy()
    hiddens, pres, posts = [], [], []
    for i in range(cfg.n_layers):
        layer = i + 1
        h = rms_norm(x, model.layer(i, "attn_norm"))
        q = (h @ model.layer(i, "wq")).reshape(H, dh)
        k = (h @ model.layer(i, "wk")).reshape(H, dh)
        v = (h @ model.layer(i, "wv")).reshape(H, dh)
        cache.append(i, k, rope_positions(k, position, cfg.rope_base), v)

        override = position_overrides.get(layer) if position_overrides else None
        if override is None:
            q_rot = rope_positions(q, position, cfg.rope_base)
            keys = cache.keys(i)
        else:
            override = np.asarray(override)
            if override.shape != (len(cache) + 1,):
                raise InputError(f"layer {layer}: override needs {len(cache) + 1} positions")
            q_rot = rope_positions(q, override[-1], cfg.rope_base)
            keys = rope_positions(cache.keys(i, rotated=False), override[None, :], cfg.rope_base)
        scores = np.einsum("hd,hnd->hn", q_rot, keys) * cfg.scale
        rows = softmax(scores)
        if script is not None:
            rows = script.inject(layer, rows, visual_span)
        _check_rows(rows, layer)

        pre = AttentionSnapshot(layer, rows, visual_span)
        new_rows = hook.attention(pre) if hook is not None else None
        if new_rows is None:
            post = pre
        else:
            new_rows = np.asarray(new_rows, dtype=np.float64)
            if new_rows.shape != rows.shape:
                raise InvariantError(f"layer {layer}: hook returned shape {new_rows.shape}")
            _check_rows(new_rows, layer)
            post = AttentionSnapshot(layer, new_rows, visual_span)

        mixed = np.einsum("hn,hnd->hd", post.rows, cache.values(i)).reshape(-1)
        x = x + mixed @ model.layer(i, "wo")
        h2 = rms_norm(x, model.layer(i, "ffn_norm"))
        x = x + gelu(h2 @ model.layer(i, "w_up")) @ model.layer(i, "w_down")

        hiddens.append(x)
        pres.append(pre)
        posts.append(post)
        if hook is not None:
            hook.layer_output(layer, x)

    cache.positions.append(position)
    logits = final_logits(x, model)
    term = hook.termination_layer if hook is not None else None
    return StepOutput(logits, hiddens, pres, posts, term)


@dataclass
class Generation:
    tokens: list[int]
    steps: list[StepOutput] = field(default_factory=list)
    records: list = field(default_factory=list)


def generate(
    model: ModelWeights,
    prompt_tokens,
    layout: TokenLayout,
    positions=None,
    max_new: int = 0,
    intervention: Intervention | None = None,
    script=None,
) -> Generation:
    """Greedy decoding with an optional intervention.

    Step 0 is the forward pass of the last prompt token; step ``t > 0`` feeds
    the ``t``-th generated token. Only these generating rows are exposed to
    the intervention and to ``script``; earlier prompt tokens are prefilled
    untouched. ``max_new = 0`` still runs step 0 so the trace is non-empty.
    """
    from .tracing import TraceRecord

    cfg = model.config
    prompt = [int(t) for t in prompt_tokens]
    if len(prompt) != layout.prompt_len:
        raise InputError(f"prompt has {len(prompt)} tokens, layout declares {layout.prompt_len}")
    if positions is None:
        positions = list(range(len(prompt)))
    positions = [int(p) for p in positions]
    if len(positions) != len(prompt):
        raise InputError("positions must match the prompt length")
    if max_new < 0:
        raise InputError("max_new must be >= 0")

    span = layout.visual_span
    cache = KVCache(cfg)
    for tok, pos in zip(prompt[:-1], positions[:-1]):
        forward_step(model, cache, tok, pos, visual_span=span)

    out = Generation(tokens=[])
    token, pos = prompt[-1], positions[-1]
    for step in range(max(max_new, 1)):
        overrides = None
        if intervention is not None:
            intervention.begin_step(step)
            overrides = intervention.position_overrides(len(cache) + 1)
        res = forward_step(model, cache, token, pos, intervention, span, overrides, script)
        out.steps.append(res)
        for layer in range(1, cfg.n_layers + 1):
            state = intervention.layer_state(layer) if intervention is not None else {}
            memory = state.get("memory")
            if memory is None:
                memory = np.zeros(layout.n_vis)
            out.records.append(
                TraceRecord(
                    step=step,
                    layer=layer,
                    pre_visual_attention=res.pre[layer - 1].visual.tolist(),
                    post_visual_attention=res.post[layer - 1].visual.tolist(),
                    memory=np.asarray(memory, dtype=np.float64).tolist(),
                    uncertainty=state.get("uncertainty"),
                    terminated=bool(state.get("terminated", False)),
                    layer_argmax_token=greedy(final_logits(res.hidden[layer - 1], model)),
                )
            )
        if step < max_new:
            token = greedy(res.logits)
            out.tokens.append(token)
            pos += 1
    return out


# -- model file -------------------------------------------------------------


def dump_model(model: ModelWeights) -> str:
    """Canonical JSON text: config header then tensors in fixed order."""
    header = asdict(model.config)
    tensors = [
        {"name": name, "shape": list(shape), "values": model[name].reshape(-1).tolist()}
        for name, shape in model.config.tensor_shapes().items()
    ]
    return json.dumps({"config": header, "tensors": tensors}, separators=(",", ":"), allow_nan=False) + "\n"


def save_model(model: ModelWeights, path) -> None:
    Path(path).write_text(dump_model(model), encoding="utf-8")


def parse_model(text: str) -> ModelWeights:
    try:
        doc = json.loads(text)
        config = ModelConfig(**doc["config"])
        tensors = {}
        for entry in doc["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            tensors[entry["name"]] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed model file: {exc}") from exc
    return ModelWeights(config, tensors)


def load_model(path) -> ModelWeights:
    return parse_model(Path(path).read_text(encoding="utf-8"))
