"""Brute-force reference decoder used to check the engine.

Every step recomputes the whole sequence from scratch with dense causal
attention: no cache, no hooks, no shared helpers with the engine. Rotary
encoding is done with complex multiplication instead of cos/sin pairs, and the
smoothing rules are applied with explicit loops. Rows from the last prompt
position on are "generating rows": each gets its own vision memory, its own
unified layer-1 positions and its own termination state, exactly as when it was
the current token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..engine import ModelWeights, TokenLayout
from ..errors import InputError
from ..smoothing import ClvsConfig


@dataclass
class OracleResult:
    tokens: list[int]
    logits: list[np.ndarray] = field(default_factory=list)
    # per step: (L, N_v) memory after each layer, termination layer, post rows
    memory: list[np.ndarray] = field(default_factory=list)
    termination: list[int | None] = field(default_factory=list)
    post_visual: list[np.ndarray] = field(default_factory=list)
    smoothed: list[list] = field(default_factory=list)


def _rotate(x, pos, base):
    # x: (..., d) real; pairs (2i, 2i+1) as complex numbers times e^{i pos w_i}
    d = x.shape[-1]
    w = np.array([base ** (-(2.0 * i) / d) for i in range(d // 2)])
    z = x[..., 0::2] + 1j * x[..., 1::2]
    z = z * np.exp(1j * np.multiply.outer(np.asarray(pos, dtype=float), w))
    out = np.empty(z.shape[:-1] + (d,))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _norm(x, g):
    return x / np.sqrt((x**2).mean(axis=-1, keepdims=True) + 1e-6) * g


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x * x * x)))


def _probs(logits):
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _topk_entropy(p, k):
    if k == 1:
        return 0.0
    top = sorted(p.tolist(), reverse=True)[:k]
    s = sum(top)
    h = 0.0
    for v in top:
        if v > 0:
            h -= (v / s) * math.log(v / s)
    return min(max(h / math.log(k), 0.0), 1.0)


def _unified(layout, n):
    """Positions for the first n tokens with all image tokens at index n_sys."""
    out = []
    for j in range(n):
        if j < layout.n_sys:
            out.append(j)
        elif j < layout.n_sys + layout.n_vis:
            out.append(layout.n_sys)
        else:
            out.append(j - layout.n_vis + 1)
    return out


def oracle_forward(
    model: ModelWeights,
    prompt,
    layout: TokenLayout,
    positions=None,
    max_new: int = 0,
    clvs_config: ClvsConfig | None = None,
    schedule=None,
) -> OracleResult:
    cfg = model.config
    L, H, dh = cfg.n_layers, cfg.n_heads, cfg.head_dim
    W = model.tensors
    N = len(prompt)
    if N != layout.prompt_len:
        raise InputError("prompt length does not match layout")
    if positions is None:
        positions = list(range(N))
    positions = list(positions)
    vs, ve = layout.n_sys, layout.n_sys + layout.n_vis
    scale = 1 / math.sqrt(dh if cfg.attn_scale == "head" else cfg.hidden)
    gate = None
    if clvs_config is not None:
        gate = clvs_config.gate_for(L)

    result = OracleResult(tokens=[])
    seq = list(prompt)
    for step in range(max(max_new, 1)):
        n = len(seq)
        for tok in seq:
            if not 0 <= tok < cfg.vocab:
                raise InputError(f"token {tok} outside vocabulary")
        pos = positions + [positions[-1] + g for g in range(1, n - N + 1)]
        gen_rows = list(range(N - 1, n))
        memory = {i: None for i in gen_rows}
        done = {i: False for i in gen_rows}
        term_layer = {i: None for i in gen_rows}
        mem_traj = []
        post_vis = []
        smoothed_log = []

        x = W["tok_embed"][seq].copy()
        for l in range(L):
            layer = l + 1
            h = _norm(x, W[f"layers.{l}.attn_norm"])
            q = (h @ W[f"layers.{l}.wq"]).reshape(n, H, dh)
            k = (h @ W[f"layers.{l}.wk"]).reshape(n, H, dh)
            v = (h @ W[f"layers.{l}.wv"]).reshape(n, H, dh)
            qr = _rotate(q, np.array(pos)[:, None], cfg.rope_base)
            kr = _rotate(k, np.array(pos)[:, None], cfg.rope_base)
            att = np.zeros((H, n, n))
            for hh in range(H):
                s = qr[:, hh, :] @ kr[:, hh, :].T * scale
                s = s + np.triu(np.full((n, n), -np.inf), 1)
                s = s - s.max(axis=1, keepdims=True)
                e = np.exp(s)
                att[hh] = e / e.sum(axis=1, keepdims=True)

            step_smoothed = None
            for i in gen_rows:
                if layer == 1 and clvs_config is not None and clvs_config.unified_positions:
                    up = _unified(layout, i + 1)
                    qu = _rotate(q[i], up[i], cfg.rope_base)
                    ku = _rotate(k[: i + 1], np.array(up)[:, None], cfg.rope_base)
                    for hh in range(H):
                        s = ku[:, hh, :] @ qu[hh] * scale
                        e = np.exp(s - s.max())
                        att[hh, i, : i + 1] = e / e.sum()
                if schedule is not None:
                    inj = schedule.rows[l]
                    for hh in range(H):
                        row = att[hh, i, : i + 1]
                        text_mass = 1 - row[vs:ve].sum()
                        if i + 1 > ve - vs:
                            f = (1 - inj[hh].sum()) / text_mass
                            row[:vs] *= f
                            row[ve:] *= f
                            row[vs:ve] = inj[hh]
                        else:
                            row[vs:ve] = inj[hh]
                            row /= row.sum()
                if clvs_config is None:
                    continue
                lam = [att[hh, i, vs:ve].copy() for hh in range(H)]
                if layer == 1:
                    memory[i] = np.array([max(lam[hh][j] for hh in range(H)) for j in range(ve - vs)])
                elif not done[i]:
                    b, g = clvs_config.beta, clvs_config.gamma
                    sm = []
                    for hh in range(H):
                        lam_hat = np.array([b * lam[hh][j] + (1 - b) * memory[i][j] for j in range(ve - vs)])
                        sm.append(lam_hat)
                        row = att[hh, i, : i + 1].copy()
                        row[vs:ve] = lam_hat
                        att[hh, i, : i + 1] = row / row.sum()
                    memory[i] = np.array(
                        [g * memory[i][j] + (1 - g) * max(lam[hh][j] for hh in range(H)) for j in range(ve - vs)]
                    )
                    if i == n - 1:
                        step_smoothed = np.array(sm)
            if clvs_config is not None:
                mem_traj.append(memory[n - 1].copy())
                smoothed_log.append(step_smoothed)
            post_vis.append(att[:, n - 1, vs:ve].copy())

            mixed = np.einsum("hij,jhd->ihd", att, v).reshape(n, cfg.hidden)
            x = x + mixed @ W[f"layers.{l}.wo"]
            h2 = _norm(x, W[f"layers.{l}.ffn_norm"])
            x = x + _gelu(h2 @ W[f"layers.{l}.w_up"]) @ W[f"layers.{l}.w_down"]

            if clvs_config is not None and layer >= gate:
                for i in gen_rows:
                    if done[i]:
                        continue
                    lens = _norm(x[i], W["final_norm"]) @ W["unembed"]
                    if _topk_entropy(_probs(lens), clvs_config.topk) < clvs_config.delta:
                        done[i] = True
                        term_layer[i] = layer

        logits = _norm(x[n - 1], W["final_norm"]) @ W["unembed"]
        result.logits.append(logits)
        result.post_visual.append(np.array(post_vis))
        result.termination.append(term_layer[n - 1])
        if clvs_config is not None:
            result.memory.append(np.array(mem_traj))
            result.smoothed.append(smoothed_log)
        if step < max_new:
            best = 0
            for t in range(1, cfg.vocab):
                if logits[t] > logits[best]:
                    best = t
            result.tokens.append(best)
            seq.append(best)
    return result
