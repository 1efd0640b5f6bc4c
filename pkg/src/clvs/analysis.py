"""Mechanism-level metrics computed from traces.

Key-object attention per layer, the layer where it peaks, relative gains of a
smoothed run over a vanilla one, per-step convergence layers, and the
statistics relating logit-lens uncertainty to convergence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, NonConvergenceError, UndefinedStatisticError
from .tracing import TraceFile, TraceRecord


@dataclass(frozen=True)
class ObjectOverlap:
    name: str
    overlap: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "overlap", tuple(float(x) for x in self.overlap))
        if any(not 0.0 <= x <= 1.0 for x in self.overlap):
            raise InputError(f"object {self.name!r}: overlaps must lie in [0, 1]")


@dataclass
class ConvergenceProfile:
    argmax_tokens: list[int]
    final_token: int
    convergence_layer: int


def key_object_attention(avg_attention, overlap: ObjectOverlap) -> float:
    att = np.asarray(avg_attention, dtype=np.float64)
    ov = np.asarray(overlap.overlap, dtype=np.float64)
    if att.shape != ov.shape:
        raise InputError(f"attention length {att.shape} != overlap length {ov.shape}")
    return float(att @ ov)


def peak_layer(series) -> int:
    """1-based argmax; the lowest layer wins ties."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise InputError("empty attention series")
    return int(np.argmax(values)) + 1


def relative_increase(clvs, vanilla, clip_pct: float = 100.0) -> list[float]:
    clvs = np.asarray(clvs, dtype=np.float64)
    vanilla = np.asarray(vanilla, dtype=np.float64)
    if clvs.shape != vanilla.shape:
        raise InputError("series lengths differ")
    if not clip_pct > 0:
        raise InputError("clip_pct must be positive")
    out = []
    for c, v in zip(clvs.tolist(), vanilla.tolist()):
        if c == v:
            out.append(0.0)
        elif v == 0:
            out.append(clip_pct if c > 0 else 0.0)
        else:
            out.append(min(100.0 * (c - v) / v, clip_pct))
    return out


def point_biserial(u_values, flags) -> float:
    """Point-biserial correlation with the population standard deviation."""
    u = np.asarray(u_values, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    if u.shape != f.shape or u.ndim != 1:
        raise InputError("u_values and flags must be equal-length vectors")
    n1 = int(f.sum())
    n0 = f.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedStatisticError("point-biserial correlation needs both classes present")
    s = float(np.std(u))
    if s == 0:
        raise UndefinedStatisticError("point-biserial correlation undefined for zero-variance u")
    p, q = n1 / f.size, n0 / f.size
    return float((u[f].mean() - u[~f].mean()) / s * math.sqrt(p * q))


def _log_likelihood(b0, b1, x, y):
    z = b0 + b1 * x
    # log(1 + e^z) computed stably
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


def logistic_fit(u_values, flags, max_iter: int = 100, tol: float = 1e-10) -> tuple[float, float]:
    """Univariate logistic regression by iteratively reweighted least squares.

    Returns ``(intercept, coefficient)`` of ``P(flag) = sigmoid(b0 + b1 * u)``.
    The fit runs on mean-centred ``u`` with a closed-form 2x2 Newton solve;
    negating ``u`` therefore negates the coefficient bit-for-bit, and a
    constant ``u`` yields a coefficient of exactly zero.
    """
    x = np.asarray(u_values, dtype=np.float64)
    y = np.asarray(flags, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("u_values and flags must be equal-length vectors")
    if y.sum() == 0 or y.sum() == y.size:
        raise UndefinedStatisticError("logistic regression needs both classes present")
    pos, neg = x[y == 1], x[y == 0]
    if pos.min() > neg.max() or pos.max() < neg.min():
        raise NonConvergenceError("perfect separation: the maximum-likelihood coefficient is infinite")

    center = x.mean()
    xc = x - center
    a0 = a1 = 0.0
    ll = _log_likelihood(a0, a1, xc, y)
    for _ in range(max_iter):
        p = 0.5 * (1.0 + np.tanh(0.5 * (a0 + a1 * xc)))
        w = p * (1.0 - p)
        r = y - p
        g0, g1 = r.sum(), (r * xc).sum()
        h00, h01, h11 = w.sum(), (w * xc).sum(), (w * xc * xc).sum()
        det = h00 * h11 - h01 * h01
        if det > 0:
            s0 = (h11 * g0 - h01 * g1) / det
            s1 = (h00 * g1 - h01 * g0) / det
        else:
            s0, s1 = g0 / h00, 0.0
        new_ll = _log_likelihood(a0 + s0, a1 + s1, xc, y)
        # step-halving keeps the likelihood monotone
        halvings = 0
        while new_ll < ll and halvings < 30:
            s0, s1 = s0 / 2, s1 / 2
            new_ll = _log_likelihood(a0 + s0, a1 + s1, xc, y)
            halvings += 1
        if new_ll < ll:
            break
        a0, a1 = a0 + s0, a1 + s1
        improved, ll = new_ll - ll, new_ll
        if improved < tol:
            break
    return float(a0 - a1 * center), float(a1)


def convergence_layer(records: list[TraceRecord]) -> ConvergenceProfile:
    """Earliest layer from which every layer's argmax equals the final token."""
    records = sorted(records, key=lambda r: r.layer)
    tokens = [r.layer_argmax_token for r in records]
    final = tokens[-1]
    layer = len(tokens)
    while layer > 1 and tokens[layer - 2] == final:
        layer -= 1
    return ConvergenceProfile(tokens, final, records[layer - 1].layer)


# -- trace-level aggregation ----------------------------------------------------


def head_mean(rows) -> np.ndarray:
    return np.asarray(rows, dtype=np.float64).mean(axis=0)


def object_series(trace: TraceFile, overlap: ObjectOverlap, step: int | None = None) -> list[float]:
    """a_obj per layer from the post-intervention visual attention.

    For vanilla traces post equals pre, so this is raw attention there.
    Averaged over steps unless ``step`` is given.
    """
    steps = trace.steps()
    if step is not None:
        steps = [steps[step]]
    per_step = np.array(
        [[key_object_attention(head_mean(r.post_visual_attention), overlap) for r in group] for group in steps]
    )
    return per_step.mean(axis=0).tolist()


def peak_distribution(trace: TraceFile, overlap: ObjectOverlap) -> dict[int, int]:
    """How many steps peak at each layer."""
    counts: dict[int, int] = {}
    for s in range(len(trace.steps())):
        lp = peak_layer(object_series(trace, overlap, step=s))
        counts[lp] = counts.get(lp, 0) + 1
    return dict(sorted(counts.items()))


def uncertainty_convergence_pairs(trace: TraceFile) -> tuple[list[float], list[bool]]:
    """(u, converged) for every record that carries an uncertainty value.

    A layer counts as converged when it is at or past the step's convergence
    layer.
    """
    u, flags = [], []
    for group in trace.steps():
        conv = convergence_layer(group).convergence_layer
        for r in group:
            if r.uncertainty is not None:
                u.append(float(r.uncertainty))
                flags.append(r.layer >= conv)
    return u, flags


def uncertainty_statistics(u, flags) -> dict:
    out: dict = {"n": len(u), "n_converged": int(sum(flags))}
    try:
        out["point_biserial"] = point_biserial(u, flags)
    except (UndefinedStatisticError, InputError) as exc:
        out["point_biserial"] = None
        out["point_biserial_error"] = str(exc)
    try:
        b0, b1 = logistic_fit(u, flags)
        out["logistic_intercept"], out["logistic_coefficient"] = b0, b1
    except (UndefinedStatisticError, NonConvergenceError, InputError) as exc:
        out["logistic_intercept"] = out["logistic_coefficient"] = None
        out["logistic_error"] = str(exc)
    return out


def build_report(vanilla: TraceFile, clvs: TraceFile, scene: dict | None = None, clip_pct: float = 100.0) -> dict:
    """Paired-run summary; ``scene`` comes from :func:`load_scene`."""
    report: dict = {
        "n_layers": vanilla.n_layers,
        "n_steps": len(vanilla.steps()),
        "objects": [],
    }
    for obj in (scene or {}).get("objects", []):
        va = object_series(vanilla, obj)
        cl = object_series(clvs, obj)
        report["objects"].append(
            {
                "name": obj.name,
                "a_obj_vanilla": va,
                "a_obj_clvs": cl,
                "peak_layer_vanilla": peak_layer(va),
                "peak_layer_clvs": peak_layer(cl),
                "peak_distribution_vanilla": {str(k): v for k, v in peak_distribution(vanilla, obj).items()},
                "relative_increase": relative_increase(cl, va, clip_pct),
            }
        )
    term = []
    for group in clvs.steps():
        fired = [r.layer for r in group if r.terminated]
        term.append(fired[0] if fired else None)
    report["termination_layers"] = term
    report["convergence_layers_vanilla"] = [convergence_layer(g).convergence_layer for g in vanilla.steps()]
    report["uncertainty_vs_convergence"] = uncertainty_statistics(*uncertainty_convergence_pairs(vanilla))
    return report


def write_report(report: dict, out_dir, stem: str = "report") -> list[Path]:
    """Write ``<stem>.json`` plus one ``<stem>.<object>.csv`` per object; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths = [json_path]
    for obj in report["objects"]:
        path = out_dir / f"{stem}.{obj['name']}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "a_obj_vanilla", "a_obj_clvs", "relative_increase"])
            rows = zip(obj["a_obj_vanilla"], obj["a_obj_clvs"], obj["relative_increase"])
            for i, (va, cl, ri) in enumerate(rows, 1):
                w.writerow([i, repr(va), repr(cl), repr(ri)])
        paths.append(path)
    return paths


def load_scene(path) -> dict:
    """Scene file: ``{"grid": [rows, cols], "objects": [{"name", "overlap"}]}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    rows, cols = doc["grid"]
    objects = [ObjectOverlap(o["name"], o["overlap"]) for o in doc["objects"]]
    for obj in objects:
        if len(obj.overlap) != rows * cols:
            raise InputError(f"object {obj.name!r}: {len(obj.overlap)} overlaps for a {rows}x{cols} grid")
    return {"grid": (rows, cols), "objects": objects}
