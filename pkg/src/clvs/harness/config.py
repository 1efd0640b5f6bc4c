"""Experiment config files (JSON).

Example::

    {
      "model": {"seed": 7, "dims": {"n_layers": 6, "n_heads": 2, "head_dim": 8, "vocab": 32}},
      "layout": {"n_sys": 2, "n_vis": 9, "n_usr": 3},
      "prompt": [1, 5, ...],            # optional; seeded from prompt_seed otherwise
      "max_new": 4,
      "clvs": {"beta": 0.8, "gamma": 0.8, "delta": 0.5},
      "mode": ["vanilla", "clvs"],      # or "vanilla", "clvs", "scripted"
      "schedule": {"key_index": 4, "decay_layer": 3},   # scripted mode only
      "scene": "scene.json",            # optional, relative to the config file
      "output": {"dir": "out"}
    }

``model`` holds exactly one of ``path`` or ``seed`` + ``dims``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..engine import ModelWeights, TokenLayout, load_model
from ..errors import ConfigError
from ..smoothing import ClvsConfig
from .synth import DIM_KEYS, gen_model, random_prompt

MODES = ("vanilla", "clvs", "scripted")
TOP_KEYS = {"model", "layout", "prompt", "prompt_seed", "max_new", "clvs", "mode", "schedule", "scene", "output"}


@dataclass
class ExperimentConfig:
    model_path: Path | None
    model_seed: int | None
    model_dims: dict | None
    layout: TokenLayout
    prompt: list[int] | None
    prompt_seed: int
    max_new: int
    clvs: ClvsConfig
    modes: list[str]
    schedule: dict | None = None
    scene_path: Path | None = None
    output_dir: Path | None = None
    base_dir: Path = field(default_factory=Path)

    def load_model(self) -> ModelWeights:
        if self.model_path is not None:
            try:
                return load_model(self.model_path)
            except OSError as exc:
                raise ConfigError(f"cannot read model file: {exc}", "model.path") from exc
        return gen_model(self.model_seed, self.model_dims)

    def prompt_tokens(self, vocab: int) -> list[int]:
        if self.prompt is not None:
            bad = [t for t in self.prompt if not 0 <= t < vocab]
            if bad:
                raise ConfigError(f"token ids {bad} outside vocabulary of {vocab}", "prompt")
            return list(self.prompt)
        return random_prompt(self.prompt_seed, self.layout.prompt_len, vocab)


def _resolve(base_dir: Path, path) -> Path | None:
    return Path(os.path.normpath(base_dir / path)) if path else None


def _int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", name)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}", name)
    return value


def parse_config(doc, base_dir=".", seed_override: int | None = None) -> ExperimentConfig:
    """Validate a decoded config document, raising ConfigError naming the field."""
    base_dir = Path(base_dir)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", "<root>")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "<root>")

    model = doc.get("model")
    if not isinstance(model, dict):
        raise ConfigError("required object", "model")
    has_path, has_seed = "path" in model, "seed" in model or "dims" in model
    if has_path == has_seed:
        raise ConfigError("give exactly one of 'path' or 'seed'+'dims'", "model")
    model_path = model_seed = model_dims = None
    if has_path:
        if not isinstance(model["path"], str):
            raise ConfigError("expected a string", "model.path")
        model_path = _resolve(base_dir, model["path"])
    else:
        model_seed = _int(model.get("seed"), "model.seed", 0)
        if seed_override is not None:
            model_seed = seed_override
        model_dims = model.get("dims")
        if not isinstance(model_dims, dict):
            raise ConfigError("required object", "model.dims")
        for key in model_dims:
            if key not in DIM_KEYS:
                raise ConfigError("unknown dimension", f"model.dims.{key}")

    layout_doc = doc.get("layout")
    if not isinstance(layout_doc, dict):
        raise ConfigError("required object", "layout")
    lay = {}
    for key in ("n_sys", "n_vis", "n_usr"):
        if key not in layout_doc:
            raise ConfigError("missing", f"layout.{key}")
        lay[key] = _int(layout_doc[key], f"layout.{key}", 1 if key == "n_vis" else 0)
    layout = TokenLayout(**lay)

    prompt = doc.get("prompt")
    if prompt is not None:
        if not isinstance(prompt, list):
            raise ConfigError("expected a list of token ids", "prompt")
        prompt = [_int(t, f"prompt[{i}]", 0) for i, t in enumerate(prompt)]
        if len(prompt) != layout.prompt_len:
            raise ConfigError(f"has {len(prompt)} tokens, layout declares {layout.prompt_len}", "prompt")
    prompt_seed = _int(doc.get("prompt_seed", 0), "prompt_seed", 0)
    max_new = _int(doc.get("max_new", 4), "max_new", 0)

    clvs_doc = doc.get("clvs", {})
    if not isinstance(clvs_doc, dict):
        raise ConfigError("expected an object", "clvs")
    try:
        clvs = ClvsConfig(**clvs_doc)
    except TypeError as exc:
        raise ConfigError(str(exc), "clvs") from exc
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"clvs.{exc.field}") from exc

    mode = doc.get("mode", ["vanilla", "clvs"])
    modes = [mode] if isinstance(mode, str) else mode
    if not isinstance(modes, list) or not modes or any(m not in MODES for m in modes):
        raise ConfigError(f"expected one of {MODES} or a list of them", "mode")
    if "scripted" in modes and len(modes) > 1:
        raise ConfigError("'scripted' cannot be combined with other modes", "mode")
    schedule = doc.get("schedule")
    if ("scripted" in modes) != (schedule is not None):
        raise ConfigError("required exactly when mode is 'scripted'", "schedule")
    if schedule is not None and not isinstance(schedule, dict):
        raise ConfigError("expected an object", "schedule")

    scene = doc.get("scene")
    if scene is not None and not isinstance(scene, str):
        raise ConfigError("expected a path string", "scene")
    output = doc.get("output", {})
    if not isinstance(output, dict):
        raise ConfigError("expected an object", "output")
    out_dir = output.get("dir")

    return ExperimentConfig(
        model_path=model_path,
        model_seed=model_seed,
        model_dims=model_dims,
        layout=layout,
        prompt=prompt,
        prompt_seed=prompt_seed,
        max_new=max_new,
        clvs=clvs,
        modes=modes,
        schedule=schedule,
        scene_path=_resolve(base_dir, scene),
        output_dir=_resolve(base_dir, out_dir),
        base_dir=base_dir,
    )


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "<file>") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", "<file>") from exc
    return parse_config(doc, path.parent, seed_override)
