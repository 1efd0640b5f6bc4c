"""Run configured experiments: generate traces, verify against the oracle, report."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..analysis import ObjectOverlap, build_report, load_scene, write_report
from ..engine import ENGINE_VERSION, Generation, ModelWeights, TokenLayout, generate
from ..smoothing import ClvsConfig, ClvsSession, Observer
from ..tracing import TRACE_SUFFIX, TraceFile, checksum, write_trace
from .config import ExperimentConfig
from .oracle import oracle_forward
from .synth import ScriptedSchedule, schedule_from_dict

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3


@dataclass
class Run:
    name: str
    generation: Generation
    trace: TraceFile
    session: object
    clvs: bool
    memory: list[np.ndarray] = field(default_factory=list)


@dataclass
class ExperimentResult:
    exit_code: int
    runs: dict[str, Run]
    report: dict | None = None
    mismatches: list[str] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)


def trace_header(model: ModelWeights, layout: TokenLayout, clvs: ClvsConfig, mode: str, prompt, tokens) -> dict:
    clvs_doc = clvs.to_dict()
    clvs_doc["gate_start_layer"] = clvs.gate_for(model.config.n_layers)
    return {
        "engine_version": ENGINE_VERSION,
        "mode": mode,
        "seed": model.config.seed,
        "model": asdict(model.config),
        "layout": asdict(layout),
        "clvs": clvs_doc,
        "prompt": list(prompt),
        "tokens": list(tokens),
    }


def run_mode(model, layout, prompt, max_new, clvs_config, use_clvs: bool, name: str, script=None) -> Run:
    session_cls = ClvsSession if use_clvs else Observer
    session = session_cls(model, layout, clvs_config)
    gen = generate(model, prompt, layout, None, max_new, session, script)
    header = trace_header(model, layout, clvs_config, name, prompt, gen.tokens)
    trace = TraceFile(header, gen.records)
    memory = [np.array([r.memory for r in group]) for group in trace.steps()]
    return Run(name, gen, trace, session, use_clvs, memory)


def verify_run(run: Run, model, layout, prompt, max_new, clvs_config, script, tol: float) -> list[str]:
    """Compare an engine run against the cache-free oracle."""
    ref = oracle_forward(model, prompt, layout, None, max_new, clvs_config if run.clvs else None, script)
    problems = []
    if ref.tokens != run.generation.tokens:
        problems.append(f"{run.name}: tokens {run.generation.tokens} != oracle {ref.tokens}")
    for s, (step, ref_logits) in enumerate(zip(run.generation.steps, ref.logits)):
        diff = float(np.max(np.abs(step.logits - ref_logits)))
        if diff > tol:
            problems.append(f"{run.name}: step {s} logits differ by {diff:.3e}")
        post = np.array([p.visual for p in step.post])
        diff = float(np.max(np.abs(post - ref.post_visual[s])))
        if diff > tol:
            problems.append(f"{run.name}: step {s} post-intervention attention differs by {diff:.3e}")
        if run.clvs:
            diff = float(np.max(np.abs(run.memory[s] - ref.memory[s])))
            if diff > tol:
                problems.append(f"{run.name}: step {s} memory trajectory differs by {diff:.3e}")
            if step.termination_layer != ref.termination[s]:
                problems.append(
                    f"{run.name}: step {s} terminated at {step.termination_layer}, oracle at {ref.termination[s]}"
                )
    return problems


def _schedule(cfg: ExperimentConfig, model) -> ScriptedSchedule | None:
    if cfg.schedule is None:
        return None
    c = model.config
    return schedule_from_dict(cfg.schedule, c.n_layers, c.n_heads, cfg.layout.n_vis)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    verify: bool = False,
    tol: float = 1e-9,
    write: bool = True,
) -> ExperimentResult:
    model = cfg.load_model()
    prompt = cfg.prompt_tokens(model.config.vocab)
    layout = cfg.layout
    script = _schedule(cfg, model)

    if cfg.modes == ["scripted"]:
        plan = [("vanilla", False), ("clvs", True)]
    else:
        plan = [(m, m == "clvs") for m in cfg.modes]

    runs = {}
    for name, use_clvs in plan:
        log.info("running %s", name)
        runs[name] = run_mode(model, layout, prompt, cfg.max_new, cfg.clvs, use_clvs, name, script)

    result = ExperimentResult(EXIT_OK, runs)
    if verify:
        for run in runs.values():
            result.mismatches += verify_run(run, model, layout, prompt, cfg.max_new, cfg.clvs, script, tol)
        if result.mismatches:
            result.exit_code = EXIT_VERIFY

    if "vanilla" in runs and "clvs" in runs:
        if cfg.scene_path is not None:
            scene = load_scene(cfg.scene_path)
        elif script is not None:
            overlap = [0.0] * layout.n_vis
            overlap[script.key_index] = 1.0
            scene = {"grid": (1, layout.n_vis), "objects": [ObjectOverlap("key", overlap)]}
        else:
            scene = None
        result.report = build_report(runs["vanilla"].trace, runs["clvs"].trace, scene)

    out_dir = out_dir or cfg.output_dir
    if write and out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = {"prompt": prompt, "runs": {}}
        for name, run in runs.items():
            path = out_dir / f"{name}{TRACE_SUFFIX}"
            write_trace(path, run.trace)
            result.files.append(path)
            summary["runs"][name] = {"tokens": run.generation.tokens, "trace_sha256": checksum(run.trace)}
        if result.report is not None:
            result.files += write_report(result.report, out_dir)
        if verify:
            summary["verify"] = {"tolerance": tol, "mismatches": result.mismatches}
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        result.files.append(summary_path)
    return result
