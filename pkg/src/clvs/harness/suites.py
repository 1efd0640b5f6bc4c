"""Fixed scenario grids shared by the verification tests and the acceptance suite."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from ..engine import ModelWeights, TokenLayout
from .synth import ScriptedSchedule, gen_model, make_decay_schedule, random_prompt


@dataclass
class Scenario:
    seed: int
    model: ModelWeights
    layout: TokenLayout
    prompt: list[int]
    max_new: int
    schedule: ScriptedSchedule | None = None

    @property
    def label(self) -> str:
        c = self.model.config
        return f"seed={self.seed} L={c.n_layers} H={c.n_heads} Nv={self.layout.n_vis}"


def tiny_grid(n: int = 50, max_new: int = 6) -> list[Scenario]:
    """``n`` seeded tiny models cycling over L in {4,6,8}, H in {2,4}, N_v in {4,9,16}.

    Every other model uses ``logit_scale=4`` so that uncertainty gating
    actually fires in part of the grid.
    """
    combos = list(itertools.product((4, 6, 8), (2, 4), (4, 9, 16)))
    out = []
    for i in range(n):
        L, H, nv = combos[i % len(combos)]
        seed = 1000 + i
        dims = {"n_layers": L, "n_heads": H, "head_dim": 8, "vocab": 32, "logit_scale": 4.0 if i % 2 else 1.0}
        layout = TokenLayout(2, nv, 3)
        model = gen_model(seed, dims)
        out.append(Scenario(seed, model, layout, random_prompt(seed, layout.prompt_len, 32), max_new))
    return out


def decay_scenarios(n: int = 20, max_new: int = 3) -> list[Scenario]:
    """Scripted decay runs: the key token's attention drops to 0 at layer 2 or 3.

    Depth is 12-16, so the uncertainty gate (ceil((L+1)/2) >= 7) opens only
    after the window ``decay..decay+3``.
    """
    combos = list(itertools.product((12, 14, 16), (2, 4), (4, 9, 16), (2, 3)))
    out = []
    for i in range(n):
        L, H, nv, decay = combos[(7 * i) % len(combos)]
        seed = 5000 + i
        model = gen_model(seed, {"n_layers": L, "n_heads": H, "head_dim": 8, "vocab": 32, "logit_scale": 4.0})
        layout = TokenLayout(2, nv, 3)
        key = (3 * i + 1) % nv
        sched = make_decay_schedule(seed, L, H, nv, key, decay)
        out.append(Scenario(seed, model, layout, random_prompt(seed, layout.prompt_len, 32), max_new, sched))
    return out
