"""Multi-stage compression schedules.

A plan is an ordered list of stages, each owning a fraction of the total
training steps and a compressor spec. Built-in plans start with heavy
compression at a shallow layer and finish with no compression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .compressor import IDENTITY, CompressorSpec, Kind
from .errors import PlanError

SCHEME_NAMES = (
    "single",
    "two",
    "three-deeper",
    "three-wider",
    "four-wider-then-deeper",
    "four-deeper-then-wider",
)

# (layer, stride) per compressed stage at the 32-layer reference scale; a final
# uncompressed stage is appended to each.
_SCHEMES: dict[str, list[tuple[int, int]]] = {
    "single": [],
    "two": [(2, 8)],
    "three-deeper": [(2, 8), (16, 8)],
    "three-wider": [(2, 8), (2, 2)],
    "four-wider-then-deeper": [(2, 8), (2, 2), (16, 2)],
    "four-deeper-then-wider": [(2, 8), (16, 8), (16, 2)],
}


@dataclass(frozen=True)
class Stage:
    fraction: float
    spec: CompressorSpec


@dataclass(frozen=True)
class StagePlan:
    name: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise PlanError("a plan needs at least one stage")
        fr = [s.fraction for s in self.stages]
        if any(f < 0 for f in fr) or not any(f > 0 for f in fr):
            raise PlanError(f"stage fractions must be non-negative with at least one positive: {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise PlanError(f"stage fractions sum to {sum(fr)}, expected 1")

    @property
    def specs(self) -> list[CompressorSpec]:
        return [s.spec for s in self.stages]

    def __len__(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stages": [{"fraction": s.fraction, **s.spec.to_dict()} for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        stages = []
        for st in d["stages"]:
            st = dict(st)
            frac = float(st.pop("fraction"))
            stages.append(Stage(frac, CompressorSpec.from_dict(st)))
        return cls(d.get("name", "custom"), tuple(stages))


def map_layer(layer: int, n_layers: int, scale: str) -> int:
    """Full-scale layer 2 stays 2; layer 16 (the middle of 32) maps to ``N/2``."""
    if scale == "full":
        return layer
    if layer == 16:
        return max(1, n_layers // 2)
    return min(layer, n_layers)


def named_scheme(name: str, scale: str = "full", n_layers: int = 32, kind: Kind = Kind.AVGPOOL) -> StagePlan:
    if name not in _SCHEMES:
        raise PlanError(f"unknown scheme {name!r}; expected one of {SCHEME_NAMES}")
    if scale not in ("full", "desk"):
        raise PlanError(f"scale must be 'full' or 'desk', got {scale!r}")
    if scale == "full":
        n_layers = 32
    compressed = _SCHEMES[name]
    n_stages = len(compressed) + 1
    frac = 1.0 / n_stages
    stages = [Stage(frac, CompressorSpec(kind, map_layer(k, n_layers, scale), s)) for k, s in compressed]
    stages.append(Stage(frac, IDENTITY))
    return StagePlan(name, tuple(stages))


def two_stage(stage1_fraction: float, layer: int = 2, stride: int = 8, kind: Kind = Kind.AVGPOOL) -> StagePlan:
    """Two-stage plan with an arbitrary split; a 0 or 1 fraction leaves an empty stage."""
    f = float(stage1_fraction)
    return StagePlan(
        f"two@{round(100 * f)}",
        (Stage(f, CompressorSpec(kind, layer, stride)), Stage(1.0 - f, IDENTITY)),
    )


def single_spec_plan(spec: CompressorSpec, name: str | None = None) -> StagePlan:
    return StagePlan(name or spec.label(), (Stage(1.0, spec),))


def split_steps(total_steps: int, plan: StagePlan) -> list[int]:
    """Floor each stage's share; the remainder goes to the last stage.

    A stage with a positive fraction always gets at least one step.
    """
    n_pos = sum(1 for s in plan.stages if s.fraction > 0)
    if total_steps < n_pos:
        raise PlanError(f"{total_steps} steps cannot cover {n_pos} stages")
    counts = []
    for st in plan.stages:
        exact = Fraction(st.fraction).limit_denominator(10**9) * total_steps
        c = math.floor(exact)
        if st.fraction > 0:
            c = max(1, c)
        counts.append(c)
    counts[-1] += total_steps - sum(counts)
    if counts[-1] < (1 if plan.stages[-1].fraction > 0 else 0):
        # bumping early stages to one step overdrew the final stage
        raise PlanError(f"cannot split {total_steps} steps over fractions {[s.fraction for s in plan.stages]}")
    return counts


def stage_bounds(total_steps: int, plan: StagePlan) -> list[tuple[int, int]]:
    """Half-open ``[start, end)`` step range per stage."""
    out, start = [], 0
    for c in split_steps(total_steps, plan):
        out.append((start, start + c))
        start += c
    return out


def stage_at_step(plan: StagePlan, step: int, total_steps: int) -> int:
    if not 0 <= step < total_steps:
        raise IndexError(f"step {step} outside [0, {total_steps})")
    for i, (a, b) in enumerate(stage_bounds(total_steps, plan)):
        if a <= step < b:
            return i
    raise AssertionError("unreachable")


def spec_at_step(plan: StagePlan, step: int, total_steps: int) -> CompressorSpec:
    return plan.stages[stage_at_step(plan, step, total_steps)].spec
