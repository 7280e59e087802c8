"""Token, compression-ratio and FLOPs bookkeeping.

Visual-token totals are summed over layers: a run that compresses ``L``
visual tokens to ``ceil(L/S)`` after layer ``K`` of ``N`` processes
``K*L + (N-K)*ceil(L/S)`` visual tokens, and its compression ratio is
``N*L`` divided by that total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

from .compressor import CompressorSpec, out_len
from .errors import PlanError, SpecError

if TYPE_CHECKING:
    from .model import ModelConfig
    from .schedule import StagePlan

FULL_N = 32
FULL_L = 576
FULL_D = 4096
FULL_VOCAB = 32000

# Stage-averaged #Tokens reported for the built-in schemes; they do not
# equal the step-weighted mean of per-stage totals.
REPORTED_PLAN_TOKENS = {
    "single": 18432,
    "two": 10062,
    "three-deeper": 10597,
    "three-wider": 10407,
    "four-wider-then-deeper": 11088,
    "four-deeper-then-wider": 10863,
}


def _check(N: int, L: int, K: int, S: int) -> None:
    if N < 1 or L < 1:
        raise SpecError(f"N and L must be positive, got N={N}, L={L}")
    if S < 1:
        raise SpecError(f"stride must be >= 1, got S={S}")
    if not 1 <= K <= N:
        raise SpecError(f"layer K={K} outside [1, N={N}]")


def token_total(N: int, L: int, K: int, S: int) -> int:
    _check(N, L, K, S)
    return K * L + (N - K) * out_len(L, S)


def percent(r: Fraction) -> int:
    """Round ``100*r`` half away from zero."""
    return int((Decimal(r.numerator) * 100 / Decimal(r.denominator)).to_integral_value(ROUND_HALF_UP))


def compression_ratio(N: int, L: int, K: int, S: int) -> tuple[Fraction, int]:
    r = Fraction(N * L, token_total(N, L, K, S))
    return r, percent(r)


def spec_tokens(spec: CompressorSpec, N: int, L: int) -> int:
    if spec.is_identity:
        return N * L
    return token_total(N, L, spec.layer, spec.stride)


def layer_lengths(spec: CompressorSpec, N: int, T: int, L: int) -> list[int]:
    """Sequence length seen by each layer for a ``T``-token input with an ``L``-token visual span."""
    if spec.is_identity:
        return [T] * N
    spec.validate(N)
    short = T - L + out_len(L, spec.stride)
    return [T if i <= spec.layer else short for i in range(1, N + 1)]


@dataclass
class PlanAverage:
    tokens: float
    cr_percent: int
    stage_tokens: list[int]
    reported_tokens: int | None = None

    @property
    def reconciled(self) -> bool | None:
        if self.reported_tokens is None:
            return None
        return round(self.tokens) == self.reported_tokens


def plan_average(plan: "StagePlan", N: int, L: int) -> PlanAverage:
    """Fraction-weighted mean of per-stage visual-token totals."""
    fracs = [st.fraction for st in plan.stages]
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise PlanError(f"stage fractions sum to {sum(fracs)}, expected 1")
    per_stage = [spec_tokens(st.spec, N, L) for st in plan.stages]
    avg = sum(f * t for f, t in zip(fracs, per_stage))
    cr = percent(Fraction(N * L) / Fraction(avg))
    reported = REPORTED_PLAN_TOKENS.get(plan.name) if (N, L) == (FULL_N, FULL_L) else None
    return PlanAverage(avg, cr, per_stage, reported)


def flops_forward(config: "ModelConfig | tuple[int, int]", lengths: Sequence[int]) -> float:
    """Estimated forward FLOPs for one sequence.

    Per layer ``24*T*d^2 + 4*T^2*d``, plus ``2*T*d*vocab`` for the output head
    evaluated at the final layer's length. ``config`` may be a ModelConfig or
    a ``(d_model, vocab)`` pair. This is an analytic estimate, not a profile.
    """
    if isinstance(config, tuple):
        d, vocab = config
    else:
        d, vocab = config.d_model, config.vocab_size
    if not lengths or any(t <= 0 for t in lengths):
        raise ValueError("layer lengths must be positive")
    total = sum(24.0 * t * d * d + 4.0 * t * t * d for t in lengths)
    return total + 2.0 * lengths[-1] * d * vocab


def flops_train(config, lengths: Sequence[int]) -> float:
    return 3.0 * flops_forward(config, lengths)


def param_count(config: "ModelConfig") -> int:
    """Closed-form parameter count of the model built by ``build_model``."""
    d, V, F, N = config.d_model, config.vocab_size, config.d_ff, config.n_layers
    embed = V * d + config.max_seq * d
    visual = (config.code_dim + 2 * config.grid_side) * d + d
    per_layer = 4 * d * d + 2 * d * F + 2 * d
    return embed + visual + N * per_layer + d + d * V


@dataclass
class ComputeReport:
    N: int
    L: int
    K: int | None
    S: int | None
    layer_lengths: list[int]
    tokens: int
    cr: Fraction
    cr_percent: int
    flops_forward: float
    flops_train: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "L": self.L,
            "K": self.K,
            "S": self.S,
            "layer_lengths": self.layer_lengths,
            "tokens": self.tokens,
            "cr": f"{self.cr.numerator}/{self.cr.denominator}",
            "cr_value": float(self.cr),
            "cr_percent": self.cr_percent,
            "flops_forward": self.flops_forward,
            "flops_train": self.flops_train,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        k = "-" if self.K is None else self.K
        s = "-" if self.S is None else self.S
        return (
            f"N={self.N} L={self.L} K={k} S={s}  tokens={self.tokens} cr={self.cr_percent}%  "
            f"(exact {self.cr.numerator}/{self.cr.denominator} = {float(self.cr):.4f})  "
            f"fwd_flops={self.flops_forward:.4g} train_flops={self.flops_train:.4g}"
        )


def compute_report(
    N: int,
    L: int,
    K: int | None,
    S: int | None,
    d_model: int = FULL_D,
    vocab: int = FULL_VOCAB,
    text_len: int = 0,
) -> ComputeReport:
    """Report for one compressor setting; ``K=None`` or ``S=None`` means no compression.

    FLOPs use per-layer lengths of ``text_len`` plus the visual tokens at that layer.
    """
    if K is None or S is None:
        K_eff, S_eff = N, 1
    else:
        K_eff, S_eff = K, S
    tokens = token_total(N, L, K_eff, S_eff)
    cr, pct = compression_ratio(N, L, K_eff, S_eff)
    vis = [L if i <= K_eff else out_len(L, S_eff) for i in range(1, N + 1)]
    lengths = [text_len + v for v in vis]
    fwd = flops_forward((d_model, vocab), lengths)
    notes = []
    if K is not None and K == N and S_eff > 1:
        notes.append("degenerate: compression after the last layer removes no computation")
    return ComputeReport(N, L, K, S, lengths, tokens, cr, pct, fwd, 3.0 * fwd, notes)
