"""Inference-time compression sweeps and attention-mass probes.

``retained_pct`` is layer-summed: the visual-token total under compression
divided by the uncompressed total ``N*L``. Compressing after the last layer
(``K == N``) leaves every layer untouched, so such points report 100% and
carry a ``degenerate`` flag.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autograd as ag
from .accounting import compression_ratio, token_total
from .compressor import CompressorSpec, Kind
from .errors import ProbeError, SpecError
from .model import Model, forward, make_batch
from .tasks import QASample, Role, render_sequence
from .trainer import evaluate

SWEEP_SCHEMA = "# schema: vcclab.sweep v1; retained_pct = 100*layer-summed visual tokens/(N*L)"
PROFILE_SCHEMA = "# schema: vcclab.attn_profile v1; mass from the first ANSWER position, mean over heads and samples"


@dataclass(frozen=True)
class SweepPoint:
    K: int
    S: int
    retained_pct: float
    accuracy: float
    cr_pct: int
    tokens: int
    degenerate: bool = False


def sweep_point(N: int, L: int, K: int, S: int, accuracy: float) -> SweepPoint:
    tokens = token_total(N, L, K, S)
    _, pct = compression_ratio(N, L, K, S)
    retained = float(Fraction(100 * tokens, N * L))
    return SweepPoint(K, S, retained, accuracy, pct, tokens, degenerate=(K == N and S > 1))


def compression_sweep(
    model: Model,
    dataset: Sequence[QASample],
    Ks: Sequence[int],
    Ss: Sequence[int],
    system_prompt_len: int = 4,
    kind: Kind = Kind.AVGPOOL,
) -> list[SweepPoint]:
    """Evaluate ``model`` once per ``(K, S)`` with the compressor applied at test time only."""
    if not Ks or not Ss:
        raise SpecError("sweep needs at least one K and one S")
    N, L = model.config.n_layers, model.config.visual_len
    points = []
    for K in Ks:
        for S in Ss:
            spec = CompressorSpec(kind, int(K), int(S))
            spec.validate(N)
            acc = evaluate(model, dataset, spec, system_prompt_len=system_prompt_len)["overall"]
            points.append(sweep_point(N, L, int(K), int(S), acc))
    return sorted(points, key=lambda p: (p.retained_pct, p.K, p.S))


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "S", "retained_pct", "cr_pct", "tokens", "accuracy", "degenerate"])
    for p in points:
        w.writerow([p.K, p.S, f"{p.retained_pct:.6f}", p.cr_pct, p.tokens, f"{p.accuracy:.6f}", int(p.degenerate)])
    return buf.getvalue()


@dataclass
class AttentionProfile:
    visual_mass: list[float]
    system_mass: list[float]
    n_samples: int

    @property
    def n_layers(self) -> int:
        return len(self.visual_mass)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(PROFILE_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "visual_mass", "system_mass"])
        for i, (v, s) in enumerate(zip(self.visual_mass, self.system_mass), start=1):
            w.writerow([i, f"{v:.9f}", f"{s:.9f}"])
        return buf.getvalue()


def attention_probe(
    model: Model,
    dataset: Sequence[QASample],
    max_samples: int | None = None,
    system_prompt_len: int = 4,
) -> AttentionProfile:
    """Per-layer attention mass from the first ANSWER position into the VISUAL and SYSTEM spans.

    Each sample gets a teacher-forced, uncompressed forward pass. Samples are
    batched by length (no padding), and sums run in dataset order.
    """
    samples = list(dataset[:max_samples] if max_samples is not None else dataset)
    if not samples:
        raise ProbeError("attention probe needs at least one sample")
    seqs = [render_sequence(s, system_prompt_len) for s in samples]
    for s in seqs:
        if not (s.roles == Role.SYSTEM).any():
            raise ProbeError("attention probe needs a SYSTEM span; system_prompt_len is 0")
        if not (s.roles == Role.ANSWER).any():
            raise ProbeError("attention probe needs an ANSWER span")
    N = model.config.n_layers
    per_sample = np.zeros((len(seqs), 2, N))
    groups: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(seqs):
        groups[len(s)].append(i)
    with ag.no_grad():
        for n in sorted(groups):
            idx = groups[n]
            res = forward(model, make_batch([seqs[i] for i in idx]), capture=True)
            for j, i in enumerate(idx):
                roles = seqs[i].roles
                ans = int(np.flatnonzero(roles == Role.ANSWER)[0])
                vis = roles == Role.VISUAL
                sys_ = roles == Role.SYSTEM
                for layer, probs in enumerate(res.capture.probs):
                    row = probs[j, :, ans, :].astype(np.float64)  # [H, T]
                    per_sample[i, 0, layer] = row[:, vis].sum(axis=1).mean()
                    per_sample[i, 1, layer] = row[:, sys_].sum(axis=1).mean()
    total = np.zeros((2, N))
    for i in range(len(seqs)):
        total += per_sample[i]
    mean = total / len(seqs)
    return AttentionProfile(mean[0].tolist(), mean[1].tolist(), len(seqs))
