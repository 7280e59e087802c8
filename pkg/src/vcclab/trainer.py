"""Staged training and evaluation.

The loss is next-token cross-entropy on answer positions only. The active
compressor comes from the stage plan at every step; optimizer state and the
learning-rate schedule (linear warmup then one cosine decay) run
continuously across stage boundaries.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .accounting import flops_train, layer_lengths
from .compressor import IDENTITY, CompressorSpec
from .errors import ConfigError, TrainingError
from .model import Model, ModelConfig, build_model, forward, generate_answer, lm_loss, make_batch, save_checkpoint
from .schedule import StagePlan, named_scheme, split_steps, stage_bounds
from .tasks import DataConfig, QASample, RoleTaggedSequence, render_sequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    min_lr_frac: float = 0.0
    warmup_frac: float = 0.03
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 0
    eval_samples: int = 256
    seed: int = 0
    order_seed: int = 0
    checkpoints: bool = True

    def lr_at(self, step: int) -> float:
        warm = max(1, math.ceil(self.warmup_frac * self.steps)) if self.warmup_frac > 0 else 0
        if step < warm:
            return self.lr * (step + 1) / warm
        span = max(1, self.steps - warm)
        progress = min(1.0, (step - warm) / span)
        floor = self.min_lr_frac * self.lr
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    plan: StagePlan = field(default_factory=lambda: named_scheme("single", "desk", 8))
    train: TrainConfig = field(default_factory=TrainConfig)
    train_path: str | None = None
    eval_path: str | None = None

    def validate(self) -> None:
        self.model.validate()
        for spec in self.plan.specs:
            spec.validate(self.model.n_layers)
        if self.train.steps < sum(1 for s in self.plan.stages if s.fraction > 0):
            raise ConfigError("total steps must be at least the number of stages")
        if self.data.grid**2 != self.model.visual_len:
            raise ConfigError(f"grid {self.data.grid}x{self.data.grid} does not match visual_len {self.model.visual_len}")
        for p in (self.train_path, self.eval_path):
            if p and not Path(p).exists():
                raise ConfigError(f"dataset file {p} does not exist")


@dataclass
class StepRecord:
    step: int
    stage: int
    spec: str
    lr: float
    loss: float
    flops_cum: float


@dataclass
class EvalRecord:
    step: int
    spec: str
    accuracy: dict[str, float]
    overall: float
    n: int


@dataclass
class RunMetrics:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    stage_bounds: list[tuple[int, int]] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def final_eval(self) -> EvalRecord:
        return self.evals[-1]

    @property
    def flops_total(self) -> float:
        return self.steps[-1].flops_cum if self.steps else 0.0

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "stage", "spec", "lr", "loss", "flops_cum"])
        for r in self.steps:
            w.writerow([r.step, r.stage, r.spec, f"{r.lr:.17g}", f"{r.loss:.17g}", f"{r.flops_cum:.17g}"])
        return buf.getvalue()

    def evals_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.evals)


# evaluation


def _max_answer_len(samples: Sequence[QASample]) -> int:
    return max(len(s.answer) for s in samples)


def evaluate(
    model: Model,
    dataset: Sequence[QASample],
    spec: CompressorSpec = IDENTITY,
    batch_size: int = 256,
    system_prompt_len: int = 4,
) -> dict[str, float]:
    """Greedy-decode every sample and score exact match on the answer tokens.

    Returns accuracy per question kind plus ``overall``. Results are
    independent of ``batch_size``: samples are grouped by prompt length and
    scored individually.
    """
    if not dataset:
        raise ValueError("evaluate() needs a non-empty dataset")
    max_new = _max_answer_len(dataset)
    prompts = [render_sequence(s, system_prompt_len).prompt() for s in dataset]
    groups: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        groups[len(p)].append(i)
    correct = np.zeros(len(dataset), dtype=bool)
    for n in sorted(groups):
        idx = groups[n]
        for a in range(0, len(idx), batch_size):
            chunk = idx[a : a + batch_size]
            outs = generate_answer(model, [prompts[i] for i in chunk], spec, max_new)
            for i, out in zip(chunk, outs):
                correct[i] = tuple(out) == tuple(dataset[i].answer)
    per_kind: dict[str, list[bool]] = defaultdict(list)
    for s, ok in zip(dataset, correct):
        per_kind[s.kind].append(bool(ok))
    acc = {k: float(np.mean(v)) for k, v in sorted(per_kind.items())}
    acc["overall"] = float(correct.mean())
    return acc


# training


def _batch_flops(cfg: ModelConfig, spec: CompressorSpec, seqs: Sequence[RoleTaggedSequence]) -> float:
    total = 0.0
    for s in seqs:
        total += flops_train(cfg, layer_lengths(spec, cfg.n_layers, len(s), s.visual_len))
    return total


def _load_or_generate(run: RunConfig) -> tuple[list[QASample], list[QASample]]:
    from .tasks import read_jsonl

    train = read_jsonl(run.train_path) if run.train_path else run.data.train_set()
    ev = read_jsonl(run.eval_path) if run.eval_path else run.data.eval_set()
    return train, ev


def train(
    run: RunConfig,
    out_dir: str | Path | None = None,
    datasets: tuple[list[QASample], list[QASample]] | None = None,
) -> tuple[Model, RunMetrics]:
    run.validate()
    cfg, tc = run.model, run.train
    train_set, eval_set = datasets if datasets is not None else _load_or_generate(run)
    seqs = [render_sequence(s, run.data.system_prompt_len, cfg.max_seq) for s in train_set]
    model = build_model(cfg, tc.seed)
    opt = ag.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.order_seed)
    bounds = stage_bounds(tc.steps, run.plan)
    split_steps(tc.steps, run.plan)
    metrics = RunMetrics(stage_bounds=bounds)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    order = rng.permutation(len(seqs))
    cursor = 0
    flops_cum = 0.0
    t0 = time.perf_counter()
    stage = 0
    for step in range(tc.steps):
        while not (bounds[stage][0] <= step < bounds[stage][1]):
            stage += 1
        spec = run.plan.stages[stage].spec
        idx = []
        while len(idx) < tc.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(seqs))
                cursor = 0
            take = min(tc.batch_size - len(idx), len(order) - cursor)
            idx.extend(order[cursor : cursor + take].tolist())
            cursor += take
        batch_seqs = [seqs[i] for i in idx]
        res = forward(model, make_batch(batch_seqs), spec)
        loss = lm_loss(res)
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise TrainingError(
                f"non-finite loss at step {step} (stage {stage}, {spec.label()})",
                dump={"step": step, "stage": stage, "spec": spec.to_dict(), "batch_ids": idx},
            )
        opt.zero_grad()
        loss.backward()
        if tc.grad_clip > 0:
            ag.clip_grad_norm(model.parameters(), tc.grad_clip)
        lr = tc.lr_at(step)
        opt.step(lr)
        flops_cum += _batch_flops(cfg, spec, batch_seqs)
        metrics.steps.append(StepRecord(step, stage, spec.label(), lr, lval, flops_cum))

        last_of_stage = step == bounds[stage][1] - 1
        if tc.eval_every and (step + 1) % tc.eval_every == 0 and step + 1 < tc.steps:
            sub = eval_set[: tc.eval_samples]
            acc = evaluate(model, sub, IDENTITY, system_prompt_len=run.data.system_prompt_len)
            metrics.evals.append(EvalRecord(step + 1, IDENTITY.label(), acc, acc["overall"], len(sub)))
            log.info("step %d loss %.4f eval %.3f", step + 1, lval, acc["overall"])
        if out is not None and tc.checkpoints and last_of_stage and step + 1 < tc.steps:
            save_checkpoint(model, out / f"stage{stage}.ckpt", {"step": step + 1, "stage": stage})

    acc = evaluate(model, eval_set, IDENTITY, system_prompt_len=run.data.system_prompt_len)
    metrics.evals.append(EvalRecord(tc.steps, IDENTITY.label(), acc, acc["overall"], len(eval_set)))
    metrics.wall_clock = time.perf_counter() - t0
    if out is not None:
        if tc.checkpoints:
            save_checkpoint(model, out / "final.ckpt", {"step": tc.steps, "stage": len(bounds) - 1})
        (out / "metrics.csv").write_text(metrics.steps_csv())
        (out / "evals.jsonl").write_text(metrics.evals_jsonl())
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": metrics.wall_clock}) + "\n")
    return model, metrics
