"""Synthetic grid-image question answering.

A grid image is a ``G x G`` matrix of attribute ids. Cells are drawn in
raster order; with probability ``p`` a cell copies its left neighbour (the
cell above in the first column), otherwise it is uniform over attributes.
``p`` therefore controls how much of the image survives average pooling.

Questions:

* ``lookup r c``  -> attribute at row ``r``, column ``c``; asked with one
  cell-reference token ``CELL0 + r*G + c``
* ``majority``    -> most frequent attribute (grids with a tied maximum are redrawn)
* ``count a``     -> number of cells holding attribute ``a``, as two digits
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LengthError


class Role(enum.IntEnum):
    PAD = 0
    SYSTEM = 1
    VISUAL = 2
    INSTRUCTION = 3
    ANSWER = 4


# vocabulary
PAD = 0
EOS = 1
QMARK = 2
LOOKUP = 3
MAJORITY = 4
COUNT = 5
DIGIT0 = 6
SYS0 = 16
MAX_SYSTEM_LEN = 8
MAX_SIDE = 9
# one reference token per cell; the model adds the same embedding to the visual
# token at that cell, so a lookup is a single attention hop
CELL0 = SYS0 + MAX_SYSTEM_LEN
ATTR0 = CELL0 + MAX_SIDE * MAX_SIDE
MAX_ATTR = 16
VOCAB_SIZE = ATTR0 + MAX_ATTR

KINDS = ("lookup", "majority", "count")
SPLIT_IDS = {"train": 0, "eval": 1, "test": 2}


def digit(d: int) -> int:
    return DIGIT0 + d


def attr_token(a: int) -> int:
    return ATTR0 + a


def cell_token(r: int, c: int, G: int) -> int:
    return CELL0 + r * G + c


@dataclass(frozen=True)
class GridImage:
    cells: np.ndarray  # G x G int
    n_attr: int
    redundancy: float

    @property
    def side(self) -> int:
        return self.cells.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.cells.reshape(-1)


@dataclass(frozen=True)
class QASample:
    image: GridImage
    kind: str
    args: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    image_first: bool
    index: int = 0
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "index": self.index,
                "grid": self.image.cells.tolist(),
                "n_attr": self.image.n_attr,
                "p": self.image.redundancy,
                "kind": self.kind,
                "args": list(self.args),
                "question": list(self.question),
                "answer": list(self.answer),
                "image_first": self.image_first,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "QASample":
        d = json.loads(line)
        img = GridImage(np.array(d["grid"], dtype=np.int64), int(d["n_attr"]), float(d["p"]))
        return cls(
            image=img,
            kind=d["kind"],
            args=tuple(d["args"]),
            question=tuple(d["question"]),
            answer=tuple(d["answer"]),
            image_first=bool(d["image_first"]),
            index=int(d["index"]),
            split=d["split"],
        )


@dataclass
class RoleTaggedSequence:
    """Token ids with per-position roles.

    At VISUAL positions ``token_ids`` holds the raw attribute id of the cell,
    which the model's frozen patch encoder (not the word embedding) consumes.
    """

    token_ids: np.ndarray
    roles: np.ndarray
    visual_span: tuple[int, int]
    loss_mask: np.ndarray
    grid_side: int = 0

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def visual_len(self) -> int:
        return self.visual_span[1] - self.visual_span[0]

    def span(self, role: Role) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    def prompt(self) -> "RoleTaggedSequence":
        """The sequence with its ANSWER span removed (input for generation)."""
        keep = self.roles != Role.ANSWER
        return RoleTaggedSequence(
            self.token_ids[keep], self.roles[keep], self.visual_span, self.loss_mask[keep], self.grid_side
        )

    def answer_tokens(self) -> list[int]:
        return [int(t) for t in self.token_ids[self.roles == Role.ANSWER]]

    def check(self) -> None:
        vis = self.span(Role.VISUAL)
        a, b = self.visual_span
        if vis.size and not (vis[0] == a and vis[-1] == b - 1 and vis.size == b - a):
            raise ValueError("VISUAL positions are not one contiguous span")
        if not np.array_equal(self.loss_mask != 0, self.roles == Role.ANSWER):
            raise ValueError("loss mask must be nonzero exactly on ANSWER positions")


# generation


def draw_grid(rng: np.random.Generator, G: int, n_attr: int, p: float) -> np.ndarray:
    cells = np.zeros((G, G), dtype=np.int64)
    copy = rng.random((G, G)) < p
    fresh = rng.integers(0, n_attr, size=(G, G))
    for r in range(G):
        for c in range(G):
            if r == 0 and c == 0:
                cells[r, c] = fresh[r, c]
            elif copy[r, c]:
                cells[r, c] = cells[r, c - 1] if c > 0 else cells[r - 1, c]
            else:
                cells[r, c] = fresh[r, c]
    return cells


def _majority(cells: np.ndarray, n_attr: int) -> tuple[int, bool]:
    counts = np.bincount(cells.reshape(-1), minlength=n_attr)
    top = counts.max()
    winners = np.flatnonzero(counts == top)
    return int(winners[0]), winners.size == 1


def _encode_count(n: int) -> tuple[int, int]:
    return digit(n // 10), digit(n % 10)


def make_sample(
    rng: np.random.Generator, G: int, n_attr: int, p: float, kinds: Sequence[str], layout: str
) -> tuple[GridImage, str, tuple[int, ...], tuple[int, ...], tuple[int, ...], bool]:
    kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
    cells = draw_grid(rng, G, n_attr, p)
    if kind == "majority":
        winner, unique = _majority(cells, n_attr)
        while not unique:
            cells = draw_grid(rng, G, n_attr, p)
            winner, unique = _majority(cells, n_attr)
        args: tuple[int, ...] = ()
        question: tuple[int, ...] = (MAJORITY,)
        answer: tuple[int, ...] = (attr_token(winner), EOS)
    elif kind == "lookup":
        r, c = int(rng.integers(G)), int(rng.integers(G))
        args = (r, c)
        question = (LOOKUP, cell_token(r, c, G))
        answer = (attr_token(int(cells[r, c])), EOS)
    elif kind == "count":
        a = int(rng.integers(n_attr))
        args = (a,)
        question = (COUNT, attr_token(a))
        answer = (*_encode_count(int((cells == a).sum())), EOS)
    else:
        raise ConfigError(f"unknown question kind {kind!r}")
    if layout == "random":
        image_first = bool(rng.integers(2))
    else:
        image_first = layout == "image_first"
    return GridImage(cells, n_attr, p), kind, args, question, answer, image_first


def gen_dataset(
    seed: int,
    n_samples: int,
    G: int = 8,
    n_attr: int = 8,
    p: float = 0.5,
    kinds: Iterable[str] = ("lookup",),
    split: str = "train",
    layout: str = "image_first",
) -> list[QASample]:
    """Generate ``n_samples`` questions; sample ``i`` depends only on ``(seed, split, i)``."""
    kinds = tuple(kinds)
    if not kinds or any(k not in KINDS for k in kinds):
        raise ConfigError(f"kinds must be a non-empty subset of {KINDS}, got {kinds}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"redundancy p must be in [0, 1], got {p}")
    if not 1 <= n_attr <= MAX_ATTR:
        raise ConfigError(f"n_attr must be in [1, {MAX_ATTR}], got {n_attr}")
    if not 1 <= G <= MAX_SIDE:
        # counts are written with two digits
        raise ConfigError(f"grid side must be in [1, {MAX_SIDE}], got {G}")
    if layout not in ("random", "image_first", "question_first"):
        raise ConfigError(f"unknown layout {layout!r}")
    split_id = SPLIT_IDS.get(split)
    if split_id is None:
        raise ConfigError(f"unknown split {split!r}")
    out = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, split_id, i])
        img, kind, args, q, a, first = make_sample(rng, G, n_attr, p, kinds, layout)
        out.append(QASample(img, kind, args, q, a, first, index=i, split=split))
    return out


def render_sequence(sample: QASample, system_prompt_len: int = 4, max_seq: int | None = None) -> RoleTaggedSequence:
    """Lay out ``[SYSTEM][VISUAL][INSTRUCTION][ANSWER]`` or, question first,
    ``[SYSTEM][INSTRUCTION][VISUAL][QMARK][ANSWER]``.

    With the image first the answer directly follows the question tokens.
    """
    if not 0 <= system_prompt_len <= MAX_SYSTEM_LEN:
        raise ConfigError(f"system_prompt_len must be in [0, {MAX_SYSTEM_LEN}]")
    ids: list[int] = []
    roles: list[int] = []

    def put(tokens, role):
        ids.extend(int(t) for t in tokens)
        roles.extend([role] * len(tokens))

    put([SYS0 + i for i in range(system_prompt_len)], Role.SYSTEM)
    visual = sample.image.flat
    if sample.image_first:
        start = len(ids)
        put(visual, Role.VISUAL)
        put(sample.question, Role.INSTRUCTION)
    else:
        put(sample.question, Role.INSTRUCTION)
        start = len(ids)
        put(visual, Role.VISUAL)
        put((QMARK,), Role.INSTRUCTION)
    put(sample.answer, Role.ANSWER)
    if max_seq is not None and len(ids) > max_seq:
        raise LengthError(f"rendered sequence has {len(ids)} tokens, max_seq is {max_seq}")
    roles_arr = np.array(roles, dtype=np.int64)
    return RoleTaggedSequence(
        token_ids=np.array(ids, dtype=np.int64),
        roles=roles_arr,
        visual_span=(start, start + visual.size),
        loss_mask=(roles_arr == Role.ANSWER).astype(np.float64),
        grid_side=sample.image.side,
    )


# independent answer checker


def solve(sample: QASample) -> tuple[int, ...]:
    """Recompute the answer tokens straight from the attribute matrix."""
    cells = sample.image.cells
    if sample.kind == "lookup":
        r, c = sample.args
        return (attr_token(int(cells[r][c])), EOS)
    if sample.kind == "majority":
        counts: dict[int, int] = {}
        for v in cells.reshape(-1).tolist():
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        winners = sorted(a for a, n in counts.items() if n == best)
        if len(winners) != 1:
            raise ValueError("majority question on a tied grid")
        return (attr_token(winners[0]), EOS)
    if sample.kind == "count":
        (a,) = sample.args
        n = sum(1 for v in cells.reshape(-1).tolist() if v == a)
        return (DIGIT0 + n // 10, DIGIT0 + n % 10, EOS)
    raise ValueError(sample.kind)


# serialization


def write_jsonl(samples: Iterable[QASample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json())
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[QASample]:
    with open(path, encoding="utf-8") as fh:
        return [QASample.from_json(line) for line in fh if line.strip()]


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 20000
    n_eval: int = 2000
    grid: int = 8
    n_attr: int = 8
    redundancy: float = 0.5
    kinds: list[str] = field(default_factory=lambda: ["lookup"])
    layout: str = "image_first"
    system_prompt_len: int = 4

    def train_set(self) -> list[QASample]:
        return gen_dataset(self.seed, self.n_train, self.grid, self.n_attr, self.redundancy,
                           self.kinds, "train", self.layout)

    def eval_set(self) -> list[QASample]:
        return gen_dataset(self.seed, self.n_eval, self.grid, self.n_attr, self.redundancy,
                           self.kinds, "eval", self.layout)
