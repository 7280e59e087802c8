"""Visual-span compressors.

Each compressor maps a span of ``L`` hidden states (``L x C``) to
``ceil(L / S)`` states. All of them are expressed as a row-stochastic
``L_out x L`` weight matrix, so applying one inside the model is a single
matrix product and the backward pass is that matrix transposed. For k-means
the matrix is built from the converged assignments and treated as constant,
i.e. gradients reach cluster members as if each centroid were a plain mean.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SpecError


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    AVGPOOL = "avgpool"
    RANDOM_DROP = "randomdrop"
    KMEANS = "kmeans"
    ATTN_TOPK = "attntopk"
    # importance = mean attention from every non-visual token
    VCC_LITE = "vcc-lite"

    @classmethod
    def parse(cls, s: str) -> "Kind":
        key = s.strip().lower().replace("_", "").replace(" ", "")
        aliases = {"none": "identity", "pool": "avgpool", "avg": "avgpool", "random": "randomdrop",
                   "drop": "randomdrop", "fastv": "attntopk", "topk": "attntopk", "vcclite": "vcc-lite"}
        key = aliases.get(key, key)
        for k in cls:
            if k.value.replace("-", "") == key.replace("-", ""):
                return k
        raise SpecError(f"unknown compressor kind {s!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind = Kind.IDENTITY
    layer: int = 0
    stride: int = 1
    seed: int = 0
    head_reduce: str = "mean"
    kmeans_iters: int = 10

    def __post_init__(self):
        if not isinstance(self.kind, Kind):
            object.__setattr__(self, "kind", Kind.parse(str(self.kind)))
        if self.kind is not Kind.IDENTITY:
            if self.stride < 1:
                raise SpecError(f"stride must be >= 1, got {self.stride}")
            if self.layer < 1:
                raise SpecError(f"compressor layer must be >= 1, got {self.layer}")
        if self.head_reduce not in ("mean", "max"):
            raise SpecError(f"head_reduce must be 'mean' or 'max', got {self.head_reduce!r}")

    @property
    def is_identity(self) -> bool:
        return self.kind is Kind.IDENTITY

    @property
    def needs_attention(self) -> bool:
        return self.kind in (Kind.ATTN_TOPK, Kind.VCC_LITE)

    def validate(self, n_layers: int) -> None:
        if not self.is_identity and not (1 <= self.layer <= n_layers):
            raise SpecError(f"compressor layer K={self.layer} outside [1, {n_layers}]")

    def out_len(self, L: int) -> int:
        return L if self.is_identity else out_len(L, self.stride)

    def label(self) -> str:
        if self.is_identity:
            return "identity"
        return f"{self.kind.value}(K={self.layer},S={self.stride})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "layer": self.layer, "stride": self.stride, "seed": self.seed}
        if self.head_reduce != "mean":
            d["head_reduce"] = self.head_reduce
        if self.kmeans_iters != 10:
            d["kmeans_iters"] = self.kmeans_iters
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CompressorSpec":
        known = {"kind", "layer", "stride", "seed", "head_reduce", "kmeans_iters"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown compressor fields: {sorted(extra)}")
        return cls(
            kind=Kind.parse(str(d.get("kind", "identity"))),
            layer=int(d.get("layer", 0)),
            stride=int(d.get("stride", 1)),
            seed=int(d.get("seed", 0)),
            head_reduce=str(d.get("head_reduce", "mean")),
            kmeans_iters=int(d.get("kmeans_iters", 10)),
        )

    @classmethod
    def parse(cls, text: str) -> "CompressorSpec":
        """Parse ``"K=2,S=8"`` or ``"kind=kmeans,K=2,S=8,seed=3"``; ``"identity"`` alone is allowed."""
        text = text.strip()
        if text.lower() in ("identity", "none", ""):
            return cls()
        fields: dict = {"kind": "avgpool"}
        for part in text.split(","):
            if "=" not in part:
                raise SpecError(f"malformed spec element {part!r} in {text!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            key = {"k": "layer", "s": "stride"}.get(k.lower(), k.lower())
            fields[key] = v
        return cls.from_dict(fields)


IDENTITY = CompressorSpec()


def avgpool(layer: int, stride: int, seed: int = 0) -> CompressorSpec:
    return CompressorSpec(Kind.AVGPOOL, layer, stride, seed)


def out_len(L: int, S: int) -> int:
    return -(-L // S)


@dataclass
class CompressionResult:
    values: np.ndarray
    source_map: list[list[int]]
    weights: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return len(self.source_map)


def _from_groups(span: np.ndarray, groups: list[list[int]]) -> CompressionResult:
    L = span.shape[0]
    w = np.zeros((len(groups), L), dtype=span.dtype)
    for j, g in enumerate(groups):
        w[j, g] = 1.0 / len(g)
    return CompressionResult(values=w @ span, source_map=groups, weights=w)


def _as_span(span) -> np.ndarray:
    arr = np.asarray(span, dtype=float) if not isinstance(span, np.ndarray) else span
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"span must be L x C with L >= 1, got shape {arr.shape}")
    return arr


def avg_pool(span, S: int) -> CompressionResult:
    """Non-overlapping mean over windows of ``S`` positions; the last window may be partial."""
    span = _as_span(span)
    L = span.shape[0]
    groups = [list(range(j, min(j + S, L))) for j in range(0, L, S)]
    return _from_groups(span, groups)


def random_drop(span, S: int, seed: int) -> CompressionResult:
    span = _as_span(span)
    L = span.shape[0]
    keep = out_len(L, S)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(L, size=keep, replace=False))
    return _from_groups(span, [[int(i)] for i in idx])


def attn_topk(span, importance, S: int) -> CompressionResult:
    """Keep the ``ceil(L/S)`` most important tokens in their original order; ties go to the lower index."""
    span = _as_span(span)
    L = span.shape[0]
    importance = np.asarray(importance, dtype=float).reshape(-1)
    if importance.shape[0] != L:
        raise ContractError(f"importance has length {importance.shape[0]}, span has {L}")
    keep = out_len(L, S)
    order = np.argsort(-importance, kind="stable")[:keep]
    return _from_groups(span, [[int(i)] for i in np.sort(order)])


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - c[None, :, :]
    return (d * d).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    L = x.shape[0]
    chosen = [int(rng.integers(L))]
    d2 = _sqdist(x, x[chosen]).min(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a chosen one
            free = [i for i in range(L) if i not in set(chosen)]
            nxt = free[0]
        else:
            nxt = int(rng.choice(L, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sqdist(x, x[[nxt]])[:, 0])
    return chosen


def _fix_empty(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Move the point farthest from its centroid (taken from a cluster with > 1 members) into each empty cluster."""
    assign = assign.copy()
    for j in range(k):
        counts = np.bincount(assign, minlength=k)
        if counts[j] > 0:
            continue
        dist = ((x - centroids[assign]) ** 2).sum(-1)
        movable = counts[assign] > 1
        dist = np.where(movable, dist, -1.0)
        i = int(np.argmax(dist))
        assign[i] = j
        centroids[j] = x[i]
    return assign


def kmeans_compress(span, S: int, iters: int = 10, seed: int = 0) -> CompressionResult:
    """Lloyd's algorithm with k-means++ seeding and ``ceil(L/S)`` centroids.

    Centroids are emitted in order of the smallest input index in each
    cluster. Assignment ties go to the lower centroid index (argmin order).
    """
    span = _as_span(span)
    L = span.shape[0]
    k = out_len(L, S)
    x = span.astype(float)
    rng = np.random.default_rng(seed)
    centroids = x[_kmeanspp(x, k, rng)].copy()
    assign = np.zeros(L, dtype=np.int64)
    for _ in range(iters):
        assign = np.argmin(_sqdist(x, centroids), axis=1)
        assign = _fix_empty(x, assign, centroids, k)
        new = np.zeros_like(centroids)
        np.add.at(new, assign, x)
        centroids = new / np.bincount(assign, minlength=k)[:, None]
    assign = np.argmin(_sqdist(x, centroids), axis=1)
    assign = _fix_empty(x, assign, centroids, k)
    groups = [[int(i) for i in np.flatnonzero(assign == j)] for j in range(k)]
    groups.sort(key=lambda g: g[0])
    return _from_groups(span, groups)


def compress(spec: CompressorSpec, span, importance=None) -> CompressionResult:
    """Dispatch on ``spec.kind``. Attention kinds need a per-token ``importance`` vector."""
    span = _as_span(span)
    if spec.kind is Kind.IDENTITY:
        return _from_groups(span, [[i] for i in range(span.shape[0])])
    if spec.kind is Kind.AVGPOOL:
        return avg_pool(span, spec.stride)
    if spec.kind is Kind.RANDOM_DROP:
        return random_drop(span, spec.stride, spec.seed)
    if spec.kind is Kind.KMEANS:
        return kmeans_compress(span, spec.stride, spec.kmeans_iters, spec.seed)
    if importance is None:
        raise ContractError(f"{spec.kind.value} needs attention importance from layer {spec.layer}")
    return attn_topk(span, importance, spec.stride)


def avg_pool_matrix(L: int, S: int) -> np.ndarray:
    """The ``ceil(L/S) x L`` averaging matrix; it does not depend on the span values."""
    w = np.zeros((out_len(L, S), L))
    for j in range(w.shape[0]):
        lo, hi = j * S, min((j + 1) * S, L)
        w[j, lo:hi] = 1.0 / (hi - lo)
    return w

