"""Decoder-only transformer over role-tagged sequences with a mid-stack compression hook.

Layers ``1..K`` run on the full sequence. After layer ``K`` finishes, the
visual span of every sequence in the batch is replaced by its compressed
form and layers ``K+1..N`` run on the shorter sequence. Tokens keep the
hidden states they carry; positions are not re-embedded.

Shapes inside the forward pass are ``[B, T, C]`` (batch, time, channel).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .compressor import IDENTITY, CompressorSpec, Kind, compress
from .errors import ConfigError, ContractError, LengthError, ShapeError
from .tasks import CELL0, EOS, MAX_ATTR, PAD, VOCAB_SIZE, Role, RoleTaggedSequence


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 96
    visual_len: int = 64
    n_visual_codes: int = MAX_ATTR
    code_dim: int = 16
    tie_cells: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.d_ff < 1 or self.vocab_size < 1:
            raise ConfigError("d_ff and vocab_size must be positive")
        if not 1 <= self.visual_len <= self.max_seq:
            raise ConfigError(f"visual_len={self.visual_len} must be in [1, max_seq={self.max_seq}]")
        if math.isqrt(self.visual_len) ** 2 != self.visual_len:
            raise ConfigError(f"visual_len={self.visual_len} must be a square (G x G grid)")
        if self.tie_cells and self.vocab_size < CELL0 + self.visual_len:
            raise ConfigError(f"vocab_size={self.vocab_size} has no cell token for every one of {self.visual_len} cells")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.visual_len)

    @property
    def patch_dim(self) -> int:
        return self.code_dim + 2 * self.grid_side

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


ENCODER_SEED = 20240101


def patch_table(config: ModelConfig) -> np.ndarray:
    """Frozen patch features: an attribute code concatenated with one-hot row and column.

    Returns ``[n_visual_codes, L, patch_dim]``; it stands in for a frozen
    vision encoder and never receives gradients.
    """
    G = config.grid_side
    rng = np.random.default_rng(ENCODER_SEED)
    codes = rng.normal(0.0, 1.0, size=(config.n_visual_codes, config.code_dim))
    table = np.zeros((config.n_visual_codes, G * G, config.patch_dim))
    for i in range(G * G):
        r, c = divmod(i, G)
        table[:, i, : config.code_dim] = codes
        table[:, i, config.code_dim + r] = 1.0
        table[:, i, config.code_dim + G + c] = 1.0
    return table.astype(config.np_dtype)


class Model:
    def __init__(self, config: ModelConfig, seed: int, params: dict[str, Tensor]):
        self.config = config
        self.seed = seed
        self.params = params
        self.patches = patch_table(config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.params.values())


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, init)`` in canonical order; init is ``embed``, ``normal``, ``resid``, ``ones`` or ``zeros``."""
    d, V, F = config.d_model, config.vocab_size, config.d_ff
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (V, d), "embed"),
        ("pos_emb", (config.max_seq, d), "embed"),
        ("vis_proj", (config.patch_dim, d), "embed"),
        ("vis_bias", (d,), "zeros"),
    ]
    for i in range(config.n_layers):
        out += [
            (f"h{i}.attn_norm", (d,), "ones"),
            (f"h{i}.wqkv", (d, 3 * d), "normal"),
            (f"h{i}.wo", (d, d), "resid"),
            (f"h{i}.mlp_norm", (d,), "ones"),
            (f"h{i}.w1", (d, F), "normal"),
            (f"h{i}.w2", (F, d), "resid"),
        ]
    out += [("final_norm", (d,), "ones"), ("head", (d, V), "normal")]
    return out


def build_model(config: ModelConfig, seed: int) -> Model:
    """Embeddings ~ N(0, 0.02); matrices ~ N(0, 1/fan_in), residual output
    projections further scaled by 1/sqrt(2N)."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    params: dict[str, Tensor] = {}
    for name, shape, init in param_shapes(config):
        if init == "embed":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif init == "normal":
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif init == "resid":
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0] * 2 * config.n_layers), size=shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True)
    return Model(config, seed, params)


# batching


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]; attribute ids at VISUAL positions
    roles: np.ndarray  # [B, T]
    vis_start: np.ndarray  # [B]
    visual_len: int

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def make_batch(seqs: Sequence[RoleTaggedSequence]) -> Batch:
    """Right-pad to the longest sequence; pads carry role PAD."""
    if not seqs:
        raise ShapeError("empty batch")
    L = seqs[0].visual_len
    if any(s.visual_len != L for s in seqs):
        raise ShapeError("all sequences in a batch must have the same visual span length")
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    roles = np.full((len(seqs), T), int(Role.PAD), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s.token_ids
        roles[b, : len(s)] = s.roles
    starts = np.array([s.visual_span[0] for s in seqs], dtype=np.int64)
    return Batch(ids, roles, starts, L)


@dataclass
class AttentionCapture:
    """Post-softmax attention per layer, ``[B, H, T_l, T_l]``, with the role layout each layer saw."""

    probs: list[np.ndarray] = field(default_factory=list)
    roles: list[np.ndarray] = field(default_factory=list)


@dataclass
class ForwardResult:
    logits: Tensor  # [B, T_out, V]
    ids: np.ndarray  # [B, T_out], re-spliced
    roles: np.ndarray  # [B, T_out], re-spliced
    layer_lengths: list[int]
    capture: AttentionCapture | None
    source_maps: list[list[list[int]]] | None = None


def _attn_mask(roles: np.ndarray, dtype) -> np.ndarray:
    B, T = roles.shape
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    blocked = causal[None, :, :] | (roles == Role.PAD)[:, None, :]
    return np.where(blocked, ag.MASK_NEG, 0.0).astype(dtype)[:, None, :, :]


def _visual_inputs(model: Model, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Text ids with visual slots blanked, text mask ``[B,T,1]`` and patch features ``[B,T,P]``."""
    cfg = model.config
    B, T = batch.ids.shape
    vis = batch.roles == Role.VISUAL
    text_ids = np.where(vis, PAD, batch.ids)
    feats = np.zeros((B, T, cfg.patch_dim), dtype=cfg.np_dtype)
    L = batch.visual_len
    if L != cfg.visual_len and vis.any():
        raise ShapeError(f"visual span length {L} differs from model visual_len {cfg.visual_len}")
    for b in range(B):
        s = batch.vis_start[b]
        codes = batch.ids[b, s : s + L]
        if codes.size and (codes.min() < 0 or codes.max() >= cfg.n_visual_codes):
            raise ShapeError("visual code out of range")
        feats[b, s : s + L] = model.patches[codes, np.arange(L)]
    return text_ids, (~vis).astype(cfg.np_dtype)[..., None], feats


def _cell_ids(batch: Batch) -> np.ndarray:
    """Cell-reference token id at every visual slot, PAD elsewhere."""
    B, T = batch.ids.shape
    out = np.full((B, T), PAD, dtype=np.int64)
    cells = CELL0 + np.arange(batch.visual_len)
    for b in range(B):
        if (batch.roles[b] == Role.VISUAL).any():
            s = batch.vis_start[b]
            out[b, s : s + batch.visual_len] = cells
    return out


def _importance(spec: CompressorSpec, probs: np.ndarray, roles: np.ndarray, start: int, L: int) -> np.ndarray:
    """Per-visual-token importance from one sample's attention ``[H, T, T]`` at layer K."""
    heads = probs[:, :, start : start + L]
    reduce = np.max if spec.head_reduce == "max" else np.mean
    if spec.kind is Kind.ATTN_TOPK:
        instr = np.flatnonzero(roles == Role.INSTRUCTION)
        if instr.size == 0:
            raise ContractError("attention-ranked compression needs an INSTRUCTION token")
        return reduce(heads[:, instr[-1], :], axis=0)
    queries = np.flatnonzero((roles != Role.VISUAL) & (roles != Role.PAD))
    return reduce(heads[:, queries, :], axis=0).mean(axis=0)


def _splice(
    spec: CompressorSpec,
    h: np.ndarray,
    batch_roles: np.ndarray,
    batch_ids: np.ndarray,
    starts: np.ndarray,
    L: int,
    probs: np.ndarray | None,
):
    """Per-sample ``[T_out, T]`` splice matrices plus the re-spliced roles and ids."""
    B, T, _ = h.shape
    L_out = spec.out_len(L)
    if L_out > L:
        raise ContractError(f"compressor produced {L_out} tokens from a span of {L}")
    T_out = T - L + L_out
    P = np.zeros((B, T_out, T), dtype=h.dtype)
    roles = np.empty((B, T_out), dtype=batch_roles.dtype)
    ids = np.empty((B, T_out), dtype=batch_ids.dtype)
    maps = []
    for b in range(B):
        s = int(starts[b])
        importance = None
        if spec.needs_attention:
            if probs is None:
                raise ContractError(f"no attention capture at layer {spec.layer}")
            importance = _importance(spec, probs[b], batch_roles[b], s, L)
        res = compress(spec, h[b, s : s + L], importance)
        if res.length > L or res.length != L_out:
            raise ContractError(f"compressor produced {res.length} tokens from a span of {L}")
        P[b, np.arange(s), np.arange(s)] = 1.0
        P[b, s : s + L_out, s : s + L] = res.weights
        tail = np.arange(s + L, T)
        P[b, tail - L + L_out, tail] = 1.0
        keep = np.r_[np.arange(s), np.arange(s, s + L_out), tail]
        roles[b] = batch_roles[b, keep]
        ids[b] = batch_ids[b, keep]
        maps.append(res.source_map)
    return P, roles, ids, maps


def forward(
    model: Model,
    seqs: Sequence[RoleTaggedSequence] | RoleTaggedSequence | Batch,
    compressor: CompressorSpec = IDENTITY,
    capture: bool = False,
) -> ForwardResult:
    cfg = model.config
    if isinstance(seqs, RoleTaggedSequence):
        seqs = [seqs]
    batch = seqs if isinstance(seqs, Batch) else make_batch(seqs)
    compressor.validate(cfg.n_layers)
    B, T = batch.ids.shape
    if T > cfg.max_seq:
        raise LengthError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    dt = cfg.np_dtype
    p = model.params
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / math.sqrt(dh)

    text_ids, text_mask, feats = _visual_inputs(model, batch)
    vis_mask = (batch.roles == Role.VISUAL).astype(dt)[..., None]
    x = ag.mul(ag.embedding(p["tok_emb"], text_ids), text_mask)
    x = x + ag.matmul(Tensor(feats), p["vis_proj"]) + ag.mul(p["vis_bias"], vis_mask)
    if cfg.tie_cells:
        # 2D position of each visual token, shared with the cell-reference tokens
        x = x + ag.mul(ag.embedding(p["tok_emb"], _cell_ids(batch)), vis_mask)
    x = x + ag.embedding(p["pos_emb"], np.arange(T))

    roles, ids = batch.roles, batch.ids
    mask = _attn_mask(roles, dt)
    cap = AttentionCapture() if capture else None
    lengths: list[int] = []
    source_maps = None
    for layer in range(1, cfg.n_layers + 1):
        Tl = x.shape[1]
        lengths.append(Tl)
        pre = f"h{layer - 1}."
        hn = ag.rms_norm(x, p[pre + "attn_norm"])
        qkv = ag.matmul(hn, p[pre + "wqkv"])
        qkv = ag.transpose(ag.reshape(qkv, (B, Tl, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = ag.index(qkv, 0), ag.index(qkv, 1), ag.index(qkv, 2)
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * scale + mask
        probs = ag.softmax_rows(scores)
        att = ag.matmul(probs, v)
        att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (B, Tl, cfg.d_model))
        x = x + ag.matmul(att, p[pre + "wo"])
        hn = ag.rms_norm(x, p[pre + "mlp_norm"])
        x = x + ag.matmul(ag.gelu(ag.matmul(hn, p[pre + "w1"])), p[pre + "w2"])
        if cap is not None:
            cap.probs.append(probs.data)
            cap.roles.append(roles)
        if not compressor.is_identity and layer == compressor.layer:
            P, roles, ids, source_maps = _splice(
                compressor, x.data, roles, ids, batch.vis_start, batch.visual_len, probs.data
            )
            x = ag.matmul(Tensor(P), x)
            mask = _attn_mask(roles, dt)
    x = ag.rms_norm(x, p["final_norm"])
    logits = ag.matmul(x, p["head"])
    return ForwardResult(logits, ids, roles, lengths, cap, source_maps)


def lm_loss(result: ForwardResult) -> Tensor:
    """Next-token loss on ANSWER positions only (logits at t predict token t+1)."""
    logits = result.logits
    B, T, V = logits.shape
    targets = result.ids[:, 1:]
    weights = (result.roles[:, 1:] == Role.ANSWER).astype(logits.dtype)
    shifted = _drop_last(logits)
    return ag.cross_entropy_masked(shifted, targets, weights)


def _drop_last(x: Tensor) -> Tensor:
    """``x[:, :-1]`` as a differentiable op."""
    out = x.data[:, :-1]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :-1] = g
        x._accumulate(full)

    return ag._make(out, (x,), backward, "slice")


def loss_on(model: Model, seqs, compressor: CompressorSpec = IDENTITY) -> Tensor:
    return lm_loss(forward(model, seqs, compressor))


# decoding


def generate_answer(
    model: Model,
    prompts: Sequence[RoleTaggedSequence] | RoleTaggedSequence,
    compressor: CompressorSpec = IDENTITY,
    max_new: int = 4,
) -> list[list[int]] | list[int]:
    """Greedy decoding; stops at EOS (included in the output) or after ``max_new`` tokens.

    Prompts in one call must share a length. Each step re-runs the full
    prefix, which matches cached decoding because every compressor here
    depends only on positions up to the end of the visual span.
    """
    single = isinstance(prompts, RoleTaggedSequence)
    if single:
        prompts = [prompts]
    n = len(prompts[0])
    if any(len(s) != n for s in prompts):
        raise ShapeError("generate_answer needs equal-length prompts; group them first")
    if n + max_new > model.config.max_seq:
        raise LengthError(f"prompt of {n} tokens plus {max_new} new exceeds max_seq {model.config.max_seq}")
    batch = make_batch(prompts)
    ids, roles = batch.ids, batch.roles
    outs: list[list[int]] = [[] for _ in prompts]
    done = np.zeros(len(prompts), dtype=bool)
    with ag.no_grad():
        for _ in range(max_new):
            res = forward(model, Batch(ids, roles, batch.vis_start, batch.visual_len), compressor)
            nxt = np.argmax(res.logits.data[:, -1, :], axis=-1)
            for b, t in enumerate(nxt):
                if not done[b]:
                    outs[b].append(int(t))
                    done[b] = t == EOS
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            roles = np.concatenate([roles, np.full((len(prompts), 1), int(Role.ANSWER))], axis=1)
    return outs[0] if single else outs


# checkpoints

MAGIC = b"VCCK"
VERSION = 1


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    """Layout: ``MAGIC`` | version byte | u32 header length (LE) | JSON header | raw tensor bytes.

    The header lists each tensor's name, shape and dtype in storage order;
    tensor bytes are little-endian, C-contiguous, concatenated.
    """
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": [[n, list(t.shape), t.data.dtype.str] for n, t in model.params.items()],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint")
    if raw[4] != VERSION:
        raise ConfigError(f"unsupported checkpoint version {raw[4]}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + hlen])
    config = ModelConfig.from_dict(header["config"])
    off = 9 + hlen
    params: dict[str, Tensor] = {}
    for name, shape, dstr in header["tensors"]:
        dt = np.dtype(dstr)
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(raw[off : off + n], dtype=dt).reshape(shape).astype(config.np_dtype)
        params[name] = Tensor(arr.copy(), requires_grad=True)
        off += n
    if off != len(raw):
        raise ConfigError(f"trailing bytes in checkpoint {path}")
    want = [(n, tuple(shape)) for n, shape, _ in param_shapes(config)]
    got = [(n, t.shape) for n, t in params.items()]
    if want != got:
        raise ConfigError(f"checkpoint {path} tensors do not match its model config")
    return Model(config, header["seed"], params), header.get("extra", {})
