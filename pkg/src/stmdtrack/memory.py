"""Bi-directional cross-frame memory: propagate / update primitives and the iteration protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import FrameFeatures, SequenceFeatures


@dataclass
class MemoryState:
    coords: torch.Tensor  # (..., M, 3)
    geo_feats: torch.Tensor  # (..., M, C')
    mask_feats: torch.Tensor  # (..., M, C')
    mask_scores: torch.Tensor  # (..., M)
    origin: tuple[int, int]


@dataclass
class TransformerFeatures:
    coords: torch.Tensor
    feats: torch.Tensor
    origin: tuple[int, int]


@dataclass
class TraceRecord:
    op: str
    query: int
    mem: tuple[int, int] | None
    out: str

    def to_json(self) -> str:
        return json.dumps({"op": self.op, "query": self.query,
                           "mem": None if self.mem is None else list(self.mem), "out": self.out})


@dataclass
class ProtocolTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def add(self, op, query, mem, out):
        self.records.append(TraceRecord(op, query, None if mem is None else tuple(mem), out))

    def count(self, op: str) -> int:
        return sum(r.op == op for r in self.records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "ProtocolTrace":
        tr = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                tr.add(d["op"], d["query"], d["mem"], d["out"])
        return tr


def memory_from_frame(frame: FrameFeatures, origin=(0, 0)) -> MemoryState:
    """Bootstrap memory holding a frame's own features (used by the first propagate)."""
    zeros = torch.zeros_like(frame.feats)
    return MemoryState(frame.centers, frame.feats, zeros,
                       torch.zeros(frame.feats.shape[:-1], dtype=frame.feats.dtype), tuple(origin))


class RelativePositionBias(nn.Module):
    def __init__(self, heads: int, hidden: int = 16):
        super().__init__()
        # no output bias: a per-head constant cancels in the softmax
        self.net = nn.Sequential(nn.Linear(3, hidden), nn.ReLU(), nn.Linear(hidden, heads, bias=False))

    def forward(self, q_coords, k_coords):
        rel = q_coords[..., :, None, :] - k_coords[..., None, :, :]
        return self.net(rel).movedim(-1, -3)  # (..., heads, Mq, Mk)


class CrossAttention(nn.Module):
    """Multi-head attention with a learned coordinate-difference bias."""

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(q_dim, dim)
        self.k = nn.Linear(kv_dim, dim, bias=False)  # a key bias is constant across keys
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)
        self.bias = RelativePositionBias(heads)

    def forward(self, x, q_coords, mem, k_coords):
        h = self.heads
        q = self.q(x).unflatten(-1, (h, -1)).transpose(-3, -2)
        k = self.k(mem).unflatten(-1, (h, -1)).transpose(-3, -2)
        v = self.v(mem).unflatten(-1, (h, -1)).transpose(-3, -2)
        logits = q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5 + self.bias(q_coords, k_coords)
        out = torch.softmax(logits, -1) @ v
        return self.o(out.transpose(-3, -2).flatten(-2))


class Propagate(nn.Module):
    """Query frame attends over memory ``[F_G, F_M]``; residual plus feed-forward block."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.dim = dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(2 * dim)
        self.attn = CrossAttention(dim, 2 * dim, dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))

    def forward(self, query: FrameFeatures, memory: MemoryState, origin) -> TransformerFeatures:
        if query.feats.shape[-1] != self.dim or memory.geo_feats.shape[-1] != self.dim:
            raise ValueError(f"feature width mismatch: expected {self.dim}")
        kv = self.norm_kv(torch.cat([memory.geo_feats, memory.mask_feats], -1))
        h = query.feats + self.attn(self.norm_q(query.feats), query.centers, kv, memory.coords)
        h = h + self.ff(self.norm_ff(h))
        return TransformerFeatures(query.centers, h, tuple(origin))


class Update(nn.Module):
    """Mask prediction from propagated features; stores geometric and mask-gated features."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, dim, dim, heads)
        self.mask_head = nn.Sequential(nn.Linear(2 * dim, dim), nn.ReLU(), nn.Linear(dim, 1))
        self.value = nn.Linear(dim, dim)

    def forward(self, tf: TransformerFeatures, frame: FrameFeatures,
                prev_memory: MemoryState | None, origin) -> MemoryState:
        if tf.coords.shape != frame.centers.shape or not torch.equal(tf.coords, frame.centers):
            raise ValueError("transformer features and frame have different coordinates")
        h = tf.feats
        if prev_memory is not None:
            mem = self.norm(prev_memory.geo_feats + prev_memory.mask_feats)
            h = h + self.attn(self.norm(h), tf.coords, mem, prev_memory.coords)
        logits = self.mask_head(torch.cat([h, frame.feats], -1)).squeeze(-1)
        scores = torch.sigmoid(logits)
        return MemoryState(frame.centers, tf.feats, scores[..., None] * self.value(h), scores, tuple(origin))


class MemoryModule(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.propagate = Propagate(dim, heads)
        self.update = Update(dim, heads)


def propagate(query: FrameFeatures, memory: MemoryState, params: MemoryModule, origin=None):
    return params.propagate(query, memory, origin if origin is not None else (query.t, memory.origin[1]))


def update(tf: TransformerFeatures, frame: FrameFeatures, prev_memory: MemoryState | None,
           params: MemoryModule, origin=None):
    return params.update(tf, frame, prev_memory, origin if origin is not None else tf.origin)


@dataclass
class ProtocolResult:
    features: list[TransformerFeatures]
    memory: MemoryState
    trace: ProtocolTrace
    # memory read by the localization head for each frame
    frame_memories: list[MemoryState]
    # (frame index, memory) for every update call, for mask supervision
    updates: list[tuple[int, MemoryState]]

    def __iter__(self):
        return iter((self.features, self.memory, self.trace))


def run_bidirectional_protocol(seq: SequenceFeatures, params: MemoryModule,
                               mode: str = "bidirectional") -> ProtocolResult:
    """Iterate propagate/update over the frames of ``seq``.

    ``mode="bidirectional"``: frame 0 bootstraps from itself; every middle frame
    first folds the next frame into a cross-frame memory, then re-reads the
    current frame against it and writes the new memory from the pre-iteration
    memory; the last frame is only propagated. ``mode="forward"`` keeps a single
    forward chain (last-frame memory only).
    """
    L = seq.L
    if L < 2:
        raise ValueError("the memory protocol needs at least 2 frames")
    P, U = params.propagate, params.update
    trace = ProtocolTrace()
    feats, frame_mem, updates = [], [], []

    f0 = seq.frame(0)
    t = P(f0, memory_from_frame(f0), (0, 0))
    trace.add("P", 0, (0, 0), "T(0,0)")
    mem = U(t, f0, None, (0, 0))
    trace.add("U", 0, None, "M(0,0)")
    feats.append(t)
    frame_mem.append(mem)
    updates.append((0, mem))

    for i in range(1, L - 1):
        fi = seq.frame(i)
        if mode == "bidirectional":
            fn = seq.frame(i + 1)
            t_a = P(fn, mem, (i + 1, i - 1))
            trace.add("P", i + 1, mem.origin, f"T({i + 1},{i - 1})")
            cross = U(t_a, fn, mem, (i + 1, i - 1))
            trace.add("U", i + 1, mem.origin, f"M({i + 1},{i - 1})")
            updates.append((i + 1, cross))
            t_b = P(fi, cross, (i, i))
            trace.add("P", i, cross.origin, f"T({i},{i}')")
            new = U(t_b, fi, mem, (i, i))
            trace.add("U", i, mem.origin, f"M({i},{i}')")
        elif mode == "forward":
            t_b = P(fi, mem, (i, i - 1))
            trace.add("P", i, mem.origin, f"T({i},{i - 1})")
            new = U(t_b, fi, mem, (i, i))
            trace.add("U", i, mem.origin, f"M({i},{i})")
        else:
            raise ValueError(f"unknown memory mode {mode!r}")
        updates.append((i, new))
        feats.append(t_b)
        frame_mem.append(new)
        mem = new

    fl = seq.frame(L - 1)
    t = P(fl, mem, (L - 1, L - 2))
    trace.add("P", L - 1, mem.origin, f"T({L - 1},{L - 2})")
    feats.append(t)
    # read-only mask read-out for localizing the last frame; not a memory write
    frame_mem.append(U(t, fl, mem, (L - 1, L - 1)))
    return ProtocolResult(feats, mem, trace, frame_mem, updates)
