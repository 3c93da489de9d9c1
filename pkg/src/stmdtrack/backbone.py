"""Spatio-temporal graph backbone.

Per frame: farthest-point set abstraction, a KNN graph over the centers and an
edge convolution; then a pointwise encoder, temporal padding and a 1D
convolution along the frame axis for every point slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrackerConfig
from .data import PointFrame


@dataclass
class FrameFeatures:
    centers: torch.Tensor  # (..., M, 3)
    feats: torch.Tensor  # (..., M, C)
    t: int = 0


@dataclass
class SequenceFeatures:
    """Stacked per-frame features, ``coords`` (..., L, M, 3) and ``feats`` (..., L, M, C)."""

    coords: torch.Tensor
    feats: torch.Tensor

    def __post_init__(self):
        if self.coords.shape[:-1] != self.feats.shape[:-1]:
            raise ValueError(f"coords {tuple(self.coords.shape)} / feats {tuple(self.feats.shape)} mismatch")

    @property
    def L(self) -> int:
        return self.feats.shape[-3]

    def frame(self, i: int) -> FrameFeatures:
        return FrameFeatures(self.coords[..., i, :, :], self.feats[..., i, :, :], i)

    @classmethod
    def from_frames(cls, frames: list[FrameFeatures]) -> "SequenceFeatures":
        return cls(torch.stack([f.centers for f in frames], -3), torch.stack([f.feats for f in frames], -3))


# ------------------------------------------------------------------ sampling / graphs

@torch.no_grad()
def farthest_point_sample(coords: torch.Tensor, M: int, start=0, seed: int | None = None) -> torch.Tensor:
    """Indices (..., M) of farthest-point samples.

    ``start`` is the first index (int or (...,) tensor). When ``M`` exceeds the
    point count, FPS covers every point once and the remainder is drawn with
    replacement from a generator seeded by ``seed``.
    """
    lead = coords.shape[:-2]
    n = coords.shape[-2]
    pts = coords.reshape(-1, n, 3)
    b = pts.shape[0]
    m_fps = min(M, n)
    idx = torch.empty(b, M, dtype=torch.long)
    start = torch.as_tensor(start, dtype=torch.long).expand(lead).reshape(-1) if lead else \
        torch.as_tensor(start, dtype=torch.long).reshape(1)
    rows = torch.arange(b)
    dist = torch.full((b, n), float("inf"), dtype=pts.dtype)
    cur = start.clone()
    for j in range(m_fps):
        idx[:, j] = cur
        d = ((pts - pts[rows, cur][:, None, :]) ** 2).sum(-1)
        dist = torch.minimum(dist, d)
        # argmax returns the first maximal index, which fixes ties
        cur = torch.argmax(dist, dim=1)
    if M > n:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        idx[:, n:] = torch.randint(0, n, (b, M - n), generator=gen)
    return idx.reshape(*lead, M)


def _pairwise_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)


@torch.no_grad()
def knn_query(query: torch.Tensor, ref: torch.Tensor, k: int) -> torch.Tensor:
    """k nearest ``ref`` points for every ``query`` point, ascending distance then index."""
    d = _pairwise_sq(query, ref)
    order = torch.sort(d, dim=-1, stable=True).indices
    return order[..., :k]


@torch.no_grad()
def knn_graph(centers: torch.Tensor, k: int) -> torch.Tensor:
    """(..., M, k) neighbour indices, self excluded, ties broken by lower index."""
    m = centers.shape[-2]
    if not 1 <= k <= m - 1:
        raise ValueError(f"k={k} must lie in [1, M-1] with M={m}")
    d = _pairwise_sq(centers, centers)
    eye = torch.eye(m, dtype=torch.bool)
    d = d.masked_fill(eye, float("inf"))
    return torch.sort(d, dim=-1, stable=True).indices[..., :k]


def gather_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (..., N, C), idx (..., M, *rest) -> (..., M, *rest, C)."""
    lead = x.shape[:-2]
    n, c = x.shape[-2:]
    xb = x.reshape(-1, n, c)
    ib = idx.reshape(xb.shape[0], -1)
    out = torch.gather(xb, 1, ib[..., None].expand(-1, -1, c))
    return out.reshape(*lead, *idx.shape[len(lead):], c)


# ------------------------------------------------------------------ layers

class SetAbstraction(nn.Module):
    """One PointNet++ style stage: FPS centers, kNN grouping, shared layer, max-pool.

    Each neighbour contributes ``[p_j - c, c, f_j]``; the center coordinate is
    relative to the search-region origin.
    """

    def __init__(self, in_channels: int, out_channels: int, k: int):
        super().__init__()
        self.k = k
        self.linear = nn.Linear(6 + in_channels, out_channels)
        self.act = nn.ReLU()

    def forward(self, coords, feats, M: int, start=0, seed=None):
        idx = farthest_point_sample(coords, M, start=start, seed=seed)
        centers = gather_points(coords, idx)
        k = min(self.k, coords.shape[-2])
        nbr = knn_query(centers, coords, k)
        grouped = gather_points(coords, nbr)  # (..., M, k, 3)
        gfeat = gather_points(feats, nbr)
        rel = grouped - centers[..., None, :]
        ctr = centers[..., None, :].expand_as(rel)
        h = self.act(self.linear(torch.cat([rel, ctr, gfeat], -1)))
        return centers, h.max(dim=-2).values, idx


class SpatialKernel(nn.Module):
    """Per-edge affine map on ``(f_i, f_j - f_i, coords_j - coords_i)``."""

    def __init__(self, in_channels: int, out_channels: int, activation: bool = True,
                 aggregate: str = "max"):
        super().__init__()
        self.linear = nn.Linear(2 * in_channels + 3, out_channels)
        self.activation = activation
        self.aggregate = aggregate

    def edge_features(self, coords, feats, nbr):
        fj = gather_points(feats, nbr)
        fi = feats[..., None, :].expand_as(fj)
        delta = gather_points(coords, nbr) - coords[..., None, :]
        return torch.cat([fi, fj - fi, delta], -1)

    def forward(self, coords, feats, nbr):
        h = self.linear(self.edge_features(coords, feats, nbr))
        if self.activation:
            h = torch.relu(h)
        if self.aggregate == "max":
            return h.max(dim=-2).values
        if self.aggregate == "sum":
            return h.sum(dim=-2)
        raise ValueError(f"unknown aggregate {self.aggregate!r}")


def edge_conv_spatial(ff: FrameFeatures, nbr: torch.Tensor, S: SpatialKernel) -> FrameFeatures:
    if nbr.shape[:-1] != ff.feats.shape[:-1]:
        raise ValueError("neighbour table does not match the frame")
    return FrameFeatures(ff.centers, S(ff.centers, ff.feats, nbr), ff.t)


class TemporalKernel(nn.Module):
    """Weights ``(kernel, C_out, C_in)`` indexed by offset ``-r..r`` plus a bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("temporal kernel extent must be odd")
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(kernel_size, out_channels, in_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        nn.init.uniform_(self.weight, -bound, bound)

    @property
    def radius(self) -> int:
        return (self.kernel_size - 1) // 2


def temporal_pad(seq: SequenceFeatures, mode: str, pad: int = 1) -> SequenceFeatures:
    """Pad the frame axis. ``zero`` frames keep the edge frames' coordinates."""
    if mode == "none" or pad == 0:
        return seq
    L = seq.L
    left = seq.coords[..., :1, :, :].expand(*seq.coords.shape[:-3], pad, *seq.coords.shape[-2:])
    right = seq.coords[..., L - 1:, :, :].expand_as(left)
    coords = torch.cat([left, seq.coords, right], -3)
    if mode == "replicate":
        fl = seq.feats[..., :1, :, :].expand(*seq.feats.shape[:-3], pad, *seq.feats.shape[-2:])
        fr = seq.feats[..., L - 1:, :, :].expand_as(fl)
    elif mode == "zero":
        fl = torch.zeros(*seq.feats.shape[:-3], pad, *seq.feats.shape[-2:], dtype=seq.feats.dtype)
        fr = fl
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return SequenceFeatures(coords, torch.cat([fl, seq.feats, fr], -3))


def temporal_conv(seq: SequenceFeatures, T: TemporalKernel, stride: int = 1,
                  align: str = "center") -> SequenceFeatures:
    """1D convolution over frames for every point slot and channel.

    ``seq`` must already be padded. Output frame ``j`` reads padded frames
    ``j*stride .. j*stride+kernel-1``; it takes the coordinates of the middle
    one (``align="center"``) or the last one (``align="last"``).
    """
    if seq.feats.shape[-1] != T.weight.shape[-1]:
        raise ValueError(f"feature width {seq.feats.shape[-1]} != kernel input {T.weight.shape[-1]}")
    K = T.kernel_size
    Lp = seq.L
    if Lp < K:
        raise ValueError(f"sequence of {Lp} frames is shorter than the kernel ({K})")
    n_out = (Lp - K) // stride + 1
    x = seq.feats
    out = 0
    for j in range(K):
        sl = x[..., j: j + stride * (n_out - 1) + 1: stride, :, :]
        out = out + sl @ T.weight[j].T
    if T.bias is not None:
        out = out + T.bias
    shift = T.radius if align == "center" else K - 1
    coords = seq.coords[..., shift: shift + stride * (n_out - 1) + 1: stride, :, :]
    return SequenceFeatures(coords, out)


def output_frame_map(L: int, cfg: TrackerConfig) -> list[int]:
    """Input frame index carried by each backbone output frame."""
    K, s = cfg.temporal_kernel, cfg.temporal_stride
    if cfg.padding == "none":
        n_out = (L - K) // s + 1
        return [j * s + K - 1 for j in range(n_out)]
    pad = (K - 1) // 2
    n_out = (L + 2 * pad - K) // s + 1
    return [j * s for j in range(n_out)]


class Backbone(nn.Module):
    def __init__(self, cfg: TrackerConfig, activation: bool = True, aggregate: str = "max"):
        super().__init__()
        self.cfg = cfg
        self.sa = SetAbstraction(cfg.in_channels, cfg.C, cfg.k)
        self.spatial = SpatialKernel(cfg.C, cfg.C_m, activation=activation, aggregate=aggregate)
        self.encoder = nn.Linear(cfg.C_m, cfg.C_m)
        self.temporal = TemporalKernel(cfg.C_m, cfg.C_out, cfg.temporal_kernel)
        self.activation = activation

    def spatio_temporal(self, coords, feats, nbr) -> SequenceFeatures:
        """Edge conv per frame, encoder, then padded temporal conv on (..., L, M, .) inputs."""
        h = self.spatial(coords, feats, nbr)
        h = self.encoder(h)
        if self.activation:
            h = torch.relu(h)
        seq = SequenceFeatures(coords, h)
        pad = (self.cfg.temporal_kernel - 1) // 2
        seq = temporal_pad(seq, self.cfg.padding, pad)
        align = "last" if self.cfg.padding == "none" else "center"
        return temporal_conv(seq, self.temporal, self.cfg.temporal_stride, align=align)

    def forward(self, coords: torch.Tensor, feats: torch.Tensor, start=None):
        """coords (B, L, N, 3), feats (B, L, N, C_in) -> (SequenceFeatures, fps index (B, L, M))."""
        cfg = self.cfg
        if start is None:
            start = fps_start(cfg.seed, coords.shape[-2])
        centers, f, idx = self.sa(coords, feats, cfg.M, start=start, seed=cfg.seed)
        nbr = knn_graph(centers, cfg.k)
        return self.spatio_temporal(centers, f, nbr), idx


def fps_start(seed: int, n: int) -> int:
    return int(np.random.default_rng(seed).integers(n))


def set_abstraction(frame: PointFrame, M: int, seed: int = 0, sa: SetAbstraction | None = None,
                    start: int | None = None) -> FrameFeatures:
    """Single-frame set abstraction with an optional explicit FPS start index."""
    n = len(frame)
    if n < 1:
        raise ValueError("set abstraction needs at least one point")
    dtype = torch.get_default_dtype()
    coords = torch.as_tensor(frame.coords, dtype=dtype)
    feats = torch.as_tensor(frame.feats if frame.feats is not None else np.zeros((n, 0)), dtype=dtype)
    if sa is None:
        sa = SetAbstraction(feats.shape[-1], 32, 8)
    if start is None:
        start = fps_start(seed, n)
    centers, h, _ = sa(coords, feats, M, start=start, seed=seed)
    return FrameFeatures(centers, h, frame.t)


def backbone_forward(frames: list[PointFrame], cfg: TrackerConfig, model: Backbone) -> SequenceFeatures:
    """Run the backbone over a list of equally sized point frames."""
    if len(frames) != cfg.L:
        raise ValueError(f"expected {cfg.L} frames, got {len(frames)}")
    dtype = next(model.parameters()).dtype
    coords = torch.as_tensor(np.stack([f.coords for f in frames]), dtype=dtype)
    feats = torch.as_tensor(np.stack([f.feats for f in frames]), dtype=dtype)
    seq, _ = model(coords[None], feats[None])
    return SequenceFeatures(seq.coords[0], seq.feats[0])
