"""Gaussian-mask localization: distractor down-weighting, Hough voting and proposal selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import gather_points, knn_query
from .data import Box3D, wrap_angle


@dataclass
class VoteOutput:
    vote_centers: torch.Tensor  # (..., M, 3)
    objectness: torch.Tensor  # (..., M) in [0, 1]
    feats: torch.Tensor  # (..., M, C_v)
    logits: torch.Tensor  # (..., M)
    offsets: torch.Tensor  # (..., M, 3)


@dataclass
class Proposal:
    center: np.ndarray
    theta: float
    score: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.theta = wrap_angle(self.theta)


def gaussian_mask(points, y, sigma: float):
    """exp(-|x - y|^2 / (2 sigma^2)) for every row of ``points``; works on numpy or torch."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if isinstance(points, torch.Tensor):
        y = torch.as_tensor(y, dtype=points.dtype)
        d2 = ((points - y[..., None, :]) ** 2).sum(-1)
        return torch.exp(-d2 / (2.0 * sigma * sigma))
    points = np.asarray(points, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d2 = ((points - y[..., None, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def normalize_mask(g):
    """Divide by the per-row maximum so the best-aligned point gets weight 1."""
    if isinstance(g, torch.Tensor):
        mx = g.max(dim=-1, keepdim=True).values
        return torch.where(mx > 0, g / torch.where(mx > 0, mx, torch.ones_like(mx)), g)
    g = np.asarray(g, dtype=np.float64)
    mx = g.max(axis=-1, keepdims=True)
    return np.where(mx > 0, g / np.where(mx > 0, mx, 1.0), g)


def fuse_features(geo_feats, mask_feats, weights):
    """F = w * (F_G + F_M), one scalar weight per row."""
    if geo_feats.shape != mask_feats.shape or weights.shape != geo_feats.shape[:-1]:
        raise ValueError(
            f"shape mismatch: F_G {tuple(geo_feats.shape)}, F_M {tuple(mask_feats.shape)}, "
            f"mask {tuple(weights.shape)}"
        )
    return weights[..., None] * (geo_feats + mask_feats)


class HoughVote(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.trunk = nn.Sequential(nn.Linear(dim + 3, hidden), nn.ReLU())
        self.offset = nn.Linear(hidden, 3)
        self.residual = nn.Linear(hidden, dim)
        self.objectness = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, coords, feats) -> VoteOutput:
        h = self.trunk(torch.cat([feats, coords], -1))
        offsets = self.offset(h)
        vfeat = feats + self.residual(h)
        logits = self.objectness(vfeat).squeeze(-1)
        return VoteOutput(coords + offsets, torch.sigmoid(logits), vfeat, logits, offsets)


def hough_vote(coords, F, params: HoughVote) -> VoteOutput:
    if coords.shape[:-1] != F.shape[:-1]:
        raise ValueError("coords and features disagree on point count")
    return params(coords, F)


def topk_indices(scores: torch.Tensor, K: int) -> torch.Tensor:
    """K best indices by descending score, ties to the lower index."""
    M = scores.shape[-1]
    if not 1 <= K <= M:
        raise ValueError(f"K={K} must lie in [1, {M}]")
    return torch.sort(-scores.detach(), dim=-1, stable=True).indices[..., :K]


def sample_proposals(votes: VoteOutput, K: int):
    """Top-K votes by max-normalized objectness.

    Returns ``(index, centers, normalized_scores, feats, logits)`` for the K picks.
    """
    s = votes.objectness
    idx = topk_indices(s, K)
    norm = normalize_mask(s)
    take = lambda x: torch.gather(x, -1, idx)  # noqa: E731
    centers = gather_points(votes.vote_centers, idx)
    feats = gather_points(votes.feats, idx)
    return idx, centers, take(norm), feats, take(votes.logits)


def wrap_tensor(theta: torch.Tensor) -> torch.Tensor:
    return theta - 2 * math.pi * torch.floor((theta + math.pi) / (2 * math.pi))


class ProposalHead(nn.Module):
    """Pools the ``pool_k`` nearest votes around each sampled vote; predicts center, heading, score."""

    def __init__(self, dim: int, hidden: int | None = None, pool_k: int = 8):
        super().__init__()
        hidden = hidden or dim
        self.pool_k = pool_k
        self.pool = nn.Sequential(nn.Linear(dim + 3, hidden), nn.ReLU())
        self.head = nn.Sequential(nn.Linear(hidden + dim, hidden), nn.ReLU(), nn.Linear(hidden, 5))

    def forward(self, centers, feats, logits, votes: VoteOutput, prev_theta):
        if centers.shape[-2] == 0:
            raise ValueError("no proposals to refine")
        k = min(self.pool_k, votes.vote_centers.shape[-2])
        nbr = knn_query(centers.detach(), votes.vote_centers.detach(), k)
        g_ctr = gather_points(votes.vote_centers, nbr)
        g_feat = gather_points(votes.feats, nbr)
        pooled = self.pool(torch.cat([g_feat, g_ctr - centers[..., None, :]], -1)).max(-2).values
        out = self.head(torch.cat([pooled, feats], -1))
        center = centers + out[..., :3]
        prev = torch.as_tensor(prev_theta, dtype=center.dtype)
        theta_res = out[..., 3]
        theta = wrap_tensor(prev[..., None] + theta_res)
        score_logit = logits + out[..., 4]
        return center, theta, torch.sigmoid(score_logit), score_logit, theta_res


def proposal_head(centers, feats, logits, votes, prev_theta, params: ProposalHead) -> list[Proposal]:
    """Unbatched wrapper returning ``Proposal`` records."""
    center, theta, score, _, _ = params(centers, feats, logits, votes, prev_theta)
    return [Proposal(c, float(t), float(s)) for c, t, s in
            zip(center.detach().cpu().numpy(), theta.detach().cpu().numpy(), score.detach().cpu().numpy())]


def select_best(proposals: list[Proposal], target_size, prev_box: Box3D) -> Box3D:
    """Box of the highest-scoring proposal (first on ties); ``prev_box`` when there is none."""
    if not proposals:
        return Box3D(prev_box.center.copy(), prev_box.size.copy(), prev_box.theta)
    best = max(range(len(proposals)), key=lambda i: (proposals[i].score, -i))
    p = proposals[best]
    return Box3D(p.center, target_size, p.theta)


class GMLocNet(nn.Module):
    def __init__(self, dim: int, K: int = 16, sigma: float = 2.0, pool_k: int = 8, use_mask: bool = True):
        super().__init__()
        self.K = K
        self.sigma = sigma
        self.use_mask = use_mask
        self.vote = HoughVote(dim)
        self.proposal = ProposalHead(dim, pool_k=pool_k)

    def forward(self, coords, geo_feats, mask_feats, y, prev_theta):
        if self.use_mask:
            w = normalize_mask(gaussian_mask(coords, y, self.sigma))
        else:
            w = torch.ones(coords.shape[:-1], dtype=coords.dtype)
        F = fuse_features(geo_feats, mask_feats, w)
        votes = hough_vote(coords, F, self.vote)
        idx, centers, _, feats, logits = sample_proposals(votes, min(self.K, coords.shape[-2]))
        center, theta, score, score_logit, theta_res = self.proposal(centers, feats, logits, votes, prev_theta)
        return {
            "weights": w, "votes": votes, "sample_index": idx, "sample_centers": centers,
            "prop_center": center, "prop_theta": theta, "prop_score": score,
            "prop_logit": score_logit, "prop_theta_res": theta_res,
        }
