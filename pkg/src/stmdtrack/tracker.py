"""Full tracker network, window preparation and the OPE-facing tracker."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, output_frame_map
from .config import TrackerConfig
from .data import Box3D, SequenceSample, crop_search_region, resample_points
from .gmlocnet import GMLocNet, select_best
from .memory import MemoryModule, run_bidirectional_protocol


class STMDNet(nn.Module):
    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.memory = MemoryModule(cfg.C_out, cfg.heads)
        self.loc = GMLocNet(cfg.C_out, K=cfg.K_top, sigma=cfg.sigma, pool_k=cfg.pool_k, use_mask=cfg.use_mask)

    def forward(self, coords, feats, y, prev_theta, last_only: bool = False, fps_start=None):
        """Batched forward.

        coords (B, L, N, 3), feats (B, L, N, C_in): cropped, re-centered frames.
        y (B, L, 3): Gaussian-mask center per frame; prev_theta (B, L).
        Localization outputs are stacked over backbone output frames (B, L', ...).
        ``fps_start`` overrides the seed-derived sampling start, per frame if a (B, L) tensor.
        """
        seq, fps_idx = self.backbone(coords, feats, start=fps_start)
        fmap = output_frame_map(coords.shape[1], self.cfg)
        proto = run_bidirectional_protocol(seq, self.memory, self.cfg.memory_mode)
        frames = [len(fmap) - 1] if last_only else list(range(len(fmap)))
        mems = [proto.frame_memories[j] for j in frames]
        src = [fmap[j] for j in frames]
        loc = self.loc(
            torch.stack([m.coords for m in mems], 1),
            torch.stack([m.geo_feats for m in mems], 1),
            torch.stack([m.mask_feats for m in mems], 1),
            y[:, src], prev_theta[:, src],
        )
        return {
            "fps_idx": fps_idx,
            "frame_map": fmap,
            "loc_frames": src,
            "updates": [(fmap[j], m.mask_scores) for j, m in proto.updates],
            "trace": proto.trace,
            "vote_centers": loc["votes"].vote_centers,
            "vote_logits": loc["votes"].logits,
            "sample_centers": loc["sample_centers"],
            "prop_center": loc["prop_center"],
            "prop_theta": loc["prop_theta"],
            "prop_score": loc["prop_score"],
            "prop_logit": loc["prop_logit"],
        }


def _frame_seed(seed: int, t: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, t, j]).generate_state(1)[0])


def prepare_window(sample: SequenceSample, t: int, ref: Box3D, cfg: TrackerConfig,
                   mask_centers: list[np.ndarray], prev_thetas: list[float], seed: int = 0) -> dict:
    """Crop the ``cfg.L`` most recent frames ending at ``t`` around ``ref``.

    Frames before 0 are replaced by frame 0 (left replication). ``mask_centers``
    and ``prev_thetas`` are indexed by sequence frame and are expressed in world
    coordinates; the returned arrays are re-centered on ``ref.center``.
    """
    L, N = cfg.L, cfg.N
    crop_box = Box3D(ref.center, sample.target_size, 0.0)
    coords = np.zeros((L, N, 3))
    feats = np.zeros((L, N, cfg.in_channels))
    labels = np.zeros((L, N), dtype=bool)
    gt_center = np.zeros((L, 3))
    gt_theta = np.zeros(L)
    y = np.zeros((L, 3))
    prev_theta = np.zeros(L)
    frames = []
    for j in range(L):
        s = max(0, t - L + 1 + j)
        frames.append(s)
        crop, keep = crop_search_region(sample.frames[s], crop_box, cfg.crop_margin, return_index=True)
        res, idx = resample_points(crop, N, seed=_frame_seed(seed, t, j), return_index=True)
        coords[j] = res.coords
        f = res.feats
        if f.shape[1] != cfg.in_channels:
            raise ValueError(f"frame carries {f.shape[1]} feature channels, tracker expects {cfg.in_channels}")
        feats[j] = f
        if sample.labels is not None:
            src = sample.labels[s][keep]
            labels[j] = np.where(idx >= 0, src[np.maximum(idx, 0)] if len(src) else False, False)
        gt_center[j] = sample.gt_boxes[s].center - ref.center
        gt_theta[j] = sample.gt_boxes[s].theta
        y[j] = np.asarray(mask_centers[s]) - ref.center
        prev_theta[j] = prev_thetas[s]
    return {"coords": coords, "feats": feats, "labels": labels, "gt_center": gt_center,
            "gt_theta": gt_theta, "y": y, "prev_theta": prev_theta, "frames": frames}


def collate(windows: list[dict], dtype=None) -> dict:
    dtype = dtype or torch.get_default_dtype()
    out = {}
    for key in ("coords", "feats", "gt_center", "gt_theta", "y", "prev_theta"):
        out[key] = torch.as_tensor(np.stack([w[key] for w in windows]), dtype=dtype)
    out["labels"] = torch.as_tensor(np.stack([w["labels"] for w in windows]))
    return out


class NeuralTracker:
    """OPE adapter: crops around the previous prediction and keeps the arg-max proposal."""

    def __init__(self, net: STMDNet, seed: int = 0):
        self.net = net
        self.cfg = net.cfg
        self.seed = seed

    @torch.no_grad()
    def track(self, sample: SequenceSample, t: int, history: list[Box3D]) -> Box3D:
        prev = history[-1]
        # Gaussian-mask center / heading prior for frame s is the estimate at s-1 (ground truth at 0)
        centers = [history[max(s - 1, 0)].center for s in range(t + 1)]
        thetas = [history[max(s - 1, 0)].theta for s in range(t + 1)]
        win = prepare_window(sample, t, prev, self.cfg, centers, thetas, seed=self.seed)
        if np.all(win["feats"][-1][:, -1] > 0):
            # empty crop: nothing to propose from, carry the previous box forward
            return select_best([], sample.target_size, prev)
        dtype = next(self.net.parameters()).dtype
        batch = collate([win], dtype)
        was_training = self.net.training
        self.net.eval()
        out = self.net(batch["coords"], batch["feats"], batch["y"], batch["prev_theta"], last_only=True)
        self.net.train(was_training)
        score = out["prop_score"][0, -1]
        # stable arg-max: first index among equal scores
        best = int(torch.sort(-score, stable=True).indices[0])
        center = out["prop_center"][0, -1, best].double().numpy() + prev.center
        theta = float(out["prop_theta"][0, -1, best])
        return Box3D(center, sample.target_size, theta)
