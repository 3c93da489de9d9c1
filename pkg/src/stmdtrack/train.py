"""Loss, training loop, finite-difference gradient checks and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, TrackerConfig, TrainConfig, from_dict, to_dict
from .data import Box3D, SequenceSample
from .evaluation import run_ope, summarize
from .gmlocnet import wrap_tensor
from .tracker import NeuralTracker, STMDNet, collate, prepare_window

log = logging.getLogger(__name__)

SMOOTH_L1_BETA = 0.1
EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


class GradCheckError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class LossBreakdown:
    total: torch.Tensor
    mask_term: torch.Tensor
    vote_term: torch.Tensor
    objectness_term: torch.Tensor
    box_term: torch.Tensor
    weights: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "mask_term", "vote_term", "objectness_term", "box_term")}


def _smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < SMOOTH_L1_BETA, 0.5 * ax * ax / SMOOTH_L1_BETA, ax - 0.5 * SMOOTH_L1_BETA)


def _bce_prob(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


def compute_loss(outputs: dict, targets: dict, cfg: TrainConfig | None = None) -> LossBreakdown:
    """Four supervised terms averaged over frames.

    * mask: BCE of every memory update's mask scores against center membership
    * vote: smooth-L1 of member centers' votes to the target center
    * objectness: BCE of vote objectness (positive within ``positive_radius``) plus
      BCE of the proposal scores under the same radius rule
    * box: smooth-L1 on refined center and wrapped heading for proposals whose
      sampled vote lies within ``positive_radius``
    """
    cfg = cfg or TrainConfig()
    r = cfg.positive_radius
    labels = targets["labels"]
    fps_idx = outputs["fps_idx"]
    dtype = outputs["vote_centers"].dtype
    member = torch.gather(labels.to(dtype), -1, fps_idx)  # (B, L, M)

    mask_terms = [_bce_prob(scores, member[:, f]).mean() for f, scores in outputs["updates"]]
    mask_term = torch.stack(mask_terms).mean() if mask_terms else torch.zeros((), dtype=dtype)

    src = outputs["loc_frames"]
    gt_c = targets["gt_center"][:, src].to(dtype)  # (B, F, 3)
    gt_t = targets["gt_theta"][:, src].to(dtype)
    mem = member[:, src]  # (B, F, M)

    votes = outputs["vote_centers"]
    vote_err = _smooth_l1(votes - gt_c[..., None, :]).sum(-1)
    vote_term = (vote_err * mem).sum() / mem.sum().clamp_min(1.0)

    vdist = (votes - gt_c[..., None, :]).norm(dim=-1)
    obj_lbl = (vdist < r).to(dtype)
    obj = F.binary_cross_entropy_with_logits(outputs["vote_logits"], obj_lbl)
    pdist = (outputs["prop_center"] - gt_c[..., None, :]).norm(dim=-1)
    prop_lbl = (pdist < r).to(dtype)
    obj = obj + F.binary_cross_entropy_with_logits(outputs["prop_logit"], prop_lbl)

    pos = ((outputs["sample_centers"] - gt_c[..., None, :]).norm(dim=-1) < r).to(dtype)
    c_err = _smooth_l1(outputs["prop_center"] - gt_c[..., None, :]).sum(-1)
    t_err = _smooth_l1(wrap_tensor(outputs["prop_theta"] - gt_t[..., None]))
    box_term = ((c_err + t_err) * pos).sum() / pos.sum().clamp_min(1.0)

    w = {"mask": cfg.w_mask, "vote": cfg.w_vote, "objectness": cfg.w_objectness, "box": cfg.w_box}
    total = w["mask"] * mask_term + w["vote"] * vote_term + w["objectness"] * obj + w["box"] * box_term
    return LossBreakdown(total, mask_term, vote_term, obj, box_term, w)


# ---------------------------------------------------------------- batches

def sample_training_windows(rng: np.random.Generator, train_set: list[SequenceSample],
                            cfg: TrackerConfig, tcfg: TrainConfig, batch_size: int) -> list[dict]:
    """Random (sequence, frame) windows with jittered previous estimates."""
    wins = []
    for _ in range(batch_size):
        seq = train_set[int(rng.integers(len(train_set)))]
        t = int(rng.integers(1, len(seq)))
        gt = seq.gt_boxes
        centers, thetas = [], []
        for s in range(t + 1):
            if s == 0:
                centers.append(gt[0].center.copy())
                thetas.append(gt[0].theta)
            else:
                jit = rng.normal(0.0, tcfg.center_jitter, 3) * np.array([1.0, 1.0, 0.2])
                centers.append(gt[s - 1].center + jit)
                thetas.append(gt[s - 1].theta + rng.normal(0.0, tcfg.heading_jitter))
        ref = Box3D(centers[t], seq.target_size, thetas[t])
        wins.append(prepare_window(seq, t, ref, cfg, centers, thetas, seed=int(rng.integers(2**31))))
    return wins


def forward_loss(net: STMDNet, batch: dict, tcfg: TrainConfig) -> tuple[LossBreakdown, dict]:
    out = net(batch["coords"], batch["feats"], batch["y"], batch["prev_theta"])
    return compute_loss(out, batch, tcfg), out


def evaluate(net: STMDNet, eval_set: list[SequenceSample], seed: int = 0) -> dict:
    tracker = NeuralTracker(net, seed=seed)
    return summarize([run_ope(tracker, s) for s in eval_set])


def _lr_at(step: int, tcfg: TrainConfig) -> float:
    lr = tcfg.lr
    for frac in tcfg.lr_decay_at:
        if step >= int(frac * tcfg.steps):
            lr *= 0.5
    return lr


def train_loop(cfg: RunConfig, train_set: list[SequenceSample], eval_set: list[SequenceSample],
               on_log: Callable[[dict], None] | None = None, dump_dir: str | Path | None = None,
               net: STMDNet | None = None):
    """Adam with a step-halving schedule; keeps the parameters with the best eval Success.

    Returns ``(net, history)``; ``net`` carries the best parameters and
    ``net.train_state`` records the step and seed it came from.
    """
    if not train_set or not eval_set:
        raise ValueError("train_loop needs nonempty train and eval sets")
    tcfg = cfg.train
    torch.manual_seed(tcfg.seed)
    if net is None:
        net = STMDNet(copy.deepcopy(cfg.tracker))
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    history = []
    best = (-1.0, None, 0)
    t0 = time.perf_counter()
    for step in range(1, tcfg.steps + 1):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step - 1, tcfg)
        wins = sample_training_windows(rng, train_set, net.cfg, tcfg, tcfg.batch_size)
        batch = collate(wins)
        loss, _ = forward_loss(net, batch, tcfg)
        if not torch.isfinite(loss.total):
            path = None
            if dump_dir is not None:
                path = Path(dump_dir) / f"diverged_step{step}.pt"
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save({"batch": batch, "state": net.state_dict()}, path)
            raise TrainingDivergedError(f"non-finite loss at step {step} ({loss.as_floats()}); batch dump: {path}")
        opt.zero_grad()
        loss.total.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(net.parameters(), tcfg.grad_clip)
        opt.step()
        rec = {"step": step, "lr": opt.param_groups[0]["lr"], **loss.as_floats()}
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            summary = evaluate(net, eval_set, seed=tcfg.seed)
            rec.update({"eval_success": summary["success"], "eval_precision": summary["precision"]})
            if summary["success"] > best[0]:
                best = (summary["success"], copy.deepcopy(net.state_dict()), step)
        rec["elapsed"] = time.perf_counter() - t0
        history.append(rec)
        if on_log is not None:
            on_log(rec)
    if best[1] is not None:
        net.load_state_dict(best[1])
    net.train_state = {"step": best[2], "seed": tcfg.seed, "best_success": best[0]}
    return net, history


def overfit_curve(net: STMDNet, batch: dict, tcfg: TrainConfig, steps: int = 50) -> list[float]:
    """Loss trace while optimizing a single fixed batch."""
    opt = torch.optim.Adam(net.parameters(), lr=tcfg.lr)
    curve = []
    for _ in range(steps):
        loss, _ = forward_loss(net, batch, tcfg)
        curve.append(float(loss.total.detach()))
        opt.zero_grad()
        loss.total.backward()
        opt.step()
    curve.append(float(forward_loss(net, batch, tcfg)[0].total.detach()))
    return curve


# ---------------------------------------------------------------- gradient checks

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    # entries whose +/-step stencil straddles a kink (ReLU, max-pool, top-K switch)
    kinks: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)


def grad_check(fn: Callable[[], torch.Tensor], params: Iterable[tuple[str, torch.Tensor]] | Iterable[torch.Tensor],
               step: float = 1e-5, max_entries: int | None = None, seed: int = 0,
               kink_tol: float = 1e-3) -> GradCheckReport:
    """Central finite differences against autograd, per parameter tensor.

    The error of a tensor is ``|g_a - g_n| / max(|g_a|, |g_n|)`` over the checked
    entries (0 when both vanish); ``max_entries`` subsamples large tensors.
    An entry whose forward and backward one-sided slopes disagree by more than
    ``kink_tol`` (relative) sits within ``step`` of a non-differentiable point;
    it is counted in ``kinks`` and left out of the error.
    """
    named = []
    for i, p in enumerate(params):
        named.append(p if isinstance(p, tuple) else (f"param{i}", p))
    for name, p in named:
        if p.dtype != torch.float64:
            raise GradCheckError(f"{name}: gradient checks need float64, got {p.dtype}")
    tensors = [p for _, p in named]
    out = fn()
    f0 = float(out.detach())
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    report, kinks, checked = {}, {}, {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.all(torch.isfinite(g)):
            raise GradCheckError(f"{name}: non-finite analytic gradient")
        flat = p.data.view(-1)
        n = flat.numel()
        entries = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = np.empty(len(entries))
        smooth = np.ones(len(entries), dtype=bool)
        with torch.no_grad():
            for k, e in enumerate(entries):
                old = flat[e].item()
                flat[e] = old + step
                fp = float(fn())
                flat[e] = old - step
                fm = float(fn())
                flat[e] = old
                num[k] = (fp - fm) / (2 * step)
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                smooth[k] = abs(fwd - bwd) <= kink_tol * max(abs(fwd), abs(bwd)) + 1e-7
        if not np.all(np.isfinite(num)):
            raise GradCheckError(f"{name}: non-finite numeric gradient")
        ana = g.view(-1)[torch.as_tensor(entries)].numpy()[smooth]
        num = num[smooth]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        report[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(ana - num) / scale)
        kinks[name] = int((~smooth).sum())
        checked[name] = len(entries)
    return GradCheckReport(max(report.values(), default=0.0), report, kinks, checked)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"STMD"
VERSION = 1


def save_checkpoint(path: str | Path, net: STMDNet, run_cfg: RunConfig | None = None,
                    step: int = 0, seed: int = 0) -> None:
    """Little-endian: magic, u32 version, u64 param count, u32 JSON length, JSON,
    float32 payload, then CRC32 of everything before it."""
    state = net.state_dict()
    names = list(state)
    meta = {
        "tracker": to_dict(net.cfg),
        "run": to_dict(run_cfg) if run_cfg is not None else None,
        "params": [[n, list(state[n].shape)] for n in names],
        "step": int(step),
        "seed": int(seed),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    payload = np.concatenate([state[n].detach().cpu().numpy().astype("<f4").ravel() for n in names]) \
        if names else np.zeros(0, "<f4")
    body = MAGIC + struct.pack("<IQI", VERSION, payload.size, len(blob)) + blob + payload.astype("<f4").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path: str | Path, expected: TrackerConfig | None = None):
    """Return ``(STMDNet, meta)``; raises on corruption or tracker-config mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 16 + 4 or raw[:4] != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint or truncated")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch (corrupt or truncated file)")
    version, count, blen = struct.unpack("<IQI", body[4:20])
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    meta = json.loads(body[20:20 + blen])
    payload = np.frombuffer(body[20 + blen:], dtype="<f4")
    if payload.size != count:
        raise ChecksumError(f"{path}: payload has {payload.size} values, header says {count}")
    tcfg = from_dict(TrackerConfig, meta["tracker"])
    if expected is not None and to_dict(expected) != to_dict(tcfg):
        diff = sorted(k for k, v in to_dict(expected).items() if meta["tracker"].get(k) != v)
        raise VersionError(f"{path}: tracker config mismatch on {', '.join(diff)}")
    net = STMDNet(tcfg)
    state = {}
    off = 0
    for name, shape in meta["params"]:
        n = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(payload[off:off + n].copy().reshape(shape)).to(torch.get_default_dtype())
        off += n
    net.load_state_dict(state)
    return net, meta


def params_as_float32(net: STMDNet) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in net.state_dict().items()}


def count_parameters(net) -> int:
    return sum(p.numel() for p in net.parameters())

