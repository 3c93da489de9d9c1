"""Point-cloud domain types, synthetic scenarios, sequence I/O and search-region prep."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid scenario or tracker configuration."""


class SequenceFormatError(ValueError):
    """Malformed on-disk sequence or point file."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((theta + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass
class PointFrame:
    coords: np.ndarray
    feats: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("PointFrame coords must be finite")
        if self.feats is not None:
            self.feats = np.asarray(self.feats, dtype=np.float64)
            if self.feats.ndim == 1:
                self.feats = self.feats[:, None]
            if self.feats.shape[0] != self.coords.shape[0]:
                raise ValueError(
                    f"feats has {self.feats.shape[0]} rows, coords has {self.coords.shape[0]}"
                )
        if self.t < 0:
            raise ValueError("frame index must be >= 0")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class Box3D:
    """Oriented box. ``size`` is (w, l, h); length runs along the heading in the x-y plane."""

    center: np.ndarray
    size: np.ndarray
    theta: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(self.size > 0):
            raise ValueError(f"box size must be positive, got {self.size.tolist()}")
        self.theta = wrap_angle(float(self.theta))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.theta]])

    def corners_bev(self) -> np.ndarray:
        """4x2 footprint corners, counter-clockwise."""
        w, l, _ = self.size
        c, s = math.cos(self.theta), math.sin(self.theta)
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points in the box frame (x along length, y along width)."""
        d = np.asarray(points, dtype=np.float64) - self.center
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = d[:, 0] * c + d[:, 1] * s
        y = -d[:, 0] * s + d[:, 1] * c
        return np.stack([x, y, d[:, 2]], axis=1)

    def contains(self, points: np.ndarray, dilation: float = 0.0) -> np.ndarray:
        local = self.to_local(points)
        w, l, h = self.size
        half = np.array([l, w, h]) / 2.0 + dilation
        return np.all(np.abs(local) <= half + 1e-12, axis=1)


@dataclass
class SequenceSample:
    frames: list[PointFrame]
    gt_boxes: list[Box3D]
    labels: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise ValueError("frames and gt_boxes differ in length")
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if self.labels is not None:
            if len(self.labels) != len(self.frames):
                raise ValueError("labels and frames differ in length")
            self.labels = [np.asarray(lb, dtype=bool) for lb in self.labels]
            for f, lb in zip(self.frames, self.labels):
                if lb.shape != (len(f),):
                    raise ValueError("label count must match point count")

    @property
    def target_size(self) -> np.ndarray:
        return self.gt_boxes[0].size.copy()

    def __len__(self):
        return len(self.frames)


@dataclass
class ScenarioConfig:
    L: int = 8
    points_per_frame: int = 128
    num_distractors: int = 2
    target_speed: tuple[float, float] = (0.3, 1.2)
    distractor_min_gap: float = 0.5
    occlusion_schedule: dict[int, float] = field(default_factory=dict)
    noise_sigma: float = 0.02
    seed: int = 0
    target_size: tuple[float, float, float] = (1.8, 4.0, 1.6)
    size_jitter: float = 0.1
    heading_rate: float = 0.05
    target_fraction: float = 0.4
    distractor_fraction: float = 0.15
    clutter_extent: float = 8.0

    def validate(self) -> None:
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.points_per_frame < 1:
            raise ConfigError("points_per_frame must be >= 1")
        if self.num_distractors < 0:
            raise ConfigError("num_distractors must be >= 0")
        lo, hi = self.target_speed
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad target_speed range {self.target_speed}")
        if self.distractor_min_gap < 0 or self.noise_sigma < 0:
            raise ConfigError("distractor_min_gap and noise_sigma must be >= 0")
        if any(s <= 0 for s in self.target_size):
            raise ConfigError("target_size must be positive")
        if not 0 <= self.size_jitter < 1:
            raise ConfigError("size_jitter must lie in [0, 1)")
        for t, frac in self.occlusion_schedule.items():
            if not 0.0 <= float(frac) <= 1.0:
                raise ConfigError(f"occlusion fraction for frame {t} outside [0, 1]")
        budget = self.target_fraction + self.num_distractors * self.distractor_fraction
        if not (0 < self.target_fraction) or budget > 1.0:
            raise ConfigError("point fractions exceed the per-frame budget")


def _sample_shell(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    """Uniform samples on the visible surface (all faces but the bottom)."""
    w, l, h = box.size
    # faces: top, +x, -x, +y, -y
    areas = np.array([w * l, w * h, w * h, l * h, l * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for k in range(5):
        m = face == k
        a, b = u[m, 0], u[m, 1]
        if k == 0:
            pts[m] = np.stack([a * l, b * w, np.full_like(a, h / 2)], 1)
        elif k in (1, 2):
            sign = 1.0 if k == 1 else -1.0
            pts[m] = np.stack([np.full_like(a, sign * l / 2), a * w, b * h], 1)
        else:
            sign = 1.0 if k == 3 else -1.0
            pts[m] = np.stack([a * l, np.full_like(a, sign * w / 2), b * h], 1)
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = np.empty_like(pts)
    world[:, 0] = pts[:, 0] * c - pts[:, 1] * s
    world[:, 1] = pts[:, 0] * s + pts[:, 1] * c
    world[:, 2] = pts[:, 2]
    return world + box.center


def _bounded_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    noise = rng.normal(0.0, sigma, size=(n, 3)) if sigma > 0 else np.zeros((n, 3))
    # norm-clipped at 3 sigma so members never leave the 3-sigma dilated box
    norm = np.linalg.norm(noise, axis=1, keepdims=True)
    limit = 3.0 * sigma
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return noise * scale


def generate_synthetic_sequence(cfg: ScenarioConfig) -> SequenceSample:
    """Rigid box moving on a smooth path among same-size distractors and clutter."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_pts = cfg.points_per_frame
    base = np.asarray(cfg.target_size, dtype=np.float64)
    size = base * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
    speed = rng.uniform(*cfg.target_speed)
    theta0 = rng.uniform(-math.pi, math.pi)
    dtheta = rng.uniform(-cfg.heading_rate, cfg.heading_rate)
    center = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), size[2] / 2.0])

    boxes = []
    theta = theta0
    for t in range(cfg.L):
        boxes.append(Box3D(center.copy(), size, theta))
        speed_t = max(0.0, speed + rng.normal(0.0, 0.05 * max(speed, 1e-6)))
        center = center + speed_t * np.array([math.cos(theta), math.sin(theta), 0.0])
        theta += dtheta

    radius_t = 0.5 * math.hypot(size[0], size[1])
    distractors = []
    for _ in range(cfg.num_distractors):
        d_size = base * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
        radius_d = 0.5 * math.hypot(d_size[0], d_size[1])
        dist = radius_t + radius_d + cfg.distractor_min_gap + rng.uniform(0.0, 2.0)
        ang = rng.uniform(-math.pi, math.pi)
        offset = np.array([dist * math.cos(ang), dist * math.sin(ang), (d_size[2] - size[2]) / 2])
        distractors.append((d_size, offset, rng.uniform(-0.3, 0.3)))

    n_target = max(1, int(round(cfg.target_fraction * n_pts)))
    n_distr = int(round(cfg.distractor_fraction * n_pts))
    frames, labels = [], []
    for t, box in enumerate(boxes):
        frac = float(cfg.occlusion_schedule.get(t, 0.0))
        keep = n_target - int(round(frac * n_target))
        tgt = _sample_shell(rng, box, keep) + _bounded_noise(rng, keep, cfg.noise_sigma)
        parts = [tgt]
        for d_size, offset, d_heading in distractors:
            d_box = Box3D(box.center + offset, d_size, box.theta + d_heading)
            parts.append(_sample_shell(rng, d_box, n_distr) + _bounded_noise(rng, n_distr, cfg.noise_sigma))
        used = sum(p.shape[0] for p in parts)
        n_clutter = max(0, n_pts - used)
        ext = cfg.clutter_extent
        clutter = np.column_stack([
            box.center[0] + rng.uniform(-ext, ext, n_clutter),
            box.center[1] + rng.uniform(-ext, ext, n_clutter),
            rng.uniform(0.0, 2.0, n_clutter),
        ])
        parts.append(clutter)
        coords = np.concatenate(parts, axis=0)
        member = np.zeros(coords.shape[0], dtype=bool)
        member[:keep] = True
        # exact per-frame budget; a shuffle removes any ordering cue
        order = rng.permutation(coords.shape[0])[:n_pts]
        frames.append(PointFrame(coords[order], None, t))
        labels.append(member[order])
    return SequenceSample(frames, boxes, labels)


# ---------------------------------------------------------------- disk formats

def write_sequence_dir(sample: SequenceSample, path: str | os.PathLike) -> None:
    """Write ``meta.json``, ``frame_###.xyz``, ``boxes.csv`` (and ``frame_###.lbl`` when labelled)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"num_frames": len(sample), "target_size": [float(v) for v in sample.target_size]}
    (root / "meta.json").write_text(json.dumps(meta))
    for t, frame in enumerate(sample.frames):
        lines = "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in frame.coords)
        (root / f"frame_{t:03d}.xyz").write_text(lines)
        if sample.labels is not None:
            (root / f"frame_{t:03d}.lbl").write_text("".join(f"{int(v)}\n" for v in sample.labels[t]))
    rows = ["frame,cx,cy,cz,w,l,h,theta"]
    for t, b in enumerate(sample.gt_boxes):
        rows.append(",".join([str(t)] + [f"{v:.17g}" for v in b.as_array()]))
    (root / "boxes.csv").write_text("\n".join(rows) + "\n")


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 3:
                raise SequenceFormatError(f"{path}:{lineno}: expected 3 values, got {len(tok)}")
            try:
                rows.append([float(v) for v in tok])
            except ValueError:
                raise SequenceFormatError(f"{path}:{lineno}: non-numeric coordinate") from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise SequenceFormatError(f"{path}: non-finite coordinate")
    return arr


def _read_boxes(path: Path) -> dict[int, Box3D]:
    boxes = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "frame,cx,cy,cz,w,l,h,theta":
            raise SequenceFormatError(f"{path}:1: unexpected header {header!r}")
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            tok = line.strip().split(",")
            if len(tok) != 8:
                raise SequenceFormatError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
            try:
                t = int(tok[0])
                vals = [float(v) for v in tok[1:]]
            except ValueError:
                raise SequenceFormatError(f"{path}:{lineno}: non-numeric field") from None
            try:
                boxes[t] = Box3D(vals[0:3], vals[3:6], vals[6])
            except ValueError as exc:
                raise SequenceFormatError(f"{path}:{lineno}: {exc}") from None
    return boxes


def read_sequence_dir(path: str | os.PathLike) -> SequenceSample:
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
        n = int(meta["num_frames"])
        target_size = np.asarray(meta["target_size"], dtype=np.float64)
    except FileNotFoundError:
        raise SequenceFormatError(f"{meta_path}: missing") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SequenceFormatError(f"{meta_path}:1: malformed meta ({exc})") from None

    found = sorted(root.glob("frame_*.xyz"))
    if len(found) != n:
        raise SequenceFormatError(f"{meta_path}:1: declares {n} frames but {len(found)} frame files present")
    boxes_path = root / "boxes.csv"
    if not boxes_path.exists():
        raise SequenceFormatError(f"{boxes_path}: missing")
    boxes = _read_boxes(boxes_path)
    if sorted(boxes) != list(range(n)):
        raise SequenceFormatError(f"{boxes_path}: frames {sorted(boxes)} do not cover 0..{n - 1}")

    frames, labels = [], []
    for t in range(n):
        fpath = root / f"frame_{t:03d}.xyz"
        if not fpath.exists():
            raise SequenceFormatError(f"{fpath}: missing")
        frames.append(PointFrame(_read_xyz(fpath), None, t))
        lpath = root / f"frame_{t:03d}.lbl"
        if lpath.exists():
            vals = []
            with open(lpath) as fh:
                for lineno, line in enumerate(fh, 1):
                    s = line.strip()
                    if not s:
                        continue
                    if s not in ("0", "1"):
                        raise SequenceFormatError(f"{lpath}:{lineno}: label must be 0 or 1")
                    vals.append(s == "1")
            if len(vals) != len(frames[-1]):
                raise SequenceFormatError(f"{lpath}: {len(vals)} labels for {len(frames[-1])} points")
            labels.append(np.asarray(vals, dtype=bool))
    if labels and len(labels) != n:
        raise SequenceFormatError(f"{root}: label files present for only some frames")
    sample = SequenceSample(frames, [boxes[t] for t in range(n)], labels or None)
    if not np.allclose(sample.target_size, target_size, rtol=0, atol=1e-9):
        raise SequenceFormatError(f"{meta_path}:1: target_size disagrees with boxes.csv frame 0")
    return sample


def read_kitti_frame(bin_path: str | os.PathLike, label_fields: Sequence[str] | Mapping[str, float]):
    """Load a velodyne ``.bin`` scan and one label.

    ``label_fields`` is either a mapping with keys ``h w l x y z ry`` or the raw
    whitespace tokens of a KITTI tracking (17 fields) or object (15 fields) label
    line. Camera-frame values are kept as-is; ``y`` is the box bottom in KITTI, so
    the center is lifted by ``h/2`` (camera y points down).
    """
    raw = Path(bin_path).read_bytes()
    if len(raw) % 16:
        raise SequenceFormatError(f"{bin_path}: length {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    frame = PointFrame(rec[:, :3], rec[:, 3:4], 0)

    keys = ("h", "w", "l", "x", "y", "z", "ry")
    if isinstance(label_fields, Mapping):
        src = [label_fields[k] for k in keys]
    else:
        tok = list(label_fields)
        if len(tok) >= 17:
            src = tok[10:17]
        elif len(tok) >= 15:
            src = tok[8:15]
        elif len(tok) == 7:
            src = tok
        else:
            raise SequenceFormatError(f"label has {len(tok)} fields; expected 7, 15 or 17")
    try:
        h, w, l, x, y, z, ry = (float(v) for v in src)
    except (TypeError, ValueError):
        raise SequenceFormatError(f"non-numeric label field in {src!r}") from None
    box = Box3D([x, y - h / 2.0, z], [w, l, h], ry)
    return frame, box


# ---------------------------------------------------------------- search region

def crop_search_region(frame: PointFrame, prev_box: Box3D, margin: float = 2.0,
                       return_index: bool = False):
    """Axis-aligned cube around ``prev_box.center``; output re-centered on it."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    half = float(np.max(prev_box.size)) / 2.0 + margin
    rel = frame.coords - prev_box.center
    keep = np.flatnonzero(np.max(np.abs(rel), axis=1) <= half) if len(frame) else np.zeros(0, int)
    feats = None if frame.feats is None else frame.feats[keep]
    out = PointFrame(rel[keep], feats, frame.t)
    return (out, keep) if return_index else out


def resample_points(frame: PointFrame, N: int, seed: int = 0, return_index: bool = False):
    """Fixed-size point budget.

    The output always carries one extra trailing feature column that flags
    filler points (1.0) produced for an empty input; an empty input yields
    ``N`` origin points with zero features and the flag set, and index -1.
    """
    if N <= 0:
        raise ValueError(f"N must be >= 1, got {N}")
    rng = np.random.default_rng(seed)
    n = len(frame)
    c_in = 0 if frame.feats is None else frame.feats.shape[1]
    if n == 0:
        feats = np.zeros((N, c_in + 1))
        feats[:, -1] = 1.0
        out = PointFrame(np.zeros((N, 3)), feats, frame.t)
        return (out, np.full(N, -1)) if return_index else out
    idx = rng.choice(n, size=N, replace=n < N)
    base = np.zeros((N, c_in)) if frame.feats is None else frame.feats[idx]
    feats = np.concatenate([base, np.zeros((N, 1))], axis=1)
    out = PointFrame(frame.coords[idx], feats, frame.t)
    return (out, idx) if return_index else out
