"""Synthetic benchmark construction and the desk-scale tracker preset."""

from __future__ import annotations

import copy
import dataclasses

import numpy as np

from .config import BenchmarkConfig, RunConfig, TrackerConfig
from .data import ScenarioConfig, generate_synthetic_sequence


def sequence_seeds(seed: int, num_train: int, num_eval: int) -> tuple[list[int], list[int]]:
    ss = np.random.SeedSequence(seed)
    train_ss, eval_ss = ss.spawn(2)
    to_int = lambda s, n: [int(v) for v in s.generate_state(n, dtype=np.uint32)] if n else []  # noqa: E731
    return to_int(train_ss, num_train), to_int(eval_ss, num_eval)


def scenario_for(base: ScenarioConfig, seq_seed: int, occlusion_prob: float) -> ScenarioConfig:
    """Per-sequence scenario; with probability ``occlusion_prob`` one frame gets a random occlusion."""
    rng = np.random.default_rng(seq_seed)
    sched = dict(base.occlusion_schedule)
    if not sched and rng.random() < occlusion_prob:
        t = int(rng.integers(1, base.L))
        sched = {t: float(rng.uniform(0.5, 1.0))}
    return dataclasses.replace(base, seed=seq_seed, occlusion_schedule=sched)


def make_benchmark(cfg: BenchmarkConfig, seed: int = 0):
    """Return ``(train, eval, manifest_rows)``; rows are ``(split, index, seed, occlusion)``."""
    tr_seeds, ev_seeds = sequence_seeds(seed, cfg.num_train, cfg.num_eval)
    out = {"train": [], "eval": []}
    rows = []
    for split, seeds in (("train", tr_seeds), ("eval", ev_seeds)):
        for i, s in enumerate(seeds):
            sc = scenario_for(cfg.scenario, s, cfg.occlusion_prob)
            out[split].append(generate_synthetic_sequence(sc))
            occ = ";".join(f"{k}:{v:.4f}" for k, v in sorted(sc.occlusion_schedule.items()))
            rows.append((split, i, s, occ))
    return out["train"], out["eval"], rows


def desk_tracker(**overrides) -> TrackerConfig:
    """Reduced widths used for single-core benchmark training."""
    cfg = TrackerConfig(M=32, C=32, C_m=48, C_out=64, heads=4, K_top=16)
    return dataclasses.replace(cfg, **overrides)


def desk_run_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig(tracker=desk_tracker(seed=seed), seed=seed)
    cfg.train.seed = seed
    return copy.deepcopy(cfg)

