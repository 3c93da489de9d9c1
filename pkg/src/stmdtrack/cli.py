"""Command line: gen-data, train, eval, ablate, plot.

Exit codes: 0 success, 1 internal failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .benchmark import make_benchmark
from .config import RunConfig, apply_override, load_run_config, to_dict
from .data import ConfigError, SequenceFormatError, read_sequence_dir, write_sequence_dir
from .evaluation import StaticTracker, TrackResult, run_ope, summarize
from .tracker import NeuralTracker
from .train import CheckpointError, load_checkpoint, save_checkpoint, train_loop

log = logging.getLogger("stmdtrack")

ABLATION_AXES = {
    "padding": ("tracker.padding", ["none", "zero", "replicate"]),
    "sigma": ("tracker.sigma", ["0.5", "1.0", "1.5", "2.0"]),
    "memory": ("tracker.memory_mode", ["bidirectional", "forward"]),
    "temporal": ("tracker.temporal_kernel", ["1", "3", "5"]),
}
MEMORY_LABELS = {"bidirectional": "on", "forward": "off"}
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


# ---------------------------------------------------------------- helpers

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path}: exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path}: output directory is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"{path}: cannot write output directory ({exc.strerror or exc})") from None
    return path


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set or ())
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.tracker.seed = args.seed
    cfg.validate()
    cfg.tracker.validate()
    return cfg


def _load_split(data_dir: Path, split: str):
    manifest = data_dir / "manifest.csv"
    if not manifest.is_file():
        raise UsageError(f"{manifest}: missing (run gen-data first)")
    with manifest.open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["split"] == split]
    return [read_sequence_dir(data_dir / r["path"]) for r in rows], rows


def _datasets(args, cfg: RunConfig):
    """Train/eval sequences from ``--data`` or generated in memory from the benchmark config."""
    if args.data:
        data_dir = Path(args.data)
        train_set, _ = _load_split(data_dir, "train")
        eval_set, rows = _load_split(data_dir, "eval")
        names = [f"eval_{int(r['index']):03d}" for r in rows]
    else:
        train_set, eval_set, _ = make_benchmark(cfg.benchmark, cfg.seed)
        names = [f"eval_{i:03d}" for i in range(len(eval_set))]
    return train_set, eval_set, names


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _train_one(cfg: RunConfig, train_set, eval_set, out: Path):
    def on_log(rec):
        if "eval_success" in rec:
            log.info("step %d  loss %.4f  eval Success %.4f  Precision %.4f",
                     rec["step"], rec["total"], rec["eval_success"], rec["eval_precision"])

    net, history = train_loop(cfg, train_set, eval_set, on_log=on_log, dump_dir=out)
    # wall-clock time stays out of the artifacts so reruns are byte-identical
    _write_jsonl(out / "metrics.jsonl", [{k: v for k, v in r.items() if k != "elapsed"} for r in history])
    save_checkpoint(out / CHECKPOINT_NAME, net, cfg, step=net.train_state["step"], seed=cfg.train.seed)
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return net


_WORKER = {}


def _init_worker(ckpt, seed):
    torch.set_num_threads(1)
    if ckpt is None:
        _WORKER["tracker"] = StaticTracker()
    else:
        net, _ = load_checkpoint(ckpt)
        _WORKER["tracker"] = NeuralTracker(net, seed=seed)


def _ope_worker(sample):
    return run_ope(_WORKER["tracker"], sample)


def _evaluate(eval_set, ckpt: Path | None, seed: int, workers: int) -> list[TrackResult]:
    if workers <= 1 or len(eval_set) <= 1:
        _init_worker(ckpt, seed)
        return [_ope_worker(s) for s in eval_set]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ckpt, seed)) as pool:
        return list(pool.map(_ope_worker, eval_set, chunksize=max(1, len(eval_set) // (4 * workers))))


def _write_results(out: Path, names, results) -> dict:
    res_dir = out / "results"
    res_dir.mkdir(parents=True, exist_ok=True)
    for name, r in zip(names, results):
        (res_dir / f"{name}.json").write_text(r.dumps() + "\n")
    summary = summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(Path(args.out), args.force)
    train_set, eval_set, rows = make_benchmark(cfg.benchmark, cfg.seed)
    samples = {"train": train_set, "eval": eval_set}
    with (out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "index", "seed", "occlusion", "path"])
        for split, idx, seed, occ in rows:
            rel = f"{split}/seq_{idx:03d}"
            write_sequence_dir(samples[split][idx], out / rel)
            w.writerow([split, idx, seed, occ, rel])
    print(f"wrote {len(train_set)} train + {len(eval_set)} eval sequences to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(Path(args.out), args.force)
    train_set, eval_set, _ = _datasets(args, cfg)
    net = _train_one(cfg, train_set, eval_set, out)
    print(f"best eval Success {net.train_state['best_success']:.4f} at step {net.train_state['step']}; "
          f"checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if args.baseline is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint PATH or --baseline static")
    ckpt = None
    seed = cfg.train.seed
    if args.checkpoint is not None:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"{ckpt}: checkpoint not found")
        _, meta = load_checkpoint(ckpt)  # fail early on corrupt files
        seed = meta["seed"]
    out = _prepare_out(Path(args.out), args.force)
    _, eval_set, names = _datasets(args, cfg)
    results = _evaluate(eval_set, ckpt, seed, args.workers)
    s = _write_results(out, names, results)
    print(f"{'sequences':<12}{'Success':>10}{'Precision':>11}")
    print(f"{s['sequences']:<12}{s['success']:>10.4f}{s['precision']:>11.4f}")
    return 0


def ablation_variants(axis: str):
    if axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    key, values = ABLATION_AXES[axis]
    labels = [MEMORY_LABELS.get(v, v) for v in values]
    return key, list(zip(labels, values))


def cmd_ablate(args) -> int:
    key, variants = ablation_variants(args.axis)
    cfg = _run_config(args)
    out = _prepare_out(Path(args.out), args.force)
    train_set, eval_set, names = _datasets(args, cfg)
    rows = []
    for label, value in variants:
        vcfg = copy.deepcopy(cfg)
        apply_override(vcfg, key, value)
        vcfg.tracker.validate()
        vdir = out / "variants" / label
        vdir.mkdir(parents=True)
        log.info("ablation %s=%s", args.axis, label)
        _train_one(vcfg, train_set, eval_set, vdir)
        results = _evaluate(eval_set, vdir / CHECKPOINT_NAME, vcfg.train.seed, args.workers)
        s = _write_results(vdir, names, results)
        rows.append((label, s["success"], s["precision"]))
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "success", "precision"])
        for label, su, pr in rows:
            w.writerow([label, f"{su:.6f}", f"{pr:.6f}"])
    print(f"{args.axis:<14}{'Success':>10}{'Precision':>11}")
    for label, su, pr in rows:
        print(f"{label:<14}{su:>10.4f}{pr:>11.4f}")
    return 0


def _read_results(res_dir: Path):
    if not res_dir.is_dir():
        raise UsageError(f"{res_dir}: results directory not found")
    if (res_dir / "results").is_dir():
        res_dir = res_dir / "results"
    files = sorted(res_dir.glob("*.json"))
    if not files:
        raise UsageError(f"{res_dir}: no result JSON files")
    loaded = []
    for f in files:
        try:
            loaded.append((f.stem, TrackResult.from_json(json.loads(f.read_text()))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise UsageError(f"{f}: not a valid track result ({exc})") from None
    return loaded


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, precision_curve, success_curve

    loaded = _read_results(Path(args.results))
    out = Path(args.out)
    fig_dir = out / "figures"
    if fig_dir.exists() and any(fig_dir.iterdir()) and not args.force:
        raise UsageError(f"{fig_dir}: not empty (use --force to overwrite)")
    fig_dir.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}  # keep PNG bytes independent of the matplotlib version string
    for stem, r in loaded:
        panels = [
            ("success", SUCCESS_THRESHOLDS, success_curve(r.ious), "IoU threshold", f"Success {r.success:.3f}"),
            ("precision", PRECISION_THRESHOLDS, precision_curve(r.dists), "center distance threshold (m)",
             f"Precision {r.precision:.3f}"),
        ]
        for kind, x, y, xlabel, title in panels:
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot(x, y)
            ax.set(xlabel=xlabel, ylabel="fraction of frames", ylim=(-0.02, 1.02), title=title)
            fig.tight_layout()
            fig.savefig(fig_dir / f"{stem}_{kind}.png", dpi=80, metadata=meta)
            plt.close(fig)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(np.arange(len(r.ious)), r.ious, marker="o")
        ax.set(xlabel="frame", ylabel="IoU", ylim=(-0.02, 1.02), title=stem)
        fig.tight_layout()
        fig.savefig(fig_dir / f"{stem}_trace.png", dpi=80, metadata=meta)
        plt.close(fig)
    print(f"wrote {3 * len(loaded)} figures to {fig_dir}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="evaluation processes")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stmdtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark to disk")
    for name, helptext in (("train", "train a tracker"), ("ablate", "train and evaluate variants along one axis")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--data", help="gen-data output directory (default: generate in memory)")
        if name == "ablate":
            sp.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    sp = sub.add_parser("eval", parents=[common], help="one-pass evaluation on the eval split")
    sp.add_argument("--data", help="gen-data output directory (default: generate in memory)")
    sp.add_argument("--checkpoint", help="trained model")
    sp.add_argument("--baseline", choices=["static"], help="evaluate the previous-box baseline instead")
    sp = sub.add_parser("plot", parents=[common], help="render curves and IoU traces")
    sp.add_argument("--results", required=True, help="directory of TrackResult JSON files")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, SequenceFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
