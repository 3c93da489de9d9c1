import csv
import json
import os

import numpy as np
import pytest

from stmdtrack.cli import ablation_variants, main
from stmdtrack.evaluation import OracleTracker, run_ope
from stmdtrack.data import ScenarioConfig, generate_synthetic_sequence

TINY = [
    "--set", "benchmark.num_train=3", "--set", "benchmark.num_eval=2",
    "--set", "benchmark.scenario.L=6", "--set", "benchmark.scenario.points_per_frame=40",
    "--set", "tracker.L=3", "--set", "tracker.N=16", "--set", "tracker.M=8", "--set", "tracker.k=3",
    "--set", "tracker.C=4", "--set", "tracker.C_m=6", "--set", "tracker.C_out=8", "--set", "tracker.heads=2",
    "--set", "tracker.K_top=4", "--set", "tracker.pool_k=3",
    "--set", "train.steps=2", "--set", "train.batch_size=2", "--set", "train.eval_every=1",
]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_layout_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a), "--seed", "4", *TINY]) == 0
    assert main(["gen-data", "--out", str(b), "--seed", "4", *TINY]) == 0
    assert _tree(a) == _tree(b)
    rows = list(csv.DictReader((a / "manifest.csv").open()))
    assert [r["split"] for r in rows] == ["train"] * 3 + ["eval"] * 2
    assert all((a / r["path"]).is_dir() for r in rows)
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--seed", "5", *TINY]) == 0
    assert _tree(a) != _tree(tmp_path / "c")


def test_gen_data_default_counts(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--set", "benchmark.scenario.points_per_frame=8",
                 "--set", "benchmark.scenario.L=2"]) == 0
    rows = list(csv.DictReader((out / "manifest.csv").open()))
    assert len(rows) == 350
    assert len(list((out / "train").iterdir())) == 300 and len(list((out / "eval").iterdir())) == 50


def test_gen_data_refuses_nonempty_and_unwritable(tmp_path, capsys):
    out = tmp_path / "x"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["gen-data", "--out", str(out), *TINY]) == 2
    assert "not empty" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(out), "--force", *TINY]) == 0
    assert not (out / "keep.txt").exists()
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub"), *TINY]) == 2
    if os.geteuid() != 0:  # root ignores directory permissions
        ro = tmp_path / "ro"
        ro.mkdir(mode=0o500)
        assert main(["gen-data", "--out", str(ro / "sub"), *TINY]) == 2


def test_usage_and_config_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "nonsense"]) == 2
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "tracker.bogus=1"]) == 2
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "tracker.padding=mirror"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["train", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
    assert main(["eval", "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert main(["ablate", "--out", str(tmp_path / "o"), "--axis", "width"]) == 2
    assert "unknown ablation axis" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path / "o"), "--baseline", "static", "--workers", "0"]) == 2


def test_ablation_axes():
    assert [v for v, _ in ablation_variants("padding")[1]] == ["none", "zero", "replicate"]
    assert [v for v, _ in ablation_variants("sigma")[1]] == ["0.5", "1.0", "1.5", "2.0"]
    assert [v for v, _ in ablation_variants("memory")[1]] == ["on", "off"]
    assert [v for v, _ in ablation_variants("temporal")[1]] == ["1", "3", "5"]


def test_train_eval_plot_pipeline(tmp_path):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "ev"
    assert main(["gen-data", "--out", str(data), *TINY]) == 0
    assert main(["train", "--out", str(run), "--data", str(data), *TINY]) == 0
    ckpt = run / "model.ckpt"
    recs = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert all("elapsed" not in r for r in recs)
    first = _tree(run)
    assert main(["train", "--out", str(run), "--data", str(data), "--force", *TINY]) == 0
    assert _tree(run) == first

    assert main(["eval", "--out", str(ev), "--data", str(data), "--checkpoint", str(ckpt),
                 "--workers", "2", *TINY]) == 0
    files = sorted((ev / "results").glob("*.json"))
    assert [f.stem for f in files] == ["eval_000", "eval_001"]
    serial = tmp_path / "serial"
    assert main(["eval", "--out", str(serial), "--data", str(data), "--checkpoint", str(ckpt),
                 "--workers", "1", *TINY]) == 0
    assert _tree(serial) == _tree(ev)

    # corrupt checkpoint is a usage error, not a crash
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:-5])
    assert main(["eval", "--out", str(tmp_path / "e2"), "--checkpoint", str(bad), *TINY]) == 2

    figs = tmp_path / "figs"
    assert main(["plot", "--results", str(ev), "--out", str(figs)]) == 0
    names = sorted(p.name for p in (figs / "figures").iterdir())
    assert len(names) == 6 and "eval_000_trace.png" in names
    before = _tree(figs)
    assert main(["plot", "--results", str(ev), "--out", str(figs), "--force"]) == 0
    assert _tree(figs) == before


def test_eval_static_baseline_in_memory(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "s"), "--baseline", "static", "--workers", "1", *TINY]) == 0
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert summary["sequences"] == 2


def test_ablate_writes_csv_and_checkpoints(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--out", str(out), "--axis", "memory", "--workers", "1", *TINY]) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["on", "off"]
    assert all(0 <= float(r["success"]) <= 1 and 0 <= float(r["precision"]) <= 1 for r in rows)
    assert (out / "variants" / "off" / "model.ckpt").is_file()


def test_plot_errors(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["plot", "--results", str(empty), "--out", str(tmp_path / "f")]) == 2
    assert main(["plot", "--results", str(tmp_path / "missing"), "--out", str(tmp_path / "f")]) == 2
    (empty / "broken.json").write_text('{"frames": [')
    assert main(["plot", "--results", str(empty), "--out", str(tmp_path / "f")]) == 2
    assert "broken.json" in capsys.readouterr().err


def test_plot_perfect_result_curve(tmp_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = generate_synthetic_sequence(ScenarioConfig(seed=0, L=4, points_per_frame=20))
    res = tmp_path / "res"
    res.mkdir()
    (res / "perfect.json").write_text(run_ope(OracleTracker(), s).dumps())
    captured = {}
    orig = plt.Axes.plot

    def spy(self, x, y, *a, **k):
        captured.setdefault(self.get_xlabel() or len(captured), []).append((np.asarray(x), np.asarray(y)))
        return orig(self, x, y, *a, **k)

    plt.Axes.plot = spy
    try:
        assert main(["plot", "--results", str(res), "--out", str(tmp_path / "f")]) == 0
    finally:
        plt.Axes.plot = orig
    (x, y), = captured[0]  # the success panel is drawn first
    assert np.all(y[x < 1] == 1.0) and y[-1] == 0.0
