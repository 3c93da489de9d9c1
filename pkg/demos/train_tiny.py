"""
Training a tiny tracker
=======================

A two-minute run on a reduced benchmark. The desk-scale preset in
``configs/desk.json`` is the one the acceptance suite trains.
"""

import torch

from stmdtrack import NeuralTracker, StaticTracker, run_ope
from stmdtrack.benchmark import desk_run_config, make_benchmark
from stmdtrack.config import BenchmarkConfig
from stmdtrack.evaluation import summarize
from stmdtrack.train import train_loop

torch.set_num_threads(1)
cfg = desk_run_config(seed=0)
cfg.train.steps, cfg.train.eval_every = 200, 100
train_set, eval_set, _ = make_benchmark(BenchmarkConfig(num_train=60, num_eval=10), seed=0)



def show(rec):
    if "eval_success" in rec:
        print(f"step {rec['step']}: eval Success {rec['eval_success']:.3f}")


net, history = train_loop(cfg, train_set, eval_set, on_log=show)

static = summarize([run_ope(StaticTracker(), s) for s in eval_set])
trained = summarize([run_ope(NeuralTracker(net), s) for s in eval_set])
print(f"static  Success {static['success']:.3f}")
print(f"trained Success {trained['success']:.3f}")
