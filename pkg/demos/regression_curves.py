"""Fit HNP and CNP to multi-task GP episodes and look at one episode's curves.

Run: python demos/regression_curves.py [iterations]
"""
import sys

import numpy as np

from hnp.episodes import GpConfig, sample_gp_episode
from hnp.models import ModelConfig, make_batch
from hnp.training import RunLog, TrainConfig, init_model, meta_test, meta_train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
gp = GpConfig()
source = lambda rng: sample_gp_episode(gp, rng)
held_out = [source(np.random.default_rng(100 + i)) for i in range(200)]

models = {}
for name in ("hnp", "cnp"):
    cfg = TrainConfig(iterations=iters, base_lr=1e-3, decay_every=6000, kl_warmup=iters // 2, model=name)
    log = RunLog()
    models[name] = meta_train(source, init_model(ModelConfig(), cfg), cfg, log)
    w = max(1, iters // 10)
    nll = meta_test(held_out, models[name], seed=1).average
    print(f"{name}: train loss {log.losses()[:w].mean():.1f} -> {log.losses()[-w:].mean():.1f}, "
          f"held-out NLL {nll.mean:.3f} +- {nll.ci95:.3f}")

# Predictive mean and std on a grid over the second task's interval.
ep = held_out[0]
task = ep.tasks[1]
grid = np.linspace(-2, 0, 9)[:, None]
contexts = [(t.context_x, t.context_y) for t in ep.tasks]
inputs = [t.context_x if m != 1 else grid for m, t in enumerate(ep.tasks)]
print("\ntask 1 context:", " ".join(f"({x:.2f},{y:+.2f})" for x, y in zip(task.context_x[:, 0], task.context_y)))
print("    x    " + "".join(f"{n:>16}" for n in models))
outs = {n: models[n].predict(make_batch(contexts, inputs, None, ep.mode, np.float32),
                             np.random.default_rng(0)).tasks[1] for n in models}
for i, x in enumerate(grid[:, 0]):
    cells = ""
    for n, tp in outs.items():
        cells += f"{tp.mixture_mean()[i]:+8.2f} +-{tp.mixture_std()[i]:5.2f}"
    print(f"{x:7.2f}  {cells}")
