"""Equal wall-clock race between one 100-trajectory gradient per update and
one trajectory per update, scored on a fixed held-back batch.

    python3 demos/batch_vs_sequential.py [budget_s] [trials]
"""
import sys

import numpy as np

from batchgp import bench, data, env, gp
from batchgp.policy import make_policy
from batchgp.rng import derive_seed
from batchgp.trainer import RewardParams, TrainConfig, select_initial_policy

budget = float(sys.argv[1]) if len(sys.argv) > 1 else 12.0
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 2
params = env.BoomParams()
ds = env.collect_excitation_data(params, 110.0, seed=1)
nz = data.fit_normalizer(ds)
ens = gp.fit_hyperparams(data.build_training_pairs(ds, nz), gp.FitConfig(max_steps=200, seed=3),
                         rank="auto", dt=ds.dt, state_bounds=ds.state_bounds())

rp = RewardParams()
train = TrainConfig(horizon=100, seed=80)
task = bench.make_eval_task(ens, train, rp, batch_size=100, horizon=100, seed=81)
candidates = [make_policy(2, 1, (8, 8), seed=derive_seed(82, i)) for i in range(8)]
best, _ = select_initial_policy(ens, candidates, train, rp)

curves = bench.run_learning_comparison(ens, candidates[best], train, rp, trials=trials, budget_s=budget,
                                       task=task, eval_every_s=budget / 6)
grid = np.linspace(0.0, budget, 7)
summary = bench.curve_summary(curves, grid)
print("wall s  " + "  ".join(f"{t:6.1f}" for t in grid))
for mode, (mean, lo, hi) in summary.items():
    rate = np.mean([c.updates_per_s for c in curves if c.mode == mode])
    print(f"{mode:14s}" + "  ".join(f"{v:6.3f}" for v in mean) + f"   ({rate:.2f} updates/s)")
