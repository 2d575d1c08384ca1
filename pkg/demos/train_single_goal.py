"""Train a boom policy to hold the zero pose, entirely inside the GP model,
then run it on the true plant.

A shorter horizon than the default keeps this to a couple of minutes.

    python3 demos/train_single_goal.py [steps]
"""
import sys

import numpy as np

from batchgp import data, env, gp
from batchgp.policy import make_policy
from batchgp.rng import derive_seed
from batchgp.trainer import RewardParams, TrainConfig, select_initial_policy, train_policy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 40
params = env.BoomParams()
ds = env.collect_excitation_data(params, 110.0, seed=1)
nz = data.fit_normalizer(ds)
pairs = data.build_training_pairs(ds, nz)
ens = gp.fit_hyperparams(pairs, gp.FitConfig(max_steps=200, seed=3), rank="auto", dt=ds.dt,
                         state_bounds=ds.state_bounds())

config = TrainConfig(horizon=100, max_steps=steps, seed=4)
rp = RewardParams()
candidates = [make_policy(2, 1, (8, 8), seed=derive_seed(5, i)) for i in range(8)]
best, scores = select_initial_policy(ens, candidates, config, rp)
print("initial candidates, return per step:", np.round(scores / (config.horizon + 1), 3))


def report(step, _policy, rec):
    if step % 10 == 0:
        print(f"step {step:3d}  return per step {rec['mean_return'] / (config.horizon + 1):.3f}")


policy, log = train_policy(ens, candidates[best], config, rp, callback=report)
print(f"stopped: {log.stopped} after {len(log.records)} steps")

res = env.evaluate_policy(params, policy, nz, [0.0], 200, n_episodes=5, initial=env.PlantState(-0.9),
                          init_spread=0.05, seed=6)
errs = [m["steady_state_error"] for m in res.metrics]
print("steady-state error per episode (rad):", np.round(errs, 4))
print(f"success rate at 0.05 rad: {res.success_rate(0.05):.0%}")
