"""Log excitation data from the simulated boom and fit its GP dynamics model.

Prints held-out one-step accuracy per state and compares the autodiff
likelihood gradient against the closed-form trace expression.

    python3 demos/fit_boom_model.py [duration_s]
"""
import sys

import numpy as np

from batchgp import autodiff as ad
from batchgp import data, env, gp

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 60.0
params = env.BoomParams()
ds = env.collect_excitation_data(params, duration, seed=1)
print(f"{ds.n} transitions, angle coverage {env.angle_coverage(ds, params):.0%}")

nz = data.fit_normalizer(ds)
pairs = data.build_training_pairs(ds, nz)
train, test = gp.holdout_split(pairs.n, 0.2, seed=2)
ens = gp.fit_hyperparams(pairs.subset(train), gp.FitConfig(max_steps=200, seed=3), rank="auto",
                         dt=ds.dt, state_bounds=ds.state_bounds())
rmse = gp.prediction_rmse(ens, pairs.subset(test))
for name, err, noise in zip(("angle", "rate"), rmse, params.noise_std):
    print(f"{name:5s}  held-out RMSE {err:.5f}   observation noise {noise:.4f}")

# two independent routes to d(log likelihood)/d(log hyperparameters)
sub = pairs.subset(train[:200])
X, y = sub.inputs, sub.targets[:, 0]
hp = ens.models[0].hyperparams
with ad.Tape() as tape:
    theta = tape.param("theta", hp.to_vector())
    lml = gp.lml_node(X, y, theta[:-2], theta[-2], theta[-1])
auto = tape.backward(lml)["theta"]
closed = gp.analytic_likelihood_gradient(X, y, hp)
print("max relative gap between gradients:", np.max(np.abs(auto - closed) / np.maximum(np.abs(closed), 1e-8)))
