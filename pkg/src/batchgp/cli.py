"""Command-line driver: collect -> fit-gp -> train -> eval, plus bench.

    batchgp --out run collect
    batchgp --out run fit-gp
    batchgp --out run train
    batchgp --out run eval

Exit codes: 0 success, 1 usage or config error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, data, env, gp, serialize
from .autodiff import CholeskyError
from .config import ConfigError, RunConfig, load_config
from .optim import OptimizerAbort
from .policy import make_policy
from .rng import derive_seed
from .trainer import (RewardParams, RolloutError, TrainConfig, goal_conditioned_config, select_initial_policy,
                      train_policy)

log = logging.getLogger("batchgp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
GOAL_REFERENCES = (-0.6, 0.2, -0.3, 0.5)  # default step references for goal-conditioned evaluation


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _path(args, cfg: RunConfig, name: str, override=None) -> Path:
    p = Path(override if override is not None else getattr(cfg.paths, name))
    if not p.is_absolute() and args.out is not None:
        p = Path(args.out) / p
    return p


def plant_params(cfg: RunConfig) -> env.BoomParams:
    s = cfg.plant
    return env.BoomParams(gain=s.gain, damping=s.damping, deadband=s.deadband, rate_limit=s.rate_limit,
                          gravity=s.gravity, angle_min=s.angle_min, angle_max=s.angle_max,
                          noise_std=tuple(s.noise_std), dt=s.dt)


def train_config(cfg: RunConfig, ensemble=None) -> TrainConfig:
    """TrainConfig from the ``train`` section.

    A goal-conditioned run samples starts over the dataset extents and rest goals
    (zero rate) unless explicit bounds are configured.
    """
    t = cfg.train
    chunk = t.chunk_size
    if chunk is None and t.memory_budget_mb is not None and ensemble is not None:
        per_row = bench.estimate_working_set_mb(ensemble, 1, t.horizon)
        chunk = max(1, min(t.batch_size, int(t.memory_budget_mb / per_row)))
    tc = TrainConfig(batch_size=t.batch_size, horizon=t.horizon, learning_rate=t.learning_rate,
                     max_steps=t.max_steps, seed=cfg.module_seed("train"),
                     init_state_mode=t.init_state_mode, goal_mode=t.goal_mode,
                     init_state=t.init_state, goal=t.goal, init_low=t.init_low, init_high=t.init_high,
                     goal_low=t.goal_low, goal_high=t.goal_high, chunk_size=chunk,
                     early_stop_tol=t.early_stop_tol, workers=t.workers)
    if t.goal_conditioned and ensemble is not None:
        gc = goal_conditioned_config(ensemble, tc)
        explicit = {k: getattr(t, k) for k in ("init_low", "init_high", "goal_low", "goal_high")
                    if getattr(t, k) is not None}
        tc = TrainConfig(**{**gc.__dict__, **explicit})
    return tc


def reward_params(cfg: RunConfig) -> RewardParams:
    return RewardParams(np.array(cfg.reward.q, dtype=np.float64), cfg.reward.sigma_r)


def initial_policy(cfg: RunConfig, ensemble, tc: TrainConfig, rp: RewardParams):
    """The configured initial policy, or the best of ``train.init_candidates`` seeded draws."""
    t = cfg.train
    if t.init_candidates < 1:
        raise ConfigError("train.init_candidates must be at least 1")
    base = cfg.module_seed("policy")
    seeds = [base] + [derive_seed(base, "candidate", i) for i in range(1, t.init_candidates)]
    cands = [make_policy(ensemble.p, ensemble.q, tuple(t.hidden), goal_conditioned=t.goal_conditioned,
                         seed=s, scheme=t.init_scheme) for s in seeds]
    if len(cands) == 1:
        return cands[0]
    best, scores = select_initial_policy(ensemble, cands, tc, rp)
    log.info("initial policy %d of %d (mean return/step %s)", best, len(cands),
             np.array2string(scores / (tc.horizon + 1), precision=3))
    return cands[best]


def _root_rank(cfg: RunConfig):
    r = str(cfg.fit.root_rank).strip().lower()
    if r == "none":
        return None
    if r == "auto":
        return "auto"
    try:
        return int(r)
    except ValueError:
        raise ConfigError(f"fit.root_rank must be auto, none or an integer, got {r!r}") from None


# commands ------------------------------------------------------------------------

def cmd_collect(args, cfg: RunConfig) -> int:
    if args.output is None and args.out is None:
        raise UsageError("collect needs an output location: pass --out DIR or --output FILE")
    params = plant_params(cfg)
    duration = args.duration if args.duration is not None else cfg.collect.duration
    ds = env.collect_excitation_data(params, duration, cfg.collect.excitation, seed=cfg.module_seed("collect"))
    path = _path(args, cfg, "data", args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.write_csv(path, ds)
    print(f"wrote {path}: {ds.n} transitions ({ds.n + 1} log rows), dt={ds.dt:g}s, "
          f"angle coverage {env.angle_coverage(ds, params):.0%}")
    return EXIT_OK


def cmd_fit_gp(args, cfg: RunConfig) -> int:
    data_path = _path(args, cfg, "data", args.data)
    ds = data.load_csv(data_path)
    if len(cfg.plant.noise_std) != ds.p:
        raise ValueError(f"{data_path} has {ds.p} state columns but plant.noise_std has "
                         f"{len(cfg.plant.noise_std)} entries; the adequacy gate needs one per state")
    nz = data.fit_normalizer(ds)
    pairs = data.build_training_pairs(ds, nz)
    seed = cfg.module_seed("fit")
    fc = gp.FitConfig(max_steps=cfg.fit.max_steps, lr=cfg.fit.lr, max_points=cfg.fit.max_points,
                      noise_floor=cfg.fit.noise_floor, seed=seed)
    tr, te = gp.holdout_split(pairs.n, cfg.fit.holdout, seed)
    t0 = time.perf_counter()
    ens = gp.fit_hyperparams(pairs.subset(tr), fc, dt=ds.dt, state_bounds=ds.state_bounds())
    fit_s = time.perf_counter() - t0
    rmse = gp.prediction_rmse(ens, pairs.subset(te))
    t0 = time.perf_counter()
    ens = gp.with_data(ens, pairs, rank=_root_rank(cfg))
    cache_s = time.perf_counter() - t0
    out = _path(args, cfg, "model", args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    serialize.save_ensemble(ens, out)

    limit = 3.0 * np.asarray(cfg.plant.noise_std, dtype=np.float64)
    for m, (mdl, rep) in enumerate(zip(ens.models, ens.reports)):
        hp = mdl.hyperparams
        root = ens.caches[m].root
        print(f"output {m}: log marginal likelihood {rep.final_lml:.3f} ({rep.steps} steps, {rep.converged}); "
              f"lengthscales {np.array2string(hp.lengthscales, precision=3)}, signal {hp.signal:.3f}, "
              f"noise {hp.noise:.4f}; held-out RMSE {rmse[m]:.5f} (gate {limit[m]:.5f}); "
              f"root rank {0 if root is None else root.shape[1]}")
    print(f"hyperparameter fit {fit_s:.1f}s, cache build {cache_s:.2f}s; wrote {out}")
    if np.all(rmse < limit):
        print("model adequacy gate: pass")
        return EXIT_OK
    print("model adequacy gate: FAIL (held-out RMSE >= 3x observation noise)")
    return EXIT_NUMERIC


def cmd_train(args, cfg: RunConfig) -> int:
    if args.goal_conditioned:
        cfg.train.goal_conditioned = True
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    ens = serialize.load_ensemble(_path(args, cfg, "model", args.model))
    tc = train_config(cfg, ens)
    rp = reward_params(cfg)
    policy = initial_policy(cfg, ens, tc, rp)
    log_path = _path(args, cfg, "train_log", args.log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    out = _path(args, cfg, "policy", args.policy)

    def report(step, _pol, rec):
        log.info("step %d  mean return/step %.4f  grad norm %.3g", step,
                 rec["mean_return"] / (tc.horizon + 1), rec["grad_norm"])

    try:
        policy, tlog = train_policy(ens, policy, tc, rp, log_path=log_path, callback=report)
    except (RolloutError, OptimizerAbort) as err:
        raise NumericalFailure(str(err)) from err
    goal = None if cfg.train.goal_conditioned else np.asarray(cfg.train.goal, dtype=np.float64)
    serialize.save_policy(policy, out, ens.normalizer, goal)
    if tlog.records:
        first, last = tlog.records[0]["mean_return"], tlog.records[-1]["mean_return"]
        print(f"{len(tlog.records)} steps ({tlog.stopped}); mean return {first:.2f} -> {last:.2f} "
              f"(per step {last / (tc.horizon + 1):.3f})")
    else:
        print("0 steps; initial policy saved unchanged")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    bundle = serialize.load_policy(_path(args, cfg, "policy", args.policy))
    if bundle.normalizer is None:
        raise UsageError("policy file carries no normalization; retrain with this tool")
    policy = bundle.policy
    if cfg.eval.goals is not None:
        goals = np.asarray(cfg.eval.goals, dtype=np.float64)
    elif policy.goal_conditioned:
        goals = np.asarray(GOAL_REFERENCES)
    else:
        goals = np.asarray([bundle.goal[0] if bundle.goal is not None else cfg.train.goal[0]])
    params = plant_params(cfg)
    res = env.evaluate_policy(params, policy, bundle.normalizer, goals, cfg.eval.episode_length,
                              n_episodes=cfg.eval.n_episodes, initial=env.PlantState(cfg.eval.initial_angle),
                              init_spread=cfg.eval.init_spread, seed=cfg.module_seed("eval"))
    mpath = _path(args, cfg, "metrics")
    tpath = _path(args, cfg, "trajectory")
    mpath.parent.mkdir(parents=True, exist_ok=True)
    res.write_metrics_csv(mpath)
    res.write_trajectory_csv(tpath)
    tol = cfg.eval.tolerance
    for j, g in enumerate(goals):
        errs = np.array([m["steady_state_error"] for m in res.metrics if m["goal_index"] == j])
        print(f"goal {g:+.3f} rad: steady-state error mean {errs.mean():.4f}, max {errs.max():.4f}, "
              f"within {tol} rad in {np.mean(errs < tol):.0%} of episodes")
    print(f"success rate {res.success_rate(tol):.0%}; wrote {mpath} and {tpath}")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    ens = serialize.load_ensemble(_path(args, cfg, "model", args.model))
    b = cfg.bench
    rp = reward_params(cfg)
    seed = cfg.module_seed("bench")
    if args.what in ("scaling", "all"):
        values = tuple(tuple(int(x) for x in v.split("x")) if isinstance(v, str) else v for v in b.values)
        bc = bench.BenchConfig(axis=b.axis, values=values, repetitions=b.repetitions, warmup=b.warmup,
                               batch_size=b.batch_size, horizon=b.horizon, hidden=tuple(b.hidden), seed=seed,
                               chunk_size=b.chunk_size, workers=b.workers)
        recs = bench.run_scaling_sweep(ens, bc, rp, progress=lambda r: log.info(
            "%s=%s rep %d: %.1f ms", r.axis, r.value, r.rep, r.iter_ms_mean))
        path = _path(args, cfg, "scaling")
        path.parent.mkdir(parents=True, exist_ok=True)
        bench.write_scaling_csv(recs, path)
        print(f"wrote {path} ({len(recs)} records)")
    if args.what in ("learning", "all"):
        tc = TrainConfig(**{**train_config(cfg, ens).__dict__, "seed": seed, "early_stop_tol": None})
        policy = initial_policy(cfg, ens, tc, rp)
        task = bench.make_eval_task(ens, tc, rp, b.eval_batch, b.eval_horizon, seed)
        curves = bench.run_learning_comparison(ens, policy, tc, rp, modes=tuple(b.modes), trials=b.trials,
                                               budget_s=b.budget_s, task=task)
        path = _path(args, cfg, "learning")
        path.parent.mkdir(parents=True, exist_ok=True)
        bench.write_learning_csv(curves, path)
        for mode in b.modes:
            cs = [c for c in curves if c.mode == mode]
            final = np.mean([c.best_so_far()[-1] for c in cs])
            rate = np.mean([c.updates_per_s for c in cs])
            print(f"{mode}: final best-so-far return/step {final:.3f}, {rate:.1f} updates/s")
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"collect": cmd_collect, "fit-gp": cmd_fit_gp, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                        help="directory for relative input/output paths")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="batchgp", parents=[common],
                                     description="Batched GP-model policy search on a simulated boom.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("collect", parents=[common], help="log excitation data from the simulated plant")
    p.add_argument("--duration", type=float, help="seconds of data (default from config: 110)")
    p.add_argument("--output", metavar="FILE", help="CSV path (default paths.data under --out)")

    p = sub.add_parser("fit-gp", parents=[common], help="fit one GP per state dimension")
    p.add_argument("--data", metavar="FILE")
    p.add_argument("--model", metavar="FILE")

    p = sub.add_parser("train", parents=[common], help="optimize a policy through the GP model")
    p.add_argument("--model", metavar="FILE")
    p.add_argument("--policy", metavar="FILE", help="output policy file")
    p.add_argument("--log", metavar="FILE", help="training log CSV")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--goal-conditioned", action="store_true",
                   help="feed goals to the policy and sample starts and goals uniformly")

    p = sub.add_parser("eval", parents=[common], help="run a policy on the true simulated plant")
    p.add_argument("--policy", metavar="FILE")

    p = sub.add_parser("bench", parents=[common], help="timing sweep and learning-curve comparison")
    p.add_argument("--model", metavar="FILE")
    p.add_argument("--what", choices=("scaling", "learning", "all"), default="all")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    for name, default in (("config", None), ("seed", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, CholeskyError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, data.CsvFormatError, serialize.FormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        # dimension mismatches and invalid settings reached through the config
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
