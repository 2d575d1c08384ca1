"""Timing sweeps and batch-versus-sequential learning curves.

``run_scaling_sweep`` times full optimizer iterations (rollout, backward pass,
Adam update) while one of batch size, horizon or hidden layout varies.
``run_learning_comparison`` trains the same initial policy in several modes
under a shared wall-clock budget and scores every intermediate policy on a
fixed evaluation batch, with the clock paused while scoring.
"""
from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gp import GpEnsemble
from .optim import AdamState, adam_step
from .policy import MlpPolicy, make_policy
from .rng import rollout_noise, substream
from .trainer import GoalSampler, RewardParams, TrainConfig, loss_and_grads, rollout_batch

AXES = ("batch_size", "horizon", "policy_layers")
SCALING_FIELDS = ("axis", "value", "rep", "iter_ms_mean", "iter_ms_min", "iter_ms_max", "peak_mb")
LEARNING_FIELDS = ("mode", "trial", "wall_s", "mean_return")


@dataclass
class BenchConfig:
    axis: str = "horizon"
    values: tuple = (100, 300, 1000)
    repetitions: int = 3
    warmup: int = 1
    batch_size: int = 100
    horizon: int = 300
    hidden: tuple = (8, 8)
    seed: int = 0
    memory_limit_mb: float | None = None  # points whose working set would exceed this are marked OOM
    chunk_size: int | None = None
    workers: int = 1  # > 1 runs row chunks on a thread pool; recorded on every BenchRecord

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if self.repetitions < 3:
            raise ValueError("repetitions must be at least 3")
        keys = [_axis_key(v) for v in self.values]
        if any(b <= a for a, b in zip(keys[:-1], keys[1:])):
            raise ValueError("axis values must be strictly increasing")


def _axis_key(v):
    if isinstance(v, (tuple, list)):
        return (len(v), sum(v))
    return v


@dataclass
class BenchRecord:
    axis: str
    value: object
    rep: int
    iter_ms: list = field(default_factory=list)
    peak_mb: float = float("nan")
    failed: str = ""
    workers: int = 1

    @property
    def iter_ms_mean(self) -> float:
        return float(np.mean(self.iter_ms)) if self.iter_ms else float("nan")

    @property
    def iter_ms_min(self) -> float:
        return float(np.min(self.iter_ms)) if self.iter_ms else float("nan")

    @property
    def iter_ms_max(self) -> float:
        return float(np.max(self.iter_ms)) if self.iter_ms else float("nan")


def estimate_working_set_mb(ensemble: GpEnsemble, batch_size: int, horizon: int, chunk_size=None) -> float:
    """Rough tape footprint before running: per step, per output, O(b (r + d)) saved floats."""
    b = min(batch_size, chunk_size or batch_size)
    per_step = 0
    for c in ensemble.caches:
        r = c.root.shape[1] if c.root is not None else ensemble.X.shape[0]
        per_step += b * (r + ensemble.d + 4)
    per_step += b * 64  # policy activations and reward bookkeeping
    return 8.0 * per_step * horizon / 2**20


def time_iteration(ensemble, policy, config: TrainConfig, reward_params, step: int, state: AdamState):
    """One full optimizer iteration. Returns (ms, peak tape bytes, new policy)."""
    t0 = time.perf_counter()
    sampler = GoalSampler(ensemble, config)
    S0, G = sampler(step)
    eps = rollout_noise(config.seed, step, range(config.batch_size), config.horizon, ensemble.p)
    _, grads, _, peak = loss_and_grads(ensemble, policy, S0, G, eps, reward_params,
                                       chunk_size=config.chunk_size, use_root=config.use_root,
                                       workers=config.workers)
    named = adam_step(state, policy.named_params(), grads, config.learning_rate)
    ms = (time.perf_counter() - t0) * 1e3
    return ms, peak, policy.with_params(named)


def run_scaling_sweep(ensemble: GpEnsemble, config: BenchConfig = BenchConfig(),
                      reward_params: RewardParams = RewardParams(), *, iterations: int = 3,
                      progress=None) -> list[BenchRecord]:
    """Per axis value and repetition: ``warmup`` untimed iterations, then ``iterations`` timed ones.

    A point whose estimated working set exceeds ``memory_limit_mb``, or which raises
    MemoryError, is recorded as failed and the sweep moves on.
    """
    records = []
    for value in config.values:
        b, H, hidden = config.batch_size, config.horizon, tuple(config.hidden)
        if config.axis == "batch_size":
            b = int(value)
        elif config.axis == "horizon":
            H = int(value)
        else:
            hidden = tuple(int(x) for x in value)
        tc = TrainConfig(batch_size=b, horizon=H, max_steps=1, seed=config.seed, chunk_size=config.chunk_size,
                         early_stop_tol=None, workers=config.workers)
        est = estimate_working_set_mb(ensemble, b, H, config.chunk_size)
        for rep in range(config.repetitions):
            rec = BenchRecord(config.axis, value, rep, workers=config.workers)
            if config.memory_limit_mb is not None and est > config.memory_limit_mb:
                rec.failed = "oom"
                records.append(rec)
                continue
            policy = make_policy(ensemble.p, ensemble.q, hidden, seed=config.seed)
            state = AdamState()
            # like timeit: no collector pauses inside timed iterations
            gc.collect()
            was_enabled = gc.isenabled()
            gc.disable()
            try:
                peak = 0
                for it in range(config.warmup + iterations):
                    ms, pk, policy = time_iteration(ensemble, policy, tc, reward_params, it, state)
                    peak = max(peak, pk)
                    if it >= config.warmup:
                        rec.iter_ms.append(ms)
                rec.peak_mb = peak / 2**20
            except MemoryError:
                rec.failed = "oom"
            finally:
                if was_enabled:
                    gc.enable()
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


def write_scaling_csv(records, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCALING_FIELDS)
        for r in records:
            value = "x".join(str(v) for v in r.value) if isinstance(r.value, (tuple, list)) else r.value
            if r.failed:
                w.writerow([r.axis, value, r.rep, r.failed, r.failed, r.failed, r.failed])
            else:
                w.writerow([r.axis, value, r.rep, f"{r.iter_ms_mean:.3f}", f"{r.iter_ms_min:.3f}",
                            f"{r.iter_ms_max:.3f}", f"{r.peak_mb:.3f}"])


def linear_scaling_ratios(values, times) -> np.ndarray:
    """Observed time ratio over the linear prediction, relative to the first point."""
    values = np.asarray(values, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    return (times / times[0]) / (values / values[0])


# learning comparison -------------------------------------------------------------

MODES = {"batch_100": 100, "sequential_1": 1}


@dataclass
class LearningCurve:
    mode: str
    trial: int
    wall_s: list = field(default_factory=list)
    mean_return: list = field(default_factory=list)
    updates: int = 0

    @property
    def updates_per_s(self) -> float:
        return self.updates / self.wall_s[-1] if self.wall_s and self.wall_s[-1] > 0 else 0.0

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.mean_return))


@dataclass
class EvalTask:
    """Fixed start states, goals and noise used to score every policy the same way."""

    S0: np.ndarray
    G: np.ndarray
    eps: np.ndarray
    reward_params: RewardParams

    @property
    def horizon(self) -> int:
        return self.eps.shape[0]


def make_eval_task(ensemble: GpEnsemble, train: TrainConfig, reward_params: RewardParams,
                   batch_size: int = 100, horizon: int | None = None, seed: int = 0) -> EvalTask:
    H = train.horizon if horizon is None else horizon
    cfg = TrainConfig(**{**train.__dict__, "batch_size": batch_size, "seed": seed})
    S0, G = GoalSampler(ensemble, cfg)(10**6)
    eps = substream(seed, "eval-task").standard_normal((H, batch_size, ensemble.p))
    return EvalTask(S0, G, eps, reward_params)


def score(ensemble, policy, task: EvalTask) -> float:
    """Mean per-step return of ``policy`` on the fixed task."""
    with ad.Tape():
        batch, _ = rollout_batch(ensemble, policy, task.S0, task.G, task.horizon, task.eps, task.reward_params)
    return batch.mean_return / (task.horizon + 1)


def run_learning_comparison(ensemble: GpEnsemble, policy: MlpPolicy, train: TrainConfig,
                            reward_params: RewardParams = RewardParams(), *,
                            modes=("batch_100", "sequential_1"), trials: int = 8, budget_s: float = 60.0,
                            task: EvalTask | None = None, eval_every_s: float | None = None,
                            progress=None) -> list[LearningCurve]:
    """Train from the same initial ``policy`` in each mode for ``budget_s`` seconds of optimizer time.

    Trial ``t`` uses training seed ``train.seed + t`` in every mode. A policy snapshot is
    scored on ``task`` at the start and whenever ``eval_every_s`` optimizer seconds
    have passed (default: budget / 10), plus once at the end; scoring time is not counted.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    task = task or make_eval_task(ensemble, train, reward_params)
    every = eval_every_s if eval_every_s is not None else budget_s / 10.0
    curves = []
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {tuple(MODES)}")
        b = MODES[mode]
        for trial in range(trials):
            cfg = TrainConfig(**{**train.__dict__, "batch_size": b, "seed": train.seed + trial})
            sampler = GoalSampler(ensemble, cfg)
            curve = LearningCurve(mode, trial)
            pol, state, named = policy, AdamState(), policy.named_params()
            curve.wall_s.append(0.0)
            curve.mean_return.append(score(ensemble, pol, task))
            spent, next_eval, step = 0.0, every, 0
            while spent < budget_s:
                t0 = time.perf_counter()
                S0, G = sampler(step)
                eps = rollout_noise(cfg.seed, step, range(b), cfg.horizon, ensemble.p)
                _, grads, _, _ = loss_and_grads(ensemble, pol, S0, G, eps, reward_params,
                                                use_root=cfg.use_root)
                named = adam_step(state, named, grads, cfg.learning_rate)
                pol = pol.with_params(named)
                spent += time.perf_counter() - t0
                step += 1
                if spent >= next_eval or spent >= budget_s:
                    curve.wall_s.append(spent)
                    curve.mean_return.append(score(ensemble, pol, task))
                    next_eval += every
            curve.updates = step
            curves.append(curve)
            if progress is not None:
                progress(curve)
    return curves


def bootstrap_band(values, n_boot: int = 2000, level: float = 0.95, seed: int = 0):
    """Mean and percentile bootstrap interval of the mean over the first axis."""
    values = np.asarray(values, dtype=np.float64)
    rng = substream(seed, "bootstrap")
    idx = rng.integers(0, values.shape[0], size=(n_boot, values.shape[0]))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return values.mean(axis=0), lo, hi


def curve_summary(curves, grid) -> dict:
    """Per mode: bootstrap band of best-so-far return, interpolated (step-wise) onto ``grid``."""
    out = {}
    for mode in dict.fromkeys(c.mode for c in curves):
        rows = []
        for c in (c for c in curves if c.mode == mode):
            best = c.best_so_far()
            pos = np.searchsorted(np.asarray(c.wall_s), grid, side="right") - 1
            rows.append(best[np.clip(pos, 0, len(best) - 1)])
        out[mode] = bootstrap_band(np.array(rows))
    return out


def write_learning_csv(curves, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEARNING_FIELDS)
        for c in curves:
            for t, r in zip(c.wall_s, c.mean_return):
                w.writerow([c.mode, c.trial, f"{t:.4f}", repr(float(r))])
