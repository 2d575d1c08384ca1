"""Policy optimization by differentiating batched Monte Carlo rollouts through the GP model.

Each optimizer step samples a batch of start states and goals, unrolls the
policy through reparameterized GP draws for ``horizon`` steps, sums the
rewards, and takes an Adam step on the negative mean return.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gp import GpEnsemble, predict, sample_next_delta
from .optim import AdamState, OptimizerAbort, adam_step
from .policy import MlpPolicy, act, act_numpy
from .rng import rollout_noise, substream

log = logging.getLogger(__name__)

MODES = ("fixed", "uniform")
LOG_FIELDS = ("step", "wall_ms", "mean_return", "grad_norm", "loss")


class RolloutError(FloatingPointError):
    def __init__(self, step: int, row: int):
        self.step = step
        self.row = row
        super().__init__(f"non-finite predicted state at step {step}, row {row}")


@dataclass(frozen=True, eq=False)
class RewardParams:
    """Diagonal weights ``Q`` (given as the diagonal) and width ``sigma_r``."""

    Q: np.ndarray = field(default_factory=lambda: np.array([10.0, 0.1]))
    sigma_r: float = 1.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=np.float64)
        if Q.ndim == 2:
            if np.any(Q != np.diag(np.diag(Q))):
                raise ValueError("Q must be diagonal")
            Q = np.diag(Q).copy()
        if np.any(Q < 0) or not np.any(Q > 0):
            raise ValueError("Q needs non-negative entries with at least one positive")
        if not self.sigma_r > 0:
            raise ValueError("sigma_r must be positive")
        object.__setattr__(self, "Q", Q)


def reward(S, G, params: RewardParams) -> ad.Node:
    """exp(-(1 / (2 sigma_r^2)) sum_c Q_c (S_c - G_c)^2), one value per row."""
    S, G = ad._as_node(S), ad._as_node(G)
    if S.shape != G.shape or S.ndim != 2 or S.shape[1] != params.Q.shape[0]:
        raise ad.ShapeError("reward", S.shape, G.shape)
    w = params.Q / (2.0 * params.sigma_r**2)
    return ad.exp(-ad.sum(ad.square(S - G) * w, axis=1))


def reward_numpy(s, g, params: RewardParams) -> np.ndarray:
    d = np.asarray(s) - np.asarray(g)
    return np.exp(-(d * d * (params.Q / (2.0 * params.sigma_r**2))).sum(axis=-1))


@dataclass
class RolloutBatch:
    """``states`` (H+1, b, p), ``actions`` (H, b, q), ``rewards`` (H+1, b), ``returns`` (b,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())


@dataclass
class TrainConfig:
    batch_size: int = 100
    horizon: int = 300
    learning_rate: float = 1e-2
    max_steps: int = 100
    seed: int = 0
    init_state_mode: str = "fixed"
    goal_mode: str = "fixed"
    init_state: tuple | None = (-0.9, 0.0)  # raw units
    goal: tuple | None = (0.0, 0.0)
    init_low: tuple | None = None  # None: dataset extents
    init_high: tuple | None = None
    goal_low: tuple | None = None
    goal_high: tuple | None = None
    chunk_size: int | None = None
    use_root: bool | None = None  # None: use the variance root when the caches carry one
    early_stop_tol: float | None = 1e-5
    early_stop_window: int = 10
    workers: int = 1  # threads for row chunks within one step

    def __post_init__(self):
        if self.batch_size < 1 or self.horizon < 0:
            raise ValueError("batch_size must be >= 1 and horizon >= 0")
        if self.init_state_mode not in MODES or self.goal_mode not in MODES:
            raise ValueError(f"modes must be one of {MODES}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")


def _use_root(ensemble: GpEnsemble, flag):
    if flag is None:
        return all(c.root is not None for c in ensemble.caches)
    return flag


def rollout_batch(ensemble: GpEnsemble, policy: MlpPolicy, S0, G, horizon: int, eps,
                  reward_params: RewardParams, *, params: dict | None = None,
                  use_root: bool | None = None, batch_size: int | None = None
                  ) -> tuple[RolloutBatch, ad.Node]:
    """Unroll ``policy`` through sampled GP dynamics on the active tape.

    ``S0`` and ``G`` are (b, p) normalized states and goals, ``eps`` is (H, b, p).
    Returns the recorded trajectories and the loss node -(1/batch_size) sum of returns;
    ``batch_size`` defaults to b and is only set differently when this call handles
    one chunk of a larger batch.
    """
    S0 = np.asarray(S0, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    b, p = S0.shape
    if eps.shape != (horizon, b, p):
        raise ad.ShapeError("rollout_batch", eps.shape, (horizon, b, p))
    use_root = _use_root(ensemble, use_root)
    nz = ensemble.normalizer
    inv_state_std = 1.0 / nz.state_std
    if params is None:
        params = policy.named_params()
    pol_goal = G if policy.goal_conditioned else None

    S = ad._as_node(S0)
    r = reward(S, G, reward_params)
    total = r
    states, actions, rewards = [S0], [], [r.value]
    for k in range(horizon):
        U = act(policy, S, pol_goal, params)
        delta = sample_next_delta(ensemble, S, U, eps[k], use_root=use_root)
        S = S + delta * inv_state_std
        bad = ~np.isfinite(S.value)
        if bad.any():
            raise RolloutError(k, int(np.argwhere(bad)[0, 0]))
        r = reward(S, G, reward_params)
        total = total + r
        states.append(S.value)
        actions.append(U.value)
        rewards.append(r.value)
    loss = ad.sum(total) * (-1.0 / (batch_size or b))
    q = policy.action_dim
    batch = RolloutBatch(np.stack(states), np.stack(actions) if actions else np.zeros((0, b, q)),
                         np.stack(rewards), total.value.copy())
    return batch, loss


def trajectory_return(ensemble: GpEnsemble, policy: MlpPolicy, s0, g, eps,
                      reward_params: RewardParams, use_root: bool | None = None) -> float:
    """Single-trajectory return, computed row-wise in plain numpy (no tape).

    Reference for the batched objective: same draws, one state at a time.
    """
    use_root = _use_root(ensemble, use_root)
    nz = ensemble.normalizer
    inv_state_std = 1.0 / nz.state_std
    s = np.asarray(s0, dtype=np.float64).copy()
    g = np.asarray(g, dtype=np.float64)
    total = float(reward_numpy(s, g, reward_params))
    for k in range(len(eps)):
        u = act_numpy(policy, s, g if policy.goal_conditioned else None)[0]
        x = np.concatenate([s, (u - nz.action_mean) / nz.action_std])
        for m, (model, cache) in enumerate(zip(ensemble.models, ensemble.caches)):
            mu, var = predict(cache, model, x[None, :], use_root=use_root)
            s[m] += (mu[0] + np.sqrt(var[0]) * eps[k][m]) * ensemble.target_scale[m] * inv_state_std[m]
        total += float(reward_numpy(s, g, reward_params))
    return total


def loss_and_grads(ensemble, policy, S0, G, eps, reward_params, *, chunk_size=None, use_root=None,
                   workers: int = 1):
    """Loss value, parameter gradients and the rollout record, optionally in row chunks.

    Chunks run on separate tapes; their gradients are summed in chunk order, so
    ``workers > 1`` (chunks on a thread pool) gives the same numbers as a serial run.
    """
    b = S0.shape[0]
    H = eps.shape[0]
    chunk = chunk_size or b
    named = policy.named_params()

    def run_chunk(lo):
        hi = min(lo + chunk, b)
        with ad.Tape() as tape:
            nodes = {k: tape.param(k, v) for k, v in named.items()}
            batch, loss = rollout_batch(ensemble, policy, S0[lo:hi], G[lo:hi], H, eps[:, lo:hi],
                                        reward_params, params=nodes, use_root=use_root, batch_size=b)
        return batch, float(loss.value), tape.backward(loss), tape.peak_nbytes

    starts = range(0, b, chunk)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, starts))
    else:
        results = [run_chunk(lo) for lo in starts]
    grads, loss_value, batches, peak = None, 0.0, [], 0
    for batch, value, g, pk in results:
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        loss_value += value
        batches.append(batch)
        peak = max(peak, pk)
    if len(batches) == 1:
        merged = batches[0]
    else:
        merged = RolloutBatch(np.concatenate([x.states for x in batches], axis=1),
                              np.concatenate([x.actions for x in batches], axis=1),
                              np.concatenate([x.rewards for x in batches], axis=1),
                              np.concatenate([x.returns for x in batches]))
    return loss_value, grads, merged, peak


class GoalSampler:
    """Start states and goals for each optimizer step, in normalized coordinates."""

    def __init__(self, ensemble: GpEnsemble, config: TrainConfig):
        self.config = config
        self.nz = ensemble.normalizer
        low = ensemble.state_low
        high = ensemble.state_high
        if low is None or high is None:
            X = self.nz.denormalize(ensemble.X)[:, : ensemble.p]
            low, high = X.min(axis=0), X.max(axis=0)
        c = config
        self.init_bounds = (np.asarray(c.init_low if c.init_low is not None else low, dtype=float),
                            np.asarray(c.init_high if c.init_high is not None else high, dtype=float))
        self.goal_bounds = (np.asarray(c.goal_low if c.goal_low is not None else low, dtype=float),
                            np.asarray(c.goal_high if c.goal_high is not None else high, dtype=float))
        for lo, hi in (self.init_bounds, self.goal_bounds):
            if lo.shape != (ensemble.p,) or hi.shape != (ensemble.p,) or np.any(hi < lo):
                raise ValueError(f"invalid sampling bounds {lo} .. {hi}")

    def _draw(self, mode, fixed, bounds, label, step):
        b = self.config.batch_size
        if mode == "fixed":
            if fixed is None:
                raise ValueError(f"{label} mode 'fixed' needs a vector")
            raw = np.tile(np.asarray(fixed, dtype=np.float64), (b, 1))
        else:
            lo, hi = bounds
            raw = substream(self.config.seed, label, step).uniform(lo, hi, size=(b, len(lo)))
        return self.nz.normalize_states(raw)

    def __call__(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        S0 = self._draw(c.init_state_mode, c.init_state, self.init_bounds, "init", step)
        G = self._draw(c.goal_mode, c.goal, self.goal_bounds, "goal", step)
        return S0, G


def goal_conditioned_config(ensemble: GpEnsemble, base: TrainConfig | None = None,
                            rest_goals: bool = True) -> TrainConfig:
    """Uniform start states and goals over the dataset extents.

    With ``rest_goals`` every goal has zero rate, i.e. goals are poses to hold.
    """
    base = base or TrainConfig()
    low = np.asarray(ensemble.state_low, dtype=np.float64)
    high = np.asarray(ensemble.state_high, dtype=np.float64)
    glow, ghigh = low.copy(), high.copy()
    if rest_goals:
        glow[1:] = 0.0
        ghigh[1:] = 0.0
    return TrainConfig(**{**base.__dict__, "init_state_mode": "uniform", "goal_mode": "uniform",
                          "init_low": tuple(low), "init_high": tuple(high),
                          "goal_low": tuple(glow), "goal_high": tuple(ghigh)})


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    stopped: str = ""
    path: Path | None = None

    def write_header(self):
        if self.path is not None:
            with self.path.open("w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    def append(self, rec: dict):
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow([rec[k] for k in LOG_FIELDS])

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


def read_log(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def select_initial_policy(ensemble: GpEnsemble, candidates, config: TrainConfig = TrainConfig(),
                          reward_params: RewardParams = RewardParams()) -> tuple[int, np.ndarray]:
    """Index of the candidate with the highest mean return on one fixed batch, and all scores.

    A single forward rollout per candidate, on the step-0 starts and goals with a
    dedicated noise draw. Used to avoid initial policies whose rollouts leave the
    data and collect no reward (and so no gradient) at all.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate policy")
    S0, G = GoalSampler(ensemble, config)(0)
    eps = substream(config.seed, "init-select").standard_normal((config.horizon, config.batch_size, ensemble.p))
    scores = np.empty(len(candidates))
    for i, cand in enumerate(candidates):
        with ad.Tape():
            batch, _ = rollout_batch(ensemble, cand, S0, G, config.horizon, eps, reward_params,
                                     use_root=config.use_root)
        scores[i] = batch.mean_return
    return int(np.argmax(scores)), scores


def train_policy(ensemble: GpEnsemble, policy: MlpPolicy, config: TrainConfig = TrainConfig(),
                 reward_params: RewardParams = RewardParams(), *, log_path=None,
                 callback=None) -> tuple[MlpPolicy, TrainLog]:
    """Run up to ``config.max_steps`` Adam steps on the batched rollout objective.

    Stops early when the 10-step moving average of the mean return improves by
    less than ``early_stop_tol`` (relative) over a window. ``callback(step, policy, record)``
    runs after each update. The log is flushed every step, and the partial log is
    kept if a step fails.
    """
    tlog = TrainLog(path=Path(log_path) if log_path is not None else None)
    tlog.write_header()
    if ensemble.p != policy.layer_sizes[0] // (2 if policy.goal_conditioned else 1):
        raise ValueError(f"policy input size {policy.layer_sizes[0]} does not match "
                         f"state dimension {ensemble.p}")
    sampler = GoalSampler(ensemble, config)
    state = AdamState()
    named = policy.named_params()
    t0 = time.perf_counter()
    p = ensemble.p
    window = config.early_stop_window
    for step in range(config.max_steps):
        S0, G = sampler(step)
        eps = rollout_noise(config.seed, step, range(config.batch_size), config.horizon, p)
        loss, grads, batch, _ = loss_and_grads(ensemble, policy, S0, G, eps, reward_params,
                                               chunk_size=config.chunk_size, use_root=config.use_root,
                                               workers=config.workers)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        try:
            named = adam_step(state, named, grads, config.learning_rate)
        except OptimizerAbort:
            tlog.stopped = "aborted"
            raise
        policy = policy.with_params(named)
        rec = dict(step=step, wall_ms=(time.perf_counter() - t0) * 1e3, mean_return=batch.mean_return,
                   grad_norm=gnorm, loss=loss)
        tlog.append(rec)
        if callback is not None:
            callback(step, policy, rec)
        if config.early_stop_tol is not None and len(tlog.records) >= 2 * window:
            ret = tlog.column("mean_return")
            now, before = ret[-window:].mean(), ret[-2 * window:-window].mean()
            if (now - before) < config.early_stop_tol * abs(before):
                tlog.stopped = "converged"
                log.info("early stop at step %d (moving average %.4f -> %.4f)", step, before, now)
                break
    else:
        tlog.stopped = "max_steps"
    return policy, tlog
