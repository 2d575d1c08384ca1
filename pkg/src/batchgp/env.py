"""Simulated hydraulic boom: angle/rate plant with actuator deadband, gravity and hard stops.

The plant stands in for a real machine. It produces transition logs for GP
fitting and serves as the ground truth when a trained policy is evaluated.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Normalizer, TransitionDataset
from .policy import MlpPolicy, act_numpy
from .rng import substream

EXCITATIONS = ("manual_profile", "random_walk")


@dataclass(frozen=True)
class BoomParams:
    gain: float = 2.0  # rad/s^2 per unit of effective action
    damping: float = 1.5  # 1/s
    deadband: float = 0.1  # fraction of the action range
    rate_limit: float = float("inf")  # action units per second
    gravity: float = 0.5  # rad/s^2 at horizontal
    angle_min: float = -1.2
    angle_max: float = 0.9
    noise_std: tuple[float, float] = (0.002, 0.01)  # (rad, rad/s)
    dt: float = 0.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.deadband < 0.5:
            raise ValueError("deadband must lie in [0, 0.5)")
        if not self.angle_min < self.angle_max:
            raise ValueError("angle limits must be ordered")
        if not self.rate_limit > 0:
            raise ValueError("rate_limit must be positive")


@dataclass(frozen=True)
class PlantState:
    angle: float
    rate: float = 0.0
    applied_action: float = 0.0  # only matters with a finite rate limit

    def as_array(self) -> np.ndarray:
        return np.array([self.angle, self.rate])


def deadband(u, width: float):
    """Zero inside +-width, linear outside, rescaled so +-1 maps to +-1."""
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.maximum(np.abs(u) - width, 0.0) / (1.0 - width)


def _advance(angle, rate, applied, u, params: BoomParams):
    """Vectorized semi-implicit Euler step on arrays of plant states."""
    u = np.clip(u, -1.0, 1.0)
    if np.isfinite(params.rate_limit):
        max_du = params.rate_limit * params.dt
        u = applied + np.clip(u - applied, -max_du, max_du)
    acc = params.gain * deadband(u, params.deadband) - params.damping * rate - params.gravity * np.cos(angle)
    rate = rate + params.dt * acc
    angle = angle + params.dt * rate
    stopped = (angle < params.angle_min) | (angle > params.angle_max)
    angle = np.clip(angle, params.angle_min, params.angle_max)
    rate = np.where(stopped, 0.0, rate)
    return angle, rate, u


def _observe(angle, rate, params: BoomParams, rng):
    if rng is None:
        return np.stack([angle, rate], axis=-1)
    noise = rng.standard_normal(np.shape(angle) + (2,)) * np.asarray(params.noise_std)
    return np.stack([angle, rate], axis=-1) + noise


def step(state: PlantState, u: float, params: BoomParams = BoomParams(), rng=None
         ) -> tuple[PlantState, np.ndarray]:
    """Advance one dt. Returns the true next state and a noisy observation of it.

    Pass ``rng=None`` for a noise-free observation.
    """
    angle, rate, applied = _advance(np.float64(state.angle), np.float64(state.rate),
                                    np.float64(state.applied_action), float(u), params)
    nxt = PlantState(float(angle), float(rate), float(applied))
    return nxt, _observe(np.float64(angle), np.float64(rate), params, rng)


def _sweep_reference(n_steps, dt, lo, hi):
    """Triangle-wave reference angle: slow sweeps for the first half, faster after."""
    ref = np.empty(n_steps)
    pos, direction = lo, 1.0
    for k in range(n_steps):
        speed = 0.12 if k < n_steps // 2 else 0.35
        pos += direction * speed * dt
        if pos >= hi:
            pos, direction = hi, -1.0
        elif pos <= lo:
            pos, direction = lo, 1.0
        ref[k] = pos
    return ref


def collect_excitation_data(params: BoomParams = BoomParams(), duration: float = 110.0,
                            excitation: str = "manual_profile", seed: int = 0,
                            initial: PlantState | None = None) -> TransitionDataset:
    """Drive the plant open-loop (scripted or random) and log noisy observations.

    ``duration / dt`` transitions are produced (the log has one more row).
    """
    if excitation not in EXCITATIONS:
        raise ValueError(f"unknown excitation {excitation!r}; choose from {EXCITATIONS}")
    n_steps = int(round(duration / params.dt))
    if n_steps < 10:
        raise ValueError("duration must cover at least 10 time steps")
    noise_rng = substream(seed, "collect", "noise")
    act_rng = substream(seed, "collect", excitation)
    state = initial or PlantState(params.angle_min + 0.25, 0.0)

    obs = np.empty((n_steps + 1, 2))
    actions = np.zeros((n_steps + 1, 1))
    obs[0] = _observe(np.float64(state.angle), np.float64(state.rate), params, noise_rng)
    # scripted operator: track a sweeping reference, with a smoothed random dither on the lever
    ref = _sweep_reference(n_steps, params.dt, params.angle_min + 0.12, params.angle_max - 0.12)
    dither = 0.0
    u = 0.0
    for k in range(n_steps):
        if excitation == "manual_profile":
            dither = 0.9 * dither + 0.3 * act_rng.standard_normal()
            u = 2.5 * (ref[k] - state.angle) - 0.6 * state.rate + 0.35 + dither
        else:
            u = 0.95 * u + 0.3 * act_rng.standard_normal()
        u = float(np.clip(u, -1.0, 1.0))
        actions[k, 0] = u
        state, obs[k + 1] = step(state, u, params, noise_rng)
    times = np.arange(n_steps + 1) * params.dt
    return TransitionDataset.from_log(times, obs, actions, dt=params.dt)


def angle_coverage(dataset: TransitionDataset, params: BoomParams = BoomParams()) -> float:
    """Fraction of the angle range [angle_min, angle_max] spanned by the logged angles."""
    a = dataset.log_states[:, 0]
    return float((a.max() - a.min()) / (params.angle_max - params.angle_min))


@dataclass
class EvalResult:
    """Per (episode, goal) tracking metrics plus the full closed-loop record.

    ``times`` (T,), ``angles``/``rates``/``actions``/``goals`` (episodes, T).
    """

    metrics: list[dict] = field(default_factory=list)
    times: np.ndarray | None = None
    angles: np.ndarray | None = None
    rates: np.ndarray | None = None
    actions: np.ndarray | None = None
    goals: np.ndarray | None = None

    def success_rate(self, tol: float = 0.05) -> float:
        errs = np.array([m["steady_state_error"] for m in self.metrics])
        return float(np.mean(errs < tol))

    def write_trajectory_csv(self, path, episode: int = 0) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "phi", "phidot", "u", "goal_phi"])
            for row in zip(self.times, self.angles[episode], self.rates[episode],
                           self.actions[episode], self.goals[episode]):
                w.writerow([repr(float(v)) for v in row])

    def write_metrics_csv(self, path) -> None:
        keys = ["episode", "goal_index", "goal_phi", "settling_time", "steady_state_error", "overshoot"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for m in self.metrics:
                w.writerow([m[k] for k in keys])


def _segment_metrics(angles, goal, start_angle, dt, band, tail):
    err = np.abs(angles - goal)
    outside = np.flatnonzero(err > band)
    if outside.size == 0:
        settling = 0.0
    elif outside[-1] == len(angles) - 1:
        settling = float("nan")
    else:
        settling = float((outside[-1] + 1) * dt)
    k0 = int(len(angles) * (1.0 - tail))
    sse = float(np.mean(err[k0:]))
    direction = np.sign(goal - start_angle)
    overshoot = float(max(0.0, np.max(direction * (angles - goal)))) if direction else 0.0
    return settling, sse, overshoot


def evaluate_policy(params: BoomParams, policy: MlpPolicy, normalizer: Normalizer, goals,
                    episode_length: int = 200, *, n_episodes: int = 1,
                    initial: PlantState | None = None, init_spread: float = 0.0,
                    seed: int = 0, settle_band: float = 0.05, tail: float = 0.2) -> EvalResult:
    """Closed-loop run of ``policy`` on the true plant through a sequence of step goals.

    Each goal (an angle, target rate 0) is held for ``episode_length`` steps and
    the next goal starts from wherever the boom is. Observations are noisy; the
    metrics use the true angle. Steady-state error is the mean absolute error
    over the last ``tail`` fraction of each goal segment.
    """
    goals = np.atleast_1d(np.asarray(goals, dtype=np.float64))
    p = normalizer.p
    if p != 2 or normalizer.q != policy.action_dim:
        raise ValueError(f"policy was trained on {p} states and {normalizer.q} action(s); "
                         f"the boom has 2 states and the policy emits {policy.action_dim} action(s)")
    expected_in = 2 * p if policy.goal_conditioned else p
    if policy.layer_sizes[0] != expected_in:
        raise ValueError(f"policy expects {policy.layer_sizes[0]} inputs, plant provides {expected_in}")
    initial = initial or PlantState(params.angle_min + 0.3, 0.0)
    rng0 = substream(seed, "eval", "init")
    angle = initial.angle + init_spread * rng0.uniform(-1.0, 1.0, n_episodes)
    angle = np.clip(angle, params.angle_min, params.angle_max)
    rate = np.full(n_episodes, initial.rate)
    applied = np.full(n_episodes, initial.applied_action)
    noise_rngs = [substream(seed, "eval", "noise", e) for e in range(n_episodes)]

    T = len(goals) * episode_length
    rec = {k: np.empty((n_episodes, T + 1)) for k in ("angle", "rate", "u", "goal")}
    rec["angle"][:, 0], rec["rate"][:, 0] = angle, rate
    obs = np.stack([_observe(angle[e], rate[e], params, noise_rngs[e]) for e in range(n_episodes)])
    for k in range(T):
        g = goals[k // episode_length]
        s_norm = normalizer.normalize_states(obs)
        g_norm = normalizer.normalize_states(np.tile([g, 0.0], (n_episodes, 1)))
        u = act_numpy(policy, s_norm, g_norm if policy.goal_conditioned else None)[:, 0]
        angle, rate, applied = _advance(angle, rate, applied, u, params)
        obs = np.stack([_observe(angle[e], rate[e], params, noise_rngs[e]) for e in range(n_episodes)])
        rec["u"][:, k], rec["goal"][:, k] = u, g
        rec["angle"][:, k + 1], rec["rate"][:, k + 1] = angle, rate
    rec["u"][:, T], rec["goal"][:, T] = rec["u"][:, T - 1], goals[-1]

    result = EvalResult(times=np.arange(T + 1) * params.dt, angles=rec["angle"], rates=rec["rate"],
                        actions=rec["u"], goals=rec["goal"])
    for e in range(n_episodes):
        for j, g in enumerate(goals):
            lo, hi = j * episode_length, (j + 1) * episode_length
            seg = rec["angle"][e, lo + 1:hi + 1]
            settling, sse, overshoot = _segment_metrics(seg, g, rec["angle"][e, lo], params.dt,
                                                        settle_band, tail)
            result.metrics.append(dict(episode=e, goal_index=j, goal_phi=float(g), settling_time=settling,
                                       steady_state_error=sse, overshoot=overshoot))
    return result


def simulate_open_loop(params: BoomParams, initial: PlantState, actions, rng=None):
    """True states (T+1, 2) for a fixed action sequence."""
    state = initial
    out = [state.as_array()]
    for u in actions:
        state, _ = step(state, float(u), params, rng)
        out.append(state.as_array())
    return np.array(out)


def with_defaults(**overrides) -> BoomParams:
    return replace(BoomParams(), **overrides)
