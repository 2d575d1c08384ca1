"""Feedforward tanh policy with actions bounded to [-1, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import substream

SCHEMES = ("he", "standard_normal")


@dataclass(frozen=True, eq=False)
class MlpPolicy:
    """``layer_sizes`` runs input -> hidden... -> output; ``params`` holds [W0, b0, W1, b1, ...].

    Weights are (fan_in, fan_out) and act on row vectors. When ``goal_conditioned``
    the input is the state followed by the goal.
    """

    layer_sizes: tuple[int, ...]
    params: tuple[np.ndarray, ...]
    goal_conditioned: bool = False
    state_dim: int | None = None

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    @property
    def action_dim(self) -> int:
        return self.layer_sizes[-1]

    def named_params(self) -> dict[str, np.ndarray]:
        names = {}
        for i in range(len(self.layer_sizes) - 1):
            names[f"W{i}"] = self.params[2 * i]
            names[f"b{i}"] = self.params[2 * i + 1]
        return names

    def with_params(self, named: dict[str, np.ndarray]) -> "MlpPolicy":
        flat = []
        for i in range(len(self.layer_sizes) - 1):
            flat += [np.array(named[f"W{i}"]), np.array(named[f"b{i}"])]
        return MlpPolicy(self.layer_sizes, tuple(flat), self.goal_conditioned, self.state_dim)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params])

    def from_flat(self, flat) -> "MlpPolicy":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        out, k = [], 0
        for p in self.params:
            out.append(flat[k:k + p.size].reshape(p.shape).copy())
            k += p.size
        return MlpPolicy(self.layer_sizes, tuple(out), self.goal_conditioned, self.state_dim)


def parameter_count(layer_sizes) -> int:
    return int(sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])))


def init_params(layer_sizes, seed: int = 0, scheme: str = "he", *, goal_conditioned: bool = False,
                state_dim: int | None = None) -> MlpPolicy:
    """He (weights ~ N(0, 2/fan_in), zero biases) or all-N(0, 1) initialization."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output size")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive: {sizes}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {SCHEMES}")
    if goal_conditioned and state_dim is None:
        raise ValueError("goal-conditioned policies need state_dim")
    rng = substream(seed, "policy-init")
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if scheme == "he":
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        else:
            params.append(rng.standard_normal((fan_in, fan_out)))
            params.append(rng.standard_normal(fan_out))
    return MlpPolicy(sizes, tuple(params), goal_conditioned, state_dim)


def make_policy(state_dim: int, action_dim: int, hidden=(8, 8), *, goal_conditioned=False,
                seed: int = 0, scheme: str = "he") -> MlpPolicy:
    n_in = 2 * state_dim if goal_conditioned else state_dim
    return init_params((n_in, *hidden, action_dim), seed, scheme,
                       goal_conditioned=goal_conditioned, state_dim=state_dim)


def act(policy: MlpPolicy, S, G=None, params: dict | None = None) -> ad.Node:
    """Actions (b x q) for states ``S`` (b x p) and goals ``G``, recorded on the active tape.

    ``params`` may map parameter names to tape nodes; otherwise the policy's own
    arrays enter as constants.
    """
    S = ad._as_node(S)
    if params is None:
        params = policy.named_params()
    if policy.goal_conditioned:
        if G is None:
            raise ValueError("goal-conditioned policy needs goals")
        G = ad._as_node(G)
        if G.shape != S.shape:
            raise ad.ShapeError("act", S.shape, G.shape)
        h = ad.concat([S, G], axis=1)
    else:
        h = S
    if h.ndim != 2 or h.shape[1] != policy.layer_sizes[0]:
        raise ad.ShapeError("act", h.shape, (h.shape[0] if h.ndim else 0, policy.layer_sizes[0]))
    for i in range(len(policy.layer_sizes) - 1):
        # broadcast-and-sum rather than BLAS: every row adds its terms in the same order
        # whatever the batch size, so a batched rollout row equals its b = 1 rollout bit for bit
        prod = ad.reshape(h, (h.shape[0], h.shape[1], 1)) * params[f"W{i}"]
        h = ad.tanh(ad.sum(prod, axis=1) + params[f"b{i}"])
    return h


def act_numpy(policy: MlpPolicy, S, G=None) -> np.ndarray:
    """Actions as a plain array, for closed-loop use outside training."""
    with ad.Tape():
        return act(policy, np.atleast_2d(S), None if G is None else np.atleast_2d(G)).value


def fix_goal(policy: MlpPolicy, goal) -> MlpPolicy:
    """State-only policy equal to ``policy`` with its goal input pinned to ``goal``."""
    if not policy.goal_conditioned:
        raise ValueError("policy is not goal-conditioned")
    p = policy.state_dim
    W0, b0 = policy.params[0], policy.params[1]
    folded = (W0[:p].copy(), b0 + np.asarray(goal) @ W0[p:]) + tuple(np.array(x) for x in policy.params[2:])
    sizes = (p,) + policy.layer_sizes[1:]
    return MlpPolicy(sizes, folded, False, p)
