"""Transition logs, input normalization and GP training pairs."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8
GAP_FACTOR = 1.5
DT_TOLERANCE = 0.01


class CsvFormatError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Logged trajectory plus the (state, action, next state) pairs cut from it.

    ``times``, ``log_states`` and ``log_actions`` keep the original rows so the
    log can be written back out; ``states``/``actions``/``next_states`` hold the
    n transitions that survive the gap rule.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dt: float
    times: np.ndarray
    log_states: np.ndarray
    log_actions: np.ndarray

    def __post_init__(self):
        n = self.states.shape[0]
        if self.actions.shape[0] != n or self.next_states.shape[0] != n:
            raise ValueError("states, actions and next_states need the same row count")
        if n < 2:
            raise ValueError(f"need at least 2 transitions, got {n}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def p(self) -> int:
        return self.states.shape[1]

    @property
    def q(self) -> int:
        return self.actions.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.states, self.actions])

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        s = np.vstack([self.states, self.next_states])
        return s.min(axis=0), s.max(axis=0)

    def subset(self, idx) -> "TransitionDataset":
        """Transitions at ``idx``; the log is kept whole."""
        idx = np.asarray(idx)
        return TransitionDataset(self.states[idx], self.actions[idx], self.next_states[idx],
                                 self.dt, self.times, self.log_states, self.log_actions)

    @classmethod
    def from_log(cls, times, states, actions, dt: float | None = None, *, path="<log>",
                 first_line: int = 2) -> "TransitionDataset":
        """Pair consecutive rows into transitions, skipping recording gaps."""
        t = np.asarray(times, dtype=np.float64)
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        u = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if len(t) < 3:
            raise CsvFormatError(path, None, f"need at least 3 rows, got {len(t)}")
        steps = np.diff(t)
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise CsvFormatError(path, first_line + int(bad[0]) + 1, "time column is not increasing")
        infer = dt is None
        if infer:
            dt = float(np.median(steps))
        pair = np.abs(steps - dt) <= DT_TOLERANCE * dt
        gap = steps > GAP_FACTOR * dt
        odd = np.flatnonzero(~pair & ~gap)
        if odd.size:
            k = int(odd[0])
            raise CsvFormatError(path, first_line + k + 1,
                                 f"inconsistent sampling interval {steps[k]:g} (dt {dt:g})")
        k = np.flatnonzero(pair)
        if infer:
            # span over step count per unbroken run; single differences carry rounding of the logged times
            starts = np.flatnonzero(np.diff(np.concatenate([[0], pair.astype(int)])) == 1)
            ends = np.flatnonzero(np.diff(np.concatenate([pair.astype(int), [0]])) == -1) + 1
            dt = float(np.sum(t[ends] - t[starts]) / k.size)
        return cls(x[k], u[k], x[k + 1], float(dt), t, x, u)


def _header_dims(path, header: list[str]) -> tuple[int, int]:
    if not header or header[0].strip() != "t":
        raise CsvFormatError(path, 1, "header must start with 't'")
    names = [h.strip() for h in header[1:]]
    xs = [h for h in names if re.fullmatch(r"x\d+", h)]
    us = [h for h in names if re.fullmatch(r"u\d+", h)]
    p, q = len(xs), len(us)
    expected = [f"x{i}" for i in range(1, p + 1)] + [f"u{i}" for i in range(1, q + 1)]
    if p == 0 or q == 0 or names != expected:
        missing = sorted(set(expected) - set(names)) or names
        raise CsvFormatError(path, 1, f"expected columns t,x1..xp,u1..uq; problem with {missing}")
    return p, q


def load_csv(path) -> TransitionDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(path, None, "empty file")
    p, q = _header_dims(path, rows[0])
    width = 1 + p + q
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise CsvFormatError(path, lineno, f"expected {width} cells, got {len(row)}")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            raise CsvFormatError(path, lineno, "non-numeric cell") from None
    if len(values) < 3:
        raise CsvFormatError(path, None, f"need at least 3 rows, got {len(values)}")
    table = np.array(values)
    if not np.all(np.isfinite(table)):
        line = 2 + int(np.flatnonzero(~np.all(np.isfinite(table), axis=1))[0])
        raise CsvFormatError(path, line, "non-finite cell")
    return TransitionDataset.from_log(table[:, 0], table[:, 1:1 + p], table[:, 1 + p:], path=path)


def write_csv(path, dataset: TransitionDataset) -> None:
    """Write the dataset's log in the ``t,x1..xp,u1..uq`` format (repr floats, exact round trip)."""
    p, q = dataset.log_states.shape[1], dataset.log_actions.shape[1]
    header = ["t"] + [f"x{i}" for i in range(1, p + 1)] + [f"u{i}" for i in range(1, q + 1)]
    lines = [",".join(header)]
    for t, x, u in zip(dataset.times, dataset.log_states, dataset.log_actions):
        lines.append(",".join(repr(float(v)) for v in (t, *x, *u)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-column z-scoring of concatenated (state, action) inputs."""

    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray = field(default=None)
    p: int = 0

    def __post_init__(self):
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(self.mean.shape, dtype=bool))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def q(self) -> int:
        return self.d - self.p

    def normalize(self, z):
        return (np.asarray(z) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def normalize_states(self, s):
        return (np.asarray(s) - self.mean[: self.p]) / self.std[: self.p]

    def denormalize_states(self, s):
        return np.asarray(s) * self.std[: self.p] + self.mean[: self.p]

    @property
    def state_mean(self):
        return self.mean[: self.p]

    @property
    def state_std(self):
        return self.std[: self.p]

    @property
    def action_mean(self):
        return self.mean[self.p:]

    @property
    def action_std(self):
        return self.std[self.p:]


def _clamped_std(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    std = z.std(axis=0)
    flagged = std < STD_FLOOR
    return np.where(flagged, 1.0, std), flagged


def fit_normalizer(dataset: TransitionDataset) -> Normalizer:
    """Population mean/std of the transition inputs; near-constant columns get std 1 and a flag."""
    z = dataset.inputs
    std, flagged = _clamped_std(z)
    return Normalizer(z.mean(axis=0), std, flagged, dataset.p)


@dataclass(frozen=True, eq=False)
class TrainingPairs:
    inputs: np.ndarray
    targets: np.ndarray
    target_scale: np.ndarray
    normalizer: Normalizer

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "TrainingPairs":
        return TrainingPairs(self.inputs[idx], self.targets[idx], self.target_scale, self.normalizer)


def build_training_pairs(dataset: TransitionDataset, normalizer: Normalizer,
                         target_scale: np.ndarray | None = None) -> TrainingPairs:
    """Normalized inputs and state-difference targets scaled (not centred) by their std.

    Pass ``target_scale`` to reuse scales from another split.
    """
    if normalizer.d != dataset.p + dataset.q:
        raise ValueError(f"normalizer has {normalizer.d} columns, dataset has {dataset.p + dataset.q}")
    deltas = dataset.next_states - dataset.states
    if target_scale is None:
        target_scale, _ = _clamped_std(deltas)
    return TrainingPairs(normalizer.normalize(dataset.inputs), deltas / target_scale,
                         np.asarray(target_scale, dtype=np.float64), normalizer)
