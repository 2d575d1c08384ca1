"""Labeled, counter-based random substreams.

Every draw in the package comes from a Philox generator keyed by
``(master seed, label, *indices)``. Two calls with the same key always
produce the same stream, no matter what else was drawn in between, which
is what lets a batch rollout and a row-by-row rollout see identical noise.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_word(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("substream indices must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def substream(seed: int, *labels: str | int) -> np.random.Generator:
    """Independent generator for ``seed`` and the given label path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_word(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels: str | int) -> int:
    """A 63-bit child seed, for handing to modules that take a plain integer."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_word(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rollout_noise(seed: int, iteration: int, rows, horizon: int, n_out: int) -> np.ndarray:
    """Standard-normal draws of shape (horizon, len(rows), n_out).

    Row ``r`` always gets the stream keyed by ``(seed, "eps", iteration, r)``, consumed
    step-major, so row draws do not depend on which other rows are in the batch.
    """
    rows = list(rows)
    eps = np.empty((horizon, len(rows), n_out))
    for j, r in enumerate(rows):
        eps[:, j, :] = substream(seed, "eps", iteration, r).standard_normal((horizon, n_out))
    return eps
