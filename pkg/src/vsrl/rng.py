"""Deterministic, named random streams.

Every run derives all of its randomness from one 64-bit root seed. Distinct
consumers (action selection, environment transitions, interruption coins,
the Safe-Sarsa bootstrap) draw from independently seeded streams, so forcing
or replaying one of them never perturbs the others. The conditional
independence tests in :mod:`vsrl.interruption` rely on this isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

# Canonical stream labels used by the training loop and the analysis tools.
ACTION = "action"
TRANSITION = "transition"
INTERRUPTION = "interruption"
SAFE_SARSA_BOOTSTRAP = "safe-sarsa-bootstrap"


def stream(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Return the named child generator of ``root_seed``.

    The same ``(root_seed, label, index)`` triple yields the same stream on
    any platform; distinct labels yield statistically independent streams.
    """
    key = zlib.crc32(label.encode("utf8"))
    seq = np.random.SeedSequence(entropy=root_seed, spawn_key=(key, index))
    return np.random.default_rng(seq)


def sample_index(cumulative: np.ndarray, u: float) -> int:
    """Inverse-CDF sample: the smallest index i with ``u < cumulative[i]``.

    ``cumulative`` is the running sum of a probability vector; its last entry
    is 1 up to rounding, and ``u`` is uniform on [0, 1).
    """
    i = int(np.searchsorted(cumulative, u, side="right"))
    return min(i, len(cumulative) - 1)
