"""The Q-map accumulator: observation-action values plus visit bookkeeping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class QTable:
    """Q-values keyed on (observation, action), with per-pair and per-observation
    visit counts. ``obs_counts[o]`` always equals ``visit_counts[o].sum()``."""

    values: np.ndarray                      # (O, A) float64
    visit_counts: np.ndarray = field(default=None)  # (O, A) int64
    obs_counts: np.ndarray = field(default=None)    # (O,) int64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be (observations, actions), got {self.values.shape}")
        if self.visit_counts is None:
            self.visit_counts = np.zeros(self.values.shape, dtype=np.int64)
        if self.obs_counts is None:
            self.obs_counts = self.visit_counts.sum(axis=1)
        if self.visit_counts.shape != self.values.shape:
            raise ValueError("visit_counts shape must match values")
        if self.obs_counts.shape != (self.values.shape[0],):
            raise ValueError("obs_counts must have one entry per observation")
        if not np.isfinite(self.values).all():
            raise ValueError("Q-values must be finite")

    @classmethod
    def zeros(cls, num_observations: int, num_actions: int, fill: float = 0.0) -> "QTable":
        return cls(values=np.full((num_observations, num_actions), fill, dtype=np.float64))

    @property
    def num_observations(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]

    def counts_consistent(self) -> bool:
        return bool(np.array_equal(self.obs_counts, self.visit_counts.sum(axis=1)))

    def copy(self) -> "QTable":
        return QTable(self.values.copy(), self.visit_counts.copy(), self.obs_counts.copy())

    def to_csv(self, path: str | Path) -> None:
        """Write rows (state, action, q_value), floats at round-trip precision."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "action", "q_value"])
            for o in range(self.num_observations):
                for a in range(self.num_actions):
                    writer.writerow([o, a, format(self.values[o, a], ".17g")])

    @classmethod
    def from_csv(cls, path: str | Path) -> "QTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                rows.append((int(rec["state"]), int(rec["action"]), float(rec["q_value"])))
        num_o = max(r[0] for r in rows) + 1
        num_a = max(r[1] for r in rows) + 1
        values = np.zeros((num_o, num_a))
        for o, a, v in rows:
            values[o, a] = v
        return cls(values=values)
