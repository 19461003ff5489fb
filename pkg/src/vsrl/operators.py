"""Backup operators for generalized Bellman fixed points.

Six aggregation operators over a Q-row are provided: ``max``, rank-weighted
averaging, Boltzmann-weighted averaging, mellowmax (log-mean-exp), the hybrid
that puts weight ``T(1)`` on the top rank and mellowmax mass on the rest, and
the order statistic "value at rank i". All but the Boltzmann average are
non-expansions, which is what makes the fixed-point iteration here a
gamma-contraction; an empirical non-expansion checker and a synchronous
fixed-point solver round out the module.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import ConvergenceError, TabularMdp
from .qtable import QTable

KINDS = ("max", "rank_average", "boltzmann", "mellowmax", "rrr_mellowmax", "rank_select")

TIE_TOL = 1e-9


@dataclass(frozen=True)
class ActionRanking:
    """Bijection action -> rank in 1..|A|; rank 1 is the (tie-broken) best action."""

    rank_of: tuple[int, ...]

    def __post_init__(self):
        n = len(self.rank_of)
        if sorted(self.rank_of) != list(range(1, n + 1)):
            raise ValueError(f"ranking must be a bijection onto 1..{n}, got {self.rank_of}")

    @property
    def num_actions(self) -> int:
        return len(self.rank_of)

    def action_at(self, rank: int) -> int:
        return self.rank_of.index(rank)

    def actions_by_rank(self) -> tuple[int, ...]:
        order = sorted(range(len(self.rank_of)), key=lambda a: self.rank_of[a])
        return tuple(order)


def rank_actions(row: np.ndarray, tie_break: str = "index") -> ActionRanking:
    """Rank actions by descending value; ties go to the lower action index."""
    if tie_break != "index":
        raise ValueError(f"unknown tie-break rule {tie_break!r}")
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("row must be a nonempty vector")
    if not np.isfinite(row).all():
        raise ValueError("row must be finite")
    order = np.argsort(-row, kind="stable")
    rank_of = [0] * row.size
    for rank_minus_one, action in enumerate(order):
        rank_of[action] = rank_minus_one + 1
    return ActionRanking(tuple(rank_of))


@dataclass(frozen=True)
class BackupOperatorSpec:
    """Parameter bundle naming one concrete backup operator."""

    kind: str
    rank_weights: tuple[float, ...] | None = None
    beta: float | None = None
    omega: float | None = None
    top_weight: float | None = None
    select_rank: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "rank_average":
            w = self.rank_weights
            if w is None:
                raise ValueError("rank_average needs rank_weights")
            object.__setattr__(self, "rank_weights", tuple(float(x) for x in w))
            w = self.rank_weights
            if any(x < 0 for x in w):
                raise ValueError("rank weights must be nonnegative")
            if any(w[i] < w[i + 1] for i in range(len(w) - 1)):
                raise ValueError("rank weights must be non-increasing")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ValueError(f"rank weights must sum to 1, got {sum(w)!r}")
        if self.kind == "boltzmann":
            if self.beta is None or not math.isfinite(self.beta):
                raise ValueError("boltzmann needs a finite beta")
        if self.kind in ("mellowmax", "rrr_mellowmax"):
            if self.omega is None or not math.isfinite(self.omega) or self.omega == 0.0:
                raise ValueError(f"{self.kind} needs a finite nonzero omega")
        if self.kind == "rrr_mellowmax":
            if self.top_weight is None or not 0.0 <= self.top_weight <= 1.0:
                raise ValueError("rrr_mellowmax needs top_weight in [0, 1]")
        if self.kind == "rank_select":
            if self.select_rank is None or self.select_rank < 1:
                raise ValueError("rank_select needs select_rank >= 1")


# ---------------------------------------------------------------------------
# Scalar backups
# ---------------------------------------------------------------------------

def max_backup(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    return float(row.max())


def rank_average_backup(row, weights, ranking: ActionRanking | None = None) -> float:
    """Sum of weights[k] times the value with rank k+1."""
    row = np.asarray(row, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != row.size:
        raise ValueError(f"need one weight per action, got {weights.size} for {row.size}")
    if ranking is None:
        ranked = -np.sort(-row)
    else:
        if ranking.num_actions != row.size:
            raise ValueError("ranking does not match the row")
        ranked = row[list(ranking.actions_by_rank())]
    return float(ranked @ weights)


def boltzmann_backup(row, beta: float) -> float:
    """Softmax(beta)-weighted average of the row; beta = 0 is the plain mean."""
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    z = beta * row
    z -= z.max()
    w = np.exp(z)
    return float((row * w).sum() / w.sum())


def mellowmax_backup(row, omega: float) -> float:
    """log(mean(exp(omega q)))/omega, evaluated with a max shift.

    omega = 0 is a removable singularity whose limit is the mean; callers that
    want that limit must take the mean themselves.
    """
    if omega == 0.0 or not math.isfinite(omega):
        raise ValueError("omega must be finite and nonzero")
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    z = omega * row
    c = z.max()
    return float((c + math.log(np.exp(z - c).mean())) / omega)


def rank_select_backup(row, select_rank: int, ranking: ActionRanking | None = None) -> float:
    """The value with the requested rank (1 = largest)."""
    row = np.asarray(row, dtype=np.float64)
    if not 1 <= select_rank <= row.size:
        raise ValueError(f"rank {select_rank} out of range 1..{row.size}")
    if ranking is None:
        ranked = -np.sort(-row)
    else:
        ranked = row[list(ranking.actions_by_rank())]
    return float(ranked[select_rank - 1])


def rrr_mellowmax_backup(row, top_weight: float, omega: float,
                         ranking: ActionRanking | None = None) -> float:
    """top_weight * (rank-1 value) + (1 - top_weight) * mellowmax of ranks 2..|A|."""
    row = np.asarray(row, dtype=np.float64)
    if row.size < 2:
        raise ValueError("rrr_mellowmax needs at least two actions")
    if not 0.0 <= top_weight <= 1.0:
        raise ValueError("top_weight must lie in [0, 1]")
    if ranking is None:
        ranked = -np.sort(-row)
    else:
        ranked = row[list(ranking.actions_by_rank())]
    tail = ranked[1:]
    return float(top_weight * ranked[0] + (1.0 - top_weight) * mellowmax_backup(tail, omega))


def apply_backup(spec: BackupOperatorSpec, row, ranking: ActionRanking | None = None) -> float:
    """Evaluate the operator named by ``spec`` on one Q-row.

    For rank-based kinds the ranking defaults to the row's own descending
    order, which is the coupled form the fixed-point iteration uses.
    """
    if spec.kind == "max":
        return max_backup(row)
    if spec.kind == "rank_average":
        return rank_average_backup(row, spec.rank_weights, ranking)
    if spec.kind == "boltzmann":
        return boltzmann_backup(row, spec.beta)
    if spec.kind == "mellowmax":
        return mellowmax_backup(row, spec.omega)
    if spec.kind == "rrr_mellowmax":
        return rrr_mellowmax_backup(row, spec.top_weight, spec.omega, ranking)
    if spec.kind == "rank_select":
        return rank_select_backup(row, spec.select_rank, ranking)
    raise ValueError(f"unknown operator kind {spec.kind!r}")


def batched_backup(spec: BackupOperatorSpec, rows: np.ndarray) -> np.ndarray:
    """Vector of backups, one per row of the (N, A) matrix.

    Rankings are recomputed per row; ties contribute equal values either way,
    so sorted values are sufficient for every rank-based kind.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] == 0:
        raise ValueError(f"rows must be (N, A) with A >= 1, got {rows.shape}")
    if spec.kind == "max":
        return rows.max(axis=1)
    if spec.kind == "rank_average":
        weights = np.asarray(spec.rank_weights)
        if weights.size != rows.shape[1]:
            raise ValueError("need one weight per action")
        ranked = -np.sort(-rows, axis=1)
        return ranked @ weights
    if spec.kind == "boltzmann":
        z = spec.beta * rows
        z -= z.max(axis=1, keepdims=True)
        w = np.exp(z)
        return (rows * w).sum(axis=1) / w.sum(axis=1)
    if spec.kind == "mellowmax":
        return _batched_mellowmax(rows, spec.omega)
    if spec.kind == "rrr_mellowmax":
        if rows.shape[1] < 2:
            raise ValueError("rrr_mellowmax needs at least two actions")
        ranked = -np.sort(-rows, axis=1)
        tail_mm = _batched_mellowmax(ranked[:, 1:], spec.omega)
        return spec.top_weight * ranked[:, 0] + (1.0 - spec.top_weight) * tail_mm
    if spec.kind == "rank_select":
        if not 1 <= spec.select_rank <= rows.shape[1]:
            raise ValueError("select_rank out of range")
        ranked = -np.sort(-rows, axis=1)
        return ranked[:, spec.select_rank - 1]
    raise ValueError(f"unknown operator kind {spec.kind!r}")


def _batched_mellowmax(rows: np.ndarray, omega: float) -> np.ndarray:
    z = omega * rows
    c = z.max(axis=1)
    return (c + np.log(np.exp(z - c[:, None]).mean(axis=1))) / omega


# ---------------------------------------------------------------------------
# Non-expansion checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonExpansionVerdict:
    """Worst witness found for |B(Q') - B(Q)| <= max_a |Q'(a) - Q(a)|."""

    holds: bool
    gap: float
    witness_q: tuple[float, ...]
    witness_q_prime: tuple[float, ...]
    trials: int

    def __str__(self) -> str:
        if self.holds:
            return f"non-expansion holds over {self.trials} trials (worst gap {self.gap:.3g})"
        return (
            f"non-expansion violated: gap {self.gap:.6g} at Q={list(self.witness_q)} "
            f"Q'={list(self.witness_q_prime)}"
        )


def _pair_gap(spec: BackupOperatorSpec, q: np.ndarray, qp: np.ndarray) -> float:
    diff = float(np.abs(qp - q).max())
    return abs(apply_backup(spec, qp) - apply_backup(spec, q)) - diff


def check_non_expansion(
    spec: BackupOperatorSpec,
    num_actions: int,
    num_random_trials: int = 10_000,
    search_budget: int = 2_000,
    rng: np.random.Generator | None = None,
    tol: float = 1e-12,
) -> NonExpansionVerdict:
    """Random row pairs plus a coordinate-perturbation hill climb on the violation.

    The random phase mixes independent pairs with single-coordinate bumps at
    several scales (expansions of the Boltzmann average only show up when the
    row magnitudes are matched to 1/beta). The hill climb then refines the
    worst candidate.
    """
    if num_random_trials < 1:
        raise ValueError("need at least one random trial")
    if rng is None:
        rng = np.random.default_rng(0)
    scales = (0.3, 1.0, 3.0, 10.0)
    best_gap = -math.inf
    best_pair = None
    per_scale = max(1, num_random_trials // (2 * len(scales)))
    trials = 0
    for scale in scales:
        # Independent pairs.
        q = rng.normal(0.0, scale, size=(per_scale, num_actions))
        qp = rng.normal(0.0, scale, size=(per_scale, num_actions))
        gaps = np.abs(batched_backup(spec, qp) - batched_backup(spec, q)) - np.abs(qp - q).max(axis=1)
        i = int(gaps.argmax())
        if gaps[i] > best_gap:
            best_gap, best_pair = float(gaps[i]), (q[i].copy(), qp[i].copy())
        trials += per_scale
        # Coordinate bumps.
        q = rng.normal(0.0, scale, size=(per_scale, num_actions))
        qp = q.copy()
        cols = rng.integers(0, num_actions, size=per_scale)
        bumps = rng.normal(0.0, scale, size=per_scale)
        qp[np.arange(per_scale), cols] += bumps
        gaps = np.abs(batched_backup(spec, qp) - batched_backup(spec, q)) - np.abs(qp - q).max(axis=1)
        i = int(gaps.argmax())
        if gaps[i] > best_gap:
            best_gap, best_pair = float(gaps[i]), (q[i].copy(), qp[i].copy())
        trials += per_scale

    q, qp = best_pair
    step = 0.5
    evals = 0
    while evals < search_budget and step > 1e-9:
        improved = False
        for arr in (q, qp):
            for j in range(num_actions):
                for delta in (step, -step):
                    if evals >= search_budget:
                        break
                    arr[j] += delta
                    gap = _pair_gap(spec, q, qp)
                    evals += 1
                    if gap > best_gap:
                        best_gap = gap
                        improved = True
                    else:
                        arr[j] -= delta
        if not improved:
            step *= 0.5

    return NonExpansionVerdict(
        holds=best_gap <= tol,
        gap=best_gap,
        witness_q=tuple(float(x) for x in q),
        witness_q_prime=tuple(float(x) for x in qp),
        trials=trials + evals,
    )


# ---------------------------------------------------------------------------
# Generalized value iteration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointResult:
    """Solved Q with a certified sup-norm error bound and the residual trace."""

    q: QTable
    iterations: int
    residual: float
    error_bound: float
    residuals: tuple[float, ...]
    rank_ties: tuple[int, ...]  # states whose solved row has near-tied ranks


def solve_fixed_point(
    mdp: TabularMdp,
    spec: BackupOperatorSpec,
    tolerance: float = 1e-10,
    max_iters: int = 100_000,
) -> FixedPointResult:
    """Iterate Q <- R(s,a) + gamma * sum_s' P(s'|s,a) B(Q(s',.)) to a fixed point.

    Synchronous sweeps; for rank-based operators the ranking is recomputed from
    the current iterate each sweep, which is the coupled fixed point the
    on-policy algorithms converge to. Stops when the sup-norm change is at most
    ``tolerance``; the returned bound is ``tolerance * gamma / (1 - gamma)``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    gamma = mdp.discount
    r_sa = mdp.expected_reward()
    p = mdp.transition
    q = np.zeros((mdp.num_states, mdp.num_actions))
    residuals = []
    for iteration in range(1, max_iters + 1):
        backups = batched_backup(spec, q)
        q_next = r_sa + gamma * (p @ backups)
        residual = float(np.abs(q_next - q).max())
        residuals.append(residual)
        q = q_next
        if residual <= tolerance:
            ties = tuple(
                s for s in range(mdp.num_states)
                if np.any(np.abs(np.diff(np.sort(q[s]))) <= TIE_TOL)
            ) if mdp.num_actions > 1 else ()
            return FixedPointResult(
                q=QTable(values=q),
                iterations=iteration,
                residual=residual,
                error_bound=tolerance * gamma / (1.0 - gamma) if gamma > 0 else tolerance,
                residuals=tuple(residuals),
                rank_ties=ties,
            )
    raise ConvergenceError(
        f"no fixed point within {max_iters} sweeps (last residual {residuals[-1]:g})",
        residual=residuals[-1],
    )


def write_solver_trace(path: str | Path, result: FixedPointResult) -> None:
    """One JSON line per sweep: {"iteration": k, "residual": r}."""
    with open(path, "w") as fh:
        for k, r in enumerate(result.residuals, start=1):
            fh.write(json.dumps({"iteration": k, "residual": r}) + "\n")
