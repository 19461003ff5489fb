"""Exploration strategies as action distributions.

Five strategies are provided, each parameterized by a visit-count-indexed
schedule with a declared limit: epsilon-greedy, restricted rank-based
randomised (RRR), Boltzmann, mellowmax, and the RRR-mellowmax hybrid (top
rank with fixed weight, mellowmax mass over the remaining ranks). The module
also computes the generalised exploration parameter psi (one minus the
largest weight the strategy's operator puts on any single action) and
validates the non-greedy-in-the-limit-with-infinite-exploration requirements
at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .operators import (
    ActionRanking,
    BackupOperatorSpec,
    check_non_expansion,
    mellowmax_backup,
    rank_actions,
)

KINDS = ("eps_greedy", "rrr", "boltzmann", "mellowmax", "rrr_mellowmax")

DISTRIBUTION_TOL = 1e-12


def validate_distribution(probs: np.ndarray, tol: float = DISTRIBUTION_TOL) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(probs < -tol):
        raise ValueError("distribution has negative entries")
    if abs(probs.sum() - 1.0) > max(tol, 1e-12):
        raise ValueError(f"distribution sums to {probs.sum()!r}, not 1")
    return probs


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def eq3_tail_weight(t_inf_k: float, t_first_k: float, n: int) -> float:
    """Tail-rank weight (1 - T_inf) * T_first / sqrt(n) + T_inf at visit n."""
    return ((1.0 - t_inf_k) * t_first_k) / math.sqrt(n) + t_inf_k


def eq10_epsilon(c: float, eps_inf: float, n: int) -> float:
    """Epsilon schedule (1 - eps_inf) * c / sqrt(n) + eps_inf at visit n."""
    return ((1.0 - eps_inf) * c) / math.sqrt(n) + eps_inf


@dataclass(frozen=True)
class ParamSchedule:
    """Scalar schedule over per-observation visit counts n >= 1.

    Families: ``constant`` (always ``limit``), ``sqrt`` (``limit + delta/sqrt(n)``),
    ``linear_growth`` (``rate * n``) and ``sqrt_growth`` (``rate * sqrt(n)``), the
    growth families having an infinite declared limit.
    """

    family: str
    limit: float = 0.0
    delta: float = 0.0
    rate: float = 0.0

    def __post_init__(self):
        if self.family not in ("constant", "sqrt", "linear_growth", "sqrt_growth"):
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.family in ("linear_growth", "sqrt_growth"):
            object.__setattr__(self, "limit", math.inf if self.rate > 0 else -math.inf)

    def value(self, n: int) -> float:
        if n < 1:
            raise ValueError("visit counts start at 1")
        if self.family == "constant":
            return self.limit
        if self.family == "sqrt":
            return self.limit + self.delta / math.sqrt(n)
        if self.family == "linear_growth":
            return self.rate * n
        return self.rate * math.sqrt(n)

    def values(self, ns: np.ndarray) -> np.ndarray:
        ns = np.asarray(ns, dtype=np.float64)
        if self.family == "constant":
            return np.full(ns.shape, self.limit)
        if self.family == "sqrt":
            return self.limit + self.delta / np.sqrt(ns)
        if self.family == "linear_growth":
            return self.rate * ns
        return self.rate * np.sqrt(ns)


def constant_schedule(value: float) -> ParamSchedule:
    return ParamSchedule(family="constant", limit=value)


def eps_sqrt_schedule(c: float, eps_inf: float) -> ParamSchedule:
    """The interruptible-exploration epsilon schedule as a ParamSchedule."""
    if not (0.0 <= c <= 1.0 and 0.0 <= eps_inf <= 1.0):
        raise ValueError("c and eps_inf must lie in [0, 1]")
    if c == 0.0 and eps_inf == 0.0:
        raise ValueError("c may be 0 only when eps_inf > 0")
    return ParamSchedule(family="sqrt", limit=eps_inf, delta=(1.0 - eps_inf) * c)


@dataclass(frozen=True)
class RankWeightSchedule:
    """Per-rank execution weights T_n(k) with declared limits ``t_inf``.

    The ``eq3_sqrt`` family decays each tail rank toward its limit like
    1/sqrt(n) from the first-visit values ``t_first`` and gives rank 1 the
    complement; ``constant`` always returns ``t_inf``.
    """

    t_inf: tuple[float, ...]
    t_first: tuple[float, ...] | None = None
    family: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "t_inf", tuple(float(x) for x in self.t_inf))
        if self.t_first is not None:
            object.__setattr__(self, "t_first", tuple(float(x) for x in self.t_first))
        w = self.t_inf
        if len(w) < 1:
            raise ValueError("need at least one rank weight")
        if any(x < 0 for x in w):
            raise ValueError("limit weights must be nonnegative")
        if any(w[i] < w[i + 1] for i in range(len(w) - 1)):
            raise ValueError("limit weights must be non-increasing over ranks")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"limit weights must sum to 1, got {sum(w)!r}")
        if self.family == "constant":
            return
        if self.family != "eq3_sqrt":
            raise ValueError(f"unknown rank-weight family {self.family!r}")
        if self.t_first is None or len(self.t_first) != len(w):
            raise ValueError("eq3_sqrt needs first-visit values for every rank")
        if any(x <= 0 for x in self.t_first[1:]):
            raise ValueError("first-visit tail weights must be positive")
        for n in (1, 2, 3, 10, 100, 10_000, 1_000_000):
            probe = self.weights(n)
            if probe[0] < -1e-12:
                raise ValueError(f"rank-1 complement is negative at n={n}")
            if any(probe[i] < probe[i + 1] - 1e-12 for i in range(len(probe) - 1)):
                raise ValueError(f"weights are not non-increasing at n={n}: {probe}")

    @property
    def num_actions(self) -> int:
        return len(self.t_inf)

    def weights(self, n: int) -> tuple[float, ...]:
        if n < 1:
            raise ValueError("visit counts start at 1")
        if self.family == "constant":
            return self.t_inf
        tail = [eq3_tail_weight(self.t_inf[k], self.t_first[k], n)
                for k in range(1, len(self.t_inf))]
        return (1.0 - sum(tail), *tail)

    def tail_weight_series(self, ns: np.ndarray) -> np.ndarray:
        """Tail weights, shape (len(ns), |A| - 1), vectorized over visit counts."""
        ns = np.asarray(ns, dtype=np.float64)
        if self.family == "constant":
            return np.tile(np.asarray(self.t_inf[1:]), (ns.size, 1))
        t_inf = np.asarray(self.t_inf[1:])
        t_first = np.asarray(self.t_first[1:])
        return ((1.0 - t_inf) * t_first) / np.sqrt(ns)[:, None] + t_inf


# ---------------------------------------------------------------------------
# The strategy bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExplorationStrategy:
    """One of the five strategies plus its schedules and declared limits."""

    kind: str
    num_actions: int
    eps: ParamSchedule | None = None
    rank_weights: RankWeightSchedule | None = None
    beta: ParamSchedule | None = None
    omega: ParamSchedule | None = None
    top_weight: ParamSchedule | None = None
    tie_break: str = "index"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.num_actions < 1:
            raise ValueError("need at least one action")
        if self.tie_break != "index":
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")
        need = {
            "eps_greedy": ("eps",),
            "rrr": ("rank_weights",),
            "boltzmann": ("beta",),
            "mellowmax": ("omega",),
            "rrr_mellowmax": ("top_weight", "omega"),
        }[self.kind]
        for name in need:
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} strategy needs a {name} schedule")
        if self.kind == "rrr" and self.rank_weights.num_actions != self.num_actions:
            raise ValueError("rank weight schedule does not match the action count")
        if self.kind == "rrr_mellowmax" and self.num_actions < 2:
            raise ValueError("rrr_mellowmax needs at least two actions")
        if self.eps is not None:
            for n in (1, 10, 1_000_000):
                v = self.eps.value(n)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"epsilon schedule leaves [0, 1] at n={n}: {v}")
        if self.top_weight is not None:
            for n in (1, 10, 1_000_000):
                v = self.top_weight.value(n)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"top-weight schedule leaves [0, 1] at n={n}: {v}")

    # -- distributions ------------------------------------------------------

    def distribution(self, row: np.ndarray, visit_count: int) -> np.ndarray:
        return policy_distribution(self, row, visit_count)

    def min_action_probability(self, row: np.ndarray, visit_count: int) -> float:
        return float(self.distribution(row, visit_count).min())

    # -- generalized exploration parameter ----------------------------------

    def psi(self, n: int) -> float:
        """psi at visit count n, from the operator applied to indicator rows."""
        a = self.num_actions
        if self.kind == "eps_greedy":
            e = self.eps.value(n)
            return e - e / a
        if self.kind == "rrr":
            return 1.0 - self.rank_weights.weights(n)[0]
        if self.kind == "rrr_mellowmax":
            return 1.0 - self.top_weight.value(n)
        if self.kind == "boltzmann":
            return _psi_boltzmann(self.beta.value(n), a)
        return _psi_mellowmax(self.omega.value(n), a)

    def psi_limit(self) -> float:
        a = self.num_actions
        if self.kind == "eps_greedy":
            e = self.eps.limit
            return e - e / a
        if self.kind == "rrr":
            return 1.0 - self.t_inf_weights()[0]
        if self.kind == "rrr_mellowmax":
            return 1.0 - self.top_weight.limit
        if self.kind == "boltzmann":
            return _psi_boltzmann(self.beta.limit, a)
        return _psi_mellowmax(self.omega.limit, a)

    def t_inf_weights(self) -> tuple[float, ...]:
        assert self.rank_weights is not None
        return self.rank_weights.t_inf

    # -- limiting operator ---------------------------------------------------

    def limit_operator_spec(self) -> BackupOperatorSpec:
        """The operator the strategy's backups converge to."""
        a = self.num_actions
        if self.kind == "eps_greedy":
            e = self.eps.limit
            weights = [1.0 - e + e / a] + [e / a] * (a - 1)
            return BackupOperatorSpec(kind="rank_average", rank_weights=tuple(weights))
        if self.kind == "rrr":
            return BackupOperatorSpec(kind="rank_average", rank_weights=self.t_inf_weights())
        if self.kind == "boltzmann":
            if math.isinf(self.beta.limit):
                return BackupOperatorSpec(kind="max")
            return BackupOperatorSpec(kind="boltzmann", beta=self.beta.limit)
        if self.kind == "mellowmax":
            if math.isinf(self.omega.limit):
                return BackupOperatorSpec(kind="max")
            return BackupOperatorSpec(kind="mellowmax", omega=self.omega.limit)
        return BackupOperatorSpec(
            kind="rrr_mellowmax", top_weight=self.top_weight.limit, omega=self.omega.limit
        )

    def live_operator_spec(self, n: int) -> BackupOperatorSpec:
        """The operator at visit count n (the time-dependent backup)."""
        a = self.num_actions
        if self.kind == "eps_greedy":
            e = self.eps.value(n)
            weights = [1.0 - e + e / a] + [e / a] * (a - 1)
            return BackupOperatorSpec(kind="rank_average", rank_weights=tuple(weights))
        if self.kind == "rrr":
            return BackupOperatorSpec(kind="rank_average", rank_weights=self.rank_weights.weights(n))
        if self.kind == "boltzmann":
            return BackupOperatorSpec(kind="boltzmann", beta=self.beta.value(n))
        if self.kind == "mellowmax":
            return BackupOperatorSpec(kind="mellowmax", omega=self.omega.value(n))
        return BackupOperatorSpec(
            kind="rrr_mellowmax", top_weight=self.top_weight.value(n), omega=self.omega.value(n)
        )


def _psi_boltzmann(beta: float, num_actions: int) -> float:
    # Weight on the indicator action: 1 / (1 + (|A|-1) exp(-beta)), stable both ways.
    if math.isinf(beta):
        return 0.0 if beta > 0 else 1.0
    expo = -beta
    if expo > 700:
        return 1.0
    return 1.0 - 1.0 / (1.0 + (num_actions - 1) * math.exp(expo))


def _psi_mellowmax(omega: float, num_actions: int) -> float:
    # One minus the log-mean-exp of an indicator row.
    if math.isinf(omega):
        return 0.0 if omega > 0 else 1.0
    a = num_actions
    if omega > 0:
        mm = (omega + math.log1p((a - 1) * math.exp(-omega)) - math.log(a)) / omega
    else:
        mm = math.log((math.exp(omega) + a - 1) / a) / omega
    return 1.0 - mm


# ---------------------------------------------------------------------------
# Convenience constructors
# ---------------------------------------------------------------------------

def eps_greedy_strategy(num_actions: int, eps: ParamSchedule | float) -> ExplorationStrategy:
    if isinstance(eps, (int, float)):
        eps = constant_schedule(float(eps))
    return ExplorationStrategy(kind="eps_greedy", num_actions=num_actions, eps=eps)


def rrr_strategy(num_actions: int, t_inf, t_first=None, family: str | None = None) -> ExplorationStrategy:
    if family is None:
        family = "constant" if t_first is None else "eq3_sqrt"
    schedule = RankWeightSchedule(t_inf=tuple(t_inf), t_first=None if t_first is None else tuple(t_first), family=family)
    return ExplorationStrategy(kind="rrr", num_actions=num_actions, rank_weights=schedule)


def boltzmann_strategy(num_actions: int, beta: ParamSchedule | float) -> ExplorationStrategy:
    if isinstance(beta, (int, float)):
        beta = constant_schedule(float(beta))
    return ExplorationStrategy(kind="boltzmann", num_actions=num_actions, beta=beta)


def mellowmax_strategy(num_actions: int, omega: ParamSchedule | float) -> ExplorationStrategy:
    if isinstance(omega, (int, float)):
        omega = constant_schedule(float(omega))
    return ExplorationStrategy(kind="mellowmax", num_actions=num_actions, omega=omega)


def rrr_mellowmax_strategy(
    num_actions: int,
    top_weight: ParamSchedule | float,
    omega: ParamSchedule | float,
) -> ExplorationStrategy:
    if isinstance(top_weight, (int, float)):
        top_weight = constant_schedule(float(top_weight))
    if isinstance(omega, (int, float)):
        omega = constant_schedule(float(omega))
    return ExplorationStrategy(
        kind="rrr_mellowmax", num_actions=num_actions, top_weight=top_weight, omega=omega
    )


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

def _softmax(scaled: np.ndarray) -> np.ndarray:
    z = scaled - scaled.max()
    w = np.exp(z)
    return w / w.sum()


def policy_distribution(strategy: ExplorationStrategy, row, visit_count: int) -> np.ndarray:
    """The action distribution the strategy plays on ``row`` at visit ``visit_count``."""
    if visit_count < 0:
        raise ValueError("visit_count must be nonnegative")
    n = max(1, visit_count)
    row = np.asarray(row, dtype=np.float64)
    a = strategy.num_actions
    if row.shape != (a,):
        raise ValueError(f"row has shape {row.shape}, expected ({a},)")
    kind = strategy.kind
    if kind == "eps_greedy":
        e = strategy.eps.value(n)
        probs = np.full(a, e / a)
        probs[int(np.argmax(row))] += 1.0 - e
        return probs
    if kind == "rrr":
        weights = strategy.rank_weights.weights(n)
        order = np.argsort(-row, kind="stable")
        probs = np.empty(a)
        probs[order] = weights
        return probs
    if kind == "boltzmann":
        return _softmax(strategy.beta.value(n) * row)
    if kind == "mellowmax":
        beta = mellowmax_beta(row, strategy.omega.value(n))
        return _softmax(beta * row)
    # rrr_mellowmax: top rank gets T(1); the rest is Boltzmann mass over the
    # remaining ranks at inverse temperature omega itself. The solved
    # max-entropy temperature would reproduce the tail's log-mean-exp as its
    # mean, but that forces mass ~ 1/gap on a far-below outlier; weighting by
    # omega directly keeps catastrophic actions exponentially unlikely, which
    # is the point of the hybrid.
    t1 = strategy.top_weight.value(n)
    omega = strategy.omega.value(n)
    order = np.argsort(-row, kind="stable")
    probs = np.zeros(a)
    probs[order[0]] = t1
    tail_actions = order[1:]
    tail = row[tail_actions]
    probs[tail_actions] = (1.0 - t1) * _softmax(omega * tail)
    return probs


def mellowmax_beta(row, omega: float, residual_tol: float = 1e-10) -> float:
    """The inverse temperature whose Boltzmann average of ``row`` equals the
    row's mellowmax.

    The defining residual sum((q - mm) exp(beta (q - mm))) is strictly
    increasing in beta, so the unique root is found by bracket expansion and
    bisection (with Newton steps inside the bracket when they help). A
    constant row returns 0 by convention: every beta solves the equation.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty row")
    if float(row.max() - row.min()) <= 1e-15:
        return 0.0
    diffs = row - mellowmax_backup(row, omega)

    def residual(beta: float) -> float:
        z = beta * diffs
        c = z.max()
        # Positive rescaling by exp(-c) keeps the sign and avoids overflow.
        return float((diffs * np.exp(z - c)).sum())

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if residual(lo) < 0:
            break
        lo *= 2.0
    for _ in range(200):
        if residual(hi) > 0:
            break
        hi *= 2.0
    beta = 0.5 * (lo + hi)
    for _ in range(200):
        r = residual(beta)
        if abs(r) <= residual_tol and (hi - lo) <= 1e-12 * max(1.0, abs(beta)):
            break
        if r > 0:
            hi = beta
        else:
            lo = beta
        # Try a Newton step; fall back to the midpoint when it leaves the bracket.
        z = beta * diffs
        c = z.max()
        slope = float((diffs * diffs * np.exp(z - c)).sum())
        shifted_r = float((diffs * np.exp(z - c)).sum())
        newton = beta - shifted_r / slope if slope > 0 else math.inf
        beta = newton if lo < newton < hi else 0.5 * (lo + hi)
    return float(beta)


# ---------------------------------------------------------------------------
# Generalized exploration parameter (module-level forms)
# ---------------------------------------------------------------------------

def generalized_exploration_parameter(
    strategy: ExplorationStrategy,
    n: int,
    rows: np.ndarray | None = None,
) -> float:
    """psi_n: one minus the largest operator weight any single action receives.

    The closed forms come from applying the strategy's operator to indicator
    Q-rows and do not depend on the learned values. When ``rows`` is given,
    the policy-level analogue (one minus the largest action probability the
    live policy assigns anywhere on those rows) is returned instead; the two
    agree for the rank-based strategies.
    """
    if rows is None:
        return strategy.psi(n)
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    best = max(float(policy_distribution(strategy, r, n).max()) for r in rows)
    return 1.0 - best


# ---------------------------------------------------------------------------
# Divergence evidence and NGLIE validation
# ---------------------------------------------------------------------------

def min_prob_series(strategy: ExplorationStrategy, horizon: int, probe_row=None) -> np.ndarray:
    """Per-visit minimum action probability for n = 1..horizon.

    Rank-based families are closed-form. Boltzmann evaluates its softmax on
    the probe row vectorized; mellowmax-based families reuse a single root
    solve per distinct omega value (schedules here either hold omega constant
    or converge, so the probe-row temperature is cached).
    """
    ns = np.arange(1, horizon + 1, dtype=np.float64)
    a = strategy.num_actions
    if probe_row is None:
        probe_row = np.arange(a, 0.0, -1.0)  # strictly ordered representative row
    probe_row = np.asarray(probe_row, dtype=np.float64)
    kind = strategy.kind
    if kind == "eps_greedy":
        return strategy.eps.values(ns) / a
    if kind == "rrr":
        tail = strategy.rank_weights.tail_weight_series(ns)
        rank1 = 1.0 - tail.sum(axis=1)
        return np.minimum(rank1, tail.min(axis=1)) if tail.size else rank1
    if kind == "boltzmann":
        betas = strategy.beta.values(ns)
        z = betas[:, None] * probe_row[None, :]
        z -= z.max(axis=1, keepdims=True)
        w = np.exp(z)
        return (w / w.sum(axis=1, keepdims=True)).min(axis=1)
    if kind == "mellowmax":
        omegas = strategy.omega.values(ns)
        return _mellowmax_min_prob(probe_row, omegas)
    t1 = strategy.top_weight.values(ns)
    omegas = strategy.omega.values(ns)
    order = np.argsort(-probe_row, kind="stable")
    tail_row = probe_row[order[1:]]
    if tail_row.size == 0:
        return t1
    z = omegas[:, None] * tail_row[None, :]
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    tail_min = (w / w.sum(axis=1, keepdims=True)).min(axis=1)
    return np.minimum(t1, (1.0 - t1) * tail_min)


def _mellowmax_min_prob(row: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    if row.size == 1:
        return np.ones(omegas.shape)
    out = np.empty(omegas.shape)
    cache: dict[float, float] = {}
    for i, omega in enumerate(omegas):
        key = float(omega)
        if key not in cache:
            beta = mellowmax_beta(row, key)
            cache[key] = float(_softmax(beta * row).min())
        out[i] = cache[key]
    return out


@dataclass(frozen=True)
class GrowthFit:
    model: str  # "log" or "power"
    slope: float
    intercept: float
    r_squared: float


def fit_partial_sum_growth(ns: np.ndarray, sums: np.ndarray) -> tuple[GrowthFit, GrowthFit]:
    """Least-squares fits of partial sums against c*log(n) and c*n^p."""
    ln_n = np.log(ns)

    def linfit(x, y):
        slope, intercept = np.polyfit(x, y, 1)
        pred = slope * x + intercept
        ss_res = float(((y - pred) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
        return float(slope), float(intercept), r2

    s, i, r2 = linfit(ln_n, sums)
    log_fit = GrowthFit("log", s, i, r2)
    positive = sums > 0
    if positive.sum() >= 2:
        s, i, r2 = linfit(ln_n[positive], np.log(sums[positive]))
        power_fit = GrowthFit("power", s, i, r2)
    else:
        power_fit = GrowthFit("power", 0.0, 0.0, 0.0)
    return log_fit, power_fit


def divergence_evidence(series: np.ndarray) -> tuple[bool, str, dict]:
    """Desk-scale evidence that sum(series) diverges.

    Accepts a term with a flat tail (bounded below by a constant), or partial
    sums whose growth fits c*log(n) or a positive power of n. Flags
    convergent-looking series (plateauing partial sums) as non-diverging.
    """
    series = np.asarray(series, dtype=np.float64)
    horizon = series.size
    sums = np.cumsum(series)
    sample = np.unique(np.geomspace(10, horizon, num=24).astype(int))
    sample = sample[sample >= 1]
    detail = {"partial_sums": {int(n): float(sums[n - 1]) for n in sample}}
    log_fit, power_fit = fit_partial_sum_growth(sample.astype(float), sums[sample - 1])
    detail["log_fit"] = log_fit
    detail["power_fit"] = power_fit
    flat_tail = (
        float(series[-1]) >= 1e-9
        and float(series[-1]) >= 0.9 * float(series[horizon // 2])
    )
    if flat_tail:
        return True, f"term bounded below ({series[-1]:.3g} at n={horizon})", detail
    if log_fit.slope > 0 and log_fit.r_squared >= 0.995:
        return True, f"partial sums fit {log_fit.slope:.3g} log n (R2 {log_fit.r_squared:.4f})", detail
    if 0.05 <= power_fit.slope <= 1.0 and power_fit.r_squared >= 0.995:
        return True, f"partial sums grow like n^{power_fit.slope:.3g} (R2 {power_fit.r_squared:.4f})", detail
    return False, "partial sums look convergent", detail


@dataclass(frozen=True)
class RequirementCheck:
    passed: bool
    detail: str


@dataclass(frozen=True)
class NglieReport:
    """Per-requirement outcome of the four NGLIE conditions."""

    infinite_exploration: RequirementCheck
    non_expansion: RequirementCheck
    psi_limit: RequirementCheck
    psi_bounded: RequirementCheck

    @property
    def passed(self) -> bool:
        return all(
            c.passed
            for c in (self.infinite_exploration, self.non_expansion, self.psi_limit, self.psi_bounded)
        )

    def lines(self) -> list[str]:
        names = [
            ("infinite exploration", self.infinite_exploration),
            ("limit operator non-expansion", self.non_expansion),
            ("psi reaches declared limit", self.psi_limit),
            ("psi stays between endpoints", self.psi_bounded),
        ]
        return [f"[{'pass' if c.passed else 'FAIL'}] {name}: {c.detail}" for name, c in names]


def declared_limit_operator(strategy: ExplorationStrategy, target_psi_inf: float) -> BackupOperatorSpec:
    """The limiting operator consistent with the declared psi_inf.

    For scalar-temperature families the target pins the limiting parameter;
    for the rank families the schedule's declared limit weights are used.
    """
    a = strategy.num_actions
    if strategy.kind == "boltzmann":
        if target_psi_inf <= 0.0:
            return BackupOperatorSpec(kind="max")
        # Invert 1 - 1/(1 + (|A|-1) e^-beta) = psi.
        beta = math.log((1.0 - target_psi_inf) * (a - 1) / target_psi_inf)
        if beta == 0.0:
            beta = 1e-12
        return BackupOperatorSpec(kind="boltzmann", beta=beta)
    if strategy.kind == "mellowmax" and math.isfinite(strategy.omega.limit):
        return BackupOperatorSpec(kind="mellowmax", omega=strategy.omega.limit)
    return strategy.limit_operator_spec()


def validate_nglie(
    strategy: ExplorationStrategy,
    horizon: int,
    target_psi_inf: float,
    tol: float = 0.01,
    probe_row=None,
    rng: np.random.Generator | None = None,
) -> NglieReport:
    """Check the four NGLIE requirements at desk scale.

    (1) divergence evidence for the per-visit minimum action probability,
    (2) the declared limiting operator passes the non-expansion check,
    (3) psi at the horizon is within ``tol`` of the declared limit,
    (4) psi stays between its initial and limiting values at sampled counts.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if rng is None:
        rng = np.random.default_rng(2024)

    series = min_prob_series(strategy, horizon, probe_row)
    diverges, why, _ = divergence_evidence(series)
    r1 = RequirementCheck(diverges, why)

    spec = declared_limit_operator(strategy, target_psi_inf)
    verdict = check_non_expansion(spec, strategy.num_actions, num_random_trials=4_000,
                                  search_budget=600, rng=rng)
    r2 = RequirementCheck(verdict.holds, str(verdict))

    measured = strategy.psi(horizon)
    r3 = RequirementCheck(
        abs(measured - target_psi_inf) <= tol,
        f"psi({horizon}) = {measured:.6g}, declared {target_psi_inf:.6g}",
    )

    psi0 = strategy.psi(1)
    psi_inf = target_psi_inf
    lo, hi = min(psi0, psi_inf) - 1e-9, max(psi0, psi_inf) + 1e-9
    samples = np.unique(np.geomspace(1, horizon, num=64).astype(int))
    values = [strategy.psi(int(n)) for n in samples]
    inside = all(lo <= v <= hi for v in values)
    orientation = "decaying" if psi0 > psi_inf else ("growing" if psi0 < psi_inf else "constant")
    r4 = RequirementCheck(
        inside,
        f"psi in [{lo:.6g}, {hi:.6g}] over {len(samples)} sampled counts ({orientation} toward psi_inf)",
    )
    return NglieReport(r1, r2, r3, r4)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _schedule_from_config(d: dict, path: str) -> ParamSchedule:
    family = d.get("family", "constant")
    try:
        if family == "constant":
            return constant_schedule(float(d["value"] if "value" in d else d["limit"]))
        if family == "sqrt":
            if "c" in d:
                return eps_sqrt_schedule(float(d["c"]), float(d["limit"]))
            return ParamSchedule(family="sqrt", limit=float(d["limit"]), delta=float(d["delta"]))
        if family in ("linear_growth", "sqrt_growth"):
            return ParamSchedule(family=family, rate=float(d["rate"]))
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc.args[0]!r} for family {family!r}") from None
    raise ValueError(f"{path}.family: unknown schedule family {family!r}")


def strategy_from_config(d: dict, num_actions: int) -> ExplorationStrategy:
    """Build a strategy from an experiment-config mapping."""
    kind = d.get("kind")
    if kind not in KINDS:
        raise ValueError(f"strategy.kind: expected one of {KINDS}, got {kind!r}")
    if kind == "eps_greedy":
        return eps_greedy_strategy(num_actions, _schedule_from_config(d["eps"], "strategy.eps"))
    if kind == "rrr":
        t_inf = d.get("t_inf")
        if t_inf is None:
            raise ValueError("strategy.t_inf: required for rrr")
        return rrr_strategy(num_actions, t_inf, d.get("t_first"), d.get("family"))
    if kind == "boltzmann":
        return boltzmann_strategy(num_actions, _schedule_from_config(d["beta"], "strategy.beta"))
    if kind == "mellowmax":
        return mellowmax_strategy(num_actions, _schedule_from_config(d["omega"], "strategy.omega"))
    return rrr_mellowmax_strategy(
        num_actions,
        _schedule_from_config(d["top_weight"], "strategy.top_weight"),
        _schedule_from_config(d["omega"], "strategy.omega"),
    )


__all__ = [
    "ActionRanking",
    "ExplorationStrategy",
    "NglieReport",
    "ParamSchedule",
    "RankWeightSchedule",
    "RequirementCheck",
    "boltzmann_strategy",
    "constant_schedule",
    "declared_limit_operator",
    "divergence_evidence",
    "eps_greedy_strategy",
    "eps_sqrt_schedule",
    "eq10_epsilon",
    "eq3_tail_weight",
    "generalized_exploration_parameter",
    "mellowmax_beta",
    "mellowmax_strategy",
    "min_prob_series",
    "policy_distribution",
    "rank_actions",
    "rrr_mellowmax_strategy",
    "rrr_strategy",
    "strategy_from_config",
    "validate_distribution",
    "validate_nglie",
]
