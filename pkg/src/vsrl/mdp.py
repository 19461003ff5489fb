"""Finite tabular MDPs with corruptible observation channels.

The data model is deliberately explicit: a transition tensor ``P[s, a, s']``,
a reward tensor ``R[s, a, s']`` bounded by declared ``[r_min, r_max]``, and an
observation channel that is the identity map until an infection time ``t'``
and an arbitrary (row-stochastic) kernel afterwards. All types are immutable
after construction; stepping is pure given an explicit generator, so parallel
rollouts only need independent streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import sample_index

ROW_SUM_TOL = 1e-12

# Sentinel used in serialized form for channels that never get corrupted.
NEVER = "never"


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP: states and actions are integer index sets.

    ``transition[s, a]`` is a probability vector over successor states and
    ``reward[s, a, s']`` the immediate reward of that triple, bounded by the
    declared ``[r_min, r_max]``. ``discount`` lies in [0, 1).
    """

    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray      # (S, A, S)
    discount: float
    r_min: float
    r_max: float
    start_state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transition", _readonly(self.transition))
        object.__setattr__(self, "reward", _readonly(self.reward))
        p, r = self.transition, self.reward
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {p.shape}")
        if r.shape != p.shape:
            raise ValueError(f"reward shape {r.shape} != transition shape {p.shape}")
        if not (np.isfinite(self.r_min) and np.isfinite(self.r_max) and self.r_min <= self.r_max):
            raise ValueError(f"need finite r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must be in [0, 1), got {self.discount}")
        if np.any(p < 0.0):
            raise ValueError("transition probabilities must be nonnegative")
        residual = np.abs(p.sum(axis=2) - 1.0).max()
        if residual > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1, worst residual {residual:g}")
        if np.any(r < self.r_min) or np.any(r > self.r_max):
            raise ValueError("rewards fall outside declared [r_min, r_max]")
        if not 0 <= self.start_state < self.num_states:
            raise ValueError(f"start_state {self.start_state} out of range")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """R(s, a) = sum_{s'} P(s'|s, a) R(s, a, s')."""
        return np.einsum("sat,sat->sa", self.transition, self.reward)

    def cumulative_transition(self) -> np.ndarray:
        """Per-(s, a) running sums of the transition rows, for inverse-CDF sampling."""
        return np.cumsum(self.transition, axis=2)


@dataclass(frozen=True)
class ObservationChannel:
    """Observation kernels O(o | a, s') before and after the infection time.

    ``kernel_before`` must be deterministic (each (a, s') row is a point mass)
    and action-independent, matching the susceptible phase where observations
    simply name states. Distinct states may share an observation (that is how
    an interruption-signal pair of states emits one observation).
    ``infection_time`` is a step index, or ``None`` for a channel that never
    gets corrupted, in which case both kernels must be identical.
    """

    num_observations: int
    kernel_before: np.ndarray  # (A, S, O)
    kernel_after: np.ndarray   # (A, S, O)
    infection_time: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel_before", _readonly(self.kernel_before))
        object.__setattr__(self, "kernel_after", _readonly(self.kernel_after))
        kb, ka = self.kernel_before, self.kernel_after
        if kb.ndim != 3 or kb.shape[2] != self.num_observations:
            raise ValueError(f"kernel_before must be (A, S, O), got {kb.shape}")
        if ka.shape != kb.shape:
            raise ValueError(f"kernel shapes differ: {ka.shape} != {kb.shape}")
        for name, k in (("kernel_before", kb), ("kernel_after", ka)):
            if np.any(k < 0.0):
                raise ValueError(f"{name} has negative entries")
            residual = np.abs(k.sum(axis=2) - 1.0).max()
            if residual > ROW_SUM_TOL:
                raise ValueError(f"{name} rows must sum to 1, worst residual {residual:g}")
        before_map = deterministic_observation_map(kb)
        if before_map is None:
            raise ValueError("kernel_before must be deterministic and action-independent")
        if self.infection_time is None and not np.array_equal(kb, ka):
            raise ValueError("a never-infected channel must have identical kernels")
        if self.infection_time is not None and self.infection_time < 0:
            raise ValueError("infection_time must be a nonnegative step index")

    @property
    def observation_of(self) -> np.ndarray:
        """The deterministic pre-infection map s' -> o."""
        m = deterministic_observation_map(self.kernel_before)
        assert m is not None  # enforced at construction
        return m


def deterministic_observation_map(kernel: np.ndarray) -> np.ndarray | None:
    """Return the s' -> o map if ``kernel`` is a point mass independent of the
    action, else None."""
    hits = kernel == 1.0
    if not np.all(hits.sum(axis=2) == 1):
        return None
    per_action = hits.argmax(axis=2)  # (A, S)
    if not np.all(per_action == per_action[0]):
        return None
    return per_action[0].astype(np.int64)


def identity_channel(num_states: int, num_actions: int) -> ObservationChannel:
    """The susceptible channel o = s, never infected."""
    eye = np.eye(num_states)
    kernel = np.broadcast_to(eye, (num_actions, num_states, num_states)).copy()
    return ObservationChannel(num_states, kernel, kernel.copy(), infection_time=None)


@dataclass(frozen=True, slots=True)
class Transition:
    """One experienced step, including whether the interruption policy fired."""

    time: int
    state: int
    observation: int
    action: int
    reward: float
    next_state: int
    next_observation: int
    interrupted: bool = False


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_mdp`; structural problems are reported, not raised."""

    structural_errors: tuple[str, ...]
    communicating: bool
    rewards_bounded: bool
    max_row_residual: float

    @property
    def ok(self) -> bool:
        return (
            not self.structural_errors
            and self.communicating
            and self.rewards_bounded
            and self.max_row_residual <= ROW_SUM_TOL
        )


def _strongly_connected(adjacency: np.ndarray) -> bool:
    """True iff the directed graph is strongly connected (BFS both ways from 0)."""
    n = adjacency.shape[0]
    if n == 0:
        return False

    def reachable(adj):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = adj[frontier].any(axis=0) & ~seen
            frontier = np.flatnonzero(nxt).tolist()
            seen |= nxt
        return seen

    return bool(reachable(adjacency).all() and reachable(adjacency.T).all())


def validate_arrays(transition, reward, r_min: float, r_max: float) -> ValidationReport:
    """Validate raw arrays; malformed shapes become structural errors, not exceptions."""
    errors = []
    p = np.asarray(transition, dtype=np.float64)
    r = np.asarray(reward, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != p.shape[2]:
        errors.append(f"transition tensor must be (S, A, S), got {p.shape}")
    if r.shape != p.shape:
        errors.append(f"reward shape {r.shape} does not match transition shape {p.shape}")
    if errors:
        return ValidationReport(tuple(errors), False, False, float("inf"))
    if np.any(p < 0.0):
        errors.append("negative transition probabilities")
    residual = float(np.abs(p.sum(axis=2) - 1.0).max())
    bounded = bool(np.all(r >= r_min) and np.all(r <= r_max))
    positive = p > 0.0
    communicating = _strongly_connected(positive.any(axis=1))
    return ValidationReport(tuple(errors), communicating, bounded, residual)


def validate_mdp(mdp: TabularMdp) -> ValidationReport:
    """Check strong connectivity, reward bounds, and row-stochasticity residuals."""
    return validate_arrays(mdp.transition, mdp.reward, mdp.r_min, mdp.r_max)


def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator) -> tuple[int, float]:
    """Sample s' ~ P(.|s, a) and return (s', R(s, a, s'))."""
    if not 0 <= state < mdp.num_states:
        raise ValueError(f"state {state} out of range")
    if not 0 <= action < mdp.num_actions:
        raise ValueError(f"action {action} out of range")
    cum = np.cumsum(mdp.transition[state, action])
    next_state = sample_index(cum, rng.random())
    return next_state, float(mdp.reward[state, action, next_state])


def is_infected(channel: ObservationChannel, time: int) -> bool:
    """True iff the corrupted kernel is active at ``time``."""
    return channel.infection_time is not None and time >= channel.infection_time


def observe(
    channel: ObservationChannel,
    time: int,
    action: int,
    next_state: int,
    rng: np.random.Generator,
) -> int:
    """Sample o ~ O(.|a, s') from whichever kernel is active at ``time``."""
    kernel = channel.kernel_after if is_infected(channel, time) else channel.kernel_before
    if not 0 <= action < kernel.shape[0]:
        raise ValueError(f"action {action} out of range")
    if not 0 <= next_state < kernel.shape[1]:
        raise ValueError(f"state {next_state} out of range")
    row = kernel[action, next_state]
    cum = np.cumsum(row)
    return sample_index(cum, rng.random())


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def to_json_dict(mdp: TabularMdp, channel: ObservationChannel | None = None) -> dict:
    doc = {
        "states": mdp.num_states,
        "actions": mdp.num_actions,
        "gamma": mdp.discount,
        "r_min": mdp.r_min,
        "r_max": mdp.r_max,
        "start_state": mdp.start_state,
        "transitions": mdp.transition.tolist(),
        "rewards": mdp.reward.tolist(),
    }
    if channel is not None:
        doc["channel"] = {
            "observations": channel.num_observations,
            "kernel_before": channel.kernel_before.tolist(),
            "kernel_after": channel.kernel_after.tolist(),
            "infection_time": NEVER if channel.infection_time is None else channel.infection_time,
        }
    return doc


def from_json_dict(doc: dict) -> tuple[TabularMdp, ObservationChannel | None]:
    mdp = TabularMdp(
        transition=np.asarray(doc["transitions"], dtype=np.float64),
        reward=np.asarray(doc["rewards"], dtype=np.float64),
        discount=float(doc["gamma"]),
        r_min=float(doc["r_min"]),
        r_max=float(doc["r_max"]),
        start_state=int(doc.get("start_state", 0)),
    )
    channel = None
    if "channel" in doc:
        ch = doc["channel"]
        t_prime = ch.get("infection_time", NEVER)
        channel = ObservationChannel(
            num_observations=int(ch["observations"]),
            kernel_before=np.asarray(ch["kernel_before"], dtype=np.float64),
            kernel_after=np.asarray(ch["kernel_after"], dtype=np.float64),
            infection_time=None if t_prime == NEVER else int(t_prime),
        )
    return mdp, channel


def save_json(path: str | Path, mdp: TabularMdp, channel: ObservationChannel | None = None) -> None:
    Path(path).write_text(json.dumps(to_json_dict(mdp, channel)))


def load_json(path: str | Path) -> tuple[TabularMdp, ObservationChannel | None]:
    return from_json_dict(json.loads(Path(path).read_text()))
