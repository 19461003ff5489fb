"""Canonical environments: the cliff gridworld and the three-state trap MDP.

Both are built as communicating MDPs: the goal cell and the cliff cells
recycle to the start state as part of the dynamics, so the same transition
tensor serves training, the fixed-point oracle, and the reachability
validator. The three-state environment carries the corruptible observation
channel (the trap state is observed as the loop state once infected) and an
interruption scheme that can only fire at the loop observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import ObservationChannel, TabularMdp, identity_channel
from .interruption import InterruptionScheme, ThetaSchedule

CLIFF_ACTIONS = ("north", "south", "east", "west")
CLIFF_ACTIONS_WITH_STAY = CLIFF_ACTIONS + ("stay",)
_MOVES = {"north": (-1, 0), "south": (1, 0), "east": (0, 1), "west": (0, -1), "stay": (0, 0)}


@dataclass(frozen=True)
class CliffParams:
    rows: int = 4
    cols: int = 12
    step_reward: float = -1.0
    cliff_reward: float = -100.0
    goal_reward: float = 0.0
    action_set: str = "four_moves"  # or "five_with_stay"
    discount: float = 0.95
    cliff_is_interruption_zone: bool = False

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid dimensions must be at least 2x2")
        if self.cliff_reward >= self.step_reward:
            raise ValueError("cliff_reward must be below step_reward")
        if self.action_set not in ("four_moves", "five_with_stay"):
            raise ValueError(f"unknown action set {self.action_set!r}")


@dataclass(frozen=True)
class CliffMeta:
    rows: int
    cols: int
    start_state: int
    goal_state: int
    cliff_states: frozenset[int]
    interruption_zone: frozenset[int]
    action_names: tuple[str, ...]

    def cell(self, state: int) -> tuple[int, int]:
        return divmod(state, self.cols)

    def distance_to_cliff(self, state: int) -> int:
        r, c = self.cell(state)
        if not self.cliff_states:
            return self.rows
        return min(abs(r - cr) + abs(c - cc)
                   for cr, cc in (self.cell(s) for s in self.cliff_states))


def make_cliff(params: CliffParams) -> tuple[TabularMdp, ObservationChannel, CliffMeta,
                                             InterruptionScheme | None]:
    """Grid MDP with a hazardous bottom edge.

    Moves are clipped at the walls. Stepping into a cliff cell yields the
    cliff reward; cliff cells and the goal cell then route every action back
    to the start with zero reward, which keeps the chain communicating and
    makes episode resets part of the dynamics. When requested, cells adjacent
    to the cliff form an interruption zone whose interruption policy moves
    north, away from the edge.
    """
    rows, cols = params.rows, params.cols
    actions = CLIFF_ACTIONS if params.action_set == "four_moves" else CLIFF_ACTIONS_WITH_STAY
    num_states = rows * cols
    num_actions = len(actions)

    def idx(r: int, c: int) -> int:
        return r * cols + c

    start = idx(rows - 1, 0)
    goal = idx(rows - 1, cols - 1)
    cliff = frozenset(idx(rows - 1, c) for c in range(1, cols - 1))

    p = np.zeros((num_states, num_actions, num_states))
    r = np.zeros((num_states, num_actions, num_states))
    for s in range(num_states):
        sr, sc = divmod(s, cols)
        for a, name in enumerate(actions):
            if s in cliff or s == goal:
                p[s, a, start] = 1.0
                continue
            dr, dc = _MOVES[name]
            nr = min(max(sr + dr, 0), rows - 1)
            nc = min(max(sc + dc, 0), cols - 1)
            ns = idx(nr, nc)
            p[s, a, ns] = 1.0
            if ns in cliff:
                r[s, a, ns] = params.cliff_reward
            elif ns == goal:
                r[s, a, ns] = params.goal_reward
            else:
                r[s, a, ns] = params.step_reward

    reward_values = (params.step_reward, params.cliff_reward, params.goal_reward, 0.0)
    mdp = TabularMdp(
        transition=p,
        reward=r,
        discount=params.discount,
        r_min=min(reward_values),
        r_max=max(reward_values),
        start_state=start,
    )
    channel = identity_channel(num_states, num_actions)

    zone = set()
    for s in range(num_states):
        if s in cliff or s == goal:
            continue
        sr, sc = divmod(s, cols)
        for dr, dc in ((-1, 0), (1, 0), (0, 1), (0, -1)):
            nr, nc = sr + dr, sc + dc
            if 0 <= nr < rows and 0 <= nc < cols and idx(nr, nc) in cliff:
                zone.add(s)
                break
    meta = CliffMeta(
        rows=rows, cols=cols, start_state=start, goal_state=goal,
        cliff_states=cliff, interruption_zone=frozenset(zone), action_names=actions,
    )

    scheme = None
    if params.cliff_is_interruption_zone:
        initiation = np.zeros(num_states)
        for s in zone:
            initiation[s] = 1.0
        pi_int = np.zeros((num_states, num_actions))
        pi_int[:, actions.index("north")] = 1.0
        scheme = InterruptionScheme(
            initiation=initiation,
            theta_schedule=ThetaSchedule(family="sqrt", c_prime=1.0),
            interruption_policy=pi_int,
        )
    return mdp, channel, meta, scheme


# ---------------------------------------------------------------------------
# The three-state trap environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThreeStateParams:
    """Loop state y (rewarding self-loop with a slip into the trap), trap z
    (strongly negative self-loop, escapable), and hub x. The loop state is a
    pair of twin states that differ only in whether the interruption signal
    has been sent; both emit the same observation."""

    r_loop_y: float = 1.0
    r_safe_y: float = 0.5
    r_trap_z: float = -20.0
    slip_to_z: float = 0.1
    discount: float = 0.9
    infection_time: int | None = None
    trap_escapable: bool = True

    def __post_init__(self):
        if not self.r_trap_z < 0.0 < self.r_safe_y < self.r_loop_y:
            raise ValueError("need r_trap_z < 0 < r_safe_y < r_loop_y")
        if not 0.0 < self.slip_to_z < 1.0:
            raise ValueError("slip probability must lie strictly between 0 and 1")


@dataclass(frozen=True)
class ThreeStateMeta:
    state_x: int
    state_y_uninformed: int
    state_y_informed: int
    state_z: int
    obs_x: int
    obs_y: int
    obs_z: int
    action_a: int
    action_b: int


def make_three_state(params: ThreeStateParams) -> tuple[TabularMdp, ObservationChannel,
                                                        ThreeStateMeta, InterruptionScheme]:
    """The four-state / three-observation trap environment.

    States: hub x, loop twins y (equal rows; transitions into the loop split
    evenly between them, standing in for the operator's signal process), trap
    z. Action a loops in y with the slip into z; action b retreats to x. In z,
    a stays trapped at the trap reward while b escapes to x (unless the trap
    is configured absorbing). Before the infection time every state is
    observed as itself (the twins share one observation); afterwards the trap
    is observed as the loop observation, and nothing else changes.
    """
    x, y_un, y_int, z = 0, 1, 2, 3
    a, b = 0, 1
    num_states, num_actions = 4, 2
    q = params.slip_to_z

    y_split = np.zeros(num_states)
    y_split[y_un] = 0.5
    y_split[y_int] = 0.5

    p = np.zeros((num_states, num_actions, num_states))
    r = np.zeros((num_states, num_actions, num_states))
    for act in (a, b):
        p[x, act] = y_split
    for y in (y_un, y_int):
        p[y, a] = (1.0 - q) * y_split
        p[y, a, z] = q
        r[y, a, :] = params.r_loop_y
        p[y, b, x] = 1.0
        r[y, b, x] = params.r_safe_y
    if params.trap_escapable:
        p[z, a, z] = 1.0
        r[z, a, z] = params.r_trap_z
        p[z, b, x] = 1.0
    else:
        for act in (a, b):
            p[z, act, z] = 1.0
            r[z, act, z] = params.r_trap_z

    mdp = TabularMdp(
        transition=p,
        reward=r,
        discount=params.discount,
        r_min=min(params.r_trap_z, 0.0),
        r_max=max(params.r_loop_y, params.r_safe_y, 0.0),
        start_state=x,
    )

    obs_x, obs_y, obs_z = 0, 1, 2
    before = np.zeros((num_actions, num_states, 3))
    for act in (a, b):
        before[act, x, obs_x] = 1.0
        before[act, y_un, obs_y] = 1.0
        before[act, y_int, obs_y] = 1.0
        before[act, z, obs_z] = 1.0
    after = before.copy()
    if params.infection_time is not None:
        after[:, z, :] = 0.0
        after[:, z, obs_y] = 1.0
    channel = ObservationChannel(
        num_observations=3,
        kernel_before=before,
        kernel_after=after,
        infection_time=params.infection_time,
    )

    initiation = np.zeros(3)
    initiation[obs_y] = 1.0
    pi_int = np.full((3, num_actions), 0.5)
    pi_int[obs_y] = 0.0
    pi_int[obs_y, b] = 1.0  # the operator retreats the agent to the hub
    scheme = InterruptionScheme(
        initiation=initiation,
        theta_schedule=ThetaSchedule(family="sqrt", c_prime=1.0),
        interruption_policy=pi_int,
    )
    meta = ThreeStateMeta(
        state_x=x, state_y_uninformed=y_un, state_y_informed=y_int, state_z=z,
        obs_x=obs_x, obs_y=obs_y, obs_z=obs_z, action_a=a, action_b=b,
    )
    return mdp, channel, meta, scheme


def epsilon_crossover(params: ThreeStateParams, resolution: float = 1e-3) -> float | None:
    """The smallest exploration level at which the cautious loop action wins.

    Sweeps the total non-greedy execution probability eps over
    [0, 1 - 1/|A|]; at each grid point both candidate designated policies
    (a-in-y versus b-in-y, with b-in-z fixed) are evaluated exactly under
    eps-noisy execution by solving the induced linear system. Returns the
    first eps where the b-in-y policy strictly dominates, or None when the
    loop action stays optimal over the whole range (callers then adjust the
    environment parameters).
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    mdp, _, meta, _ = make_three_state(params)
    num_states, num_actions = mdp.num_states, mdp.num_actions
    gamma = mdp.discount
    r_sa = mdp.expected_reward()

    policy_a = {meta.state_x: meta.action_a,
                meta.state_y_uninformed: meta.action_a,
                meta.state_y_informed: meta.action_a,
                meta.state_z: meta.action_b}
    policy_b = dict(policy_a)
    policy_b[meta.state_y_uninformed] = meta.action_b
    policy_b[meta.state_y_informed] = meta.action_b

    def value_at_start(designated: dict[int, int], eps: float) -> float:
        pi = np.full((num_states, num_actions), eps / (num_actions - 1))
        for s, act in designated.items():
            pi[s] = eps / (num_actions - 1)
            pi[s, act] = 1.0 - eps
        p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
        r_pi = np.einsum("sa,sa->s", pi, r_sa)
        v = np.linalg.solve(np.eye(num_states) - gamma * p_pi, r_pi)
        return float(v[mdp.start_state])

    top = 1.0 - 1.0 / num_actions
    grid = np.arange(0.0, top + resolution / 2.0, resolution)
    for eps in grid:
        eps = float(min(eps, top))
        if value_at_start(policy_b, eps) > value_at_start(policy_a, eps) + 1e-12:
            return eps
    return None


# ---------------------------------------------------------------------------
# Config-driven construction
# ---------------------------------------------------------------------------

ENVIRONMENTS = ("cliff", "three_state")


@dataclass(frozen=True)
class EnvBundle:
    name: str
    mdp: TabularMdp
    channel: ObservationChannel
    meta: object
    scheme: InterruptionScheme | None


def env_from_config(doc: dict) -> EnvBundle:
    """Build an environment from {"env": name, "overrides": {...}}."""
    name = doc.get("env")
    if name not in ENVIRONMENTS:
        raise ValueError(f"env: expected one of {ENVIRONMENTS}, got {name!r}")
    overrides = doc.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ValueError("env.overrides: must be a mapping")
    try:
        if name == "cliff":
            mdp, channel, meta, scheme = make_cliff(CliffParams(**overrides))
        else:
            if "infection_time" in overrides and overrides["infection_time"] == "never":
                overrides = dict(overrides, infection_time=None)
            mdp, channel, meta, scheme = make_three_state(ThreeStateParams(**overrides))
    except TypeError as exc:
        raise ValueError(f"env.overrides: {exc}") from None
    return EnvBundle(name=name, mdp=mdp, channel=channel, meta=meta, scheme=scheme)
