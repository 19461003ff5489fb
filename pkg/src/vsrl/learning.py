"""Tabular temporal-difference learning with interchangeable targets.

Three update rules share one loop: generalized Q-learning (bootstraps through
the exploration strategy's live backup operator), Sarsa(0) (bootstraps on the
executed next action, interruptions included), and Safe-Sarsa(0) (bootstraps
on a fresh action drawn from the non-interrupted base policy on a dedicated
random stream, so the update distribution cannot depend on the interruption
mechanism).

The loop is written against plain Python lists: acceptance-scale experiments
run tens of millions of single steps and per-step numpy dispatch overhead
dominates otherwise. The public single-step operations (``target_value``,
``q_update``) are the readable reference; a test pins the loop to them.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import rng as streams
from .exploration import ExplorationStrategy, mellowmax_beta
from .mdp import ObservationChannel, TabularMdp, Transition, deterministic_observation_map, is_infected, observe
from .operators import BackupOperatorSpec, apply_backup
from .qtable import QTable

if TYPE_CHECKING:  # runtime import would be circular; the scheme is duck-typed here
    from .interruption import InterruptionScheme

ALGORITHMS = ("q_learning", "sarsa0", "safe_sarsa0")


@dataclass(frozen=True)
class LearningRateSchedule:
    """Power-law rates scale / n^exponent; 0.5 < exponent <= 1 makes the sums
    diverge while the squared sums stay finite."""

    exponent: float
    scale: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.exponent <= 1.0:
            raise ValueError(f"exponent must lie in (0.5, 1], got {self.exponent}")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")

    def alpha(self, n: int) -> float:
        if n < 1:
            raise ValueError("pair visit counts start at 1")
        return self.scale / n**self.exponent


def learning_rate(schedule: LearningRateSchedule, pair_visit_count: int) -> float:
    return schedule.alpha(pair_visit_count)


def target_value(
    kind: str,
    transition: Transition,
    q: QTable,
    discount: float,
    operator_spec: BackupOperatorSpec | None = None,
    realized_next_action: int | None = None,
    noninterrupted_sample: int | None = None,
) -> float:
    """The scalar TD target for one experienced transition.

    Q-learning needs ``operator_spec``; Sarsa(0) the executed next action
    (interruption-affected); Safe-Sarsa(0) a fresh draw from the
    non-interrupted base policy at the next observation.
    """
    if kind not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {kind!r}")
    r = transition.reward
    row = q.values[transition.next_observation]
    if kind == "q_learning":
        if operator_spec is None:
            raise ValueError("q_learning target needs an operator spec")
        return r + discount * apply_backup(operator_spec, row)
    if kind == "sarsa0":
        if realized_next_action is None:
            raise ValueError("sarsa0 target needs the realized next action")
        return r + discount * float(row[realized_next_action])
    if noninterrupted_sample is None:
        raise ValueError("safe_sarsa0 target needs a base-policy action sample")
    return r + discount * float(row[noninterrupted_sample])


def q_update(q: QTable, transition: Transition, target: float,
             schedule: LearningRateSchedule) -> QTable:
    """Apply one update to the experienced pair and bump both counters."""
    o, a = transition.observation, transition.action
    n = int(q.visit_counts[o, a]) + 1
    alpha = schedule.alpha(n)
    q.values[o, a] += alpha * (target - q.values[o, a])
    q.visit_counts[o, a] = n
    q.obs_counts[o] += 1
    return q


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class EpisodeRecord:
    start_step: int
    length: int
    total_reward: float
    reached_end: bool
    truncated: bool


@dataclass(frozen=True)
class TrainCheckpoint:
    """Deep snapshot of the learner state right after the update at ``step``."""

    step: int
    values: np.ndarray
    visit_counts: np.ndarray
    obs_counts: np.ndarray


@dataclass
class TrainResult:
    q: QTable
    episodes: list[EpisodeRecord]
    total_steps: int
    final_state: int = 0
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)
    trace: list[Transition] | None = None
    interrupted_steps: int = 0
    interruptible_visits: int = 0


def _observation_maps(channel: ObservationChannel):
    before = channel.observation_of.tolist()
    after_map = deterministic_observation_map(channel.kernel_after)
    after = None if after_map is None else after_map.tolist()
    return before, after


def _make_sampler(strategy: ExplorationStrategy, vals: list[list[float]],
                  versions: list[int]) -> Callable[[int, int, float], int]:
    """A (observation, visit count, uniform) -> action sampler for the strategy.

    The uniform-to-action map is a fixed inverse CDF per distribution, so a
    replayed stream reproduces the action sequence exactly. Mellowmax-based
    strategies cache the solved inverse temperature per observation until that
    row changes.
    """
    a = strategy.num_actions
    kind = strategy.kind

    if kind == "eps_greedy":
        eps_value = strategy.eps.value

        def sample(o: int, n: int, u: float) -> int:
            row = vals[o]
            e = eps_value(n)
            greedy = 0
            best = row[0]
            for i in range(1, a):
                if row[i] > best:
                    best, greedy = row[i], i
            if u < 1.0 - e:
                return greedy
            # Uniform remainder, greedy action included.
            return min(int((u - (1.0 - e)) / e * a), a - 1) if e > 0 else greedy

        return sample

    if kind == "rrr":
        weights_at = strategy.rank_weights.weights

        def sample(o: int, n: int, u: float) -> int:
            row = vals[o]
            order = sorted(range(a), key=row.__getitem__, reverse=True)
            weights = weights_at(n)
            acc = 0.0
            for k in range(a - 1):
                acc += weights[k]
                if u < acc:
                    return order[k]
            return order[a - 1]

        return sample

    if kind == "boltzmann":
        beta_value = strategy.beta.value

        def sample(o: int, n: int, u: float) -> int:
            row = vals[o]
            b = beta_value(n)
            m = max(row)
            ws = [math.exp(b * (v - m)) for v in row]
            total = sum(ws)
            acc = 0.0
            target = u * total
            for i in range(a - 1):
                acc += ws[i]
                if target < acc:
                    return i
            return a - 1

        return sample

    if kind == "mellowmax":
        omega_value = strategy.omega.value
        cache: list[tuple[int, float, float]] = [(-1, 0.0, 0.0)] * len(vals)

        def sample(o: int, n: int, u: float) -> int:
            row = vals[o]
            omega = omega_value(n)
            version, cached_omega, beta = cache[o]
            if version != versions[o] or cached_omega != omega:
                beta = _fast_beta(row, omega, beta)
                cache[o] = (versions[o], omega, beta)
            m = max(row)
            ws = [math.exp(beta * (v - m)) for v in row]
            total = sum(ws)
            acc = 0.0
            target = u * total
            for i in range(a - 1):
                acc += ws[i]
                if target < acc:
                    return i
            return a - 1

        return sample

    # rrr_mellowmax: tail ranks carry Boltzmann weight at omega itself.
    top_value = strategy.top_weight.value
    omega_value = strategy.omega.value

    def sample(o: int, n: int, u: float) -> int:
        row = vals[o]
        t1 = top_value(n)
        order = sorted(range(a), key=row.__getitem__, reverse=True)
        if u < t1:
            return order[0]
        omega = omega_value(n)
        tail = [row[i] for i in order[1:]]
        m = max(tail)
        ws = [math.exp(omega * (v - m)) for v in tail]
        total = sum(ws)
        acc = 0.0
        target = (u - t1) / (1.0 - t1) * total
        for k in range(len(tail) - 1):
            acc += ws[k]
            if target < acc:
                return order[k + 1]
        return order[-1]

    return sample


def _fast_beta(row, omega: float, guess: float) -> float:
    """Newton solve of the max-entropy temperature, warm-started; falls back to
    the bracketing solver when the iteration stalls."""
    lo = min(row)
    hi = max(row)
    if hi - lo <= 1e-15:
        return 0.0
    n = len(row)
    z = omega * hi
    total = 0.0
    for v in row:
        total += math.exp(omega * v - z)
    mm = (z + math.log(total / n)) / omega
    beta = guess
    for _ in range(40):
        num = 0.0
        den = 0.0
        shift = max(beta * (hi - mm), beta * (lo - mm), 0.0)
        for v in row:
            d = v - mm
            w = math.exp(beta * d - shift)
            num += d * w
            den += d * d * w
        if den <= 0.0:
            break
        step = num / den
        beta -= step
        if abs(step) <= 1e-12 * max(1.0, abs(beta)):
            return beta
    return mellowmax_beta(np.asarray(row, dtype=np.float64), omega)


def _make_q_backup(strategy: ExplorationStrategy, vals: list[list[float]],
                   q_operator: BackupOperatorSpec | None = None):
    """Q-learning's bootstrap on the next row.

    By default this is the exploration strategy's live (visit-indexed)
    operator, which is what converges to the strategy-coupled fixed point. An
    explicit operator (typically ``max``) gives the unconstrained-greedy
    algorithm instead.
    """
    if q_operator is not None:
        if q_operator.kind == "max":
            def backup(o: int, n: int) -> float:
                return max(vals[o])
            return backup

        def backup(o: int, n: int) -> float:
            return apply_backup(q_operator, np.asarray(vals[o]))

        return backup

    a = strategy.num_actions
    kind = strategy.kind

    if kind in ("eps_greedy", "rrr"):
        if kind == "rrr":
            weights_at = strategy.rank_weights.weights
        else:
            eps_value = strategy.eps.value

            def weights_at(n, _a=a):
                e = eps_value(n)
                return (1.0 - e + e / _a,) + (e / _a,) * (_a - 1)

        def backup(o: int, n: int) -> float:
            ranked = sorted(vals[o], reverse=True)
            weights = weights_at(n)
            total = 0.0
            for k in range(a):
                total += weights[k] * ranked[k]
            return total

        return backup

    if kind == "boltzmann":
        beta_value = strategy.beta.value

        def backup(o: int, n: int) -> float:
            row = vals[o]
            b = beta_value(n)
            m = max(row)
            num = 0.0
            den = 0.0
            for v in row:
                w = math.exp(b * (v - m))
                num += v * w
                den += w
            return num / den

        return backup

    if kind == "mellowmax":
        omega_value = strategy.omega.value

        def backup(o: int, n: int) -> float:
            row = vals[o]
            omega = omega_value(n)
            m = max(row)
            total = 0.0
            for v in row:
                total += math.exp(omega * (v - m))
            return m + math.log(total / a) / omega

        return backup

    top_value = strategy.top_weight.value
    omega_value = strategy.omega.value

    def backup(o: int, n: int) -> float:
        ranked = sorted(vals[o], reverse=True)
        t1 = top_value(n)
        omega = omega_value(n)
        m = ranked[1]
        total = 0.0
        for k in range(1, a):
            total += math.exp(omega * (ranked[k] - m))
        tail_mm = m + math.log(total / (a - 1)) / omega
        return t1 * ranked[0] + (1.0 - t1) * tail_mm

    return backup


def train(
    mdp: TabularMdp,
    channel: ObservationChannel,
    strategy: ExplorationStrategy,
    scheme: "InterruptionScheme | None",
    kind: str,
    schedule: LearningRateSchedule,
    *,
    episodes: int = 1,
    horizon: int,
    seed: int,
    q0: float = 0.0,
    initial_q: QTable | None = None,
    start_time: int = 0,
    start_state: int | None = None,
    q_operator: BackupOperatorSpec | None = None,
    episode_end_states: frozenset[int] | None = None,
    record_trace: bool = False,
    checkpoint_every: int | None = None,
    checkpoint_hook: Callable[["TrainCheckpoint"], object] | None = None,
    on_transition: Callable[[Transition], None] | None = None,
) -> TrainResult:
    """Run episodic interaction and return the trained Q-table.

    Fully deterministic given ``seed``: actions, transitions, interruption
    coins and the Safe-Sarsa bootstrap each consume their own named stream,
    and every consumer draws a fixed number of uniforms per step. An episode
    ends when the walk enters one of ``episode_end_states`` (the chain itself
    keeps running; recycling is part of the MDP) or when ``horizon`` steps
    pass, which forces a teleport back to the start state.
    """
    if kind not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {kind!r}")
    if strategy.num_actions != mdp.num_actions:
        raise ValueError("strategy action count does not match the MDP")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")

    num_obs = channel.num_observations
    num_actions = mdp.num_actions
    ends = episode_end_states or frozenset()

    rng_a = streams.stream(seed, streams.ACTION)
    rng_t = streams.stream(seed, streams.TRANSITION)
    rng_i = streams.stream(seed, streams.INTERRUPTION)
    rng_b = streams.stream(seed, streams.SAFE_SARSA_BOOTSTRAP)

    cum_p = np.cumsum(mdp.transition, axis=2).tolist()
    rewards = mdp.reward.tolist()
    obs_before, obs_after = _observation_maps(channel)
    t_prime = channel.infection_time

    if initial_q is None:
        vals = [[q0] * num_actions for _ in range(num_obs)]
        visits = [[0] * num_actions for _ in range(num_obs)]
        ocounts = [0] * num_obs
    else:
        if initial_q.values.shape != (num_obs, num_actions):
            raise ValueError("initial_q shape does not match the environment")
        vals = initial_q.values.tolist()
        visits = initial_q.visit_counts.tolist()
        ocounts = initial_q.obs_counts.tolist()
    versions = [0] * num_obs

    sampler = _make_sampler(strategy, vals, versions)
    q_backup = _make_q_backup(strategy, vals, q_operator) if kind == "q_learning" else None

    if scheme is not None:
        initiation = scheme.initiation.tolist()
        pint = scheme.interruption_policy.tolist()
        theta_at = scheme.theta_schedule.theta
    else:
        initiation = None

    gamma = mdp.discount
    alpha_scale = schedule.scale
    kappa = schedule.exponent

    def observe_at(time: int, action: int, state: int) -> int:
        if t_prime is not None and time >= t_prime:
            if obs_after is not None:
                return obs_after[state]
            return observe(channel, time, action, state, rng_t)
        return obs_before[state]

    def choose(o: int, n: int) -> tuple[int, bool]:
        interrupted = False
        if initiation is not None and initiation[o] > 0.0:
            coin = rng_i.random()
            if coin < theta_at(n) * initiation[o]:
                interrupted = True
        u = rng_a.random()
        if interrupted:
            row = pint[o]
            acc = 0.0
            for i in range(num_actions - 1):
                acc += row[i]
                if u < acc:
                    return i, True
            return num_actions - 1, True
        return sampler(o, n, u), False

    trace: list[Transition] | None = [] if record_trace else None
    episode_records: list[EpisodeRecord] = []
    checkpoints: list[tuple[int, np.ndarray]] = []
    interrupted_steps = 0
    interruptible_visits = 0

    t = start_time
    s = mdp.start_state if start_state is None else start_state
    o = observe_at(t, 0, s)
    a, a_interrupted = choose(o, ocounts[o] + 1)

    for _episode in range(episodes):
        ep_start = t
        ep_reward = 0.0
        ep_len = 0
        reached = False
        truncated = False
        while True:
            if initiation is not None and initiation[o] > 0.0:
                interruptible_visits += 1
            if a_interrupted:
                interrupted_steps += 1
            cum_row = cum_p[s][a]
            u = rng_t.random()
            s2 = bisect_right(cum_row, u)
            if s2 >= len(cum_row):
                s2 = len(cum_row) - 1
            r = rewards[s][a][s2]
            o2 = observe_at(t + 1, a, s2)

            # Counts first: the next decision at o2 must see this visit.
            n_pair = visits[o][a] + 1
            visits[o][a] = n_pair
            ocounts[o] += 1

            a2, a2_interrupted = choose(o2, ocounts[o2] + 1)

            row2 = vals[o2]
            if kind == "q_learning":
                bootstrap = q_backup(o2, ocounts[o2] + 1)
            elif kind == "sarsa0":
                bootstrap = row2[a2]
            else:
                u_b = rng_b.random()
                base = sampler(o2, ocounts[o2] + 1, u_b)
                bootstrap = row2[base]

            y = r + gamma * bootstrap
            alpha = alpha_scale / n_pair**kappa
            vals[o][a] += alpha * (y - vals[o][a])
            versions[o] += 1

            ep_reward += r
            ep_len += 1
            t += 1

            if trace is not None or on_transition is not None:
                tr = Transition(
                    time=t - 1, state=s, observation=o, action=a, reward=r,
                    next_state=s2, next_observation=o2, interrupted=a_interrupted,
                )
                if trace is not None:
                    trace.append(tr)
                if on_transition is not None:
                    on_transition(tr)

            if checkpoint_every is not None and t % checkpoint_every == 0:
                snapshot = TrainCheckpoint(
                    step=t,
                    values=np.array(vals),
                    visit_counts=np.array(visits, dtype=np.int64),
                    obs_counts=np.array(ocounts, dtype=np.int64),
                )
                payload = checkpoint_hook(snapshot) if checkpoint_hook else snapshot.values
                checkpoints.append((t, payload))

            s, o, a, a_interrupted = s2, o2, a2, a2_interrupted

            if s in ends:
                reached = True
                break
            if ep_len >= horizon:
                truncated = True
                break

        episode_records.append(EpisodeRecord(ep_start, ep_len, ep_reward, reached, truncated))
        if truncated and _episode + 1 < episodes:
            # Off-process teleport back to the start; redraw the carried action.
            s = mdp.start_state
            o = observe_at(t, a, s)
            a, a_interrupted = choose(o, ocounts[o] + 1)

    q = QTable(
        values=np.array(vals),
        visit_counts=np.array(visits, dtype=np.int64),
        obs_counts=np.array(ocounts, dtype=np.int64),
    )
    return TrainResult(
        q=q,
        episodes=episode_records,
        total_steps=t - start_time,
        final_state=s,
        checkpoints=checkpoints,
        trace=trace,
        interrupted_steps=interrupted_steps,
        interruptible_visits=interruptible_visits,
    )
