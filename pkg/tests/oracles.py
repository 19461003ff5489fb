"""Independent oracles used to freeze expected values.

Everything here is deliberately naive: breadth-first reachability, exact
linear-system policy evaluation, enumeration over deterministic policies,
and high-precision constants computed once with mpmath (the expressions are
recorded next to each constant). The oracles never call into vsrl.
"""

from __future__ import annotations

import itertools

import numpy as np

# mpmath, 50 digits: log((e + 1)/2)
MELLOWMAX_1_0_OMEGA1 = 0.62011450695827752463

# mpmath findroot of (1-mm)*exp(b*(1-mm)) - mm*exp(-b*mm) with mm above
MAXENT_BETA_1_0_OMEGA1 = 0.49003427641921431508

# 10**-0.8
POWER_LR_08_N10 = 0.15848931924611134852


def bfs_reachable(adjacency: np.ndarray, source: int) -> np.ndarray:
    """Plain queue-based BFS over a boolean adjacency matrix."""
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[source] = True
    queue = [source]
    while queue:
        u = queue.pop()
        for v in range(n):
            if adjacency[u, v] and not seen[v]:
                seen[v] = True
                queue.append(v)
    return seen


def is_communicating(transition: np.ndarray) -> bool:
    adj = (transition > 0).any(axis=1)
    n = adj.shape[0]
    return all(bfs_reachable(adj, s).all() for s in range(n)) and all(
        bfs_reachable(adj.T, s).all() for s in range(n)
    )


def policy_value(transition, reward, gamma, policy) -> np.ndarray:
    """V of a stochastic policy via the exact linear system."""
    transition = np.asarray(transition, dtype=float)
    reward = np.asarray(reward, dtype=float)
    policy = np.asarray(policy, dtype=float)
    p_pi = np.einsum("sa,sat->st", policy, transition)
    r_sa = np.einsum("sat,sat->sa", transition, reward)
    r_pi = np.einsum("sa,sa->s", policy, r_sa)
    n = transition.shape[0]
    return np.linalg.solve(np.eye(n) - gamma * p_pi, r_pi)


def greedy_policy_by_enumeration(transition, reward, gamma) -> tuple[tuple[int, ...], np.ndarray]:
    """Best deterministic stationary policy by exhaustive enumeration."""
    transition = np.asarray(transition, dtype=float)
    num_states, num_actions = transition.shape[:2]
    best_policy, best_value = None, None
    for assignment in itertools.product(range(num_actions), repeat=num_states):
        pi = np.zeros((num_states, num_actions))
        pi[np.arange(num_states), assignment] = 1.0
        v = policy_value(transition, reward, gamma, pi)
        if best_value is None or (v > best_value + 1e-12).any() and (v >= best_value - 1e-12).all():
            best_policy, best_value = assignment, v
    return best_policy, best_value


def q_of_policy(transition, reward, gamma, policy) -> np.ndarray:
    """Q(s, a) of a stochastic policy from its exact V."""
    v = policy_value(transition, reward, gamma, policy)
    r_sa = np.einsum("sat,sat->sa", np.asarray(transition, float), np.asarray(reward, float))
    return r_sa + gamma * np.einsum("sat,t->sa", np.asarray(transition, float), v)


def rank_average_bandit_fixed_point(rewards, gamma, weights) -> np.ndarray:
    """Exact fixed point of the single-state rank-averaged bandit.

    Q(a) = r(a) + gamma * sum_k w_k * (k-th largest Q); solved by iterating
    the exact map to machine precision, which is a contraction for gamma < 1.
    """
    rewards = np.asarray(rewards, dtype=float)
    weights = np.asarray(weights, dtype=float)
    q = np.zeros_like(rewards)
    for _ in range(10_000):
        backup = float(np.sort(q)[::-1] @ weights)
        q_next = rewards + gamma * backup
        if np.abs(q_next - q).max() < 1e-15:
            return q_next
        q = q_next
    return q
