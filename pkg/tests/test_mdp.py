import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsrl import rng as streams
from vsrl.environments import CliffParams, ThreeStateParams, make_cliff, make_three_state
from vsrl.mdp import (
    ObservationChannel,
    TabularMdp,
    from_json_dict,
    identity_channel,
    is_infected,
    load_json,
    observe,
    save_json,
    step,
    to_json_dict,
    validate_arrays,
    validate_mdp,
)

from oracles import is_communicating


def two_state_swap() -> TabularMdp:
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 0] = 1.0
    r = np.zeros((2, 1, 2))
    return TabularMdp(transition=p, reward=r, discount=0.5, r_min=0.0, r_max=0.0)


def test_two_cycle_is_communicating():
    assert validate_mdp(two_state_swap()).communicating


def test_absorbing_state_is_not_communicating():
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0  # state 1 absorbs; no way back
    mdp = TabularMdp(transition=p, reward=np.zeros((2, 1, 2)), discount=0.9, r_min=0, r_max=0)
    report = validate_mdp(mdp)
    assert not report.communicating
    assert report.rewards_bounded


def test_three_state_env_is_communicating():
    mdp, *_ = make_three_state(ThreeStateParams())
    report = validate_mdp(mdp)
    assert report.communicating
    assert is_communicating(mdp.transition)  # independent BFS oracle
    assert report.ok


def test_communicating_matches_bfs_oracle_on_random_graphs():
    gen = np.random.default_rng(7)
    for _ in range(20):
        n = int(gen.integers(2, 6))
        p = np.zeros((n, 2, n))
        for s in range(n):
            for a in range(2):
                targets = gen.integers(0, n, size=2)
                for t in targets:
                    p[s, a, t] += 0.5
        mdp = TabularMdp(transition=p, reward=np.zeros((n, 2, n)), discount=0.9, r_min=0, r_max=0)
        assert validate_mdp(mdp).communicating == is_communicating(p)


def test_malformed_shapes_become_structural_errors():
    report = validate_arrays(np.zeros((2, 1, 3)), np.zeros((2, 1, 3)), 0.0, 0.0)
    assert report.structural_errors
    assert not report.ok


def test_constructor_rejects_bad_rows():
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 0.9  # row does not sum to 1
    p[1, 0, 0] = 1.0
    with pytest.raises(ValueError, match="sum to 1"):
        TabularMdp(transition=p, reward=np.zeros((2, 1, 2)), discount=0.5, r_min=0, r_max=0)
    with pytest.raises(ValueError, match="discount"):
        two = two_state_swap()
        TabularMdp(transition=two.transition, reward=two.reward, discount=1.0, r_min=0, r_max=0)


def test_step_point_mass_is_deterministic():
    mdp = two_state_swap()
    gen = streams.stream(0, "t")
    for _ in range(10):
        assert step(mdp, 0, 0, gen) == (1, 0.0)


def test_step_rejects_out_of_range():
    mdp = two_state_swap()
    gen = streams.stream(0, "t")
    with pytest.raises(ValueError):
        step(mdp, 5, 0, gen)
    with pytest.raises(ValueError):
        step(mdp, 0, 3, gen)


def test_step_frequency_matches_row():
    # Binomial bound: 1e5 fair draws stay within 0.01 of 0.5 except with
    # probability ~2e-7; the seed is fixed anyway.
    p = np.zeros((2, 1, 2))
    p[0, 0] = [0.5, 0.5]
    p[1, 0, 0] = 1.0
    mdp = TabularMdp(transition=p, reward=np.zeros((2, 1, 2)), discount=0.5, r_min=0, r_max=0)
    gen = streams.stream(123, "freq")
    hits = sum(step(mdp, 0, 0, gen)[0] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.5) < 0.01


def test_step_returns_table_reward():
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 0] = 1.0
    r = np.zeros((2, 1, 2))
    r[0, 0, 1] = -100.0
    mdp = TabularMdp(transition=p, reward=r, discount=0.5, r_min=-100, r_max=0)
    gen = streams.stream(0, "t")
    assert step(mdp, 0, 0, gen) == (1, -100.0)


def test_observe_identity_before_infection():
    mdp, channel, meta, _ = make_three_state(ThreeStateParams(infection_time=100))
    gen = streams.stream(0, "o")
    assert observe(channel, 99, 0, meta.state_z, gen) == meta.obs_z
    for s, o in [(meta.state_x, meta.obs_x), (meta.state_y_uninformed, meta.obs_y),
                 (meta.state_y_informed, meta.obs_y)]:
        assert observe(channel, 0, 1, s, gen) == o


def test_observe_corrupts_trap_after_infection():
    mdp, channel, meta, _ = make_three_state(ThreeStateParams(infection_time=100))
    gen = streams.stream(0, "o")
    assert observe(channel, 100, 0, meta.state_z, gen) == meta.obs_y
    # everything else unchanged
    assert observe(channel, 100, 0, meta.state_x, gen) == meta.obs_x
    assert observe(channel, 100, 1, meta.state_y_informed, gen) == meta.obs_y


def test_never_infected_channel_is_phase_independent():
    channel = identity_channel(3, 2)
    gen = streams.stream(0, "o")
    for t in (0, 10, 10**9):
        assert observe(channel, t, 0, 2, gen) == 2


@pytest.mark.parametrize("t_prime,t,expected", [
    (100, 99, False),
    (100, 100, True),  # infection starts exactly at t'
    (None, 10**12, False),
])
def test_is_infected_boundary(t_prime, t, expected):
    mdp, channel, *_ = make_three_state(ThreeStateParams(infection_time=t_prime))
    assert is_infected(channel, t) is expected


def test_channel_rejects_stochastic_before_kernel():
    kb = np.full((1, 2, 2), 0.5)
    with pytest.raises(ValueError, match="deterministic"):
        ObservationChannel(2, kb, kb.copy(), infection_time=None)


def test_never_infected_requires_equal_kernels():
    channel = identity_channel(2, 1)
    ka = channel.kernel_after.copy()
    ka[:, 1] = [1.0, 0.0]
    with pytest.raises(ValueError, match="identical"):
        ObservationChannel(2, channel.kernel_before, ka, infection_time=None)


def test_long_rollout_stays_in_bounds():
    mdp, channel, meta, _ = make_three_state(ThreeStateParams(infection_time=500_000))
    gen_t = streams.stream(99, streams.TRANSITION)
    gen_o = streams.stream(99, "obs")
    gen_a = streams.stream(99, streams.ACTION)
    s = mdp.start_state
    for t in range(1_000_000):
        a = int(gen_a.random() * mdp.num_actions)
        s, r = step(mdp, s, a, gen_t)
        assert mdp.r_min <= r <= mdp.r_max
        assert 0 <= s < mdp.num_states
    o = observe(channel, 1_000_000, a, s, gen_o)
    assert 0 <= o < channel.num_observations


def test_replay_reproduces_rollout_bitwise():
    mdp, channel, meta, _ = make_three_state(ThreeStateParams())

    def rollout(seed):
        gen_t = streams.stream(seed, streams.TRANSITION)
        gen_a = streams.stream(seed, streams.ACTION)
        s = mdp.start_state
        out = []
        for t in range(2_000):
            a = int(gen_a.random() * mdp.num_actions)
            s2, r = step(mdp, s, a, gen_t)
            out.append((t, s, a, r, s2))
            s = s2
        return out

    assert rollout(5) == rollout(5)
    assert rollout(5) != rollout(6)


def test_named_streams_are_independent():
    a1 = streams.stream(42, "action").random(5)
    t1 = streams.stream(42, "transition").random(5)
    a2 = streams.stream(42, "action").random(5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, t1)


def test_json_round_trip():
    mdp, channel, *_ = make_three_state(ThreeStateParams(infection_time=77))
    doc = to_json_dict(mdp, channel)
    text = json.dumps(doc)
    mdp2, channel2 = from_json_dict(json.loads(text))
    assert np.array_equal(mdp.transition, mdp2.transition)
    assert np.array_equal(mdp.reward, mdp2.reward)
    assert mdp2.discount == mdp.discount
    assert channel2.infection_time == 77
    assert np.array_equal(channel.kernel_after, channel2.kernel_after)


def test_json_never_sentinel(tmp_path):
    mdp, channel, *_ = make_cliff(CliffParams(rows=2, cols=3))
    path = tmp_path / "env.json"
    save_json(path, mdp, channel)
    doc = json.loads(path.read_text())
    assert doc["channel"]["infection_time"] == "never"
    mdp2, channel2 = load_json(path)
    assert channel2.infection_time is None


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=5), st.integers(min_value=0, max_value=2**32 - 1))
def test_rollout_property_bounded(n, seed):
    gen = np.random.default_rng(seed)
    p = gen.dirichlet(np.ones(n), size=(n, 2))
    r = gen.uniform(-1.0, 1.0, size=(n, 2, n))
    p = p / p.sum(axis=2, keepdims=True)
    mdp = TabularMdp(transition=p, reward=r, discount=0.9, r_min=-1.0, r_max=1.0)
    walker = streams.stream(seed, "walk")
    s = 0
    for _ in range(200):
        a = int(walker.random() * 2)
        s, rew = step(mdp, s, a, walker)
        assert -1.0 <= rew <= 1.0
        assert 0 <= s < n
