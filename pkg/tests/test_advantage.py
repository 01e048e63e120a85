import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fetrpo.advantage import AdvantageBuffer, RolloutBatch, compute_gae, normalize_advantages


def make_batch(rewards, T, S=1):
    n = len(rewards)
    states = np.arange(n, dtype=float).reshape(n, 1).repeat(S, axis=1)
    dones = np.array([(t % T) == T - 1 for t in range(n)], dtype=float)
    return RolloutBatch(states, np.zeros((n, 1)), np.zeros((n, 1)), np.asarray(rewards, float), dones,
                        states + 1, np.zeros(n), T)


def table_value(values):
    """Value function reading V from a lookup on the integer state id."""
    values = np.asarray(values, float)
    return lambda s: values[s[:, 0].astype(int)]


def brute_force(rewards, values, T, gamma, lam):
    n = len(rewards)
    rtg, adv = np.zeros(n), np.zeros(n)
    for t in range(n):
        end = (t // T + 1) * T
        rtg[t] = sum(gamma ** (u - t) * rewards[u] for u in range(t, end))
        deltas = []
        for u in range(t, end):
            nxt = 0.0 if u == end - 1 else gamma * values[u + 1]
            deltas.append(rewards[u] + nxt - values[u])
        adv[t] = sum((gamma * lam) ** (u - t) * d for u, d in zip(range(t, end), deltas))
    return rtg, adv


def test_terminal_single_step():
    buf = compute_gae(make_batch([1.0], 1), lambda s: np.zeros(len(s)), 0.99, 0.95)
    np.testing.assert_array_equal(buf.rewards_to_go, [1.0])
    np.testing.assert_array_equal(buf.advantages, [1.0])


def test_undiscounted_telescoping():
    buf = compute_gae(make_batch([1.0, 1.0, 1.0], 3), lambda s: np.zeros(len(s)), 1.0, 1.0)
    np.testing.assert_array_equal(buf.rewards_to_go, [3, 2, 1])
    np.testing.assert_array_equal(buf.advantages, [3, 2, 1])


def test_hand_executed_recursion():
    batch = make_batch([1.0, 2.0], 2)
    buf = compute_gae(batch, table_value([1.0, 2.0, 123.0]), 0.5, 0.5)
    np.testing.assert_allclose(buf.advantages, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(buf.rewards_to_go, [2.0, 2.0], atol=1e-15)


def test_batch_must_end_on_episode_boundary():
    with pytest.raises(ValueError):
        make_batch([1.0] * 5, 2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(1, 100), n_eps=st.integers(1, 4),
       gamma=st.floats(0.5, 1.0), lam=st.floats(0.5, 1.0))
def test_brute_force_equivalence(seed, T, n_eps, gamma, lam):
    rng = np.random.default_rng(seed)
    n = T * n_eps
    r = rng.standard_normal(n)
    v = rng.standard_normal(n + 1)
    buf = compute_gae(make_batch(r, T), table_value(v), gamma, lam)
    rtg, adv = brute_force(r, v, T, gamma, lam)
    np.testing.assert_allclose(buf.rewards_to_go, rtg, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(buf.advantages, adv, rtol=1e-10, atol=1e-10)


def test_lambda_one_zero_value_gives_rewards_to_go():
    r = np.random.default_rng(0).standard_normal(40)
    buf = compute_gae(make_batch(r, 10), lambda s: np.zeros(len(s)), 0.9, 1.0)
    np.testing.assert_array_equal(buf.advantages, buf.rewards_to_go)


def test_episode_isolation():
    rng = np.random.default_rng(1)
    r = rng.standard_normal(30)
    v = table_value(rng.standard_normal(31))
    base = compute_gae(make_batch(r, 10), v, 0.95, 0.9)
    r2 = r.copy()
    r2[10:20] += rng.standard_normal(10)
    other = compute_gae(make_batch(r2, 10), v, 0.95, 0.9)
    for sl in (slice(0, 10), slice(20, 30)):
        np.testing.assert_array_equal(base.advantages[sl], other.advantages[sl])
        np.testing.assert_array_equal(base.rewards_to_go[sl], other.rewards_to_go[sl])


def buffer(adv):
    adv = np.asarray(adv, float)
    return AdvantageBuffer(np.zeros_like(adv), adv, np.zeros_like(adv))


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_advantages(buffer([1.0, -1.0])).advantages, [1.0, -1.0])
    np.testing.assert_array_equal(normalize_advantages(buffer([2.5, 2.5])).advantages, [0.0, 0.0])
    out = normalize_advantages(buffer(np.random.default_rng(3).normal(4, 7, 100))).advantages
    assert abs(out.mean()) < 1e-12
    assert abs(out.std() - 1) < 1e-9
    with pytest.raises(ValueError):
        normalize_advantages(buffer([1.0]))
