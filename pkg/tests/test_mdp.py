import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advalign.exceptions import StateSpaceTooLarge
from advalign.mdp import (
    EOS,
    TokenMdp,
    bandit_mdp,
    context_features,
    evaluate_exact,
    kl_divergence,
    random_policy,
    random_token_mdp,
    uniform_policy,
)
from advalign.policy import SoftmaxPolicy
from advalign.rollouts import sample_rollouts


def test_bandit_uniform_values():
    mdp = bandit_mdp([1.0, 0.0])
    ev = evaluate_exact(mdp, uniform_policy(mdp))
    assert ev.v[0] == pytest.approx(0.5)
    np.testing.assert_allclose(ev.adv[0], [0.5, -0.5])
    assert ev.value == pytest.approx(0.5)


def test_state_indexing_round_trip():
    mdp = random_token_mdp(4, 4, seed=0)
    assert mdp.n_states == 1 + 3 + 9 + 27
    for s in range(mdp.n_states):
        assert mdp.index_of(mdp.prefix_of(s)) == s
    s = mdp.index_of((2, 3))
    assert mdp.child[s, 1] == mdp.index_of((2, 3, 1))
    assert mdp.child[s, EOS] == -1
    assert mdp.last_token[s] == 3 and mdp.depth[s] == 2
    deepest = mdp.index_of((1, 1, 1))
    assert np.all(mdp.child[deepest] == -1)


def test_terminal_reward_longest_suffix_wins():
    mdp = TokenMdp(3, 3, {(1,): 0.2, (2, 1): 0.9, (0,): 0.4})
    s = mdp.index_of((2,))
    assert mdp.terminal_reward[s, 1] == 0.0
    assert mdp.terminal_reward[s, EOS] == pytest.approx(0.4)
    s = mdp.index_of((1, 1))
    assert mdp.terminal_reward[s, 1] == pytest.approx(0.2)
    s = mdp.index_of((1, 2))
    assert mdp.terminal_reward[s, 1] == pytest.approx(0.9)
    assert mdp.terminal_reward[s, 2] == 0.0


def test_rewards_clamped_and_only_on_termination():
    mdp = TokenMdp(2, 2, {(1,): 3.0, (0,): -1.0})
    assert mdp.reward[(1,)] == 1.0 and mdp.reward[(0,)] == 0.0
    mdp = random_token_mdp(4, 3, seed=3)
    nonterminal = mdp.child >= 0
    assert np.all(mdp.terminal_reward[nonterminal] == 0)
    assert np.all((mdp.terminal_reward >= 0) & (mdp.terminal_reward <= 1))


def test_initial_distribution_must_sum_to_one():
    with pytest.raises(ValueError):
        TokenMdp(3, 3, {}, initial={(): 0.5, (1,): 0.4})
    mdp = TokenMdp(3, 3, {}, initial={(): 0.5, (1,): 0.5})
    assert mdp.initial_vector.sum() == pytest.approx(1.0, abs=1e-12)


def test_state_cap():
    mdp = random_token_mdp(16, 5, seed=0)
    with pytest.raises(StateSpaceTooLarge):
        evaluate_exact(mdp, np.ones((1, 16)) / 16)
    small_cap = TokenMdp(4, 4, {}, state_cap=100)
    with pytest.raises(StateSpaceTooLarge):
        small_cap.check_size()


def test_json_round_trip_bit_exact():
    mdp = random_token_mdp(5, 3, seed=7)
    text = mdp.to_json()
    back = TokenMdp.from_json(text)
    assert back.to_json() == text
    assert back.reward == mdp.reward
    np.testing.assert_array_equal(back.terminal_reward, mdp.terminal_reward)
    doc = json.loads(text)
    assert set(doc) >= {"vocab_size", "horizon", "gamma", "reward", "seed"}


@pytest.mark.parametrize("kind", ["table", "context"])
def test_exact_evaluation_invariants(kind):
    mdp = random_token_mdp(4, 4, seed=1, gamma=0.9)
    pi = random_policy(mdp, seed=2, kind=kind)
    ev = evaluate_exact(mdp, pi)
    p = pi.probs()
    np.testing.assert_array_equal(ev.adv, ev.q - ev.v[:, None])
    assert np.max(np.abs((p * ev.adv).sum(1))) < 1e-10
    assert ev.d_state.sum() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(ev.d_action, ev.d_state[:, None] * p, atol=1e-10)
    np.testing.assert_allclose(ev.d_action.sum(1), ev.d_state, atol=1e-10)


def test_exact_evaluation_is_deterministic():
    mdp = random_token_mdp(4, 5, seed=1)
    pi = random_policy(mdp, seed=2)
    a, b = evaluate_exact(mdp, pi), evaluate_exact(mdp, pi)
    assert a.value == b.value
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.d_state, b.d_state)


def test_value_matches_monte_carlo():
    # oracle: 10^6 sampled episodes, agreement within 3 standard errors
    mdp = random_token_mdp(3, 3, seed=0)
    pi = random_policy(mdp, seed=0)
    ev = evaluate_exact(mdp, pi)
    returns = sample_rollouts(mdp, pi, 10**6, seed=0).returns()
    se = returns.std() / np.sqrt(len(returns))
    assert abs(returns.mean() - ev.value) < 3 * se


def test_value_matches_brute_force_enumeration():
    # oracle: enumerate every complete sequence and its probability
    mdp = random_token_mdp(3, 4, seed=5, gamma=0.8)
    pi = random_policy(mdp, seed=5)
    p = pi.probs()

    def walk(prefix, prob):
        s = mdp.index_of(prefix)
        total = 0.0
        for a in range(mdp.vocab_size):
            seq = prefix + (a,)
            pa = prob * p[s, a]
            if a == EOS or len(seq) == mdp.horizon:
                total += pa * mdp.gamma ** (len(seq) - 1) * mdp.terminal_reward[s, a]
            else:
                total += walk(seq, pa)
        return total

    assert walk((), 1.0) == pytest.approx(evaluate_exact(mdp, pi).value, abs=1e-12)


def test_kl_two_point():
    mdp = bandit_mdp([0.0, 0.0])
    p = SoftmaxPolicy.table(np.log([[0.5, 0.5]]))
    q = SoftmaxPolicy.table(np.log([[0.25, 0.75]]))
    ev = evaluate_exact(mdp, p)
    expected = 0.5 * np.log(2) + 0.5 * np.log(2 / 3)
    assert kl_divergence(mdp, p, q, ev) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)
    assert kl_divergence(mdp, p, p, ev) == 0.0


def test_kl_exact_vs_sampled_weighting():
    mdp = random_token_mdp(4, 4, seed=2)
    p = random_policy(mdp, seed=3)
    q = random_policy(mdp, seed=4)
    exact = kl_divergence(mdp, p, q, evaluate_exact(mdp, p))
    batch = sample_rollouts(mdp, p, 10**5, seed=1)
    assert abs(kl_divergence(mdp, p, q, batch) - exact) < 0.01


def test_context_features_shape():
    mdp = random_token_mdp(4, 3, seed=0)
    phi = context_features(mdp)
    assert phi.shape == (mdp.n_states * 4, 4 * 4 + 3 * 4)
    np.testing.assert_array_equal(np.asarray(phi.sum(1)).ravel(), 2.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), vocab=st.integers(2, 4), horizon=st.integers(1, 4))
def test_occupancy_sums_to_one(seed, vocab, horizon):
    mdp = random_token_mdp(vocab, horizon, seed=seed)
    ev = evaluate_exact(mdp, random_policy(mdp, seed=seed, scale=2.0))
    assert abs(ev.d_state.sum() - 1) < 1e-10
    assert np.max(np.abs(ev.d_action.sum(1) - ev.d_state)) < 1e-10
