import numpy as np
import pytest

from advalign.mdp import bandit_mdp, evaluate_exact, random_policy, random_token_mdp, uniform_policy
from advalign.policy import SoftmaxPolicy
from advalign.rollouts import RolloutBatch, concat_batches, empirical_occupancy, sample_rollouts


def test_deterministic_policy_gives_identical_trajectories():
    mdp = random_token_mdp(4, 4, seed=0)
    logits = np.zeros((mdp.n_states, 4))
    logits[:, 2] = 1e3
    pi = SoftmaxPolicy.table(logits)
    batch = sample_rollouts(mdp, pi, 50, seed=123)
    trajs = [tuple(a) for _, a, _, _ in batch.trajectories()]
    assert len(set(trajs)) == 1
    assert trajs[0] == (2, 2, 2, 2)


def test_uniform_bandit_frequency():
    mdp = bandit_mdp([0.0, 0.0])
    batch = sample_rollouts(mdp, uniform_policy(mdp), 10**5, seed=0)
    freq = np.mean(batch.actions == 0)
    assert 0.494 <= freq <= 0.506


def test_empirical_occupancy_matches_exact():
    mdp = random_token_mdp(4, 4, seed=3)
    pi = random_policy(mdp, seed=3)
    ev = evaluate_exact(mdp, pi)
    batch = sample_rollouts(mdp, pi, 10**5, seed=0)
    assert np.abs(empirical_occupancy(mdp, batch) - ev.d_action).sum() < 0.02


def test_same_seed_same_batch():
    mdp = random_token_mdp(4, 5, seed=1)
    pi = random_policy(mdp, seed=1)
    a = sample_rollouts(mdp, pi, 64, seed=9)
    b = sample_rollouts(mdp, pi, 64, seed=9)
    for name in ("states", "actions", "rewards", "next_states", "logp_old", "episode"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_batch_structure():
    mdp = random_token_mdp(4, 5, seed=1)
    pi = random_policy(mdp, seed=2)
    batch = sample_rollouts(mdp, pi, 200, seed=0)
    assert batch.n_episodes == 200
    assert np.all(batch.logp_old <= 0) and np.all(np.isfinite(batch.logp_old))
    np.testing.assert_allclose(batch.logp_old, pi.log_prob(batch.states, batch.actions))
    # every episode ends in exactly one terminal step, at its end
    ends = np.r_[batch.episode_starts[1:] - 1, len(batch) - 1]
    assert np.all(batch.next_states[ends] == -1)
    assert np.sum(batch.next_states == -1) == 200
    # reward only on the terminal step
    assert np.all(batch.rewards[batch.next_states >= 0] == 0)
    # transitions are concatenations
    live = batch.next_states >= 0
    np.testing.assert_array_equal(batch.next_states[live], mdp.child[batch.states[live], batch.actions[live]])


def test_jsonl_round_trip(tmp_path):
    mdp = random_token_mdp(4, 4, seed=1)
    pi = random_policy(mdp, seed=2)
    batch = sample_rollouts(mdp, pi, 30, seed=0, tag="pi0")
    path = tmp_path / "rollouts.jsonl"
    batch.to_jsonl(mdp, path)
    assert len(path.read_text().splitlines()) == 30
    back = RolloutBatch.from_jsonl(mdp, path)
    for name in ("states", "actions", "rewards", "next_states", "logp_old", "episode"):
        np.testing.assert_array_equal(getattr(back, name), getattr(batch, name))
    assert back.meta == {"seed": 0, "policy_tag": "pi0"}


def test_jsonl_rejects_unfinished_trajectory():
    mdp = random_token_mdp(4, 4, seed=1)
    with pytest.raises(ValueError):
        RolloutBatch.from_records(mdp, [{"prefix": [], "actions": [1, 2], "rewards": [0, 0],
                                         "logp_old": [-1, -1]}])


def test_concat_renumbers_episodes():
    mdp = random_token_mdp(3, 3, seed=0)
    pi = random_policy(mdp, seed=0)
    a, b = sample_rollouts(mdp, pi, 5, seed=0), sample_rollouts(mdp, pi, 7, seed=1)
    c = concat_batches([a, b])
    assert c.n_episodes == 12
    np.testing.assert_allclose(c.returns(), np.r_[a.returns(), b.returns()])
