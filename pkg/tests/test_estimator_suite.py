import doctest

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import advalign.estimator
from advalign.estimator import PolicyAligner
from advalign.mdp import evaluate_exact, random_token_mdp
from advalign.rollouts import sample_rollouts
from advalign.suite import (
    STANDARD_SUITE,
    STUDIES,
    curated_logging_policy,
    initial_policy,
    make_cells,
    run_cells,
    suite_mdp,
    variant_loss,
)


@pytest.fixture(scope="module")
def mdp():
    return random_token_mdp(3, 3, seed=0)


def test_doctest():
    assert doctest.testmod(advalign.estimator).failed == 0


def test_params_round_trip():
    est = PolicyAligner(loss="PPO", controller="none", lr=0.1)
    params = est.get_params()
    assert params["loss"] == "PPO" and params["controller"] == "none"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "policy_")
    assert est.set_params(kl_lambda=0.5).kl_lambda == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        PolicyAligner().predict_proba()


def test_fit_predict_score(mdp):
    est = PolicyAligner(n_iterations=3, rollouts_per_iter=16, batch_size=4).fit(mdp)
    proba = est.predict_proba()
    np.testing.assert_allclose(proba.sum(1), 1.0)
    np.testing.assert_array_equal(est.predict(), proba.argmax(1))
    assert est.score() == pytest.approx(evaluate_exact(mdp, est.policy_).value)
    assert est.kl_from_init() >= 0 and len(est.metrics_) == 3


def test_fit_is_reproducible(mdp):
    a = PolicyAligner(loss="AWR", n_iterations=2, rollouts_per_iter=8, random_state=3).fit(mdp)
    b = clone(a).fit(mdp)
    np.testing.assert_array_equal(a.predict_proba(), b.predict_proba())


def test_fit_offline_from_logged_batch(mdp):
    est = PolicyAligner(loss="AWR", n_iterations=2)
    pi = PolicyAligner().fit(mdp).pi_init_
    logged = sample_rollouts(mdp, pi, 32, seed=0)
    est.fit(mdp, logged, pi_init=pi)
    np.testing.assert_allclose(est.pi_init_.theta, pi.theta)
    assert len(est.metrics_) == 2


# -- suite -------------------------------------------------------------------

def test_suite_entries_fit_state_cap():
    for e in STANDARD_SUITE:
        assert suite_mdp(e).n_states <= 10**6
    assert [e.reward_seed for e in STANDARD_SUITE] == [0, 100, 1000]


def test_initial_policy_is_seeded_and_frozen():
    e = STANDARD_SUITE[2]
    a, b = initial_policy(e, 0), initial_policy(e, 0)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.frozen
    assert not np.array_equal(a.theta, initial_policy(e, 1).theta)


def test_curated_policy_skews_support():
    e = STANDARD_SUITE[2]
    mdp, pi = suite_mdp(e), initial_policy(e, 0)
    cur = curated_logging_policy(mdp, pi, skew=3.0)
    q = evaluate_exact(mdp, pi).q
    p_pi, p_cur = pi.probs(), cur.probs()
    # the mass on the better half grows at every state
    k = int(np.ceil(mdp.n_actions / 2))
    top = np.argsort(-q, axis=1)[:, :k]
    rows = np.arange(mdp.n_states)[:, None]
    assert np.all(p_cur[rows, top].sum(1) >= p_pi[rows, top].sum(1) - 1e-12)


def test_study_grids():
    assert [v.name for v in STUDIES["kl-controller"]] == ["ppo-adaptive", "ppo-none"]
    lam = make_cells("lambda-sweep", [0, 1, 2])
    assert len(lam) == 4 * 3 * 3
    assert sorted({c.loss["kl_lambda"] for c in lam}) == [0.05, 0.1, 0.5, 1.0]
    with pytest.raises(ValueError):
        make_cells("grid-search", [0])


def test_variant_loss_merging():
    apa = STUDIES["lambda-sweep"][0]
    merged = variant_loss(apa, {"kind": "APA", "eta": 0.5})
    assert merged["eta"] == 0.5 and merged["kind"] == "APA"
    ppo_none = STUDIES["kl-controller"][1]
    assert variant_loss(ppo_none, {"kind": "APA", "eta": 0.5}).get("eta") is None


def test_cells_run_in_parallel_identically():
    train = {"n_iterations": 1, "rollouts_per_iter": 8, "batch_size": 4, "lr": 0.03}
    cells = make_cells("kl-controller", [0], base_train=train, entries=STANDARD_SUITE[2:])
    serial = run_cells(cells, jobs=1)
    parallel = run_cells(cells, jobs=2)
    assert [o.rows for o in serial] == [o.rows for o in parallel]
    assert all(o.error is None for o in serial)
