"""Closed-form ground truth for the KL-regularised improvement step.

For a fixed advantage table the single-state problem

    maximise_p  E_{a~p}[adv(s, a)] - lam * KL(p || pi_ref(.|s))

is solved by p(a) = pi_ref(a|s) exp(adv(s, a) / lam) / Z(s).  With pi_ref the
initial policy this is the APA target; with pi_ref the sampling policy it is
the AWR fixed point.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .mdp import evaluate_exact
from .policy import SoftmaxPolicy


def _log_table(policy):
    if isinstance(policy, SoftmaxPolicy):
        return policy.log_probs()
    p = np.atleast_2d(np.asarray(policy, dtype=float))
    with np.errstate(divide="ignore"):
        return np.log(p)


def reweighted_policy(pi_ref, adv, lam):
    """Rows proportional to pi_ref * exp(adv / lam), and the per-state normaliser Z."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    adv = np.atleast_2d(np.asarray(adv, dtype=float))
    if not np.all(np.isfinite(adv)):
        raise ValueError("advantages must be finite")
    logits = _log_table(pi_ref) + adv / lam
    log_z = logsumexp(logits, axis=1, keepdims=True)
    return np.exp(logits - log_z), np.exp(log_z[:, 0])


def target_policy(pi_init, adv, lam):
    """Maximiser of the KL-regularised advantage objective, with Z(s)."""
    return reweighted_policy(pi_init, adv, lam)


def awr_fixed_point(pi_old, adv, lam):
    """Population minimiser of the advantage-weighted log loss under pi_old."""
    return reweighted_policy(pi_old, adv, lam)[0]


def z_diagnostic(pi_init, adv, lam):
    """Per-state Z(s) = sum_a pi_init(a|s) exp(adv(s, a) / lam)."""
    return reweighted_policy(pi_init, adv, lam)[1]


def max_z_deviation(pi_init, adv, lam):
    return float(np.max(np.abs(z_diagnostic(pi_init, adv, lam) - 1.0)))


def kl_rows(p, q):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def objective_F(policy_row, pi_init_row, adv_row, lam):
    """E_{a~policy}[adv] - lam * KL(policy || pi_init) for one state."""
    policy_row = np.asarray(policy_row, dtype=float)
    return float(policy_row @ np.asarray(adv_row, dtype=float)
                 - lam * kl_rows(policy_row, pi_init_row)[0])


def objective_F_rows(policies, pi_init_row, adv_row, lam):
    """objective_F for a stack of candidate rows, shape (n, A)."""
    policies = np.atleast_2d(policies)
    return policies @ np.asarray(adv_row, dtype=float) - lam * kl_rows(
        policies, np.broadcast_to(pi_init_row, policies.shape))


def apa_f_divergence(p_star_row, p_theta_row):
    """sum_a p_theta(a) log^2(p_theta(a) / p_star(a)), the f-divergence with f(x) = x log^2 x."""
    p_star = np.asarray(p_star_row, dtype=float)
    p_theta = np.asarray(p_theta_row, dtype=float)
    if np.any(p_star <= 0) or np.any(p_theta <= 0):
        raise ValueError("both distributions must be strictly positive")
    return float(np.sum(p_theta * np.log(p_theta / p_star) ** 2, axis=-1))


def exact_regularized_iteration(mdp, pi, pi_init, lam):
    """Ideal next iterate: the target policy built from pi's exact advantages."""
    ev = evaluate_exact(mdp, pi)
    return target_policy(pi_init, ev.adv, lam)[0]


def apa_population_loss(log_policy, log_init, adv, lam, d_action):
    """Occupancy-weighted APA loss of a full log-probability table."""
    res = log_policy - adv / lam - log_init
    return float(np.sum(d_action * res**2))


def total_variation(p, q):
    """Row-wise total variation distance."""
    return 0.5 * np.abs(np.atleast_2d(p) - np.atleast_2d(q)).sum(axis=1)
