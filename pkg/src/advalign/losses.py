"""Empirical policy losses (APA, AWR, PPO) with analytic gradients.

Every loss averages over all (state, action) pairs of the batch pooled
across episodes and returns ``(loss, grad)`` where ``grad`` has the shape of
``policy.theta``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import WeightOverflow

LOSS_KINDS = ("APA", "AWR", "PPO")
DEFAULT_KL_LAMBDA = {"APA": 0.1, "AWR": 1.0, "PPO": 0.05}
CONTROLLER_TYPES = ("adaptive", "fixed", "none")


def _advantages(adv):
    return np.asarray(getattr(adv, "advantages", adv), dtype=float)


def apa_loss(policy, pi_init, batch, adv, lam, corrupt=False):
    """mean_i (log pi(a_i|s_i) - adv_i / lam - log pi_init(a_i|s_i))^2.

    ``corrupt`` flips the gradient sign; it exists only so the verification
    report can demonstrate that a broken gradient is caught.
    """
    if len(batch.states) == 0:
        raise ValueError("empty batch")
    a = _advantages(adv)
    logp = policy.log_prob(batch.states, batch.actions)
    logp_init = pi_init.log_prob(batch.states, batch.actions)
    res = logp - a / lam - logp_init
    n = len(res)
    grad = policy.logp_backprop(batch.states, batch.actions, 2.0 * res / n)
    if corrupt:
        grad = -grad
    return float(np.mean(res**2)), grad


def awr_weights(adv, lam, weight_cap=1e6):
    w = np.exp(_advantages(adv) / lam)
    if not np.all(np.isfinite(w)) or np.any(w > weight_cap):
        raise WeightOverflow(
            f"exp(adv / lambda) reached {np.max(w):.3g} > cap {weight_cap:g}; lambda={lam} is too small"
        )
    return w


def awr_loss(policy, batch, adv, lam, weight_cap=1e6):
    """-mean_i exp(adv_i / lam) log pi(a_i|s_i)."""
    if len(batch.states) == 0:
        raise ValueError("empty batch")
    w = awr_weights(adv, lam, weight_cap)
    logp = policy.log_prob(batch.states, batch.actions)
    n = len(w)
    return float(-np.mean(w * logp)), policy.logp_backprop(batch.states, batch.actions, -w / n)


def ppo_loss(policy, batch, adv, eps):
    """Negated clipped surrogate, -mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i).

    rho_i = exp(log pi(a_i|s_i) - logp_old_i) with the recorded behaviour
    log-probabilities.  Samples whose clipped branch binds contribute no
    gradient.
    """
    if len(batch.states) == 0:
        raise ValueError("empty batch")
    a = _advantages(adv)
    logp = policy.log_prob(batch.states, batch.actions)
    ratio = np.exp(logp - batch.logp_old)
    surr = ratio * a
    surr_clip = np.clip(ratio, 1.0 - eps, 1.0 + eps) * a
    unclipped = surr <= surr_clip
    n = len(a)
    dlogp = np.where(unclipped, -surr / n, 0.0)
    loss = -np.mean(np.minimum(surr, surr_clip))
    return float(loss), policy.logp_backprop(batch.states, batch.actions, dlogp)


def ppo_clip_fraction(policy, batch, eps):
    ratio = np.exp(policy.log_prob(batch.states, batch.actions) - batch.logp_old)
    return float(np.mean(np.abs(ratio - 1.0) > eps))


# -- KL penalty ------------------------------------------------------------

@dataclass
class AdaptiveKlController:
    """Proportional controller on the reward-penalty coefficient.

    error = clip((kl - kl_target) / kl_target, -error_clip, error_clip)
    beta <- beta * (1 + gain * error)
    """

    beta: float = 0.05
    kl_target: float = 0.05
    gain: float = 0.1
    error_clip: float = 0.2

    def __post_init__(self):
        if self.beta <= 0 or self.kl_target <= 0:
            raise ValueError("beta and kl_target must be positive")
        if not 0 < self.gain * self.error_clip < 1:
            raise ValueError("gain * error_clip must lie in (0, 1) to keep beta positive")


def kl_controller_update(ctrl, observed_kl):
    if observed_kl < 0:
        raise ValueError("observed KL must be non-negative")
    err = np.clip((observed_kl - ctrl.kl_target) / ctrl.kl_target, -ctrl.error_clip, ctrl.error_clip)
    return replace(ctrl, beta=float(ctrl.beta * (1.0 + ctrl.gain * err)))


def penalized_reward(batch, policy, pi_init, beta):
    """Batch with r_t - beta * (log pi(a_t|s_t) - log pi_init(a_t|s_t))."""
    if beta == 0:
        return batch.with_rewards(batch.rewards.copy())
    log_ratio = policy.log_prob(batch.states, batch.actions) - pi_init.log_prob(batch.states, batch.actions)
    return batch.with_rewards(batch.rewards - beta * log_ratio)


# -- configuration ---------------------------------------------------------

@dataclass
class LossSpec:
    """Which loss to minimise and its hyperparameters.

    ``kl_lambda`` is the regularisation weight for APA/AWR and the initial
    reward-penalty coefficient for PPO.  ``controller`` selects how PPO's
    penalty evolves: "adaptive", "fixed" at ``kl_lambda``, or "none" (no
    penalty at all).
    """

    kind: str
    kl_lambda: float | None = None
    clip_epsilon: float = 0.2
    eta: float = 1.0
    controller: str = "adaptive"
    kl_target: float = 0.05
    controller_gain: float = 0.1
    controller_error_clip: float = 0.2
    value_clip: float | None = None
    weight_cap: float = 1e6

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.kl_lambda is None:
            self.kl_lambda = DEFAULT_KL_LAMBDA[self.kind]
        if self.kl_lambda <= 0:
            raise ValueError("kl_lambda must be positive")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.controller not in CONTROLLER_TYPES:
            raise ValueError(f"controller must be one of {CONTROLLER_TYPES}")

    def make_controller(self):
        if self.kind != "PPO" or self.controller != "adaptive":
            return None
        return AdaptiveKlController(self.kl_lambda, self.kl_target, self.controller_gain,
                                    self.controller_error_clip)

    def initial_beta(self):
        if self.kind != "PPO" or self.controller == "none":
            return 0.0
        return float(self.kl_lambda)

    def policy_loss(self, policy, pi_init, batch, adv, corrupt=False):
        if self.kind == "APA":
            return apa_loss(policy, pi_init, batch, adv, self.kl_lambda, corrupt=corrupt)
        if self.kind == "AWR":
            return awr_loss(policy, batch, adv, self.kl_lambda, self.weight_cap)
        return ppo_loss(policy, batch, adv, self.clip_epsilon)
