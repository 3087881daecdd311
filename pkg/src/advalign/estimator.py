"""Estimator-style wrapper around the training loop.

``fit`` takes the environment in place of a design matrix; ``y`` is unused
except as an optional logged dataset.  Hyperparameters live in ``__init__``
so ``get_params``/``set_params``/``clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossSpec
from .mdp import evaluate_exact, kl_divergence, random_policy
from .trainer import TrainConfig, train, train_offline


class PolicyAligner(BaseEstimator):
    """Align a softmax policy on a token MDP with APA, AWR or PPO.

    >>> from advalign.mdp import random_token_mdp
    >>> est = PolicyAligner(loss="APA", n_iterations=2, lr=0.03).fit(random_token_mdp(3, 3, seed=0))
    >>> est.predict_proba().shape
    (7, 3)
    """

    def __init__(self, loss="APA", kl_lambda=None, clip_epsilon=0.2, controller="adaptive", kl_target=0.05,
                 n_iterations=30, rollouts_per_iter=64, epochs_per_iter=2, batch_size=8, lr=0.03,
                 gae_lambda=0.95, policy_kind="context", policy_seed=None, random_state=0):
        self.loss = loss
        self.kl_lambda = kl_lambda
        self.clip_epsilon = clip_epsilon
        self.controller = controller
        self.kl_target = kl_target
        self.n_iterations = n_iterations
        self.rollouts_per_iter = rollouts_per_iter
        self.epochs_per_iter = epochs_per_iter
        self.batch_size = batch_size
        self.lr = lr
        self.gae_lambda = gae_lambda
        self.policy_kind = policy_kind
        self.policy_seed = policy_seed
        self.random_state = random_state

    def _config(self):
        spec = LossSpec(self.loss, kl_lambda=self.kl_lambda, clip_epsilon=self.clip_epsilon,
                        controller=self.controller, kl_target=self.kl_target)
        return TrainConfig(loss=spec, n_iterations=self.n_iterations, rollouts_per_iter=self.rollouts_per_iter,
                           epochs_per_iter=self.epochs_per_iter, batch_size=self.batch_size, lr=self.lr,
                           gae_lambda=self.gae_lambda, seed=self.random_state, eval_every=1)

    def fit(self, mdp, y=None, pi_init=None):
        """Train from ``pi_init`` (random bigram policy if omitted).

        Passing a RolloutBatch as ``y`` trains offline on it instead of
        sampling.
        """
        if pi_init is None:
            seed = self.policy_seed if self.policy_seed is not None else self.random_state + 1
            pi_init = random_policy(mdp, seed=seed, kind=self.policy_kind, frozen=True)
        cfg = self._config()
        if y is None:
            policy, metrics = train(mdp, pi_init, cfg)
        else:
            policy, metrics = train_offline(mdp, pi_init, y, cfg)
        self.mdp_ = mdp
        self.pi_init_ = pi_init.frozen_copy()
        self.policy_ = policy
        self.metrics_ = metrics
        self.n_states_, self.n_actions_ = policy.n_states, policy.n_actions
        return self

    def predict_proba(self, states=None):
        check_is_fitted(self, "policy_")
        return self.policy_.probs(states)

    def predict(self, states=None):
        """Greedy token at each state."""
        return np.argmax(self.predict_proba(states), axis=1)

    def score(self, mdp=None, y=None):
        """Exact expected reward of the fitted policy."""
        check_is_fitted(self, "policy_")
        return float(evaluate_exact(mdp if mdp is not None else self.mdp_, self.policy_).value)

    def kl_from_init(self):
        check_is_fitted(self, "policy_")
        ev = evaluate_exact(self.mdp_, self.policy_)
        return kl_divergence(self.mdp_, self.policy_, self.pi_init_, ev)
