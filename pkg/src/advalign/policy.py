"""Softmax policies over a finite state/action set.

A policy is either a dense logit table ``theta[s, a]`` or linear in features,
``q(s, a) = phi(s, a) . theta``.  Features are stored as a ``(S * A, d)``
matrix (dense or scipy sparse) whose row ``s * A + a`` is ``phi(s, a)``.
All gradients are routed through :meth:`SoftmaxPolicy.backprop`, which turns
a gradient with respect to the logits of some states into a gradient with
respect to ``theta``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp


def _as_feature_matrix(features, n_actions):
    if sp.issparse(features):
        return sp.csr_matrix(features, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.ndim == 3:
        if features.shape[1] != n_actions:
            raise ValueError("3-d features must have shape (S, A, d)")
        features = features.reshape(-1, features.shape[2])
    if features.ndim != 2:
        raise ValueError("features must be (S * A, d) or (S, A, d)")
    return features


class SoftmaxPolicy:
    """pi(a|s) proportional to exp(q(s, a))."""

    def __init__(self, theta, features=None, n_actions=None, frozen=False):
        theta = np.array(theta, dtype=float)
        if features is None:
            if theta.ndim != 2:
                raise ValueError("a table policy needs a (n_states, n_actions) logit table")
            self.n_states, self.n_actions = theta.shape
            self.features = None
        else:
            if n_actions is None:
                if np.ndim(features) == 3:
                    n_actions = np.shape(features)[1]
                else:
                    raise ValueError("n_actions is required with 2-d features")
            self.features = _as_feature_matrix(features, n_actions)
            rows, dim = self.features.shape
            if rows % n_actions:
                raise ValueError("feature rows must be a multiple of n_actions")
            if theta.shape != (dim,):
                raise ValueError(f"theta must have shape ({dim},), got {theta.shape}")
            self.n_actions = int(n_actions)
            self.n_states = rows // self.n_actions
        self._theta = theta
        self.frozen = bool(frozen)

    @classmethod
    def table(cls, logits, frozen=False):
        return cls(logits, frozen=frozen)

    @classmethod
    def linear(cls, features, theta, n_actions=None, frozen=False):
        return cls(theta, features=features, n_actions=n_actions, frozen=frozen)

    @property
    def kind(self):
        return "table" if self.features is None else "linear"

    @property
    def theta(self):
        return self._theta

    @theta.setter
    def theta(self, value):
        if self.frozen:
            raise AttributeError("cannot update the parameters of a frozen policy")
        value = np.asarray(value, dtype=float)
        if value.shape != self._theta.shape:
            raise ValueError(f"expected shape {self._theta.shape}, got {value.shape}")
        self._theta = value.copy()

    @property
    def n_params(self):
        return self._theta.size

    def copy(self, frozen=None):
        out = SoftmaxPolicy.__new__(SoftmaxPolicy)
        out.__dict__.update(self.__dict__)
        out._theta = self._theta.copy()
        out.frozen = self.frozen if frozen is None else bool(frozen)
        return out

    def frozen_copy(self):
        return self.copy(frozen=True)

    def with_params(self, theta):
        out = self.copy(frozen=False)
        out.theta = theta
        return out

    # -- evaluation -------------------------------------------------------

    def _rows(self, states):
        states = np.asarray(states, dtype=np.intp)
        return (states[:, None] * self.n_actions + np.arange(self.n_actions)).ravel()

    def logits(self, states=None):
        if self.features is None:
            return self._theta if states is None else self._theta[np.asarray(states, dtype=np.intp)]
        if states is None:
            return np.asarray(self.features @ self._theta).reshape(self.n_states, self.n_actions)
        phi = self.features[self._rows(states)]
        return np.asarray(phi @ self._theta).reshape(-1, self.n_actions)

    def log_probs(self, states=None):
        z = self.logits(states)
        return z - logsumexp(z, axis=1, keepdims=True)

    def probs(self, states=None):
        return np.exp(self.log_probs(states))

    def log_prob(self, states, actions):
        states = np.asarray(states, dtype=np.intp)
        actions = np.asarray(actions, dtype=np.intp)
        return self.log_probs(states)[np.arange(len(states)), actions]

    # -- gradients --------------------------------------------------------

    def backprop(self, states, dlogits):
        """Map d(loss)/d(logits[states]) of shape (n, A) to d(loss)/d(theta).

        Repeated states are accumulated.
        """
        states = np.asarray(states, dtype=np.intp)
        dlogits = np.asarray(dlogits, dtype=float)
        if self.features is None:
            grad = np.zeros_like(self._theta)
            np.add.at(grad, states, dlogits)
            return grad
        phi = self.features[self._rows(states)]
        return np.asarray(phi.T @ dlogits.ravel()).ravel()

    def logp_backprop(self, states, actions, dlogp):
        """Gradient of ``sum_i dlogp[i] * log pi(a_i|s_i)`` with respect to theta."""
        states = np.asarray(states, dtype=np.intp)
        actions = np.asarray(actions, dtype=np.intp)
        dlogp = np.asarray(dlogp, dtype=float)
        uniq, inv = np.unique(states, return_inverse=True)
        p = self.probs(uniq)
        # d log pi(a|s) / d logits(s, .) = onehot(a) - pi(.|s)
        dl = np.zeros((len(uniq), self.n_actions))
        np.add.at(dl, (inv, actions), dlogp)
        dl -= p * np.bincount(inv, weights=dlogp, minlength=len(uniq))[:, None]
        return self.backprop(uniq, dl)

    def grad_log_prob(self, state, action):
        """Gradient of log pi(action|state) with respect to theta."""
        return self.logp_backprop([state], [action], [1.0])

    def sample_actions(self, states, uniforms):
        """Inverse-CDF sampling of one action per state from ``uniforms`` in [0, 1)."""
        cdf = np.cumsum(self.probs(states), axis=1)
        cdf[:, -1] = np.inf
        return (uniforms[:, None] >= cdf).sum(axis=1)

    def to_dict(self):
        """Serialisable full logit table (features are not stored)."""
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "logits": self.logits().tolist(),
        }

    def __repr__(self):
        return f"SoftmaxPolicy(kind={self.kind!r}, n_states={self.n_states}, n_actions={self.n_actions})"
