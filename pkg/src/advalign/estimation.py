"""Generalized advantage estimation and squared-loss value fitting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import DivergedValueFit


class ValueFunction:
    """State-value model: a table ``params[s]`` or linear ``features[s] . params``.

    Kept separate from the policy; it never shares parameters with it.
    """

    def __init__(self, params, features=None):
        self.params = np.array(params, dtype=float)
        if features is not None:
            features = sp.csr_matrix(features, dtype=float) if sp.issparse(features) else np.asarray(features, dtype=float)
            if features.shape[1] != self.params.size:
                raise ValueError("feature width does not match params")
            self.n_states = features.shape[0]
        else:
            self.n_states = self.params.size
        self.features = features

    @classmethod
    def zeros(cls, n_states=None, features=None):
        if features is not None:
            return cls(np.zeros(features.shape[1]), features)
        return cls(np.zeros(n_states))

    @property
    def kind(self):
        return "table" if self.features is None else "linear"

    def copy(self):
        return ValueFunction(self.params.copy(), self.features)

    def with_params(self, params):
        return ValueFunction(params, self.features)

    def __call__(self, states=None):
        if self.features is None:
            return self.params if states is None else self.params[np.asarray(states, dtype=np.intp)]
        if states is None:
            return np.asarray(self.features @ self.params).ravel()
        return np.asarray(self.features[np.asarray(states, dtype=np.intp)] @ self.params).ravel()

    def next_values(self, next_states):
        """V(s') with the terminal convention V = 0 where ``next_states`` is -1."""
        next_states = np.asarray(next_states)
        out = np.zeros(len(next_states))
        live = next_states >= 0
        if live.any():
            out[live] = self(next_states[live])
        return out

    def backprop(self, states, dvalues):
        states = np.asarray(states, dtype=np.intp)
        if self.features is None:
            grad = np.zeros_like(self.params)
            np.add.at(grad, states, dvalues)
            return grad
        return np.asarray(self.features[states].T @ np.asarray(dvalues, dtype=float)).ravel()


@dataclass
class AdvantageEstimate:
    """Per-step advantages with the TD residuals and the value snapshot used."""

    advantages: np.ndarray
    deltas: np.ndarray
    values: np.ndarray  # V_old(s_t), the regression baseline for value fitting
    gamma: float
    gae_lambda: float

    @property
    def targets(self):
        """Value regression targets, advantage + V_old."""
        return self.advantages + self.values

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return AdvantageEstimate(self.advantages[idx], self.deltas[idx], self.values[idx],
                                 self.gamma, self.gae_lambda)

    def normalized(self, eps=1e-8):
        a = self.advantages
        return AdvantageEstimate((a - a.mean()) / (a.std() + eps), self.deltas, self.values,
                                 self.gamma, self.gae_lambda)


def gae(batch, vf, gamma=1.0, gae_lambda=0.95):
    """Generalized advantage estimates for every step of ``batch``.

    delta_t = r_t + gamma V(s_{t+1}) - V(s_t) with V = 0 after the terminal
    step, and A_t = sum_k (gamma * gae_lambda)^k delta_{t+k} within the
    episode, accumulated in one backward pass.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= gae_lambda <= 1.0):
        raise ValueError("gamma and gae_lambda must lie in [0, 1]")
    values = vf(batch.states) if callable(vf) else np.asarray(vf, dtype=float)[batch.states]
    if callable(vf):
        nxt = vf.next_values(batch.next_states)
    else:
        table = np.asarray(vf, dtype=float)
        nxt = np.where(batch.next_states >= 0, table[np.maximum(batch.next_states, 0)], 0.0)
    deltas = batch.rewards + gamma * nxt - values
    adv = np.empty_like(deltas)
    decay = gamma * gae_lambda
    ends = batch.next_states < 0
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        if ends[t]:
            running = 0.0
        running = deltas[t] + decay * running
        adv[t] = running
    return AdvantageEstimate(adv, deltas, np.array(values, dtype=float), float(gamma), float(gae_lambda))


def value_loss(vf, states, targets, old_values=None, clip_range=None):
    """Mean squared error of V(states) against ``targets`` and its gradient.

    With ``clip_range`` the PPO2-style clipped objective
    max((V - y)^2, (V_old + clip(V - V_old, -c, c) - y)^2) is used.
    """
    states = np.asarray(states, dtype=np.intp)
    targets = np.asarray(targets, dtype=float)
    n = max(len(states), 1)
    v = vf(states)
    err = v - targets
    if clip_range is None:
        return float(np.mean(err**2)) if len(states) else 0.0, vf.backprop(states, 2.0 * err / n)
    if old_values is None:
        raise ValueError("value clipping needs the old value snapshot")
    v_clip = old_values + np.clip(v - old_values, -clip_range, clip_range)
    err_clip = v_clip - targets
    use_clip = err_clip**2 > err**2
    inside = np.abs(v - old_values) < clip_range
    dv = np.where(use_clip, 2.0 * err_clip * inside, 2.0 * err) / n
    loss = np.where(use_clip, err_clip**2, err**2)
    return float(np.mean(loss)), vf.backprop(states, dv)


def fit_value(batch, vf, adv, steps=2, lr=8e-6):
    """Gradient descent on the value regression loss against advantage + V_old.

    ``adv.values`` must be the snapshot V_old that produced ``adv``.  Returns
    a new ValueFunction; ``vf`` is left untouched.
    """
    out = vf.copy()
    targets = adv.targets
    for _ in range(int(steps)):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = value_loss(out, batch.states, targets)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergedValueFit(f"value loss became non-finite ({loss})")
        out.params = out.params - lr * grad
    with np.errstate(over="ignore", invalid="ignore"):
        loss, _ = value_loss(out, batch.states, targets)
    if not np.isfinite(loss):
        raise DivergedValueFit(f"value loss became non-finite ({loss})")
    return out
