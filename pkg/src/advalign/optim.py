"""First-order parameter updates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteParameters


@dataclass
class AdamState:
    """Adaptive-moment optimiser state.

    The default ``beta1 = 0`` disables momentum, leaving a bias-corrected
    running second moment (RMSProp-like).
    """

    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def optimize_step(params, gradient, lr, state=None, method="adam"):
    """One deterministic update; returns (new_params, new_state).

    ``method`` is "adam" (uses and returns an AdamState) or "sgd".
    """
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if params.shape != gradient.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteParameters("non-finite gradient", {"gradient": gradient})
    if method == "sgd":
        with np.errstate(over="ignore", invalid="ignore"):
            new = params - lr * gradient
        state = None
    elif method == "adam":
        state = AdamState() if state is None else state
        m = np.zeros_like(params) if state.m is None else state.m
        v = np.zeros_like(params) if state.v is None else state.v
        t = state.step + 1
        m = state.beta1 * m + (1 - state.beta1) * gradient
        v = state.beta2 * v + (1 - state.beta2) * gradient**2
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state = AdamState(state.beta1, state.beta2, state.eps, t, m, v)
    else:
        raise ValueError(f"unknown optimiser {method!r}")
    if not np.all(np.isfinite(new)):
        raise NonFiniteParameters("parameters became non-finite", {"params": params, "gradient": gradient})
    return new, state


def minimize(fun, x0, lr, steps, method="sgd", tol=0.0):
    """Run ``steps`` updates of ``fun(x) -> (loss, grad)`` from ``x0``.

    Stops early when the gradient max-norm falls below ``tol``.  Returns
    (x, loss history).
    """
    x = np.asarray(x0, dtype=float).copy()
    state = None
    history = []
    for _ in range(int(steps)):
        loss, grad = fun(x)
        history.append(loss)
        if tol and np.max(np.abs(grad)) < tol:
            break
        x, state = optimize_step(x, grad, lr, state, method)
    return x, history
