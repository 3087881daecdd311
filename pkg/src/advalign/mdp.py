"""Token-generation MDPs and exact dynamic-programming evaluation.

States are prefixes of tokens.  Token ``EOS`` (index 0) ends an episode, as
does reaching ``horizon`` tokens.  Non-terminal prefixes therefore use tokens
``1 .. vocab_size - 1`` only and are interned to dense integers level by
level: the prefix ``(x_1, ..., x_h)`` lives at

    offset[h] + sum_i (x_i - 1) * (vocab_size - 1) ** (h - i)

so parents, children and last tokens are pure integer arithmetic.

The terminal reward is looked up from a table of token suffixes; the longest
suffix of the finished sequence present in the table wins, and sequences
matching no entry score 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .exceptions import StateSpaceTooLarge
from .policy import SoftmaxPolicy

EOS = 0
DEFAULT_STATE_CAP = 10**6


@dataclass(eq=False)
class TokenMdp:
    """Finite-horizon MDP with deterministic concatenation transitions."""

    vocab_size: int
    horizon: int
    reward: dict = field(default_factory=dict)
    gamma: float = 1.0
    initial: dict | None = None
    seed: int | None = None
    state_cap: int = DEFAULT_STATE_CAP

    def __post_init__(self):
        if int(self.vocab_size) < 1 or int(self.horizon) < 1:
            raise ValueError("vocab_size and horizon must be positive")
        self.vocab_size = int(self.vocab_size)
        self.horizon = int(self.horizon)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        reward = {}
        for suffix, value in dict(self.reward).items():
            suffix = tuple(int(t) for t in suffix)
            if not suffix or any(t < 0 or t >= self.vocab_size for t in suffix):
                raise ValueError(f"bad reward suffix {suffix!r}")
            reward[suffix] = min(1.0, max(0.0, float(value)))
        self.reward = reward
        initial = {(): 1.0} if self.initial is None else dict(self.initial)
        self.initial = {}
        for prefix, prob in initial.items():
            prefix = tuple(int(t) for t in prefix)
            self._check_prefix(prefix)
            if prob < 0:
                raise ValueError("initial probabilities must be non-negative")
            self.initial[prefix] = float(prob)
        if abs(sum(self.initial.values()) - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")

    def _check_prefix(self, prefix):
        if len(prefix) >= self.horizon or any(t <= EOS or t >= self.vocab_size for t in prefix):
            raise ValueError(f"{prefix!r} is not a non-terminal prefix")

    def check_size(self):
        if self.vocab_size**self.horizon > self.state_cap:
            raise StateSpaceTooLarge(
                f"|X|^H = {self.vocab_size}^{self.horizon} exceeds the cap {self.state_cap}"
            )

    # -- state indexing ---------------------------------------------------

    @property
    def branching(self):
        return self.vocab_size - 1

    @cached_property
    def level_sizes(self):
        return np.array([self.branching**h for h in range(self.horizon)], dtype=np.int64)

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.level_sizes)]).astype(np.int64)

    @property
    def n_states(self):
        return int(self.offsets[-1])

    @property
    def n_actions(self):
        return self.vocab_size

    def level(self, h):
        return slice(int(self.offsets[h]), int(self.offsets[h + 1]))

    def index_of(self, prefix):
        prefix = tuple(prefix)
        self._check_prefix(prefix)
        i = 0
        for t in prefix:
            i = i * self.branching + (t - 1)
        return int(self.offsets[len(prefix)] + i)

    def prefix_of(self, index):
        index = int(index)
        if not 0 <= index < self.n_states:
            raise IndexError(index)
        h = int(np.searchsorted(self.offsets, index, side="right") - 1)
        i = index - int(self.offsets[h])
        tokens = []
        for _ in range(h):
            i, r = divmod(i, self.branching)
            tokens.append(r + 1)
        return tuple(reversed(tokens))

    @cached_property
    def _structure(self):
        self.check_size()
        S, V, b = self.n_states, self.vocab_size, self.branching
        depth = np.zeros(S, dtype=np.int64)
        last = np.zeros(S, dtype=np.int64)
        parent = np.full(S, -1, dtype=np.int64)
        child = np.full((S, V), -1, dtype=np.int64)
        for h in range(self.horizon):
            sl = self.level(h)
            i = np.arange(self.level_sizes[h])
            depth[sl] = h
            if h > 0:
                parent[sl] = self.offsets[h - 1] + i // b
                last[sl] = i % b + 1
            if h + 1 < self.horizon and b > 0:
                child[sl, 1:] = self.offsets[h + 1] + i[:, None] * b + np.arange(b)
        return depth, last, parent, child

    @property
    def depth(self):
        return self._structure[0]

    @property
    def last_token(self):
        """Last token of each state; 0 for the empty prefix."""
        return self._structure[1]

    @property
    def parent(self):
        return self._structure[2]

    @property
    def child(self):
        """child[s, a] is the index of s + (a,), or -1 when that ends the episode."""
        return self._structure[3]

    @cached_property
    def terminal_reward(self):
        """r(s, a): reward of the finished sequence s + (a,), 0 where not terminal."""
        S, V = self.n_states, self.vocab_size
        out = np.zeros((S, V))
        if not self.reward:
            return out
        depth, last, parent, child = self._structure
        terminal = child < 0
        by_len = {}
        for suffix, value in self.reward.items():
            by_len.setdefault(len(suffix), {})[suffix] = value
        # back[k][s]: k-th token from the end of prefix s (k = 1 is the last)
        back = {1: last}
        for L in sorted(by_len):
            for k in range(2, L):
                if k not in back:
                    prev = back[k - 1]
                    back[k] = np.where(parent >= 0, prev[np.maximum(parent, 0)], 0)
            ok_state = depth >= L - 1
            states = np.nonzero(ok_state)[0]
            if len(states) == 0:
                continue
            code = np.zeros(len(states), dtype=np.int64)
            for k in range(L - 1, 0, -1):
                code = code * V + back[k][states]
            code = code[:, None] * V + np.arange(V)
            table = {}
            for suffix, value in by_len[L].items():
                c = 0
                for t in suffix:
                    c = c * V + t
                table[c] = value
            uniq, inv = np.unique(code, return_inverse=True)
            vals = np.array([table.get(int(c), np.nan) for c in uniq])[inv].reshape(code.shape)
            hit = ~np.isnan(vals) & terminal[states]
            block = out[states]
            block[hit] = vals[hit]
            out[states] = block
        return out

    @cached_property
    def initial_vector(self):
        rho = np.zeros(self.n_states)
        for prefix, prob in self.initial.items():
            rho[self.index_of(prefix)] += prob
        return rho

    # -- serialisation ----------------------------------------------------

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "reward": [[list(k), v] for k, v in sorted(self.reward.items())],
            "initial": [[list(k), v] for k, v in sorted(self.initial.items())],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc, state_cap=DEFAULT_STATE_CAP):
        initial = doc.get("initial")
        return cls(
            vocab_size=doc["vocab_size"],
            horizon=doc["horizon"],
            gamma=doc.get("gamma", 1.0),
            reward={tuple(k): v for k, v in doc.get("reward", [])},
            initial=None if initial is None else {tuple(k): v for k, v in initial},
            seed=doc.get("seed"),
            state_cap=state_cap,
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text, state_cap=DEFAULT_STATE_CAP):
        return cls.from_dict(json.loads(text), state_cap=state_cap)

    def __repr__(self):
        return (f"TokenMdp(vocab_size={self.vocab_size}, horizon={self.horizon}, "
                f"gamma={self.gamma}, n_rewards={len(self.reward)}, seed={self.seed})")


def random_token_mdp(vocab_size, horizon, seed=0, suffix_len=2, gamma=1.0, state_cap=DEFAULT_STATE_CAP):
    """MDP whose reward table assigns U[0, 1] values to every suffix of length <= suffix_len."""
    rng = np.random.default_rng(seed)
    reward = {}
    for L in range(1, suffix_len + 1):
        grid = np.indices((vocab_size,) * L).reshape(L, -1).T
        values = rng.uniform(0.0, 1.0, size=len(grid))
        for suffix, v in zip(grid, values):
            reward[tuple(int(t) for t in suffix)] = float(v)
    return TokenMdp(vocab_size, horizon, reward, gamma=gamma, seed=seed, state_cap=state_cap)


def bandit_mdp(rewards):
    """One-step MDP: action ``a`` ends the episode with reward ``rewards[a]``."""
    rewards = list(rewards)
    return TokenMdp(len(rewards), 1, {(a,): r for a, r in enumerate(rewards)})


# -- features --------------------------------------------------------------

def context_features(mdp):
    """Sparse one-hot features of (last token, action) and (depth, action).

    A policy linear in these features is a position-aware bigram model.
    """
    S, V, H = mdp.n_states, mdp.vocab_size, mdp.horizon
    rows = np.arange(S * V)
    s = rows // V
    a = rows % V
    c1 = mdp.last_token[s] * V + a
    c2 = V * V + mdp.depth[s] * V + a
    data = np.ones(2 * S * V)
    return sp.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([c1, c2]))),
        shape=(S * V, V * V + H * V),
    )


def context_value_features(mdp):
    """One-hot (last token, depth) indicator per state."""
    S, H = mdp.n_states, mdp.horizon
    cols = mdp.last_token * H + mdp.depth
    return sp.csr_matrix((np.ones(S), (np.arange(S), cols)), shape=(S, mdp.vocab_size * H))


def random_policy(mdp, seed=0, scale=1.0, kind="table", eos_bias=0.0, frozen=False):
    """Random softmax policy with N(0, scale^2) parameters.

    ``eos_bias`` is added to the logit of the end token at every state.
    """
    rng = np.random.default_rng(seed)
    V = mdp.vocab_size
    if kind == "table":
        logits = scale * rng.standard_normal((mdp.n_states, V))
        logits[:, EOS] += eos_bias
        return SoftmaxPolicy.table(logits, frozen=frozen)
    if kind == "context":
        phi = context_features(mdp)
        theta = scale * rng.standard_normal(phi.shape[1])
        # bias columns for (depth, EOS)
        theta[V * V + np.arange(mdp.horizon) * V + EOS] += eos_bias
        return SoftmaxPolicy.linear(phi, theta, n_actions=V, frozen=frozen)
    raise ValueError(f"unknown policy kind {kind!r}")


def uniform_policy(mdp, kind="table"):
    if kind == "table":
        return SoftmaxPolicy.table(np.zeros((mdp.n_states, mdp.vocab_size)))
    phi = context_features(mdp)
    return SoftmaxPolicy.linear(phi, np.zeros(phi.shape[1]), n_actions=mdp.vocab_size)


# -- exact evaluation ------------------------------------------------------

@dataclass
class ExactEvaluation:
    """V, Q, advantages and occupancy of one policy, by backward induction.

    Occupancies are normalised over the steps actually taken (the expected
    episode length), which equals 1/H when no episode stops early.
    """

    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    d_state: np.ndarray
    d_action: np.ndarray
    visits: np.ndarray
    value: float
    expected_length: float


def _check_policy(mdp, policy):
    if policy.n_states != mdp.n_states or policy.n_actions != mdp.n_actions:
        raise ValueError(
            f"policy shape ({policy.n_states}, {policy.n_actions}) does not match "
            f"MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def _probs(mdp, policy):
    if isinstance(policy, SoftmaxPolicy):
        _check_policy(mdp, policy)
        return policy.probs()
    probs = np.asarray(policy, dtype=float)
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("probability table has the wrong shape")
    return probs


def evaluate_exact(mdp, policy):
    """Exact V/Q/advantage/occupancy of ``policy`` (a SoftmaxPolicy or a probability table)."""
    mdp.check_size()
    probs = _probs(mdp, policy)
    child, R = mdp.child, mdp.terminal_reward
    S = mdp.n_states
    v = np.zeros(S)
    q = np.zeros_like(R)
    for h in reversed(range(mdp.horizon)):
        sl = mdp.level(h)
        ch = child[sl]
        cont = np.where(ch >= 0, v[np.maximum(ch, 0)], 0.0)
        q[sl] = R[sl] + mdp.gamma * cont
        v[sl] = np.einsum("ij,ij->i", probs[sl], q[sl])
    adv = q - v[:, None]

    visits = mdp.initial_vector.copy()
    for h in range(mdp.horizon - 1):
        sl = mdp.level(h)
        flow = visits[sl, None] * probs[sl, 1:]
        nxt = mdp.level(h + 1)
        visits[nxt] += flow.ravel()
    length = visits.sum()
    d_state = visits / length
    return ExactEvaluation(
        v=v,
        q=q,
        adv=adv,
        d_state=d_state,
        d_action=d_state[:, None] * probs,
        visits=visits,
        value=float(mdp.initial_vector @ v),
        expected_length=float(length),
    )


def state_kl(p, q):
    """Row-wise KL(p(.|s) || q(.|s)) for two policies on the same state set."""
    lp = p.log_probs() if isinstance(p, SoftmaxPolicy) else np.log(p)
    lq = q.log_probs() if isinstance(q, SoftmaxPolicy) else np.log(q)
    return np.einsum("ij,ij->i", np.exp(lp), lp - lq)


def kl_divergence(mdp, p, q, weighting):
    """KL(p || q) averaged over states.

    ``weighting`` is an :class:`ExactEvaluation` (occupancy-weighted) or any
    object with a ``states`` array, such as a rollout batch (sample average).
    """
    _check_policy(mdp, p)
    _check_policy(mdp, q)
    if isinstance(weighting, ExactEvaluation):
        return float(max(0.0, weighting.d_state @ state_kl(p, q)))
    states = np.asarray(weighting.states, dtype=np.intp)
    uniq, counts = np.unique(states, return_counts=True)
    lp, lq = p.log_probs(uniq), q.log_probs(uniq)
    rows = np.einsum("ij,ij->i", np.exp(lp), lp - lq)
    return float(max(0.0, counts @ rows / len(states)))
