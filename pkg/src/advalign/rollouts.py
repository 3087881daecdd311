"""Rollout batches: sampling, pooling and newline-delimited JSON replay."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .mdp import EOS


@dataclass
class RolloutBatch:
    """Flat, trajectory-major storage of sampled episodes.

    Step ``i`` belongs to episode ``episode[i]``; the steps of one episode are
    contiguous and in time order.  ``next_states`` is -1 where the step ends
    the episode.  ``logp_old`` is log pi_old(a|s) recorded at sampling time.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    logp_old: np.ndarray
    episode: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.next_states = np.asarray(self.next_states, dtype=np.int64)
        self.logp_old = np.asarray(self.logp_old, dtype=float)
        self.episode = np.asarray(self.episode, dtype=np.int64)
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "logp_old", "episode"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.states)

    @property
    def n_steps(self):
        return len(self.states)

    @property
    def n_episodes(self):
        return len(self.episode_starts)

    @property
    def done(self):
        return self.next_states < 0

    @property
    def episode_starts(self):
        if len(self.episode) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.r_[True, self.episode[1:] != self.episode[:-1]])

    def returns(self):
        """Undiscounted return of every episode, in episode order."""
        starts = self.episode_starts
        if len(starts) == 0:
            return np.zeros(0)
        return np.add.reduceat(self.rewards, starts)

    def with_rewards(self, rewards):
        return replace(self, rewards=np.asarray(rewards, dtype=float), meta=dict(self.meta))

    def select_episodes(self, episode_ids):
        mask = np.isin(self.episode, np.asarray(episode_ids))
        return self.take(np.flatnonzero(mask))

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return RolloutBatch(
            self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
            self.logp_old[idx], self.episode[idx], dict(self.meta),
        )

    @classmethod
    def from_pairs(cls, states, actions, logp_old=None, rewards=None):
        """Independent one-step episodes, for losses over bare (s, a) samples."""
        states = np.asarray(states, dtype=np.int64)
        n = len(states)
        return cls(
            states, actions,
            np.zeros(n) if rewards is None else rewards,
            np.full(n, -1),
            np.zeros(n) if logp_old is None else logp_old,
            np.arange(n),
        )

    def trajectories(self):
        """Yield (states, actions, rewards, logp_old) per episode."""
        bounds = list(self.episode_starts) + [len(self)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            yield self.states[a:b], self.actions[a:b], self.rewards[a:b], self.logp_old[a:b]

    # -- JSONL ------------------------------------------------------------

    def to_jsonl(self, mdp, path):
        with open(path, "w") as fh:
            for line in self.jsonl_lines(mdp):
                fh.write(line + "\n")

    def jsonl_lines(self, mdp):
        for states, actions, rewards, logp in self.trajectories():
            yield json.dumps({
                "prefix": list(mdp.prefix_of(states[0])),
                "actions": actions.tolist(),
                "rewards": rewards.tolist(),
                "logp_old": logp.tolist(),
                "meta": self.meta,
            }, sort_keys=True)

    @classmethod
    def from_jsonl(cls, mdp, path):
        with open(path) as fh:
            return cls.from_records(mdp, [json.loads(line) for line in fh if line.strip()])

    @classmethod
    def from_records(cls, mdp, records):
        cols = {k: [] for k in ("states", "actions", "rewards", "next_states", "logp_old", "episode")}
        meta = {}
        for ep, rec in enumerate(records):
            s = mdp.index_of(rec["prefix"])
            actions = rec["actions"]
            if not (len(actions) == len(rec["rewards"]) == len(rec["logp_old"])) or not actions:
                raise ValueError(f"malformed trajectory record {ep}")
            for t, a in enumerate(actions):
                nxt = int(mdp.child[s, a])
                if nxt < 0 and t != len(actions) - 1:
                    raise ValueError(f"trajectory {ep} continues past a terminal step")
                cols["states"].append(s)
                cols["actions"].append(a)
                cols["next_states"].append(nxt)
                cols["episode"].append(ep)
                s = nxt
            if s >= 0:
                raise ValueError(f"trajectory {ep} does not end in a terminal state")
            cols["rewards"].extend(rec["rewards"])
            cols["logp_old"].extend(rec["logp_old"])
            meta = rec.get("meta", meta)
        return cls(**{k: np.array(v) for k, v in cols.items()}, meta=dict(meta))


def concat_batches(batches):
    out, offset = [], 0
    for b in batches:
        out.append((b, offset))
        offset += b.n_episodes
    if not out:
        raise ValueError("nothing to concatenate")

    def cat(name):
        return np.concatenate([getattr(b, name) for b, _ in out])

    episode = np.concatenate([np.unique(b.episode, return_inverse=True)[1] + off for b, off in out])
    return RolloutBatch(cat("states"), cat("actions"), cat("rewards"), cat("next_states"),
                        cat("logp_old"), episode, dict(out[0][0].meta))


def sample_rollouts(mdp, policy, n_episodes, seed, tag=None):
    """Sample ``n_episodes`` complete episodes of ``policy`` on ``mdp``.

    All episodes advance in lock step; the output is reordered so each
    episode's steps are contiguous.  Identical (mdp, policy, seed) give
    identical batches.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    rho = mdp.initial_vector
    support = np.flatnonzero(rho)
    cur = support[rng.choice(len(support), size=n_episodes, p=rho[support] / rho[support].sum())]
    log_probs = policy.log_probs()
    cdf = np.cumsum(np.exp(log_probs), axis=1)
    cdf[:, -1] = np.inf
    child, R = mdp.child, mdp.terminal_reward
    ep_ids = np.arange(n_episodes)
    steps = []
    t = 0
    while len(cur):
        u = rng.random(len(cur))
        a = (u[:, None] >= cdf[cur]).sum(axis=1)
        nxt = child[cur, a]
        steps.append((cur, a, R[cur, a], nxt, log_probs[cur, a], ep_ids, np.full(len(cur), t)))
        alive = nxt >= 0
        cur, ep_ids = nxt[alive], ep_ids[alive]
        t += 1
    cols = [np.concatenate(c) for c in zip(*steps)]
    order = np.lexsort((cols[6], cols[5]))
    states, actions, rewards, nxt, logp, episode = (c[order] for c in cols[:6])
    return RolloutBatch(states, actions, rewards, nxt, logp, episode,
                        meta={"seed": int(seed) if isinstance(seed, (int, np.integer)) else None,
                              "policy_tag": tag})


def empirical_occupancy(mdp, batch):
    """Pooled (state, action) frequencies of a batch, shape (S, A)."""
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(counts, (batch.states, batch.actions), 1.0)
    return counts / max(len(batch), 1)


__all__ = ["RolloutBatch", "sample_rollouts", "concat_batches", "empirical_occupancy", "EOS"]
