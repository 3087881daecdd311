"""Policy iteration: roll out, estimate advantages, take loss-minimising steps.

One *step* is one gradient update of the policy (and of the standalone value
function alongside it).  One *iteration* samples a fresh batch from the
current policy, freezes the value snapshot and the behaviour
log-probabilities, then runs ``epochs_per_iter`` passes over the batch in
minibatches of ``batch_size`` episodes.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimation import ValueFunction, gae, value_loss
from .exceptions import NonFiniteParameters
from .losses import LossSpec, kl_controller_update, penalized_reward
from .mdp import context_value_features, evaluate_exact, kl_divergence
from .optim import AdamState, optimize_step
from .rollouts import sample_rollouts

CSV_COLUMNS = ("step", "reward_exact", "reward_emp", "kl_exact", "kl_emp", "loss", "value_loss", "beta")


@dataclass
class TrainConfig:
    loss: LossSpec
    n_iterations: int = 1
    rollouts_per_iter: int = 64
    epochs_per_iter: int = 2
    batch_size: int = 8
    lr: float = 8e-6
    value_lr: float | None = None
    gae_lambda: float = 0.95
    normalize_advantages: bool = False
    value_param: str = "context"
    optimizer: str = "adam"
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "online"
    offline_data_path: str | None = None
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        self.validate()

    def validate(self):
        for name in ("rollouts_per_iter", "epochs_per_iter", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if int(self.n_iterations) < 0:
            raise ValueError("n_iterations must be non-negative")
        if self.lr <= 0 or (self.value_lr is not None and self.value_lr <= 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.mode not in ("online", "offline"):
            raise ValueError("mode must be 'online' or 'offline'")
        if self.value_param not in ("context", "table"):
            raise ValueError("value_param must be 'context' or 'table'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricRecord:
    step: int
    reward_exact: float
    reward_emp: float
    kl_exact: float
    kl_emp: float
    loss: float
    value_loss: float
    beta: float
    iteration: int = 0
    wall_time: float = 0.0


@dataclass
class TrainMetrics:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def last(self):
        return self.records[-1] if self.records else None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path=None):
        """CSV with the fixed column order; wall time is deliberately excluded."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.step] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def make_value_function(mdp, kind="context"):
    if kind == "context":
        return ValueFunction.zeros(features=context_value_features(mdp))
    return ValueFunction.zeros(mdp.n_states)


def _iteration_rngs(seed, t):
    ss = np.random.SeedSequence([int(seed), int(t)])
    rollout_ss, shuffle_ss = ss.spawn(2)
    return rollout_ss, np.random.default_rng(shuffle_ss)


class _Loop:
    """Mutable training state shared by the online and offline drivers."""

    def __init__(self, mdp, pi_init, cfg, value_fn=None):
        cfg.validate()
        self.mdp, self.cfg, self.spec = mdp, cfg, cfg.loss
        self.pi_init = pi_init.frozen_copy()
        self.policy = pi_init.copy(frozen=False)
        self.vf = value_fn.copy() if value_fn is not None else make_value_function(mdp, cfg.value_param)
        self.ctrl = self.spec.make_controller()
        self.beta = self.ctrl.beta if self.ctrl is not None else self.spec.initial_beta()
        self.metrics = TrainMetrics()
        self.step = 0
        self._pstate = self._vstate = None
        self._t0 = time.perf_counter()

    def _adam(self):
        c = self.cfg
        return AdamState(c.adam_beta1, c.adam_beta2, c.adam_eps)

    def iterate(self, t, batch_raw):
        cfg, spec = self.cfg, self.spec
        _, rng = _iteration_rngs(cfg.seed, t)
        behaviour_kl = kl_divergence(self.mdp, self.policy, self.pi_init, batch_raw)
        if spec.kind == "PPO":
            batch = penalized_reward(batch_raw, self.policy, self.pi_init, self.beta)
        else:
            batch = batch_raw
        adv = gae(batch, self.vf.copy(), self.mdp.gamma, cfg.gae_lambda)
        if cfg.normalize_advantages:
            adv = adv.normalized()

        episodes = np.unique(batch.episode)
        starts = batch.episode_starts
        bounds = np.r_[starts, len(batch)]
        steps_of = {e: np.arange(bounds[i], bounds[i + 1]) for i, e in enumerate(batch.episode[starts])}
        losses, vlosses = [], []
        value_lr = cfg.value_lr if cfg.value_lr is not None else cfg.lr
        for _ in range(cfg.epochs_per_iter):
            order = rng.permutation(episodes)
            for k in range(0, len(order), cfg.batch_size):
                idx = np.concatenate([steps_of[e] for e in order[k:k + cfg.batch_size]])
                mb, mb_adv = batch.take(idx), adv.take(idx)
                # overflow surfaces as NonFiniteParameters from optimize_step
                with np.errstate(over="ignore", invalid="ignore"):
                    lp, gp = spec.policy_loss(self.policy, self.pi_init, mb, mb_adv)
                    lv, gv = value_loss(self.vf, mb.states, mb_adv.targets, mb_adv.values, spec.value_clip)
                try:
                    theta, self._pstate = optimize_step(
                        self.policy.theta, gp, cfg.lr, self._pstate or self._adam(), cfg.optimizer)
                    vparams, self._vstate = optimize_step(
                        self.vf.params, spec.eta * gv, value_lr, self._vstate or self._adam(), cfg.optimizer)
                except NonFiniteParameters as exc:
                    exc.dump.update({"iteration": t, "step": self.step, "policy_loss": lp, "value_loss": lv})
                    raise
                self.policy.theta = theta
                self.vf.params = vparams
                self.step += 1
                losses.append(lp)
                vlosses.append(lv)

        if self.ctrl is not None:
            self.ctrl = kl_controller_update(self.ctrl, behaviour_kl)
            self.beta = self.ctrl.beta

        if (t + 1) % cfg.eval_every == 0:
            ev = evaluate_exact(self.mdp, self.policy)
            rec = MetricRecord(
                step=self.step,
                reward_exact=ev.value,
                reward_emp=float(batch_raw.returns().mean()),
                kl_exact=kl_divergence(self.mdp, self.policy, self.pi_init, ev),
                kl_emp=kl_divergence(self.mdp, self.policy, self.pi_init, batch_raw),
                loss=float(np.mean(losses)),
                value_loss=float(np.mean(vlosses)),
                beta=float(self.beta),
                iteration=t + 1,
                wall_time=time.perf_counter() - self._t0,
            )
            vals = [getattr(rec, c) for c in CSV_COLUMNS]
            if not np.all(np.isfinite(vals)):
                raise NonFiniteParameters("non-finite metrics", {"record": asdict(rec)})
            self.metrics.records.append(rec)


def train(mdp, pi_init, cfg, value_fn=None):
    """Online policy iteration; returns (final_policy, metrics)."""
    loop = _Loop(mdp, pi_init, cfg, value_fn)
    for t in range(cfg.n_iterations):
        rollout_ss, _ = _iteration_rngs(cfg.seed, t)
        batch = sample_rollouts(mdp, loop.policy, cfg.rollouts_per_iter, rollout_ss, tag=f"iter{t}")
        loop.iterate(t, batch)
    loop.policy.frozen = False
    return loop.policy, loop.metrics


def train_offline(mdp, pi_init, logged, cfg, value_fn=None):
    """Policy iteration over a fixed logged batch; no new episodes are sampled."""
    if logged is None or len(logged) == 0:
        raise ValueError("offline training needs a non-empty logged batch")
    loop = _Loop(mdp, pi_init, cfg, value_fn)
    for t in range(cfg.n_iterations):
        loop.iterate(t, logged)
    return loop.policy, loop.metrics
