"""Standard synthetic suite and the ablation grids run over it.

A *cell* is one (study, variant, suite entry, seed) training run.  Cells are
independent: each builds its own MDP, initial policy and (for offline cells)
logged dataset from its seed, so they can run in any order or in parallel.
"""
from __future__ import annotations

import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import AdvalignError
from .losses import LossSpec
from .mdp import evaluate_exact, random_policy, random_token_mdp
from .policy import SoftmaxPolicy
from .rollouts import sample_rollouts
from .trainer import CSV_COLUMNS, TrainConfig, train, train_offline


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    vocab_size: int
    horizon: int
    reward_seed: int


# vocab**horizon stays under the default 10**6 state cap for every entry
STANDARD_SUITE = (
    SuiteEntry("v4h8", 4, 8, 0),
    SuiteEntry("v8h6", 8, 6, 100),
    SuiteEntry("v16h4", 16, 4, 1000),
)

# Training schedule used for every suite comparison.
SUITE_TRAIN = {"n_iterations": 30, "lr": 0.03}


@lru_cache(maxsize=None)
def suite_mdp(entry):
    return random_token_mdp(entry.vocab_size, entry.horizon, seed=entry.reward_seed)


def initial_policy(entry, seed, scale=1.0):
    """The frozen pre-alignment policy of one suite cell (bigram-linear)."""
    return random_policy(suite_mdp(entry), seed=entry.reward_seed + seed + 1, scale=scale,
                         kind="context", frozen=True)


def curated_logging_policy(mdp, pi_init, skew=3.0):
    """Behaviour policy for the offline regime.

    At every state the better half of the tokens (ranked by Q under
    ``pi_init``) keep their ``pi_init`` logits and the rest are pushed down
    by ``skew`` nats, so logged data has skewed support that favours good
    continuations, as a curated dataset would.
    """
    q = evaluate_exact(mdp, pi_init).q
    rank = np.argsort(np.argsort(-q, axis=1, kind="stable"), axis=1, kind="stable")
    keep = (mdp.vocab_size + 1) // 2
    return SoftmaxPolicy.table(pi_init.log_probs() + np.where(rank < keep, 0.0, -skew), frozen=True)


def logged_dataset(entry, seed, episodes=512, skew=3.0):
    mdp = suite_mdp(entry)
    pi_off = curated_logging_policy(mdp, initial_policy(entry, seed), skew)
    return sample_rollouts(mdp, pi_off, episodes, seed=seed, tag=f"curated-skew{skew:g}")


# -- studies -----------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    loss: dict
    offline: bool = False
    keep_base_loss: bool = True


STUDIES = {
    "lambda-sweep": tuple(Variant(f"lambda={lam:g}", {"kl_lambda": lam}) for lam in (0.05, 0.1, 0.5, 1.0)),
    "kl-controller": (
        Variant("ppo-adaptive", {"kind": "PPO", "controller": "adaptive"}),
        Variant("ppo-none", {"kind": "PPO", "controller": "none"}),
    ),
    "offline": (
        Variant("awr-offline", {"kind": "AWR"}, offline=True, keep_base_loss=False),
        Variant("apa-offline", {"kind": "APA"}, offline=True, keep_base_loss=False),
    ),
    "algorithms": (
        Variant("apa", {"kind": "APA"}, keep_base_loss=False),
        Variant("awr", {"kind": "AWR"}, keep_base_loss=False),
        Variant("ppo-adaptive", {"kind": "PPO", "controller": "adaptive"}, keep_base_loss=False),
        Variant("ppo-none", {"kind": "PPO", "controller": "none"}, keep_base_loss=False),
    ),
}


def variant_loss(variant, base_loss):
    """Merge a variant's overrides into the base loss section.

    Base keys carry over only when the variant keeps the base kind; otherwise
    the variant starts from the defaults of its own kind.
    """
    base = dict(base_loss or {"kind": "APA"})
    kind = str(variant.loss.get("kind", base["kind"])).upper()
    same_kind = str(base["kind"]).upper() == kind
    merged = base if variant.keep_base_loss and same_kind else {}
    merged.update(variant.loss)
    merged["kind"] = kind
    return merged


@dataclass
class Cell:
    study: str
    variant: Variant
    entry: SuiteEntry
    seed: int
    loss: dict
    train: dict
    offline: dict = field(default_factory=lambda: {"episodes": 512, "skew": 3.0})

    @property
    def key(self):
        return (self.study, self.variant.name, self.entry.name, self.seed)

    def config(self):
        train_kw = {k: v for k, v in self.train.items() if k not in ("seed", "mode", "offline_data_path")}
        return TrainConfig(loss=LossSpec(**self.loss), seed=self.seed, **train_kw)


def make_cells(study, seeds, base_loss=None, base_train=None, offline=None, entries=STANDARD_SUITE):
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    train_kw = dict(SUITE_TRAIN if base_train is None else base_train)
    cells = []
    for variant in STUDIES[study]:
        loss = variant_loss(variant, base_loss if base_loss is not None else {"kind": "APA"})
        for entry in entries:
            for seed in seeds:
                cells.append(Cell(study, variant, entry, int(seed), loss, train_kw,
                                  dict(offline or {"episodes": 512, "skew": 3.0})))
    return cells


def run_cell(cell):
    """Train one cell; returns (policy, metrics)."""
    mdp = suite_mdp(cell.entry)
    pi_init = initial_policy(cell.entry, cell.seed)
    cfg = cell.config()
    if cell.variant.offline:
        data = logged_dataset(cell.entry, cell.seed, cell.offline["episodes"], cell.offline["skew"])
        return train_offline(mdp, pi_init, data, cfg)
    return train(mdp, pi_init, cfg)


@dataclass
class CellOutcome:
    key: tuple
    rows: list
    error: str | None = None
    detail: str | None = None


def _run_cell_safe(cell):
    try:
        _, metrics = run_cell(cell)
    except (AdvalignError, ValueError, FloatingPointError) as exc:
        return CellOutcome(cell.key, [], f"{type(exc).__name__}: {exc}", traceback.format_exc())
    rows = []
    for rec in metrics:
        row = dict(zip(("study", "variant", "mdp", "seed"), cell.key))
        row.update({c: getattr(rec, c) for c in CSV_COLUMNS})
        rows.append(row)
    return CellOutcome(cell.key, rows)


def run_cells(cells, jobs=1):
    """Run cells (in parallel up to ``jobs`` processes); outcomes come back in cell order."""
    if jobs <= 1 or len(cells) <= 1:
        return [_run_cell_safe(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_safe, cells))


RESULT_COLUMNS = ("study", "variant", "mdp", "seed") + CSV_COLUMNS


def final_values(outcomes):
    """{(variant, mdp, seed): last record} for successful cells."""
    out = {}
    for o in outcomes:
        if o.rows:
            out[o.key[1:]] = o.rows[-1]
    return out


def per_seed_mean(finals, variant, column, seeds, entries=STANDARD_SUITE):
    """Suite-mean of a final metric for each seed."""
    return np.array([np.mean([finals[(variant, e.name, s)][column] for e in entries]) for s in seeds])


def median_over_cells(finals, variant, column):
    return float(np.median([r[column] for (v, _, _), r in finals.items() if v == variant]))


def cell_summary(cell):
    return {"study": cell.study, "variant": cell.variant.name, "mdp": asdict(cell.entry), "seed": cell.seed,
            "loss": cell.loss, "train": cell.train, "offline": cell.offline if cell.variant.offline else None}
