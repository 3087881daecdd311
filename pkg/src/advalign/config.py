"""Experiment configuration: a closed JSON schema with line-level diagnostics.

A config document has up to six sections::

    {
      "mdp":     {"vocab_size": 4, "horizon": 8, "reward_seed": 0},
      "policy":  {"kind": "context", "seed": 1},
      "loss":    {"kind": "APA"},
      "train":   {"n_iterations": 30, "lr": 0.03, "seed": 0},
      "offline": {"episodes": 512, "skew": 3.0},
      "suite":   {"seeds": [0, 1, 2]}
    }

Only ``loss.kind`` is required.  Every omitted key takes its default and
:func:`resolve` writes them all back out, so the resolved snapshot fully
determines a run.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass

from .exceptions import ConfigError
from .losses import CONTROLLER_TYPES, LOSS_KINDS, LossSpec
from .trainer import TrainConfig

_INT, _FLOAT, _STR, _BOOL = "integer", "number", "string", "boolean"

# key -> (type, default).  None defaults are nullable.
SCHEMA = {
    "mdp": {
        "vocab_size": (_INT, 4),
        "horizon": (_INT, 8),
        "reward_seed": (_INT, 0),
        "suffix_len": (_INT, 2),
        "gamma": (_FLOAT, 1.0),
        "path": (_STR, None),
    },
    "policy": {
        "kind": (_STR, "context"),
        "seed": (_INT, None),
        "scale": (_FLOAT, 1.0),
        "eos_bias": (_FLOAT, 0.0),
    },
    "loss": {
        "kind": (_STR, None),
        "kl_lambda": (_FLOAT, None),
        "clip_epsilon": (_FLOAT, 0.2),
        "eta": (_FLOAT, 1.0),
        "controller": (_STR, "adaptive"),
        "kl_target": (_FLOAT, 0.05),
        "controller_gain": (_FLOAT, 0.1),
        "controller_error_clip": (_FLOAT, 0.2),
        "value_clip": (_FLOAT, None),
        "weight_cap": (_FLOAT, 1e6),
    },
    "train": {
        "n_iterations": (_INT, 1),
        "rollouts_per_iter": (_INT, 64),
        "epochs_per_iter": (_INT, 2),
        "batch_size": (_INT, 8),
        "lr": (_FLOAT, 8e-6),
        "value_lr": (_FLOAT, None),
        "gae_lambda": (_FLOAT, 0.95),
        "normalize_advantages": (_BOOL, False),
        "value_param": (_STR, "context"),
        "optimizer": (_STR, "adam"),
        "adam_beta1": (_FLOAT, 0.0),
        "adam_beta2": (_FLOAT, 0.999),
        "adam_eps": (_FLOAT, 1e-8),
        "seed": (_INT, 0),
        "mode": (_STR, "online"),
        "offline_data_path": (_STR, None),
        "eval_every": (_INT, 1),
    },
    "offline": {
        "episodes": (_INT, 512),
        "skew": (_FLOAT, 3.0),
    },
    "suite": {
        "seeds": ("integer list", [0, 1, 2]),
    },
}
REQUIRED = (("loss", "kind"),)


@dataclass
class ExperimentConfig:
    """A validated, fully resolved experiment description."""

    mdp: dict
    policy: dict
    loss: dict
    train: dict
    offline: dict
    suite: dict

    def to_dict(self):
        return copy.deepcopy(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self):
        """Hash of everything except the training seed, so seeds share a prefix."""
        doc = self.to_dict()
        doc["train"].pop("seed")
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_name(self):
        return f"{self.config_hash()}-seed{self.train['seed']}"

    def loss_spec(self):
        return LossSpec(**self.loss)

    def train_config(self):
        return TrainConfig(loss=self.loss_spec(), **self.train)

    def with_overrides(self, section, **values):
        doc = self.to_dict()
        doc[section].update(values)
        return resolve(doc)


def _line_of(text, path):
    """Best-effort 1-based line of the last key in ``path``; None if not found."""
    if text is None:
        return None
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _type_ok(kind, value):
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _FLOAT:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _STR:
        return isinstance(value, str)
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind == "integer list":
        return isinstance(value, list) and all(_type_ok(_INT, v) for v in value) and len(value) > 0
    raise AssertionError(kind)


def resolve(doc, text=None):
    """Validate a parsed config document and materialise every default.

    ``text`` is the source, used only to attach line numbers to errors.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", line=1 if text else None)
    for section in doc:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}", key=section, line=_line_of(text, [section]))
    for section, key in REQUIRED:
        if not isinstance(doc.get(section), dict) or doc[section].get(key) is None:
            raise ConfigError(f"missing required key '{section}.{key}'", key=f"{section}.{key}",
                              line=_line_of(text, [section]))
    out = {}
    for section, fields in SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object", key=section,
                              line=_line_of(text, [section]))
        for key, value in given.items():
            name = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(f"unknown key {name!r}", key=name, line=_line_of(text, [section, key]))
            kind, default = fields[key]
            if value is None and default is None:
                continue
            if not _type_ok(kind, value):
                raise ConfigError(f"{name} must be a{'n' if kind[0] in 'aeiou' else ''} {kind}, got {value!r}",
                                  key=name, line=_line_of(text, [section, key]))
        resolved = {k: copy.deepcopy(d) for k, (_, d) in fields.items()}
        resolved.update(copy.deepcopy(given))
        for key, (kind, _) in fields.items():
            if kind == _FLOAT and resolved[key] is not None:
                resolved[key] = float(resolved[key])
        out[section] = resolved

    loss = out["loss"]
    loss["kind"] = str(loss["kind"]).upper()
    if loss["kind"] not in LOSS_KINDS:
        raise ConfigError(f"loss.kind must be one of {list(LOSS_KINDS)}, got {loss['kind']!r}",
                          key="loss.kind", line=_line_of(text, ["loss", "kind"]))
    if loss["controller"] not in CONTROLLER_TYPES:
        raise ConfigError(f"loss.controller must be one of {list(CONTROLLER_TYPES)}",
                          key="loss.controller", line=_line_of(text, ["loss", "controller"]))
    if out["policy"]["kind"] not in ("context", "table"):
        raise ConfigError("policy.kind must be 'context' or 'table'", key="policy.kind",
                          line=_line_of(text, ["policy", "kind"]))
    if out["policy"]["seed"] is None:
        out["policy"]["seed"] = out["mdp"]["reward_seed"] + 1
    if out["train"]["mode"] == "offline" and not out["train"]["offline_data_path"]:
        raise ConfigError("train.mode 'offline' needs train.offline_data_path", key="train.offline_data_path",
                          line=_line_of(text, ["train", "mode"]))

    # Materialise the per-kind lambda default and let the dataclasses run their own checks.
    for section, build in (("loss", lambda: LossSpec(**loss)),
                           ("train", lambda: TrainConfig(loss=LossSpec(**loss), **out["train"]))):
        try:
            obj = build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} section: {exc}", key=section,
                              line=_line_of(text, [section])) from None
        if section == "loss":
            loss.update(asdict(obj))
    return ExperimentConfig(**out)


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return resolve(doc, text)


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)
