"""Experiment configuration: strict JSON schema with per-task defaults.

A config file is a JSON object::

    {
      "task": "two_moons",            # gmm | two_moons | inverse_kinematics
      "model_kind": "cmpe",           # cmpe | fmpe
      "budget": 1024,
      "seed": 1,
      "backbone": {"hidden_widths": [256, 256], "activation": "silu",
                   "dropout_rate": 0.05, "l2_weight": 1e-5},
      "schedule": {"t_max": 10.0, "s0": 10, "s1": 50, ...},   # cmpe only
      "training": {"epochs": 5000, "batch_size": 64, "lr0": 5e-4},
      "eval": {"J": 100, "S_draws": 4000, "K_steps_list": [1, 2, 10, 30],
               "n_sbc": 0, "sbc_draws": 1000}
    }

Every section is optional except ``task``, ``model_kind``, ``budget`` and
``seed``; missing keys take the task defaults below. Unknown keys anywhere
raise :class:`~cmpe.errors.ConfigError`.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Any

from . import io
from .consistency import ConsistencySchedule
from .errors import ConfigError
from .simulators import TASKS
from .training import MODEL_KINDS, TrainingConfig

BACKBONE_KEYS = ("hidden_widths", "activation", "dropout_rate", "l2_weight")
SCHEDULE_KEYS = ("eps", "t_max", "rho", "s0", "s1", "p_mean", "p_std", "sigma_data", "huber_c")
TRAINING_KEYS = ("epochs", "batch_size", "lr0", "weight_decay")
EVAL_KEYS = ("J", "S_draws", "K_steps_list", "n_sbc", "sbc_draws")
TOP_KEYS = ("task", "model_kind", "budget", "seed", "backbone", "schedule", "training", "eval")

TASK_DEFAULTS: dict[str, dict[str, Any]] = {
    "gmm": {
        "backbone": {"hidden_widths": [256, 256], "activation": "silu", "dropout_rate": 0.1, "l2_weight": 1e-4},
        "schedule": {"t_max": 1.0, "s0": 10, "s1": 1280},
        "training": {"epochs": 2000, "batch_size": 64, "lr0": 1e-4},
        "fmpe_lr0": 1e-5,
    },
    "two_moons": {
        "backbone": {"hidden_widths": [256, 256], "activation": "silu", "dropout_rate": 0.05, "l2_weight": 1e-5},
        "schedule": {"t_max": 10.0, "s0": 10, "s1": 50},
        "training": {"epochs": 5000, "batch_size": 64, "lr0": 5e-4},
    },
    "inverse_kinematics": {
        "backbone": {"hidden_widths": [256, 256], "activation": "silu", "dropout_rate": 0.05, "l2_weight": 1e-5},
        # no T_max is given for this task; reuse the two-moons value
        "schedule": {"t_max": 10.0, "s0": 10, "s1": 50},
        "training": {"epochs": 2000, "batch_size": 32, "lr0": 5e-4},
    },
}

EVAL_DEFAULTS = {"J": 100, "S_draws": 4000, "K_steps_list": [1, 2, 5, 10, 15, 20, 30, 50], "n_sbc": 0, "sbc_draws": 1000}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    task: str
    model_kind: str
    budget: int
    seed: int
    backbone: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> "ExperimentConfig":
        """Validate ``raw`` and fill task defaults; ``seed`` overrides the file value."""
        _check_keys("config", raw, TOP_KEYS)
        for key in ("task", "model_kind", "budget"):
            if key not in raw:
                raise ConfigError(f"missing required key {key!r}")
        if seed is None:
            if "seed" not in raw:
                raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
            seed = raw["seed"]
        task, kind = raw["task"], raw["model_kind"]
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model_kind {kind!r}; expected one of {MODEL_KINDS}")
        if kind == "fmpe" and raw.get("schedule"):
            raise ConfigError("'schedule' applies to cmpe only")
        for name, keys in (("backbone", BACKBONE_KEYS), ("schedule", SCHEDULE_KEYS),
                           ("training", TRAINING_KEYS), ("eval", EVAL_KEYS)):
            _check_keys(name, raw.get(name, {}), keys)

        defaults = copy.deepcopy(TASK_DEFAULTS[task])
        training = {**defaults["training"], **({"lr0": defaults["fmpe_lr0"]} if kind == "fmpe" and "fmpe_lr0" in defaults else {})}
        cfg = cls(
            task=task,
            model_kind=kind,
            budget=_positive_int(raw["budget"], "budget"),
            seed=_int(seed, "seed"),
            backbone={**defaults["backbone"], **raw.get("backbone", {})},
            schedule={**defaults["schedule"], **raw.get("schedule", {})} if kind == "cmpe" else {},
            training={**training, **raw.get("training", {})},
            eval={**EVAL_DEFAULTS, **raw.get("eval", {})},
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike, seed: int | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(open(path, encoding="utf-8").read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, seed)

    def validate(self) -> None:
        try:
            self.training_config()
            if self.model_kind == "cmpe":
                self.consistency_schedule(total_iterations=1)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        tr = self.training
        _positive_int(tr["epochs"], "epochs")
        _positive_int(tr["batch_size"], "batch_size")
        if not isinstance(tr["lr0"], (int, float)) or tr["lr0"] <= 0:
            raise ConfigError("lr0 must be a positive number")
        ev = self.eval
        for key in ("J", "S_draws", "sbc_draws"):
            _positive_int(ev[key], key)
        if _int(ev["n_sbc"], "n_sbc") < 0:
            raise ConfigError("n_sbc must be nonnegative")
        ks = ev["K_steps_list"]
        if not isinstance(ks, list) or not ks or any(_positive_int(k, "K_steps") < 1 for k in ks):
            raise ConfigError("K_steps_list must be a nonempty list of positive integers")
        b = self.backbone
        if not isinstance(b["hidden_widths"], list) or not b["hidden_widths"]:
            raise ConfigError("hidden_widths must be a nonempty list")

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.training)

    def consistency_schedule(self, total_iterations: int) -> ConsistencySchedule:
        from .simulators import get_task

        return ConsistencySchedule.for_dim(
            get_task(self.task).theta_dim, total_iterations=total_iterations, **self.schedule
        )

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "model_kind": self.model_kind,
            "budget": self.budget,
            "seed": self.seed,
            "backbone": dict(self.backbone),
            "training": dict(self.training),
            "eval": dict(self.eval),
        }
        if self.model_kind == "cmpe":
            d["schedule"] = dict(self.schedule)
        return d

    def content_hash(self) -> str:
        return io.content_hash(io.dumps_canonical(self.to_dict()))


def _int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return value


def _positive_int(value, name: str) -> int:
    if _int(value, name) < 1:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return value
