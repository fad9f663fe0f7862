"""State shared by the consistency and flow-matching posterior estimators."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .nn import MlpConfig, MlpNetwork, as_rng
from .simulators import Standardization, Task, get_task
from .summaries import DeepSet, DeepSetCache, DeepSetConfig, deepset_backward, deepset_forward


@dataclass(eq=False)
class PosteriorEstimator:
    """A backbone ``(theta, t, condition) -> R^D`` plus optional set summary.

    The backbone input is laid out as ``[theta (D), t (1), condition (C)]``
    where the condition is either the DeepSet summary of the standardized
    observation set or the flattened standardized observation vector.
    """

    backbone: MlpNetwork
    task: str
    standardization: Standardization
    summary: DeepSet | None = None

    model_kind = "base"

    def __post_init__(self):
        spec = self.task_spec
        expected = spec.theta_dim + 1 + self.condition_dim
        cfg = self.backbone.config
        if cfg.input_dim != expected or cfg.output_dim != spec.theta_dim:
            raise ValueError(
                f"backbone maps {cfg.input_dim}->{cfg.output_dim}, expected {expected}->{spec.theta_dim}"
            )
        if self.summary is not None and self.summary.config.obs_dim != spec.obs_dim:
            raise ValueError("summary network input does not match the observation dimension")

    @property
    def task_spec(self) -> Task:
        return get_task(self.task)

    @property
    def theta_dim(self) -> int:
        return self.task_spec.theta_dim

    @property
    def condition_dim(self) -> int:
        if self.summary is not None:
            return self.summary.config.summary_dim
        return self.task_spec.x_size

    @property
    def nets(self) -> list[MlpNetwork]:
        nets = [self.backbone]
        if self.summary is not None:
            nets += self.summary.nets
        return nets

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params()]

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.nets)

    # -- conditioning ----------------------------------------------------

    def standardize_x(self, x: np.ndarray) -> np.ndarray:
        return self.standardization.x_forward(self.task_spec.check_x(x))

    def embed(self, x_std: np.ndarray, train_mode: bool = False, rng=None) -> tuple[np.ndarray, DeepSetCache | None]:
        """Condition vectors for standardized observations ``(B, n_obs, obs_dim)``."""
        if self.summary is None:
            return x_std.reshape(x_std.shape[0], -1), None
        return deepset_forward(self.summary, x_std, train_mode, rng)

    def embed_backward(self, cache: DeepSetCache | None, cond_grad: np.ndarray) -> list[np.ndarray]:
        if self.summary is None:
            return []
        grads, _ = deepset_backward(self.summary, cache, cond_grad)
        return grads

    def condition_for(self, x_obs: np.ndarray) -> np.ndarray:
        """Embedding of one raw observation, shape ``(1, C)``."""
        cond, _ = self.embed(self.standardize_x(x_obs)[:1])
        return cond

    def backbone_input(self, theta: np.ndarray, t: np.ndarray | float, cond: np.ndarray) -> np.ndarray:
        n, d = theta.shape
        inp = np.empty((n, d + 1 + cond.shape[1]))
        inp[:, :d] = theta
        inp[:, d] = t
        inp[:, d + 1 :] = cond
        return inp

    # -- serialization ---------------------------------------------------

    def _extra_dict(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        d = {
            "model_kind": self.model_kind,
            "task": self.task,
            "standardization": self.standardization.to_dict(),
            "backbone": self.backbone.to_dict(),
            "schema_version": io.SCHEMA_VERSION,
        }
        if self.summary is not None:
            d["summary"] = self.summary.to_dict()
        d.update(self._extra_dict())
        return d

    def save(self, path: str | os.PathLike) -> Path:
        return io.write_json(path, self.to_dict())


def build_backbone_config(
    task: str,
    condition_dim: int,
    hidden_widths=(256, 256),
    activation: str = "silu",
    dropout_rate: float = 0.0,
    l2_weight: float = 0.0,
) -> MlpConfig:
    d = get_task(task).theta_dim
    return MlpConfig(d + 1 + condition_dim, tuple(hidden_widths), d, activation, dropout_rate, l2_weight)


def build_networks(
    task: str,
    rng,
    hidden_widths=(256, 256),
    activation: str = "silu",
    dropout_rate: float = 0.0,
    l2_weight: float = 0.0,
    summary_config: DeepSetConfig | None = None,
) -> tuple[MlpNetwork, DeepSet | None]:
    """Initialize a backbone (and a DeepSet for set-valued tasks)."""
    rng = as_rng(rng)
    spec = get_task(task)
    summary = None
    if spec.is_set:
        summary_config = summary_config or DeepSetConfig.default(spec.obs_dim)
        summary = DeepSet.init(summary_config, rng)
        cond_dim = summary_config.summary_dim
    else:
        cond_dim = spec.x_size
    cfg = build_backbone_config(task, cond_dim, hidden_widths, activation, dropout_rate, l2_weight)
    return MlpNetwork.init(cfg, rng), summary


def load_estimator(path_or_dict) -> PosteriorEstimator:
    """Load a checkpoint written by :meth:`PosteriorEstimator.save`."""
    from .consistency import ConsistencyModel
    from .flow_matching import FlowMatchModel

    d = path_or_dict if isinstance(path_or_dict, dict) else io.read_json(path_or_dict)
    kind = d.get("model_kind")
    if kind == "cmpe":
        return ConsistencyModel.from_dict(d)
    if kind == "fmpe":
        return FlowMatchModel.from_dict(d)
    raise ValueError(f"unknown model_kind {kind!r} in checkpoint")


def common_from_dict(d: dict) -> dict:
    return {
        "backbone": MlpNetwork.from_dict(d["backbone"]),
        "task": d["task"],
        "standardization": Standardization.from_dict(d["standardization"]),
        "summary": DeepSet.from_dict(d["summary"]) if "summary" in d else None,
    }


def draw_blocks(n_draws: int, seed: int, block: int = 1024):
    """Yield ``(start, stop, rng)`` with one independent stream per block of draws.

    Results are then identical whether blocks run serially or in parallel.
    """
    for b, start in enumerate(range(0, n_draws, block)):
        yield start, min(start + block, n_draws), np.random.default_rng([seed, b])


def seed_from(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(as_rng(rng).integers(2**62))
