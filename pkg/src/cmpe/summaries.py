"""Permutation-invariant DeepSet summaries for exchangeable observation sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .nn import ForwardCache, MlpConfig, MlpNetwork, as_rng, mlp_backward, mlp_forward


@dataclass(frozen=True)
class DeepSetConfig:
    inner: MlpConfig
    outer: MlpConfig
    pool: str = "mean"

    def __post_init__(self):
        if self.pool != "mean":
            raise ValueError(f"unsupported pooling {self.pool!r}")
        if self.inner.output_dim != self.outer.input_dim:
            raise DimensionError("inner.output_dim must equal outer.input_dim")

    @property
    def summary_dim(self) -> int:
        return self.outer.output_dim

    @property
    def obs_dim(self) -> int:
        return self.inner.input_dim

    @classmethod
    def default(cls, obs_dim: int, summary_dim: int = 6, width: int = 64) -> "DeepSetConfig":
        """Two-hidden-layer inner net, one-hidden-layer outer net."""
        return cls(
            inner=MlpConfig(obs_dim, (width, width), width, activation="silu"),
            outer=MlpConfig(width, (width,), summary_dim, activation="silu"),
        )

    def to_dict(self) -> dict:
        return {"inner": self.inner.to_dict(), "outer": self.outer.to_dict(), "pool": self.pool}

    @classmethod
    def from_dict(cls, d: dict) -> "DeepSetConfig":
        return cls(MlpConfig.from_dict(d["inner"]), MlpConfig.from_dict(d["outer"]), d.get("pool", "mean"))


@dataclass(eq=False)
class DeepSet:
    config: DeepSetConfig
    inner: MlpNetwork
    outer: MlpNetwork

    @classmethod
    def init(cls, config: DeepSetConfig, rng=None) -> "DeepSet":
        rng = as_rng(rng)
        return cls(config, MlpNetwork.init(config.inner, rng), MlpNetwork.init(config.outer, rng))

    @property
    def nets(self) -> list[MlpNetwork]:
        return [self.inner, self.outer]

    def params(self) -> list[np.ndarray]:
        return self.inner.params() + self.outer.params()

    @property
    def n_params(self) -> int:
        return self.inner.n_params + self.outer.n_params

    def copy(self) -> "DeepSet":
        return DeepSet(self.config, self.inner.copy(), self.outer.copy())

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "inner": self.inner.to_dict(), "outer": self.outer.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DeepSet":
        return cls(DeepSetConfig.from_dict(d["config"]), MlpNetwork.from_dict(d["inner"]), MlpNetwork.from_dict(d["outer"]))


@dataclass
class DeepSetCache:
    batch: int
    n_obs: int
    inner: ForwardCache
    outer: ForwardCache


def deepset_forward(
    ds: DeepSet,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, DeepSetCache]:
    """Embed a batch of sets.

    Args:
        ds: Summary network.
        x: Sets of shape ``(B, n_obs, obs_dim)``; a single set
            ``(n_obs, obs_dim)`` is treated as a batch of one.
        train_mode: Enable dropout in the inner and outer nets.
        rng: Dropout randomness.

    Returns:
        Summaries of shape ``(B, summary_dim)`` and a backward cache.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != ds.config.obs_dim:
        raise DimensionError(f"expected sets of shape (B, n_obs, {ds.config.obs_dim}), got {x.shape}")
    batch, n_obs, _ = x.shape
    if n_obs < 1:
        raise DomainError("observation set is empty")
    rng = as_rng(rng) if train_mode else None

    h, inner_cache = mlp_forward(ds.inner, x.reshape(batch * n_obs, -1), train_mode, rng)
    h = h.reshape(batch, n_obs, -1)
    # summing in sorted order makes the pooled value independent of row order, bit for bit
    pooled = np.sort(h, axis=1).sum(axis=1) / n_obs
    out, outer_cache = mlp_forward(ds.outer, pooled, train_mode, rng)
    return out, DeepSetCache(batch, n_obs, inner_cache, outer_cache)


def deepset_backward(
    ds: DeepSet, cache: DeepSetCache, summary_grad: np.ndarray, param_grads: bool = True
) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Backpropagate through outer net, mean pool, and inner net.

    Returns:
        ``(grads, input_grad)``: grads ordered as :meth:`DeepSet.params`,
        ``input_grad`` of shape ``(B, n_obs, obs_dim)``.
    """
    outer_grads, pooled_grad = mlp_backward(ds.outer, cache.outer, summary_grad, param_grads)
    # mean pool fans the gradient out to every row with weight 1/n_obs
    row_grad = np.repeat(pooled_grad[:, None, :] / cache.n_obs, cache.n_obs, axis=1)
    inner_grads, x_grad = mlp_backward(
        ds.inner, cache.inner, row_grad.reshape(cache.batch * cache.n_obs, -1), param_grads
    )
    grads = inner_grads + outer_grads if param_grads else None
    return grads, x_grad.reshape(cache.batch, cache.n_obs, -1)
