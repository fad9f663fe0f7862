"""Flow-matching posterior estimation on the rectified (straight-line) path."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DomainError, TrainingDivergenceError
from .estimator import PosteriorEstimator, common_from_dict, draw_blocks, seed_from
from .nn import AdamW, adamw_step, as_rng, mlp_backward, mlp_forward


@dataclass(eq=False)
class FlowMatchModel(PosteriorEstimator):
    model_kind = "fmpe"

    @classmethod
    def from_dict(cls, d: dict) -> "FlowMatchModel":
        return cls(**common_from_dict(d))

    def copy(self) -> "FlowMatchModel":
        return replace(
            self,
            backbone=self.backbone.copy(),
            summary=None if self.summary is None else self.summary.copy(),
        )


@dataclass
class FmpeStepResult:
    loss: float
    grads: list


def fmpe_loss_and_grads(model: FlowMatchModel, theta: np.ndarray, x: np.ndarray, rng) -> FmpeStepResult:
    """Conditional flow-matching regression loss on a standardized batch.

    Noise ``theta_1 ~ N(0, I)`` sits at ``t = 1`` and data at ``t = 0``; the
    regression target along ``theta_t = (1 - t) theta + t theta_1`` is
    ``theta_1 - theta``.
    """
    rng = as_rng(rng)
    b, d = theta.shape
    t = rng.random(b)
    noise = rng.standard_normal((b, d))
    res = fmpe_loss_given_noise(model, theta, x, t, noise, int(rng.integers(2**63)))
    if not math.isfinite(res.loss):
        raise TrainingDivergenceError("non-finite flow-matching loss")
    return res


def fmpe_loss_given_noise(model: FlowMatchModel, theta: np.ndarray, x: np.ndarray, t: np.ndarray,
                          noise: np.ndarray, drop_seed: int = 0) -> FmpeStepResult:
    """Flow-matching loss and gradients for fixed times and noise."""
    b, d = theta.shape
    drop = np.random.default_rng(drop_seed)
    theta_t = (1.0 - t)[:, None] * theta + t[:, None] * noise
    target = noise - theta
    cond, emb_cache = model.embed(x, True, drop)
    pred, cache = mlp_forward(model.backbone, model.backbone_input(theta_t, t, cond), True, drop)
    diff = pred - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not math.isfinite(loss):
        return FmpeStepResult(loss, [])
    grads, grad_in = mlp_backward(model.backbone, cache, (2.0 / b) * diff)
    return FmpeStepResult(loss, grads + model.embed_backward(emb_cache, grad_in[:, d + 1 :]))


def fmpe_training_step(model: FlowMatchModel, optimizer: AdamW, theta: np.ndarray, x: np.ndarray, rng) -> float:
    res = fmpe_loss_and_grads(model, theta, x, rng)
    adamw_step(optimizer, model.nets, res.grads)
    return res.loss


def euler_integrate(field: Callable[[np.ndarray, float], np.ndarray], theta_1: np.ndarray, k_steps: int) -> np.ndarray:
    """Integrate ``d theta / dt = field`` from ``t = 1`` back to ``t = 0`` in ``k_steps`` Euler steps."""
    if k_steps < 1:
        raise DomainError("k_steps must be at least 1")
    theta = np.array(theta_1, dtype=np.float64)
    dt = 1.0 / k_steps
    for k in range(k_steps):
        theta -= dt * field(theta, 1.0 - k * dt)
    return theta


def fmpe_sample_standardized(model: FlowMatchModel, cond: np.ndarray, k_steps: int, n: int, rng) -> np.ndarray:
    rng = as_rng(rng)
    cond = np.broadcast_to(np.atleast_2d(cond), (n, cond.shape[-1]))
    buf = model.backbone_input(np.zeros((n, model.theta_dim)), 0.0, cond)
    d = model.theta_dim

    def field(theta, t):
        buf[:, :d] = theta
        buf[:, d] = t
        out, _ = mlp_forward(model.backbone, buf)
        return out

    return euler_integrate(field, rng.standard_normal((n, d)), k_steps)


def fmpe_sample(model: FlowMatchModel, x_obs: np.ndarray, k_steps: int, n_draws: int, rng=None) -> np.ndarray:
    """De-standardized posterior draws via ``k_steps`` explicit Euler steps."""
    if k_steps < 1:
        raise DomainError("k_steps must be at least 1")
    cond = model.condition_for(x_obs)
    seed = seed_from(rng)
    out = np.empty((n_draws, model.theta_dim))
    for start, stop, block_rng in draw_blocks(n_draws, seed):
        out[start:stop] = fmpe_sample_standardized(model, cond, k_steps, stop - start, block_rng)
    return model.standardization.theta_inverse(out)
