"""Conditional consistency models for posterior estimation.

The consistency function is ``f(theta, t; x) = c_skip(t) theta + c_out(t) F(theta, t; x)``
with ``F`` the backbone MLP. Training follows the improved consistency-training
recipe (Pseudo-Huber distance, exponential discretization curriculum,
lognormal-style noise index sampling, no teacher EMA).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from .errors import DegenerateMapError, DomainError, ScheduleError, TrainingDivergenceError
from .estimator import PosteriorEstimator, common_from_dict, draw_blocks, seed_from
from .nn import AdamW, adamw_step, as_rng, l2_penalty, mlp_backward, mlp_forward


@dataclass(frozen=True)
class ConsistencySchedule:
    eps: float = 1e-3
    t_max: float = 10.0
    rho: float = 7.0
    s0: int = 10
    s1: int = 50
    total_iterations: int = 1
    p_mean: float = -1.1
    p_std: float = 2.0
    sigma_data: float = 1.0
    huber_c: float = 0.00054 * math.sqrt(2)

    def __post_init__(self):
        if not 0 < self.eps < self.t_max:
            raise ValueError("need 0 < eps < t_max")
        if not 1 <= self.s0 <= self.s1:
            raise ValueError("need 1 <= s0 <= s1")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.huber_c <= 0 or self.sigma_data <= 0 or self.p_std <= 0:
            raise ValueError("huber_c, sigma_data and p_std must be positive")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")

    @classmethod
    def for_dim(cls, theta_dim: int, **kwargs) -> "ConsistencySchedule":
        kwargs.setdefault("huber_c", 0.00054 * math.sqrt(theta_dim))
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencySchedule":
        return cls(**d)


# ------------------------------------------------------------- schedule math


def c_skip(t, schedule: ConsistencySchedule):
    sd2 = schedule.sigma_data**2
    return sd2 / ((np.asarray(t) - schedule.eps) ** 2 + sd2)


def c_out(t, schedule: ConsistencySchedule):
    t = np.asarray(t)
    sd = schedule.sigma_data
    return sd * (t - schedule.eps) / np.sqrt(sd**2 + t**2)


def discretization_steps(k: int, schedule: ConsistencySchedule) -> int:
    """Number of grid points ``N(k)`` at training iteration ``k`` (0-based)."""
    total = schedule.total_iterations
    if not 0 <= k < total:
        raise DomainError(f"iteration {k} outside [0, {total})")
    k_prime = math.floor(total / (math.log2(math.floor(schedule.s1 / schedule.s0)) + 1))
    # very short runs would give K' = 0; treat them as a single doubling stage
    k_prime = max(k_prime, 1)
    return min(schedule.s0 * 2 ** (k // k_prime), schedule.s1) + 1


def time_grid(n: int, eps: float, t_max: float, rho: float) -> np.ndarray:
    """``n`` rho-spaced times from ``eps`` to ``t_max`` (both exact)."""
    if n < 2:
        raise DomainError("time grid needs at least two points")
    lo, hi = eps ** (1 / rho), t_max ** (1 / rho)
    grid = (lo + np.arange(n) / (n - 1) * (hi - lo)) ** rho
    grid[0], grid[-1] = eps, t_max
    return grid


def schedule_grid(n: int, schedule: ConsistencySchedule) -> np.ndarray:
    return time_grid(n, schedule.eps, schedule.t_max, schedule.rho)


def noise_index_probs(grid: np.ndarray, p_mean: float, p_std: float) -> np.ndarray:
    """Probability of each adjacent pair ``(t_i, t_{i+1})`` of the grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise DomainError("noise schedule needs at least two grid points")
    cdf = special.erf((np.log(grid) - p_mean) / (math.sqrt(2) * p_std))
    w = np.diff(cdf)
    total = w.sum()
    if not total > 0:
        raise ScheduleError("all noise-index weights underflowed to zero")
    return w / total


def sample_noise_index(grid: np.ndarray, schedule: ConsistencySchedule, rng, size=None):
    """Draw pair indices; ``i`` selects ``(grid[i], grid[i + 1])`` (0-based)."""
    p = noise_index_probs(grid, schedule.p_mean, schedule.p_std)
    return as_rng(rng).choice(p.size, size=size, p=p)


def pseudo_huber(u: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
    """``sqrt(|u - v|^2 + c^2) - c`` along the last axis."""
    sq = np.sum((np.asarray(u) - np.asarray(v)) ** 2, axis=-1)
    # algebraically equal form without cancellation for small distances
    return sq / (np.sqrt(sq + c * c) + c)


# ------------------------------------------------------------------ the model


@dataclass(eq=False)
class ConsistencyModel(PosteriorEstimator):
    schedule: ConsistencySchedule = None

    model_kind = "cmpe"

    def __post_init__(self):
        super().__post_init__()
        if self.schedule is None:
            raise ValueError("a ConsistencyModel needs a schedule")

    def _extra_dict(self) -> dict:
        return {"schedule": self.schedule.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyModel":
        return cls(**common_from_dict(d), schedule=ConsistencySchedule.from_dict(d["schedule"]))

    def copy(self) -> "ConsistencyModel":
        return replace(
            self,
            backbone=self.backbone.copy(),
            summary=None if self.summary is None else self.summary.copy(),
        )


@dataclass
class _FCache:
    t: np.ndarray
    skip: np.ndarray
    out: np.ndarray
    backbone: object


def _f_forward(model: ConsistencyModel, theta_t, t, cond, train_mode=False, rng=None):
    n = theta_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    skip = c_skip(t, model.schedule)[:, None]
    out = c_out(t, model.schedule)[:, None]
    F, cache = mlp_forward(model.backbone, model.backbone_input(theta_t, t, cond), train_mode, rng)
    return skip * theta_t + out * F, _FCache(t, skip, out, cache)


def _check_times(t, schedule: ConsistencySchedule) -> None:
    t = np.asarray(t)
    if np.any(t < schedule.eps) or np.any(t > schedule.t_max):
        raise DomainError(f"time must lie in [{schedule.eps}, {schedule.t_max}]")


def consistency_forward(
    model: ConsistencyModel,
    theta_t: np.ndarray,
    t,
    cond: np.ndarray,
    train_mode: bool = False,
    rng=None,
) -> np.ndarray:
    """Evaluate ``f(theta_t, t; cond)`` for a batch.

    Args:
        model: Consistency model.
        theta_t: Noisy standardized parameters, shape ``(B, D)`` or ``(D,)``.
        t: Scalar time or per-row times in ``[eps, t_max]``.
        cond: Condition embedding, ``(B, C)`` or ``(1, C)`` (broadcast).
    """
    theta_t = np.asarray(theta_t, dtype=np.float64)
    single = theta_t.ndim == 1
    theta_t = np.atleast_2d(theta_t)
    _check_times(t, model.schedule)
    cond = np.broadcast_to(np.atleast_2d(cond), (theta_t.shape[0], np.atleast_2d(cond).shape[1]))
    out, _ = _f_forward(model, theta_t, t, cond, train_mode, rng)
    return out[0] if single else out


def consistency_jacobian(model: ConsistencyModel, theta_t: np.ndarray, t, cond: np.ndarray):
    """Outputs and ``df/dtheta`` per row, shape ``(B, D, D)``, via D reverse passes."""
    theta_t = np.atleast_2d(np.asarray(theta_t, dtype=np.float64))
    _check_times(t, model.schedule)
    cond = np.broadcast_to(np.atleast_2d(cond), (theta_t.shape[0], np.atleast_2d(cond).shape[1]))
    out, cache = _f_forward(model, theta_t, t, cond)
    n, d = theta_t.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        seed = np.zeros((n, d))
        seed[:, j] = cache.out[:, 0]
        _, g = mlp_backward(model.backbone, cache.backbone, seed, param_grads=False)
        jac[:, j, :] = g[:, :d]
        jac[:, j, j] += cache.skip[:, 0]
    return out, jac


# ------------------------------------------------------------------- training


@dataclass
class StepResult:
    loss: float
    grads: list
    n_grid: int
    diagnostics: dict = field(default_factory=dict)


def cmpe_loss_and_grads(
    model: ConsistencyModel,
    theta: np.ndarray,
    x: np.ndarray,
    k: int,
    rng,
    teacher: ConsistencyModel | None = None,
) -> StepResult:
    """Consistency-training loss on a standardized batch and its gradients.

    Draws the grid pair index and the noise for every row, then defers to
    :func:`consistency_loss_given_noise`.
    """
    rng = as_rng(rng)
    sched = model.schedule
    grid = schedule_grid(discretization_steps(k, sched), sched)
    idx = sample_noise_index(grid, sched, rng, size=theta.shape[0])
    z = rng.standard_normal(theta.shape)
    drop_seed = int(rng.integers(2**63))
    res = consistency_loss_given_noise(model, theta, x, grid, idx, z, drop_seed, teacher)
    if not math.isfinite(res.loss):
        raise TrainingDivergenceError("non-finite consistency loss", k=k, **res.diagnostics)
    return res


def consistency_loss_given_noise(
    model: ConsistencyModel,
    theta: np.ndarray,
    x: np.ndarray,
    grid: np.ndarray,
    idx: np.ndarray,
    z: np.ndarray,
    drop_seed: int = 0,
    teacher: ConsistencyModel | None = None,
) -> StepResult:
    """Weighted Pseudo-Huber loss for fixed pair indices and noise.

    The teacher defaults to the student's own weights without gradient
    flow, i.e. a fresh stop-gradient copy. It sees the same dropout masks
    as the student, so both evaluate the same thinned network.

    Returns:
        Mean weighted loss (excluding the L2 term) and gradients for
        ``model.nets`` (L2 included). A non-finite loss is returned as is,
        with the offending pair in ``diagnostics``.
    """
    sched = model.schedule
    teacher = model if teacher is None else teacher
    b, d = theta.shape
    t_lo, t_hi = grid[idx], grid[idx + 1]

    drop_s = np.random.default_rng(drop_seed)
    cond_s, emb_cache = model.embed(x, True, drop_s)
    u_s, f_cache = _f_forward(model, theta + t_hi[:, None] * z, t_hi, cond_s, True, drop_s)
    drop_t = np.random.default_rng(drop_seed)
    cond_t, _ = teacher.embed(x, True, drop_t)
    u_t, _ = _f_forward(teacher, theta + t_lo[:, None] * z, t_lo, cond_t, True, drop_t)

    diff = u_s - u_t
    sq = np.sum(diff * diff, axis=1)
    root = np.sqrt(sq + sched.huber_c**2)
    weight = 1.0 / (t_hi - t_lo)
    per_item = weight * sq / (root + sched.huber_c)
    loss = float(per_item.mean())
    if not math.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(per_item)))
        return StepResult(loss, [], len(grid), {"i": int(idx[bad]), "t_i": float(t_lo[bad])})

    grad_u = (weight / (root * b))[:, None] * diff
    backbone_grads, grad_in = mlp_backward(model.backbone, f_cache.backbone, f_cache.out * grad_u)
    summary_grads = model.embed_backward(emb_cache, grad_in[:, d + 1 :])
    return StepResult(loss, backbone_grads + summary_grads, len(grid))


def cmpe_total_loss(model: ConsistencyModel, theta, x, k, rng, teacher=None) -> float:
    """Loss including L2 penalties (what the gradients differentiate)."""
    res = cmpe_loss_and_grads(model, theta, x, k, rng, teacher)
    return res.loss + sum(l2_penalty(net) for net in model.nets)


def cmpe_training_step(model: ConsistencyModel, optimizer: AdamW, theta: np.ndarray, x: np.ndarray, k: int, rng) -> float:
    """One AdamW update of backbone and summary; returns the batch loss."""
    res = cmpe_loss_and_grads(model, theta, x, k, rng)
    adamw_step(optimizer, model.nets, res.grads)
    return res.loss


# ------------------------------------------------------------------- sampling


def sampling_times(k_steps: int, schedule: ConsistencySchedule) -> np.ndarray:
    """Times ``eps = t_1 < ... < t_{K+1} = t_max`` used by ``k_steps`` network passes."""
    if k_steps < 1:
        raise DomainError("k_steps must be at least 1")
    return schedule_grid(k_steps + 1, schedule)


def noise_scales(k_steps: int, schedule: ConsistencySchedule) -> np.ndarray:
    """Std of the noise added after each pass, from the first pass to the last."""
    times = sampling_times(k_steps, schedule)
    # pass j evaluates at times[j] and re-noises to times[j - 1]
    return np.sqrt(np.maximum(times[:-1][::-1] ** 2 - schedule.eps**2, 0.0))


def multistep_sample_standardized(model: ConsistencyModel, cond: np.ndarray, k_steps: int, n: int, rng) -> np.ndarray:
    """Multi-step draws in standardized space for one condition row."""
    rng = as_rng(rng)
    sched = model.schedule
    times = sampling_times(k_steps, sched)
    scales = noise_scales(k_steps, sched)
    cond = np.broadcast_to(np.atleast_2d(cond), (n, cond.shape[-1]))
    theta = sched.t_max * rng.standard_normal((n, model.theta_dim))
    for j, t in enumerate(times[:0:-1]):
        theta, _ = _f_forward(model, theta, t, cond)
        if scales[j] > 0:
            theta += scales[j] * rng.standard_normal(theta.shape)
    return theta


def multistep_sample(model: ConsistencyModel, x_obs: np.ndarray, k_steps: int, n_draws: int, rng=None) -> np.ndarray:
    """Posterior draws for one observation using ``k_steps`` network passes.

    Draws are produced in fixed blocks with their own seeded streams, so the
    output depends only on the seed, never on how blocks are scheduled.

    Returns:
        De-standardized draws of shape ``(n_draws, D)``.
    """
    if k_steps < 1:
        raise DomainError("k_steps must be at least 1")
    cond = model.condition_for(x_obs)
    seed = seed_from(rng)
    out = np.empty((n_draws, model.theta_dim))
    for start, stop, block_rng in draw_blocks(n_draws, seed):
        out[start:stop] = multistep_sample_standardized(model, cond, k_steps, stop - start, block_rng)
    return model.standardization.theta_inverse(out)


def one_step_density(model: ConsistencyModel, x_obs: np.ndarray, n_draws: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Single-step draws with their log posterior density.

    ``theta_eps = f(theta_T, T)`` with ``theta_T ~ N(0, T^2 I)``; the density
    follows from the change of variables through the Jacobian of ``f`` at
    ``theta_T`` and the de-standardization scale.

    Raises:
        DegenerateMapError: some draw has ``|det J| < 1e-300``.
    """
    sched = model.schedule
    cond = model.condition_for(x_obs)
    d = model.theta_dim
    seed = seed_from(rng)
    draws = np.empty((n_draws, d))
    logp = np.empty(n_draws)
    for start, stop, block_rng in draw_blocks(n_draws, seed):
        theta_T = sched.t_max * block_rng.standard_normal((stop - start, d))
        out, jac = consistency_jacobian(model, theta_T, sched.t_max, cond)
        sign, logdet = np.linalg.slogdet(jac)
        if np.any(sign == 0) or np.any(logdet < math.log(1e-300)):
            raise DegenerateMapError("consistency map has a singular Jacobian at some draw")
        log_latent = -0.5 * np.sum(theta_T**2, axis=1) / sched.t_max**2 - d * (
            math.log(sched.t_max) + 0.5 * math.log(2 * math.pi)
        )
        draws[start:stop] = out
        logp[start:stop] = log_latent - logdet
    return (
        model.standardization.theta_inverse(draws),
        logp - model.standardization.theta_log_scale,
    )
