"""Benchmark simulators, training-set generation, and reference posteriors.

Observations are always stored as sets of shape ``(n, n_obs, obs_dim)``;
vector-valued tasks simply have ``n_obs == 1``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special, stats

from . import io
from .errors import BudgetExceededError, DimensionError, DomainError
from .nn import as_rng

TASKS = ("gmm", "two_moons", "inverse_kinematics")

# Two Moons noise conventions inherited from the standard benchmark formulation.
TWO_MOONS_R_MEAN = 0.1
TWO_MOONS_R_STD = 0.01
TWO_MOONS_SHIFT = 0.25

IK_LENGTHS = (0.5, 0.5, 1.0)
IK_PRIOR_VAR = (1 / 16, 1 / 4, 1 / 4, 1 / 4)
IK_ABC_TOLERANCE = 0.002
TWO_MOONS_ABC_TOLERANCE = 1e-3

GMM_N_OBS = 10


# --------------------------------------------------------------------------- GMM


def gmm_prior_sample(rng, n: int) -> np.ndarray:
    return as_rng(rng).standard_normal((n, 2))


def gmm_simulate(theta: np.ndarray, rng, n_obs: int = GMM_N_OBS) -> np.ndarray:
    """Draw ``n_obs`` rows from ``0.5 N(theta, I/2) + 0.5 N(-theta, I/2)`` per parameter."""
    rng = as_rng(rng)
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    n = theta.shape[0]
    sign = np.where(rng.random((n, n_obs, 1)) < 0.5, 1.0, -1.0)
    noise = rng.standard_normal((n, n_obs, 2)) * math.sqrt(0.5)
    return sign * theta[:, None, :] + noise


def gmm_log_posterior(theta: np.ndarray, x_obs: np.ndarray) -> np.ndarray:
    """Unnormalized log posterior of the GMM task at each row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x_obs = np.asarray(x_obs, dtype=np.float64).reshape(-1, 2)
    out = -0.5 * np.sum(theta**2, axis=1)
    # component variance 1/2: log N = -|x-mu|^2 - log(pi); the constant cancels
    for x_n in x_obs:
        plus = -np.sum((x_n - theta) ** 2, axis=1)
        minus = -np.sum((x_n + theta) ** 2, axis=1)
        out = out + np.logaddexp(plus, minus)
    return out


@dataclass
class GridPosterior:
    spacing: float
    axis: np.ndarray
    log_density: np.ndarray  # normalized, shape (len(axis), len(axis))

    def points(self) -> np.ndarray:
        g1, g2 = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([g1.ravel(), g2.ravel()], axis=1)


def gmm_grid_posterior(x_obs: np.ndarray, half_width: float = 4.0, spacing: float = 0.01) -> GridPosterior:
    n_half = int(round(half_width / spacing))
    # integer multiples keep the grid exactly sign-symmetric
    axis = spacing * np.arange(-n_half, n_half + 1, dtype=np.float64)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    logp = gmm_log_posterior(np.stack([g1.ravel(), g2.ravel()], axis=1), x_obs)
    log_z = special.logsumexp(logp) + 2 * math.log(spacing)
    return GridPosterior(spacing, axis, (logp - log_z).reshape(g1.shape))


def gmm_reference(x_obs: np.ndarray, n_draws: int, rng, half_width: float = 4.0, spacing: float = 0.01) -> np.ndarray:
    """Importance-resample grid cells, then jitter uniformly inside each cell."""
    rng = as_rng(rng)
    grid = gmm_grid_posterior(x_obs, half_width, spacing)
    logp = grid.log_density.ravel()
    w = np.exp(logp - logp.max())
    w /= w.sum()
    idx = rng.choice(w.size, size=n_draws, p=w)
    n = grid.axis.size
    centers = np.stack([grid.axis[idx // n], grid.axis[idx % n]], axis=1)
    return centers + rng.uniform(-0.5 * spacing, 0.5 * spacing, size=centers.shape)


# --------------------------------------------------------------------- Two Moons


def two_moons_prior_sample(rng, n: int) -> np.ndarray:
    return as_rng(rng).uniform(-1.0, 1.0, size=(n, 2))


def two_moons_simulate(theta: np.ndarray, rng=None, a: np.ndarray | None = None, r: np.ndarray | None = None) -> np.ndarray:
    """Crescent-shaped simulator; returns ``(n, 1, 2)``.

    ``a`` and ``r`` override the random angle and radius when given.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    n = theta.shape[0]
    if a is None or r is None:
        rng = as_rng(rng)
    if a is None:
        a = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
    if r is None:
        r = rng.normal(TWO_MOONS_R_MEAN, TWO_MOONS_R_STD, size=n)
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (n,))
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
    p1 = r * np.cos(a) + TWO_MOONS_SHIFT
    p2 = r * np.sin(a)
    s2 = math.sqrt(2.0)
    x1 = p1 - np.abs(theta[:, 0] + theta[:, 1]) / s2
    x2 = p2 + (-theta[:, 0] + theta[:, 1]) / s2
    return np.stack([x1, x2], axis=1)[:, None, :]


def two_moons_reference(x_obs: np.ndarray, n_draws: int, rng, batch: int = 8192) -> np.ndarray:
    """Exact posterior draws by inverting the simulator.

    Each draw of the latent crescent point fixes ``|z0|`` and ``z1`` (the
    rotated parameters); the sign of ``z0`` is a fair coin, and draws
    outside the prior box are rejected.
    """
    rng = as_rng(rng)
    x_obs = np.asarray(x_obs, dtype=np.float64).reshape(2)
    s2 = math.sqrt(2.0)
    out, have = [], 0
    while have < n_draws:
        a = rng.uniform(-math.pi / 2, math.pi / 2, size=batch)
        r = rng.normal(TWO_MOONS_R_MEAN, TWO_MOONS_R_STD, size=batch)
        abs_z0 = r * np.cos(a) + TWO_MOONS_SHIFT - x_obs[0]
        z1 = x_obs[1] - r * np.sin(a)
        z0 = np.where(rng.random(batch) < 0.5, abs_z0, -abs_z0)
        theta = np.stack([(z0 - z1) / s2, (z0 + z1) / s2], axis=1)
        ok = (abs_z0 >= 0) & np.all(np.abs(theta) <= 1.0, axis=1)
        out.append(theta[ok])
        have += int(ok.sum())
    return np.concatenate(out)[:n_draws]


# ------------------------------------------------------------ Inverse kinematics


def ik_prior_sample(rng, n: int) -> np.ndarray:
    return as_rng(rng).standard_normal((n, 4)) * np.sqrt(IK_PRIOR_VAR)


def _ik_arm(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal reach and vertical rise of the arm for joint angles ``(n, 3)``."""
    cum = np.cumsum(angles, axis=1)
    lengths = np.asarray(IK_LENGTHS)
    return np.cos(cum) @ lengths, np.sin(cum) @ lengths


def ik_forward(theta: np.ndarray) -> np.ndarray:
    """End-effector position for base height ``theta[0]`` and joint angles ``theta[1:]``."""
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[1] != 4:
        raise DimensionError(f"inverse kinematics needs 4 parameters, got {theta.shape[1]}")
    reach, rise = _ik_arm(theta[:, 1:])
    x = np.stack([reach, theta[:, 0] + rise], axis=1)
    return x[0] if single else x


def ik_simulate(theta: np.ndarray, rng=None) -> np.ndarray:
    return ik_forward(np.atleast_2d(theta))[:, None, :]


def ik_reference(x_obs: np.ndarray, n_draws: int, rng, tolerance: float = IK_ABC_TOLERANCE, batch: int = 200_000) -> np.ndarray:
    """ABC rejection posterior for the arm, with the base height integrated out.

    Targets exactly the same distribution as plain rejection with
    ``|g(theta) - x_obs| <= tolerance``: joint angles are proposed from
    the prior and accepted with probability proportional to the prior mass
    of base heights that land inside the tolerance disc; the base height is
    then drawn from the prior truncated to that interval.
    """
    rng = as_rng(rng)
    x_obs = np.asarray(x_obs, dtype=np.float64).reshape(2)
    sd = math.sqrt(IK_PRIOR_VAR[0])
    # upper bound on the accepted base-height mass: widest interval at the prior mode
    p_max = 2 * tolerance / (sd * math.sqrt(2 * math.pi))
    out, have, proposed = [], 0, 0
    while have < n_draws:
        angles = rng.standard_normal((batch, 3)) * np.sqrt(IK_PRIOR_VAR[1:])
        reach, rise = _ik_arm(angles)
        dx = reach - x_obs[0]
        half = np.sqrt(np.maximum(tolerance**2 - dx**2, 0.0))
        center = x_obs[1] - rise
        lo, hi = (center - half) / sd, (center + half) / sd
        mass = np.where(half > 0, special.ndtr(hi) - special.ndtr(lo), 0.0)
        ok = rng.random(batch) * p_max < mass
        proposed += batch
        if ok.any():
            base = stats.truncnorm.rvs(lo[ok], hi[ok], loc=0.0, scale=sd, random_state=rng)
            out.append(np.column_stack([base, angles[ok]]))
            have += int(ok.sum())
        # one proposal stands in for 1/p_max plain-rejection simulations
        _check_rate(have, proposed / p_max)
    return np.concatenate(out)[:n_draws]


# ------------------------------------------------------------------------ ABC


@dataclass
class AbcResult:
    draws: np.ndarray
    distances: np.ndarray
    n_simulations: int

    @property
    def acceptance_rate(self) -> float:
        return len(self.draws) / max(self.n_simulations, 1)


MIN_ACCEPTANCE_RATE = 1e-7


def _check_rate(accepted: int, simulations: float, min_rate: float = MIN_ACCEPTANCE_RATE, after: float = 1e7) -> None:
    if simulations >= after and accepted / simulations < min_rate:
        raise BudgetExceededError(
            f"acceptance rate {accepted / simulations:.2e} after {int(simulations)} simulations "
            f"is below {min_rate:.0e}; use a larger tolerance"
        )


def abc_rejection(
    prior_sample: Callable[[np.random.Generator, int], np.ndarray],
    forward: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    x_obs: np.ndarray,
    tolerance: float,
    n_draws: int,
    rng,
    batch_size: int = 1_000_000,
    max_simulations: int = 2_000_000_000,
    rate_check_after: int = 10_000_000,
) -> AbcResult:
    """Plain rejection ABC with Euclidean distance on the flattened output.

    Raises:
        BudgetExceededError: acceptance rate falls below 1e-7 once at least
            ``rate_check_after`` simulations were run, or the simulation cap
            is reached.
    """
    rng = as_rng(rng)
    x_obs = np.asarray(x_obs, dtype=np.float64).ravel()
    draws, dists, n_sims, have = [], [], 0, 0
    while have < n_draws:
        if n_sims >= max_simulations:
            raise BudgetExceededError(f"only {have} of {n_draws} draws after {n_sims} simulations")
        theta = prior_sample(rng, batch_size)
        x = forward(theta, rng).reshape(batch_size, -1)
        d = np.sqrt(np.sum((x - x_obs) ** 2, axis=1))
        ok = d <= tolerance
        draws.append(theta[ok])
        dists.append(d[ok])
        have += int(ok.sum())
        n_sims += batch_size
        _check_rate(have, n_sims, after=rate_check_after)
    return AbcResult(np.concatenate(draws)[:n_draws], np.concatenate(dists)[:n_draws], n_sims)


# ------------------------------------------------------------------ Task table


@dataclass(frozen=True)
class Task:
    name: str
    theta_dim: int
    n_obs: int
    obs_dim: int
    prior_sample: Callable
    simulate: Callable

    @property
    def is_set(self) -> bool:
        return self.n_obs > 1

    @property
    def x_size(self) -> int:
        return self.n_obs * self.obs_dim

    def sample_joint(self, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        rng = as_rng(rng)
        theta = self.prior_sample(rng, n)
        return theta, self.simulate(theta, rng)

    def check_x(self, x: np.ndarray) -> np.ndarray:
        """Coerce one observation or a batch to ``(n, n_obs, obs_dim)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.size % self.x_size:
            raise DimensionError(f"{self.name} observations have {self.x_size} values, got shape {x.shape}")
        return x.reshape(-1, self.n_obs, self.obs_dim)


def get_task(name: str) -> Task:
    if name == "gmm":
        return Task("gmm", 2, GMM_N_OBS, 2, gmm_prior_sample, gmm_simulate)
    if name == "two_moons":
        return Task("two_moons", 2, 1, 2, two_moons_prior_sample, two_moons_simulate)
    if name == "inverse_kinematics":
        return Task("inverse_kinematics", 4, 1, 2, ik_prior_sample, ik_simulate)
    raise DomainError(f"unknown task {name!r}; expected one of {TASKS}")


def reference_posterior(task: str | Task, x_obs: np.ndarray, n_draws: int, rng, method: str = "default") -> np.ndarray:
    """Ground-truth posterior draws for one observation.

    ``method="default"`` uses the grid (GMM), the analytic inversion (Two
    Moons), or the marginalized ABC sampler (inverse kinematics);
    ``method="abc"`` forces plain rejection ABC at the task tolerance.
    """
    task = get_task(task) if isinstance(task, str) else task
    x_obs = task.check_x(x_obs)[0]
    if method == "abc":
        tol = {"two_moons": TWO_MOONS_ABC_TOLERANCE, "inverse_kinematics": IK_ABC_TOLERANCE}.get(task.name)
        if tol is None:
            raise DomainError(f"no ABC tolerance defined for {task.name}")
        return abc_rejection(task.prior_sample, task.simulate, x_obs, tol, n_draws, rng).draws
    if method != "default":
        raise DomainError(f"unknown reference method {method!r}")
    if task.name == "gmm":
        return gmm_reference(x_obs, n_draws, rng)
    if task.name == "two_moons":
        return two_moons_reference(x_obs, n_draws, rng)
    return ik_reference(x_obs, n_draws, rng)


# ---------------------------------------------------------------- Datasets


@dataclass(frozen=True)
class Standardization:
    theta_mean: np.ndarray
    theta_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    @classmethod
    def fit(cls, theta: np.ndarray, x: np.ndarray) -> "Standardization":
        flat_x = x.reshape(-1, x.shape[-1])
        return cls(theta.mean(0), _safe_std(theta), flat_x.mean(0), _safe_std(flat_x))

    @classmethod
    def identity(cls, theta_dim: int, obs_dim: int) -> "Standardization":
        return cls(np.zeros(theta_dim), np.ones(theta_dim), np.zeros(obs_dim), np.ones(obs_dim))

    def theta_forward(self, theta: np.ndarray) -> np.ndarray:
        return (theta - self.theta_mean) / self.theta_std

    def theta_inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.theta_std + self.theta_mean

    def x_forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    @property
    def theta_log_scale(self) -> float:
        """log |d theta / d z| of the de-standardizing map."""
        return float(np.sum(np.log(self.theta_std)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("theta_mean", "theta_std", "x_mean", "x_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("theta_mean", "theta_std", "x_mean", "x_std")))


def _safe_std(a: np.ndarray) -> np.ndarray:
    s = a.std(0)
    return np.where(s > 0, s, 1.0)


@dataclass
class TrainingSet:
    task: str
    budget: int
    seed: int
    theta: np.ndarray  # (M, D)
    x: np.ndarray  # (M, n_obs, obs_dim)
    standardization: Standardization

    def __len__(self) -> int:
        return self.budget

    def header(self) -> list[str]:
        d = self.theta.shape[1]
        return [f"theta_{i}" for i in range(d)] + [f"x_{i}" for i in range(self.x[0].size)]

    def table(self) -> np.ndarray:
        return np.concatenate([self.theta, self.x.reshape(self.budget, -1)], axis=1)

    def sidecar(self) -> dict:
        return {
            "task": self.task,
            "M": self.budget,
            "seed": self.seed,
            "standardization": self.standardization.to_dict(),
            "schema_version": io.SCHEMA_VERSION,
        }

    def save(self, out_dir: str | os.PathLike, stem: str = "dataset") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path = io.write_matrix_csv(out_dir / f"{stem}.csv", self.header(), self.table())
        json_path = io.write_json(out_dir / f"{stem}.json", self.sidecar())
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path: str | os.PathLike) -> "TrainingSet":
        csv_path = Path(csv_path)
        meta = io.read_json(csv_path.with_suffix(".json"))
        task = get_task(meta["task"])
        _, values = io.read_matrix_csv(csv_path)
        d = task.theta_dim
        return cls(
            meta["task"],
            int(meta["M"]),
            int(meta["seed"]),
            values[:, :d].copy(),
            values[:, d:].reshape(-1, task.n_obs, task.obs_dim),
            Standardization.from_dict(meta["standardization"]),
        )


def generate_training_set(task: str, budget: int, seed: int) -> TrainingSet:
    """Simulate ``budget`` (theta, x) pairs; bit-reproducible from the arguments."""
    if budget < 1:
        raise DomainError("budget must be positive")
    spec = get_task(task)
    rng = np.random.default_rng([seed, 0x5EED])
    theta, x = spec.sample_joint(rng, budget)
    return TrainingSet(task, budget, seed, theta, x, Standardization.fit(theta, x))
