"""Model-kind dispatch for posterior sampling."""

from __future__ import annotations

import time
import warnings

import numpy as np

from .consistency import ConsistencyModel, multistep_sample
from .estimator import PosteriorEstimator
from .flow_matching import FlowMatchModel, fmpe_sample


class StepCountWarning(UserWarning):
    """More sampling steps requested than the finest training discretization."""


def sample_posterior(model: PosteriorEstimator, x_obs: np.ndarray, k_steps: int, n_draws: int, rng=None) -> np.ndarray:
    """``n_draws`` de-standardized draws using ``k_steps`` network passes."""
    if isinstance(model, ConsistencyModel):
        if k_steps > model.schedule.s1:
            warnings.warn(
                f"k_steps={k_steps} exceeds the trained discretization s1={model.schedule.s1}; "
                "draws may be overconfident",
                StepCountWarning,
                stacklevel=2,
            )
        return multistep_sample(model, x_obs, k_steps, n_draws, rng)
    if isinstance(model, FlowMatchModel):
        return fmpe_sample(model, x_obs, k_steps, n_draws, rng)
    raise TypeError(f"cannot sample from {type(model).__name__}")


def time_sampling(model: PosteriorEstimator, x_obs: np.ndarray, k_steps: int, n_draws: int = 1000,
                  repeats: int = 3, seed: int = 0) -> float:
    """Median wall time in milliseconds of drawing ``n_draws`` samples.

    The model is already in memory, so loading is never part of the timing.
    """
    if repeats < 3:
        raise ValueError("timing needs at least 3 repetitions")
    times = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepCountWarning)
        for r in range(repeats):
            start = time.perf_counter()
            sample_posterior(model, x_obs, k_steps, n_draws, seed + r)
            times.append(1e3 * (time.perf_counter() - start))
    return float(np.median(times))
