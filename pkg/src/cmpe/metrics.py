"""Posterior quality metrics: RMSE, MMD, classifier two-sample test, SBC calibration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionError, DomainError
from .nn import AdamW, MlpConfig, MlpNetwork, adamw_step, as_rng, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

N_QUANTILES = 20
QUANTILE_RANGE = (0.005, 0.995)


# ---------------------------------------------------------------------- RMSE


def rmse(draws: np.ndarray, theta_star: np.ndarray) -> float:
    """Root of the mean squared deviation over all draws and dimensions."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    theta_star = np.asarray(theta_star, dtype=np.float64).reshape(1, -1)
    if draws.shape[1] != theta_star.shape[1]:
        raise DimensionError("draws and theta_star disagree on dimension")
    return float(np.sqrt(np.mean((draws - theta_star) ** 2)))


# ----------------------------------------------------------------------- MMD


def median_bandwidth(pooled: np.ndarray, max_points: int = 2000) -> float:
    """Median pairwise Euclidean distance.

    Pools larger than ``max_points`` use an evenly strided subset, which
    keeps the cost bounded and the result deterministic.
    """
    pooled = np.atleast_2d(pooled)
    if len(pooled) > max_points:
        pooled = pooled[np.linspace(0, len(pooled) - 1, max_points).astype(int)]
    h = float(np.median(pdist(pooled)))
    return h if h > 0 else 1.0


def _kernel_sum(a: np.ndarray, b: np.ndarray, gamma: float, block: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(a), block):
        total += float(np.exp(-gamma * cdist(a[i : i + block], b, "sqeuclidean")).sum())
    return total


def mmd_squared(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased U-statistic estimate of squared MMD with a Gaussian kernel.

    Args:
        a: Samples ``(S, D)``.
        b: Samples ``(S', D)``.
        bandwidth: Kernel width ``h`` in ``exp(-|u - v|^2 / (2 h^2))``;
            defaults to the median heuristic on the pooled sample.

    Can be slightly negative when the two samples share a distribution.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise DomainError("MMD needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets disagree on dimension")
    h = median_bandwidth(np.vstack([a, b])) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * h * h)
    m, n = len(a), len(b)
    # diagonal terms are exp(0) = 1 each
    kaa = (_kernel_sum(a, a, gamma) - m) / (m * (m - 1))
    kbb = (_kernel_sum(b, b, gamma) - n) / (n * (n - 1))
    kab = _kernel_sum(a, b, gamma) / (m * n)
    return kaa + kbb - 2.0 * kab


# ---------------------------------------------------------------------- C2ST


@dataclass(frozen=True)
class C2stConfig:
    hidden_widths: tuple[int, ...] = (64, 64)
    folds: int = 5
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    validation_fraction: float = 0.1


def _stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    parts = [[] for _ in range(folds)]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        for f, chunk in enumerate(np.array_split(idx, folds)):
            parts[f].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def _bce_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    # log(1 + exp(-|z|)) form is stable for large logits
    z = logits[:, 0]
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss.mean()), ((p - y) / len(y))[:, None]


def _fit_classifier(x: np.ndarray, y: np.ndarray, cfg: C2stConfig, rng: np.random.Generator) -> MlpNetwork:
    n = len(y)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    net = MlpNetwork.init(MlpConfig(x.shape[1], cfg.hidden_widths, 1, activation="relu"), rng)
    steps_per_epoch = math.ceil(len(tr) / cfg.batch_size)
    # constant learning rate: the cosine horizon is set far beyond max_epochs
    opt = AdamW.for_params(net.params(), cfg.lr, total_steps=10**12, weight_decay=0.0)
    best, best_params, bad_epochs = np.inf, [p.copy() for p in net.params()], 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(tr)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            logits, cache = mlp_forward(net, x[idx])
            _, g = _bce_grad(logits, y[idx])
            grads, _ = mlp_backward(net, cache, g)
            adamw_step(opt, net, grads)
        val_loss, _ = _bce_grad(mlp_forward(net, x[val])[0], y[val])
        if val_loss < best - 1e-6:
            best, best_params, bad_epochs = val_loss, [p.copy() for p in net.params()], 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    for p, saved in zip(net.params(), best_params):
        p[...] = saved
    net.touch()
    return net


def c2st(a: np.ndarray, b: np.ndarray, seed: int = 0, config: C2stConfig | None = None) -> float:
    """Cross-validated accuracy of an MLP separating ``a`` (label 0) from ``b`` (label 1).

    0.5 means indistinguishable, 1.0 perfectly separable. Features are
    z-scored on the pooled sample; constant features are dropped.
    """
    cfg = config or C2stConfig()
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) != len(b):
        raise DimensionError(f"C2ST needs equal sample counts, got {len(a)} and {len(b)}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets disagree on dimension")
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    std = x.std(0)
    keep = std > 0
    if not keep.any():
        # every feature is constant in the pooled sample: nothing to learn from
        return 0.5
    x = (x[:, keep] - x[:, keep].mean(0)) / std[keep]

    rng = np.random.default_rng([seed, 0xC257])
    folds = _stratified_folds(y, cfg.folds, rng)
    accs = []
    for f in range(cfg.folds):
        test = folds[f]
        train_idx = np.concatenate([folds[g] for g in range(cfg.folds) if g != f])
        net = _fit_classifier(x[train_idx], y[train_idx], cfg, rng)
        logits, _ = mlp_forward(net, x[test])
        accs.append(float(np.mean((logits[:, 0] > 0) == (y[test] == 1))))
    return float(np.mean(accs))


# ----------------------------------------------------------------------- SBC


def sbc_quantiles(n: int = N_QUANTILES) -> np.ndarray:
    return np.linspace(*QUANTILE_RANGE, n)


@dataclass
class SbcResult:
    quantiles: np.ndarray  # (Q,)
    empirical_coverage: np.ndarray  # (Q, D)
    ece: np.ndarray  # (D,)
    warnings: list[str] = field(default_factory=list)

    @property
    def max_ece(self) -> float:
        return float(self.ece.max())

    def to_dict(self) -> dict:
        return {
            "quantiles": self.quantiles.tolist(),
            "empirical_coverage": self.empirical_coverage.tolist(),
            "ece": self.ece.tolist(),
            "max_ece": self.max_ece,
            "warnings": list(self.warnings),
        }


def coverage_from_draws(draws: np.ndarray, theta_star: np.ndarray, quantiles: np.ndarray | None = None) -> np.ndarray:
    """Central-interval coverage indicators.

    Args:
        draws: Posterior draws ``(n, S, D)``.
        theta_star: True parameters ``(n, D)``.

    Returns:
        Boolean array ``(n, Q, D)``: whether ``theta_star`` lies inside the
        empirical ``[(1 - q)/2, (1 + q)/2]`` interval.
    """
    q = sbc_quantiles() if quantiles is None else np.asarray(quantiles)
    levels = np.concatenate([(1 - q) / 2, (1 + q) / 2])
    bounds = np.quantile(draws, levels, axis=1)  # (2Q, n, D)
    lo, hi = bounds[: len(q)], bounds[len(q) :]
    inside = (lo <= theta_star[None]) & (theta_star[None] <= hi)
    return np.transpose(inside, (1, 0, 2))


def ece_from_coverage(inside: np.ndarray, quantiles: np.ndarray | None = None) -> SbcResult:
    q = sbc_quantiles() if quantiles is None else np.asarray(quantiles)
    cov = inside.mean(axis=0)  # (Q, D)
    ece = np.median(np.abs(cov - q[:, None]), axis=0)
    return SbcResult(q, cov, ece)


def sbc_ece(
    posterior_sampler: Callable[[np.ndarray, int, np.random.Generator], np.ndarray],
    simulate_pairs: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    n_sbc: int,
    n_draws: int,
    rng=None,
) -> SbcResult:
    """Simulation-based calibration over fresh prior-predictive pairs.

    Args:
        posterior_sampler: ``(x, S, rng) -> (S, D)`` draws for one observation.
        simulate_pairs: ``(rng, n) -> (theta (n, D), x (n, ...))``.
        n_sbc: Number of (theta*, x) pairs.
        n_draws: Posterior draws per pair.

    Returns:
        Coverage at 20 linearly spaced central-interval levels and the median
        absolute coverage error per dimension.
    """
    rng = as_rng(rng)
    warnings = []
    if n_draws < 100:
        msg = f"only {n_draws} posterior draws per instance; coverage resolution is coarse"
        log.warning(msg)
        warnings.append(msg)
    theta_star, x = simulate_pairs(rng, n_sbc)
    draws = np.stack([posterior_sampler(x[i], n_draws, rng) for i in range(n_sbc)])
    result = ece_from_coverage(coverage_from_draws(draws, theta_star))
    result.warnings = warnings
    return result


# ------------------------------------------------------------------- reports


def mean_sd_se(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "sd": sd, "se": sd / math.sqrt(len(v)), "n": int(len(v))}


@dataclass
class MetricReport:
    """Per-instance and aggregate metrics of one model at one step count."""

    task: str
    model_kind: str
    k_steps: int
    per_instance: list[dict]
    ece_per_dim: list[float] | None = None
    sampling_ms_per_1k: float | None = None
    sbc: SbcResult | None = None

    @property
    def max_ece(self) -> float | None:
        return None if self.ece_per_dim is None else float(max(self.ece_per_dim))

    def aggregates(self) -> dict:
        return {key: mean_sd_se([row[key] for row in self.per_instance]) for key in ("rmse", "mmd", "c2st")}

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "model_kind": self.model_kind,
            "K_steps": self.k_steps,
            "aggregates": self.aggregates(),
            "ece_per_dim": self.ece_per_dim,
            "max_ece": self.max_ece,
            "sampling_ms_per_1k": self.sampling_ms_per_1k,
        }


def evaluate_instance(approx: np.ndarray, reference: np.ndarray, theta_star: np.ndarray, seed: int = 0,
                      c2st_config: C2stConfig | None = None) -> dict:
    """RMSE, MMD and C2ST of approximate draws against reference draws.

    Raises:
        DimensionError: if the two draw sets differ in size.
    """
    if approx.shape != reference.shape:
        raise DimensionError(f"approximate draws {approx.shape} and reference draws {reference.shape} differ")
    return {
        "rmse": rmse(approx, theta_star),
        "mmd": mmd_squared(approx, reference),
        "c2st": c2st(approx, reference, seed, c2st_config),
    }
