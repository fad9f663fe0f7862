"""Shared test utilities."""

from __future__ import annotations

import numpy as np

from cmpe.consistency import ConsistencyModel, ConsistencySchedule, c_out, c_skip
from cmpe.estimator import build_networks
from cmpe.flow_matching import FlowMatchModel
from cmpe.nn import MlpConfig, MlpNetwork
from cmpe.simulators import Standardization
from cmpe.summaries import DeepSetConfig


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Log one PASS/FAIL line for the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def fd_gradients(loss_fn, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each array in ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, robust to individual near-zero entries."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def max_rel_error(analytic, numeric) -> float:
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


SCHED = ConsistencySchedule(total_iterations=100)


def small_model(task="two_moons", seed=0, dropout=0.0, l2=0.0, schedule=SCHED, std=None, widths=(8, 8)):
    summary = DeepSetConfig(MlpConfig(2, (6,), 5, "silu", dropout, l2), MlpConfig(5, (6,), 3, "silu", dropout, l2))
    backbone, ds = build_networks(task, seed, widths, "silu", dropout, l2, summary)
    d = backbone.config.output_dim
    std = std or Standardization.identity(d, 2)
    return ConsistencyModel(backbone, task, std, ds, schedule=schedule)


def linear_model(a: float, schedule=SCHED, std=None) -> ConsistencyModel:
    """Two-moons model whose consistency map at t_max is exactly ``theta -> a theta``.

    The backbone is a relu net computing ``k theta`` via relu(u) - relu(-u).
    """
    t = schedule.t_max
    k = (a - float(c_skip(t, schedule))) / float(c_out(t, schedule))
    d, cond = 2, 2
    cfg = MlpConfig(d + 1 + cond, (2 * d,), d, "relu")
    w0 = np.zeros((d + 1 + cond, 2 * d))
    w0[:d, :d] = np.eye(d)
    w0[:d, d:] = -np.eye(d)
    w1 = k * np.vstack([np.eye(d), -np.eye(d)])
    net = MlpNetwork(cfg, [w0, w1], [np.zeros(2 * d), np.zeros(d)])
    return ConsistencyModel(net, "two_moons", std or Standardization.identity(d, 2), None, schedule=schedule)


def small_fmpe(task="two_moons", seed=0, dropout=0.0, l2=0.0, std=None, widths=(8, 8)):
    summary = DeepSetConfig(MlpConfig(2, (6,), 5, "silu", dropout, l2), MlpConfig(5, (6,), 3, "silu", dropout, l2))
    backbone, ds = build_networks(task, seed, widths, "silu", dropout, l2, summary)
    d = backbone.config.output_dim
    return FlowMatchModel(backbone, task, std or Standardization.identity(d, 2), ds)
