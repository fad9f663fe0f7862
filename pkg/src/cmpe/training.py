"""Epoch loop shared by CMPE and FMPE."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .consistency import ConsistencyModel, ConsistencySchedule, cmpe_training_step
from .estimator import PosteriorEstimator, build_networks
from .flow_matching import FlowMatchModel, fmpe_training_step
from .nn import AdamW
from .simulators import TrainingSet, get_task
from .summaries import DeepSetConfig

log = logging.getLogger(__name__)

MODEL_KINDS = ("cmpe", "fmpe")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    batch_size: int = 64
    lr0: float = 5e-4
    weight_decay: float = 0.0

    def iterations(self, budget: int) -> int:
        return self.epochs * math.ceil(budget / self.batch_size)


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    iterations: int = 0
    train_s: float = 0.0


def build_model(
    kind: str,
    data: TrainingSet,
    training: TrainingConfig,
    seed: int,
    hidden_widths=(256, 256),
    activation: str = "silu",
    dropout_rate: float = 0.0,
    l2_weight: float = 0.0,
    schedule: dict | None = None,
    summary_config: DeepSetConfig | None = None,
) -> PosteriorEstimator:
    """Fresh estimator whose weights depend only on ``seed``."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng([seed, 0xB0B])
    backbone, summary = build_networks(
        data.task, rng, hidden_widths, activation, dropout_rate, l2_weight, summary_config
    )
    if kind == "fmpe":
        return FlowMatchModel(backbone, data.task, data.standardization, summary)
    sched = ConsistencySchedule.for_dim(
        get_task(data.task).theta_dim,
        total_iterations=training.iterations(data.budget),
        **(schedule or {}),
    )
    return ConsistencyModel(backbone, data.task, data.standardization, summary, schedule=sched)


def train(model: PosteriorEstimator, data: TrainingSet, training: TrainingConfig, seed: int, progress=None) -> TrainResult:
    """Run all epochs; ``progress(epoch, mean_loss)`` is called after each one.

    Raises:
        TrainingDivergenceError: propagated from the step functions.
    """
    rng = np.random.default_rng([seed, 0x7EA1])
    theta = model.standardization.theta_forward(data.theta)
    x = model.standardization.x_forward(data.x)
    m = data.budget
    total = training.iterations(m)
    if isinstance(model, ConsistencyModel) and model.schedule.total_iterations != total:
        raise ValueError(
            f"schedule expects {model.schedule.total_iterations} iterations, training runs {total}"
        )
    opt = AdamW.for_params(model.params(), training.lr0, total, weight_decay=training.weight_decay)

    result = TrainResult()
    start = time.perf_counter()
    k = 0
    for epoch in range(training.epochs):
        order = rng.permutation(m)
        losses = []
        for s in range(0, m, training.batch_size):
            idx = order[s : s + training.batch_size]
            if isinstance(model, ConsistencyModel):
                loss = cmpe_training_step(model, opt, theta[idx], x[idx], k, rng)
            else:
                loss = fmpe_training_step(model, opt, theta[idx], x[idx], rng)
            losses.append(loss)
            k += 1
        mean_loss = float(np.mean(losses))
        result.loss_curve.append(mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
        elif epoch % max(1, training.epochs // 10) == 0:
            log.info("epoch %d/%d loss %.5f", epoch + 1, training.epochs, mean_loss)
    result.iterations = k
    result.train_s = time.perf_counter() - start
    return result
