"""Small dense networks with hand-written reverse mode and AdamW.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
shape ``(B, fan_in)`` maps to ``x @ W + b``. Hidden layers apply the
activation followed by (inverted) dropout; the output layer is linear.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CacheMismatchError, DimensionError, TrainingDivergenceError

ACTIVATIONS = ("relu", "silu")

_net_ids = itertools.count()


def as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    dropout_rate: float = 0.0
    l2_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise ValueError("hidden_widths must be nonempty")
        if min(self.input_dim, self.output_dim, *self.hidden_widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be nonnegative")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "dropout_rate": float(self.dropout_rate),
            "l2_weight": float(self.l2_weight),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "silu"),
            dropout_rate=float(d.get("dropout_rate", 0.0)),
            l2_weight=float(d.get("l2_weight", 0.0)),
        )


@dataclass(eq=False)
class MlpNetwork:
    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # bumped on every in-place parameter update; backward checks it
    version: int = 0
    uid: int = field(default_factory=lambda: next(_net_ids))

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("number of layers does not match config")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise DimensionError(
                    f"layer {i}: got weight {w.shape} / bias {b.shape}, "
                    f"expected {(sizes[i], sizes[i + 1])} / {(sizes[i + 1],)}"
                )

    @classmethod
    def init(cls, config: MlpConfig, rng: np.random.Generator | int | None = None) -> "MlpNetwork":
        """Uniform fan-in initialization (Kaiming-style), zero biases."""
        rng = as_rng(rng)
        gain = math.sqrt(2.0) if config.activation == "relu" else 1.0
        sizes = config.layer_sizes
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = gain * math.sqrt(3.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``[W0, b0, W1, b1, ...]``."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def touch(self) -> None:
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpNetwork":
        config = MlpConfig.from_dict(d["config"])
        weights = [np.array(layer["weight"], dtype=np.float64).reshape(-1, len(layer["bias"])) for layer in d["layers"]]
        biases = [np.array(layer["bias"], dtype=np.float64) for layer in d["layers"]]
        return cls(config, weights, biases)


@dataclass
class ForwardCache:
    net_uid: int
    net_version: int
    inputs: list[np.ndarray]  # input to each layer (post-dropout activations)
    preacts: list[np.ndarray]  # hidden pre-activations
    masks: list[np.ndarray | None]  # scaled dropout masks


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z * _sigmoid(z)


def _activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mlp_forward(
    net: MlpNetwork,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch.

    Args:
        net: Network to evaluate.
        x: Input batch of shape ``(B, input_dim)``.
        train_mode: Apply dropout if the config asks for it.
        rng: Generator or integer seed for the dropout masks.

    Returns:
        Output of shape ``(B, output_dim)`` and the cache needed by
        :func:`mlp_backward`.
    """
    cfg = net.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"expected input of shape (B, {cfg.input_dim}), got {x.shape}")
    use_dropout = train_mode and cfg.dropout_rate > 0.0
    if use_dropout:
        rng = as_rng(rng)
        keep = 1.0 - cfg.dropout_rate

    inputs, preacts, masks = [], [], []
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w
        z += b
        if i == last:
            h = z
            break
        preacts.append(z)
        h = _activate(z, cfg.activation)
        if use_dropout:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    return h, ForwardCache(net.uid, net.version, inputs, preacts, masks)


def mlp_backward(
    net: MlpNetwork,
    cache: ForwardCache,
    output_grad: np.ndarray,
    param_grads: bool = True,
) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Reverse-mode pass through a cached forward call.

    ``output_grad`` is dLoss/dOutput for the whole batch; parameter gradients
    are summed over the batch and include the L2 term ``l2_weight * param``.

    Returns:
        ``(grads, input_grad)`` where ``grads`` follows :meth:`MlpNetwork.params`
        ordering (``None`` when ``param_grads`` is false) and ``input_grad`` has
        the shape of the forward input.
    """
    if cache.net_uid != net.uid or cache.net_version != net.version:
        raise CacheMismatchError("cache does not belong to the current state of this network")
    cfg = net.config
    g = np.asarray(output_grad, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, cfg.output_dim):
        raise DimensionError(f"expected output grad of shape {(batch, cfg.output_dim)}, got {g.shape}")

    grads: list[np.ndarray] = [None] * (2 * net.n_layers) if param_grads else None
    l2 = cfg.l2_weight
    for i in range(net.n_layers - 1, -1, -1):
        if param_grads:
            dw = cache.inputs[i].T @ g
            db = g.sum(axis=0)
            if l2:
                dw += l2 * net.weights[i]
                db += l2 * net.biases[i]
            grads[2 * i] = dw
            grads[2 * i + 1] = db
        g = g @ net.weights[i].T
        if i > 0:
            mask = cache.masks[i - 1]
            if mask is not None:
                g = g * mask
            g = g * _activation_grad(cache.preacts[i - 1], cfg.activation)
    return grads, g


def l2_penalty(net: MlpNetwork) -> float:
    """The loss term ``l2_weight * 0.5 * sum(param**2)``."""
    lam = net.config.l2_weight
    if lam == 0.0:
        return 0.0
    return 0.5 * lam * sum(float(np.sum(p * p)) for p in net.params())


@dataclass
class AdamW:
    """AdamW moments and schedule state for a fixed list of parameter arrays."""

    lr0: float
    total_steps: int
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr0: float, total_steps: int, **kwargs) -> "AdamW":
        if total_steps <= 0:
            raise ValueError("total_steps must be positive")
        return cls(
            lr0=lr0,
            total_steps=total_steps,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def cosine_lr(state: AdamW) -> float:
    """Cosine decay from ``lr0`` at step 0 to zero at ``total_steps``."""
    if state.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    frac = min(state.step, state.total_steps) / state.total_steps
    return state.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def _as_net_list(nets) -> list[MlpNetwork]:
    if isinstance(nets, MlpNetwork):
        return [nets]
    return [n for n in nets if n is not None]


def adamw_step(state: AdamW, nets: MlpNetwork | Sequence[MlpNetwork], grads: Sequence[np.ndarray]) -> float:
    """Apply one AdamW update in place and return the learning rate used.

    ``grads`` is the concatenation of each network's gradients in
    :meth:`MlpNetwork.params` order.
    """
    nets = _as_net_list(nets)
    params = [p for net in nets for p in net.params()]
    if len(grads) != len(params) or len(state.first_moment) != len(params):
        raise DimensionError("gradient buffers do not match the parameters")
    if state.step >= state.total_steps:
        raise ValueError(f"optimizer already took all {state.total_steps} steps")

    offsets = np.cumsum([0] + [2 * net.n_layers for net in nets])
    for j, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            net_index = int(np.searchsorted(offsets, j, side="right") - 1)
            layer = (j - offsets[net_index]) // 2
            raise TrainingDivergenceError(
                "non-finite gradient", network=net_index, layer=int(layer), step=state.step
            )

    lr = cosine_lr(state)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    decay = 1.0 - lr * state.weight_decay
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps_adam
        if decay != 1.0:
            p *= decay
        p -= (lr / bc1) * m / denom
    state.step = t
    for net in nets:
        net.touch()
    return lr


def optimizer_to_dict(state: AdamW) -> dict:
    return {
        "lr0": state.lr0,
        "total_steps": state.total_steps,
        "weight_decay": state.weight_decay,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps_adam": state.eps_adam,
        "step": state.step,
    }
