import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmpe import io
from cmpe.errors import CacheMismatchError, DimensionError, TrainingDivergenceError
from cmpe.nn import (
    AdamW,
    MlpConfig,
    MlpNetwork,
    adamw_step,
    cosine_lr,
    l2_penalty,
    mlp_backward,
    mlp_forward,
)
from helpers import fd_gradients, max_rel_error


def make_net(sizes, activation="silu", dropout=0.0, l2=0.0, seed=0):
    cfg = MlpConfig(sizes[0], tuple(sizes[1:-1]), sizes[-1], activation, dropout, l2)
    return MlpNetwork.init(cfg, seed)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(hidden_widths=()),
        dict(dropout_rate=1.0),
        dict(dropout_rate=-0.1),
        dict(activation="tanh"),
        dict(l2_weight=-1.0),
        dict(input_dim=0),
    ],
)
def test_config_rejects_invalid(kwargs):
    base = dict(input_dim=3, hidden_widths=(4,), output_dim=2)
    base.update(kwargs)
    with pytest.raises(ValueError):
        MlpConfig(**base)


def test_layer_shapes_chain():
    net = make_net([3, 5, 4, 2])
    assert [w.shape for w in net.weights] == [(3, 5), (5, 4), (4, 2)]
    assert [b.shape for b in net.biases] == [(5,), (4,), (2,)]
    with pytest.raises(DimensionError):
        MlpNetwork(net.config, net.weights[:2], net.biases[:2])


# --------------------------------------------------------------- forward


def test_identity_relu_passes_positive_input():
    cfg = MlpConfig(3, (3,), 3, "relu")
    net = MlpNetwork(cfg, [np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    x = np.array([[0.5, 1.0, 2.0], [3.0, 0.1, 0.2]])
    out, _ = mlp_forward(net, x)
    np.testing.assert_array_equal(out, x)


def test_dropout_zero_train_and_eval_identical():
    net = make_net([4, 8, 8, 3], dropout=0.0)
    x = np.random.default_rng(1).standard_normal((5, 4))
    a, _ = mlp_forward(net, x, train_mode=True, rng=3)
    b, _ = mlp_forward(net, x, train_mode=False)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("activation", ["relu", "silu"])
def test_three_two_one_matches_hand_unrolled(activation):
    net = make_net([3, 2, 1], activation=activation, seed=11)
    net.biases[0][:] = [0.1, -0.2]
    net.biases[1][:] = [0.3]
    x = [0.5, -0.3, 1.1]
    w0, w1 = net.weights
    hidden = []
    for j in range(2):
        z = net.biases[0][j] + sum(x[i] * w0[i, j] for i in range(3))
        hidden.append(max(z, 0.0) if activation == "relu" else z / (1.0 + math.exp(-z)))
    expected = net.biases[1][0] + sum(hidden[j] * w1[j, 0] for j in range(2))
    out, _ = mlp_forward(net, np.array([x]))
    assert out[0, 0] == pytest.approx(expected, abs=1e-14)


def test_forward_rejects_wrong_width():
    net = make_net([3, 4, 2])
    with pytest.raises(DimensionError):
        mlp_forward(net, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        mlp_forward(net, np.zeros(3))


def test_forward_deterministic_with_seed():
    net = make_net([3, 16, 16, 2], dropout=0.3)
    x = np.random.default_rng(0).standard_normal((7, 3))
    a, _ = mlp_forward(net, x, True, 42)
    b, _ = mlp_forward(net, x, True, 42)
    c, _ = mlp_forward(net, x, True, 43)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_inverted_dropout_preserves_mean():
    cfg = MlpConfig(1, (1,), 1, "relu", dropout_rate=0.4)
    net = MlpNetwork(cfg, [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    out, _ = mlp_forward(net, np.ones((200_000, 1)), True, 0)
    # Bernoulli(0.6)/0.6: sd of the mean is sqrt(0.4/0.6)/sqrt(n)
    assert abs(out.mean() - 1.0) < 4 * math.sqrt(0.4 / 0.6 / 200_000)


# -------------------------------------------------------------- backward


def test_zero_output_grad_gives_zero_grads():
    net = make_net([3, 6, 2])
    x = np.random.default_rng(0).standard_normal((4, 3))
    _, cache = mlp_forward(net, x)
    grads, gin = mlp_backward(net, cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gin == 0)


def test_scalar_linear_weight_gradient_is_input():
    # one hidden unit with relu on a positive input acts linearly
    cfg = MlpConfig(1, (1,), 1, "relu")
    net = MlpNetwork(cfg, [np.array([[1.0]]), np.array([[2.5]])], [np.zeros(1), np.zeros(1)])
    _, cache = mlp_forward(net, np.array([[0.7]]))
    grads, _ = mlp_backward(net, cache, np.ones((1, 1)))
    assert grads[2][0, 0] == pytest.approx(0.7)  # d out / d w1 = hidden = 0.7
    assert grads[0][0, 0] == pytest.approx(2.5 * 0.7)


def test_stale_cache_rejected():
    net = make_net([2, 3, 1])
    x = np.ones((1, 2))
    _, cache = mlp_forward(net, x)
    net.touch()
    with pytest.raises(CacheMismatchError):
        mlp_backward(net, cache, np.ones((1, 1)))
    other = make_net([2, 3, 1])
    _, cache = mlp_forward(other, x)
    with pytest.raises(CacheMismatchError):
        mlp_backward(net, cache, np.ones((1, 1)))


def _weighted_loss(net, x, g, train, seed):
    out, _ = mlp_forward(net, x, train, seed)
    return float(np.sum(out * g)) + l2_penalty(net)


@given(
    depth=st.integers(1, 3),
    width=st.integers(2, 6),
    activation=st.sampled_from(["relu", "silu"]),
    dropout=st.sampled_from([0.0, 0.25]),
    l2=st.sampled_from([0.0, 1e-2]),
    seed=st.integers(0, 10_000),
)
def test_gradients_match_finite_differences(depth, width, activation, dropout, l2, seed):
    rng = np.random.default_rng(seed)
    net = make_net([3, *([width] * depth), 2], activation, dropout, l2, seed)
    for b in net.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((4, 3))
    g = rng.standard_normal((4, 2))
    _, cache = mlp_forward(net, x, True, seed)
    grads, gin = mlp_backward(net, cache, g)
    numeric = fd_gradients(lambda: _weighted_loss(net, x, g, True, seed), net.params())
    assert max_rel_error(grads, numeric) <= 1e-4
    numeric_in = fd_gradients(lambda: _weighted_loss(net, x, g, True, seed), [x])
    assert max_rel_error([gin], numeric_in) <= 1e-4


def test_l2_consistency():
    rng = np.random.default_rng(5)
    lam = 0.03
    plain = make_net([3, 5, 2], seed=1)
    reg = MlpNetwork(
        MlpConfig(3, (5,), 2, l2_weight=lam), [w.copy() for w in plain.weights], [b.copy() for b in plain.biases]
    )
    x, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    expected_penalty = lam * 0.5 * sum(float(np.sum(p**2)) for p in plain.params())
    assert _weighted_loss(reg, x, g, False, 0) - _weighted_loss(plain, x, g, False, 0) == pytest.approx(
        expected_penalty, abs=1e-12
    )
    g_plain, _ = mlp_backward(plain, mlp_forward(plain, x)[1], g)
    g_reg, _ = mlp_backward(reg, mlp_forward(reg, x)[1], g)
    for a, b, p in zip(g_reg, g_plain, plain.params()):
        np.testing.assert_allclose(a - b, lam * p, atol=1e-12)


# ------------------------------------------------------------- optimizer


def _scalar_net(value: float) -> MlpNetwork:
    cfg = MlpConfig(1, (1,), 1, "relu")
    return MlpNetwork(cfg, [np.array([[value]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])


def test_zero_grads_leave_params_unchanged():
    net = make_net([3, 4, 2])
    before = [p.copy() for p in net.params()]
    opt = AdamW.for_params(net.params(), 1e-2, 10)
    adamw_step(opt, net, [np.zeros_like(p) for p in net.params()])
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)
    assert opt.step == 1


def test_first_adam_step_moves_by_lr():
    net = _scalar_net(1.0)
    opt = AdamW.for_params(net.params(), 0.1, 1000)
    grads = [np.ones((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1)]
    lr = adamw_step(opt, net, grads)
    assert lr == pytest.approx(0.1)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert net.weights[0][0, 0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_decoupled_weight_decay():
    net = _scalar_net(2.0)
    opt = AdamW.for_params(net.params(), 0.05, 100, weight_decay=0.1)
    adamw_step(opt, net, [np.zeros_like(p) for p in net.params()])
    assert net.weights[0][0, 0] == pytest.approx(2.0 * (1.0 - 0.05 * 0.1), abs=1e-15)


def test_nan_gradient_reports_layer():
    net = make_net([2, 3, 3, 1])
    opt = AdamW.for_params(net.params(), 1e-3, 10)
    grads = [np.zeros_like(p) for p in net.params()]
    grads[2][0, 0] = np.nan  # W1
    with pytest.raises(TrainingDivergenceError) as info:
        adamw_step(opt, net, grads)
    assert info.value.diagnostics["layer"] == 1


def test_step_past_total_rejected():
    net = make_net([2, 3, 1])
    opt = AdamW.for_params(net.params(), 1e-3, 1)
    zeros = [np.zeros_like(p) for p in net.params()]
    adamw_step(opt, net, zeros)
    with pytest.raises(ValueError):
        adamw_step(opt, net, zeros)


@pytest.mark.parametrize("step,expected", [(0, 1.0), (100, 0.0), (50, 0.5), (25, 0.5 * (1 + math.cos(math.pi / 4)))])
def test_cosine_lr_values(step, expected):
    opt = AdamW(lr0=1.0, total_steps=100, step=step)
    assert cosine_lr(opt) == pytest.approx(expected, abs=1e-15)


@given(total=st.integers(1, 10_000), lr0=st.floats(1e-6, 1.0))
def test_cosine_lr_monotone(total, lr0):
    lrs = [cosine_lr(AdamW(lr0=lr0, total_steps=total, step=s)) for s in range(0, total + 1, max(1, total // 50))]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_reduces_quadratic():
    rng = np.random.default_rng(0)
    net = make_net([2, 8, 1], seed=0)
    x = rng.standard_normal((64, 2))
    y = (x[:, :1] - 0.5 * x[:, 1:]) ** 2
    opt = AdamW.for_params(net.params(), 1e-2, 300)
    first = None
    for _ in range(300):
        out, cache = mlp_forward(net, x)
        loss = float(np.mean((out - y) ** 2))
        first = loss if first is None else first
        grads, _ = mlp_backward(net, cache, 2 * (out - y) / len(x))
        adamw_step(opt, net, grads)
    assert loss < 0.2 * first


# ------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip_byte_stable(tmp_path):
    net = make_net([3, 7, 2], dropout=0.1, l2=1e-4, seed=9)
    path = io.write_json(tmp_path / "a.json", net.to_dict())
    loaded = MlpNetwork.from_dict(io.read_json(path))
    path2 = io.write_json(tmp_path / "b.json", loaded.to_dict())
    assert path.read_bytes() == path2.read_bytes()
    for a, b in zip(net.params(), loaded.params()):
        np.testing.assert_array_equal(a, b)
    assert loaded.config == net.config
    assert set(json.loads(path.read_text())) == {"config", "layers"}
