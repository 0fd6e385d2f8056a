import math

import numpy as np
import pytest
import torch

from streamsched.events import DomainError
from streamsched.nn import GTrXL, MLP, TimeLSTM, grad_check, gtrxl_encode, mlp_forward, time_lstm_encode
from streamsched.nn._init import DTYPE
from streamsched.nn.gradcheck import GradCheckError, autograd_gradients


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_time_lstm(lstm, xs, dts):
    """Loop-level reimplementation over python floats, one coordinate at a time."""
    P = {k: v.detach().numpy() for k, v in lstm.named_parameters()}
    act = sig if lstm.activation == "sigmoid" else math.tanh
    d_s = lstm.state_dim
    s, q = [0.0] * d_s, [0.0] * d_s
    for x, dt in zip(xs, dts):
        def aff(Wx, Ws=None, b=None, j=0):
            total = sum(x[a] * Wx[a, j] for a in range(len(x)))
            if Ws is not None:
                total += sum(s[a] * Ws[a, j] for a in range(d_s))
            return total + (b[j] if b is not None else 0.0)
        new_q, new_s = [], []
        for j in range(d_s):
            g = sig(aff(P["W_xg"], j=j) + sig(dt * P["W_g"][0, j] + P["b_g"][j]))
            f = sig(aff(P["W_xf"], P["W_sf"], P["b_f"], j))
            i = sig(aff(P["W_xi"], P["W_si"], P["b_i"], j))
            qj = f * q[j] + i * g * act(aff(P["W_xq"], P["W_sq"], P["b_q"], j))
            new_q.append(qj)
        for j in range(d_s):
            o = sig(aff(P["W_xo"], P["W_so"], P["b_o"], j) + dt * P["W_o"][0, j] + new_q[j] * P["W_qo"][j])
            new_s.append(o * act(new_q[j]))
        s, q = new_s, new_q
    return np.array(s)


# --- Time-LSTM --------------------------------------------------------------

def test_time_lstm_zero_params_closed_form():
    lstm = TimeLSTM(3, 4)
    with torch.no_grad():
        for p in lstm.parameters():
            p.zero_()
    s = time_lstm_encode(np.zeros((1, 3)), np.zeros(1), lstm)
    expected = 0.5 * sig(0.25 * sig(0.5))
    assert expected == pytest.approx(0.2694, abs=1e-4)
    assert torch.allclose(s, torch.full((4,), expected, dtype=DTYPE), atol=1e-15, rtol=0)


@pytest.mark.parametrize("activation", ["sigmoid", "tanh"])
def test_time_lstm_matches_scalar_oracle(activation):
    rng = np.random.default_rng(0)
    lstm = TimeLSTM(4, 3, seed=5, activation=activation)
    xs, dts = rng.normal(size=(6, 4)), np.concatenate([[0.0], rng.uniform(0, 9, 5)])
    got = time_lstm_encode(xs, dts, lstm).detach().numpy()
    assert np.allclose(got, scalar_time_lstm(lstm, xs, dts), atol=1e-13, rtol=0)


def test_time_lstm_gap_matters():
    lstm = TimeLSTM(3, 4, seed=1)
    x = np.ones((2, 3))
    near = time_lstm_encode(x, np.array([0.0, 0.0]), lstm)
    far = time_lstm_encode(x, np.array([0.0, 1000.0]), lstm)
    assert not torch.allclose(near, far)


def test_time_lstm_batch_equals_single():
    lstm = TimeLSTM(3, 4, seed=2)
    x = torch.randn(5, 7, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    d = torch.rand(5, 7, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    batch = lstm(x, d)
    for b in range(5):
        assert torch.allclose(batch[b], lstm(x[b], d[b]), atol=1e-14)


@pytest.mark.parametrize("features,deltas", [
    (np.zeros((3, 2)), np.zeros(3)),
    (np.zeros((3, 3)), np.zeros(2)),
    (np.zeros((3, 3)), np.array([0.0, -1.0, 0.0])),
    (np.zeros((0, 3)), np.zeros(0)),
])
def test_time_lstm_errors(features, deltas):
    with pytest.raises(DomainError):
        time_lstm_encode(features, deltas, TimeLSTM(3, 2))


@pytest.mark.parametrize("seed", range(10))
def test_time_lstm_gradients(seed):
    lstm = TimeLSTM(4, 4, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(5, 4, dtype=DTYPE, generator=gen)
    d = torch.rand(5, dtype=DTYPE, generator=gen) * 3
    w = torch.randn(4, dtype=DTYPE, generator=gen)
    report = grad_check(lambda: (lstm(x, d) * w).sum(), list(lstm.parameters()), probe_count=30, seed=seed)
    assert report.passed, report.failures


def test_time_lstm_input_gradients():
    lstm = TimeLSTM(4, 4, seed=3)
    x = torch.randn(3, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(9), requires_grad=True)
    d = torch.tensor([0.0, 1.0, 2.0], dtype=DTYPE)
    assert grad_check(lambda: lstm(x, d).sum(), [x], probe_count=12).passed


# --- MLP ----------------------------------------------------------------------

def test_mlp_identity():
    mlp = MLP([3, 3], ["identity"])
    with torch.no_grad():
        mlp.weights[0].copy_(torch.eye(3, dtype=DTYPE))
        mlp.biases[0].zero_()
    x = torch.tensor([0.3, -2.0, 5.0], dtype=DTYPE)
    assert torch.equal(mlp_forward(x, mlp), x)


def test_mlp_softmax_zero_logits():
    mlp = MLP([2, 4], ["softmax"])
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
    assert torch.equal(mlp(torch.ones(2, dtype=DTYPE)), torch.full((4,), 0.25, dtype=DTYPE))


def test_mlp_dimension_mismatch():
    with pytest.raises(DomainError):
        MLP([3, 2], ["relu"])(torch.ones(4, dtype=DTYPE))
    with pytest.raises(DomainError):
        MLP([3, 2], ["relu", "relu"])
    with pytest.raises(DomainError):
        MLP([3, 2], ["gelu"])


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradients(seed):
    mlp = MLP([8, 6, 4], ["sigmoid", "softmax"], seed=seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(8, dtype=DTYPE, generator=gen)
    w = torch.randn(4, dtype=DTYPE, generator=gen)
    assert grad_check(lambda: (mlp(x) * w).sum(), list(mlp.parameters()), probe_count=30, seed=seed).passed


def test_mlp_softmax_rows_sum_to_one():
    mlp = MLP([5, 7, 24], ["relu", "softmax"], seed=4)
    out = mlp(torch.randn(1000, 5, dtype=DTYPE, generator=torch.Generator().manual_seed(2)) * 5)
    assert torch.all(out > 0) and torch.all(out < 1)
    assert torch.max(torch.abs(out.sum(-1) - 1)) < 1e-12


# --- GTrXL ----------------------------------------------------------------------

def test_gtrxl_closed_gates_identity():
    net = GTrXL(4, 6, layers=2, heads=3, gate_bias=1e4, seed=0)
    states = torch.randn(5, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    assert torch.equal(gtrxl_encode(states, net), net.project(states))


def test_gtrxl_causal():
    net = GTrXL(4, 4, layers=2, heads=2, seed=3)
    states = torch.randn(6, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    shuffled = states.clone()
    shuffled[3:] = states[[5, 3, 4]] * 2.0
    a, b = net(states), net(shuffled)
    assert torch.allclose(a[:3], b[:3], atol=1e-14)
    assert not torch.allclose(a[3:], b[3:])


def test_gtrxl_single_position():
    net = GTrXL(3, 4, seed=0)
    assert net(torch.ones(1, 3, dtype=DTYPE)).shape == (1, 4)


def test_gtrxl_errors():
    with pytest.raises(DomainError):
        GTrXL(4, 5, heads=2)
    with pytest.raises(DomainError):
        GTrXL(4, 4)(torch.ones(3, 5, dtype=DTYPE))
    with pytest.raises(DomainError):
        GTrXL(4, 4)(torch.ones(0, 4, dtype=DTYPE))


def test_gtrxl_gradients_small():
    net = GTrXL(4, 4, layers=1, heads=1, seed=0)
    states = torch.randn(3, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    w = torch.randn(3, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    report = grad_check(lambda: (net(states) * w).sum(), list(net.parameters()), probe_count=60, tolerance=1e-3)
    assert report.passed, report.failures


@pytest.mark.parametrize("seed", range(10))
def test_gtrxl_gradients(seed):
    net = GTrXL(8, 8, layers=2, heads=2, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    states = torch.randn(4, 8, dtype=DTYPE, generator=gen)
    w = torch.randn(4, 8, dtype=DTYPE, generator=gen)
    report = grad_check(lambda: (net(states) * w).sum(), list(net.parameters()), probe_count=40,
                        tolerance=1e-3, seed=seed)
    assert report.passed, report.failures


# --- harness --------------------------------------------------------------------

def test_grad_check_linear_is_exact():
    a = torch.randn(6, dtype=DTYPE, generator=torch.Generator().manual_seed(0), requires_grad=True)
    c = torch.randn(6, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    report = grad_check(lambda: (a * c).sum(), [a], probe_count=6)
    assert report.max_rel_error < 1e-9


def test_grad_check_flags_corrupted_coordinate():
    a = torch.randn(5, dtype=DTYPE, generator=torch.Generator().manual_seed(0), requires_grad=True)
    fn = lambda: (a**3).sum()  # noqa: E731

    def corrupted():
        g = autograd_gradients(fn, [a])
        g[0] = g[0].clone()
        g[0][2] *= 2
        return g

    report = grad_check(fn, [a], probe_count=5, grad_fn=corrupted)
    assert not report.passed
    assert [(t, c) for t, c, *_ in report.failures] == [(0, 2)]


def test_grad_check_non_finite():
    a = torch.tensor([0.0], dtype=DTYPE, requires_grad=True)
    with pytest.raises(GradCheckError):
        grad_check(lambda: torch.log(a).sum(), [a])
