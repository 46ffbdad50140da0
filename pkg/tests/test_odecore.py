import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktraj.errors import IntegrationError, ShapeError
from ktraj.field import MLPField, field_init
from ktraj.odecore import OdeConfig, _solve, dopri5_step, integrate, integrate_adjoint

TIGHT = OdeConfig(rtol=1e-9, atol=1e-9)


class LinearField:
    """dy/dt = c * y with the scalar c as the only parameter."""

    n_params = 1

    def __init__(self, c):
        self.c = c

    def eval(self, y, t):
        return self.c * y

    def vjp(self, y, t, a):
        return self.c * a, np.array([a @ y]), 0.0


class TimeField:
    """dy/dt = p * t, exercising the time cotangent."""

    n_params = 1

    def __init__(self, p):
        self.p = p

    def eval(self, y, t):
        return np.full_like(y, self.p * t)

    def vjp(self, y, t, a):
        return np.zeros_like(a), np.array([a.sum() * t]), float(a.sum() * self.p)


def test_config_validation():
    with pytest.raises(ValueError):
        OdeConfig(rtol=0)
    with pytest.raises(ValueError):
        OdeConfig(max_steps=0)
    with pytest.raises(ValueError):
        OdeConfig(safety=1.5)


def test_exponential_decay():
    y = integrate(lambda y, t: -y, np.array([1.0]), [0.0, 1.0], OdeConfig(rtol=1e-7, atol=1e-9))
    assert y[-1, 0] == pytest.approx(math.exp(-1), abs=1e-6)


def test_zero_field_is_identity():
    y0 = np.array([0.3, -0.2])
    ys = integrate(lambda y, t: np.zeros_like(y), y0, np.linspace(0, 1, 5))
    assert np.array_equal(ys, np.tile(y0, (5, 1)))


def test_polynomial_in_time():
    ys = integrate(lambda y, t: np.array([2 * t]), np.array([0.0]), [0.0, 0.5])
    assert ys[-1, 0] == pytest.approx(0.25, abs=1e-8)


def test_dense_output_at_many_query_times():
    qt = np.linspace(0, 2, 41)
    ys = integrate(lambda y, t: np.array([y[1], -y[0]]), np.array([0.0, 1.0]), qt, TIGHT)
    assert np.allclose(ys[:, 0], np.sin(qt), atol=1e-7)


def test_query_time_validation():
    with pytest.raises(ValueError):
        integrate(lambda y, t: y, np.ones(1), [0.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        integrate(lambda y, t: y, np.ones(1), [])


def test_nan_names_time():
    def f(y, t):
        return np.array([np.nan]) if t > 0.3 else -y
    with pytest.raises(IntegrationError) as info:
        integrate(f, np.ones(1), [0.0, 1.0])
    assert info.value.t is not None and info.value.t > 0.3
    assert "t=" in str(info.value)


def test_step_budget():
    with pytest.raises(IntegrationError, match="step budget"):
        integrate(lambda y, t: np.cos(200 * t) * np.ones(1), np.ones(1), [0.0, 10.0],
                  OdeConfig(max_steps=5))


def test_dopri5_step_exactness():
    y, e = dopri5_step(lambda y, t: np.zeros_like(y), np.array([2.0]), 0.0, 0.1)
    assert y[0] == 2.0 and e == 0.0
    y, e = dopri5_step(lambda y, t: np.ones_like(y), np.array([2.0]), 0.0, 0.1)
    assert y[0] == pytest.approx(2.1, abs=1e-15) and e < 1e-15
    with pytest.raises(ValueError):
        dopri5_step(lambda y, t: y, np.ones(1), 0.0, 0.0)


def _fixed_step_error(h):
    y, t = np.array([1.0]), 0.0
    for _ in range(int(round(1 / h))):
        y, _ = dopri5_step(lambda y, t: -y, y, t, h)
        t += h
    return abs(y[0] - math.exp(-1))


def test_fifth_order_convergence():
    ratio = _fixed_step_error(0.1) / _fixed_step_error(0.05)
    assert 24 <= ratio <= 40
    # the ratio approaches 2**5 as h shrinks
    coarse = _fixed_step_error(0.25) / _fixed_step_error(0.125)
    assert abs(ratio - 32) < abs(coarse - 32)


def test_linear_adjoint_analytic():
    for c in (0.0, 0.7):
        f = LinearField(c)
        ys = integrate(f, np.array([1.0]), [0.0, 1.0], TIGHT)
        b = integrate_adjoint(f, ys, [0.0, 1.0], np.array([1.0]), TIGHT)
        assert b.a_state[0] == pytest.approx(math.exp(c), rel=1e-7)
        assert b.a_params[0] == pytest.approx(math.exp(c), rel=1e-7)
        assert b.state[0] == pytest.approx(1.0, abs=1e-7)


def test_time_gradient():
    # y(1) = y0 + p/2 with t0 = 0; dL/dt0 = -f(y0, 0) = 0 and dL/dt1 = f(y1, 1) = p
    f = TimeField(3.0)
    ys = integrate(f, np.zeros(1), [0.0, 1.0], TIGHT)
    b = integrate_adjoint(f, ys, [0.0, 1.0], np.ones(1), TIGHT)
    assert b.a_params[0] == pytest.approx(0.5, rel=1e-8)
    assert b.time_grads[-1] == pytest.approx(3.0)
    assert b.a_time == pytest.approx(0.0, abs=1e-8)


def test_zero_cotangent_gives_zero_gradients():
    p = field_init(1, 2, hidden=5, seed=1, out_scale=1.0)
    f = MLPField(p)
    ys = integrate(f, np.full(4, 0.1), [0.0, 0.5, 1.0])
    b = integrate_adjoint(f, ys, [0.0, 0.5, 1.0], np.zeros((3, 4)))
    assert not b.a_state.any() and not b.a_params.any() and b.a_time == 0


def test_adjoint_shape_errors():
    f = LinearField(1.0)
    with pytest.raises(ShapeError):
        integrate_adjoint(f, np.ones(2), [0.0, 1.0], np.ones(3))
    with pytest.raises(ShapeError):
        integrate_adjoint(f, np.ones((2, 2)), [0.0, 1.0], np.ones((3, 2)))


def _fd(loss, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (loss(xp) - loss(xm)) / (2 * eps)
    return g


def _rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_adjoint_matches_finite_differences_dim8():
    # random 2-layer field with state dim 8; loss attaches at every query time
    rng = np.random.default_rng(3)
    p = field_init(1, 4, hidden=12, seed=3, out_scale=1.0)
    times = np.array([0.0, 0.2, 0.5, 0.9, 1.0])
    w = rng.standard_normal((len(times), 8))
    y0 = rng.uniform(-0.5, 0.5, 8)
    loss = lambda th, y: float(np.sum(w * integrate(MLPField(p.with_flat(th)), y, times, TIGHT)))
    f = MLPField(p)
    ys = integrate(f, y0, times, TIGHT)
    b = integrate_adjoint(f, ys, times, w, TIGHT)
    theta = p.flat()
    idx = rng.choice(theta.size, 25, replace=False)
    num = []
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += 1e-5
        tm[i] -= 1e-5
        num.append((loss(tp, y0) - loss(tm, y0)) / 2e-5)
    num = np.array(num)
    assert _rel(b.a_params[idx], num) <= 1e-4
    assert _rel(b.a_state, _fd(lambda y: loss(theta, y), y0)) <= 1e-4


@given(st.integers(0, 10_000))
def test_adjoint_fd_property(seed):
    rng = np.random.default_rng(seed)
    p = field_init(1, 2, hidden=6, seed=seed, out_scale=0.5)
    y0 = rng.uniform(-1, 1, 4)
    w = rng.standard_normal(4)
    loss = lambda y: float(w @ integrate(MLPField(p), y, [0.0, 1.0], TIGHT)[-1])
    f = MLPField(p)
    b = integrate_adjoint(f, integrate(f, y0, [0.0, 1.0], TIGHT), [0.0, 1.0], w, TIGHT)
    assert _rel(b.a_state, _fd(loss, y0)) <= 1e-4


def test_time_reversal_recovers_initial_state():
    p = field_init(1, 3, hidden=8, seed=2, out_scale=1.0)
    f = MLPField(p)
    y0 = np.linspace(-0.3, 0.3, 6)
    cfg = OdeConfig(rtol=1e-8, atol=1e-8)
    y1 = integrate(f, y0, [0.0, 1.0], cfg)[-1]
    b = integrate_adjoint(f, y1, [0.0, 1.0], np.ones(6), cfg)
    assert np.abs(b.state - y0).max() <= 10 * (cfg.atol + cfg.rtol * np.abs(y0).max())


def test_backward_solve_direction():
    out = _solve(lambda y, t: -y, np.array([math.exp(-1)]), np.array([1.0, 0.0]), TIGHT)
    assert out[-1, 0] == pytest.approx(1.0, rel=1e-8)


def test_determinism():
    p = field_init(1, 3, hidden=8, seed=4, out_scale=1.0)
    a = integrate(MLPField(p), np.ones(6) * 0.1, np.linspace(0, 1, 7))
    b = integrate(MLPField(p), np.ones(6) * 0.1, np.linspace(0, 1, 7))
    assert np.array_equal(a, b)
