"""Finite-difference suites for every hand-written derivative.

Each suite returns a :class:`CheckResult`; ``run_all`` executes them in a
fixed order.  Errors are ``max |analytic - numeric| / max |numeric|`` over
the probed coordinates.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datakit import make_dataset
from .field import MLPField, field_init
from .nufft import NufftPlan
from .objective import hybrid_loss
from .odecore import OdeConfig, integrate, integrate_adjoint

__all__ = ["CheckResult", "check_ode_adjoint", "check_nufft_grad", "check_diffcore",
           "check_end_to_end", "run_all", "SUITES"]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: rel err {self.error:.3e} (tol {self.tolerance:.0e}, {self.seconds:.1f} s)"


def _rel(analytic, numeric):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.abs(numeric).max()
    return float(np.abs(analytic - numeric).max() / (scale if scale > 0 else 1.0))


def _central(f, x, idx, eps):
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        out.append((f(xp) - f(xm)) / (2 * eps))
    return np.array(out)


def check_ode_adjoint(seed=0, tol=1e-4):
    """Adjoint parameter/state gradients of a small MLP field against central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = field_init(1, 3, hidden=8, seed=seed, out_scale=1.0)
    params = params.with_flat(params.flat() * 2.0)
    y0 = rng.uniform(-0.3, 0.3, params.D)
    times = np.array([0.0, 0.3, 0.6, 1.0])
    weights = rng.standard_normal((len(times), params.D))
    cfg = OdeConfig(rtol=1e-11, atol=1e-12)

    def loss(theta, y):
        ys = integrate(MLPField(params.with_flat(theta)), y, times, cfg)
        return float(np.sum(weights * ys))

    theta = params.flat()
    fld = MLPField(params)
    ys = integrate(fld, y0, times, cfg)
    bundle = integrate_adjoint(fld, ys, times, weights, cfg)
    idx = rng.choice(theta.size, 15, replace=False)
    num_p = _central(lambda th: loss(th, y0), theta, idx, 1e-5)
    num_y = _central(lambda y: loss(theta, y), y0, range(y0.size), 1e-5)
    err = max(_rel(bundle.a_params[idx], num_p), _rel(bundle.a_state, num_y))
    return CheckResult("ode_adjoint", err, tol, time.perf_counter() - t0)


def check_nufft_grad(seed=0, tol=1e-4):
    """Sample-location gradients of the forward and adjoint transforms."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n, K = 16, 40
    pts = rng.uniform(-0.45, 0.45, (K, 2))
    img = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    cot = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    icot = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))

    def fwd_loss(p):
        return float(np.real(np.vdot(cot, NufftPlan(p.reshape(K, 2), n).forward(img))))

    def adj_loss(p):
        return float(np.real(np.vdot(icot, NufftPlan(p.reshape(K, 2), n).adjoint(cot))))

    plan = NufftPlan(pts, n)
    idx = rng.choice(2 * K, 20, replace=False)
    flat = pts.ravel()
    e1 = _rel(plan.point_grad(img, cot).ravel()[idx], _central(fwd_loss, flat, idx, 1e-6))
    e2 = _rel(plan.adjoint_point_grad(cot, icot).ravel()[idx], _central(adj_loss, flat, idx, 1e-6))
    return CheckResult("nufft_point_grad", max(e1, e2), tol, time.perf_counter() - t0)


def _diffcore_graph(x, w1, w2):
    tape = dc.Tape()
    xl = tape.leaf(x)
    a = tape.leaf(w1)
    b = tape.leaf(w2)
    img, _ = _normalize(xl)
    h = dc.reshape(img, (1,) + x.shape)
    h = dc.leaky_relu(dc.instance_norm(dc.conv2d(h, a)))
    skip = h
    h = dc.nearest_upsample(dc.max_pool2d(h))
    h = dc.concat([h, skip], axis=0)
    out = dc.reshape(dc.conv2d(h, b), x.shape)
    loss = hybrid_loss(dc.relu(out), tape.constant(np.full(x.shape, 0.5)))
    return tape, loss, (xl, a, b)


def _normalize(xl):
    scale = dc.percentile(xl, 99.0)
    return xl / scale, scale


def check_diffcore(seed=0, tol=1e-5):
    """Reverse-mode gradients of a graph touching every tape operation."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 1.0, (8, 8))
    w1 = rng.standard_normal((3, 1, 3, 3)) * 0.5
    w2 = rng.standard_normal((1, 6, 3, 3)) * 0.5
    tape, loss, (xl, a, b) = _diffcore_graph(x, w1, w2)
    tape.backward(loss)
    errs = []
    for k, arr in enumerate((x, w1, w2)):
        grad = (xl, a, b)[k].grad

        def f(v, k=k):
            args = [x, w1, w2]
            args[k] = v
            return float(_diffcore_graph(*args)[1].values)

        idx = rng.choice(arr.size, min(12, arr.size), replace=False)
        errs.append(_rel(grad.ravel()[idx], _central(f, arr, idx, 1e-6)))
    return CheckResult("diffcore", max(errs), tol, time.perf_counter() - t0)


def small_config():
    """The small pipeline used for the end-to-end check (16x16 grid, 2 shots, 8 control points)."""
    from .trainer import TrainConfig
    return TrainConfig(grid=16, shots=2, samples_per_shot=32, n_control=8, hidden=8, coils=2,
                       levels=1, base_channels=4, field_gain=1.0, k_extent=0.45,
                       ode=OdeConfig(rtol=1e-10, atol=1e-12))


def check_end_to_end(seed=0, tol=5e-3, n_field=12, n_control=12):
    """Full pipeline gradient (field parameters and control points) with penalties active."""
    from .trainer import Pipeline, backward_pipeline, forward_pipeline, init_state, trajectory_of

    t0 = time.perf_counter()
    cfg = dataclasses.replace(small_config(), seed=seed)
    pipe = Pipeline(cfg)
    st = init_state(cfg, pipe)
    # a field strong enough to bend the trajectory visibly
    nw = st.field.w1.size + st.field.b1.size
    st.field = st.field.with_flat(st.field.flat() * np.r_[np.ones(nw), np.full(st.field.size - nw, 300.0)])
    data = make_dataset(2, cfg.grid, cfg.coils, seed, 2)
    # tighten the limits so that both penalties are active on this short trajectory
    pts, _ = trajectory_of(st, pipe)
    lim = pipe.limits
    ks = lim.k_scale / lim.gamma
    g = np.linalg.norm(np.diff(pts, axis=1), axis=-1) * ks / lim.dwell
    s = np.linalg.norm(np.diff(pts, 2, axis=1), axis=-1) * ks / lim.dwell ** 2
    limits = dataclasses.replace(cfg.limits, g_max=float(np.median(g)), s_max=float(np.median(s)))
    cfg = dataclasses.replace(cfg, limits=limits)
    pipe = Pipeline(cfg)
    _, _, inter = forward_pipeline(st.field, st.recon, st.controls, data, cfg, pipe)
    grads = backward_pipeline(inter)
    theta = st.field.flat()

    def loss(th, c):
        return forward_pipeline(st.field.with_flat(th), st.recon, c, data, cfg, pipe,
                                need_grad=False)[1].total

    rng = np.random.default_rng(seed)
    ti = rng.choice(theta.size, n_field, replace=False)
    ci = rng.choice(st.controls.size, n_control, replace=False)
    e1 = _rel(grads.field[ti], _central(lambda th: loss(th, st.controls), theta, ti, 1e-5))
    e2 = _rel(grads.controls[ci], _central(lambda c: loss(theta, c), st.controls, ci, 1e-6))
    return CheckResult("end_to_end", max(e1, e2), tol, time.perf_counter() - t0)


SUITES = {
    "ode_adjoint": check_ode_adjoint,
    "nufft_point_grad": check_nufft_grad,
    "diffcore": check_diffcore,
    "end_to_end": check_end_to_end,
}


def run_all(seed=0, names=None):
    return [SUITES[n](seed=seed) for n in (names or SUITES)]
