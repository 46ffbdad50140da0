"""Adaptive Dormand-Prince 5(4) integration and adjoint-state gradients.

A vector field is any object with

* ``eval(state, t) -> dstate``
* ``vjp(state, t, cot) -> (cot_state, cot_params, cot_time)``
* ``n_params``

and optionally ``eval_vjp(state, t, cot)`` returning ``(dstate, cot_state,
cot_params, cot_time)`` in one pass.  Fields with structured parameters may
also provide ``eval_vjp_factors`` / ``combine_param_factors`` so that the
parameter cotangent is only ever formed as a weighted sum over RK stages.

Plain callables ``f(y, t)`` are accepted wherever only ``eval`` is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError, ShapeError

__all__ = ["OdeConfig", "AdjointBundle", "dopri5_step", "integrate", "integrate_adjoint"]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# Weights for the solution at the step midpoint (Shampine's continuous extension).
_C_MID = np.array([
    6025192743 / 30085553152 / 2, 0.0, 51252292925 / 65400821598 / 2,
    -2691868925 / 45128329728 / 2, 187940372067 / 1594534317072 / 2,
    -1776094331 / 19743644256 / 2, 11237099 / 235043384 / 2,
])


@dataclass(frozen=True)
class OdeConfig:
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 10_000
    initial_step: float | None = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")


@dataclass
class AdjointBundle:
    state: np.ndarray      # k(t0) recovered by the backward solve
    a_state: np.ndarray    # dL/dk(t0)
    a_params: np.ndarray   # dL/dtheta
    a_time: float          # dL/dt0
    time_grads: np.ndarray = field(default=None)  # dL/dt_i for every query time


def _eval_fn(fld):
    return fld.eval if hasattr(fld, "eval") else fld


def _checked(fun, y, t):
    dy = fun(y, t)
    if not np.all(np.isfinite(dy)):
        raise IntegrationError(f"non-finite derivative at t={t!r}", t)
    return dy


def _stages(fun, y, t, h, k0, q0=None):
    """Seven Dormand-Prince stages.  ``fun`` returns ``(dy, q)``; the q's ride along."""
    k, q = [k0], [q0]
    for i in range(1, 7):
        yi = y + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        ki, qi = fun(yi, t + _C[i] * h)
        _check_finite(ki, t + _C[i] * h)
        k.append(ki)
        q.append(qi)
    y_next = y + h * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
    return y_next, err, k, q


def _check_finite(dy, t):
    if not np.all(np.isfinite(dy)):
        raise IntegrationError(f"non-finite derivative at t={t!r}", t)


def _plain(fun):
    def wrapped(y, t):
        return fun(y, t), None
    return wrapped


def dopri5_step(field, y, t, h):
    """One embedded 5(4) step; returns the 5th-order solution and the error norm."""
    if not h > 0:
        raise ValueError("step size must be positive")
    fun = _eval_fn(field)
    y = np.asarray(y, dtype=np.float64)
    y_next, err, _, _ = _stages(_plain(fun), y, t, h, _checked(fun, y, t))
    return y_next, float(np.linalg.norm(err))


def _interp_coeffs(y0, y1, k, h):
    """Quartic dense-output polynomial over one accepted step."""
    f0, f1 = k[0], k[6]
    y_mid = y0 + h * sum(c * kj for c, kj in zip(_C_MID, k) if c != 0.0)
    a = 2 * h * (f1 - f0) - 8 * (y1 + y0) + 16 * y_mid
    b = h * (5 * f0 - 3 * f1) + 18 * y0 + 14 * y1 - 32 * y_mid
    c = h * (f1 - 4 * f0) - 11 * y0 - 5 * y1 + 16 * y_mid
    d = h * f0
    return (y0, d, c, b, a)


def _interp_eval(coeffs, x):
    e, d, c, b, a = coeffs
    return e + x * (d + x * (c + x * (b + x * a)))


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _initial_step(fun, y0, f0, t0, direction, cfg, span):
    if cfg.initial_step is not None:
        return min(cfg.initial_step, span)
    scale = cfg.atol + np.abs(y0) * cfg.rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = _checked(fun, y1, t0 + direction * h0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def _solve(fun, y0, times, cfg, quad=None):
    """Integrate through ``times`` (monotone, either direction), returning states there.

    With ``quad``, ``fun`` returns ``(dy, q)`` and after every accepted step
    ``quad(qs, weights)`` receives the stage payloads with their 5th-order
    weights (step size included), for quadrature channels kept out of the
    state and out of error control.
    """
    if quad is None:
        fq = _plain(fun)
    else:
        fq = fun
        fun = lambda y, t: fq(y, t)[0]
    times = np.asarray(times, dtype=np.float64)
    y = np.array(y0, dtype=np.float64, copy=True)
    out = np.empty((len(times),) + y.shape)
    out[0] = y
    if len(times) == 1:
        return out
    direction = 1.0 if times[-1] > times[0] else -1.0
    t = float(times[0])
    t_end = float(times[-1])
    f, fpay = fq(y, t)
    _check_finite(f, t)
    h = _initial_step(fun, y, f, t, direction, cfg, abs(t_end - t))
    q = 1
    prev_err = 1e-4
    steps = 0
    alpha, beta = 0.7 / 5, 0.4 / 5
    while q < len(times):
        if steps >= cfg.max_steps:
            raise IntegrationError(f"step budget of {cfg.max_steps} exhausted at t={t!r}", t)
        steps += 1
        remaining = abs(t_end - t)
        last = h >= remaining
        if last:
            h = remaining
        hs = direction * h
        y_new, err, k, qs = _stages(fq, y, t, hs, f, fpay)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = _rms(err / scale)
        if not np.isfinite(en):
            raise IntegrationError(f"non-finite error estimate at t={t!r}", t)
        if en <= 1.0:
            t_new = t_end if last else t + hs
            coeffs = None
            while q < len(times) and direction * (times[q] - t_new) <= 0:
                if times[q] == t_new:
                    out[q] = y_new
                else:
                    if coeffs is None:
                        coeffs = _interp_coeffs(y, y_new, k, hs)
                    out[q] = _interp_eval(coeffs, (times[q] - t) / hs)
                q += 1
            if quad is not None:
                quad(qs, hs * _B5)
            t, y, f, fpay = t_new, y_new, k[6], qs[6]
            if en == 0.0:
                factor = cfg.max_factor
            else:
                factor = cfg.safety * en ** (-alpha) * prev_err ** beta
            factor = min(cfg.max_factor, max(cfg.min_factor, factor))
            prev_err = max(en, 1e-4)
            h = h * factor
        else:
            factor = max(cfg.min_factor, cfg.safety * en ** (-1 / 5))
            h = h * factor
        if h <= 0 or t + direction * h == t:
            raise IntegrationError(f"step size underflow at t={t!r}", t)
    return out


def integrate(field, y0, query_times, config=None):
    """Solve ``dy/dt = field(y, t)`` and return the states at ``query_times``."""
    cfg = config or OdeConfig()
    qt = np.asarray(query_times, dtype=np.float64)
    if qt.ndim != 1 or len(qt) < 1:
        raise ValueError("query_times must be a non-empty 1-D sequence")
    if np.any(np.diff(qt) <= 0):
        raise ValueError("query_times must be strictly increasing")
    return _solve(_eval_fn(field), y0, qt, cfg)


def integrate_adjoint(field, y_end, t_grid, cotangents, config=None):
    """Backward augmented solve for ``[k, a_k, a_theta, a_t]``.

    ``cotangents`` is either dL/dy at the last query time (1-D) or an array
    of shape ``(len(t_grid), D)`` holding dL/dy(t_i) for every query time;
    each is injected into ``a_k`` as the backward solve passes ``t_i``.
    ``y_end`` is either the final forward state or the full forward solution
    at ``t_grid``; in the latter case the state channel is re-anchored to the
    stored values at each query time.
    """
    cfg = config or OdeConfig()
    t_grid = np.asarray(t_grid, dtype=np.float64)
    T = len(t_grid)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    y_end = np.asarray(y_end, dtype=np.float64)
    stored = y_end if y_end.ndim == 2 else None
    y = (stored[-1] if stored is not None else y_end).copy()
    D = y.size
    cot = np.asarray(cotangents, dtype=np.float64)
    if cot.ndim == 1:
        if cot.size != D:
            raise ShapeError(f"cotangent length {cot.size} != state length {D}")
        full = np.zeros((T, D))
        full[-1] = cot
        cot = full
    elif cot.shape != (T, D):
        raise ShapeError(f"cotangents shape {cot.shape} != {(T, D)}")
    if stored is not None and stored.shape != (T, D):
        raise ShapeError(f"stored states shape {stored.shape} != {(T, D)}")

    P = field.n_params
    a = cot[-1].copy()
    a_p = np.zeros(P)
    time_grads = np.zeros(T)
    f_end = field.eval(y, t_grid[-1])
    time_grads[-1] = float(cot[-1] @ f_end)
    a_t = -time_grads[-1]

    factored = getattr(field, "eval_vjp_factors", None)
    fused = getattr(field, "eval_vjp", None)

    def aug(s, t):
        yk = s[:D]
        ak = s[D:2 * D]
        if factored is not None:
            fy, cy, q, ct = factored(yk, t, ak)
        elif fused is not None:
            fy, cy, q, ct = fused(yk, t, ak)
        else:
            fy = field.eval(yk, t)
            cy, q, ct = field.vjp(yk, t, ak)
        return np.concatenate([fy, -cy, [-ct]]), q

    # da_theta/dt = -a_k^T df/dtheta never feeds back, so it is accumulated as
    # a quadrature over the accepted stages instead of being carried in the state
    def quad(qs, weights):
        nonlocal a_p
        pairs = [(q, w) for q, w in zip(qs, weights) if w != 0.0]
        if factored is not None:
            a_p = a_p - field.combine_param_factors([q for q, _ in pairs], [w for _, w in pairs])
        else:
            a_p = a_p - sum(w * q for q, w in pairs)

    s1 = None
    for i in range(T - 1, 0, -1):
        s0 = np.concatenate([y, a, [a_t]])
        s1 = _solve(aug, s0, t_grid[i - 1:i + 1][::-1], cfg, quad)[-1]
        y = s1[:D] if stored is None else stored[i - 1].copy()
        a = s1[D:2 * D]
        a_t = s1[-1]
        if i - 1 > 0:
            g = float(cot[i - 1] @ field.eval(y, t_grid[i - 1]))
            time_grads[i - 1] = g
            a_t -= g
        a = a + cot[i - 1]
    recovered = s1[:D] if s1 is not None else y
    f0 = field.eval(stored[0] if stored is not None else recovered, t_grid[0])
    a_t0 = float(-(a - cot[0]) @ f0) if T == 1 else float(a_t)
    time_grads[0] = a_t0
    return AdjointBundle(state=recovered, a_state=a, a_params=a_p, a_time=a_t0,
                         time_grads=time_grads)
