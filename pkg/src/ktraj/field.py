"""Two-layer tanh network used as the trajectory vector field.

``f(k, t) = W2 tanh(W1 [k; t] + b1) + b2``, acting on the concatenated
control-point state of every shot.  Reverse-mode products are written out by
hand (the derivative of tanh is ``1 - tanh**2``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = ["FieldParams", "MLPField", "field_init", "field_eval", "field_vjp"]


@dataclass
class FieldParams:
    w1: np.ndarray  # (hidden, D + 1) or (hidden, D) without time input
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (D, hidden)
    b2: np.ndarray  # (D,)
    use_time: bool = True

    def __post_init__(self):
        H, n_in = self.w1.shape
        D = self.w2.shape[0]
        if self.b1.shape != (H,) or self.w2.shape != (D, H) or self.b2.shape != (D,):
            raise ShapeError("inconsistent field parameter shapes")
        if n_in != D + int(self.use_time):
            raise ShapeError(f"w1 has {n_in} inputs, expected {D + int(self.use_time)}")

    @property
    def D(self):
        return self.w2.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @property
    def size(self):
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"flat parameter vector has {vec.size} entries, expected {self.size}")
        out, i = [], 0
        for a in (self.w1, self.b1, self.w2, self.b2):
            out.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        return FieldParams(*out, use_time=self.use_time)

    def arrays(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def zeros(cls, D, hidden, use_time=True):
        return cls(np.zeros((hidden, D + int(use_time))), np.zeros(hidden),
                   np.zeros((D, hidden)), np.zeros(D), use_time)


def field_init(shots, n_control, hidden=256, seed=0, use_time=True, out_scale=1e-3):
    """Uniform fan-in initialization with a near-zero output layer."""
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    D = shots * n_control * 2
    rng = np.random.default_rng(seed)
    n_in = D + int(use_time)
    lim1 = 1.0 / np.sqrt(n_in)
    lim2 = 1.0 / np.sqrt(hidden)
    w1 = rng.uniform(-lim1, lim1, (hidden, n_in))
    b1 = rng.uniform(-lim1, lim1, hidden)
    w2 = rng.uniform(-lim2, lim2, (D, hidden)) * out_scale
    b2 = rng.uniform(-lim2, lim2, D) * out_scale
    return FieldParams(w1, b1, w2, b2, use_time)


def _inputs(params, state, t):
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (params.D,):
        raise ShapeError(f"state has shape {state.shape}, field expects ({params.D},)")
    if params.use_time:
        return np.append(state, t)
    return state


def field_eval(params, state, t):
    x = _inputs(params, state, t)
    return params.w2 @ np.tanh(params.w1 @ x + params.b1) + params.b2


def _eval_vjp(params, state, t, cot):
    cot = np.asarray(cot, dtype=np.float64)
    if cot.shape != (params.D,):
        raise ShapeError(f"cotangent has shape {cot.shape}, expected ({params.D},)")
    x = _inputs(params, state, t)
    h = np.tanh(params.w1 @ x + params.b1)
    out = params.w2 @ h + params.b2
    gz = (params.w2.T @ cot) * (1.0 - h * h)
    gx = params.w1.T @ gz
    cot_params = np.concatenate([np.outer(gz, x).ravel(), gz, np.outer(cot, h).ravel(), cot])
    if params.use_time:
        return out, gx[:-1], cot_params, float(gx[-1])
    return out, gx, cot_params, 0.0


def _eval_vjp_factors(params, state, t, cot):
    cot = np.asarray(cot, dtype=np.float64)
    if cot.shape != (params.D,):
        raise ShapeError(f"cotangent has shape {cot.shape}, expected ({params.D},)")
    x = _inputs(params, state, t)
    h = np.tanh(params.w1 @ x + params.b1)
    out = params.w2 @ h + params.b2
    gz = (params.w2.T @ cot) * (1.0 - h * h)
    gx = params.w1.T @ gz
    ct = float(gx[-1]) if params.use_time else 0.0
    cs = gx[:-1] if params.use_time else gx
    return out, cs, (gz, x, cot, h), ct


def _combine_factors(factors, weights):
    """sum_i w_i * cot_params_i, built from the rank-one factors without forming each term."""
    w = np.asarray(weights, dtype=np.float64)[:, None]
    gz = np.stack([f[0] for f in factors]) * w
    x = np.stack([f[1] for f in factors])
    c = np.stack([f[2] for f in factors]) * w
    h = np.stack([f[3] for f in factors])
    return np.concatenate([(gz.T @ x).ravel(), gz.sum(axis=0), (c.T @ h).ravel(), c.sum(axis=0)])


def field_vjp(params, state, t, cot):
    """Return ``(cot^T df/dk, cot^T df/dtheta, cot^T df/dt)``; theta in ``flat()`` order."""
    _, cs, cp, ct = _eval_vjp(params, state, t, cot)
    return cs, cp, ct


class MLPField:
    """Vector-field adapter around :class:`FieldParams` for :mod:`ktraj.odecore`."""

    def __init__(self, params):
        self.params = params

    @property
    def n_params(self):
        return self.params.size

    def eval(self, state, t):
        return field_eval(self.params, state, t)

    def vjp(self, state, t, cot):
        return field_vjp(self.params, state, t, cot)

    def eval_vjp(self, state, t, cot):
        return _eval_vjp(self.params, state, t, cot)

    def eval_vjp_factors(self, state, t, cot):
        return _eval_vjp_factors(self.params, state, t, cot)

    def combine_param_factors(self, factors, weights):
        return _combine_factors(factors, weights)
