"""Segment-wise trajectory model driven by the neural field.

Each shot is split into ``n_control`` equal segments.  Segment ``s`` starts
at its control point and evolves over ``t in [0, 1]`` under

    dk/dt = B'(t; c) + gain * sin^2(pi t) * f_theta(k, t),

where ``B(t; c)`` is the uniform Catmull-Rom spline through the control
points of that shot (virtual end points are extrapolated linearly).  The
envelope keeps the field from adding velocity at segment ends, and the
displacement the field accumulates by ``t = 1`` is removed with a smoothstep
blend, so neighbouring segments meet with matching position and velocity:

    sample(t) = k(t) - (3 t^2 - 2 t^3) * (k(1) - B(1; c)) + offset.

With a zero field every segment follows the spline, and fixed per-sample
offsets make that reproduce the initializer exactly.  The samples of a
segment are read off at ``t = j / m`` for ``j = 0 .. m - 1`` with ``m``
samples per segment; ``t = 1`` is integrated as one extra query time.

All segments of all shots are stacked into one state vector and integrated
in a single solver call; the control points act as additional parameters of
the drift so that their gradients come out of the same adjoint solve.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

__all__ = ["SegmentModel", "SegmentField"]


def _pos_weights(t):
    return 0.5 * np.array([-t + 2 * t * t - t ** 3, 2 - 5 * t * t + 3 * t ** 3,
                           t + 4 * t * t - 3 * t ** 3, -t * t + t ** 3])


def _vel_weights(t):
    return 0.5 * np.array([-1 + 4 * t - 3 * t * t, -10 * t + 9 * t * t,
                           1 + 8 * t - 9 * t * t, -2 * t + 3 * t * t])


def _acc_weights(t):
    return 0.5 * np.array([4 - 6 * t, -10 + 18 * t, 8 - 18 * t, -2 + 6 * t])


class SegmentModel:
    def __init__(self, shots, n_control, samples_per_shot):
        if n_control < 2:
            raise ValueError("at least two control points per shot are needed")
        if samples_per_shot % n_control:
            raise ShapeError(f"{samples_per_shot} samples per shot not divisible by {n_control} segments")
        self.shots = shots
        self.n_control = n_control
        self.samples_per_shot = samples_per_shot
        self.m = samples_per_shot // n_control
        self.query_times = np.arange(self.m) / self.m
        self.ode_times = np.append(self.query_times, 1.0)
        self._blend = 3 * self.query_times ** 2 - 2 * self.query_times ** 3
        self.D = shots * n_control * 2
        self.offsets = np.zeros((shots, samples_per_shot, 2))

    def _ext(self, c):
        """(shots, n + 3, 2) control points padded with linearly extrapolated ends."""
        p = c.reshape(self.shots, self.n_control, 2)
        first = 2 * p[:, :1] - p[:, 1:2]
        last = 2 * p[:, -1:] - p[:, -2:-1]
        after = 3 * p[:, -1:] - 2 * p[:, -2:-1]
        return np.concatenate([first, p, last, after], axis=1)

    def _ext_vjp(self, g):
        n = self.n_control
        out = g[:, 1:n + 1].copy()
        out[:, 0] += 2 * g[:, 0]
        out[:, 1] -= g[:, 0]
        out[:, -1] += 2 * g[:, n + 1] + 3 * g[:, n + 2]
        out[:, -2] -= g[:, n + 1] + 2 * g[:, n + 2]
        return out.ravel()

    def _combine(self, c, w):
        e = self._ext(c)
        n = self.n_control
        return sum(w[i] * e[:, i:i + n] for i in range(4)).ravel()

    def _combine_vjp(self, a, w):
        n = self.n_control
        a = a.reshape(self.shots, n, 2)
        g = np.zeros((self.shots, n + 3, 2))
        for i in range(4):
            g[:, i:i + n] += w[i] * a
        return self._ext_vjp(g)

    def base_velocity(self, c, t):
        return self._combine(c, _vel_weights(t))

    def base_velocity_vjp(self, c, t, a):
        return self._combine_vjp(a, _vel_weights(t))

    def base_acceleration(self, c, t):
        return self._combine(c, _acc_weights(t))

    def base_positions(self, c):
        """Spline values at every ODE time (sample times plus t = 1), shape (m + 1, D)."""
        return np.stack([self._combine(c, _pos_weights(t)) for t in self.ode_times])

    def assemble(self, states, controls):
        """(m + 1, D) ODE states -> (shots, samples_per_shot, 2) points with the end blend applied."""
        states = np.asarray(states)
        if states.shape != (self.m + 1, self.D):
            raise ShapeError(f"states shape {states.shape} != {(self.m + 1, self.D)}")
        excess = states[-1] - self._combine(controls, _pos_weights(1.0))
        seg = states[:-1] - self._blend[:, None] * excess[None]
        pts = seg.reshape(self.m, self.shots, self.n_control, 2).transpose(1, 2, 0, 3)
        return pts.reshape(self.shots, self.samples_per_shot, 2) + self.offsets

    def assemble_vjp(self, point_grads):
        """Cotangents of :meth:`assemble`: returns (per-ODE-time cotangents (m + 1, D), d/dcontrols)."""
        g = np.asarray(point_grads).reshape(self.shots, self.n_control, self.m, 2)
        g = g.transpose(2, 0, 1, 3).reshape(self.m, self.D)
        g_excess = -(self._blend[:, None] * g).sum(axis=0)
        cot = np.vstack([g, g_excess[None]])
        g_controls = -self._combine_vjp(g_excess, _pos_weights(1.0))
        return cot, g_controls

    def fit_offsets(self, points, controls):
        """Set offsets so that a zero field reproduces ``points`` from ``controls``."""
        self.offsets = np.zeros_like(self.offsets)
        self.offsets = np.asarray(points, dtype=np.float64) - self.assemble(self.base_positions(controls), controls)
        return self.offsets


def _envelope(t):
    return math.sin(math.pi * t) ** 2


def _envelope_dt(t):
    return math.pi * math.sin(2 * math.pi * t)


class SegmentField:
    """ODE vector field ``B'(t; c) + gain * sin^2(pi t) * f_theta(k, t)`` for :mod:`ktraj.odecore`.

    Parameters seen by the adjoint solver are ``[theta, c]``.  ``field`` may be
    ``None`` for a pure spline drift.
    """

    def __init__(self, model, controls, field=None, gain=1.0):
        self.model = model
        self.controls = np.asarray(controls, dtype=np.float64)
        self.field = field
        self.gain = float(gain)
        self._n_theta = field.n_params if field is not None else 0

    @property
    def n_params(self):
        return self._n_theta + self.model.D

    def eval(self, state, t):
        out = self.model.base_velocity(self.controls, t)
        if self.field is not None:
            out = out + self.gain * _envelope(t) * self.field.eval(state, t)
        return out

    def eval_vjp(self, state, t, cot):
        cot = np.asarray(cot, dtype=np.float64)
        out = self.model.base_velocity(self.controls, t)
        gc = self.model.base_velocity_vjp(self.controls, t, cot)
        ct = float(cot @ self.model.base_acceleration(self.controls, t))
        if self.field is None:
            return out, np.zeros_like(cot), gc, ct
        g = self.gain * _envelope(t)
        fo, cs, cp, cft = self.field.eval_vjp(state, t, g * cot)
        ct += cft + self.gain * _envelope_dt(t) * float(cot @ fo)
        return out + g * fo, cs, np.concatenate([cp, gc]), ct

    def vjp(self, state, t, cot):
        _, cs, cp, ct = self.eval_vjp(state, t, cot)
        return cs, cp, ct

    def eval_vjp_factors(self, state, t, cot):
        cot = np.asarray(cot, dtype=np.float64)
        out = self.model.base_velocity(self.controls, t)
        gc = self.model.base_velocity_vjp(self.controls, t, cot)
        ct = float(cot @ self.model.base_acceleration(self.controls, t))
        if self.field is None:
            return out, np.zeros_like(cot), (None, gc), ct
        g = self.gain * _envelope(t)
        fo, cs, fq, cft = self.field.eval_vjp_factors(state, t, g * cot)
        ct += cft + self.gain * _envelope_dt(t) * float(cot @ fo)
        return out + g * fo, cs, (fq, gc), ct

    def combine_param_factors(self, factors, weights):
        gc = sum(w * f[1] for f, w in zip(factors, weights))
        if self.field is None:
            return gc
        return np.concatenate([self.field.combine_param_factors([f[0] for f in factors], weights), gc])
