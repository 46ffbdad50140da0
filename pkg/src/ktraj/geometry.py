"""Trajectory containers, standard initializers and gradient-waveform analysis.

Coordinates are normalized k-space units (cycles/pixel).  Conversion to
physical units (1/m) happens only inside :func:`kinematics`, using the matrix
size and field of view carried by :class:`PhysicsLimits`.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BandError, ExportError, ParseError, ShapeError

__all__ = [
    "GAMMA_PROTON",
    "PhysicsLimits",
    "Trajectory",
    "ControlState",
    "Kinematics",
    "ConstraintReport",
    "init_radial",
    "init_cartesian",
    "init_spiral",
    "make_initial",
    "extract_control_points",
    "kinematics",
    "check_limits",
    "export_waveforms",
    "read_waveforms",
    "save_trajectory",
    "load_trajectory",
]

GAMMA_PROTON = 42.577e6  # Hz/T

_MAGIC = b"KTRJ"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")  # 24 bytes
_WAVEFORM_HEADER = ["shot", "idx", "t_s", "kx_invm", "ky_invm",
                    "gx_Tpm", "gy_Tpm", "sx_Tpms", "sy_Tpms"]


@dataclass(frozen=True)
class PhysicsLimits:
    """Scanner hardware limits and the sampling geometry used to convert units.

    ``grid`` is the reconstruction matrix size; together with ``fov`` it sets
    the normalized-to-physical scale ``grid / fov`` (1/m per cycle/pixel).
    """

    g_max: float = 50e-3      # T/m
    s_max: float = 200.0      # T/m/s
    gamma: float = GAMMA_PROTON
    dwell: float = 4e-6       # s
    fov: float = 0.24         # m
    grid: int = 64

    def __post_init__(self):
        for name in ("g_max", "s_max", "gamma", "dwell", "fov", "grid"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PhysicsLimits.{name} must be strictly positive")

    @property
    def k_scale(self):
        """Physical k (1/m) per normalized unit."""
        return self.grid / self.fov

    @property
    def v_max(self):
        return self.gamma * self.g_max

    @property
    def a_max(self):
        return self.gamma * self.s_max


@dataclass
class Trajectory:
    points: np.ndarray  # (shots, samples_per_shot, 2)
    dwell: float = 4e-6

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ShapeError(f"trajectory points must have shape (shots, samples, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory contains non-finite coordinates")
        if np.any(np.abs(pts) > 0.5):
            raise BandError("trajectory coordinates must lie in [-0.5, 0.5]")
        if not self.dwell > 0:
            raise ValueError("dwell must be positive")
        self.points = pts

    @property
    def shots(self):
        return self.points.shape[0]

    @property
    def samples_per_shot(self):
        return self.points.shape[1]

    def flat(self):
        """Points as an (shots * samples_per_shot, 2) array, shot-major."""
        return self.points.reshape(-1, 2)


@dataclass
class ControlState:
    values: np.ndarray  # flat, (shot, control, [kx, ky]) order
    n_control: int
    segment_duration: float
    shots: int = field(default=1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.shots * self.n_control * 2:
            raise ShapeError(
                f"control vector length {self.values.size} != shots*n_control*2 "
                f"= {self.shots * self.n_control * 2}")

    def as_points(self):
        return self.values.reshape(self.shots, self.n_control, 2)


@dataclass
class Kinematics:
    velocity: np.ndarray      # 1/m/s, (shots, S-1, 2)
    acceleration: np.ndarray  # 1/m/s^2, (shots, S-2, 2)
    gradient: np.ndarray      # T/m
    slew: np.ndarray          # T/m/s


@dataclass
class ConstraintReport:
    frac_velocity_ok: float
    frac_accel_ok: float
    max_velocity_excess: float
    max_accel_excess: float


def _check_extent(k_extent):
    if k_extent > 0.5:
        raise BandError(f"k_extent={k_extent} exceeds the normalized band 0.5")
    if k_extent <= 0:
        raise ValueError("k_extent must be positive")


def _rotate(points, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T


def init_radial(n_shots, samples_per_shot=1000, k_extent=0.5, dwell=4e-6):
    """Radial spokes through the origin; spoke ``i`` sits at angle ``i*pi/n_shots``.

    Each spoke is sampled uniformly on ``[-k_extent, k_extent)``.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    _check_extent(k_extent)
    r = np.linspace(-k_extent, k_extent, samples_per_shot, endpoint=False)
    base = np.stack([r, np.zeros_like(r)], axis=1)
    pts = np.stack([_rotate(base, i * math.pi / n_shots) for i in range(n_shots)])
    return Trajectory(pts, dwell)


def cartesian_line_indices(n_lines, grid_size, center_fraction):
    """Phase-encode line indices in ``[-grid/2, grid/2)``, sorted and unique."""
    if n_lines < 0:
        raise ValueError("n_lines must be >= 0")
    if not 0.0 <= center_fraction <= 1.0:
        raise ValueError("center_fraction must lie in [0, 1]")
    n_center = int(round(center_fraction * grid_size))
    if n_lines + n_center > grid_size:
        raise ValueError(
            f"n_lines ({n_lines}) + center lines ({n_center}) exceeds grid_size ({grid_size})")
    half = grid_size // 2
    start = -(n_center // 2)
    center = set(range(start, start + n_center))
    step = grid_size / n_lines if n_lines else 0.0
    outer = {int(math.floor(-half + (j + 0.5) * step)) for j in range(n_lines)}
    return sorted(center | outer)


def init_cartesian(n_lines, grid_size, center_fraction=0.1, samples_per_shot=None, dwell=4e-6):
    """Cartesian readouts along kx: a fully sampled center plus equispaced outer lines."""
    if samples_per_shot is None:
        samples_per_shot = grid_size
    lines = cartesian_line_indices(n_lines, grid_size, center_fraction)
    if not lines:
        raise ValueError("Cartesian pattern has no lines")
    kx = np.linspace(-0.5, 0.5, samples_per_shot, endpoint=False)
    pts = np.empty((len(lines), samples_per_shot, 2))
    for s, idx in enumerate(lines):
        pts[s, :, 0] = kx
        pts[s, :, 1] = idx / grid_size
    return Trajectory(pts, dwell)


def init_spiral(n_interleaves, samples_per_shot=1000, turns=8, k_extent=0.5, dwell=4e-6):
    """Uniform-density Archimedean spiral interleaves, rotated by ``2*pi/n`` each."""
    if n_interleaves < 1:
        raise ValueError("n_interleaves must be >= 1")
    _check_extent(k_extent)
    s = np.linspace(0.0, 1.0, samples_per_shot)
    r = k_extent * s
    theta = 2 * math.pi * turns * s
    base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts = np.stack([_rotate(base, 2 * math.pi * j / n_interleaves) for j in range(n_interleaves)])
    return Trajectory(pts, dwell)


def make_initial(kind, shots, samples_per_shot=1000, grid=64, dwell=4e-6, **kw):
    """Dispatch helper used by the trainer and the command line."""
    if kind == "radial":
        return init_radial(shots, samples_per_shot, kw.get("k_extent", 0.5), dwell)
    if kind == "spiral":
        return init_spiral(shots, samples_per_shot, kw.get("turns", 8),
                           kw.get("k_extent", 0.5 - 1.0 / grid), dwell)
    if kind == "cartesian":
        return init_cartesian(shots, grid, kw.get("center_fraction", 0.1), samples_per_shot, dwell)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def extract_control_points(traj, n_control):
    """Take the first sample of each equal-length segment as its control point."""
    S = traj.samples_per_shot
    if n_control < 1 or S % n_control:
        raise ValueError(f"samples_per_shot={S} is not divisible by n_control={n_control}")
    m = S // n_control
    values = traj.points[:, ::m, :].reshape(-1)
    return ControlState(values.copy(), n_control, traj.dwell * m, traj.shots)


def kinematic_arrays(points, dwell, limits):
    """Velocity and acceleration (physical units) of an (shots, S, 2) array."""
    k = np.asarray(points, dtype=np.float64) * limits.k_scale
    v = np.diff(k, axis=1) / dwell
    a = (k[:, 2:] - 2 * k[:, 1:-1] + k[:, :-2]) / dwell**2
    return v, a


def kinematics(traj, limits):
    if traj.samples_per_shot < 3:
        raise ValueError("kinematics needs at least 3 samples per shot")
    v, a = kinematic_arrays(traj.points, traj.dwell, limits)
    return Kinematics(v, a, v / limits.gamma, a / limits.gamma)


def check_limits(kin, limits):
    """Compare per-sample Euclidean speed/acceleration against gamma*G_max / gamma*S_max."""
    vn = np.linalg.norm(kin.velocity, axis=-1)
    an = np.linalg.norm(kin.acceleration, axis=-1)
    v_ex = vn - limits.v_max
    a_ex = an - limits.a_max
    return ConstraintReport(
        frac_velocity_ok=float(np.mean(v_ex <= 0)) if vn.size else 1.0,
        frac_accel_ok=float(np.mean(a_ex <= 0)) if an.size else 1.0,
        max_velocity_excess=float(max(v_ex.max(initial=0.0), 0.0)),
        max_accel_excess=float(max(a_ex.max(initial=0.0), 0.0)),
    )


def _fmt(x):
    return repr(float(x))


def export_waveforms(traj, limits, path):
    """Write per-sample k-space, gradient and slew waveforms to CSV.

    Gradient is undefined on the last sample of a shot and slew on the last
    two; those cells are left empty.
    """
    kin = kinematics(traj, limits)
    k = traj.points * limits.k_scale
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_WAVEFORM_HEADER)
            S = traj.samples_per_shot
            for s in range(traj.shots):
                for i in range(S):
                    g = kin.gradient[s, i] if i < S - 1 else (None, None)
                    sl = kin.slew[s, i] if i < S - 2 else (None, None)
                    w.writerow([
                        s, i, _fmt(i * traj.dwell), _fmt(k[s, i, 0]), _fmt(k[s, i, 1]),
                        *("" if x is None else _fmt(x) for x in g),
                        *("" if x is None else _fmt(x) for x in sl),
                    ])
    except OSError as exc:
        raise ExportError(f"cannot write waveforms to {path}: {exc}") from exc
    return path


def read_waveforms(path):
    """Parse a waveform CSV back into arrays keyed by column name.

    Gradient arrays are (shots, S-1, 2), slew arrays (shots, S-2, 2).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _WAVEFORM_HEADER:
        raise ParseError(f"{path}: unexpected waveform header", 0)
    body = rows[1:]
    shots = max(int(r[0]) for r in body) + 1
    S = len(body) // shots
    t = np.array([float(r[2]) for r in body]).reshape(shots, S)
    k = np.array([[float(r[3]), float(r[4])] for r in body]).reshape(shots, S, 2)
    g = np.array([[float(r[5]), float(r[6])] for r in body if r[5] != ""]).reshape(shots, S - 1, 2)
    sl = np.array([[float(r[7]), float(r[8])] for r in body if r[7] != ""]).reshape(shots, S - 2, 2)
    return {"t_s": t, "k_invm": k, "gradient": g, "slew": sl}


def _atomic_write_bytes(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_trajectory(traj, path, limits=None):
    """Binary trajectory file (24-byte header + little-endian f64) plus JSON sidecar."""
    path = Path(path)
    header = _HEADER.pack(_MAGIC, _VERSION, traj.shots, traj.samples_per_shot)
    payload = traj.points.astype("<f8").tobytes()
    meta = {"dwell": traj.dwell}
    if limits is not None:
        meta.update(fov=limits.fov, grid=limits.grid)
    try:
        _atomic_write_bytes(path, header + payload)
        _atomic_write_bytes(path.with_suffix(path.suffix + ".json"),
                            json.dumps(meta, sort_keys=True, indent=2).encode())
    except OSError as exc:
        raise ExportError(f"cannot write trajectory to {path}: {exc}") from exc
    return path


def load_trajectory(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header", len(data))
    magic, version, shots, S = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", 0)
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported version {version}", 4)
    need = _HEADER.size + shots * S * 2 * 8
    if len(data) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(data)}", min(len(data), need))
    pts = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(shots, S, 2)
    dwell = 4e-6
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        dwell = json.loads(sidecar.read_text()).get("dwell", dwell)
    return Trajectory(pts.astype(np.float64), dwell)
