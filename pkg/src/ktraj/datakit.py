"""Synthetic phantoms, coil sensitivities, dataset splits and image/figure I/O."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .errors import ExportError, ParseError, ShapeError

__all__ = [
    "Ellipse", "Phantom", "CoilSet", "Sample", "SHEPP_LOGAN_MODIFIED",
    "make_phantom", "make_coils", "simulate_coil_images", "dataset_split", "make_dataset",
    "save_pgm", "load_pgm", "save_raw", "load_raw",
    "heatmap_svg", "polyline_svg", "curves_svg",
]


@dataclass(frozen=True)
class Ellipse:
    intensity: float
    a: float        # semi-axis along x (before rotation), in units of the half field of view
    b: float
    x0: float
    y0: float
    angle: float    # radians


# Modified Shepp-Logan head (Toft's higher-contrast intensities)
SHEPP_LOGAN_MODIFIED = (
    Ellipse(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    Ellipse(-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    Ellipse(-0.2, 0.1100, 0.3100, 0.22, 0.0, math.radians(-18)),
    Ellipse(-0.2, 0.1600, 0.4100, -0.22, 0.0, math.radians(18)),
    Ellipse(0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    Ellipse(0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    Ellipse(0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    Ellipse(0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    Ellipse(0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    Ellipse(0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


@dataclass
class Phantom:
    image: np.ndarray
    descriptor: list


@dataclass
class CoilSet:
    maps: np.ndarray  # (coils, grid, grid) complex

    @property
    def coils(self):
        return self.maps.shape[0]


@dataclass
class Sample:
    image: np.ndarray
    maps: np.ndarray = field(repr=False)


def _render(ellipses, n):
    # pixel centres on [-1, 1); row index runs top to bottom, so y is flipped
    c = (np.arange(n) + 0.5) / n * 2 - 1
    x = c[None, :]
    y = -c[:, None]
    img = np.zeros((n, n))
    for e in ellipses:
        ca, sa = math.cos(e.angle), math.sin(e.angle)
        dx, dy = x - e.x0, y - e.y0
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        img += e.intensity * ((u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0)
    return img


def _random_ellipses(rng, n):
    out = []
    for _ in range(n):
        r = 0.55 * math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        out.append(Ellipse(
            intensity=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4)),
            a=float(rng.uniform(0.03, 0.2)),
            b=float(rng.uniform(0.03, 0.2)),
            x0=r * math.cos(phi),
            y0=r * math.sin(phi),
            angle=float(rng.uniform(0, math.pi)),
        ))
    return out


def make_phantom(grid=64, seed=0, n_ellipses=6, supersample=2):
    """Modified Shepp-Logan head plus ``n_ellipses`` seeded random ellipses, in [0, 1]."""
    if grid < 16:
        raise ValueError("grid must be >= 16")
    rng = np.random.default_rng(seed)
    ellipses = list(SHEPP_LOGAN_MODIFIED) + _random_ellipses(rng, n_ellipses)
    s = int(supersample)
    hi = _render(ellipses, grid * s)
    img = hi.reshape(grid, s, grid, s).mean(axis=(1, 3))
    img = np.clip(img, 0.0, None)
    img = np.clip(img / img.max(), 0.0, 1.0)
    return Phantom(img, ellipses)


def make_coils(grid=64, coils=4, seed=0, width=0.8):
    """Gaussian-profile coils on a ring of border anchors with linear phase, unit sum-of-squares."""
    if coils < 1:
        raise ValueError("coils must be >= 1")
    if coils == 1:
        return CoilSet(np.ones((1, grid, grid), dtype=np.complex128))
    rng = np.random.default_rng(seed)
    c = (np.arange(grid) + 0.5) / grid * 2 - 1
    x = c[None, :]
    y = -c[:, None]
    maps = np.empty((coils, grid, grid), dtype=np.complex128)
    for i in range(coils):
        ang = 2 * math.pi * i / coils + rng.uniform(-0.1, 0.1)
        ax, ay = 1.2 * math.cos(ang), 1.2 * math.sin(ang)
        mag = np.exp(-((x - ax) ** 2 + (y - ay) ** 2) / (2 * width ** 2))
        p0, p1, p2 = rng.uniform(-math.pi, math.pi), rng.uniform(-1, 1), rng.uniform(-1, 1)
        maps[i] = mag * np.exp(1j * (p0 + p1 * x + p2 * y))
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSet(maps)


def simulate_coil_images(phantom, coils):
    img = phantom.image if isinstance(phantom, Phantom) else np.asarray(phantom)
    maps = coils.maps if isinstance(coils, CoilSet) else np.asarray(coils)
    if maps.shape[1:] != img.shape:
        raise ShapeError(f"coil maps {maps.shape[1:]} do not match image {img.shape}")
    return maps * img[None]


def dataset_split(n, fractions=(0.75, 0.0625, 0.1875), seed=0):
    """Seeded disjoint split of ``range(n)``; counts by largest remainder."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = n - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:rem]:
        counts[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out, i = [], 0
    for c in counts:
        out.append(sorted(int(v) for v in perm[i:i + c]))
        i += c
    return out


def make_dataset(n, grid=64, coils=4, seed=0, n_ellipses=6):
    """``n`` phantoms (seeds derived from ``seed``) sharing one coil set."""
    cs = make_coils(grid, coils, seed)
    seeds = np.random.default_rng(seed).integers(0, 2 ** 31, n)
    return [Sample(make_phantom(grid, int(s), n_ellipses).image, cs.maps) for s in seeds]


def _atomic_write(path, data, mode="wb"):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def save_pgm(path, image, vmin=0.0, vmax=1.0):
    """16-bit binary PGM (P5, big-endian samples) of ``image`` mapped from [vmin, vmax]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("save_pgm expects a 2-D image")
    q = np.rint(np.clip((img - vmin) / (vmax - vmin), 0, 1) * 65535).astype(">u2")
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def _pgm_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PGM header", start)
    return buf[start:pos], pos


def load_pgm(path, vmin=0.0, vmax=1.0):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise ParseError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    vals = []
    for _ in range(3):
        start = pos
        tok, pos = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PGM header field {tok!r}", start)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 65535:
        raise ParseError(f"expected 16-bit PGM (maxval 65535), got {maxval}", pos)
    pos += 1  # single whitespace byte after maxval
    need = 2 * w * h
    if len(buf) - pos < need:
        raise ParseError(f"truncated PGM: need {need} data bytes, have {len(buf) - pos}", len(buf))
    q = np.frombuffer(buf, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    return vmin + q.astype(np.float64) / 65535.0 * (vmax - vmin)


def save_raw(path, array):
    """Little-endian float32 samples plus a ``path.json`` shape sidecar."""
    a = np.asarray(array, dtype="<f4")
    _atomic_write(path, a.tobytes())
    _atomic_write(os.fspath(path) + ".json",
                  json.dumps({"shape": list(a.shape), "dtype": "<f4"}, sort_keys=True), mode="w")


def load_raw(path):
    try:
        with open(os.fspath(path) + ".json") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad raw sidecar: {exc.msg}", exc.pos) from exc
    shape = tuple(int(s) for s in meta["shape"])
    with open(path, "rb") as fh:
        buf = fh.read()
    need = 4 * int(np.prod(shape))
    if len(buf) != need:
        raise ParseError(f"raw file holds {len(buf)} bytes, shape {shape} needs {need}", min(len(buf), need))
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def _svg(width, height, body, title=None):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n')
    if title:
        head += f'<title>{escape(title)}</title>\n'
    return head + "".join(body) + "</svg>\n"


def heatmap_svg(path, image, vmin=None, vmax=None, cell=4, title=None):
    """Grayscale heatmap, one rect per pixel."""
    img = np.asarray(image, dtype=np.float64)
    lo = float(img.min()) if vmin is None else vmin
    hi = float(img.max()) if vmax is None else vmax
    g = np.rint(255 * np.clip((img - lo) / ((hi - lo) or 1.0), 0, 1)).astype(int)
    h, w = img.shape
    body = [f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" '
            f'fill="#{v:02x}{v:02x}{v:02x}"/>\n'
            for y in range(h) for x, v in enumerate(g[y])]
    _atomic_write(path, _svg(w * cell, h * cell, body, title), mode="w")


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def polyline_svg(path, lines, extent=0.5, size=400, title=None, labels=None):
    """Overlay of 2-D polylines (e.g. k-space shots) on a square [-extent, extent] canvas.

    ``lines`` is a list of groups; each group is a list of (n, 2) arrays drawn in one colour.
    """
    s = size / (2 * extent)
    body = [f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>\n']
    for gi, group in enumerate(lines):
        colour = _PALETTE[gi % len(_PALETTE)]
        for pts in group:
            p = np.asarray(pts)
            coords = " ".join(f"{(x + extent) * s:.2f},{(extent - y) * s:.2f}" for x, y in p)
            body.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1"/>\n')
        if labels:
            body.append(f'<text x="6" y="{16 + 14 * gi}" font-size="12" fill="{colour}">'
                        f'{escape(labels[gi])}</text>\n')
    _atomic_write(path, _svg(size, size, body, title), mode="w")


def curves_svg(path, series, width=480, height=320, title=None):
    """Line chart of named y-series (dict name -> sequence) against their index."""
    pad = 40
    ys = [np.asarray(v, dtype=np.float64) for v in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(y) for y in ys), default=1)
    sx = (width - 2 * pad) / max(n - 1, 1)
    sy = (height - 2 * pad) / (hi - lo)
    body = [f'<rect width="{width}" height="{height}" fill="white"/>\n',
            f'<text x="4" y="{pad - 6}" font-size="11">{hi:.4g}</text>\n',
            f'<text x="4" y="{height - pad + 14}" font-size="11">{lo:.4g}</text>\n']
    for i, (name, y) in enumerate(zip(series, ys)):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{pad + j * sx:.2f},{height - pad - (v - lo) * sy:.2f}"
                       for j, v in enumerate(y) if np.isfinite(v))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>\n')
        body.append(f'<text x="{width - pad - 100}" y="{pad + 14 * i}" font-size="11" '
                    f'fill="{colour}">{escape(name)}</text>\n')
    _atomic_write(path, _svg(width, height, body, title), mode="w")
