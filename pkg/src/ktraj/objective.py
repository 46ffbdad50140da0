"""Image losses, hardware-limit penalties and evaluation statistics.

Loss functions accept either numpy arrays (returning floats) or
:class:`~ktraj.diffcore.TapeTensor` operands (returning tape-tracked scalars).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ShapeError, UndefinedTestError

__all__ = [
    "LossReport", "l1_loss", "ssim", "ssim_value", "hybrid_loss", "shrinkage_penalty",
    "psnr", "wilcoxon_signed_rank", "write_metrics_csv", "read_metrics_csv",
]

SSIM_WINDOW = 7
EXACT_WILCOXON_MAX_N = 20


@dataclass
class LossReport:
    image_loss: float
    l1: float
    ssim_loss: float
    penalty_v: float
    penalty_a: float
    total: float


def _lift(*xs):
    """Wrap numpy inputs on a private no-grad tape; returns (tensors, was_numpy)."""
    if any(isinstance(x, dc.TapeTensor) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, dc.TapeTensor))
        return [x if isinstance(x, dc.TapeTensor) else tape.constant(x) for x in xs], False
    tape = dc.Tape()
    return [tape.constant(x) for x in xs], True


def _out(t, plain):
    return float(t.values) if plain else t


def _same_shape(op, x, y):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")


def l1_loss(x, y):
    (x, y), plain = _lift(x, y)
    _same_shape("l1_loss", x, y)
    return _out(dc.mean(dc.abs_(x - y)), plain)


def _ssim_map(x, y, data_range, window):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    f = lambda t: dc.uniform_filter(t, window)
    mx, my = f(x), f(y)
    mxy = mx * my
    mxx = mx * mx
    myy = my * my
    sxx = f(x * x) - mxx
    syy = f(y * y) - myy
    sxy = f(x * y) - mxy
    num = (2.0 * mxy + c1) * (2.0 * sxy + c2)
    den = (mxx + myy + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, data_range=1.0, window=SSIM_WINDOW):
    """Windowed SSIM with a uniform ``window x window`` kernel over valid windows.

    Returns ``(mean, map)``.  Local statistics use population (1/n) moments.
    """
    (x, y), plain = _lift(x, y)
    _same_shape("ssim", x, y)
    if x.values.ndim != 2 or min(x.shape) < window:
        raise ShapeError(f"ssim: window {window} larger than image {x.shape}")
    smap = _ssim_map(x, y, data_range, window)
    m = dc.mean(smap)
    if plain:
        return float(m.values), smap.values
    return m, smap


def ssim_value(x, y, data_range=1.0, window=SSIM_WINDOW):
    return ssim(x, y, data_range, window)[0]


def hybrid_loss(x, y, mu=1.0, data_range=1.0, window=SSIM_WINDOW):
    """``l1 + mu * (1 - ssim)``."""
    (x, y), plain = _lift(x, y)
    l1 = l1_loss(x, y)
    if mu == 0:
        return _out(l1, plain)
    s, _ = ssim(x, y, data_range, window)
    return _out(l1 + dc.mul_scalar(1.0 - s, mu), plain)


def shrinkage_penalty(values, limit):
    """Mean of ``max(|b| - c, 0)``: zero inside the band ``[-c, c]``, linear outside."""
    if not limit > 0:
        raise ValueError("limit must be positive")
    (b,), plain = _lift(values)
    return _out(dc.mean(dc.relu(dc.abs_(b) - float(limit))), plain)


def psnr(x, ref, peak=1.0):
    """PSNR in dB; identical inputs give ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {ref.shape} differ")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _signed_rank_null(twice_ranks):
    """Counts of each achievable 2*W+ over all 2^n sign assignments."""
    total = int(sum(twice_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in twice_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b):
    """Paired two-sided Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped.  Uses the exact null distribution (average
    ranks for ties) for up to 20 non-zero pairs and a tie-corrected normal
    approximation with continuity correction above.  Returns
    ``(statistic, p)`` where the statistic is ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"wilcoxon: lengths {a.size} and {b.size} differ")
    if a.size < 5:
        raise ValueError("wilcoxon needs at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    tie_term = 0.0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        twice = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_null(twice)
        k = int(round(2 * stat))
        p_low = counts[:k + 1].sum() / counts.sum()
        p = min(1.0, 2.0 * p_low)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
        z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))
    return stat, p


METRICS_HEADER = ["case", "method", "psnr_db", "ssim"]


def write_metrics_csv(rows, path):
    """rows: iterable of (case, method, psnr_db, ssim)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for case, method, p, s in rows:
            w.writerow([case, method, repr(float(p)), repr(float(s))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(row["case"], row["method"], float(row["psnr_db"]), float(row["ssim"])) for row in r]
