"""Non-uniform Fourier encoding: Kaiser-Bessel gridding plus a direct-DFT oracle.

Conventions
-----------
Images are indexed ``image[iy, ix]``; the pixel at index ``i`` sits at the
centered coordinate ``i - N // 2``.  Sample locations are ``(kx, ky)`` pairs in
cycles/pixel, and the forward transform is

    s_j = sum_{x, y} image[y, x] * exp(-2 pi i (kx_j x + ky_j y)).

Complex cotangents follow the usual real-loss convention: for a real scalar
``L`` of a complex array ``z`` the cotangent is ``dL/dRe z + 1j * dL/dIm z``,
so that ``dL = Re(conj(cot) * dz)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.sparse
from scipy.special import i0

from .errors import BandError, ShapeError

__all__ = [
    "GriddingConfig",
    "NufftPlan",
    "ndft_forward",
    "ndft_adjoint",
    "nufft_forward",
    "nufft_adjoint",
    "nufft_point_grad",
    "nufft_adjoint_point_grad",
    "psf",
    "sidelobe_max",
]


@dataclass(frozen=True)
class GriddingConfig:
    oversampling: float = 2.0
    kernel_width: int = 6
    kernel_beta: float | None = None

    def __post_init__(self):
        if self.oversampling < 1.25:
            raise ValueError("oversampling must be >= 1.25")
        if self.kernel_width < 2:
            raise ValueError("kernel_width must be >= 2")

    @property
    def beta(self):
        if self.kernel_beta is not None:
            return self.kernel_beta
        w, osf = self.kernel_width, self.oversampling
        return math.pi * math.sqrt((w / osf) ** 2 * (osf - 0.5) ** 2 - 0.8)


def _coords(n):
    return np.arange(n) - n // 2


def _check_points(points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise BandError("sample locations must be finite")
    if np.any(np.abs(pts) > 0.5):
        raise BandError("sample locations must lie in [-0.5, 0.5] cycles/pixel")
    return pts


def ndft_forward(image, points):
    """Exact (slow) forward transform; reference for the gridding path."""
    image = np.asarray(image)
    n = image.shape[0]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = _coords(n)
    out = np.empty(len(pts), dtype=np.complex128)
    for lo in range(0, len(pts), 256):
        p = pts[lo:lo + 256]
        ex = np.exp(-2j * np.pi * np.outer(p[:, 0], c))  # (k, x)
        ey = np.exp(-2j * np.pi * np.outer(p[:, 1], c))  # (k, y)
        out[lo:lo + 256] = np.einsum("ky,yx,kx->k", ey, image, ex)
    return out


def ndft_adjoint(samples, points, grid):
    """Exact conjugate transpose of :func:`ndft_forward`."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    samples = np.asarray(samples, dtype=np.complex128).ravel()
    c = _coords(grid)
    ex = np.exp(2j * np.pi * np.outer(pts[:, 0], c))
    ey = np.exp(2j * np.pi * np.outer(pts[:, 1], c))
    return np.einsum("k,ky,kx->yx", samples, ey, ex)


def _kb(d, width, beta):
    # Kaiser-Bessel window shifted down by its edge value I0(0) = 1, so it is
    # continuous at the support edge and the operator stays continuous in k
    arg = 1.0 - (2.0 * d / width) ** 2
    return np.where(arg >= 0, i0(beta * np.sqrt(np.clip(arg, 0, None))) - 1.0, 0.0)


def _kb_ft(xi, width, beta):
    """Fourier transform of :func:`_kb`: the KB transform minus that of a width-W box."""
    z = np.sqrt((beta ** 2 - (np.pi * width * xi) ** 2).astype(np.complex128))
    return (width * np.sinh(z) / z).real - width * np.sinc(width * xi)


class NufftPlan:
    """Precomputed gridding operator for one set of sample locations.

    Batched inputs are supported: images of shape ``(..., N, N)`` map to
    samples of shape ``(..., K)`` and back.
    """

    def __init__(self, points, grid, cfg=None):
        self.cfg = cfg or GriddingConfig()
        self.points = _check_points(points)
        self.grid = int(grid)
        N = self.grid
        M = int(math.ceil(self.cfg.oversampling * N))
        M += M % 2
        self.M = M
        W = self.cfg.kernel_width
        beta = self.cfg.beta
        K = len(self.points)

        kM = self.points * M
        u0 = np.ceil(kM - W / 2).astype(np.int64)  # (K, 2)
        offs = np.arange(W)
        ux = u0[:, 0:1] + offs
        uy = u0[:, 1:2] + offs
        wx = _kb(kM[:, 0:1] - ux, W, beta)
        wy = _kb(kM[:, 1:2] - uy, W, beta)
        data = (wy[:, :, None] * wx[:, None, :]).ravel()
        cols = ((uy % M)[:, :, None] * M + (ux % M)[:, None, :]).ravel()
        indptr = np.arange(0, K * W * W + 1, W * W)
        self._interp = scipy.sparse.csr_matrix((data, cols, indptr), shape=(K, M * M))
        self._interp_t = self._interp.T.tocsr()

        c = _coords(N)
        phi = _kb_ft(c / M, W, beta)
        self.deapod = np.outer(phi, phi)
        self._idx = c % M

    @property
    def n_samples(self):
        return len(self.points)

    def _check_image(self, image):
        image = np.asarray(image)
        if image.shape[-2:] != (self.grid, self.grid):
            raise ShapeError(f"image shape {image.shape[-2:]} != ({self.grid}, {self.grid})")
        return image

    def _spmm(self, mat, arr):
        # real sparse times complex dense, via the interleaved real view
        lead = arr.shape[1:]
        a = np.ascontiguousarray(arr.reshape(arr.shape[0], -1), dtype=np.complex128)
        out = mat @ a.view(np.float64)
        return np.ascontiguousarray(out).view(np.complex128).reshape((mat.shape[0],) + lead)

    def forward(self, image):
        image = self._check_image(image)
        lead = image.shape[:-2]
        imgs = image.reshape((-1, self.grid, self.grid)) / self.deapod
        B = imgs.shape[0]
        pad = np.zeros((B, self.M, self.M), dtype=np.complex128)
        pad[:, self._idx[:, None], self._idx[None, :]] = imgs
        G = scipy.fft.fft2(pad, axes=(-2, -1))
        s = self._spmm(self._interp, G.reshape(B, -1).T)  # (K, B)
        return s.T.reshape(lead + (self.n_samples,))

    def adjoint(self, samples):
        samples = np.asarray(samples, dtype=np.complex128)
        if samples.shape[-1] != self.n_samples:
            raise ShapeError(f"got {samples.shape[-1]} samples, plan has {self.n_samples}")
        lead = samples.shape[:-1]
        y = samples.reshape(-1, self.n_samples)
        B = y.shape[0]
        H = self._spmm(self._interp_t, y.T).T.reshape(B, self.M, self.M)
        X = scipy.fft.ifft2(H, axes=(-2, -1), norm="forward")
        img = X[:, self._idx[:, None], self._idx[None, :]] / self.deapod
        return img.reshape(lead + (self.grid, self.grid))

    def point_grad(self, image, cotangent):
        """Gradient of ``Re sum conj(cot_j) s_j`` w.r.t. each sample location.

        ``ds_j/dk_j = -2 pi i * F[coord * image](k_j)``, so two extra forward
        transforms of the coordinate-weighted image suffice.  Batched inputs
        are summed over the leading axis.
        """
        image = self._check_image(image)
        cot = np.asarray(cotangent, dtype=np.complex128)
        c = _coords(self.grid)
        weighted = np.stack([image * c[None, :], image * c[:, None]], axis=-3)
        ds = -2j * np.pi * self.forward(weighted)  # (..., 2, K)
        g = np.real(np.conj(cot)[..., None, :] * ds)
        g = g.reshape((-1, 2, self.n_samples)).sum(axis=0)
        return g.T

    def adjoint_point_grad(self, samples, image_cotangent):
        """Gradient w.r.t. sample locations of ``Re <cot, adjoint(samples)>``."""
        return self.point_grad(image_cotangent, samples)


def nufft_forward(image, points, cfg=None):
    return NufftPlan(points, np.shape(image)[-1], cfg).forward(image)


def nufft_adjoint(samples, points, grid, cfg=None):
    return NufftPlan(points, grid, cfg).adjoint(samples)


def nufft_point_grad(image, points, cotangent, cfg=None):
    return NufftPlan(points, np.shape(image)[-1], cfg).point_grad(image, cotangent)


def nufft_adjoint_point_grad(samples, points, image_cotangent, cfg=None):
    grid = np.shape(image_cotangent)[-1]
    return NufftPlan(points, grid, cfg).adjoint_point_grad(samples, image_cotangent)


def radial_dcf(points):
    """Ramp density weights |k|, with the DC sample given the smallest nonzero weight."""
    r = np.linalg.norm(np.asarray(points).reshape(-1, 2), axis=1)
    floor = r[r > 0].min() if np.any(r > 0) else 1.0
    return np.maximum(r, floor / 2)


def psf(points, grid, cfg=None, dcf=False):
    """Peak-normalized magnitude of the adjoint applied to unit samples."""
    pts = _check_points(points)
    w = radial_dcf(pts) if dcf else np.ones(len(pts))
    img = np.abs(NufftPlan(pts, grid, cfg).adjoint(w.astype(np.complex128)))
    return img / img.max()


def sidelobe_max(psf_image, exclude_radius=2.0):
    """Largest PSF value outside a disc of ``exclude_radius`` pixels around the center."""
    n = psf_image.shape[0]
    c = _coords(n)
    r = np.hypot(c[:, None], c[None, :])
    return float(psf_image[r > exclude_radius].max())
