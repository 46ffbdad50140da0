"""Root-sum-of-squares coil combine and the encoder-decoder reconstruction net."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ShapeError

__all__ = ["ReconParams", "rss", "recon_build", "recon_forward", "normalize_input"]

NORM_PERCENTILE = 99.0


def rss(coil_images):
    """Per-pixel sqrt(sum_c |x_c|^2) over the leading coil axis."""
    x = np.asarray(coil_images)
    if x.ndim != 3:
        raise ShapeError(f"rss expects (coils, H, W), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("rss needs at least one coil")
    return np.sqrt(np.sum(x.real ** 2 + x.imag ** 2, axis=0))


@dataclass
class ReconParams:
    levels: int
    base_channels: int
    weights: dict = field(default_factory=dict)  # name -> ndarray, insertion order is canonical

    @property
    def ladder(self):
        return [self.base_channels * 2 ** l for l in range(self.levels)]

    @property
    def size(self):
        return sum(w.size for w in self.weights.values())

    def names(self):
        return list(self.weights)

    def flat(self):
        return np.concatenate([w.ravel() for w in self.weights.values()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {self.size}")
        out, i = {}, 0
        for k, w in self.weights.items():
            out[k] = vec[i:i + w.size].reshape(w.shape).copy()
            i += w.size
        return ReconParams(self.levels, self.base_channels, out)

    def zeros_like(self):
        return ReconParams(self.levels, self.base_channels,
                           {k: np.zeros_like(w) for k, w in self.weights.items()})


def _layer_shapes(levels, base):
    """Ordered (name, shape) list.  Convs followed by instance norm carry no bias."""
    shapes = []
    ladder = [base * 2 ** l for l in range(levels)]
    cin = 1
    for l, c in enumerate(ladder):
        shapes.append((f"enc{l}.conv1", (c, cin, 3, 3)))
        shapes.append((f"enc{l}.conv2", (c, c, 3, 3)))
        cin = c
    shapes.append(("mid.conv1", (cin, cin, 3, 3)))
    shapes.append(("mid.conv2", (cin, cin, 3, 3)))
    for l in reversed(range(levels)):
        c = ladder[l]
        shapes.append((f"dec{l}.conv1", (c, cin + c, 3, 3)))
        shapes.append((f"dec{l}.conv2", (c, c, 3, 3)))
        cin = c
    shapes.append(("out.weight", (1, cin, 1, 1)))
    shapes.append(("out.bias", (1,)))
    return shapes


def recon_build(levels=3, base_channels=16, seed=0, grid=None, out_scale=0.1):
    """He-initialized encoder-decoder; the final 1x1 projection is scaled down by ``out_scale``."""
    if levels < 1 or base_channels < 1:
        raise ValueError("levels and base_channels must be >= 1")
    if grid is not None and grid % (2 ** levels):
        raise ShapeError(f"grid {grid} is not divisible by 2**levels = {2 ** levels}")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _layer_shapes(levels, base_channels):
        if name == "out.bias":
            weights[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if name == "out.weight":
            w *= out_scale
        weights[name] = w
    return ReconParams(levels, base_channels, weights)


def normalize_input(image):
    """Scale a tape-tracked image by its 99th-percentile value (kept differentiable)."""
    scale = dc.percentile(image, NORM_PERCENTILE)
    if float(scale.values) <= 0:
        return image, scale
    return image / scale, scale


def recon_forward(params, image, tape=None):
    """Residual encoder-decoder applied to a single (H, W) image.

    ``image`` may be a numpy array or a TapeTensor.  Returns
    ``(output, leaves)`` where ``leaves`` maps parameter names to the tape
    leaves created for them (their ``.grad`` is filled by ``tape.backward``).
    """
    if isinstance(image, dc.TapeTensor):
        tape = image.tape
        x = image
    else:
        tape = tape or dc.Tape()
        x = tape.constant(image)
    if x.values.ndim != 2:
        raise ShapeError(f"recon_forward expects an (H, W) image, got {x.shape}")
    H, W = x.shape
    if H % 2 ** params.levels or W % 2 ** params.levels:
        raise ShapeError(f"image {x.shape} is not divisible by 2**levels = {2 ** params.levels}")
    leaves = {k: tape.leaf(w) for k, w in params.weights.items()}

    def block(h, prefix):
        h = dc.leaky_relu(dc.instance_norm(dc.conv2d(h, leaves[prefix + ".conv1"])))
        return dc.leaky_relu(dc.instance_norm(dc.conv2d(h, leaves[prefix + ".conv2"])))

    h = dc.reshape(x, (1, H, W))
    skips = []
    for l in range(params.levels):
        h = block(h, f"enc{l}")
        skips.append(h)
        h = dc.max_pool2d(h)
    h = block(h, "mid")
    for l in reversed(range(params.levels)):
        h = dc.concat([dc.nearest_upsample(h), skips[l]], axis=0)
        h = block(h, f"dec{l}")
    corr = dc.conv2d(h, leaves["out.weight"], leaves["out.bias"])
    return x + dc.reshape(corr, (H, W)), leaves
