"""Differentiable image operators: bilateral smoothing, Scharr edges, DFT spectra.

All functions take and return 2D :class:`~physvae.diffgraph.Node` objects so
they can sit inside a training loss.  ``*_array`` twins operate on plain
numpy arrays with identical numerics for the non-differentiable pipeline.
"""

from __future__ import annotations

import numpy as np

from . import diffgraph as dg

SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0
SCHARR_Y = SCHARR_X.T.copy()

EDGE_EPS = 1e-12
# spectra are compared against exact DFTs at 1e-9, so the smoothing is tighter
SPECTRUM_EPS = 1e-24


def _smooth_modulus(a: dg.Node, b: dg.Node, eps: float) -> dg.Node:
    # the sqrt(eps) floor is removed so an exactly-zero field maps to exactly 0
    return dg.sqrt(dg.square(a) + dg.square(b) + eps) - float(np.sqrt(eps))


# ----------------------------------------------------------------- bilateral


def _spatial_kernel(radius: int, spatial_sigma: float) -> np.ndarray:
    off = np.arange(-radius, radius + 1, dtype=np.float64)
    d2 = off[:, None] ** 2 + off[None, :] ** 2
    return np.exp(-d2 / (2.0 * spatial_sigma**2))


def bilateral_weights(
    values: np.ndarray, range_sigma: float, spatial_sigma: float = 1.0, radius: int = 2
) -> np.ndarray:
    """Normalized bilateral weights, shape ``(2r+1, 2r+1, H, W)``.

    ``weights[u, v, i, j]`` multiplies the reflect-padded pixel at
    ``(i + u, j + v)`` when filtering output pixel ``(i, j)``.
    """
    if range_sigma <= 0 or spatial_sigma <= 0:
        raise ValueError(
            f"bilateral: sigmas must be positive (range={range_sigma}, spatial={spatial_sigma})"
        )
    if radius < 1:
        raise ValueError(f"bilateral: radius must be >= 1, got {radius}")
    h, w = values.shape
    padded = np.pad(values, radius, mode="reflect")
    spatial = _spatial_kernel(radius, spatial_sigma)
    k = 2 * radius + 1
    weights = np.empty((k, k, h, w))
    for u in range(k):
        for v in range(k):
            diff = padded[u : u + h, v : v + w] - values
            weights[u, v] = spatial[u, v] * np.exp(-(diff * diff) / (2.0 * range_sigma**2))
    weights /= weights.sum(axis=(0, 1))
    return weights


def bilateral_filter(
    m: dg.Node,
    range_sigma: float,
    spatial_sigma: float = 1.0,
    radius: int = 2,
    guide: np.ndarray | None = None,
) -> dg.Node:
    """Edge-preserving smoothing of a [0, 1] map.

    Weights come from ``guide`` (default: a detached copy of ``m``), so the
    filter is linear in the map values as far as gradients are concerned.
    """
    m = dg.as_node(m)
    if m.ndim != 2:
        raise dg.ShapeError(f"bilateral_filter: expected a 2D map, got shape {m.shape}")
    h, w = m.shape
    guide = m.value if guide is None else np.asarray(guide, dtype=np.float64)
    if guide.shape != m.shape:
        raise dg.ShapeError(f"bilateral_filter: guide shape {guide.shape} != map shape {m.shape}")
    weights = bilateral_weights(guide, range_sigma, spatial_sigma, radius)
    padded = dg.reflect_pad(m, radius)
    k = 2 * radius + 1
    out = None
    for u in range(k):
        for v in range(k):
            term = dg.mul(padded[u : u + h, v : v + w], weights[u, v])
            out = term if out is None else out + term
    return out


def bilateral_filter_array(
    m: np.ndarray, range_sigma: float, spatial_sigma: float = 1.0, radius: int = 2
) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    weights = bilateral_weights(m, range_sigma, spatial_sigma, radius)
    padded = np.pad(m, radius, mode="reflect")
    k = 2 * radius + 1
    out = np.zeros((h, w))
    for u in range(k):
        for v in range(k):
            out = out + padded[u : u + h, v : v + w] * weights[u, v]
    return out


# -------------------------------------------------------------------- Scharr


def scharr_magnitude(m: dg.Node) -> dg.Node:
    m = dg.as_node(m)
    if m.ndim != 2 or m.shape[0] < 3 or m.shape[1] < 3:
        raise dg.ShapeError(f"scharr_magnitude: map shape {m.shape} smaller than kernel (3, 3)")
    gx = dg.conv2d_3x3(m, SCHARR_X)
    gy = dg.conv2d_3x3(m, SCHARR_Y)
    return _smooth_modulus(gx, gy, EDGE_EPS)


def scharr_magnitude_array(m: np.ndarray) -> np.ndarray:
    return scharr_magnitude(dg.constant(m)).value


# ----------------------------------------------------------------------- DFT


def shifted_dft_matrix(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of the DFT matrix with rows in fftshift order.

    Row ``r`` corresponds to frequency ``r - n // 2`` so the zero frequency
    lands at index ``n // 2``.
    """
    freqs = np.arange(n) - n // 2
    angle = -2.0 * np.pi * np.outer(freqs, np.arange(n)) / n
    return np.cos(angle), np.sin(angle)


def dft2_logmag(m: dg.Node) -> dg.Node:
    """Centered log(|F| + 1) spectrum of a 2D map via dense DFT matrices."""
    m = dg.as_node(m)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise dg.ShapeError(f"dft2_logmag: map shape {m.shape} must be at least (2, 2)")
    h, w = m.shape
    ch, sh = shifted_dft_matrix(h)
    cw, sw = shifted_dft_matrix(w)
    # F = D_H m D_W^T with D = C + iS
    left_re = dg.matmul(dg.constant(ch), m)
    left_im = dg.matmul(dg.constant(sh), m)
    re = dg.matmul(left_re, dg.constant(cw.T)) - dg.matmul(left_im, dg.constant(sw.T))
    im = dg.matmul(left_re, dg.constant(sw.T)) + dg.matmul(left_im, dg.constant(cw.T))
    return dg.log(_smooth_modulus(re, im, SPECTRUM_EPS) + 1.0)


def dft2_logmag_array(m: np.ndarray) -> np.ndarray:
    return dft2_logmag(dg.constant(m)).value


def central_window(shape: tuple[int, int], fx: float = 0.125, fy: float = 0.125) -> tuple[slice, slice]:
    """Rows/cols within floor(fy*H) / floor(fx*W) of the spectrum centre, inclusive."""
    h, w = shape
    ry, rx = int(np.floor(fy * h)), int(np.floor(fx * w))
    cy, cx = h // 2, w // 2
    return slice(max(cy - ry, 0), min(cy + ry + 1, h)), slice(max(cx - rx, 0), min(cx + rx + 1, w))
