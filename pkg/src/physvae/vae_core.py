"""Shift-invariant VAE: MLP encoder, coordinate decoder with a learned grid shift.

The latent vector is ``[dr_row, dr_col, c_1, ..., c_n]``.  The first two
entries translate the decoder's sampling grid by ``k * dr``; the content
entries ``c_j`` are concatenated to every shifted grid point and the decoder
MLP maps each (point, content) pair to one pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg

LOGVAR_CLAMP = 10.0
PROB_CLAMP = 1e-6


class UnsupportedLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LatentLayout:
    n_content: int = 2
    k: float = 0.5
    n_shift: int = 2

    def __post_init__(self):
        if self.n_shift != 2:
            raise ValueError(f"n_shift must be 2, got {self.n_shift}")
        if self.n_content < 1:
            raise ValueError(f"n_content must be >= 1, got {self.n_content}")
        if not 0.0 < self.k <= 1.0:
            raise ValueError(f"shift scale k must lie in (0, 1], got {self.k}")

    @property
    def dim(self) -> int:
        return self.n_shift + self.n_content


@dataclass
class ModelParams:
    """Encoder/decoder weights.

    ``encoder`` and ``decoder`` are lists of ``(W, b)`` pairs with ``W`` of
    shape ``(fan_in, fan_out)``.  The first decoder matrix has rows
    ``[grid_row, grid_col, c_1..c_n]``.
    """

    encoder: list[tuple[np.ndarray, np.ndarray]]
    decoder: list[tuple[np.ndarray, np.ndarray]]
    layout: LatentLayout
    patch_side: int
    likelihood: str = "bernoulli"

    def __post_init__(self):
        enc_out = self.encoder[-1][0].shape[1]
        if enc_out != 2 * self.layout.dim:
            raise ValueError(f"encoder output {enc_out} != 2 * latent dim {self.layout.dim}")
        if self.encoder[0][0].shape[0] != self.patch_side**2:
            raise ValueError("encoder input size does not match patch_side**2")
        if self.decoder[0][0].shape[0] != 2 + self.layout.n_content:
            raise ValueError("decoder input size must be 2 + n_content")
        if self.decoder[-1][0].shape[1] != 1:
            raise ValueError("decoder must emit one value per grid point")
        if self.likelihood not in ("bernoulli", "mse"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.encoder + self.decoder:
            out.extend([w, b])
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> ModelParams:
        arrays = list(arrays)
        it = iter(arrays)
        enc = [(next(it), next(it)) for _ in self.encoder]
        dec = [(next(it), next(it)) for _ in self.decoder]
        return ModelParams(enc, dec, self.layout, self.patch_side, self.likelihood)

    def copy(self) -> ModelParams:
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_params(
    patch_side: int,
    layout: LatentLayout | None = None,
    hidden: tuple[int, ...] = (128, 128),
    decoder_hidden: tuple[int, ...] | None = None,
    rng: np.random.Generator | None = None,
    likelihood: str = "bernoulli",
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    layout = layout or LatentLayout()
    rng = rng if rng is not None else np.random.default_rng(0)
    decoder_hidden = hidden if decoder_hidden is None else decoder_hidden

    def mlp(sizes):
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)))
        return layers

    enc = mlp([patch_side**2, *hidden, 2 * layout.dim])
    dec = mlp([2 + layout.n_content, *decoder_hidden, 1])
    return ModelParams(enc, dec, layout, patch_side, likelihood)


def base_grid(side: int) -> np.ndarray:
    """The s*s lattice of (row, col) points scaled to [-1, 1], row-major."""
    t = np.linspace(-1.0, 1.0, side)
    rr, cc = np.meshgrid(t, t, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass
class LatentCode:
    mu: dg.Node
    logvar: dg.Node


@dataclass
class ParamNodes:
    """Graph leaves wrapping a ModelParams for one evaluation."""

    params: ModelParams
    encoder: list[tuple[dg.Node, dg.Node]] = field(init=False)
    decoder: list[tuple[dg.Node, dg.Node]] = field(init=False)
    requires_grad: bool = True

    def __post_init__(self):
        wrap = dg.variable if self.requires_grad else dg.constant
        self.encoder = [(wrap(w), wrap(b)) for w, b in self.params.encoder]
        self.decoder = [(wrap(w), wrap(b)) for w, b in self.params.decoder]

    def leaves(self) -> list[dg.Node]:
        out = []
        for w, b in self.encoder + self.decoder:
            out.extend([w, b])
        return out

    def grads(self) -> list[np.ndarray]:
        return [n.grad if n.grad is not None else np.zeros_like(n.value) for n in self.leaves()]


def _as_param_nodes(params) -> ParamNodes:
    if isinstance(params, ParamNodes):
        return params
    return ParamNodes(params, requires_grad=False)


def encode(params, patches) -> LatentCode:
    """Posterior mean and log-variance for a batch of flattened patches.

    ``patches`` is ``(s*s,)`` or ``(N, s*s)``; outputs are ``(N, dim)``.
    """
    pn = _as_param_nodes(params)
    p = pn.params
    x = dg.as_node(patches)
    if x.ndim == 1:
        x = dg.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != p.patch_side**2:
        raise dg.ShapeError(
            f"encode: patch shape {tuple(x.shape)} does not match patch_side**2 = {p.patch_side**2}"
        )
    h = x
    for i, (w, b) in enumerate(pn.encoder):
        h = dg.matmul(h, w) + b
        if i < len(pn.encoder) - 1:
            h = dg.tanh(h)
    d = p.layout.dim
    return LatentCode(mu=h[:, :d], logvar=h[:, d:])


def reparameterize(code: LatentCode, eps) -> dg.Node:
    """z = mu + exp(clamp(logvar)/2) * eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != code.mu.shape:
        raise dg.ShapeError(f"reparameterize: eps shape {eps.shape} != latent shape {code.mu.shape}")
    logvar = dg.clip(code.logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return code.mu + dg.exp(logvar * 0.5) * eps


def decode_logits(params, z, grid: np.ndarray | None = None) -> dg.Node:
    """Pre-sigmoid decoder output, shape ``(N, P)`` for ``P`` grid points."""
    pn = _as_param_nodes(params)
    p = pn.params
    z = dg.as_node(z)
    if z.ndim == 1:
        z = dg.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != p.layout.dim:
        raise dg.ShapeError(f"decode: latent shape {tuple(z.shape)} does not match dim {p.layout.dim}")
    grid = base_grid(p.patch_side) if grid is None else np.asarray(grid, dtype=np.float64)
    n, npts = z.shape[0], grid.shape[0]
    w1, b1 = pn.decoder[0]
    w_grid, w_content = w1[:2, :], w1[2:, :]
    # first layer of concat(g + k*dr, c) @ W1 split into per-point and per-datum parts
    per_point = dg.matmul(dg.constant(grid), w_grid)
    per_datum = (
        dg.matmul(z[:, :2] * p.layout.k, w_grid) + dg.matmul(z[:, 2:], w_content) + b1
    )
    hidden = per_point.shape[1]
    h = dg.reshape(per_point, (1, npts, hidden)) + dg.reshape(per_datum, (n, 1, hidden))
    h = dg.reshape(h, (n * npts, hidden))
    for w, b in pn.decoder[1:]:
        h = dg.matmul(dg.tanh(h), w) + b
    return dg.reshape(h, (n, npts))


def decode(params, z, grid: np.ndarray | None = None) -> dg.Node:
    """Decoded patches in (0, 1), shape ``(N, P)``."""
    return dg.sigmoid(decode_logits(params, z, grid))


def kl_divergence(code: LatentCode) -> dg.Node:
    """Per-datum KL(q(z|x) || N(0, I)), shape ``(N,)``."""
    logvar = dg.clip(code.logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    # exp(v) - (1 + v) rather than exp(v) - 1 - v: rounding is monotone, so
    # fl(1 + v) <= fl(exp(v)) and the term never goes negative for tiny v
    terms = dg.square(code.mu) + (dg.exp(logvar) - (logvar + 1.0))
    return dg.sum(terms, axis=1) * 0.5


def reconstruction_loss(x_hat: dg.Node, x, likelihood: str = "bernoulli") -> dg.Node:
    """Per-datum reconstruction term summed over pixels, shape ``(N,)``."""
    x = np.asarray(x.value if isinstance(x, dg.Node) else x, dtype=np.float64)
    if likelihood == "mse":
        return dg.sum(dg.square(x_hat - x), axis=1)
    p = dg.clip(x_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(dg.log(p) * x + dg.log(1.0 - p) * (1.0 - x))
    return dg.sum(nll, axis=1)


@dataclass
class ElboTerms:
    loss: dg.Node  # recon + beta * kl, batch mean
    recon: dg.Node  # batch mean
    kl: dg.Node  # batch mean
    code: LatentCode


def elbo_terms(params, batch, eps_batch, beta: float) -> ElboTerms:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    pn = _as_param_nodes(params)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    code = encode(pn, batch)
    z = reparameterize(code, np.atleast_2d(eps_batch))
    x_hat = decode(pn, z)
    recon = dg.mean(reconstruction_loss(x_hat, batch, pn.params.likelihood))
    kl = dg.mean(kl_divergence(code))
    return ElboTerms(recon + kl * float(beta), recon, kl, code)


def elbo_loss(params, batch, eps_batch, beta: float) -> dg.Node:
    """Batch-mean of reconstruction + beta * KL."""
    return elbo_terms(params, batch, eps_batch, beta).loss


def decode_manifold(params: ModelParams, grid_range=(-3.0, 3.0), m: int = 12) -> np.ndarray:
    """Tile decoded patches over an m*m grid of content latents (zero shift).

    Tile ``(i, j)`` decodes content ``(v[i], v[j])`` with
    ``v = linspace(lo, hi, m)``.
    """
    if params.layout.n_content != 2:
        raise UnsupportedLayoutError(
            f"decode_manifold needs n_content == 2, got {params.layout.n_content}"
        )
    lo, hi = grid_range
    s = params.patch_side
    vals = np.linspace(lo, hi, m)
    c1, c2 = np.meshgrid(vals, vals, indexing="ij")
    z = np.zeros((m * m, 4))
    z[:, 2] = c1.ravel()
    z[:, 3] = c2.ravel()
    tiles = decode(params, z).value.reshape(m, m, s, s)
    return tiles.transpose(0, 2, 1, 3).reshape(m * s, m * s)
