"""Physics-driven smoothness losses on low-resolution latent maps.

A stratified batch holds one patch per spatial block, so its posterior means
reshape into a coarse latent map per content dimension.  Two scores measure
how "rough" those maps are:

* ``sl1``: mean Scharr edge magnitude of the normalized, bilateral-denoised
  maps (total interface length).
* ``sl2``: share of the centred log-magnitude spectrum that lies outside a
  low-frequency window.

``combined_loss`` couples either score multiplicatively with the VAE loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from . import imops

FLAT_RANGE = 1e-8
SL2_TOTAL_GUARD = 1e-12


@dataclass(frozen=True)
class PhysicsLossConfig:
    kind: str = "none"  # none | sl1 | sl2
    w: float = 0.1
    denoise: float | str = 0.1  # range sigma, or "auto_std"
    central_window: tuple[float, float] = (0.125, 0.125)  # (fx, fy)
    map_mask: tuple[int, ...] | None = None  # None selects every content map
    sign: str = "minimize"  # minimize | maximize
    sl1_reduction: str = "mean"  # mean | sum
    spatial_sigma: float = 1.0
    radius: int = 2
    # frozen extrema let the loss shrink a map's range until the flat guard
    # zeroes it, so by default gradients flow through min and max
    detach_extrema: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.map_mask is not None:
            object.__setattr__(self, "map_mask", tuple(int(i) for i in self.map_mask))
        object.__setattr__(self, "central_window", tuple(float(f) for f in self.central_window))
        if self.kind not in ("none", "sl1", "sl2"):
            raise ValueError(f"physics kind must be none, sl1 or sl2, got {self.kind!r}")
        if not 0.0 <= self.w <= 0.5:
            raise ValueError(f"slack w must lie in [0, 0.5], got {self.w}")
        if isinstance(self.denoise, str):
            if self.denoise != "auto_std":
                raise ValueError(f"denoise must be a number or 'auto_std', got {self.denoise!r}")
        elif self.denoise < 0:
            raise ValueError(f"denoise must be >= 0, got {self.denoise}")
        fx, fy = self.central_window
        if not (0.0 < fx < 0.5 and 0.0 < fy < 0.5):
            raise ValueError(f"central window fractions must lie in (0, 0.5), got {self.central_window}")
        if self.kind != "none" and self.map_mask is not None and not self.map_mask:
            raise ValueError("map_mask must be non-empty when a physics loss is active")
        if self.sign not in ("minimize", "maximize"):
            raise ValueError(f"sign must be minimize or maximize, got {self.sign!r}")
        if self.sl1_reduction not in ("mean", "sum"):
            raise ValueError(f"sl1_reduction must be mean or sum, got {self.sl1_reduction!r}")


@dataclass
class BatchMap:
    maps: list[dg.Node]
    block_grid: tuple[int, int] = field(default=(1, 1))


def assemble_batch_map(mu: dg.Node, block_grid: tuple[int, int], n_shift: int = 2) -> BatchMap:
    """Arrange a stratified batch's posterior means into one map per content dim.

    ``mu`` is ``(b_h * b_w, n_shift + n_content)`` in row-major block order.
    """
    mu = dg.as_node(mu)
    bh, bw = block_grid
    if mu.ndim != 2 or mu.shape[0] != bh * bw:
        raise dg.ContractError(
            f"assemble_batch_map: batch of {mu.shape[0] if mu.ndim else 0} codes "
            f"does not fill block grid {bh}x{bw}"
        )
    maps = [dg.reshape(mu[:, j], (bh, bw)) for j in range(n_shift, mu.shape[1])]
    return BatchMap(maps, (bh, bw))


def normalize_map(m: dg.Node, reference: np.ndarray | None = None, detach: bool = True) -> dg.Node:
    """Min-max scale to [0, 1]; flat maps become zeros.

    With ``detach`` the extrema are constants taken from ``reference``
    (default ``m`` itself); otherwise they are differentiable functions of
    ``m`` and the result is invariant to affine rescaling of the map.
    """
    m = dg.as_node(m)
    ref = m.value if reference is None else reference
    lo, hi = float(ref.min()), float(ref.max())
    if hi - lo < FLAT_RANGE:
        return dg.mul(m, 0.0)
    if detach:
        return (m - lo) * (1.0 / (hi - lo))
    lo_n = dg.amin(m)
    return (m - lo_n) / (dg.amax(m) - lo_n)


def _selected(batch_map: BatchMap, cfg: PhysicsLossConfig, reference=None) -> list[tuple[dg.Node, np.ndarray]]:
    n = len(batch_map.maps)
    refs = [m.value for m in batch_map.maps] if reference is None else [np.asarray(r) for r in reference]
    if len(refs) != n:
        raise dg.ContractError(f"{len(refs)} reference maps for {n} latent maps")
    if cfg.map_mask is None:
        return list(zip(batch_map.maps, refs))
    if not cfg.map_mask:
        raise dg.ContractError("physics loss needs a non-empty map_mask")
    bad = [j for j in cfg.map_mask if not 0 <= j < n]
    if bad:
        raise dg.ContractError(f"map_mask indices {bad} out of range for {n} content maps")
    return [(batch_map.maps[j], refs[j]) for j in cfg.map_mask]


def resolve_denoise(cfg: PhysicsLossConfig, normalized: np.ndarray) -> float:
    if cfg.denoise == "auto_std":
        return float(np.std(normalized))
    return float(cfg.denoise)


def edge_score(m: dg.Node, cfg: PhysicsLossConfig, reference: np.ndarray | None = None) -> dg.Node:
    """Reduced edge map of one latent map (normalize, denoise, Scharr).

    Every detached statistic (extrema, auto sigma, bilateral weights) is
    taken from ``reference``, which defaults to the map's own value.
    """
    ref = dg.as_node(m).value if reference is None else reference
    z = normalize_map(m, ref, cfg.detach_extrema)
    guide = normalize_map(dg.constant(ref)).value
    sigma = resolve_denoise(cfg, guide)
    if sigma > 0:
        z = imops.bilateral_filter(z, sigma, cfg.spatial_sigma, cfg.radius, guide=guide)
    edges = imops.scharr_magnitude(z)
    return dg.mean(edges) if cfg.sl1_reduction == "mean" else dg.sum(edges)


def sl1(batch_map: BatchMap, cfg: PhysicsLossConfig, reference=None) -> dg.Node:
    """Mean edge score over the selected maps.

    ``reference`` (one array per map) pins the detached statistics, which
    makes the loss a fixed differentiable function for gradient checks.
    """
    maps = _selected(batch_map, cfg, reference)
    total = None
    for m, ref in maps:
        s = edge_score(m, cfg, ref)
        total = s if total is None else total + s
    return total * (1.0 / len(maps))


def spectral_parts(m: dg.Node, cfg: PhysicsLossConfig, reference: np.ndarray | None = None) -> tuple[dg.Node, dg.Node]:
    """(total, central) sums of the centred log spectrum of one normalized map."""
    logmag = imops.dft2_logmag(normalize_map(m, reference, cfg.detach_extrema))
    fx, fy = cfg.central_window
    rows, cols = imops.central_window(logmag.shape, fx, fy)
    return dg.sum(logmag), dg.sum(logmag[rows, cols])


def sl2(batch_map: BatchMap, cfg: PhysicsLossConfig, reference=None) -> dg.Node:
    maps = _selected(batch_map, cfg, reference)
    for m, _ in maps:
        if m.shape[0] < 4 or m.shape[1] < 4:
            raise dg.ShapeError(f"sl2: latent maps must be at least 4x4, got {m.shape}")
    total = outside = None
    for m, ref in maps:
        t, c = spectral_parts(m, cfg, ref)
        total = t if total is None else total + t
        outside = (t - c) if outside is None else outside + (t - c)
    if total.item() < SL2_TOTAL_GUARD:
        return dg.mul(total, 0.0)
    return outside / total


def physics_score(batch_map: BatchMap, cfg: PhysicsLossConfig, reference=None) -> dg.Node:
    if cfg.kind == "sl1":
        return sl1(batch_map, cfg, reference)
    if cfg.kind == "sl2":
        return sl2(batch_map, cfg, reference)
    raise dg.ContractError("physics_score called with kind 'none'")


def combined_loss(vae_loss: dg.Node, psi: dg.Node, cfg: PhysicsLossConfig) -> dg.Node:
    """vae_loss * (w + psi), or vae_loss * (w + max(0, 1 - psi)) when maximizing."""
    if cfg.sign == "maximize":
        factor = dg.relu(1.0 - psi) + cfg.w
    else:
        factor = psi + cfg.w
    return vae_loss * factor


# ---------------------------------------------------------- full-field metrics


def mean_edge_magnitude(maps: Sequence[np.ndarray]) -> float:
    """Mean Scharr magnitude of min-max normalized maps, averaged over maps."""
    scores = [
        float(imops.scharr_magnitude_array(normalize_map(dg.constant(m)).value).mean()) for m in maps
    ]
    return float(np.mean(scores))


def off_center_fraction(maps: Sequence[np.ndarray], central_window=(0.125, 0.125)) -> float:
    """Share of the summed log spectrum outside the central window."""
    cfg = PhysicsLossConfig(kind="sl2", central_window=central_window)
    return sl2(BatchMap([dg.constant(m) for m in maps], maps[0].shape), cfg).item()


def off_center_energy_fraction(maps: Sequence[np.ndarray], central_window=(0.125, 0.125)) -> float:
    """Share of spectral power |F|^2 outside the central window, pooled over maps.

    Unlike :func:`off_center_fraction` there is no log compression, so the
    number is dominated by how much variance sits at high spatial frequency.
    """
    out = total = 0.0
    for m in maps:
        z = normalize_map(dg.constant(m)).value
        power = np.abs(np.fft.fftshift(np.fft.fft2(z))) ** 2
        rows, cols = imops.central_window(power.shape, *central_window)
        total += power.sum()
        out += power.sum() - power[rows, cols].sum()
    return float(out / total) if total > 1e-24 else 0.0
