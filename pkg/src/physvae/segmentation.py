"""Phase segmentation of latent fields on plain numpy arrays.

Pipeline per map: flatness guard -> min-max normalization -> bilateral
denoising -> either Otsu pre-labelling refined by Chan-Vese (binary) or
multi-Otsu labelling (multi-class).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imops

FLAT_THRESHOLD = 1e-3
N_BINS = 256


@dataclass
class LatentField:
    maps: np.ndarray  # (n_content, H, W)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim == 2:
            self.maps = self.maps[None]
        if self.maps.shape[1:] != tuple(self.grid_shape):
            raise ValueError(f"latent maps {self.maps.shape[1:]} do not match grid {self.grid_shape}")


@dataclass
class LabelMap:
    labels: np.ndarray
    n_classes: int
    converged: bool = True

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label values must lie in [0, n_classes)")


@dataclass
class GuardResult:
    flat: bool
    normalized: np.ndarray | None = None


def flatness_guard(m: np.ndarray, threshold: float = FLAT_THRESHOLD) -> GuardResult:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < threshold:
        return GuardResult(True)
    return GuardResult(False, (m - lo) / (hi - lo))


# ----------------------------------------------------------------- Otsu


def to_bins(m: np.ndarray) -> np.ndarray:
    """Bin index of every pixel in a 256-bin histogram of [0, 1]."""
    return np.clip(np.floor(np.asarray(m, dtype=np.float64) * N_BINS), 0, N_BINS - 1).astype(np.int64)


def _class_score(counts: np.ndarray, sums: np.ndarray) -> np.ndarray:
    # sum_i S_i^2 / N_i is between-class variance up to constants; empty classes add 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(counts > 0, sums * sums / np.where(counts > 0, counts, 1.0), 0.0)


def multi_otsu(m: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """Thresholds maximizing between-class variance, by exhaustive search.

    Candidates are the 255 interior bin edges ``k / 256``; a pixel falls in
    class ``i`` when its value is ``>= thresholds[i-1]`` and
    ``< thresholds[i]``.  Ties resolve to the lexicographically smallest tuple.
    """
    if n_classes not in (2, 3, 4):
        raise ValueError(f"n_classes must be 2, 3 or 4, got {n_classes}")
    hist = np.bincount(to_bins(m).ravel(), minlength=N_BINS).astype(np.float64)
    centers = (np.arange(N_BINS) + 0.5) / N_BINS
    # cumulative count / value-sum of bins [0, k) for k = 0..256
    cn = np.concatenate([[0.0], np.cumsum(hist)])
    cs = np.concatenate([[0.0], np.cumsum(hist * centers)])
    total_n, total_s = cn[-1], cs[-1]
    ks = np.arange(1, N_BINS)
    if n_classes == 2:
        score = _class_score(cn[ks], cs[ks]) + _class_score(total_n - cn[ks], total_s - cs[ks])
        return np.array([ks[int(np.argmax(score))] / N_BINS])
    best_score, best = -np.inf, None
    for combo_head in itertools.combinations(ks, n_classes - 2):
        lo = combo_head[-1]
        tail = ks[ks > lo]
        if tail.size == 0:
            continue
        edges = [0, *combo_head]
        score = np.zeros(tail.size)
        for a, b in zip(edges[:-1], edges[1:]):
            score += _class_score(np.array(cn[b] - cn[a]), np.array(cs[b] - cs[a]))
        score = score + _class_score(cn[tail] - cn[lo], cs[tail] - cs[lo])
        score = score + _class_score(total_n - cn[tail], total_s - cs[tail])
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score, best = score[i], (*combo_head, tail[i])
    return np.array(best, dtype=np.float64) / N_BINS


def otsu(m: np.ndarray) -> float:
    """Binary Otsu threshold (``multi_otsu`` with two classes)."""
    return float(multi_otsu(m, 2)[0])


def apply_thresholds(m: np.ndarray, thresholds) -> np.ndarray:
    bins = to_bins(m)
    edges = np.round(np.asarray(thresholds) * N_BINS).astype(np.int64)
    return np.searchsorted(edges, bins, side="right").astype(np.int64)


# ------------------------------------------------------------- Chan-Vese


@dataclass
class ChanVeseResult:
    labels: np.ndarray
    converged: bool
    iterations: int
    energies: list[float] = field(default_factory=list)


def _heaviside(phi, eps):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(phi / eps))


def _dirac(phi, eps):
    return (eps / np.pi) / (eps * eps + phi * phi)


def _forward_diff(h):
    dx = np.zeros_like(h)
    dy = np.zeros_like(h)
    dx[:, :-1] = h[:, 1:] - h[:, :-1]
    dy[:-1, :] = h[1:, :] - h[:-1, :]
    return dx, dy


def chan_vese_energy(img, phi, c1, c2, mu, eps=1.0, eta=1e-8):
    h = _heaviside(phi, eps)
    dx, dy = _forward_diff(h)
    length = np.sum(np.sqrt(dx * dx + dy * dy + eta))
    region = np.sum((img - c1) ** 2 * h + (img - c2) ** 2 * (1.0 - h))
    return float(mu * length + region)


def _region_means(img, phi, eps):
    h = _heaviside(phi, eps)
    w1, w2 = h.sum(), (1.0 - h).sum()
    c1 = float((img * h).sum() / w1) if w1 > 0 else 0.0
    c2 = float((img * (1.0 - h)).sum() / w2) if w2 > 0 else 0.0
    return c1, c2


def checkerboard(shape, period: float = 5.0) -> np.ndarray:
    r, c = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.sin(np.pi * r / period) * np.sin(np.pi * c / period)


def _hard_means(img, phi):
    inside = phi > 0
    c1 = float(img[inside].mean()) if inside.any() else 0.0
    c2 = float(img[~inside].mean()) if (~inside).any() else 0.0
    return c1, c2


def _relaxed_energy(img, phi, mu, eps, eta):
    # energy at the optimal region means for this level set
    c1, c2 = _region_means(img, phi, eps)
    return chan_vese_energy(img, phi, c1, c2, mu, eps, eta)


def _semi_implicit_update(img, phi, c1, c2, mu, dt, eps):
    """One curvature-regularized level-set step (semi-implicit in the length term)."""
    tiny = 1e-16
    p = np.pad(phi, 1, mode="edge")
    xp = p[1:-1, 2:] - p[1:-1, 1:-1]
    xn = p[1:-1, 1:-1] - p[1:-1, :-2]
    x0 = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    yp = p[2:, 1:-1] - p[1:-1, 1:-1]
    yn = p[1:-1, 1:-1] - p[:-2, 1:-1]
    y0 = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    k1 = 1.0 / np.sqrt(tiny + xp**2 + y0**2)
    k2 = 1.0 / np.sqrt(tiny + xn**2 + y0**2)
    k3 = 1.0 / np.sqrt(tiny + x0**2 + yp**2)
    k4 = 1.0 / np.sqrt(tiny + x0**2 + yn**2)
    curv = p[1:-1, 2:] * k1 + p[1:-1, :-2] * k2 + p[2:, 1:-1] * k3 + p[:-2, 1:-1] * k4
    d = dt * _dirac(phi, eps)
    num = phi + d * (mu * curv - (img - c1) ** 2 + (img - c2) ** 2)
    return num / (1.0 + mu * d * (k1 + k2 + k3 + k4))


def chan_vese(
    img: np.ndarray,
    mu: float = 0.25,
    tol: float = 1e-3,
    max_iter: int = 200,
    init: np.ndarray | None = None,
    eps: float = 1.0,
    eta: float = 1e-8,
    dt: float = 0.5,
) -> ChanVeseResult:
    """Two-phase Chan-Vese segmentation (lambda1 = lambda2 = 1).

    Each iteration proposes a semi-implicit level-set step driven by the
    hard region means, then backtracks toward the current level set until
    the smoothed energy (at its optimal region means) does not increase, so
    the recorded energies are monotone.  Stops when the mean absolute change
    of the level set drops below ``tol``.  ``init`` is a boolean mask
    (True = phase 1); the default is a checkerboard level set.  Phase 1 is
    ``phi > 0``.
    """
    img = np.asarray(img, dtype=np.float64)
    if init is None:
        phi = checkerboard(img.shape)
    else:
        phi = np.where(np.asarray(init, dtype=bool), 1.0, -1.0)
    energies = [_relaxed_energy(img, phi, mu, eps, eta)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        c1, c2 = _hard_means(img, phi)
        proposal = _semi_implicit_update(img, phi, c1, c2, mu, dt, eps)
        new_phi, new_e, frac = phi, energies[-1], 1.0
        for _ in range(30):
            trial = phi + frac * (proposal - phi)
            e = _relaxed_energy(img, trial, mu, eps, eta)
            if e <= energies[-1]:
                new_phi, new_e = trial, e
                break
            frac *= 0.5
        change = float(np.mean(np.abs(new_phi - phi)))
        phi = new_phi
        energies.append(new_e)
        if change < tol:
            converged = True
            break
    return ChanVeseResult((phi > 0).astype(np.int64), converged, it, energies)


# --------------------------------------------------------------- pipeline


def canonical_labels(labels: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber labels 0..k-1 by ascending mean of ``values`` in each region."""
    present = np.unique(labels)
    means = [values[labels == lab].mean() for lab in present]
    order = present[np.argsort(means, kind="stable")]
    out = np.empty_like(labels)
    for new, old in enumerate(order):
        out[labels == old] = new
    return out, len(present)


def segment_map(
    m: np.ndarray,
    denoise: float = 0.1,
    mode: str = "binary",
    n_classes: int = 2,
    cv_mu: float = 0.25,
    cv_tol: float = 1e-3,
    cv_max_iter: int = 200,
) -> LabelMap:
    if denoise < 0:
        raise ValueError(f"denoise must be >= 0, got {denoise}")
    guard = flatness_guard(m)
    if guard.flat:
        return LabelMap(np.zeros(np.shape(m), dtype=np.int64), 1)
    z = guard.normalized
    if denoise > 0:
        z = imops.bilateral_filter_array(z, denoise)
    if mode == "binary":
        init = z >= otsu(z)
        cv = chan_vese(z, cv_mu, cv_tol, cv_max_iter, init=init)
        labels, n = canonical_labels(cv.labels, z)
        return LabelMap(labels, max(n, 1), cv.converged)
    if mode == "multi":
        labels = apply_thresholds(z, multi_otsu(z, n_classes))
        labels, n = canonical_labels(labels, z)
        return LabelMap(labels, max(n, 1))
    raise ValueError(f"mode must be 'binary' or 'multi', got {mode!r}")


def segment_pipeline(field: LatentField, denoise: float = 0.1, mode: str = "binary", n_classes: int = 2, **cv) -> list[LabelMap]:
    return [segment_map(m, denoise, mode, n_classes, **cv) for m in field.maps]


def label_levels(lm: LabelMap) -> np.ndarray:
    """Grey levels {0, 85, 170, 255} for PGM export."""
    return (lm.labels * 85).astype(np.uint8)


def boundary_overlay(m: np.ndarray, lm: LabelMap) -> np.ndarray:
    """Normalized map with label boundaries drawn at full intensity."""
    guard = flatness_guard(m)
    base = np.zeros(np.shape(m)) if guard.flat else guard.normalized * 0.8
    lab = lm.labels
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    return np.where(edge, 1.0, base)


# ---------------------------------------------------------------- metrics


def connected_components(labels: np.ndarray) -> int:
    """Total number of 4-connected regions over all labels."""
    return int(sum(ndimage.label(labels == lab)[1] for lab in np.unique(labels)))


def iou_per_class(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per-class IoU under the label permutation that maximizes the mean IoU.

    Returns the IoU for each truth class and the chosen mapping
    ``truth class -> predicted label``.
    """
    truth_labels = np.unique(truth)
    pred_labels = list(np.unique(pred))
    k = len(truth_labels)
    pool = pred_labels + [-1] * max(0, k - len(pred_labels))
    best, best_perm = None, None
    for perm in itertools.permutations(pool, k):
        ious = []
        for t, p in zip(truth_labels, perm):
            a, b = truth == t, pred == p
            union = np.logical_or(a, b).sum()
            ious.append(np.logical_and(a, b).sum() / union if union else 0.0)
        ious = np.array(ious)
        if best is None or ious.mean() > best.mean():
            best, best_perm = ious, tuple(int(p) for p in perm)
    return best, best_perm
