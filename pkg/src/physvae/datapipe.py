"""Micrograph I/O, patch extraction and synthetic ground-truth micrographs.

File formats
------------
PVTN tensor container (little-endian)::

    b"PVTN" | version u32 (=1) | dtype u8 (1 = f64) | ndim u32 | shape u32 * ndim | payload

PGM images are binary P5 with maxval 255 (u8) or 65535 (big-endian u16);
a value ``v`` in [0, 1] is stored as ``round(v * maxval)``.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"PVTN"
TENSOR_VERSION = 1
DTYPE_F64 = 1
FLAT_PATCH_RANGE = 1e-8


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Micrograph:
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"micrograph must be 2D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("micrograph contains non-finite values")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("micrograph values must lie in [0, 1]")


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, s*s)
    coords: np.ndarray  # (N, 2) int grid indices (row, col), row-major
    grid_shape: tuple[int, int]
    patch_side: int
    stride: int

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class SyntheticTruth:
    micrograph: Micrograph
    phase_mask: np.ndarray  # at patch-grid resolution
    n_phases: int
    pixel_mask: np.ndarray  # at image resolution
    meta: dict


# --------------------------------------------------------------- patches


def grid_shape_for(image_shape: tuple[int, int], s: int, stride: int) -> tuple[int, int]:
    rows, cols = image_shape
    return (rows - s) // stride + 1, (cols - s) // stride + 1


def normalize_patch(p: np.ndarray) -> np.ndarray:
    lo, hi = p.min(), p.max()
    if hi - lo < FLAT_PATCH_RANGE:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


def extract_patches(m: Micrograph | np.ndarray, s: int = 16, stride: int = 2) -> PatchSet:
    """Sliding s*s windows at offsets (i*stride, j*stride), each min-max normalized."""
    pixels = m.pixels if isinstance(m, Micrograph) else np.asarray(m, dtype=np.float64)
    if s < 3:
        raise ValueError(f"patch side must be >= 3, got {s}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows, cols = pixels.shape
    if rows < s + stride or cols < s + stride:
        raise ValueError(
            f"image {pixels.shape} too small for a 2x2 patch grid with side {s}, stride {stride}"
        )
    gh, gw = grid_shape_for(pixels.shape, s, stride)
    windows = np.lib.stride_tricks.sliding_window_view(pixels, (s, s))[::stride, ::stride]
    windows = windows[:gh, :gw].reshape(gh * gw, s * s)
    lo = windows.min(axis=1, keepdims=True)
    rng = windows.max(axis=1, keepdims=True) - lo
    flat = rng < FLAT_PATCH_RANGE
    patches = np.where(flat, 0.0, (windows - lo) / np.where(flat, 1.0, rng))
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return PatchSet(patches, coords, (gh, gw), s, stride)


def grid_majority(pixel_labels: np.ndarray, s: int, stride: int, n_labels: int) -> np.ndarray:
    """Majority label of every patch window (ties go to the smaller label)."""
    gh, gw = grid_shape_for(pixel_labels.shape, s, stride)
    counts = np.zeros((n_labels, gh, gw))
    for lab in range(n_labels):
        windows = np.lib.stride_tricks.sliding_window_view(
            (pixel_labels == lab).astype(np.float64), (s, s)
        )[::stride, ::stride][:gh, :gw]
        counts[lab] = windows.sum(axis=(2, 3))
    return np.argmax(counts, axis=0).astype(np.int64)


# ------------------------------------------------------------ synthetic data


def lattice_texture(
    shape: tuple[int, int],
    freq: float,
    theta_deg: float,
    phase: tuple[float, float] = (0.0, 0.0),
    sharpness: float = 2.0,
) -> np.ndarray:
    """Square lattice of bright spots: ((1+cos a)(1+cos b)/4) ** sharpness.

    ``a``, ``b`` are phases along two orthogonal wave vectors of frequency
    ``freq`` (cycles per pixel) rotated by ``theta_deg``.
    """
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    th = np.deg2rad(theta_deg)
    u = np.cos(th) * cols + np.sin(th) * rows
    v = -np.sin(th) * cols + np.cos(th) * rows
    a = 2.0 * np.pi * freq * u + phase[0]
    b = 2.0 * np.pi * freq * v + phase[1]
    return (((1.0 + np.cos(a)) * (1.0 + np.cos(b))) / 4.0) ** sharpness


def boundary_curve(y: np.ndarray, side: int, amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Column of the phase boundary at row(s) ``y``: a low-order Fourier curve."""
    y = np.asarray(y, dtype=np.float64)
    x = np.full_like(y, 0.5 * side)
    for k, (a, p) in enumerate(zip(amps, phases), start=1):
        x = x + side * a * np.sin(2.0 * np.pi * k * y / side + p)
    return x


def curve_length(side: int, amps: np.ndarray, phases: np.ndarray, n: int = 20001) -> float:
    y = np.linspace(0.0, side, n)
    x = boundary_curve(y, side, amps, phases)
    return float(np.sum(np.hypot(np.diff(x), np.diff(y))))


# lattice periods of 12, 10, 8 and 14 px: at least one full cell fits a 16 px patch
DEFAULT_TEXTURES = (
    (1.0 / 12.0, 0.0),
    (1.0 / 10.0, 30.0),
    (1.0 / 8.0, 15.0),
    (1.0 / 14.0, 45.0),
)


def _finish(img: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def synth_two_phase(
    seed: int = 0,
    side: int = 256,
    textures=DEFAULT_TEXTURES[:2],
    noise: float = 0.0,
    sharpness: float = 4.0,
    boundary_amp: float = 0.08,
    boundary_order: int = 3,
    patch_side: int = 16,
    stride: int = 2,
) -> SyntheticTruth:
    """Two lattices split by a smooth random curve; phase 0 lies left of it."""
    if side < 128:
        raise ValueError(f"side must be >= 128, got {side}")
    rng = np.random.default_rng(seed)
    k = np.arange(1, boundary_order + 1)
    amps = rng.uniform(-boundary_amp, boundary_amp, boundary_order) / k
    phases = rng.uniform(0.0, 2.0 * np.pi, boundary_order)
    lat_phases = rng.uniform(0.0, 2.0 * np.pi, (2, 2))
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    mask = (cols >= boundary_curve(rows + 0.5, side, amps, phases)).astype(np.int64)
    tex = [
        lattice_texture((side, side), f, th, tuple(lat_phases[i]), sharpness)
        for i, (f, th) in enumerate(textures[:2])
    ]
    clean = np.where(mask == 0, tex[0], tex[1])
    img = _finish(clean, noise, rng)
    meta = {
        "kind": "two-phase",
        "seed": int(seed),
        "side": int(side),
        "noise": float(noise),
        "textures": [[float(f), float(t)] for f, t in textures[:2]],
        "boundary_amps": amps.tolist(),
        "boundary_phases": phases.tolist(),
        "lattice_phases": lat_phases.tolist(),
        "boundary_length": curve_length(side, amps, phases),
        "patch_side": patch_side,
        "stride": stride,
    }
    return SyntheticTruth(
        Micrograph(img, f"synth_two_phase(seed={seed})"),
        grid_majority(mask, patch_side, stride, 2),
        2,
        mask,
        meta,
    )


def synth_multiphase(
    seed: int = 0,
    side: int = 256,
    n_phases: int = 3,
    textures=DEFAULT_TEXTURES,
    noise: float = 0.0,
    sharpness: float = 4.0,
    warp: float = 12.0,
    patch_side: int = 16,
    stride: int = 2,
) -> SyntheticTruth:
    """Smooth Voronoi-like regions, one lattice texture per region."""
    if side < 128:
        raise ValueError(f"side must be >= 128, got {side}")
    if not 3 <= n_phases <= 4:
        raise ValueError(f"n_phases must be 3 or 4, got {n_phases}")
    if len(textures) < n_phases:
        raise ValueError("need one texture per phase")
    rng = np.random.default_rng(seed)
    # seeds spread around the centre so every region is large
    angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(n_phases) / n_phases
    radius = side * rng.uniform(0.25, 0.35, n_phases)
    centers = side / 2 + np.stack([radius * np.sin(angles), radius * np.cos(angles)], axis=1)
    rows, cols = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")
    dist = np.empty((n_phases, side, side))
    for i in range(n_phases):
        wf = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / side
        wp = rng.uniform(0, 2 * np.pi, 2)
        bump = warp * np.sin(wf[0] * rows + wp[0]) * np.cos(wf[1] * cols + wp[1])
        dist[i] = np.hypot(rows - centers[i, 0], cols - centers[i, 1]) + bump
    mask = np.argmin(dist, axis=0).astype(np.int64)
    lat_phases = rng.uniform(0.0, 2.0 * np.pi, (n_phases, 2))
    clean = np.zeros((side, side))
    for i in range(n_phases):
        f, th = textures[i]
        clean = np.where(
            mask == i, lattice_texture((side, side), f, th, tuple(lat_phases[i]), sharpness), clean
        )
    img = _finish(clean, noise, rng)
    meta = {
        "kind": "multiphase",
        "seed": int(seed),
        "side": int(side),
        "n_phases": int(n_phases),
        "noise": float(noise),
        "textures": [[float(f), float(t)] for f, t in textures[:n_phases]],
        "centers": centers.tolist(),
        "patch_side": patch_side,
        "stride": stride,
    }
    return SyntheticTruth(
        Micrograph(img, f"synth_multiphase(seed={seed}, n={n_phases})"),
        grid_majority(mask, patch_side, stride, n_phases),
        n_phases,
        mask,
        meta,
    )


def mask_boundary_length(mask: np.ndarray) -> float:
    """Length of a left/right two-phase boundary traced row by row.

    Uses the first phase-1 column of every row as the boundary position and
    sums the polyline segment lengths.
    """
    mask = np.asarray(mask)
    xs = np.array([np.argmax(row > 0) if row.any() else row.size for row in mask], dtype=np.float64)
    return float(np.sum(np.hypot(np.diff(xs), 1.0)) + 1.0)


# --------------------------------------------------------------------- I/O


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<IBI", TENSOR_VERSION, DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""
    if data[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset)
    pos = offset + 4
    if len(data) < pos + 9:
        raise FormatError("truncated tensor header", len(data))
    version, dtype, ndim = struct.unpack_from("<IBI", data, pos)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", pos)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}", pos + 4)
    pos += 9
    if len(data) < pos + 4 * ndim:
        raise FormatError("truncated tensor shape", len(data))
    shape = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) < pos + nbytes:
        raise FormatError("truncated tensor payload", len(data))
    arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64)
    return arr.reshape(shape), pos + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    _atomic_write(path, tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = tensor_from_bytes(data)
    if end != len(data):
        raise FormatError("trailing bytes after tensor payload", end)
    return arr


def write_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Write [0, 1] values as binary P5 (values outside are clipped)."""
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    body = q.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    _atomic_write(path, head + body)


def write_pgm_levels(path, levels: np.ndarray) -> None:
    """Write integer grey levels 0..255 verbatim."""
    levels = np.asarray(levels)
    head = f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, head + levels.astype(np.uint8).tobytes())


def _pgm_tokens(data: bytes, n: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tok = data[start:pos]
        if len(tokens) == 0:
            tokens.append(tok)
        else:
            try:
                tokens.append(int(tok))
            except ValueError:
                raise FormatError(f"bad PGM header token {tok!r}", start) from None
    return tokens, pos + 1  # single whitespace byte after maxval


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Integer samples and maxval of a P5 file."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError("bad PGM magic (expected P5)", 0)
    (_, width, height, maxval), pos = _pgm_tokens(data, 4)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported PGM maxval {maxval}", pos - 1)
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    need = width * height * np.dtype(dtype).itemsize
    if len(data) < pos + need:
        raise FormatError("truncated PGM raster", len(data))
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.int64), maxval


def read_pgm(path) -> np.ndarray:
    raw, maxval = read_pgm_raw(path)
    return raw / float(maxval)


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def save_patchset(prefix, ps: PatchSet) -> None:
    """Write ``<prefix>.pvtn`` (N x s*s patches), ``<prefix>_coords.csv`` and ``<prefix>.json``."""
    prefix = str(prefix)
    write_tensor(prefix + ".pvtn", ps.patches)
    write_csv(
        prefix + "_coords.csv",
        ["index", "row", "col"],
        [[i, int(r), int(c)] for i, (r, c) in enumerate(ps.coords)],
    )
    meta = {"grid_shape": list(ps.grid_shape), "patch_side": ps.patch_side, "stride": ps.stride}
    _atomic_write(prefix + ".json", (json.dumps(meta, sort_keys=True) + "\n").encode())


def load_patchset(prefix) -> PatchSet:
    prefix = str(prefix)
    patches = read_tensor(prefix + ".pvtn")
    try:
        meta = json.loads(Path(prefix + ".json").read_text())
        gh, gw = (int(v) for v in meta["grid_shape"])
        s, stride = int(meta["patch_side"]), int(meta["stride"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad patch-set metadata: {exc}", 0) from None
    _, rows = read_csv(prefix + "_coords.csv")
    coords = np.array([[int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 2)
    if patches.ndim != 2 or patches.shape != (gh * gw, s * s) or len(coords) != gh * gw:
        raise FormatError("patch tensor does not match coords CSV", 0)
    return PatchSet(patches, coords, (gh, gw), s, stride)
