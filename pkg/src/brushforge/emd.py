"""Bidimensional empirical mode decomposition and per-mode length scales.

Envelopes are built morphologically: the upper envelope is a disk dilation
of the signal smoothed by a Gaussian whose square support fits inside the
disk, the lower envelope the matching erosion.  Every smoothing tap around
a maximum then reads a dilated value at least as high as that maximum, so
the upper envelope can never dip below a local maximum (and the lower never
rises above a local minimum).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .surface_io import disk_offsets


@dataclass(frozen=True)
class SiftParams:
    max_imfs: int = 5
    sd_threshold: float = 0.2
    max_sift_iters: int = 50
    envelope_smooth_sigma_px: float | None = None

    def __post_init__(self):
        if self.max_imfs < 1:
            raise ValueError("max_imfs must be >= 1")
        if not self.sd_threshold > 0:
            raise ValueError("sd_threshold must be positive")
        if self.max_sift_iters < 1:
            raise ValueError("max_sift_iters must be >= 1")


@dataclass
class ImfStack:
    imfs: list
    residual: np.ndarray
    source_checksum: str
    radii: list = field(default_factory=list)
    sift_iterations: list = field(default_factory=list)

    def reconstruct(self) -> np.ndarray:
        out = np.array(self.residual, dtype=np.float64, copy=True)
        for imf in self.imfs:
            out += imf
        return out

    def __len__(self):
        return len(self.imfs)


@dataclass(frozen=True)
class LengthScaleEstimate:
    imf_index: int
    mean_frequency: float
    length_mm: float


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# extrema


def find_extrema(grid: np.ndarray):
    """Strict local maxima and minima over the in-grid 8-neighbourhood.

    Returns two ``(k, 2)`` integer arrays of ``(row, col)`` positions.
    Plateaus yield no extrema.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 3:
        raise ValueError("grid must be 2-D and at least 3x3")
    h, w = g.shape
    up = np.pad(g, 1, constant_values=-np.inf)
    dn = np.pad(g, 1, constant_values=np.inf)
    is_max = np.ones_like(g, dtype=bool)
    is_min = np.ones_like(g, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            sl = (slice(1 + dy, 1 + dy + h), slice(1 + dx, 1 + dx + w))
            is_max &= g > up[sl]
            is_min &= g < dn[sl]
    return np.argwhere(is_max), np.argwhere(is_min)


def extremum_spacing(maxima: np.ndarray, minima: np.ndarray, shape) -> float:
    """Median nearest-neighbour distance among maxima and among minima."""
    dists = []
    for pts in (maxima, minima):
        if len(pts) >= 2:
            d, _ = cKDTree(pts).query(pts, k=2)
            dists.append(d[:, 1])
    if dists:
        return float(np.median(np.concatenate(dists)))
    if len(maxima) and len(minima):
        d, _ = cKDTree(minima).query(maxima, k=1)
        return float(2.0 * np.min(d))
    return float(min(shape))


# ---------------------------------------------------------------------------
# envelopes


def _disk_rank_filter(a: np.ndarray, radius: int, op: str) -> np.ndarray:
    """Exact grey dilation ('max') or erosion ('min') with a Euclidean disk."""
    f1 = ndimage.maximum_filter1d if op == "max" else ndimage.minimum_filter1d
    comb = np.maximum if op == "max" else np.minimum
    h = a.shape[0]
    rows = {}
    for dy, hw in disk_offsets(radius):
        rows.setdefault(hw, []).append(dy)
    out = None
    for hw, dys in rows.items():
        r = f1(a, size=2 * hw + 1, axis=1, mode="nearest")
        rp = np.pad(r, ((radius, radius), (0, 0)), mode="edge")
        for dy in dys:
            shifted = rp[radius + dy:radius + dy + h]
            out = shifted.copy() if out is None else comb(out, shifted, out=out)
    return out


def envelope_radius(spacing: float) -> int:
    return max(1, int(np.ceil(0.5 * spacing)))


def compute_envelopes(grid: np.ndarray, extrema, radius: int | None = None,
                      smooth_sigma: float | None = None):
    """Upper and lower envelopes of ``grid``.

    ``extrema`` is the ``(maxima, minima)`` pair from :func:`find_extrema`;
    it sets the disk radius (half the median extremum spacing) unless
    ``radius`` is given.  The Gaussian smoothing defaults to
    ``sigma = radius / 2``; its square footprint has half-width
    ``floor(radius / sqrt(2))`` so that it lies inside the disk.
    """
    maxima, minima = extrema
    if len(maxima) < 1 or len(minima) < 1:
        raise ValueError("need at least one maximum and one minimum")
    g = np.asarray(grid, dtype=np.float64)
    if radius is None:
        radius = envelope_radius(extremum_spacing(maxima, minima, g.shape))
    radius = int(radius)
    sigma = 0.5 * radius if smooth_sigma is None else float(smooth_sigma)
    pad = 2 * radius
    gp = np.pad(g, pad, mode="symmetric")
    upper = _disk_rank_filter(gp, radius, "max")
    lower = _disk_rank_filter(gp, radius, "min")
    half = int(np.floor(radius / np.sqrt(2.0) + 1e-9))
    if sigma > 0 and half > 0:
        upper = ndimage.gaussian_filter(upper, sigma, radius=half, mode="nearest")
        lower = ndimage.gaussian_filter(lower, sigma, radius=half, mode="nearest")
    crop = (slice(pad, pad + g.shape[0]), slice(pad, pad + g.shape[1]))
    return upper[crop], lower[crop]


# ---------------------------------------------------------------------------
# sifting


def _sift(h: np.ndarray, params: SiftParams, min_radius: int):
    """Extract one IMF from ``h``.  Returns ``(imf, radius, iterations)`` or None."""
    maxima, minima = find_extrema(h)
    if len(maxima) < 2 or len(minima) < 2:
        return None
    radius = max(min_radius, envelope_radius(extremum_spacing(maxima, minima, h.shape)))
    cur = h
    it = 0
    for it in range(1, params.max_sift_iters + 1):
        if it > 1:
            maxima, minima = find_extrema(cur)
            if len(maxima) < 1 or len(minima) < 1:
                break
        upper, lower = compute_envelopes(cur, (maxima, minima), radius,
                                         params.envelope_smooth_sigma_px)
        nxt = cur - 0.5 * (upper + lower)
        denom = float(np.sum(cur * cur))
        sd = float(np.sum((cur - nxt) ** 2)) / denom if denom > 0 else 0.0
        cur = nxt
        if sd < params.sd_threshold:
            break
    return cur, radius, it


def decompose(grid: np.ndarray, params: SiftParams = SiftParams()) -> ImfStack:
    """Sift ``grid`` into IMFs (finest first) plus a residual.

    The residual is the working signal left after subtracting every IMF, so
    ``sum(imfs) + residual`` reproduces the input to rounding error.
    """
    src = np.asarray(grid, dtype=np.float64)
    work = src.copy()
    imfs, radii, iters = [], [], []
    min_radius = 1
    while len(imfs) < params.max_imfs and min(work.shape) >= 3:
        out = _sift(work, params, min_radius)
        if out is None:
            break
        imf, radius, it = out
        imfs.append(imf)
        radii.append(radius)
        iters.append(it)
        work = work - imf
        # each mode must be at least as coarse as the previous one
        min_radius = radius + 1
    return ImfStack(imfs, work, _checksum(src), radii, iters)


# ---------------------------------------------------------------------------
# length scales


def mean_radial_frequency(grid: np.ndarray, pitch_um: float) -> float:
    """Power-weighted mean radial spatial frequency in cycles/mm (DC excluded)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 8:
        raise ValueError("grid must be 2-D and at least 8x8")
    power = np.abs(np.fft.fft2(g)) ** 2
    d_mm = pitch_um / 1000.0
    fy = np.fft.fftfreq(g.shape[0], d=d_mm)
    fx = np.fft.fftfreq(g.shape[1], d=d_mm)
    k = np.hypot(fy[:, None], fx[None, :])
    power[0, 0] = 0.0
    total = power.sum()
    if not total > 0:
        raise ValueError("grid has no non-DC content; length scale undefined")
    return float((power * k).sum() / total)


def length_scale(grid: np.ndarray, pitch_um: float = 50.0, imf_index: int = 0) -> LengthScaleEstimate:
    f = mean_radial_frequency(grid, pitch_um)
    return LengthScaleEstimate(imf_index, f, 1.0 / f)
