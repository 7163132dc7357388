"""Synthetic brushwork paintings with per-artist texture fingerprints.

A painting is a superposition of stamped strokes.  Each stroke is an
anisotropic Gaussian ridge (or groove) whose cross-profile is modulated by
bristle striations running along the stroke.  Micro-noise and a large
paraboloid canvas bow are added on top.  Every painting also carries a
binary foreground stencil and a pseudo-colour rendering.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, stats

from .surface_io import DetrendParams, HeightMap, detrend, save_heightmap

# background: dark greens / near-black; foreground: yellows / reds
DEFAULT_PALETTES = (
    ((28, 58, 34), (236, 200, 40)),
    ((12, 22, 16), (214, 64, 36)),
    ((40, 74, 30), (244, 160, 30)),
    ((18, 40, 44), (196, 30, 52)),
)


@dataclass(frozen=True)
class ArtistProfile:
    """Statistical fingerprint of one synthetic artist.

    ``height_skew`` in [-1, 1] sets the fraction of grooves among strokes:
    ``(1 - skew) / 2``.  Positive skew gives a long tail above the mean,
    negative skew a long tail below it.
    """

    bristle_diameter_mm: float = 0.25
    stroke_width_mm: float = 2.0
    stroke_length_mm: float = 8.0
    stroke_length_sd_mm: float = 2.0
    orientation_deg: float = 0.0
    orientation_kappa: float = 2.0
    strokes_per_cm2: float = 30.0
    ridge_amplitude_um: float = 40.0
    height_skew: float = 0.0
    micro_noise_um: float = 2.0
    striation_depth: float = 0.5
    seed_salt: int = 0

    def __post_init__(self):
        for name in ("bristle_diameter_mm", "stroke_width_mm", "stroke_length_mm",
                     "ridge_amplitude_um"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.stroke_length_sd_mm < 0 or self.strokes_per_cm2 < 0 or self.micro_noise_um < 0:
            raise ValueError("spreads, densities and noise levels must be non-negative")
        if self.orientation_kappa < 0:
            raise ValueError("orientation_kappa must be >= 0")
        if not -1.0 <= self.height_skew <= 1.0:
            raise ValueError("height_skew must lie in [-1, 1]")
        if not 0.0 <= self.striation_depth <= 1.0:
            raise ValueError("striation_depth must lie in [0, 1]")


@dataclass(frozen=True)
class CanvasSpec:
    width_px: int = 600
    height_px: int = 750
    pitch_um: float = 50.0
    subject: str = "lily"
    bow_um: float = 2000.0
    palettes: tuple = DEFAULT_PALETTES
    shading: float = 0.12

    def __post_init__(self):
        if self.width_px < 64 or self.height_px < 64:
            raise ValueError("canvas must be at least 64 px in each dimension")
        if not self.pitch_um > 0:
            raise ValueError("pitch_um must be positive")
        if self.subject not in STENCILS:
            raise ValueError(f"unknown subject stencil {self.subject!r}")


@dataclass
class Painting:
    painting_id: str
    artist_id: int
    heightmap: HeightMap
    mask: np.ndarray
    color: np.ndarray


@dataclass
class Corpus:
    paintings: list
    seed: int
    profiles: tuple
    canvas: CanvasSpec = field(default_factory=CanvasSpec)

    def by_artist(self) -> dict:
        out = {}
        for p in self.paintings:
            out.setdefault(p.artist_id, []).append(p)
        return out


# ---------------------------------------------------------------------------
# stencils


def _lily_stencil(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 0.5 * (h - 1), 0.5 * (w - 1)
    r = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    r0 = 0.36 * min(h, w) * 1.25
    edge = r0 * (1.0 + 0.18 * np.cos(5 * theta))
    return (r <= edge).astype(np.uint8)


def _blank_stencil(h: int, w: int) -> np.ndarray:
    return np.zeros((h, w), dtype=np.uint8)


STENCILS = {"lily": _lily_stencil, "blank": _blank_stencil}


# ---------------------------------------------------------------------------
# generation


# the bow is specified over a full 12 x 15 cm canvas; smaller canvases see
# the same physical curvature
BOW_REFERENCE_HALF_DIAG_MM2 = 60.0 ** 2 + 75.0 ** 2


def canvas_bow(canvas: CanvasSpec) -> np.ndarray:
    """Paraboloid dome dropping ``bow_um`` from centre to corner of a 12 x 15 cm canvas."""
    h, w = canvas.height_px, canvas.width_px
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 0.5 * (h - 1), 0.5 * (w - 1)
    mm = canvas.pitch_um / 1000.0
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) * mm * mm
    return canvas.bow_um * (1.0 - r2 / BOW_REFERENCE_HALF_DIAG_MM2)


def _stamp_strokes(profile: ArtistProfile, canvas: CanvasSpec, rng) -> np.ndarray:
    h, w = canvas.height_px, canvas.width_px
    px_mm = 1000.0 / canvas.pitch_um
    area_cm2 = h * w * (canvas.pitch_um * 1e-4) ** 2
    n = rng.poisson(profile.strokes_per_cm2 * area_cm2)
    field_ = np.zeros((h, w), dtype=np.float64)
    if n == 0:
        return field_

    width = profile.stroke_width_mm * px_mm
    sigma_u = width / 4.0
    bristle = profile.bristle_diameter_mm * px_mm
    mu = np.deg2rad(profile.orientation_deg)
    groove_frac = 0.5 * (1.0 - profile.height_skew)

    # draw every random quantity up front so the stream layout is fixed
    cy = rng.uniform(-0.1 * h, 1.1 * h, n)
    cx = rng.uniform(-0.1 * w, 1.1 * w, n)
    # strokes are undirected: a von Mises draw on doubled angles
    theta = 0.5 * rng.vonmises(2.0 * mu, profile.orientation_kappa, n)
    length = np.maximum(rng.normal(profile.stroke_length_mm, profile.stroke_length_sd_mm, n),
                        0.2 * profile.stroke_length_mm) * px_mm
    sign = np.where(rng.random(n) < groove_frac, -1.0, 1.0)
    amp = profile.ridge_amplitude_um * rng.uniform(0.7, 1.3, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)

    taper = max(width / 4.0, 1.0)
    for k in range(n):
        c, s = np.cos(theta[k]), np.sin(theta[k])
        half = 0.5 * length[k] + 2.0 * taper
        ext_x = abs(c) * half + abs(s) * 2.5 * sigma_u
        ext_y = abs(s) * half + abs(c) * 2.5 * sigma_u
        y0, y1 = int(max(0, np.floor(cy[k] - ext_y))), int(min(h, np.ceil(cy[k] + ext_y) + 1))
        x0, x1 = int(max(0, np.floor(cx[k] - ext_x))), int(min(w, np.ceil(cx[k] + ext_x) + 1))
        if y0 >= y1 or x0 >= x1:
            continue
        dy = np.arange(y0, y1)[:, None] - cy[k]
        dx = np.arange(x0, x1)[None, :] - cx[k]
        along = dx * c + dy * s
        across = -dx * s + dy * c
        env_u = np.exp(-0.5 * (across / sigma_u) ** 2)
        env_v = 0.5 * (1.0 - np.tanh((np.abs(along) - 0.5 * length[k]) / taper))
        ridges = 1.0 + profile.striation_depth * np.cos(2 * np.pi * across / bristle + phase[k])
        field_[y0:y1, x0:x1] += (sign[k] * amp[k]) * env_u * env_v * ridges
    return field_


def _pseudo_color(strokes: np.ndarray, mask: np.ndarray, palette, shading: float,
                  rng) -> np.ndarray:
    bg, fg = (np.asarray(c, dtype=np.float64) for c in palette)
    jitter = rng.normal(0.0, 4.0, size=(2, 3))
    base = np.where(mask[..., None] > 0, fg + jitter[1], bg + jitter[0])
    spread = strokes.std() or 1.0
    shade = 1.0 + shading * np.tanh(strokes / (2.0 * spread))
    return np.clip(np.rint(base * shade[..., None]), 0, 255).astype(np.uint8)


def synth_painting(profile: ArtistProfile, canvas: CanvasSpec = CanvasSpec(), seed: int = 0,
                   artist_id: int = 1, painting_id: str = ""):
    """Generate ``(HeightMap, mask, pseudo-colour)`` for one painting.

    Deterministic in ``(seed, profile.seed_salt)``.
    """
    px_mm = 1000.0 / canvas.pitch_um
    scale_px = max(profile.stroke_width_mm, profile.bristle_diameter_mm * 2) * px_mm
    if scale_px > min(canvas.width_px, canvas.height_px) / 2:
        raise ValueError("canvas too small for the profile's stroke scale")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(profile.seed_salt)]))
    strokes = _stamp_strokes(profile, canvas, rng)
    noise = rng.standard_normal(strokes.shape)
    if profile.micro_noise_um > 0:
        noise = ndimage.gaussian_filter(noise, 0.7, mode="reflect")
        noise *= profile.micro_noise_um / noise.std()
        strokes = strokes + noise
    z = canvas_bow(canvas) + strokes
    mask = STENCILS[canvas.subject](canvas.height_px, canvas.width_px)
    palette = canvas.palettes[(artist_id - 1) % len(canvas.palettes)]
    color = _pseudo_color(strokes, mask, palette, canvas.shading, rng)
    meta = {"painting_id": painting_id, "artist_id": str(artist_id), "device": "synthetic"}
    return HeightMap(z, canvas.pitch_um, meta), mask, color


def painting_seed(seed: int, artist_index: int, painting_index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(artist_index), int(painting_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _make_one(args):
    profile, canvas, seed, i, k = args
    pid = f"artist{i}_p{k}"
    hmap, mask, color = synth_painting(profile, canvas, painting_seed(seed, i, k), i, pid)
    return Painting(pid, i, hmap, mask, color)


def make_corpus(profiles, canvas: CanvasSpec = CanvasSpec(), paintings_per_artist: int = 3,
                seed: int = 0, jobs: int = 1) -> Corpus:
    """Generate ``paintings_per_artist`` paintings for each profile (artists numbered from 1)."""
    profiles = tuple(profiles)
    tasks = [(p, canvas, seed, i, k) for i, p in enumerate(profiles, start=1)
             for k in range(1, paintings_per_artist + 1)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            paintings = list(ex.map(_make_one, tasks))
    else:
        paintings = [_make_one(t) for t in tasks]
    return Corpus(paintings, seed, profiles, canvas)


# ---------------------------------------------------------------------------
# presets


def preset_profiles(name: str) -> tuple:
    """Bundled four-artist profile sets.

    separable          distinct widths, densities, skews and bristles
    matched-marginals  identical height statistics; only stroke orientation differs
    striation-only     identical except bristle spacing
    palette-divergent  the separable profiles (colour palettes live on the canvas)
    """
    if name in ("separable", "palette-divergent"):
        return (
            ArtistProfile(bristle_diameter_mm=0.25, stroke_width_mm=1.2, stroke_length_mm=6.0,
                          orientation_deg=20.0, orientation_kappa=3.0, strokes_per_cm2=60.0,
                          ridge_amplitude_um=35.0, height_skew=-0.8, seed_salt=1),
            ArtistProfile(bristle_diameter_mm=0.65, stroke_width_mm=3.0, stroke_length_mm=10.0,
                          orientation_deg=100.0, orientation_kappa=2.0, strokes_per_cm2=18.0,
                          ridge_amplitude_um=55.0, height_skew=0.2, seed_salt=2),
            ArtistProfile(bristle_diameter_mm=0.25, stroke_width_mm=2.2, stroke_length_mm=4.0,
                          orientation_deg=60.0, orientation_kappa=1.0, strokes_per_cm2=40.0,
                          ridge_amplitude_um=45.0, height_skew=0.9, seed_salt=3),
            ArtistProfile(bristle_diameter_mm=0.65, stroke_width_mm=1.8, stroke_length_mm=12.0,
                          orientation_deg=150.0, orientation_kappa=4.0, strokes_per_cm2=30.0,
                          ridge_amplitude_um=30.0, height_skew=-0.2, micro_noise_um=5.0,
                          seed_salt=4),
        )
    if name == "matched-marginals":
        base = ArtistProfile(bristle_diameter_mm=0.4, stroke_width_mm=1.2, stroke_length_mm=5.0,
                             stroke_length_sd_mm=1.0, orientation_kappa=6.0,
                             strokes_per_cm2=90.0, ridge_amplitude_um=28.0, height_skew=0.0)
        return tuple(dataclasses.replace(base, orientation_deg=a, seed_salt=i)
                     for i, a in enumerate((0.0, 45.0, 90.0, 135.0), start=1))
    if name == "striation-only":
        base = ArtistProfile(stroke_width_mm=2.0, stroke_length_mm=7.0, orientation_kappa=0.0,
                             strokes_per_cm2=40.0, ridge_amplitude_um=40.0, height_skew=0.0,
                             striation_depth=0.8)
        return tuple(dataclasses.replace(base, bristle_diameter_mm=d, seed_salt=i)
                     for i, d in enumerate((0.25, 0.4, 0.55, 0.7), start=1))
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("separable", "matched-marginals", "striation-only", "palette-divergent")


# ---------------------------------------------------------------------------
# separation diagnostics


def dominant_orientations(z: np.ndarray, tile: int = 64) -> np.ndarray:
    """Per-tile dominant texture orientation in degrees [0, 180) via the structure tensor."""
    gy, gx = np.gradient(np.asarray(z, dtype=np.float64))
    h, w = z.shape
    out = []
    for y in range(0, h - tile + 1, tile):
        for x in range(0, w - tile + 1, tile):
            jx = gx[y:y + tile, x:x + tile]
            jy = gy[y:y + tile, x:x + tile]
            jxx, jyy, jxy = (jx * jx).sum(), (jy * jy).sum(), (jx * jy).sum()
            # gradient direction is normal to the strokes; rotate by 90 degrees
            ang = 0.5 * np.degrees(np.arctan2(2 * jxy, jxx - jyy)) + 90.0
            out.append(ang % 180.0)
    return np.asarray(out)


def validate_profile_separation(profiles, canvas: CanvasSpec = CanvasSpec(), seed: int = 0,
                                paintings: int = 3, threshold: float = 0.05,
                                detrend_radius: int = 100) -> list:
    """Two-sample KS statistics between every pair of profiles.

    Returns one dict per pair with ``ks_height``, ``ks_orientation`` and an
    ``indistinguishable`` flag (both statistics below ``threshold``).
    """
    profiles = list(profiles)
    heights, orients = [], []
    for i, prof in enumerate(profiles, start=1):
        hs, os_ = [], []
        for k in range(1, paintings + 1):
            hmap, _, _ = synth_painting(prof, canvas, painting_seed(seed, i, k), i)
            rel = detrend(hmap, DetrendParams(detrend_radius)).heights.astype(np.float64)
            hs.append(rel.ravel())
            os_.append(dominant_orientations(rel))
        heights.append(np.concatenate(hs))
        orients.append(np.concatenate(os_))
    report = []
    for a, b in combinations(range(len(profiles)), 2):
        ks_h = stats.ks_2samp(heights[a], heights[b]).statistic
        ks_o = stats.ks_2samp(orients[a], orients[b]).statistic
        report.append({"pair": (a + 1, b + 1), "ks_height": float(ks_h),
                       "ks_orientation": float(ks_o),
                       "indistinguishable": bool(ks_h < threshold and ks_o < threshold)})
    return report


# ---------------------------------------------------------------------------
# persistence


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write TOPO height maps, PNG masks and pseudo-colour PNGs plus ``manifest.json``."""
    out = Path(out_dir)
    pdir = out / "paintings"
    pdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in corpus.paintings:
        hpath = pdir / f"{p.painting_id}.topo"
        mpath = pdir / f"{p.painting_id}_mask.png"
        cpath = pdir / f"{p.painting_id}_color.png"
        save_heightmap(p.heightmap, hpath)
        Image.fromarray((p.mask * 255).astype(np.uint8)).save(mpath)
        Image.fromarray(p.color).save(cpath)
        entries.append({"painting_id": p.painting_id, "artist_id": p.artist_id,
                        "heightmap_path": str(hpath.relative_to(out)),
                        "pseudocolor_path": str(cpath.relative_to(out)),
                        "mask_path": str(mpath.relative_to(out)),
                        "role_hint": ""})
    manifest = {"seed": corpus.seed,
                "canvas": {k: v for k, v in dataclasses.asdict(corpus.canvas).items()},
                "profiles": [dataclasses.asdict(p) for p in corpus.profiles],
                "paintings": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
