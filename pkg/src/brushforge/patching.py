"""Patch extraction, resizing, dataset splits and region labelling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PatchSpec:
    side_px: int
    input_side_px: int = 64
    stride_px: int | None = None

    def __post_init__(self):
        if self.side_px < 1:
            raise ValueError("side_px must be >= 1")
        if self.input_side_px < 8:
            raise ValueError("input_side_px must be >= 8")
        if self.stride_px is not None and self.stride_px < 1:
            raise ValueError("stride_px must be >= 1")

    @property
    def stride(self) -> int:
        return self.side_px if self.stride_px is None else self.stride_px


@dataclass
class Patch:
    values: np.ndarray
    painting_id: str
    artist_id: int
    grid_row: int
    grid_col: int
    side_px: int
    physical_side_mm: float
    channel: str = "height"

    def __post_init__(self):
        if not 1 <= self.artist_id <= 4:
            raise ValueError(f"artist_id must be in 1..4, got {self.artist_id}")


class RegionClass(enum.Enum):
    BACKGROUND = "background"
    FOREGROUND = "foreground"
    BORDER = "border"


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    test_painting_per_artist: dict
    seed: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def keys(ps):
            return [[p.painting_id, p.grid_row, p.grid_col] for p in ps]
        doc = {"seed": self.seed,
               "test_painting_per_artist": {str(k): v for k, v in
                                            sorted(self.test_painting_per_artist.items())},
               "train": keys(self.train), "validation": keys(self.validation),
               "test": keys(self.test), "meta": self.meta}
        return json.dumps(doc, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# grids


def grid_shape(shape, side: int, stride: int | None = None) -> tuple[int, int]:
    stride = side if stride is None else stride
    h, w = shape[:2]
    if h < side or w < side:
        raise ValueError(f"map {h}x{w} is smaller than one {side}-px patch")
    return (h - side) // stride + 1, (w - side) // stride + 1


def patch_blocks(values: np.ndarray, side: int, stride: int | None = None):
    """Raw ``side x side`` blocks on a top-left anchored grid.

    Returns ``(blocks, coords)`` where ``blocks`` has shape
    ``(n, side, side[, channels])`` and ``coords`` lists ``(row, col)``
    grid indices in row-major order.  Partial blocks at the right and
    bottom edges are dropped.
    """
    stride = side if stride is None else stride
    values = np.asarray(values)
    nr, nc = grid_shape(values.shape, side, stride)
    blocks, coords = [], []
    for r in range(nr):
        for c in range(nc):
            y, x = r * stride, c * stride
            blocks.append(values[y:y + side, x:x + side])
            coords.append((r, c))
    return np.stack(blocks), coords


def resize_patch(block: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of one ``(s, s[, C])`` block with corner-aligned sampling."""
    return resize_batch(np.asarray(block)[None], target)[0]


def _interp_axis(a: np.ndarray, target: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == target:
        return a
    if n == 1:
        return np.repeat(a, target, axis=axis)
    pos = np.linspace(0.0, n - 1.0, target)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    t = pos - i0
    shape = [1] * a.ndim
    shape[axis] = target
    t = t.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo * (1.0 - t) + hi * t


def resize_batch(blocks: np.ndarray, target: int) -> np.ndarray:
    """Resize a batch ``(n, s, s[, C])`` of square blocks to ``target`` pixels per side."""
    out = np.asarray(blocks, dtype=np.float64)
    out = _interp_axis(out, target, axis=1)
    out = _interp_axis(out, target, axis=2)
    return out


def patchify(values, spec: PatchSpec, painting_id: str = "", artist_id: int = 1,
             pitch_um: float = 50.0, channel: str = "height") -> list:
    """Cut a map into non-overlapping patches and resize each to the classifier input."""
    arr = getattr(values, "values", values)
    blocks, coords = patch_blocks(arr, spec.side_px, spec.stride)
    resized = resize_batch(blocks, spec.input_side_px)
    side_mm = spec.side_px * pitch_um / 1000.0
    return [Patch(resized[i], painting_id, artist_id, r, c, spec.side_px, side_mm, channel)
            for i, (r, c) in enumerate(coords)]


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSource:
    """One painting's channel values ready for patching."""

    painting_id: str
    artist_id: int
    values: np.ndarray
    pitch_um: float = 50.0
    channel: str = "height"


def choose_test_paintings(sources, seed: int) -> dict:
    """Seeded per-artist choice of one held-out painting."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E57]))
    by_artist = {}
    for s in sources:
        by_artist.setdefault(s.artist_id, []).append(s.painting_id)
    return {a: sorted(ids)[rng.integers(len(ids))] for a, ids in sorted(by_artist.items())}


def split_dataset(sources, spec: PatchSpec, test_paintings: dict | None = None,
                  ratio: float = 0.9, seed: int = 0) -> DatasetSplit:
    """Hold out one painting per artist for testing; split the rest ``ratio`` : 1-``ratio``."""
    sources = list(sources)
    by_artist = {}
    for s in sources:
        by_artist.setdefault(s.artist_id, []).append(s)
    for a, ss in by_artist.items():
        if len(ss) < 3:
            raise ValueError(f"artist {a} has {len(ss)} paintings; at least 3 are required")
    if test_paintings is None:
        test_paintings = choose_test_paintings(sources, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917]))
    train, val, test = [], [], []
    for a in sorted(by_artist):
        held = test_paintings[a]
        if held not in {s.painting_id for s in by_artist[a]}:
            raise ValueError(f"test painting {held!r} does not belong to artist {a}")
        pool = []
        for s in sorted(by_artist[a], key=lambda s: s.painting_id):
            patches = patchify(s.values, spec, s.painting_id, a, s.pitch_um, s.channel)
            (test if s.painting_id == held else pool).extend(patches)
        order = rng.permutation(len(pool))
        n_val = int(round((1.0 - ratio) * len(pool)))
        val.extend(pool[i] for i in order[:n_val])
        train.extend(pool[i] for i in order[n_val:])
    return DatasetSplit(train, val, test, dict(test_paintings), seed,
                        {"side_px": spec.side_px, "input_side_px": spec.input_side_px})


# ---------------------------------------------------------------------------
# regions


def foreground_fraction(mask_block: np.ndarray) -> float:
    m = np.asarray(mask_block)
    return float((m > 0).mean())


def classify_fraction(f: float, t_bg: float = 0.05, t_fg: float = 0.95) -> RegionClass:
    if f <= t_bg:
        return RegionClass.BACKGROUND
    if f >= t_fg:
        return RegionClass.FOREGROUND
    return RegionClass.BORDER


def classify_region(patch, foreground_mask: np.ndarray, t_bg: float = 0.05,
                    t_fg: float = 0.95) -> RegionClass:
    """Label a patch by the fraction of its source pixels inside the foreground.

    ``patch`` is either a :class:`Patch` (its footprint is cut from the
    full-painting ``foreground_mask``) or a raw block, in which case the
    mask must have the same shape.
    """
    mask = np.asarray(foreground_mask)
    if isinstance(patch, Patch):
        side = patch.side_px
        y, x = patch.grid_row * side, patch.grid_col * side
        if y + side > mask.shape[0] or x + side > mask.shape[1]:
            raise ValueError("mask does not cover the patch footprint")
        block = mask[y:y + side, x:x + side]
    else:
        if np.shape(patch)[:2] != mask.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match patch {np.shape(patch)}")
        block = mask
    return classify_fraction(foreground_fraction(block), t_bg, t_fg)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class PaintingRecord:
    painting_id: str
    artist_id: int
    heightmap_path: Path
    pseudocolor_path: Path | None = None
    mask_path: Path | None = None
    role_hint: str = ""


def load_manifest(path) -> list:
    """Read a corpus manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    recs = []
    for i, e in enumerate(doc.get("paintings", [])):
        try:
            pid, aid, hp = e["painting_id"], int(e["artist_id"]), e["heightmap_path"]
        except KeyError as exc:
            raise ValueError(f"manifest entry {i} lacks field {exc}") from None

        def opt(key):
            v = e.get(key)
            return (root / v) if v else None

        recs.append(PaintingRecord(pid, aid, root / hp, opt("pseudocolor_path"),
                                   opt("mask_path"), e.get("role_hint", "")))
    return recs
