"""Height-map containers, file formats, detrending and normalization.

Two on-disk formats are supported:

* ``TOPO`` -- the canonical lossless little-endian container::

      b"TOPO" | u32 version=1 | u32 width | u32 height | f64 pitch_um
      | width*height f32 heights (row-major)
      | u32 metadata byte-length | UTF-8 "key=value" lines

* ``PNG16`` -- single-channel 16-bit grayscale PNG plus a sidecar
  ``<name>.topo.json`` holding ``pitch_um``, ``z_lo_um`` and ``z_hi_um``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TOPO_MAGIC = b"TOPO"
TOPO_VERSION = 1
PNG16_LEVELS = 65535


class SurfaceFormatError(ValueError):
    """Raised for malformed or inconsistent height-map files."""


@dataclass(frozen=True)
class HeightMap:
    """Rectangular grid of surface heights in microns.

    ``heights`` is stored as float32, the precision of the TOPO payload, so
    that a save/load round trip is bit-exact.
    """

    heights: np.ndarray
    pitch_um: float = 50.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float32)
        if h.ndim != 2 or h.size == 0:
            raise ValueError(f"heights must be a non-empty 2-D grid, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        if not self.pitch_um > 0:
            raise ValueError(f"pitch_um must be positive, got {self.pitch_um}")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "pitch_um", float(self.pitch_um))
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})

    @property
    def width_px(self) -> int:
        return self.heights.shape[1]

    @property
    def height_px(self) -> int:
        return self.heights.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape


@dataclass(frozen=True)
class DetrendParams:
    radius_px: int = 100

    def __post_init__(self):
        if int(self.radius_px) < 1:
            raise ValueError(f"radius_px must be >= 1, got {self.radius_px}")


@dataclass(frozen=True)
class NormalizeParams:
    lo_um: float = -200.0
    hi_um: float = 300.0

    def __post_init__(self):
        if not self.hi_um > self.lo_um:
            raise ValueError(f"hi_um ({self.hi_um}) must exceed lo_um ({self.lo_um})")


@dataclass(frozen=True)
class NormalizedMap:
    """Unitless map clamped to [0, 1]."""

    values: np.ndarray
    source_ref: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).copy()
        if v.ndim != 2:
            raise ValueError("values must be 2-D")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("normalized values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# file formats


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.stem + ".topo.json")


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be encoded as key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise SurfaceFormatError(f"bad metadata line {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def save_heightmap(hmap: HeightMap, path, format: str = "topo",
                   z_range: tuple[float, float] = (-200.0, 300.0)) -> None:
    """Write ``hmap`` as TOPO (lossless) or PNG16 (quantized to ``z_range``)."""
    path = Path(path)
    heights = np.asarray(hmap.heights)
    if not np.all(np.isfinite(heights)):
        raise ValueError("cannot save non-finite heights")
    fmt = format.lower()
    if fmt == "topo":
        h, w = heights.shape
        meta = _encode_meta(hmap.meta)
        with open(path, "wb") as fh:
            fh.write(TOPO_MAGIC)
            fh.write(struct.pack("<IIId", TOPO_VERSION, w, h, hmap.pitch_um))
            fh.write(heights.astype("<f4").tobytes(order="C"))
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
    elif fmt == "png16":
        z_lo, z_hi = map(float, z_range)
        if not z_hi > z_lo:
            raise ValueError("z_range must be increasing")
        scaled = (heights.astype(np.float64) - z_lo) / (z_hi - z_lo)
        levels = np.rint(np.clip(scaled, 0.0, 1.0) * PNG16_LEVELS).astype(np.uint16)
        Image.fromarray(levels).save(path, format="PNG")
        sidecar = {"pitch_um": hmap.pitch_um, "z_lo_um": z_lo, "z_hi_um": z_hi,
                   "meta": dict(hmap.meta)}
        _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    else:
        raise ValueError(f"unknown format {format!r}; expected 'topo' or 'png16'")


def _load_topo(path: Path) -> HeightMap:
    raw = path.read_bytes()
    header = 4 + struct.calcsize("<IIId")
    if len(raw) < header or raw[:4] != TOPO_MAGIC:
        raise SurfaceFormatError(f"{path}: not a TOPO file")
    version, w, h, pitch = struct.unpack_from("<IIId", raw, 4)
    if version != TOPO_VERSION:
        raise SurfaceFormatError(f"{path}: unsupported TOPO version {version}")
    n = w * h
    end = header + 4 * n
    if w == 0 or h == 0 or len(raw) < end + 4:
        raise SurfaceFormatError(f"{path}: payload shorter than declared {w}x{h} grid")
    heights = np.frombuffer(raw, dtype="<f4", count=n, offset=header).reshape(h, w)
    (mlen,) = struct.unpack_from("<I", raw, end)
    if len(raw) != end + 4 + mlen:
        raise SurfaceFormatError(f"{path}: payload size does not match header")
    meta = _decode_meta(raw[end + 4:])
    return HeightMap(heights.astype(np.float32), pitch, meta)


def _load_png16(path: Path) -> HeightMap:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise SurfaceFormatError(f"{path}: missing sidecar {sidecar.name}")
    info = json.loads(sidecar.read_text())
    try:
        pitch, z_lo, z_hi = float(info["pitch_um"]), float(info["z_lo_um"]), float(info["z_hi_um"])
    except KeyError as exc:
        raise SurfaceFormatError(f"{sidecar}: missing field {exc}") from None
    with Image.open(path) as img:
        levels = np.asarray(img).astype(np.float64)
    if levels.ndim != 2:
        raise SurfaceFormatError(f"{path}: expected single-channel image")
    heights = z_lo + levels / PNG16_LEVELS * (z_hi - z_lo)
    return HeightMap(heights, pitch, info.get("meta", {}))


def load_heightmap(path) -> HeightMap:
    """Load a TOPO or PNG16 height map, dispatching on the file contents."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:4] == TOPO_MAGIC:
        return _load_topo(path)
    if head == b"\x89PNG\r\n\x1a\n":
        return _load_png16(path)
    raise SurfaceFormatError(f"{path}: unrecognized height-map format")


# ---------------------------------------------------------------------------
# processing


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    """(dy, half_width) pairs describing the Euclidean disk of ``radius`` pixels."""
    r = int(radius)
    out = []
    for dy in range(-r, r + 1):
        out.append((dy, int(np.floor(np.sqrt(r * r - dy * dy) + 1e-9))))
    return out


def _disk_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum of ``a`` over a disk around every pixel; out-of-grid pixels count as 0."""
    h, w = a.shape
    # row prefix sums with a leading zero column
    cs = np.zeros((h, w + 1), dtype=np.float64)
    np.cumsum(a, axis=1, out=cs[:, 1:])
    cols = np.arange(w)
    out = np.zeros((h, w), dtype=np.float64)
    for dy, hw in disk_offsets(radius):
        lo = np.clip(cols - hw, 0, w)
        hi = np.clip(cols + hw + 1, 0, w)
        r0, r1 = max(0, -dy), min(h, h - dy)
        if r0 >= r1:
            continue
        src = cs[r0 + dy:r1 + dy]
        out[r0:r1] += src[:, hi] - src[:, lo]
    return out


def disk_mean_filter(a: np.ndarray, radius: int) -> np.ndarray:
    """Exact mean over a Euclidean disk, renormalized by in-grid pixel count."""
    a = np.asarray(a, dtype=np.float64)
    total = _disk_sum(a, radius)
    count = _disk_sum(np.ones_like(a), radius)
    return total / count


def detrend(hmap: HeightMap, params: DetrendParams = DetrendParams()) -> HeightMap:
    """Subtract the disk mean-filtered canvas profile from the raw heights."""
    z = hmap.heights.astype(np.float64)
    # work relative to the grid mean so large offsets do not cost precision
    z = z - z.mean()
    rel = z - disk_mean_filter(z, params.radius_px)
    meta = dict(hmap.meta)
    meta["detrend_radius_px"] = str(params.radius_px)
    return HeightMap(rel, hmap.pitch_um, meta)


def normalize(hmap: HeightMap | np.ndarray, params: NormalizeParams = NormalizeParams(),
              source_ref: str | None = None) -> NormalizedMap:
    """Map relative heights linearly so ``lo_um -> 0`` and ``hi_um -> 1``, clamping outside."""
    if isinstance(hmap, HeightMap):
        z = hmap.heights.astype(np.float64)
        ref = hmap.meta.get("painting_id", "") if source_ref is None else source_ref
    else:
        z = np.asarray(hmap, dtype=np.float64)
        ref = source_ref or ""
    v = np.clip((z - params.lo_um) / (params.hi_um - params.lo_um), 0.0, 1.0)
    return NormalizedMap(v, ref)
