"""Deterministic synthetic road scenes with pixel-exact masks.

Every scene is a perspective road: a trapezoid that narrows from the bottom
edge toward a horizon line, optionally bent sideways by a curvature term,
drawn over sky and terrain bands with a dashed center marking and a few
off-road distractor rectangles. The mask is 1 exactly on the road region
(marking included), 0 elsewhere.

Geometry, for image height H and width W. The horizon row is
hz = round(horizon_frac * H); road rows are y = hz .. H-1 with depth
parameter t(y) = (y - hz) / (H - 1 - hz), so t = 0 at the horizon and 1 at
the bottom. The bottom edge width is bottom_frac * W and the width at the
horizon is half that (TOP_RATIO), interpolated linearly in t. The center
line is W/2 + curve * W * (1 - t)^2, so curvature bends the far end while
the bottom stays anchored; with the default ranges the road never leaves
the frame. A pixel in row y with column index j is road iff
|j + 0.5 - center(y)| <= halfwidth(y).

Randomness is two independent `rng.Stream`s per scene: stream
(seed, index, 0) drives geometry and colors, stream (seed, index, 1)
drives pixel noise. The geometry draw order is part of the format, since
reordering it changes every dataset byte. In order: bottom fraction,
horizon fraction, curvature, road/terrain/sky brightness, dash length,
dash phase, distractor count, then six draws per distractor (height,
width, row, column, shade, tint). Distractors whose rectangle touches the
road are skipped, not redrawn, so the stream position never depends on
earlier accept/reject outcomes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .netpbm import read_pnm, write_pnm
from .rng import Stream

# top (horizon) road width as a fraction of the bottom width
TOP_RATIO = 0.5

# fixed palette: per-channel multipliers applied to a drawn brightness
_SKY_TINT = (0.85, 0.95, 1.05)
_TERRAIN_TINT = (0.90, 1.05, 0.75)
_MARKING_COLOR = (0.85, 0.85, 0.80)
_DISTRACTOR_TINTS = ((1.00, 0.45, 0.40), (0.45, 0.60, 1.00), (0.95, 0.90, 0.35))


def _check_frac_range(name: str, r: tuple[float, float]) -> None:
    lo, hi = r
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"{name} range must satisfy 0 < lo <= hi < 1, got {r}")


@dataclass(frozen=True)
class SceneParams:
    """Knobs for the generator; defaults produce the standard datasets."""

    size: tuple[int, int] = (64, 64)
    bottom_range: tuple[float, float] = (0.3, 0.7)
    horizon_range: tuple[float, float] = (0.3, 0.5)
    curvature_range: tuple[float, float] = (-0.25, 0.25)
    noise_sigma: float = 0.02
    distractor_range: tuple[int, int] = (0, 4)
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h < 8 or w < 8:
            raise ValueError(f"scene size must be at least 8x8, got {self.size}")
        _check_frac_range("bottom_range", self.bottom_range)
        _check_frac_range("horizon_range", self.horizon_range)
        clo, chi = self.curvature_range
        if clo > chi or max(abs(clo), abs(chi)) > 0.5:
            raise ValueError(
                f"curvature range must be ordered within [-0.5, 0.5], got {self.curvature_range}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        dlo, dhi = self.distractor_range
        if not (0 <= dlo <= dhi):
            raise ValueError(f"bad distractor range {self.distractor_range}")


def _road_rows(h: int, w: int, bottom: float, horizon: float, curve: float):
    """Per-row (center, halfwidth) plus the horizon row index."""
    hz = int(round(horizon * h))
    hz = min(max(hz, 1), h - 2)
    t = (np.arange(h, dtype=np.float64) - hz) / float(h - 1 - hz)
    w_bot = bottom * w
    half = 0.5 * (TOP_RATIO * w_bot + (1.0 - TOP_RATIO) * w_bot * t)
    center = 0.5 * w + curve * w * (1.0 - t) ** 2
    return hz, center, half, t


def generate_scene(p: SceneParams, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One scene: float32 image (3, H, W) in [0, 1] and uint8 mask (H, W)."""
    h, w = p.size
    geo = Stream(p.seed, index, 0)
    noise = Stream(p.seed, index, 1)

    bottom = geo.uniform(*p.bottom_range)
    horizon = geo.uniform(*p.horizon_range)
    curve = geo.uniform(*p.curvature_range)
    b_road = geo.uniform(0.22, 0.38)
    b_terrain = geo.uniform(0.55, 0.75)
    b_sky = geo.uniform(0.72, 0.92)
    dash_len = geo.integers(3, 6)
    dash_phase = geo.integers(0, 2 * dash_len - 1)
    n_distract = geo.integers(*p.distractor_range)

    hz, center, half, t = _road_rows(h, w, bottom, horizon, curve)
    cols = np.arange(w, dtype=np.float64) + 0.5
    offset = np.abs(cols[None, :] - center[:, None])
    road = (offset <= half[:, None]) & (np.arange(h)[:, None] >= hz)
    mask = road.astype(np.uint8)

    img = np.empty((3, h, w), dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)[:, None]

    # sky: slightly darker at the top, brightening toward the horizon
    sky_ramp = 0.92 + 0.08 * rows / max(hz - 1, 1)
    # terrain: full brightness at the horizon, fading toward the viewer
    terrain_ramp = 1.0 - 0.10 * np.clip(t, 0.0, 1.0)[:, None]
    above = rows < hz
    for c in range(3):
        img[c] = np.where(
            above,
            _SKY_TINT[c] * b_sky * sky_ramp,
            _TERRAIN_TINT[c] * b_terrain * terrain_ramp,
        )

    # road surface: neutral gray, a touch brighter near the viewer
    road_shade = b_road * (1.0 + 0.08 * (t[:, None] - 0.5))
    for c in range(3):
        img[c] = np.where(road, road_shade, img[c])

    # dashed center marking; still labeled road
    mark_half = np.maximum(0.08 * half, 0.45)
    dash_on = ((np.arange(h) + dash_phase) // dash_len) % 2 == 0
    marking = road & (offset <= mark_half[:, None]) & dash_on[:, None]
    for c in range(3):
        img[c] = np.where(marking, _MARKING_COLOR[c], img[c])

    for _ in range(n_distract):
        dh = geo.integers(2, 6)
        dw = geo.integers(2, 6)
        y0 = geo.integers(0, h - dh)
        x0 = geo.integers(0, w - dw)
        shade = geo.uniform(0.05, 0.95)
        tint = _DISTRACTOR_TINTS[geo.integers(0, 2)]
        if mask[y0 : y0 + dh, x0 : x0 + dw].any():
            continue
        for c in range(3):
            img[c, y0 : y0 + dh, x0 : x0 + dw] = tint[c] * shade

    if p.noise_sigma > 0:
        img += p.noise_sigma * noise.normals(3 * h * w).reshape(3, h, w)
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32), mask


def generate_dataset(
    p: SceneParams, count: int, out_dir: str | os.PathLike
) -> list[tuple[str, str]]:
    """Write count scenes as img_%05d.ppm / mask_%05d.pgm plus manifest.txt.

    Returns the (image, mask) filename pairs, which is also the manifest
    content. Regenerating with the same params yields a byte-identical tree.
    """
    if count < 0:
        raise ValueError(f"dataset count must be >= 0, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        img, mask = generate_scene(p, i)
        img_name = f"img_{i:05d}.ppm"
        mask_name = f"mask_{i:05d}.pgm"
        rgb = np.rint(img.transpose(1, 2, 0).astype(np.float64) * 255.0).astype(np.uint8)
        write_pnm(out / img_name, rgb)
        write_pnm(out / mask_name, mask * np.uint8(255))
        pairs.append((img_name, mask_name))
    lines = "".join(f"{a} {b}\n" for a, b in pairs)
    (out / "manifest.txt").write_text(lines, encoding="ascii")
    return pairs


def load_dataset(
    data_dir: str | os.PathLike,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a generated dataset back: images (N,3,H,W) float32, masks (N,H,W) uint8.

    The manifest drives the listing; masks must be strictly 0/255 samples.
    """
    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"no manifest.txt under {root}")
    images, masks, names = [], [], []
    for lineno, line in enumerate(manifest.read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"manifest line {lineno} is not an image/mask pair: {line!r}")
        img = read_pnm(root / parts[0])
        if img.ndim != 3:
            raise FormatError(f"{parts[0]} is not a color image")
        raw = read_pnm(root / parts[1])
        if raw.ndim != 2:
            raise FormatError(f"{parts[1]} is not a grayscale mask")
        if not np.isin(raw, (0, 255)).all():
            raise FormatError(f"{parts[1]} has mask samples other than 0/255")
        if raw.shape != img.shape[:2]:
            raise DimensionError(
                f"manifest line {lineno}: image {img.shape[:2]} vs mask {raw.shape}"
            )
        images.append(img.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0))
        masks.append((raw == 255).astype(np.uint8))
        names.append(parts[0])
    if not images:
        raise FormatError(f"manifest under {root} lists no samples")
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise DimensionError(f"dataset mixes image shapes: {sorted(shapes)}")
    return np.stack(images), np.stack(masks), names
