"""Glyph rasters: ingestion, binarization and deterministic synthetic glyphs.

Rasters are 8-bit grayscale with dark ink on a light background. Templates
are organised as an ``N x F`` grid (template x font) of equally sized rasters.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .numeric import prng

DEFAULT_SIDE = 96

# Synthetic glyphs live on a coarse lattice; strokes are axis-aligned bars.
_LATTICE = 12
_STROKES_PER_GLYPH = 4


class TemplateGridError(ValueError):
    """Manifest does not describe a complete, usable template grid."""


class GlyphDecodeError(ValueError):
    """An image file could not be decoded as 8-bit grayscale."""


@dataclass(frozen=True)
class GlyphRaster:
    pixels: np.ndarray  # (height, width) uint8, 0 = ink

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"raster must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("raster intensities must lie in [0, 255]")
            px = np.rint(px).astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BinaryGlyph:
    mask: np.ndarray  # (height, width) bool, True = ink

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]


@dataclass(frozen=True)
class TemplateSet:
    template_ids: list
    fonts: list
    rasters: np.ndarray  # (N, F, side, side) uint8

    def __post_init__(self):
        n, f = len(self.template_ids), len(self.fonts)
        if n < 2:
            raise TemplateGridError("need at least two templates")
        if f < 1:
            raise TemplateGridError("need at least one font")
        if self.rasters.ndim != 4 or self.rasters.shape[:2] != (n, f):
            raise TemplateGridError(
                f"raster grid shape {self.rasters.shape[:2]} does not match {n} templates x {f} fonts")

    @property
    def n(self):
        return len(self.template_ids)

    @property
    def side(self):
        return self.rasters.shape[2]

    def raster(self, i, f):
        return GlyphRaster(self.rasters[i, f])


# ---------------------------------------------------------------------------
# resizing and binarization
# ---------------------------------------------------------------------------

def resize_bilinear(pixels, height, width=None):
    """Corner-aligned bilinear resize returning float64 values.

    Output corners map exactly onto input corners, so resizing to the
    current size is the identity.
    """
    src = np.asarray(pixels, dtype=np.float64)
    width = height if width is None else width
    h, w = src.shape
    if (h, w) == (height, width):
        return src.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bottom * fy[:, None]


def resize_raster(raster, side):
    out = resize_bilinear(raster.pixels, side, side)
    return GlyphRaster(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def otsu_threshold(pixels):
    """Otsu threshold ``t`` such that ink is ``pixels < t``.

    Ties go to the lowest threshold. A single-valued image returns that
    value, which yields an empty foreground.
    """
    px = np.asarray(pixels)
    hist = np.bincount(px.ravel(), minlength=256).astype(np.float64)
    values = np.flatnonzero(hist)
    if len(values) == 1:
        return int(values[0])
    levels = np.arange(256, dtype=np.float64)
    n0 = np.cumsum(hist)[:-1]  # count below t for t = 1..255
    s0 = np.cumsum(hist * levels)[:-1]
    total_n, total_s = hist.sum(), (hist * levels).sum()
    n1, s1 = total_n - n0, total_s - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (n0 * s1 - n1 * s0) ** 2 / (n0 * n1)
    score[(n0 == 0) | (n1 == 0)] = -1.0
    return int(np.argmax(score)) + 1


def binarize(raster, policy="otsu"):
    """Foreground mask of ``raster``.

    ``policy`` is ``"otsu"`` or an integer threshold; ink is every pixel with
    intensity strictly below the threshold.
    """
    if isinstance(policy, str):
        if policy != "otsu":
            raise ValueError(f"unknown binarization policy {policy!r}")
        threshold = otsu_threshold(raster.pixels)
    else:
        threshold = int(policy)
    return BinaryGlyph(raster.pixels < threshold)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_image(path):
    """Decode a PGM (P5) or 8-bit grayscale PNG file into a raster."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise GlyphDecodeError(f"cannot read {path}: {exc}") from exc
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode == "1":
                img = img.convert("L")
            if img.mode != "L":
                raise GlyphDecodeError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
            pixels = np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise GlyphDecodeError(f"cannot decode {path}: {exc}") from exc
    return GlyphRaster(pixels)


def write_pgm(path, raster):
    header = f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.pixels.tobytes())


def parse_manifest(text):
    """Parse manifest text into ``(template_id, font_id, path, invert)`` rows.

    One cell per line, tab separated: ``template  font  relative_path``,
    optionally followed by a fourth column ``invert`` for light-on-dark
    rasters. Blank lines and ``#`` comments are ignored.
    """
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4) or not all(p.strip() for p in parts[:3]):
            raise TemplateGridError(f"manifest line {lineno}: expected 3 or 4 tab-separated fields")
        invert = False
        if len(parts) == 4:
            flag = parts[3].strip()
            if flag not in ("", "invert"):
                raise TemplateGridError(f"manifest line {lineno}: unknown flag {flag!r}")
            invert = flag == "invert"
        rows.append((parts[0].strip(), parts[1].strip(), parts[2].strip(), invert))
    return rows


def load_template_set(root, manifest, side=DEFAULT_SIDE):
    """Load the template grid described by ``manifest`` relative to ``root``."""
    root = Path(root)
    manifest_path = Path(manifest)
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = root / manifest_path
    rows = parse_manifest(manifest_path.read_text(encoding="utf-8"))

    template_ids, fonts, cells = [], [], {}
    for tid, fid, rel, invert in rows:
        if tid not in template_ids:
            template_ids.append(tid)
        if fid not in fonts:
            fonts.append(fid)
        if (tid, fid) in cells:
            raise TemplateGridError(f"duplicate manifest cell ({tid}, {fid})")
        cells[(tid, fid)] = (rel, invert)
    if len(template_ids) < 2:
        raise TemplateGridError("need at least two templates")

    grid = np.empty((len(template_ids), len(fonts), side, side), dtype=np.uint8)
    for i, tid in enumerate(template_ids):
        for j, fid in enumerate(fonts):
            if (tid, fid) not in cells:
                raise TemplateGridError(f"incomplete template grid: no cell for ({tid}, {fid})")
            rel, invert = cells[(tid, fid)]
            path = root / rel
            if not path.is_file():
                raise TemplateGridError(f"incomplete template grid: missing file {path} for ({tid}, {fid})")
            raster = read_image(path)
            if invert:
                raster = GlyphRaster(255 - raster.pixels)
            grid[i, j] = resize_raster(raster, side).pixels
    return TemplateSet(template_ids, fonts, grid)


def write_template_set(tset, root):
    """Write ``tset`` as PGM files plus ``manifest.tsv`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# template\tfont\tpath"]
    for i, tid in enumerate(tset.template_ids):
        for j, fid in enumerate(tset.fonts):
            name = f"t{i:04d}_f{j:02d}.pgm"
            write_pgm(root / name, tset.raster(i, j))
            lines.append(f"{tid}\t{fid}\t{name}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stroke:
    horizontal: bool
    line: int  # lattice row (horizontal) or column (vertical)
    start: int
    length: int

    def clashes(self, other):
        if self.horizontal != other.horizontal or abs(self.line - other.line) > 1:
            return False
        return self.start < other.start + other.length and other.start < self.start + self.length


def _stroke_pool(seed, size):
    rng = prng(seed, 0)
    pool = []
    attempts = 0
    while len(pool) < size:
        attempts += 1
        s = Stroke(
            horizontal=bool(rng.integers(2)),
            line=int(rng.integers(1, _LATTICE - 1)),
            start=int(rng.integers(1, _LATTICE - 4)),
            length=int(rng.integers(3, 6)),
        )
        s = Stroke(s.horizontal, s.line, s.start, min(s.length, _LATTICE - 1 - s.start))
        # past the point where clash-free strokes are easy to find, only
        # exact duplicates are rejected
        strict = attempts < 200 * size
        if s in pool or (strict and any(s.clashes(p) for p in pool[-(_STROKES_PER_GLYPH + 4):])):
            continue
        pool.append(s)
    return pool


def synth_strokes(seed, n):
    """Stroke sets (indices into the stroke pool) of the ``n`` synthetic templates.

    Template ``t + 1`` equals template ``t`` with exactly one stroke replaced
    by a never-before-used one; slots are replaced round robin, so templates
    at least four ids apart share no stroke.
    """
    k = _STROKES_PER_GLYPH
    current = list(range(k))
    out = [tuple(current)]
    for t in range(1, n):
        current[(t - 1) % k] = k + t - 1
        out.append(tuple(current))
    return out


@dataclass(frozen=True)
class FontStyle:
    """Perturbation applied when rendering a glyph, in pixels."""

    dx: float = 0.0
    dy: float = 0.0
    thickness: float = 0.0
    jitter: dict = field(default_factory=dict)  # stroke id -> (d_start, d_end, d_line)


def _font_style(rng, stroke_ids, scale, jitter_px):
    return FontStyle(
        dx=float(rng.integers(-2, 3)) * scale,
        dy=float(rng.integers(-2, 3)) * scale,
        thickness=float(rng.uniform(-1.0, 1.0)) * scale,
        jitter={sid: tuple(float(v) * scale for v in rng.uniform(-jitter_px, jitter_px, 3))
                for sid in stroke_ids},
    )


def render_glyph(strokes, side, style=FontStyle()):
    """Rasterize a list of ``(stroke_id, Stroke)`` pairs onto a white canvas."""
    canvas = np.full((side, side), 255, dtype=np.uint8)
    unit = side / _LATTICE
    half = max(0.5, 0.3 * unit + 0.5 * style.thickness)
    for sid, s in strokes:
        d_start, d_end, d_line = style.jitter.get(sid, (0.0, 0.0, 0.0))
        centre = (s.line + 0.5) * unit + d_line
        a = s.start * unit + d_start
        b = (s.start + s.length) * unit + d_end
        lo_c, hi_c = int(round(centre - half)), int(round(centre + half))
        lo_s, hi_s = int(round(a)), int(round(b))
        if s.horizontal:
            y0, y1 = lo_c + round(style.dy), hi_c + round(style.dy)
            x0, x1 = lo_s + round(style.dx), hi_s + round(style.dx)
        else:
            x0, x1 = lo_c + round(style.dx), hi_c + round(style.dx)
            y0, y1 = lo_s + round(style.dy), hi_s + round(style.dy)
        canvas[max(y0, 0):max(min(y1, side), 0), max(x0, 0):max(min(x1, side), 0)] = 0
    return canvas


def synth_template_set(seed, n, f, side=DEFAULT_SIDE):
    """Deterministic pseudo-glyph template grid of ``n`` templates x ``f`` fonts."""
    if n < 2:
        raise TemplateGridError("need at least two templates")
    if f < 1:
        raise TemplateGridError("need at least one font")
    if side < 16:
        raise ValueError("side must be at least 16 pixels")
    stroke_sets = synth_strokes(seed, n)
    pool = _stroke_pool(seed, _STROKES_PER_GLYPH + n - 1)
    scale = side / DEFAULT_SIDE
    grid = np.empty((n, f, side, side), dtype=np.uint8)
    for j in range(f):
        style = _font_style(prng(seed, 1, j), range(len(pool)), scale, jitter_px=2.0)
        for i, ids in enumerate(stroke_sets):
            grid[i, j] = render_glyph([(sid, pool[sid]) for sid in ids], side, style)
    template_ids = [f"t{i:03d}" for i in range(n)]
    fonts = [f"font{j}" for j in range(f)]
    return TemplateSet(template_ids, fonts, grid)


def synth_glyph_samples(seed, n_classes, n_samples, side=28, noise=20.0, bright_ink=False):
    """Labelled "handwritten" samples of the synthetic templates.

    Every sample renders its class template with a freshly drawn style
    (shift, stroke thickness, endpoint jitter) plus Gaussian pixel noise.
    Classes are balanced in round-robin order and then shuffled. With
    ``bright_ink`` the images are inverted to the MNIST convention (light
    strokes on a black background). Returns ``(images uint8 (n_samples, side, side), labels uint8)``.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    stroke_sets = synth_strokes(seed, n_classes)
    pool = _stroke_pool(seed, _STROKES_PER_GLYPH + n_classes - 1)
    scale = side / DEFAULT_SIDE
    rng = prng(seed, 3)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    images = np.empty((n_samples, side, side), dtype=np.uint8)
    for k, c in enumerate(labels):
        ids = stroke_sets[c]
        style = _font_style(rng, ids, scale * 1.5, jitter_px=4.0)
        img = render_glyph([(sid, pool[sid]) for sid in ids], side, style).astype(np.float64)
        img += rng.normal(0.0, noise, img.shape)
        images[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if bright_ink:
        images = 255 - images
    return images, labels.astype(np.uint8)
