"""Pairwise glyph similarity features and font-averaged similarity matrices.

Five hand-crafted similarities are implemented: pixel mIoU, pHash, HOG,
uniform LBP and a Gabor filter bank. Each one maps a pair of rasters to a
value in [0, 1], returns exactly 1 for identical inputs and is exactly
symmetric in its arguments.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .glyphs import BinaryGlyph, GlyphRaster, binarize, resize_bilinear
from .numeric import dct2


class FeatureId(str, enum.Enum):
    PIXEL_MIOU = "pixel_miou"
    PHASH = "phash"
    HOG = "hog"
    LBP = "lbp"
    GABOR = "gabor"


ALL_FEATURES = tuple(FeatureId)


@dataclass(frozen=True)
class GaborBank:
    wavelengths: tuple = (4.0, 8.0, 16.0, 32.0)
    orientations: int = 6
    sigma_per_wavelength: float = 0.56
    aspect: float = 0.5


@dataclass(frozen=True)
class FeatureConfig:
    """Geometry constants of every extractor."""

    binarize_policy: object = "otsu"
    phash_size: int = 32
    phash_block: int = 8
    hog_cell: int = 8
    hog_block: int = 2
    hog_bins: int = 9
    hog_eps: float = 1e-6
    gabor: GaborBank = field(default_factory=GaborBank)


DEFAULT_CONFIG = FeatureConfig()


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _ordered(a, b):
    """Put two descriptors in a canonical order so combiners are exactly symmetric."""
    return (a, b) if a.tobytes() <= b.tobytes() else (b, a)


def _cosine_similarity(a, b):
    a, b = _ordered(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    if np.array_equal(a, b):
        return 1.0
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(min(1.0, max(0.0, (a @ b) / (na * nb))))


# ---------------------------------------------------------------------------
# pixel mIoU
# ---------------------------------------------------------------------------

def pixel_miou_similarity(a: BinaryGlyph, b: BinaryGlyph) -> float:
    _check_same_shape(a.mask, b.mask)
    union = np.count_nonzero(a.mask | b.mask)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.mask & b.mask) / union


# ---------------------------------------------------------------------------
# pHash
# ---------------------------------------------------------------------------

def phash_bits(raster: GlyphRaster, config=DEFAULT_CONFIG) -> np.ndarray:
    """The 64 hash bits as a boolean array in row-major DCT order."""
    img = resize_bilinear(raster.pixels, config.phash_size)
    img -= img.mean()
    block = dct2(img)[:config.phash_block, :config.phash_block].copy()
    # the mean was removed, so the DC coefficient is zero up to rounding
    block[0, 0] = 0.0
    median = np.median(block.ravel()[1:])
    return (block > median).ravel()


def phash(raster: GlyphRaster, config=DEFAULT_CONFIG) -> int:
    """64-bit perceptual hash; the first DCT coefficient is the most significant bit."""
    value = 0
    for bit in phash_bits(raster, config):
        value = (value << 1) | int(bit)
    return value


def hamming64(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def phash_similarity(a: GlyphRaster, b: GlyphRaster, config=DEFAULT_CONFIG) -> float:
    bits = config.phash_block ** 2
    return 1.0 - hamming64(phash(a, config), phash(b, config)) / bits


# ---------------------------------------------------------------------------
# HOG
# ---------------------------------------------------------------------------

def hog_descriptor(raster: GlyphRaster, config=DEFAULT_CONFIG) -> np.ndarray:
    """Unsigned-orientation HOG with L2 block normalisation.

    Gradients are central differences (zero on the border), votes are split
    linearly between the two nearest orientation bins, cells are
    ``hog_cell`` pixels square and blocks of ``hog_block`` cells slide by one
    cell.
    """
    cell, nb, bins = config.hog_cell, config.hog_block, config.hog_bins
    img = raster.pixels.astype(np.float64)
    h, w = img.shape
    if h < cell * nb or w < cell * nb:
        raise ValueError(f"HOG needs at least {cell * nb}x{cell * nb} pixels, got {h}x{w}")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    pos = angle / (np.pi / bins) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(int) % bins
    hi = (lo + 1) % bins

    cy, cx = h // cell, w // cell
    votes = np.zeros((cy * cell, cx * cell, bins))
    rows, cols = np.indices((cy * cell, cx * cell))
    m = mag[:cy * cell, :cx * cell]
    f = frac[:cy * cell, :cx * cell]
    np.add.at(votes, (rows, cols, lo[:cy * cell, :cx * cell]), m * (1 - f))
    np.add.at(votes, (rows, cols, hi[:cy * cell, :cx * cell]), m * f)
    hist = votes.reshape(cy, cell, cx, cell, bins).sum(axis=(1, 3))

    blocks = []
    for by in range(cy - nb + 1):
        for bx in range(cx - nb + 1):
            v = hist[by:by + nb, bx:bx + nb].ravel()
            blocks.append(v / np.sqrt(v @ v + config.hog_eps ** 2))
    return np.concatenate(blocks)


def hog_similarity(a: GlyphRaster, b: GlyphRaster, config=DEFAULT_CONFIG) -> float:
    _check_same_shape(a.pixels, b.pixels)
    return _cosine_similarity(hog_descriptor(a, config), hog_descriptor(b, config))


# ---------------------------------------------------------------------------
# LBP
# ---------------------------------------------------------------------------

def _uniform_lbp_table():
    table = np.full(256, 58, dtype=np.int64)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            table[code] = nxt
            nxt += 1
    assert nxt == 58
    return table


_LBP_TABLE = _uniform_lbp_table()
# clockwise from the top-left neighbour
_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def lbp_codes(raster: GlyphRaster) -> np.ndarray:
    """8-neighbour radius-1 LBP codes of the interior pixels (ties set the bit)."""
    img = raster.pixels.astype(np.int16)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"LBP needs at least 3x3 pixels, got {h}x{w}")
    centre = img[1:-1, 1:-1]
    codes = np.zeros(centre.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        neighbour = img[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (neighbour >= centre).astype(np.int64) << bit
    return codes


def lbp_histogram(raster: GlyphRaster) -> np.ndarray:
    """L1-normalised 59-bin uniform LBP histogram."""
    bins = _LBP_TABLE[lbp_codes(raster)]
    hist = np.bincount(bins.ravel(), minlength=59).astype(np.float64)
    return hist / hist.sum()


def lbp_similarity(a: GlyphRaster, b: GlyphRaster) -> float:
    _check_same_shape(a.pixels, b.pixels)
    return _histogram_intersection(lbp_histogram(a), lbp_histogram(b))


def _histogram_intersection(ha, hb):
    if np.array_equal(ha, hb):
        return 1.0
    ha, hb = _ordered(ha, hb)
    return float(min(1.0, max(0.0, np.minimum(ha, hb).sum())))


# ---------------------------------------------------------------------------
# Gabor
# ---------------------------------------------------------------------------

def gabor_kernels(bank: GaborBank):
    """Complex zero-DC Gabor kernels, ordered scale-major then orientation."""
    kernels = []
    for lam in bank.wavelengths:
        sigma = bank.sigma_per_wavelength * lam
        half = int(np.ceil(3 * sigma))
        y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
        for k in range(bank.orientations):
            theta = np.pi * k / bank.orientations
            xr = x * np.cos(theta) + y * np.sin(theta)
            yr = -x * np.sin(theta) + y * np.cos(theta)
            envelope = np.exp(-(xr ** 2 + (bank.aspect * yr) ** 2) / (2 * sigma ** 2))
            carrier = np.exp(1j * 2 * np.pi * xr / lam)
            kern = envelope * carrier
            # remove the DC response with an envelope-shaped offset
            kern -= envelope * (kern.sum() / envelope.sum())
            kernels.append(kern)
    return kernels


_KERNEL_CACHE: dict = {}


def _cached_kernels(bank):
    if bank not in _KERNEL_CACHE:
        _KERNEL_CACHE[bank] = gabor_kernels(bank)
    return _KERNEL_CACHE[bank]


def gabor_descriptor(raster: GlyphRaster, bank: GaborBank = GaborBank()) -> np.ndarray:
    """Mean response magnitude per (scale, orientation) channel.

    The image is mean-centred (the kernels have no DC response, so this
    changes nothing but makes a flat image give exactly zero) and
    symmetrically padded before FFT convolution.
    """
    img = raster.pixels.astype(np.float64)
    img -= img.mean()
    h, w = img.shape
    kernels = _cached_kernels(bank)
    if not np.any(img):
        return np.zeros(len(kernels))
    pad = max(k.shape[0] // 2 for k in kernels)
    padded = np.pad(img, pad, mode="symmetric")
    shape = padded.shape
    spectrum = np.fft.fft2(padded)
    out = np.empty(len(kernels))
    for c, kern in enumerate(kernels):
        half = kern.shape[0] // 2
        kpad = np.zeros(shape, dtype=np.complex128)
        kpad[:kern.shape[0], :kern.shape[1]] = kern
        kpad = np.roll(kpad, (-half, -half), axis=(0, 1))
        response = np.fft.ifft2(spectrum * np.fft.fft2(kpad))[pad:pad + h, pad:pad + w]
        out[c] = np.abs(response).mean()
    return out


def gabor_similarity(a: GlyphRaster, b: GlyphRaster, bank: GaborBank = GaborBank()) -> float:
    _check_same_shape(a.pixels, b.pixels)
    return _cosine_similarity(gabor_descriptor(a, bank), gabor_descriptor(b, bank))


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

def _describe(feature, raster, config):
    if feature is FeatureId.PIXEL_MIOU:
        return binarize(raster, config.binarize_policy)
    if feature is FeatureId.PHASH:
        return phash(raster, config)
    if feature is FeatureId.HOG:
        return hog_descriptor(raster, config)
    if feature is FeatureId.LBP:
        return lbp_histogram(raster)
    if feature is FeatureId.GABOR:
        return gabor_descriptor(raster, config.gabor)
    raise ValueError(f"unknown feature {feature!r}")


def _compare(feature, da, db, config):
    if feature is FeatureId.PIXEL_MIOU:
        return pixel_miou_similarity(da, db)
    if feature is FeatureId.PHASH:
        return 1.0 - hamming64(da, db) / config.phash_block ** 2
    if feature is FeatureId.LBP:
        return _histogram_intersection(da, db)
    return _cosine_similarity(da, db)


def similarity(feature, a: GlyphRaster, b: GlyphRaster, config=DEFAULT_CONFIG) -> float:
    """Similarity of two rasters under ``feature``."""
    feature = FeatureId(feature)
    _check_same_shape(a.pixels, b.pixels)
    return _compare(feature, _describe(feature, a, config), _describe(feature, b, config), config)


def feature_similarity_matrix(tset, feature, config=DEFAULT_CONFIG) -> np.ndarray:
    """Font-averaged ``N x N`` similarity matrix of one feature."""
    feature = FeatureId(feature)
    n, f = tset.n, len(tset.fonts)
    per_font = np.ones((f, n, n))
    for j in range(f):
        desc = [_describe(feature, tset.raster(i, j), config) for i in range(n)]
        for a in range(n):
            for b in range(a + 1, n):
                per_font[j, a, b] = per_font[j, b, a] = _compare(feature, desc[a], desc[b], config)
    out = per_font.mean(axis=0)
    np.fill_diagonal(out, 1.0)
    return out


@dataclass
class FeatureSimilarityTensor:
    template_ids: list
    matrices: dict  # FeatureId -> (N, N) array

    @property
    def n(self):
        return len(self.template_ids)

    @property
    def features(self):
        return list(self.matrices)

    def validate(self, atol=0.0):
        for k, m in self.matrices.items():
            if m.shape != (self.n, self.n):
                raise ValueError(f"{k.value}: shape {m.shape} != ({self.n}, {self.n})")
            if not np.allclose(m, m.T, rtol=0, atol=atol):
                raise ValueError(f"{k.value}: matrix is not symmetric")
            if not np.all(np.diag(m) == 1.0):
                raise ValueError(f"{k.value}: diagonal is not 1")
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError(f"{k.value}: entries outside [0, 1]")


def build_tensor(tset, config=DEFAULT_CONFIG, features=ALL_FEATURES) -> FeatureSimilarityTensor:
    matrices = {FeatureId(k): feature_similarity_matrix(tset, k, config) for k in features}
    return FeatureSimilarityTensor(list(tset.template_ids), matrices)


def write_matrix_csv(path, ids, matrix):
    """N x N matrix with a header row and column of ids, 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + list(ids))
        for tid, row in zip(ids, matrix):
            writer.writerow([tid] + [format(float(v), ".17g") for v in row])


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ids, matrix


def write_tensor_csv(tensor, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, m in tensor.matrices.items():
        path = directory / f"similarity_{k.value}.csv"
        write_matrix_csv(path, tensor.template_ids, m)
        paths.append(path)
    return paths
