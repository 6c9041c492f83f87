"""Fuse per-feature similarity matrices into a template affinity matrix and
turn it into a table of class-pair prior margins.

For template ``i`` the ``K x N`` matrix of its similarities to every
template under every feature is reduced to its principal right singular
vector. Stacking those vectors gives ``H``; the affinity is the symmetric
part of ``H`` rescaled to a unit diagonal, and the prior margin of the pair
``(i, j)`` is the row-softmax of the affinities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureSimilarityTensor
from .numeric import svd

_CACHE_MAGIC = b"TIPMARGN"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIQ")


class DegenerateSimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class DirectionalSimilarity:
    index: int
    matrix: np.ndarray  # (K, N): row k = feature k, column j = template j


@dataclass(frozen=True)
class AffinityMatrix:
    template_ids: list
    matrix: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PriorMarginTable:
    template_ids: list
    matrix: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]


def directional_similarity(tensor: FeatureSimilarityTensor, i: int) -> DirectionalSimilarity:
    if not 0 <= i < tensor.n:
        raise IndexError(f"template index {i} out of range for {tensor.n} templates")
    rows = [tensor.matrices[k][i] for k in tensor.features]
    return DirectionalSimilarity(i, np.array(rows, dtype=np.float64))


def principal_similarity_vector(s: DirectionalSimilarity) -> np.ndarray:
    """Unit right singular vector of the largest singular value, oriented non-negative."""
    m = s.matrix
    if not np.any(m):
        raise DegenerateSimilarityError(f"degenerate similarity: all-zero matrix for template {s.index}")
    _, _, v = svd(m)
    h = v[:, 0].copy()
    if h.sum() < 0:
        h = -h
    h[(h < 0) & (h > -1e-10)] = 0.0
    return h


def assemble_affinity(vectors, template_ids=None) -> AffinityMatrix:
    """Symmetrise the stacked principal vectors and rescale to a unit diagonal."""
    h = np.array(vectors, dtype=np.float64)
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"expected {n} vectors of length {n}, got shape {h.shape}")
    a = (h + h.T) / 2.0
    diag = np.diag(a).copy()
    bad = np.flatnonzero(diag <= 0)
    if bad.size:
        raise DegenerateSimilarityError(f"degenerate self-affinity for template {int(bad[0])}")
    scale = np.sqrt(diag)
    a = a / np.outer(scale, scale)  # exactly symmetric
    a = np.clip(a, 0.0, 1.0)
    np.fill_diagonal(a, 1.0)
    ids = list(template_ids) if template_ids is not None else [str(i) for i in range(n)]
    return AffinityMatrix(ids, a)


def compute_affinity(tensor: FeatureSimilarityTensor) -> AffinityMatrix:
    vectors = [principal_similarity_vector(directional_similarity(tensor, i)) for i in range(tensor.n)]
    return assemble_affinity(vectors, tensor.template_ids)


def prior_margin_table(a: AffinityMatrix, exclude_diagonal_in_softmax=False) -> PriorMarginTable:
    """Row-softmax of the affinities with the diagonal forced to zero.

    By default the softmax denominator includes the self term ``e^{a_ii}``;
    ``exclude_diagonal_in_softmax`` drops it so each row sums to one.
    """
    x = a.matrix
    n = x.shape[0]
    e = np.exp(x - x.max(axis=1, keepdims=True))
    off = ~np.eye(n, dtype=bool)
    denom = np.where(off, e, 0.0).sum(axis=1) if exclude_diagonal_in_softmax else e.sum(axis=1)
    m = np.where(off, e / denom[:, None], 0.0)
    return PriorMarginTable(list(a.template_ids), m)


def write_margin_cache(path, table: PriorMarginTable):
    """Binary cache: magic, version, N, then N*N little-endian float64 row-major."""
    n = table.n
    data = _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, n)
    data += np.ascontiguousarray(table.matrix, dtype="<f8").tobytes()
    Path(path).write_bytes(data)


def read_margin_cache(path, template_ids=None) -> PriorMarginTable:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated margin cache")
    magic, version, n = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a margin cache (bad magic)")
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported margin cache version {version}")
    body = data[_CACHE_HEADER.size:]
    if len(body) != 8 * n * n:
        raise ValueError(f"{path}: expected {n}x{n} entries, found {len(body) // 8} values")
    matrix = np.frombuffer(body, dtype="<f8").reshape(n, n).astype(np.float64)
    ids = list(template_ids) if template_ids is not None else [str(i) for i in range(n)]
    return PriorMarginTable(ids, matrix)
