"""Small numerical kernels shared by the rest of the package.

Everything here works on float64 numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration so that results do not depend on which LAPACK
build numpy happens to link against.
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(np.float64).eps


def _round_robin(n):
    """Yield rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            yield np.array(p), np.array(q)
        players = [players[0], players[-1]] + players[1:-1]


def _complete_columns(q, missing):
    """Fill columns ``missing`` of ``q`` with unit vectors orthogonal to the rest."""
    rows = q.shape[0]
    have = [j for j in range(q.shape[1]) if j not in set(missing)]
    basis = [q[:, j] for j in have]
    for j in missing:
        for k in range(rows):
            v = np.zeros(rows)
            v[k] = 1.0
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 0.5:
                v /= norm
                break
        q[:, j] = v
        basis.append(v)
    return q


def svd(m, max_sweeps=80):
    """Thin singular value decomposition ``m = U @ diag(sigma) @ V.T``.

    Returns ``(U, sigma, V)`` with ``sigma`` sorted in descending order and
    ``U``, ``V`` having ``min(rows, cols)`` orthonormal columns.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"svd expects a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    scale = np.abs(a).max()
    if scale > 0:
        a /= scale
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    rows, cols = a.shape
    v = np.eye(cols)

    for _ in range(max_sweeps):
        rotated = False
        for p, q in _round_robin(cols):
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > _EPS * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            # zeta may overflow for a tiny gamma; t then goes to 0, the exact limit
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break

    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    cutoff = sigma[0] * _EPS * max(rows, cols) if sigma[0] > 0 else 0.0
    u = np.zeros_like(a)
    keep = sigma > cutoff
    u[:, keep] = a[:, keep] / sigma[keep]
    missing = [j for j in range(cols) if not keep[j]]
    if missing:
        u = _complete_columns(u, missing)
    sigma = sigma * scale if scale > 0 else sigma
    if transposed:
        return v, sigma, u
    return u, sigma, v


def log_sum_exp(values, axis=None):
    """Stable ``log(sum(exp(values)))`` along ``axis``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    out = np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def dct_matrix(n):
    """Orthonormal type-II DCT matrix of size ``n x n``."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


def dct2(block):
    """Orthonormal 2-D type-II DCT."""
    b = np.asarray(block, dtype=np.float64)
    return dct_matrix(b.shape[0]) @ b @ dct_matrix(b.shape[1]).T


def idct2(coeffs):
    """Inverse of :func:`dct2`."""
    c = np.asarray(coeffs, dtype=np.float64)
    return dct_matrix(c.shape[0]).T @ c @ dct_matrix(c.shape[1])


def prng(seed, *stream):
    """Counter-based (Philox) generator keyed by ``seed`` and optional stream ids.

    The same ``(seed, *stream)`` always produces the same sequence on every
    platform; distinct stream ids give statistically independent streams.
    """
    entropy = [int(seed)] + [int(s) for s in stream]
    if any(e < 0 for e in entropy):
        raise ValueError("prng seed and stream ids must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
