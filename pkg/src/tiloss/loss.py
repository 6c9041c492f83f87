"""Margin softmax losses on cosine logits, with analytic gradients.

All losses take a batch of cosines ``cos(theta_j)`` between features and
class weights plus ground-truth labels, and return per-sample losses, the
batch mean and the gradient of the batch mean with respect to the cosines.

* :func:`am_softmax_loss` -- additive margin softmax (fixed margin ``m``).
* :func:`template_loss_only` -- softmax with class-pair prior margins.
* :func:`template_instance_loss` -- prior margins plus a per-sample adaptive
  margin ``alpha * (1 - p)**gamma`` driven by the estimated probability.

Everything is evaluated in float64 and in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numeric import log_sum_exp

MARGIN_MODES = ("detached", "differentiated")


@dataclass(frozen=True)
class LossConfig:
    s: float = 30.0
    alpha_max: float = 0.1
    gamma: float = 2.0
    beta: float = 1.0
    rho: float = 10.0
    fixed_m: float = 0.35
    margin_backprop: str = "detached"

    def __post_init__(self):
        for name in ("s", "alpha_max", "gamma", "beta", "rho", "fixed_m"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"LossConfig.{name} must be finite")
        if self.s <= 0:
            raise ValueError("LossConfig.s must be positive")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("LossConfig.gamma and LossConfig.beta must be non-negative")
        if self.margin_backprop not in MARGIN_MODES:
            raise ValueError(f"margin_backprop must be one of {MARGIN_MODES}")


@dataclass(frozen=True)
class CosineBatch:
    cosines: np.ndarray  # (B, n)
    labels: np.ndarray  # (B,)
    iteration: Optional[int] = None

    # slack for rounding and finite-difference probes around +-1
    _COS_SLACK = 1e-4

    def __post_init__(self):
        cos = np.asarray(self.cosines, dtype=np.float64)
        labels = np.asarray(self.labels)
        if cos.ndim != 2 or cos.shape[1] < 2:
            raise ValueError(f"cosines must be (B, n) with n >= 2, got {cos.shape}")
        if labels.shape != (cos.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match batch size {cos.shape[0]}")
        if not np.all(np.isfinite(cos)) or np.any(np.abs(cos) > 1 + self._COS_SLACK):
            raise ValueError("cosines must be finite and within [-1, 1]")
        if labels.size and (not np.issubdtype(labels.dtype, np.integer)
                            or labels.min() < 0 or labels.max() >= cos.shape[1]):
            raise ValueError(f"invalid label index; labels must be integers in [0, {cos.shape[1]})")
        object.__setattr__(self, "cosines", cos)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def size(self):
        return self.cosines.shape[0]

    @property
    def n(self):
        return self.cosines.shape[1]


@dataclass(frozen=True)
class LossEvaluation:
    losses: np.ndarray  # per sample
    mean: float
    p: np.ndarray  # estimated probability of the ground-truth class
    margin: np.ndarray  # margin applied to the ground-truth logit
    grad: np.ndarray  # d(mean loss) / d(cosines)


def _onehot(labels, n):
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _prior_offsets(batch, cfg, margins):
    """``beta * m^P(y_i, j)`` per sample, zero on the ground-truth column."""
    if margins is None or cfg.beta == 0:
        return np.zeros_like(batch.cosines)
    table = np.asarray(getattr(margins, "matrix", margins), dtype=np.float64)
    if table.shape != (batch.n, batch.n):
        raise ValueError(f"margin table shape {table.shape} does not match {batch.n} classes")
    q = cfg.beta * table[batch.labels]
    q[np.arange(batch.size), batch.labels] = 0.0
    return q


def _split_lse(logits, labels):
    """Log-sum-exp over all classes and over the non-target classes."""
    rows = np.arange(labels.size)
    rest = logits.copy()
    rest[rows, labels] = -np.inf
    return log_sum_exp(logits, axis=1), log_sum_exp(rest, axis=1), rest


def _evaluation(losses, p, margin, grad):
    return LossEvaluation(losses, float(np.mean(losses)), p, margin, grad)


def am_softmax_loss(batch: CosineBatch, cfg: LossConfig, m: Optional[float] = None) -> LossEvaluation:
    """Additive margin softmax; ``m`` defaults to ``cfg.fixed_m``."""
    m = cfg.fixed_m if m is None else m
    rows = np.arange(batch.size)
    logits = cfg.s * batch.cosines
    logits[rows, batch.labels] -= cfg.s * m
    lse = log_sum_exp(logits, axis=1)
    log_p = logits[rows, batch.labels] - lse
    losses = -log_p
    grad = cfg.s * (np.exp(logits - lse[:, None]) - _onehot(batch.labels, batch.n)) / batch.size
    return _evaluation(losses, np.exp(log_p), np.full(batch.size, float(m)), grad)


def softmax_cross_entropy(batch: CosineBatch, cfg: LossConfig) -> LossEvaluation:
    """Plain softmax cross-entropy over ``s * cosines``."""
    return am_softmax_loss(batch, cfg, m=0.0)


def _log_probabilities(batch, cfg, margins):
    """``(log p, log(1 - p), prior-shifted logits, rest-lse)`` per sample."""
    rows = np.arange(batch.size)
    z = cfg.s * batch.cosines
    logits = z + _prior_offsets(batch, cfg, margins)
    lse_all, lse_rest, _ = _split_lse(logits, batch.labels)
    log_p = z[rows, batch.labels] - lse_all
    log_1mp = lse_rest - lse_all
    return log_p, log_1mp, logits, lse_all, lse_rest


def estimated_probability(batch: CosineBatch, cfg: LossConfig, margins=None) -> np.ndarray:
    """Probability of the ground-truth class with prior margins added to the other logits."""
    return np.exp(_log_probabilities(batch, cfg, margins)[0])


def adaptive_margin(p, alpha, gamma):
    """``alpha * (1 - p)**gamma`` with ``0**0 == 1``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probability must lie in [0, 1]")
    out = alpha * np.power(1.0 - p, gamma)
    return float(out) if out.ndim == 0 else out


def _adaptive_margin_log(log_1mp, alpha, gamma):
    if gamma == 0:
        return np.full_like(log_1mp, float(alpha))
    return alpha * np.exp(gamma * log_1mp)


def template_loss_only(batch: CosineBatch, cfg: LossConfig, margins=None) -> LossEvaluation:
    """Softmax with the prior margins added to the non-target logits (``-log p``)."""
    log_p, _, logits, lse_all, _ = _log_probabilities(batch, cfg, margins)
    probs = np.exp(logits - lse_all[:, None])
    grad = cfg.s * (probs - _onehot(batch.labels, batch.n)) / batch.size
    return _evaluation(-log_p, np.exp(log_p), np.zeros(batch.size), grad)


def template_instance_loss(batch: CosineBatch, cfg: LossConfig, margins=None,
                           alpha: Optional[float] = None, mode: Optional[str] = None) -> LossEvaluation:
    """Combined prior-margin / adaptive-margin loss in closed form.

    ``L = log(1 + (1/p - 1) * exp(s * m_A))`` with ``m_A = alpha * (1 - p)**gamma``
    and ``p`` from :func:`estimated_probability`. ``alpha`` defaults to
    ``cfg.alpha_max``. In ``detached`` mode ``m_A`` is a constant for the
    gradient; ``differentiated`` also propagates through ``p`` inside ``m_A``.
    """
    alpha = cfg.alpha_max if alpha is None else alpha
    mode = cfg.margin_backprop if mode is None else mode
    if mode not in MARGIN_MODES:
        raise ValueError(f"mode must be one of {MARGIN_MODES}")
    log_p, log_1mp, logits, _, lse_rest = _log_probabilities(batch, cfg, margins)
    margin = _adaptive_margin_log(log_1mp, alpha, cfg.gamma)
    x = log_1mp - log_p + cfg.s * margin
    losses = np.logaddexp(0.0, x)

    # softmax of the explicit margin logits: target weight 1/(1 + e^x),
    # non-targets share the rest in proportion to their prior-shifted logits
    miss = np.exp(x - losses)  # 1 - pi_target
    rest = np.exp(logits - lse_rest[:, None])
    rest[np.arange(batch.size), batch.labels] = 0.0
    onehot = _onehot(batch.labels, batch.n)
    grad = cfg.s * miss[:, None] * (rest - onehot)
    if mode == "differentiated" and cfg.gamma != 0 and alpha != 0:
        p = np.exp(log_p)
        dm = -cfg.gamma * cfg.s * p * margin  # d m_A / d cos = dm * (e_y - rest)
        grad += cfg.s * miss[:, None] * dm[:, None] * (onehot - rest)
    return _evaluation(losses, np.exp(log_p), margin, grad / batch.size)


def alpha_schedule(iteration: int, max_iter: int, cfg: LossConfig) -> float:
    """Sigmoid ramp of the adaptive-margin upper bound over training."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return cfg.alpha_max / (1.0 + np.exp(-cfg.rho * (iteration / max_iter - 0.5)))


LOSS_OPS = {
    "am_softmax": am_softmax_loss,
    "template": template_loss_only,
    "template_instance": template_instance_loss,
}
