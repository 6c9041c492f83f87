"""Finite-difference verification of the analytic loss gradients."""

from __future__ import annotations

import numpy as np

from .affinity import AffinityMatrix, prior_margin_table
from .loss import (CosineBatch, LossConfig, am_softmax_loss, template_instance_loss,
                   template_loss_only)
from .numeric import log_sum_exp, prng

OPS = ("am_softmax", "template", "template_instance")
DEFAULT_THRESHOLD = 1e-5


def random_margin_table(rng, n):
    """Prior margins of a random symmetric unit-diagonal affinity matrix."""
    a = rng.uniform(0.0, 1.0, (n, n))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 1.0)
    return prior_margin_table(AffinityMatrix([str(i) for i in range(n)], a)).matrix


def random_batch(rng, batch_size, n):
    cos = rng.uniform(-1.0, 1.0, (batch_size, n))
    labels = rng.integers(0, n, batch_size)
    return CosineBatch(cos, labels)


def _frozen_margin_losses(cos, labels, cfg, margins, frozen):
    """Explicit-softmax form of the combined loss with the adaptive margin held fixed."""
    rows = np.arange(labels.size)
    frozen = np.tile(frozen, labels.size // frozen.size)  # stacked copies of the batch
    logits = cfg.s * cos + cfg.beta * margins[labels]
    logits[rows, labels] = cfg.s * (cos[rows, labels] - frozen)
    return log_sum_exp(logits, axis=1) - logits[rows, labels]


def per_sample_losses(op, mode, cfg, margins, alpha, frozen=None):
    """Return ``f(cosines) -> per-sample losses`` for the requested op."""
    def fn(cos, labels):
        batch = CosineBatch(cos, labels)
        if op == "am_softmax":
            return am_softmax_loss(batch, cfg).losses
        if op == "template":
            return template_loss_only(batch, cfg, margins).losses
        if mode == "detached":
            return _frozen_margin_losses(cos, labels, cfg, margins, frozen)
        return template_instance_loss(batch, cfg, margins, alpha, mode="differentiated").losses
    return fn


def finite_difference_grad(fn, cos, labels, h=1e-5):
    """Central differences of the batch-mean loss w.r.t. every cosine.

    Samples do not interact, so all ``2 n`` perturbed copies of the batch are
    stacked and evaluated in a single call.
    """
    b, n = cos.shape
    steps = np.concatenate([np.eye(n), -np.eye(n)]) * h  # (2n, n)
    stacked = (cos[None, :, :] + steps[:, None, :]).reshape(2 * n * b, n)
    losses = fn(stacked, np.tile(labels, 2 * n)).reshape(2, n, b)
    return (losses[0] - losses[1]).T / (2 * h) / b


def relative_error(analytic, numeric):
    """Max absolute deviation relative to the largest gradient entry."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def analytic_grad(op, mode, batch, cfg, margins, alpha):
    if op == "am_softmax":
        ev = am_softmax_loss(batch, cfg)
    elif op == "template":
        ev = template_loss_only(batch, cfg, margins)
    else:
        ev = template_instance_loss(batch, cfg, margins, alpha, mode=mode)
    return ev


def gradient_check(op, mode="detached", batch_size=8, n=10, seed=0, trials=100,
                   cfg=LossConfig(), h=1e-5, corrupt=0.0):
    """Report ``{op, mode, batch_size, n, max_rel_error, seed}`` over ``trials`` random batches.

    ``corrupt`` adds a constant to the analytic gradient; used to confirm the
    harness actually detects a wrong gradient.
    """
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    rng = prng(seed, n, batch_size)
    worst = 0.0
    for _ in range(trials):
        batch = random_batch(rng, batch_size, n)
        margins = random_margin_table(rng, n)
        alpha = cfg.alpha_max
        ev = analytic_grad(op, mode, batch, cfg, margins, alpha)
        fn = per_sample_losses(op, mode, cfg, margins, alpha, frozen=ev.margin)
        numeric = finite_difference_grad(fn, batch.cosines, batch.labels, h)
        worst = max(worst, relative_error(ev.grad + corrupt, numeric))
    return {"op": op, "mode": mode, "batch_size": batch_size, "n": n,
            "max_rel_error": worst, "seed": seed}
