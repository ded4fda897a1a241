"""STAPLE expectation-maximization fusion of rater masks.

Binary form: each rater j has sensitivity p_j and specificity q_j, the
true label of every pixel is Bernoulli(prior), and rater decisions are
conditionally independent given the truth.  Multi-class fusion runs
the binary form once per class (one-vs-rest).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLAMP = 1e-6


@dataclass(frozen=True)
class RaterPerformance:
    sensitivity: float
    specificity: float


@dataclass
class StapleResult:
    consensus: np.ndarray  # posterior foreground probability per pixel
    raters: list[RaterPerformance]
    iterations: int
    degenerate: bool = False
    loglik: list[float] = field(default_factory=list)

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return (self.consensus > threshold).astype(np.uint8)


def _stack_masks(masks) -> np.ndarray:
    masks = [np.asarray(m) for m in masks]
    if len(masks) < 2:
        raise ValueError(f"STAPLE needs at least 2 raters, got {len(masks)}")
    shape = masks[0].shape
    for j, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"rater {j} mask shape {m.shape} != rater 0 shape {shape}")
    return np.stack([m.astype(bool).ravel() for m in masks])


def _log_terms(d: np.ndarray, p: np.ndarray, q: np.ndarray, prior: float):
    """Per-pixel log P(decisions, T=1) and log P(decisions, T=0)."""
    lp, l1p = np.log(p)[:, None], np.log1p(-p)[:, None]
    lq, l1q = np.log(q)[:, None], np.log1p(-q)[:, None]
    a = np.log(prior) + np.where(d, lp, l1p).sum(axis=0)
    b = np.log1p(-prior) + np.where(d, l1q, lq).sum(axis=0)
    return a, b


def staple_binary(masks, prior: float | None = None, tol: float = 1e-6, max_iter: int = 100) -> StapleResult:
    """Fuse ``masks`` (R >= 2 equal-shape binary masks) into a consensus.

    ``prior`` defaults to the mean foreground fraction over all raters.
    Stops when the largest change in any p_j or q_j falls below ``tol``.
    ``loglik`` holds the observed-data log-likelihood at the parameters
    entering each E-step.
    """
    d = _stack_masks(masks)
    shape = np.asarray(masks[0]).shape
    r = d.shape[0]
    if not d.any():
        return StapleResult(np.zeros(shape), [RaterPerformance(1.0 - CLAMP, 1.0 - CLAMP)] * r, 0, True)
    if prior is None:
        prior = float(d.mean())
    prior = float(np.clip(prior, CLAMP, 1 - CLAMP))
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")

    p = np.full(r, 0.9)
    q = np.full(r, 0.9)
    history: list[float] = []
    it = 0
    while it < max_iter:
        it += 1
        a, b = _log_terms(d, p, q, prior)
        m = np.maximum(a, b)
        history.append(float(np.sum(m + np.log(np.exp(a - m) + np.exp(b - m)))))
        w = 1.0 / (1.0 + np.exp(b - a))
        sw, sv = w.sum(), (1.0 - w).sum()
        p_new = (d * w).sum(axis=1) / sw if sw > 0 else p
        q_new = (~d * (1.0 - w)).sum(axis=1) / sv if sv > 0 else q
        p_new = np.clip(p_new, CLAMP, 1 - CLAMP)
        q_new = np.clip(q_new, CLAMP, 1 - CLAMP)
        change = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        if change < tol:
            break
    a, b = _log_terms(d, p, q, prior)
    w = 1.0 / (1.0 + np.exp(b - a))
    raters = [RaterPerformance(float(pj), float(qj)) for pj, qj in zip(p, q)]
    return StapleResult(w.reshape(shape), raters, it, False, history)


def staple_multiclass(masks, classes=tuple(range(1, 10)), tol: float = 1e-6, max_iter: int = 100):
    """Label map fused one-vs-rest; returns (labels, {class: StapleResult}).

    A pixel takes the class of highest posterior when that posterior
    exceeds 0.5 (ties go to the lower class), else background.
    """
    stack = [np.asarray(m) for m in masks]
    _stack_masks(stack)
    shape = stack[0].shape
    results = {}
    post = np.zeros((len(classes),) + shape)
    for k, c in enumerate(classes):
        res = staple_binary([m == c for m in stack], tol=tol, max_iter=max_iter)
        results[c] = res
        post[k] = res.consensus
    best = np.argmax(post, axis=0)  # first maximum = lower class
    labels = np.asarray(classes, dtype=np.uint8)[best]
    labels = np.where(np.max(post, axis=0) > 0.5, labels, 0).astype(np.uint8)
    return labels, results
