"""Prediction fusion and the three training objectives.

All losses are minimized negative log-likelihood sums over one image's
class vector (the batch mean is taken by the training loop). Probabilities
are clamped to [1e-12, 1-1e-12] inside logs, so every loss is finite and
non-negative.

Label conventions: `weighted_bce` and `asymmetric_focal` take dense {0,1}
targets; `partial_bce` takes tri-state {+1 present, -1 absent, 0 unknown}
targets and is exactly invariant to predictions at unknown positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class DegenerateLabelsError(ValueError):
    """Raised when an objective receives a label vector it cannot score."""


@dataclass(frozen=True)
class ClassPriors:
    """Per-class label frequencies r[c] = (#images with label c) / N."""

    r: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "ClassPriors":
        """labels: (N, C) with +1 present / -1 absent (unknowns do not count
        as present). Frequencies are clamped to [1/(2N), 1 - 1/(2N)] so the
        imbalance weights stay finite for all-absent or all-present classes."""
        labels = np.asarray(labels)
        n = labels.shape[0]
        if n == 0:
            raise DegenerateLabelsError("priors need at least one image")
        r = (labels == 1).mean(axis=0)
        lo = 1.0 / (2.0 * n)
        return cls(r=np.clip(r, lo, 1.0 - lo))


def tri_to_binary(labels: np.ndarray) -> np.ndarray:
    """{+1,-1} -> {1,0}; rejects unknown entries."""
    labels = np.asarray(labels)
    if np.any(labels == 0):
        raise DegenerateLabelsError("unknown labels cannot be converted to binary targets")
    return (labels == 1).astype(np.float64)


def max_pool(scores) -> Var:
    """Cross-instance fusion: p[c] = max over instances of S[i, c].

    On ties the gradient routes to the first (lowest-index) argmax row.
    """
    sv = ad._value(scores)
    if sv.ndim != 2:
        raise ad.ShapeError(f"max_pool expects (instances, classes), got {sv.shape}")
    return ad.max_axis0(scores)


def weighted_bce(p, y: np.ndarray, priors: ClassPriors, beta: float) -> Var:
    """Class-imbalance weighted binary cross-entropy over one image.

    w[c] = y*exp(beta*(1-r[c])) + (1-y)*exp(beta*r[c]); beta=0 recovers
    plain BCE exactly.
    """
    y = np.asarray(y, dtype=np.float64)
    w = y * np.exp(beta * (1.0 - priors.r)) + (1.0 - y) * np.exp(beta * priors.r)
    pc = ad.clamp01(p)
    pos = ad.mul(ad.log(pc), w * y)
    negt = ad.mul(ad.log(ad.sub(1.0, pc)), w * (1.0 - y))
    return ad.neg(ad.sum_all(ad.add(pos, negt)))


def partial_bce(p, y_tri: np.ndarray, alpha: float, theta: float, mu: float) -> Var:
    """Partial-label BCE, normalized by the known-label proportion.

    loss = -(g(r_y)/C) * sum over known c of the BCE term, with
    g(r) = alpha * r**mu + theta and r_y the fraction of known labels.
    """
    y_tri = np.asarray(y_tri)
    c = y_tri.shape[0]
    known = np.count_nonzero(y_tri)
    if known == 0:
        raise DegenerateLabelsError("partial_bce needs at least one known label")
    r_y = known / c
    g = alpha * r_y ** mu + theta
    pos = (y_tri == 1).astype(np.float64)
    negm = (y_tri == -1).astype(np.float64)
    pc = ad.clamp01(p)
    terms = ad.add(ad.mul(ad.log(pc), pos), ad.mul(ad.log(ad.sub(1.0, pc)), negm))
    return ad.neg(ad.mul(ad.sum_all(terms), g / c))


def asymmetric_focal(p, y: np.ndarray, gamma_pos: float, gamma_neg: float,
                     m: float) -> Var:
    """Asymmetric focal loss with a hard margin on easy negatives.

    Positive term: (1-p)**gamma_pos * log(p); negative term uses the
    shifted probability p_hat = max(p - m, 0): p_hat**gamma_neg *
    log(1 - p_hat). gamma_neg >= gamma_pos >= 0 and m in [0, 1) expected;
    all three at zero recovers plain BCE exactly.
    """
    if not (gamma_neg >= gamma_pos >= 0.0):
        raise ValueError("expected gamma_neg >= gamma_pos >= 0")
    if not 0.0 <= m < 1.0:
        raise ValueError("margin must lie in [0, 1)")
    y = np.asarray(y, dtype=np.float64)
    pc = ad.clamp01(p)
    p_hat = ad.relu(ad.sub(pc, m))
    pos = ad.mul(ad.mul(pow_term(ad.sub(1.0, pc), gamma_pos), ad.log(pc)), y)
    negt = ad.mul(ad.mul(pow_term(p_hat, gamma_neg), ad.log(ad.sub(1.0, p_hat))), 1.0 - y)
    return ad.neg(ad.sum_all(ad.add(pos, negt)))


def pow_term(x, gamma: float):
    # gamma == 0 must contribute an exact factor of 1 (incl. at x == 0)
    return ad.pow_const(x, gamma)
