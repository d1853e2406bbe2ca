"""Diversity and analysis metrics for classifier ensembles."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import ShapeError, UndefinedMetricError


# -- pairwise prediction diversity ------------------------------------------


@dataclass(frozen=True)
class CorrectnessPair:
    """Contingency counts of two classifiers' correctness (1 = correct)."""

    n11: int
    n10: int
    n01: int
    n00: int

    @property
    def total(self):
        return self.n11 + self.n10 + self.n01 + self.n00

    @classmethod
    def from_correct(cls, correct_a, correct_b):
        a = np.asarray(correct_a, dtype=bool)
        b = np.asarray(correct_b, dtype=bool)
        if a.shape != b.shape or a.ndim != 1:
            raise ShapeError(f"correctness vectors must be 1-D of equal length, got {a.shape} and {b.shape}")
        if a.size == 0:
            raise ShapeError("correctness vectors are empty")
        return cls(
            int(np.sum(a & b)), int(np.sum(a & ~b)), int(np.sum(~a & b)), int(np.sum(~a & ~b))
        )


def _pair(a, b=None):
    if isinstance(a, CorrectnessPair):
        return a
    return CorrectnessPair.from_correct(a, b)


def disagreement(correct_a, correct_b=None):
    """Fraction of samples where exactly one classifier is correct."""
    p = _pair(correct_a, correct_b)
    return (p.n01 + p.n10) / p.total


def q_statistic(correct_a, correct_b=None):
    p = _pair(correct_a, correct_b)
    den = p.n11 * p.n00 + p.n01 * p.n10
    if den == 0:
        raise UndefinedMetricError("Q-statistic undefined: N11*N00 + N01*N10 == 0")
    return (p.n11 * p.n00 - p.n01 * p.n10) / den


def rho(correct_a, correct_b=None):
    """Correlation coefficient between two correctness vectors."""
    p = _pair(correct_a, correct_b)
    den = (p.n11 + p.n10) * (p.n01 + p.n00) * (p.n11 + p.n01) * (p.n10 + p.n00)
    if den == 0:
        raise UndefinedMetricError("rho undefined: a marginal count is zero")
    return (p.n11 * p.n00 - p.n01 * p.n10) / np.sqrt(den)


def mean_pairwise(metric, correct):
    """Average ``metric`` over all member pairs of an ``(M, n)`` correctness matrix."""
    correct = np.asarray(correct, dtype=bool)
    if correct.ndim != 2 or correct.shape[0] < 2:
        raise ShapeError(f"need an (M >= 2, n) correctness matrix, got {correct.shape}")
    vals = [metric(correct[i], correct[j]) for i, j in combinations(range(len(correct)), 2)]
    return float(np.mean(vals))


# -- Shannon equitability ---------------------------------------------------


def equitability(predictions):
    """Per-sample evenness of the member predictions.

    ``predictions`` is ``(M, n)``.  Uses observed species richness per
    sample; a unanimous sample scores 0.
    """
    preds = np.asarray(predictions)
    if preds.ndim == 1:
        preds = preds[:, None]
    if preds.shape[0] < 2:
        raise ShapeError("equitability needs at least two members")
    m, n = preds.shape
    out = np.zeros(n)
    for j in range(n):
        _, counts = np.unique(preds[:, j], return_counts=True)
        if len(counts) < 2:
            continue
        p = counts / m
        out[j] = -np.sum(p * np.log(p)) / np.log(len(counts))
    return out


def shannon_split(predictions, ensemble_correct):
    """Mean equitability over ensemble-correct and ensemble-incorrect samples.

    An empty partition is reported as ``None`` rather than 0.
    """
    e = equitability(predictions)
    mask = np.asarray(ensemble_correct, dtype=bool)
    if mask.shape != e.shape:
        raise ShapeError(f"correctness mask shape {mask.shape} does not match {e.shape}")
    return {
        "H_corr": float(e[mask].mean()) if mask.any() else None,
        "H_inco": float(e[~mask].mean()) if (~mask).any() else None,
    }


# -- representation similarity ----------------------------------------------


def _centering(n):
    return np.eye(n) - np.full((n, n), 1.0 / n)


def hsic(K, L):
    """Biased HSIC estimate ``tr(K H L H) / (n-1)^2``."""
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"kernel matrices must be square and equal-sized, got {K.shape}, {L.shape}")
    n = K.shape[0]
    H = _centering(n)
    return float(np.trace(K @ H @ L @ H) / (n - 1) ** 2)


def cka(X, Y):
    """Linear-kernel centered kernel alignment between two feature matrices."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X.reshape(len(X), -1)
    Y = Y.reshape(len(Y), -1)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 3:
        raise ShapeError("cka needs at least 3 samples")
    K = X @ X.T
    L = Y @ Y.T
    kk, ll = hsic(K, K), hsic(L, L)
    scale = max(np.abs(K).max(), np.abs(L).max(), 1.0)
    if kk <= 1e-24 * scale**2 or ll <= 1e-24 * scale**2:
        raise UndefinedMetricError("cka undefined: a feature set has zero variance")
    return float(hsic(K, L) / np.sqrt(kk * ll))


def cka_map(capture_a, capture_b):
    """CKA over all layer pairs; rows follow ``capture_a`` layer order."""
    names_a, names_b = list(capture_a), list(capture_b)
    out = np.empty((len(names_a), len(names_b)))
    for i, a in enumerate(names_a):
        for j, b in enumerate(names_b):
            out[i, j] = cka(capture_a[a], capture_b[b])
    return out


# -- attribution diversity --------------------------------------------------


def attribution_diversity(maps):
    """Summed per-feature population variance across members.

    ``maps`` has shape ``(M, n, ...)``.  Returns ``(per_sample, mean)``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 2 or maps.shape[0] < 2:
        raise ShapeError(f"need maps of shape (M >= 2, n, ...), got {maps.shape}")
    per_sample = maps.var(axis=0).reshape(maps.shape[1], -1).sum(axis=1)
    return per_sample, float(per_sample.mean())


# -- ensemble analysis ------------------------------------------------------


def improvement(ensemble_accuracy, member_accuracies):
    """Ensemble accuracy minus the best member accuracy."""
    accs = list(member_accuracies)
    if not accs:
        raise ValueError("member accuracy list is empty")
    return ensemble_accuracy - max(accs)


def minmax_normalize(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        warnings.warn("min-max normalisation of constant scores; returning 0.5", RuntimeWarning, stacklevel=2)
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


@dataclass(frozen=True)
class TrendReport:
    r: float
    slope: float
    intercept: float
    n: int


def pearson_and_trend(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"x and y must be 1-D of equal length, got {x.shape}, {y.shape}")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson undefined: zero variance")
    r = float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    slope = float(np.dot(dx, dy) / sxx)
    return TrendReport(r, slope, float(y.mean() - slope * x.mean()), len(x))
