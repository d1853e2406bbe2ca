"""Combining member outputs into one ensemble prediction."""

import numpy as np

from .exceptions import ConfigError, ShapeError

KINDS = ("average", "median", "geometric", "vote")
PROB_FLOOR = 1e-12


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def vote_tiebreak_rng(seed, sample_index):
    return np.random.default_rng([int(seed), int(sample_index)])


def combine(member_logits, kind="average", seed=0):
    """Consensus scores ``(n, S)`` and predicted classes ``(n,)``.

    ``member_logits`` has shape ``(M, n, S)``.  Score-based kinds break
    argmax ties by the lowest class index; ``vote`` draws among tied classes
    with a generator keyed on ``(seed, sample index)``.
    """
    logits = np.asarray(member_logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise ShapeError(f"member logits must have shape (M, n, S), got {logits.shape}")
    if kind == "average":
        scores = logits.mean(axis=0)
    elif kind == "median":
        scores = np.median(logits, axis=0)
    elif kind == "geometric":
        probs = np.maximum(_softmax(logits), PROB_FLOOR)
        g = np.exp(np.log(probs).mean(axis=0))
        scores = g / g.sum(axis=-1, keepdims=True)
    elif kind == "vote":
        m, n, s = logits.shape
        votes = logits.argmax(axis=-1)
        scores = np.zeros((n, s))
        for i in range(m):
            scores[np.arange(n), votes[i]] += 1
        preds = np.empty(n, dtype=np.int64)
        for j in range(n):
            top = np.flatnonzero(scores[j] == scores[j].max())
            preds[j] = top[0] if len(top) == 1 else vote_tiebreak_rng(seed, j).choice(top)
        return scores, preds
    else:
        raise ConfigError(f"unknown consensus kind {kind!r}; expected one of {KINDS}")
    return scores, scores.argmax(axis=-1)
