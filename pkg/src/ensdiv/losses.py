"""Ensemble training losses.

All functions take per-member logits ``(n, S)`` as :class:`Var` objects (or
arrays) plus integer labels, and return a :class:`LossBreakdown` whose
fields are Vars so the result can be differentiated.  Per-sample terms are
averaged over the batch.

``objective`` is the quantity the trainer differentiates.  It equals
``total`` for every kind except ``independent``, where each member follows
the gradient of its own cross-entropy, i.e. the objective is the *sum* of
member losses while the reported total is their mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, NonFiniteError, ShapeError

LOSS_KINDS = ("independent", "gncl", "balanced", "gncl-masked", "attribution-div")
CURVATURES = ("mse-identity", "ce-softmax-hessian")
GNCL_CONSENSUS = ("average", "median", "geometric", "vote")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    kind: str = "independent"
    lam: float = 0.2
    consensus: str = "average"
    curvature: str = "ce-softmax-hessian"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.curvature not in CURVATURES:
            raise ConfigError(f"unknown curvature mode {self.curvature!r}")
        if self.consensus not in GNCL_CONSENSUS:
            raise ConfigError(f"unknown consensus kind {self.consensus!r}")
        if self.kind == "balanced" and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"balanced loss needs lam in [0, 1], got {self.lam}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    kind: str
    total: ad.Var
    member_losses: list
    penalty: Optional[ad.Var] = None
    ensemble_loss: Optional[ad.Var] = None
    objective: Optional[ad.Var] = None
    lam: float = 0.0

    def __post_init__(self):
        if self.objective is None:
            self.objective = self.total

    def floats(self):
        return {
            "total": float(self.total.value),
            "members": [float(l.value) for l in self.member_losses],
            "penalty": None if self.penalty is None else float(self.penalty.value),
            "ensemble": None if self.ensemble_loss is None else float(self.ensemble_loss.value),
        }

    def recompose(self):
        """Rebuild ``total`` from the parts using this kind's formula."""
        members = [float(l.value) for l in self.member_losses]
        m = len(members)
        if self.kind == "independent":
            return sum(members) / m
        if self.kind in ("gncl", "gncl-masked"):
            return sum(members) - float(self.penalty.value)
        if self.kind == "balanced":
            return self.lam * float(self.ensemble_loss.value) + (1 - self.lam) * sum(members) / m
        if self.kind == "attribution-div":
            return sum(members) / m - float(self.penalty.value)
        raise ConfigError(self.kind)


def _labels(labels, n_classes, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {n}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return y.astype(np.int64)


def _check_members(member_logits, minimum):
    member_logits = [ad.as_var(h) for h in member_logits]
    if len(member_logits) < minimum:
        raise ConfigError(f"need at least {minimum} member(s), got {len(member_logits)}")
    shape = member_logits[0].shape
    if len(shape) != 2:
        raise ShapeError(f"member logits must be (n, S), got {shape}")
    for h in member_logits[1:]:
        if h.shape != shape:
            raise ShapeError(f"member logits shapes differ: {shape} vs {h.shape}")
    return member_logits


def cross_entropy(logits, labels):
    """Batch-mean cross-entropy of softmax(logits) against integer labels."""
    logits = ad.as_var(logits)
    n, s = logits.shape
    y = _labels(labels, s, n)
    logp = ad.log_softmax(logits, axis=1)
    return -(logp[np.arange(n), y].mean())


def loss_independent(member_logits, labels):
    hs = _check_members(member_logits, 1)
    losses = [cross_entropy(h, labels) for h in hs]
    total = sum(losses[1:], losses[0])
    return LossBreakdown("independent", total * (1.0 / len(hs)), losses, objective=total)


def _median_weights(values):
    """Constant weights selecting the elementwise median over axis 0."""
    m = values.shape[0]
    order = np.argsort(values, axis=0, kind="stable")
    w = np.zeros_like(values)
    ranks = [m // 2] if m % 2 else [m // 2 - 1, m // 2]
    for r in ranks:
        np.put_along_axis(w, order[r : r + 1], 1.0 / len(ranks), axis=0)
    return w


def _consensus_output(hs, consensus, space):
    """Ensemble output ``f`` and the member outputs it is compared with.

    ``space`` is ``"logits"`` or ``"probs"``.  Geometric-mean and vote
    consensus only exist in probability space.
    """
    m = len(hs)
    if consensus in ("geometric", "vote"):
        space = "probs"
    if consensus == "average":
        f_logits = sum(hs[1:], hs[0]) * (1.0 / m)
    elif consensus == "median":
        w = _median_weights(np.stack([h.value for h in hs]))
        f_logits = sum((hs[i] * w[i] for i in range(1, m)), hs[0] * w[0])
    if space == "logits":
        return f_logits, hs, space
    probs = [ad.softmax(h, axis=1) for h in hs]
    if consensus in ("average", "median"):
        f = ad.softmax(f_logits, axis=1)
    elif consensus == "geometric":
        logs = [ad.log(ad.maximum(p, PROB_FLOOR)) for p in probs]
        g = ad.exp(sum(logs[1:], logs[0]) * (1.0 / m))
        f = g / g.sum(axis=1, keepdims=True)
    else:
        n, s = hs[0].shape
        counts = np.zeros((n, s))
        for h in hs:
            counts[np.arange(n), h.value.argmax(axis=1)] += 1.0
        f = ad.Var(counts / m)
    return f, probs, space


def _quadratic_terms(outputs, f, curvature, space):
    """Per-member, per-sample ``d_i^T D d_i`` with ``d_i = out_i - f``."""
    terms = []
    for out in outputs:
        d = out - f
        if curvature == "mse-identity":
            q = (d * d).sum(axis=1) * 2.0
        else:
            fbar = f if space == "probs" else ad.softmax(f, axis=1)
            proj = (fbar * d).sum(axis=1)
            q = (fbar * d * d).sum(axis=1) - proj * proj
        terms.append(q)
    return terms


def _gncl(member_logits, labels, lam, curvature, consensus, mask, kind):
    if lam < 0:
        raise ConfigError(f"lam must be >= 0, got {lam}")
    if curvature not in CURVATURES:
        raise ConfigError(f"unknown curvature mode {curvature!r}")
    hs = _check_members(member_logits, 2)
    m = len(hs)
    losses = [cross_entropy(h, labels) for h in hs]
    space = "probs" if curvature == "ce-softmax-hessian" else "logits"
    f, outputs, space = _consensus_output(hs, consensus, space)
    terms = _quadratic_terms(outputs, f, curvature, space)
    if mask:
        y = _labels(labels, hs[0].shape[1], hs[0].shape[0])
        terms = [q * (h.value.argmax(axis=1) == y).astype(np.float64) for q, h in zip(terms, hs)]
    per_sample = sum(terms[1:], terms[0])
    penalty = per_sample.mean() * (lam / (2.0 * m))
    total = sum(losses[1:], losses[0]) - penalty
    return LossBreakdown(kind, total, losses, penalty=penalty, lam=lam)


def loss_gncl(member_logits, labels, lam=0.2, curvature="ce-softmax-hessian", consensus="average"):
    """Sum of member losses minus the weighted curvature-scaled spread around ``f``."""
    return _gncl(member_logits, labels, lam, curvature, consensus, False, "gncl")


def loss_gncl_masked(member_logits, labels, lam=0.2, curvature="ce-softmax-hessian"):
    """GNCL with averaging consensus; a member's penalty is dropped where it misclassifies."""
    return _gncl(member_logits, labels, lam, curvature, "average", True, "gncl-masked")


def loss_balanced(member_logits, labels, lam=0.5):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"balanced loss needs lam in [0, 1], got {lam}")
    hs = _check_members(member_logits, 2)
    m = len(hs)
    losses = [cross_entropy(h, labels) for h in hs]
    ens = cross_entropy(sum(hs[1:], hs[0]) * (1.0 / m), labels)
    member_mean = sum(losses[1:], losses[0]) * (1.0 / m)
    total = ens * lam + member_mean * (1.0 - lam)
    return LossBreakdown("balanced", total, losses, ensemble_loss=ens, lam=lam)


def attribution_variance(maps):
    """Per-sample summed population variance across members.

    ``maps`` is a list of M Vars of shape ``(n, ...)``; returns a Var ``(n,)``.
    """
    stacked = ad.stack(maps, axis=0)
    v = ad.var_leading(stacked)
    return v.reshape(v.shape[0], -1).sum(axis=1)


def loss_attribution_div(graph, members, member_params, x, labels, lam=0.2):
    """Mean member cross-entropy minus ``lam`` times saliency diversity.

    Saliency maps are input gradients recorded with ``create_graph=True``,
    so the returned total can be differentiated w.r.t. ``member_params``.
    """
    from .attribution import saliency_vars

    if lam < 0:
        raise ConfigError(f"lam must be >= 0, got {lam}")
    if len(members) < 2:
        raise ConfigError("attribution diversity needs at least 2 members")
    logits, maps = saliency_vars(graph, members, member_params, x)
    losses = [cross_entropy(h, labels) for h in logits]
    diversity = attribution_variance(maps).mean()
    if not np.isfinite(diversity.value):
        raise NonFiniteError("attribution diversity is not finite")
    penalty = diversity * lam
    total = sum(losses[1:], losses[0]) * (1.0 / len(losses)) - penalty
    out = LossBreakdown("attribution-div", total, losses, penalty=penalty, lam=lam)
    out.diversity = diversity
    out.member_logits = logits
    return out


def compute_loss(config, graph, members, member_params, x, labels):
    """Dispatch on ``config.kind``; returns ``(LossBreakdown, member logit Vars)``."""
    if config.kind == "attribution-div":
        out = loss_attribution_div(graph, members, member_params, x, labels, config.lam)
        return out, out.member_logits
    logits = [m.forward(x, p) for m, p in zip(members, member_params)]
    if config.kind == "independent":
        out = loss_independent(logits, labels)
    elif config.kind == "gncl":
        out = loss_gncl(logits, labels, config.lam, config.curvature, config.consensus)
    elif config.kind == "gncl-masked":
        out = loss_gncl_masked(logits, labels, config.lam, config.curvature)
    else:
        out = loss_balanced(logits, labels, config.lam)
    return out, logits
