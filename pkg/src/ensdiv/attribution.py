"""Input attribution: Saliency and Integrated Gradients.

Saliency is ``|d logit_t / d x|``.  Integrated Gradients uses a right-endpoint
Riemann sum with ``m`` steps::

    IG(x) = (x - x') * (1/m) * sum_{k=1..m} grad F(x' + k/m (x - x'))

Maps are returned raw (not normalised) with the model's input shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import tensorio
from .exceptions import ConfigError, ShapeError

METHODS = ("saliency", "ig")


@dataclass
class AttributionMap:
    scores: np.ndarray
    target: int
    method: str
    steps: Optional[int] = None

    @property
    def shape(self):
        return self.scores.shape


def _check_targets(targets, n, n_classes):
    t = np.broadcast_to(np.asarray(targets, dtype=np.int64), (n,))
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"target class out of range [0, {n_classes})")
    return t


def _target_gradient(model, X, targets):
    """Input gradient of the target logit for each row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    t = _check_targets(targets, len(X), model.spec.n_classes)
    with ad.Graph() as g:
        xv = g.leaf(X)
        logits = model.forward(xv)
        score = logits[np.arange(len(X)), t].sum()
        (grad,) = g.grad(score, [xv])
    return grad


def _as_batch(model, sample):
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != model.spec.input_shape:
        raise ShapeError(f"sample shape {sample.shape} does not match model input {model.spec.input_shape}")
    return sample[None]


def saliency(model, sample, target):
    grad = _target_gradient(model, _as_batch(model, sample), target)
    return AttributionMap(np.abs(grad[0]), int(target), "saliency")


def saliency_batch(model, X, targets, batch_size=256):
    X = np.asarray(X, dtype=np.float64)
    t = _check_targets(targets, len(X), model.spec.n_classes)
    out = np.empty_like(X)
    for i in range(0, len(X), batch_size):
        out[i : i + batch_size] = np.abs(_target_gradient(model, X[i : i + batch_size], t[i : i + batch_size]))
    return out


def integrated_gradients(model, sample, target, baseline=None, steps=50):
    x = _as_batch(model, sample)[0]
    scores = integrated_gradients_batch(model, x[None], [target], baseline, steps)[0]
    return AttributionMap(scores, int(target), "ig", steps)


def integrated_gradients_batch(model, X, targets, baseline=None, steps=50, chunk=512):
    if steps < 1:
        raise ConfigError(f"integrated gradients needs steps >= 1, got {steps}")
    X = np.asarray(X, dtype=np.float64)
    base = np.zeros_like(X[0]) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != X.shape[1:]:
        raise ShapeError(f"baseline shape {base.shape} does not match sample shape {X.shape[1:]}")
    t = _check_targets(targets, len(X), model.spec.n_classes)
    alphas = np.arange(1, steps + 1) / steps
    out = np.empty_like(X)
    per = max(1, chunk // steps)
    for i in range(0, len(X), per):
        xs = X[i : i + per]
        delta = xs - base
        path = base + alphas.reshape((1, -1) + (1,) * (X.ndim - 1)) * delta[:, None]
        flat = path.reshape((-1,) + X.shape[1:])
        grads = _target_gradient(model, flat, np.repeat(t[i : i + per], steps))
        grads = grads.reshape((len(xs), steps) + X.shape[1:])
        out[i : i + per] = delta * grads.mean(axis=1)
    return out


def select_targets(model, X, policy="predicted", labels=None):
    if policy == "predicted":
        return model.predict(X)
    if policy == "label":
        if labels is None:
            raise ConfigError("target policy 'label' requires labels")
        return np.asarray(labels, dtype=np.int64)
    raise ConfigError(f"unknown target policy {policy!r}")


def attribution_batch(members, X, method="saliency", steps=50, target_policy="predicted", labels=None, baseline=None):
    """Maps for every (member, sample): array of shape ``(M, n, *input_shape)``."""
    maps = []
    for model in members:
        t = select_targets(model, X, target_policy, labels)
        if method == "saliency":
            maps.append(saliency_batch(model, X, t))
        elif method == "ig":
            maps.append(integrated_gradients_batch(model, X, t, baseline, steps))
        else:
            raise ConfigError(f"unknown attribution method {method!r}")
    return np.stack(maps)


def saliency_vars(graph, members, member_params, x):
    """Differentiable saliency maps for a batch, one per member.

    Returns ``(member logits, member maps)``, both lists of Vars recorded on
    ``graph``; the maps come from a ``create_graph`` backward pass so they
    can be differentiated w.r.t. the member parameters.
    """
    xv = graph.leaf(np.asarray(x, dtype=np.float64))
    n = xv.shape[0]
    logits, maps = [], []
    for model, params in zip(members, member_params):
        h = model.forward(xv, params)
        targets = h.value.argmax(axis=1)
        score = h[np.arange(n), targets].sum()
        (g,) = graph.grad(score, [xv], create_graph=True)
        logits.append(h)
        maps.append(ad.absolute(g))
    return logits, maps


def save_maps(path, maps, meta=None):
    """Dump an ``(M, n, ...)`` map array in the named-tensor format."""
    tensors = {f"member{i}": np.asarray(m) for i, m in enumerate(maps)}
    tensorio.write_tensors(path, tensors, kind="attributions", meta=meta)


def load_maps(path):
    tensors, meta = tensorio.read_tensors(path, kind="attributions")
    return np.stack([tensors[k] for k in sorted(tensors, key=lambda s: int(s[6:]))]), meta
