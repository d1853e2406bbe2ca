"""scikit-learn compatible front end.

``EnsembleClassifier`` trains M member networks jointly under one of the
ensemble losses and predicts through a consensus rule.  ``Corruption`` and
``AttributionTransformer`` expose corruptions and attribution maps as
transformers so they compose with ``sklearn.pipeline``.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .consensus import combine
from .corruptions import CorruptionSpec, corrupt_images
from .attribution import attribution_batch
from .exceptions import ConfigError
from .losses import LossConfig, compute_loss
from .nn import EnsembleModel, Model, ModelSpec
from .optim import OptimConfig, Optimizer


def _check_images(X):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        return X
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W) or a 2-D matrix, got {X.shape}")
    return X


def member_specs(members, input_shape, n_classes, random_state):
    """Resolve the ``members`` parameter into concrete ModelSpecs."""
    if members is None:
        members = 3
    if isinstance(members, int):
        members = [{"kind": "mlp", "hidden": [64], "seed": random_state + i} for i in range(members)]
    specs = []
    for i, m in enumerate(members):
        d = m.to_dict() if isinstance(m, ModelSpec) else dict(m)
        d.setdefault("seed", random_state + i)
        d["input_shape"] = list(input_shape)
        d["n_classes"] = n_classes
        specs.append(ModelSpec.from_dict(d))
    return specs


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class EnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Jointly trained ensemble of small neural classifiers.

    Parameters
    ----------
    members : int, list of ModelSpec or dict, default=3
        Member architectures. An int builds that many one-hidden-layer MLPs.
        ``input_shape`` and ``n_classes`` are always taken from the data.
    loss : {"independent", "gncl", "balanced", "gncl-masked", "attribution-div"}
    lam : float
        Weight of the diversity term (or the ensemble/member mix for "balanced").
    loss_consensus : str
        Ensemble output used inside the GNCL penalty.
    curvature : {"ce-softmax-hessian", "mse-identity"}
    consensus : {"average", "median", "geometric", "vote"}
        Prediction-time combination rule.
    optimizer, lr, betas, eps, momentum, decay_factor, decay_every
        Optimizer settings, see :class:`ensdiv.optim.OptimConfig`.
    epochs, batch_size : int
    n_classes : int or None
        Defaults to ``max(y) + 1``.
    random_state : int
        Seeds member initialisation, batch order and vote tie-breaks.
    """

    def __init__(
        self,
        members=3,
        loss="independent",
        lam=0.2,
        loss_consensus="average",
        curvature="ce-softmax-hessian",
        consensus="average",
        optimizer="adabelief",
        lr=1e-3,
        betas=(0.9, 0.999),
        eps=1e-8,
        momentum=0.0,
        decay_factor=0.9,
        decay_every=30,
        epochs=10,
        batch_size=64,
        n_classes=None,
        random_state=0,
        verbose=False,
    ):
        self.members = members
        self.loss = loss
        self.lam = lam
        self.loss_consensus = loss_consensus
        self.curvature = curvature
        self.consensus = consensus
        self.optimizer = optimizer
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.random_state = random_state
        self.verbose = verbose

    def _configs(self):
        loss = LossConfig(self.loss, self.lam, self.loss_consensus, self.curvature)
        opt = OptimConfig(
            self.optimizer, self.lr, tuple(self.betas), self.eps, self.momentum,
            decay_factor=self.decay_factor, decay_every=self.decay_every,
        )
        return loss, opt

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _check_images(X)
        y = y.astype(np.int64)
        if y.min() < 0:
            raise ValueError("labels must be nonnegative integers")
        n_classes = self.n_classes or int(y.max()) + 1
        if y.max() >= n_classes:
            raise ValueError(f"label {y.max()} out of range for {n_classes} classes")
        loss_cfg, opt_cfg = self._configs()
        specs = member_specs(self.members, X.shape[1:], n_classes, self.random_state)
        if len(specs) < (2 if loss_cfg.kind != "independent" else 1):
            raise ConfigError(f"loss {loss_cfg.kind!r} needs at least two members")
        models = [Model(s) for s in specs]
        self.optimizers_ = [Optimizer(opt_cfg) for _ in models]
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.history_ = []
        self.diverged_epoch_ = None
        self.best_epoch_ = None
        best_params, best_acc = None, -np.inf
        have_val = X_val is not None and y_val is not None
        rng = np.random.default_rng(self.random_state)

        for epoch in range(self.epochs):
            for opt in self.optimizers_:
                opt.set_epoch(epoch)
            order = rng.permutation(len(X))
            sums = {"loss": 0.0, "penalty": 0.0, "n": 0}
            correct = np.zeros(len(models))
            for start in range(0, len(X), self.batch_size):
                idx = order[start : start + self.batch_size]
                xb, yb = X[idx], y[idx]
                with ad.Graph() as g:
                    leaves = [{k: g.leaf(v) for k, v in m.params.items()} for m in models]
                    out, logits = compute_loss(loss_cfg, g, models, leaves, xb, yb)
                    value = float(out.total.value)
                    if not np.isfinite(value) or not np.isfinite(out.objective.value):
                        self.diverged_epoch_ = epoch
                        break
                    flat = [v for d in leaves for v in d.values()]
                    grads = g.grad(out.objective, flat)
                for h_i, k in zip(logits, range(len(models))):
                    correct[k] += np.sum(h_i.value.argmax(axis=1) == yb)
                pos = 0
                for m, opt in zip(models, self.optimizers_):
                    names = list(m.params)
                    gd = dict(zip(names, grads[pos : pos + len(names)]))
                    pos += len(names)
                    m.params = opt.step(m.params, gd)
                sums["loss"] += value * len(idx)
                if out.penalty is not None:
                    sums["penalty"] += float(out.penalty.value) * len(idx)
                sums["n"] += len(idx)
            if self.diverged_epoch_ is not None:
                warnings.warn(f"training diverged (non-finite loss) in epoch {epoch}", RuntimeWarning, stacklevel=2)
                break
            record = {
                "epoch": epoch,
                "lr": self.optimizers_[0].lr,
                "loss": sums["loss"] / sums["n"],
                "penalty": sums["penalty"] / sums["n"],
                "train_member_acc": (correct / sums["n"]).tolist(),
            }
            if have_val:
                acc_ens, acc_members = self._val_scores(models, X_val, y_val)
                record["val_ensemble_acc"] = acc_ens
                record["val_member_acc"] = acc_members
                if acc_ens > best_acc:
                    best_acc = acc_ens
                    best_params = [dict(m.params) for m in models]
                    self.best_epoch_ = epoch
            self.history_.append(record)
            if self.verbose:
                print(record)

        self.ensemble_ = models if len(models) < 2 else EnsembleModel(models)
        self.models_ = models
        self.best_params_ = best_params
        return self

    def _val_scores(self, models, X_val, y_val):
        y_val = np.asarray(y_val)
        logits = np.stack([m.logits(X_val) for m in models])
        _, pred = combine(logits, self.consensus, self.random_state)
        return float(np.mean(pred == y_val)), [float(np.mean(l.argmax(1) == y_val)) for l in logits]

    def member_logits(self, X):
        check_is_fitted(self, "models_")
        X = _check_images(X)
        return np.stack([m.logits(X) for m in self.models_])

    def decision_function(self, X):
        scores, _ = combine(self.member_logits(X), self.consensus, self.random_state)
        return scores

    def predict(self, X):
        _, pred = combine(self.member_logits(X), self.consensus, self.random_state)
        return self.classes_[pred]

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if self.consensus in ("average", "median"):
            return _softmax(scores)
        return scores / scores.sum(axis=1, keepdims=True)

    def member_predict(self, X):
        return self.member_logits(X).argmax(axis=-1)


class Corruption(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one synthetic corruption to images."""

    def __init__(self, kind="lines", strength=1.6, seed=0):
        self.kind = kind
        self.strength = strength
        self.seed = seed

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self.strength, self.seed)
        return self

    def transform(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return corrupt_images(X, CorruptionSpec(self.kind, self.strength, self.seed))


class AttributionTransformer(TransformerMixin, BaseEstimator):
    """Map images to per-member attribution maps ``(M, n, C, H, W)``.

    ``models`` is a fitted :class:`EnsembleClassifier` or a list of Models.
    """

    def __init__(self, models=None, method="saliency", steps=50, target_policy="predicted"):
        self.models = models
        self.method = method
        self.steps = steps
        self.target_policy = target_policy

    def fit(self, X=None, y=None):
        self.labels_ = None if y is None else np.asarray(y)
        return self

    def transform(self, X, y=None):
        X = _check_images(X)
        models = self.models.models_ if isinstance(self.models, EnsembleClassifier) else list(self.models)
        labels = y if y is not None else getattr(self, "labels_", None)
        return attribution_batch(models, X, self.method, self.steps, self.target_policy, labels)
