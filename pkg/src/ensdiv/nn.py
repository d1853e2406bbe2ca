"""Small classifier architectures and the ensemble container.

Two reference architectures are provided:

* ``mlp``: flatten, then ``Linear -> ReLU`` per hidden width, then a linear head.
* ``cnn``: ``Conv(k, same padding) -> ReLU`` per channel entry, global
  average pooling, then a linear head.

Weights use Kaiming-uniform initialisation (bound ``sqrt(6 / fan_in)``),
biases start at zero.  Parameters are drawn in registry order from a
generator seeded with ``ModelSpec.seed``, so a spec fully determines them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensorio
from .exceptions import CheckpointError, ConfigError, ShapeError


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    input_shape: tuple = (3, 32, 32)
    n_classes: int = 8
    hidden: tuple = (64,)
    channels: tuple = (8, 16)
    kernel_sizes: tuple = (3, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(s) for s in self.kernel_sizes))
        self.validate()

    def validate(self):
        if self.kind not in ("mlp", "cnn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"invalid input shape {self.input_shape}")
        if self.kind == "mlp" and any(w < 1 for w in self.hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn input shape must be (channels, height, width)")
            if not self.channels or any(c < 1 for c in self.channels):
                raise ConfigError(f"channel plan must be non-empty and >= 1, got {self.channels}")
            if len(self.kernel_sizes) != len(self.channels):
                raise ConfigError("kernel_sizes must match the channel plan length")
            if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
                raise ConfigError("kernel sizes must be odd and >= 1")

    def to_dict(self):
        d = asdict(self)
        for key in ("input_shape", "hidden", "channels", "kernel_sizes"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_seed(self, seed):
        return ModelSpec(**{**self.to_dict(), "seed": seed})


def _layer_plan(spec):
    """Yield ``(layer_name, kind, param_shapes)`` in forward order."""
    plan = []
    if spec.kind == "mlp":
        fan_in = int(np.prod(spec.input_shape))
        for k, width in enumerate(spec.hidden):
            plan.append((f"fc{k}", "linear", {"weight": (fan_in, width), "bias": (width,)}))
            plan.append((f"relu{k}", "relu", {}))
            fan_in = width
        plan.append(("logits", "linear", {"weight": (fan_in, spec.n_classes), "bias": (spec.n_classes,)}))
    else:
        c_in = spec.input_shape[0]
        for k, (c_out, ks) in enumerate(zip(spec.channels, spec.kernel_sizes)):
            plan.append((f"conv{k}", "conv", {"weight": (c_out, c_in, ks, ks), "bias": (c_out,)}))
            plan.append((f"relu{k}", "relu", {}))
            c_in = c_out
        plan.append(("pool", "pool", {}))
        plan.append(("logits", "linear", {"weight": (c_in, spec.n_classes), "bias": (spec.n_classes,)}))
    return plan


def _fan_in(shape):
    return int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])


class Model:
    """A classifier: spec, named parameters and an ordered layer registry."""

    def __init__(self, spec, params=None):
        self.spec = spec
        self._plan = _layer_plan(spec)
        self.layers = [name for name, _, _ in self._plan]
        self.param_shapes = {
            f"{name}.{p}": shape for name, _, shapes in self._plan for p, shape in shapes.items()
        }
        if params is None:
            params = _init_params(spec, self.param_shapes)
        self.params = {}
        self.set_params(params)

    def __repr__(self):
        return f"Model(kind={self.spec.kind!r}, params={self.n_params})"

    def set_params(self, params):
        missing = set(self.param_shapes) - set(params)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)}")
        new = {}
        for name, shape in self.param_shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r}: expected shape {tuple(shape)}, got {value.shape}")
            new[name] = value.copy()
        self.params = new

    @property
    def n_params(self):
        return param_count(self)

    def forward(self, x, params=None, capture=False):
        """Run the network on a batch.

        ``x`` and ``params`` may be arrays or :class:`~ensdiv.autodiff.Var`
        objects; the result is a Var of logits ``(n, n_classes)``.  With
        ``capture`` a dict of per-layer activation Vars is also returned.
        """
        params = self.params if params is None else params
        x = ad.as_var(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {x.shape} does not match model input (n, {', '.join(map(str, self.spec.input_shape))})"
            )
        acts = {}
        h = x
        if self.spec.kind == "mlp":
            h = h.reshape(x.shape[0], -1)
        for name, kind, _ in self._plan:
            if kind == "linear":
                h = ad.matmul(h, ad.as_var(params[f"{name}.weight"])) + params[f"{name}.bias"]
            elif kind == "conv":
                w = ad.as_var(params[f"{name}.weight"])
                h = ad.conv2d(h, w, stride=1, pad=w.shape[2] // 2)
                h = h + ad.as_var(params[f"{name}.bias"]).reshape(1, -1, 1, 1)
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "pool":
                h = h.mean(axis=(2, 3))
            if capture:
                acts[name] = h
        return (h, acts) if capture else h

    def logits(self, X, batch_size=256):
        X = np.asarray(X, dtype=np.float64)
        out = [self.forward(X[i : i + batch_size]).value for i in range(0, len(X), batch_size)]
        if not out:
            return np.zeros((0, self.spec.n_classes))
        return np.concatenate(out, axis=0)

    def predict(self, X, batch_size=256):
        return self.logits(X, batch_size).argmax(axis=1)

    def copy(self):
        return Model(self.spec, self.params)


def _init_params(spec, shapes):
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def build(spec):
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    return Model(spec)


def param_count(model_or_spec):
    model = model_or_spec if isinstance(model_or_spec, Model) else Model(model_or_spec)
    return int(sum(int(np.prod(s)) for s in model.param_shapes.values()))


def forward(model, batch):
    """Logits of ``model`` on ``batch`` as an array."""
    return model.forward(np.asarray(batch, dtype=np.float64)).value


class EnsembleModel:
    """An ordered collection of at least two members with matching I/O."""

    def __init__(self, members):
        members = list(members)
        if len(members) < 2:
            raise ConfigError("an ensemble needs at least two members")
        first = members[0].spec
        for m in members[1:]:
            if m.spec.input_shape != first.input_shape or m.spec.n_classes != first.n_classes:
                raise ConfigError("ensemble members must share input shape and class count")
        self.members = members

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def n_classes(self):
        return self.members[0].spec.n_classes

    @property
    def input_shape(self):
        return self.members[0].spec.input_shape

    @property
    def n_params(self):
        return sum(m.n_params for m in self.members)

    def member_logits(self, X, batch_size=256):
        """Stacked logits of shape ``(M, n, n_classes)``."""
        return np.stack([m.logits(X, batch_size) for m in self.members])


@dataclass
class ActivationCapture:
    """Per-layer activation matrices, one row per sample."""

    layers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def names(self):
        return list(self.layers)


def capture_activations(model, X, layer_names=None, batch_size=256):
    layer_names = list(model.layers if layer_names is None else layer_names)
    unknown = [n for n in layer_names if n not in model.layers]
    if unknown:
        raise KeyError(f"unknown layer name(s) {unknown}; available: {model.layers}")
    X = np.asarray(X, dtype=np.float64)
    chunks = {n: [] for n in layer_names}
    for i in range(0, len(X), batch_size):
        _, acts = model.forward(X[i : i + batch_size], capture=True)
        for n in layer_names:
            a = acts[n].value
            chunks[n].append(a.reshape(a.shape[0], -1))
    return ActivationCapture({n: np.concatenate(chunks[n], axis=0) for n in layer_names})


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_KIND = "checkpoint"


def save(model, path, meta=None):
    header = {"spec": model.spec.to_dict(), **(meta or {})}
    tensorio.write_tensors(path, model.params, kind=CHECKPOINT_KIND, meta=header)


def load(path):
    tensors, meta = tensorio.read_tensors(path, kind=CHECKPOINT_KIND)
    try:
        spec = ModelSpec.from_dict(meta["spec"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header has no valid model spec: {exc}") from None
    model = Model(spec, params=_zeros_like(spec))
    if list(tensors) != list(model.param_shapes):
        raise CheckpointError("parameter names disagree with the spec in the header")
    for name, shape in model.param_shapes.items():
        if tensors[name].shape != tuple(shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {tensors[name].shape}, spec implies {tuple(shape)}"
            )
    model.set_params(tensors)
    return model


def _zeros_like(spec):
    return {
        f"{name}.{p}": np.zeros(shape)
        for name, _, shapes in _layer_plan(spec)
        for p, shape in shapes.items()
    }


def spec_text(spec):
    return json.dumps(spec.to_dict(), sort_keys=True)
