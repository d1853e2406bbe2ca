"""SGD with momentum and AdaBelief, plus the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, NonFiniteError


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adabelief"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    decay_factor: float = 0.9
    decay_every: int = 30

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.kind not in ("sgd", "adabelief"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.momentum < 0 or self.decay_every < 1 or not self.decay_factor > 0:
            raise ConfigError("invalid momentum or decay settings")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d


def lr_at_epoch(config, epoch):
    """Step decay: multiply by ``decay_factor`` every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


class Optimizer:
    """Per-model optimizer state; ``step`` returns a fresh parameter dict."""

    def __init__(self, config=None):
        self.config = config or OptimConfig()
        self.t = 0
        self.state = {}
        self.lr = self.config.lr

    def set_epoch(self, epoch):
        self.lr = lr_at_epoch(self.config, epoch)

    def step(self, params, grads):
        for name in params:
            if name not in grads:
                raise KeyError(f"no gradient for parameter {name!r}")
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        update = self._adabelief if self.config.kind == "adabelief" else self._sgd
        return {name: update(name, p, np.asarray(grads[name], dtype=np.float64)) for name, p in params.items()}

    def _sgd(self, name, p, g):
        cfg = self.config
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if cfg.momentum:
            buf = self.state.get(name)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            self.state[name] = buf
            g = buf
        return p - self.lr * g

    def _adabelief(self, name, p, g):
        cfg = self.config
        b1, b2 = cfg.betas
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        st = self.state.get(name)
        if st is None:
            st = self.state[name] = {"m": np.zeros_like(p), "s": np.zeros_like(p)}
        m = b1 * st["m"] + (1 - b1) * g
        s = b2 * st["s"] + (1 - b2) * (g - m) ** 2 + cfg.eps
        st["m"], st["s"] = m, s
        m_hat = m / (1 - b1**self.t)
        s_hat = s / (1 - b2**self.t)
        return p - self.lr * m_hat / (np.sqrt(s_hat) + cfg.eps)

    def state_tensors(self):
        """Flat name -> array view of the state, for checkpointing."""
        out = {"__step__": np.array([float(self.t)])}
        for name, st in self.state.items():
            if isinstance(st, dict):
                for key, arr in st.items():
                    out[f"{name}/{key}"] = arr
            else:
                out[f"{name}/momentum"] = st
        return out

    def load_state_tensors(self, tensors):
        self.t = int(tensors["__step__"][0])
        self.state = {}
        for key, arr in tensors.items():
            if key == "__step__":
                continue
            name, slot = key.rsplit("/", 1)
            if slot == "momentum":
                self.state[name] = arr.copy()
            else:
                self.state.setdefault(name, {})[slot] = arr.copy()
