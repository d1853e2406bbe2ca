"""Littlewood-Miller model of design diversity on finite spaces.

A world has inputs with probabilities ``Q(x)``, programs with failure sets
``omega(pi, x)`` and methodologies, each a distribution over programs.  The
difficulty function of methodology M is ``theta_M(x) = sum_pi S_M(pi) omega(pi, x)``
and two independently developed versions fail together with probability
``E_Q[theta_A theta_B] = E[theta_A] E[theta_B] + cov_Q(theta_A, theta_B)``.

World files are JSON::

    {"inputs": [{"name": "x1", "q": 0.5}, ...],
     "programs": [{"name": "p1", "fails_on": ["x1"]}, ...],
     "methodologies": {"A": {"p1": 0.9, "p2": 0.1}, ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import FormatError

TOL = 1e-12


@dataclass
class LMWorld:
    input_names: list
    q: np.ndarray  # (n_inputs,)
    program_names: list
    omega: np.ndarray  # (n_programs, n_inputs) of 0/1
    methodologies: dict  # name -> (n_programs,) distribution

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.shape != (len(self.program_names), len(self.input_names)):
            raise FormatError(f"failure matrix shape {self.omega.shape} does not match the spaces")
        if not np.isin(self.omega, (0.0, 1.0)).all():
            raise FormatError("failure indicators must be 0 or 1")
        if np.any(self.q < 0) or abs(self.q.sum() - 1.0) > TOL:
            raise FormatError(f"input distribution must be nonnegative and sum to 1 (sum={self.q.sum()!r})")
        self.methodologies = {k: np.asarray(v, dtype=np.float64) for k, v in self.methodologies.items()}
        for name, s in self.methodologies.items():
            if s.shape != (len(self.program_names),):
                raise FormatError(f"methodology {name!r} has the wrong length")
            if np.any(s < 0) or abs(s.sum() - 1.0) > TOL:
                raise FormatError(f"methodology {name!r} must be nonnegative and sum to 1")

    def methodology(self, m):
        if isinstance(m, str):
            try:
                return self.methodologies[m]
            except KeyError:
                raise KeyError(f"unknown methodology {m!r}; known: {sorted(self.methodologies)}") from None
        return np.asarray(m, dtype=np.float64)

    @classmethod
    def from_dict(cls, d):
        try:
            inputs = d["inputs"]
            programs = d["programs"]
            names = [x["name"] for x in inputs]
            index = {n: i for i, n in enumerate(names)}
            omega = np.zeros((len(programs), len(inputs)))
            for p, prog in enumerate(programs):
                for x in prog.get("fails_on", []):
                    omega[p, index[x]] = 1.0
            pnames = [p["name"] for p in programs]
            meth = {}
            for mname, dist in d["methodologies"].items():
                unknown = set(dist) - set(pnames)
                if unknown:
                    raise FormatError(f"methodology {mname!r} references unknown programs {sorted(unknown)}")
                meth[mname] = [float(dist.get(p, 0.0)) for p in pnames]
            return cls(names, [float(x["q"]) for x in inputs], pnames, omega, meth)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed world description: {exc!r}") from None

    def to_dict(self):
        return {
            "inputs": [{"name": n, "q": float(q)} for n, q in zip(self.input_names, self.q)],
            "programs": [
                {"name": p, "fails_on": [x for x, f in zip(self.input_names, row) if f]}
                for p, row in zip(self.program_names, self.omega)
            ],
            "methodologies": {
                k: {p: float(v) for p, v in zip(self.program_names, s) if v}
                for k, s in self.methodologies.items()
            },
        }


def load_world(path):
    try:
        return LMWorld.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"world file is not valid JSON: {exc}") from None


def reference_world_path(name):
    """Path of a shipped world: ``anticorrelated`` or ``same-methodology``."""
    return resources.files("ensdiv") / "worlds" / f"{name}.json"


def reference_world(name):
    return LMWorld.from_dict(json.loads(reference_world_path(name).read_text()))


def difficulty(world, methodology):
    return world.methodology(methodology) @ world.omega


def joint_failure_exact(world, meth_a, meth_b):
    ta = difficulty(world, meth_a)
    tb = difficulty(world, meth_b)
    q = world.q
    ea, eb = float(q @ ta), float(q @ tb)
    p_both = float(q @ (ta * tb))
    cov = float(q @ ((ta - ea) * (tb - eb)))
    return {"p_both": p_both, "e_theta_a": ea, "e_theta_b": eb, "cov": cov, "product": ea * eb}


def joint_failure_mc(world, meth_a, meth_b, trials, seed=0):
    """Monte Carlo estimate of P(both fail) with its binomial standard error."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    sa, sb = world.methodology(meth_a), world.methodology(meth_b)
    pa = rng.choice(len(sa), size=trials, p=sa)
    pb = rng.choice(len(sb), size=trials, p=sb)
    x = rng.choice(len(world.q), size=trials, p=world.q)
    both = world.omega[pa, x] * world.omega[pb, x]
    mean = float(both.mean())
    return {"estimate": mean, "stderr": float(np.sqrt(mean * (1 - mean) / trials)), "trials": trials}


def random_world(rng, n_inputs=None, n_programs=None, methodologies=("A", "B")):
    n_inputs = n_inputs or int(rng.integers(1, 8))
    n_programs = n_programs or int(rng.integers(1, 8))
    q = rng.dirichlet(np.ones(n_inputs))
    omega = (rng.random((n_programs, n_inputs)) < rng.random()).astype(np.float64)
    meth = {m: rng.dirichlet(np.ones(n_programs)) for m in methodologies}
    return LMWorld(
        [f"x{i}" for i in range(n_inputs)], q, [f"p{i}" for i in range(n_programs)], omega, meth
    )
