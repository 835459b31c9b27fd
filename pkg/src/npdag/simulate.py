"""Random graphs, structural mechanisms, named models and data synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import networkx as nx
import numpy as np

from .data import Dataset, philox
from .graph import Dag

GRAPH_KINDS = ("mc", "er", "sf")
MODEL_KINDS = ("sin", "agp", "ngp", "glm", "linear")
NOISE_PRESETS = (0.2, 0.5, 0.8)

# stream tags so that graph, mechanism and noise draws never share a stream
_GRAPH, _MECH, _NOISE = 11, 23, 37


# --- graphs ----------------------------------------------------------------

def gen_graph(kind: str, d: int, expected_edges: float, seed: int) -> Dag:
    kind = kind.lower()
    if d < 1:
        raise ValueError("d must be at least 1")
    max_edges = d * (d - 1) / 2
    if expected_edges < 0 or expected_edges > max_edges:
        raise ValueError(f"expected_edges={expected_edges} infeasible for d={d} (max {max_edges:g})")
    rng = philox([seed, _GRAPH])
    if kind == "mc":
        return Dag(d, frozenset((i - 1, i) for i in range(1, d)))
    if kind == "er":
        if d == 1:
            return Dag(1)
        q = expected_edges / max_edges
        iu, ju = np.triu_indices(d, k=1)
        keep = rng.random(iu.size) < q
        perm = rng.permutation(d)
        return Dag(d, frozenset(zip(perm[iu[keep]].tolist(), perm[ju[keep]].tolist())))
    if kind == "sf":
        if d == 1:
            return Dag(1)
        m = min(max(math.ceil(expected_edges / d), 1), d - 1)
        g = nx.barabasi_albert_graph(d, m, seed=int(rng.integers(2**31)))
        # node labels follow arrival order, so min -> max is old -> new
        return Dag(d, frozenset((min(u, v), max(u, v)) for u, v in g.edges()))
    raise ValueError(f"unknown graph kind {kind!r}; choose from {GRAPH_KINDS}")


# --- random Fourier feature GP draws ---------------------------------------

@dataclass(frozen=True, eq=False)
class GpFunction:
    """Fixed function ``x -> scale * sqrt(2/D) * sum_k w_k cos(<omega_k, x> + b_k)``.

    As ``D`` grows, draws of this function converge in distribution to a GP
    with kernel ``scale^2 * exp(-|x - x'|^2 / (2 * length_scale^2))``.
    """

    frequencies: np.ndarray  # (D, p)
    phases: np.ndarray  # (D,)
    weights: np.ndarray  # (D,)
    scale: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, p: int, n_features: int = 200,
             length_scale: float = 1.0, scale: float = 1.0) -> "GpFunction":
        omega = rng.normal(0.0, 1.0 / length_scale, size=(n_features, p))
        b = rng.uniform(0.0, 2 * np.pi, size=n_features)
        w = rng.normal(size=n_features)
        return cls(omega, b, w, scale)

    @property
    def p(self) -> int:
        return self.frequencies.shape[1]

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        D = self.weights.shape[0]
        phi = np.cos(X @ self.frequencies.T + self.phases)
        return self.scale * math.sqrt(2.0 / D) * (phi @ self.weights)


def sample_gp_at(X, rng: np.random.Generator, length_scale: float = 1.0,
                 scale: float = 1.0, jitter: float = 1e-9) -> np.ndarray:
    """Exact joint GP draw at the rows of ``X`` (non-default, design points only)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = scale**2 * np.exp(-sq / (2 * length_scale**2)) + jitter * np.eye(len(X))
    return np.linalg.cholesky(K) @ rng.normal(size=len(X))


# --- mechanisms ------------------------------------------------------------
# Each mechanism maps an (n, |pa|) parent matrix to the conditional mean of
# the node (or P(X=1) for binary nodes).

class Mechanism:
    kind = "base"

    def __init__(self, arity: int):
        self.arity = int(arity)

    def __call__(self, parents: np.ndarray) -> np.ndarray:
        parents = np.asarray(parents, dtype=float)
        if parents.ndim == 1:
            parents = parents[:, None]
        if parents.shape[1] != self.arity:
            raise ValueError(f"{self.kind} expects {self.arity} parents, got {parents.shape[1]}")
        return self._mean(parents)

    def _mean(self, parents):  # pragma: no cover
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "arity": self.arity}


class Zero(Mechanism):
    kind = "source"

    def __init__(self):
        super().__init__(0)

    def _mean(self, parents):
        return np.zeros(parents.shape[0])


class Linear(Mechanism):
    kind = "linear"

    def __init__(self, weights: Sequence[float]):
        super().__init__(len(weights))
        self.weights = np.asarray(weights, dtype=float)

    def _mean(self, parents):
        return parents @ self.weights

    def describe(self):
        return {**super().describe(), "weights": self.weights.tolist()}


class SineAdditive(Mechanism):
    kind = "sin"

    def _mean(self, parents):
        return np.sin(parents).sum(axis=1)


class GpAdditive(Mechanism):
    kind = "agp"

    def __init__(self, funcs: Sequence[GpFunction]):
        super().__init__(len(funcs))
        self.funcs = tuple(funcs)

    def _mean(self, parents):
        out = np.zeros(parents.shape[0])
        for k, f in enumerate(self.funcs):
            out += f(parents[:, [k]])
        return out


class GpJoint(Mechanism):
    kind = "ngp"

    def __init__(self, func: GpFunction):
        super().__init__(func.p)
        self.func = func

    def _mean(self, parents):
        return self.func(parents)


class GlmBinary(Mechanism):
    """P(X=1) = p for a source; for one parent, ``p`` if the parent is 1 and
    ``1-p`` otherwise (swapped when ``flip``)."""

    kind = "glm"

    def __init__(self, p: float, arity: int, flip: bool = False):
        if not 0 < p < 1:
            raise ValueError("p must lie in (0, 1)")
        if arity > 1:
            raise ValueError("GLM mechanism takes at most one parent")
        super().__init__(arity)
        self.p = float(p)
        self.flip = bool(flip)

    def _mean(self, parents):
        if self.arity == 0:
            return np.full(parents.shape[0], self.p)
        on = parents[:, 0] > 0.5
        if self.flip:
            on = ~on
        return np.where(on, self.p, 1 - self.p)

    def describe(self):
        return {**super().describe(), "p": self.p, "flip": self.flip}


class Custom(Mechanism):
    kind = "custom"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], arity: int, label: str):
        super().__init__(arity)
        self.fn = fn
        self.label = label

    def _mean(self, parents):
        return np.asarray(self.fn(parents), dtype=float)

    def describe(self):
        return {**super().describe(), "label": self.label}


@dataclass(eq=False)
class SemModel:
    dag: Dag
    mechanisms: tuple
    noise_var: tuple
    binary: tuple = ()
    kind: str = "custom"
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.dag.d
        self.mechanisms = tuple(self.mechanisms)
        self.noise_var = tuple(float(v) for v in self.noise_var)
        self.binary = tuple(self.binary) if self.binary else (False,) * d
        if not (len(self.mechanisms) == len(self.noise_var) == len(self.binary) == d):
            raise ValueError("need one mechanism, noise variance and binary flag per node")
        for j, mech in enumerate(self.mechanisms):
            if mech.arity != len(self.dag.parents(j)):
                raise ValueError(f"node {j}: mechanism arity {mech.arity} != parent count")
            if not self.binary[j] and not self.noise_var[j] > 0:
                raise ValueError(f"node {j}: noise variance must be positive")

    @property
    def d(self) -> int:
        return self.dag.d

    def conditional_mean(self, j: int, parent_values: np.ndarray) -> np.ndarray:
        """E[X_j | pa(j)] evaluated row-wise."""
        return self.mechanisms[j](parent_values)

    def residual_variance(self, j: int) -> float:
        """E var(X_j | pa(j))."""
        if not self.binary[j]:
            return self.noise_var[j]
        mech = self.mechanisms[j]
        if isinstance(mech, GlmBinary):
            return mech.p * (1 - mech.p)
        raise ValueError(f"residual variance of binary node {j} is not closed-form")


def _gfunc(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name in ("sin", "sine"):
        return np.sin
    if name in ("sign-power-1.4", "power", "signpow"):
        return lambda u: np.sign(u) * np.abs(u) ** 1.4
    raise ValueError(f"unknown nonlinearity {name!r}; use 'sin' or 'sign-power-1.4'")


def _is_chain_like(dag: Dag) -> bool:
    return all(len(dag.parents(j)) <= 1 and len(dag.children(j)) <= 1 for j in range(dag.d))


def attach_mechanisms(dag: Dag, kind: str, sigma2: float = 0.5, seed: int = 0,
                      p: float = 0.1, n_features: int = 200) -> SemModel:
    kind = kind.lower()
    rng = philox([seed, _MECH])
    mechs: list[Mechanism] = []
    binary = [False] * dag.d
    noise = [sigma2] * dag.d
    if kind == "glm":
        if not _is_chain_like(dag):
            raise ValueError("GLM mechanisms are only defined for Markov chains")
        for j in range(dag.d):
            arity = len(dag.parents(j))
            flip = bool(rng.integers(2)) if arity else False
            mechs.append(GlmBinary(p, arity, flip))
        binary = [True] * dag.d
        noise = [p * (1 - p)] * dag.d
    else:
        for j in range(dag.d):
            pa = dag.parents(j)
            if not pa:
                mechs.append(Zero())
            elif kind == "sin":
                mechs.append(SineAdditive(len(pa)))
            elif kind == "linear":
                w = rng.uniform(0.5, 2.0, size=len(pa)) * rng.choice([-1.0, 1.0], size=len(pa))
                mechs.append(Linear(w))
            elif kind == "agp":
                mechs.append(GpAdditive([GpFunction.draw(rng, 1, n_features) for _ in pa]))
            elif kind == "ngp":
                mechs.append(GpJoint(GpFunction.draw(rng, len(pa), n_features)))
            else:
                raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    params = {"sigma2": sigma2} if kind != "glm" else {"p": p}
    return SemModel(dag, tuple(mechs), tuple(noise), tuple(binary), kind=kind, seed=seed,
                    params=params)


def simulate_dataset(model: SemModel, n: int, seed: int, order: Sequence[int] | None = None) -> Dataset:
    """Draw ``n`` i.i.d. rows. Each node has its own noise stream keyed by
    ``(seed, node)``, so any valid processing ``order`` gives the same data."""
    if n < 1:
        raise ValueError("n must be at least 1")
    order = tuple(order) if order is not None else model.dag.topological_order()
    pos = {v: k for k, v in enumerate(order)}
    if sorted(order) != list(range(model.d)) or any(pos[i] > pos[j] for i, j in model.dag.edges):
        raise ValueError("processing order is not a topological sort")
    X = np.zeros((n, model.d))
    for j in order:
        rng = philox([seed, _NOISE, j])
        pa = list(model.dag.parents(j))
        m = model.mechanisms[j](X[:, pa])
        if model.binary[j]:
            X[:, j] = (rng.random(n) < m).astype(float)
        else:
            X[:, j] = m + math.sqrt(model.noise_var[j]) * rng.standard_normal(n)
    return Dataset.from_array(X)


# --- named closed-form models ---------------------------------------------

_TRIANGLE = frozenset({(0, 1), (0, 2), (1, 2)})
NAMED_MODELS = ("camfail_linear", "camfail_gdelta", "camfail_quadratic", "eq5", "exampleB1")


def named_model(name: str, **params) -> SemModel:
    """Closed-form three-node models used in the counterexample and
    misspecification studies.

    ``camfail_gdelta`` takes ``g`` and ``delta``; ``camfail_quadratic`` takes
    ``h``; ``eq5`` takes ``g``; ``exampleB1`` takes ``sigma3``.
    """
    dag3 = Dag(3, _TRIANGLE)
    if name == "camfail_linear":
        mechs = (Zero(), Linear([1.0]), Linear([1.0, 1.0]))
        return SemModel(dag3, mechs, (1.0, 1.0, 1.0), kind=name)
    if name == "camfail_gdelta":
        gname = params.get("g", "sin")
        delta = float(params.get("delta", 0.1))
        g = _gfunc(gname)

        def gd(u):
            return u + delta * g(u)

        mechs = (
            Zero(),
            Custom(lambda P: gd(P[:, 0]), 1, f"g_delta({gname},{delta})(x1)"),
            Custom(lambda P: gd(P[:, 0]) + gd(P[:, 1]), 2, f"g_delta({gname},{delta})(x1)+g_delta(x2)"),
        )
        return SemModel(dag3, mechs, (1.0, 1.0, 1.0), kind=name, params={"g": gname, "delta": delta})
    if name == "camfail_quadratic":
        hname = params.get("h", "sin")
        h = _gfunc(hname)
        mechs = (
            Zero(),
            Custom(lambda P: P[:, 0] ** 2, 1, "x1^2"),
            Custom(lambda P: 4 * P[:, 0] ** 2 + h(P[:, 1]), 2, f"4*x1^2+{hname}(x2)"),
        )
        return SemModel(dag3, mechs, (1.0, 1.0, 1.0), kind=name, params={"h": hname})
    if name == "eq5":
        gname = params.get("g", "sin")
        g = _gfunc(gname)
        mechs = (
            Zero(),
            Custom(lambda P: g(P[:, 0]), 1, f"{gname}(x1)"),
            Custom(lambda P: g(P[:, 0]) + g(P[:, 1]), 2, f"{gname}(x1)+{gname}(x2)"),
        )
        return SemModel(dag3, mechs, (1.0, 1.0, 1.0), kind=name, params={"g": gname})
    if name == "exampleB1":
        s3 = float(params.get("sigma3", 0.5))
        chain = Dag(3, frozenset({(0, 1), (1, 2)}))
        mechs = (
            Zero(),
            Custom(lambda P: P[:, 0] ** 2 / 2, 1, "x1^2/2"),
            Custom(lambda P: P[:, 0] ** 2 / 3, 1, "x2^2/3"),
        )
        return SemModel(chain, mechs, (1.0, 2.0 / 3.0, s3), kind=name, params={"sigma3": s3})
    raise ValueError(f"unknown model id {name!r}; choose from {NAMED_MODELS}")


# --- manifests -------------------------------------------------------------

def model_manifest(model: SemModel, graph_file: str | None = None, **extra) -> dict:
    return {
        "schema": 1,
        "graph_file": graph_file,
        "kind": model.kind,
        "d": model.d,
        "params": dict(model.params),
        "mechanisms": [m.describe() for m in model.mechanisms],
        "noise": [None if b else v for v, b in zip(model.noise_var, model.binary)],
        "binary": list(model.binary),
        "seed": model.seed,
        **extra,
    }


def model_from_manifest(manifest: dict, dag: Dag) -> SemModel:
    """Rebuild a model from its manifest and check it reproduces the record."""
    kind = manifest["kind"]
    params = manifest.get("params", {})
    if kind in NAMED_MODELS:
        model = named_model(kind, **params)
    elif kind in MODEL_KINDS:
        if kind == "glm":
            model = attach_mechanisms(dag, kind, seed=manifest["seed"], p=params["p"])
        else:
            model = attach_mechanisms(dag, kind, sigma2=params["sigma2"], seed=manifest["seed"])
    else:
        raise ValueError(f"cannot rebuild model kind {kind!r}")
    if [m.describe() for m in model.mechanisms] != manifest["mechanisms"]:
        raise ValueError("manifest mechanisms do not match the regenerated model")
    return model
