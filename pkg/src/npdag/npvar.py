"""Layer-wise ordering by minimum residual variance.

``population_order`` runs the greedy argmin on exact conditional variances;
``npvar_layers`` is the empirical procedure: marginal variances pick the first
layer, then each round regresses every unassigned node on the nodes assigned
so far and collects all nodes whose held-out residual variance lies within
``eta`` of the minimum.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .data import Dataset, split_half
from .graph import LayerDecomposition, Ordering, layer_decomposition, orderings_of_layers
from .oracle import VarianceOracle
from .regress import RegressorSpec, marginal_variance, residual_variance_plugin
from .simulate import SemModel

ETA_FLOOR = 1e-6
MIN_ROWS = 8

__all__ = [
    "NpvarConfig", "NpvarResult", "NumericalError", "VarianceOracle", "auto_eta",
    "check_unequal_condition", "npvar_layers", "population_layers", "population_order",
]


class NumericalError(RuntimeError):
    """A residual-variance estimate came out non-finite."""


@dataclass(frozen=True)
class NpvarConfig:
    eta: float | str = "auto"
    spec: RegressorSpec = field(default_factory=RegressorSpec)
    seed: int = 0
    disable_split: bool = False
    max_layers: int | None = None
    centered: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.eta != "auto" and not float(self.eta) > 0:
            raise ValueError("eta must be positive or 'auto'")
        if self.max_layers is not None and int(self.max_layers) < 1:
            raise ValueError("max_layers must be at least 1")


@dataclass
class NpvarResult:
    layers: LayerDecomposition
    trace: list  # trace[j] maps node -> estimate for iteration j
    minima: list  # (k_j, estimate) per iteration
    split_seeds: list
    eta_used: float
    seed: int
    names: tuple = ()

    @property
    def ordering(self) -> Ordering:
        return orderings_of_layers(self.layers)

    @property
    def regression_calls(self) -> int:
        return sum(len(t) for t in self.trace[1:])

    def to_dict(self) -> dict:
        names = self.names or tuple(f"X{j + 1}" for j in range(len(self.layers.nodes)))
        return {
            "schema": 1,
            "layers": [[names[v] for v in layer] for layer in self.layers.as_lists()],
            "trace": [
                {"iter": j, "node": names[v], "sigma2": float(s)}
                for j, t in enumerate(self.trace)
                for v, s in sorted(t.items())
            ],
            "minima": [{"iter": j, "node": names[k], "sigma2": float(s)}
                       for j, (k, s) in enumerate(self.minima)],
            "split_seeds": [list(s) for s in self.split_seeds],
            "eta_used": self.eta_used,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def auto_eta(estimates: Iterable[float]) -> float:
    """A quarter of the gap between the two smallest estimates, floored at 1e-6."""
    s = sorted(float(v) for v in estimates)
    if len(s) < 2:
        raise ValueError("auto_eta needs at least two estimates")
    return max(0.25 * (s[1] - s[0]), ETA_FLOOR)


def _argmin(values: Mapping[int, float]) -> int:
    # lowest index wins ties
    return min(values, key=lambda v: (values[v], v))


def _threshold(values: Mapping[int, float], eta: float) -> tuple[int, set]:
    k = _argmin(values)
    return k, {v for v, s in values.items() if abs(s - values[k]) < eta}


def _layer_search(d: int, first: Mapping[int, float], round_values: Callable,
                  eta: float, max_layers: int | None):
    """Shared skeleton of the exact and empirical layer searches.

    ``round_values(j, assigned, remaining)`` returns the estimates for round j.
    """
    cap = d if max_layers is None else min(int(max_layers), d)
    k0, L1 = _threshold(first, eta)
    if cap == 1:
        L1 = set(range(d))
    layers, trace, minima = [L1], [dict(first)], [(k0, first[k0])]
    assigned = set(L1)
    j = 1
    while len(assigned) < d:
        remaining = sorted(set(range(d)) - assigned)
        if cap < d and len(layers) == cap - 1:
            layers.append(set(remaining))
            break
        values = round_values(j, sorted(assigned), remaining)
        k, L = _threshold(values, eta)
        layers.append(L)
        trace.append(dict(values))
        minima.append((k, values[k]))
        assigned |= L
        j += 1
    return LayerDecomposition(tuple(layers)), trace, minima


def npvar_layers(ds: Dataset, cfg: NpvarConfig | None = None) -> NpvarResult:
    cfg = cfg or NpvarConfig()
    if ds.n < MIN_ROWS:
        raise ValueError(f"need at least {MIN_ROWS} rows, got {ds.n}")
    d = ds.d
    first = {v: marginal_variance(ds, v) for v in range(d)}
    if d == 1:
        return NpvarResult(LayerDecomposition(({0},)), [first], [(0, first[0])], [],
                           float("nan") if cfg.eta == "auto" else float(cfg.eta),
                           cfg.seed, ds.names)
    eta = auto_eta(first.values()) if cfg.eta == "auto" else float(cfg.eta)
    seeds: list = []

    def round_values(j, assigned, remaining):
        seed = (cfg.seed, j)
        seeds.append(seed)
        split = split_half(ds, seed, disable_split=cfg.disable_split)

        def one(v):
            est = residual_variance_plugin(cfg.spec, split.first, split.second, v, assigned,
                                           centered=cfg.centered)
            return v, est.value

        if cfg.n_jobs > 1:
            with ThreadPoolExecutor(cfg.n_jobs) as pool:
                pairs = list(pool.map(one, remaining))
        else:
            pairs = [one(v) for v in remaining]
        values = dict(sorted(pairs))
        bad = [v for v, s in values.items() if not math.isfinite(s)]
        if bad:
            raise NumericalError(f"non-finite residual variance for nodes {bad} in round {j}")
        return values

    layers, trace, minima = _layer_search(d, first, round_values, eta, cfg.max_layers)
    return NpvarResult(layers, trace, minima, seeds, eta, cfg.seed, ds.names)


def population_layers(oracle: VarianceOracle, d: int, eta: float,
                      max_layers: int | None = None) -> NpvarResult:
    """The layer search with exact conditional variances in place of the
    plug-in estimates."""
    first = {v: oracle.query(v, ()) for v in range(d)}

    def round_values(j, assigned, remaining):
        return {v: oracle.query(v, assigned) for v in remaining}

    layers, trace, minima = _layer_search(d, first, round_values, float(eta), max_layers)
    return NpvarResult(layers, trace, minima, [], float(eta), 0)


def population_order(oracle: VarianceOracle, d: int) -> Ordering:
    chosen: list[int] = []
    remaining = list(range(d))
    while remaining:
        values = {v: oracle.query(v, chosen) for v in remaining}
        k = _argmin(values)
        chosen.append(k)
        remaining.remove(k)
    return Ordering(tuple(chosen))


# --- unequal residual variances ---------------------------------------------------

HOLDS_STRICT = "holds_strict"
HOLDS_EQUAL = "holds_equal_same_layer"
VIOLATED = "violated"


@dataclass(frozen=True)
class PairCheck:
    j: int  # 1-based position of i in the ordering
    i: int
    k: int
    lhs: float  # sigma_i^2
    rhs: float  # sigma_k^2 + E var(E[X_k | pa(k)] | X_prefix)
    same_layer: bool
    status: str


@dataclass(frozen=True)
class ConditionReport:
    pairs: tuple

    @property
    def identifiable(self) -> bool:
        return all(p.status != VIOLATED for p in self.pairs)

    def lookup(self, i: int, k: int) -> PairCheck:
        return next(p for p in self.pairs if p.i == i and p.k == k)


def check_unequal_condition(oracle: VarianceOracle, model: SemModel, pi: Ordering,
                            tol: float = 1e-12) -> ConditionReport:
    """Evaluate the sufficient condition for identifiability of ``pi`` under
    unequal residual variances, for each position j and each later node k.

    The right-hand side uses the total-variance identity
    ``E var(E[X_k | pa(k)] | X_S) = E var(X_k | X_S) - sigma_k^2``.
    """
    where = layer_decomposition(model.dag).layer_of()
    sigma = [model.residual_variance(v) for v in range(model.d)]
    out = []
    perm = pi.perm
    for j, i in enumerate(perm):
        prefix = perm[:j]
        for k in perm[j + 1:]:
            explained = oracle.query(k, prefix) - sigma[k]
            rhs = sigma[k] + explained
            same = where[i] == where[k]
            if sigma[i] < rhs - tol:
                status = HOLDS_STRICT
            elif same and abs(sigma[i] - sigma[k]) <= tol:
                status = HOLDS_EQUAL
            else:
                status = VIOLATED
            out.append(PairCheck(j + 1, i, k, sigma[i], rhs, same, status))
    return ConditionReport(tuple(out))


def exact_gap(oracle: VarianceOracle, d: int, ld: LayerDecomposition) -> float:
    """Smallest excess, over all rounds, of a not-yet-eligible node's residual
    variance above the round's minimum when conditioning on the true
    ancestral sets."""
    gaps = []
    assigned: set = set()
    for layer in ld.layers:
        remaining = sorted(set(range(d)) - assigned)
        values = {v: oracle.query(v, sorted(assigned)) for v in remaining}
        lo = min(values[v] for v in layer)
        rest = [values[v] for v in remaining if v not in layer]
        if rest:
            gaps.append(min(rest) - lo)
        assigned |= layer
    return float(min(gaps)) if gaps else math.inf
