"""Exact and reference conditional-variance computations, and baseline
order estimators.

All oracles expose ``query(target, cond) -> float`` returning
``E var(X_target | X_cond)`` (``Var(X_target)`` for an empty ``cond``) and a
``d`` attribute.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import Dataset, philox, split_half
from .graph import Dag, Ordering
from .regress import RegressorSpec, marginal_variance, residual_variance_plugin
from .simulate import Linear, SemModel, Zero


class OracleError(ValueError):
    pass


class VarianceOracle(Protocol):
    d: int

    def query(self, target: int, cond: Iterable[int]) -> float: ...


def _check_query(d: int, target: int, cond) -> tuple[int, tuple]:
    cond = tuple(sorted({int(c) for c in cond}))
    target = int(target)
    if not 0 <= target < d or any(not 0 <= c < d for c in cond):
        raise OracleError(f"node index out of range for d={d}")
    if target in cond:
        raise OracleError(f"target {target} is in the conditioning set")
    return target, cond


# --- Gaussian linear SEM -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianLinearModel:
    """``X = W^T X + z`` with ``z ~ N(0, diag(v))``; ``W[k, j] != 0`` iff k -> j."""

    W: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if W.shape != (len(v), len(v)):
            raise ValueError("W must be d x d with d noise variances")
        if np.any(v <= 0):
            raise ValueError("noise variances must be positive")
        Dag.from_adjacency(W != 0)  # acyclicity check
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "v", v)

    @property
    def d(self) -> int:
        return len(self.v)

    @classmethod
    def from_sem(cls, model: SemModel) -> "GaussianLinearModel":
        W = np.zeros((model.d, model.d))
        for j, mech in enumerate(model.mechanisms):
            if isinstance(mech, Zero):
                continue
            if not isinstance(mech, Linear) or model.binary[j]:
                raise OracleError(f"node {j} is not linear-Gaussian")
            for k, w in zip(model.dag.parents(j), mech.weights):
                W[k, j] = w
        return cls(W, np.array(model.noise_var))

    def covariance(self) -> np.ndarray:
        inv = np.linalg.inv(np.eye(self.d) - self.W)
        return inv.T @ np.diag(self.v) @ inv


def schur_cond_var(S: np.ndarray, target: int, cond: Sequence[int]) -> float:
    """``S_tt - S_tC S_CC^{-1} S_Ct`` for a covariance matrix ``S``."""
    cond = list(cond)
    if not cond:
        return float(S[target, target])
    S_cc = S[np.ix_(cond, cond)]
    s_ct = S[cond, target]
    try:
        sol = np.linalg.solve(S_cc, s_ct)
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"singular conditioning block {cond}") from exc
    if np.linalg.cond(S_cc) > 1e12:
        raise OracleError(f"ill-conditioned conditioning block {cond}")
    return float(S[target, target] - s_ct @ sol)


def gaussian_linear_cond_var(m: GaussianLinearModel, target: int, cond: Iterable[int]) -> float:
    target, cond = _check_query(m.d, target, cond)
    return schur_cond_var(m.covariance(), target, cond)


class GaussianLinearOracle:
    def __init__(self, model: GaussianLinearModel):
        self.model = model
        self.d = model.d
        self._S = model.covariance()

    def query(self, target, cond) -> float:
        target, cond = _check_query(self.d, target, cond)
        return schur_cond_var(self._S, target, cond)


# --- binary networks by exhaustive enumeration ------------------------------

MAX_ENUM_NODES = 20


@dataclass(frozen=True, eq=False)
class BinaryModel:
    """Binary Bayesian network. ``cpts[j][c]`` is P(X_j = 1 | parent config c),
    where bit k of ``c`` is the value of the k-th parent in ascending order."""

    dag: Dag
    cpts: tuple

    def __post_init__(self):
        if self.dag.d > MAX_ENUM_NODES:
            raise OracleError(f"enumeration limited to d <= {MAX_ENUM_NODES}")
        cpts = tuple(np.asarray(t, dtype=float).ravel() for t in self.cpts)
        if len(cpts) != self.dag.d:
            raise ValueError("one table per node required")
        for j, t in enumerate(cpts):
            if t.size != 2 ** len(self.dag.parents(j)):
                raise ValueError(f"node {j}: table size {t.size} != 2^{len(self.dag.parents(j))}")
            if np.any((t <= 0) | (t >= 1)):
                raise ValueError(f"node {j}: probabilities must lie in (0, 1)")
        object.__setattr__(self, "cpts", cpts)

    @property
    def d(self) -> int:
        return self.dag.d

    @classmethod
    def from_sem(cls, model: SemModel) -> "BinaryModel":
        cpts = []
        for j, mech in enumerate(model.mechanisms):
            if not model.binary[j]:
                raise OracleError(f"node {j} is not binary")
            k = len(model.dag.parents(j))
            configs = np.array(list(itertools.product([0, 1], repeat=k)))[:, ::-1] if k else np.zeros((1, 0))
            cpts.append(mech(configs.astype(float)))
        return cls(model.dag, tuple(cpts))

    def states(self) -> np.ndarray:
        """All 2^d states; row s has bit j of s in column j."""
        s = np.arange(2**self.d)
        return ((s[:, None] >> np.arange(self.d)) & 1).astype(np.int64)

    def joint(self) -> np.ndarray:
        X = self.states()
        logp = np.zeros(X.shape[0])
        for j in range(self.d):
            pa = self.dag.parents(j)
            cfg = np.zeros(X.shape[0], dtype=np.int64)
            for b, k in enumerate(pa):
                cfg |= X[:, k] << b
            q = self.cpts[j][cfg]
            logp += np.log(np.where(X[:, j] == 1, q, 1 - q))
        return np.exp(logp)


def _kahan(values: np.ndarray) -> float:
    total = 0.0
    comp = 0.0
    for v in values.tolist():
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _enum_cond_var(states: np.ndarray, P: np.ndarray, target: int, cond: tuple) -> float:
    if not cond:
        m = _kahan(P * states[:, target])
        return m * (1 - m)
    key = np.zeros(states.shape[0], dtype=np.int64)
    for b, c in enumerate(cond):
        key |= states[:, c] << b
    size = 2 ** len(cond)
    pc = np.bincount(key, weights=P, minlength=size)
    p1 = np.bincount(key, weights=P * states[:, target], minlength=size)
    ok = pc > 0
    m = p1[ok] / pc[ok]
    return _kahan(pc[ok] * m * (1 - m))


def discrete_enum_cond_var(m: BinaryModel, target: int, cond: Iterable[int]) -> float:
    target, cond = _check_query(m.d, target, cond)
    return _enum_cond_var(m.states(), m.joint(), target, cond)


class EnumerationOracle:
    def __init__(self, model: BinaryModel):
        self.model = model
        self.d = model.d
        self._states = model.states()
        self._P = model.joint()

    def query(self, target, cond) -> float:
        target, cond = _check_query(self.d, target, cond)
        return _enum_cond_var(self._states, self._P, target, cond)


def random_equal_variance_binary(d: int, p: float, rng: np.random.Generator,
                                 edge_prob: float = 0.4, max_parents: int = 3) -> BinaryModel:
    """Random binary DAG whose every conditional P(X_j=1 | pa) is p or 1-p,
    so each node has residual variance exactly p(1-p).

    Tables are redrawn until each node genuinely depends on every parent.
    """
    perm = rng.permutation(d)
    edges = set()
    for b in range(1, d):
        cand = [a for a in range(b) if rng.random() < edge_prob]
        if len(cand) > max_parents:
            cand = sorted(rng.choice(cand, size=max_parents, replace=False).tolist())
        edges.update((int(perm[a]), int(perm[b])) for a in cand)
    dag = Dag(d, frozenset(edges))
    cpts = []
    for j in range(d):
        k = len(dag.parents(j))
        while True:
            table = np.where(rng.random(2**k) < 0.5, p, 1 - p)
            if _depends_on_all(table, k):
                break
        cpts.append(table)
    return BinaryModel(dag, tuple(cpts))


def _depends_on_all(table: np.ndarray, k: int) -> bool:
    idx = np.arange(2**k)
    return all(np.any(table[idx] != table[idx ^ (1 << b)]) for b in range(k))


# --- nested Monte Carlo for chains ---------------------------------------------

def _chain_order(model: SemModel) -> tuple:
    order = model.dag.topological_order()
    expected = {(order[i - 1], order[i]) for i in range(1, model.d)}
    if set(model.dag.edges) != expected:
        raise OracleError("model is not a Markov chain")
    return order


def chain_mc_cond_var(model: SemModel, target: int, cond: Iterable[int], n_outer: int = 2000,
                      n_inner: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Nested Monte Carlo estimate of ``E var(X_target | X_cond)`` on a chain.

    ``cond`` must be a prefix of the chain. Uses
    ``E var(X_t | prefix) = sigma_t^2 + E Var(E[X_t | pa(t)] | prefix)``;
    the inner variance is estimated from ``n_inner`` conditional continuations
    of each of ``n_outer`` outer draws. Returns ``(estimate, standard_error)``.
    """
    order = _chain_order(model)
    target, cond = _check_query(model.d, target, cond)
    pos = {v: k for k, v in enumerate(order)}
    m = len(cond)
    if set(cond) != set(order[:m]):
        raise OracleError("conditioning set must be a prefix of the chain")
    t = pos[target]
    sigma2 = model.residual_variance(target)
    if t == 0:
        # source: Var(X_t) = Var(mean) + sigma2 and the mean is constant
        return sigma2, 0.0
    if m == t:
        return sigma2, 0.0
    rng = philox([seed, 53])
    x = None
    size = n_outer
    for k in range(t):
        if k == m:
            # branch every outer draw into n_inner conditional continuations
            x = None if x is None else np.repeat(x, n_inner)
            size = n_outer * n_inner
        j = order[k]
        pa = x[:, None] if x is not None else np.zeros((size, 0))
        x = _draw(model, j, model.mechanisms[j](pa), rng)
    g = model.mechanisms[target](x[:, None]).reshape(n_outer, n_inner)
    cell_var = g.var(axis=1, ddof=1)
    est = sigma2 + float(cell_var.mean())
    se = float(cell_var.std(ddof=1) / math.sqrt(n_outer))
    return est, se


def _draw(model: SemModel, j: int, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if model.binary[j]:
        return (rng.random(mean.shape[0]) < mean).astype(float)
    return mean + math.sqrt(model.noise_var[j]) * rng.standard_normal(mean.shape[0])


# --- quadrature oracles for small continuous models ---------------------------

class AncestralQuadratureOracle:
    """Gauss-Hermite evaluation of ``E var(X_t | X_S)`` for additive
    Gaussian-noise models when ``S`` is an ancestral set.

    For ancestral ``S`` the map from the noises ``z_S`` to ``X_S`` is a
    bijection, so ``E var(X_t | X_S) = E_{z_S} Var_{z_rest}(X_t)`` and both
    integrals are tensor Gauss-Hermite sums. Exact (to rounding) for
    polynomial mechanisms of moderate degree.
    """

    def __init__(self, model: SemModel, n_nodes: int = 32, max_points: int = 4_000_000):
        if any(model.binary):
            raise OracleError("quadrature oracle needs continuous Gaussian-noise nodes")
        self.model = model
        self.d = model.d
        self.n_nodes = n_nodes
        self.max_points = max_points
        x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
        self._x, self._w = x, w / w.sum()

    def query(self, target, cond) -> float:
        target, cond = _check_query(self.d, target, cond)
        dag = self.model.dag
        if not dag.is_ancestral(cond):
            raise OracleError(f"conditioning set {cond} is not ancestral")
        rel = sorted(set(cond) | dag.ancestors(target) | {target})
        outer = [v for v in rel if v in cond]
        inner = [v for v in rel if v not in cond]
        axes = outer + inner
        k = len(axes)
        if self.n_nodes**k > self.max_points:
            raise OracleError(f"{self.n_nodes}^{k} quadrature points exceeds the budget")
        grids = np.meshgrid(*([self._x] * k), indexing="ij")
        z = {v: grids[a].ravel() for a, v in enumerate(axes)}
        X = {}
        for v in dag.topological_order():
            if v not in z:
                continue
            pa = dag.parents(v)
            P = np.stack([X[u] for u in pa], axis=1) if pa else np.zeros((z[v].size, 0))
            X[v] = self.model.mechanisms[v](P) + math.sqrt(self.model.noise_var[v]) * z[v]
        xt = X[target].reshape((self.n_nodes,) * k)
        wi = self._w
        # weighted variance over the inner axes, then weighted mean over outer
        inner_axes = tuple(range(len(outer), k))
        W_in = _outer_weights(wi, len(inner))
        mean_in = np.tensordot(xt, W_in, axes=(inner_axes, tuple(range(len(inner)))))
        sq_in = np.tensordot(xt**2, W_in, axes=(inner_axes, tuple(range(len(inner)))))
        var_in = sq_in - mean_in**2
        if outer:
            return float(np.tensordot(var_in, _outer_weights(wi, len(outer)), axes=len(outer)))
        return float(var_in)


def _outer_weights(w: np.ndarray, k: int) -> np.ndarray:
    out = np.ones(())
    for _ in range(k):
        out = np.multiply.outer(out, w)
    return out


class GridDensityOracle:
    """Conditional variances for continuous Gaussian-noise models with d <= 3
    by brute-force quadrature of the joint density on a tensor grid.

    Handles arbitrary (non-ancestral) conditioning sets. The grid covers each
    coordinate's simulated range padded by several noise standard deviations;
    the trapezoid rule on such a grid is spectrally accurate for these smooth,
    light-tailed densities.
    """

    def __init__(self, model: SemModel, points: int = 161, seed: int = 0, pad_sd: float = 5.0):
        if model.d > 3:
            raise OracleError("grid oracle is limited to d <= 3")
        if any(model.binary):
            raise OracleError("grid oracle needs continuous Gaussian-noise nodes")
        from .simulate import simulate_dataset

        self.model = model
        self.d = model.d
        sample = simulate_dataset(model, 200_000, seed).values
        sd = np.sqrt(np.array(model.noise_var))
        lo = sample.min(axis=0) - pad_sd * sd
        hi = sample.max(axis=0) + pad_sd * sd
        self.axes = [np.linspace(lo[j], hi[j], points) for j in range(self.d)]
        grids = np.meshgrid(*self.axes, indexing="ij")
        flat = [g.ravel() for g in grids]
        logp = np.zeros(flat[0].size)
        dag = model.dag
        for j in range(self.d):
            pa = dag.parents(j)
            P = np.stack([flat[k] for k in pa], axis=1) if pa else np.zeros((flat[0].size, 0))
            r = flat[j] - model.mechanisms[j](P)
            logp += -0.5 * r**2 / model.noise_var[j]
        P = np.exp(logp - logp.max())
        self._P = (P / P.sum()).reshape((points,) * self.d)
        self._grids = grids

    def query(self, target, cond) -> float:
        target, cond = _check_query(self.d, target, cond)
        xt = self._grids[target]
        P = self._P
        total_sq = float((P * xt**2).sum())
        if not cond:
            return total_sq - float((P * xt).sum()) ** 2
        rest = tuple(a for a in range(self.d) if a not in cond)
        pc = P.sum(axis=rest)
        m1 = (P * xt).sum(axis=rest)
        ok = pc > 0
        cond_mean_sq = float((m1[ok] ** 2 / pc[ok]).sum())
        return total_sq - cond_mean_sq


class LoggedOracle:
    """Wraps an oracle and appends one JSON line per query to ``stream``:
    ``{oracle, target, cond, value}``."""

    def __init__(self, oracle: VarianceOracle, stream, name: str | None = None):
        self.oracle = oracle
        self.d = oracle.d
        self.stream = stream
        self.name = name or type(oracle).__name__

    def query(self, target, cond) -> float:
        cond = tuple(int(c) for c in cond)
        value = self.oracle.query(target, cond)
        rec = {"oracle": self.name, "target": int(target), "cond": sorted(cond), "value": value}
        self.stream.write(json.dumps(rec) + "\n")
        return value


# --- data-driven variance source ----------------------------------------------

class PluginVarianceSource:
    """``E var(X_t | X_S)`` estimated from data: marginal variance on the full
    sample for empty ``S``, otherwise the held-out plug-in on one fixed split.
    Results are cached per (target, set)."""

    def __init__(self, ds: Dataset, spec: RegressorSpec | None = None, seed: int = 0,
                 centered: bool = True, disable_split: bool = False):
        self.ds = ds
        self.d = ds.d
        self.spec = spec or RegressorSpec()
        self.centered = centered
        self._split = split_half(ds, (seed, 0), disable_split=disable_split)
        self._cache: dict = {}
        self.calls = 0

    def query(self, target, cond) -> float:
        target, cond = _check_query(self.d, target, cond)
        key = (target, cond)
        if key not in self._cache:
            self.calls += 1
            if not cond:
                value = marginal_variance(self.ds, target)
            else:
                value = residual_variance_plugin(
                    self.spec, self._split.first, self._split.second, target, cond,
                    centered=self.centered,
                ).value
            self._cache[key] = value
        return self._cache[key]


# --- baselines -------------------------------------------------------------------

def eqvar_linear_order(ds: Dataset) -> Ordering:
    """Top-down EqVar: repeatedly take the node with the smallest Schur
    complement variance of the sample covariance given the chosen nodes."""
    if ds.d == 1:
        return Ordering((0,))
    if ds.n <= ds.d:
        raise OracleError(f"need n > d for an invertible covariance (n={ds.n}, d={ds.d})")
    S = np.cov(ds.values, rowvar=False)
    chosen: list[int] = []
    remaining = list(range(ds.d))
    while remaining:
        vals = [schur_cond_var(S, j, chosen) for j in remaining]
        k = remaining[int(np.argmin(vals))]
        chosen.append(k)
        remaining.remove(k)
    return Ordering(tuple(chosen))


@dataclass(frozen=True)
class EdgeStep:
    parent: int
    child: int
    gain: float


_TIE = 1e-12


def greedy_incedge_order(source: VarianceOracle, d: int | None = None,
                         min_gain: float = 1e-12) -> tuple[Ordering, list[EdgeStep]]:
    """Greedy edge addition on the score ``sum_j log E var(X_j | pa(j))``.

    Each step adds the acyclicity-preserving edge ``i -> j`` with the largest
    gain ``log E var(X_j | S_j) - log E var(X_j | S_j + i)``; gains within
    1e-12 of the best are resolved by smallest ``(i, j)``. Stops when no gain
    exceeds ``min_gain``. Returns a topological sort of the final graph and
    the sequence of added edges.
    """
    d = int(d if d is not None else source.d)
    if d < 2:
        raise OracleError("need at least two nodes")
    parents: list[set] = [set() for _ in range(d)]
    current = [source.query(j, ()) for j in range(d)]
    trace: list[EdgeStep] = []

    def log_(v):
        return math.log(max(v, 1e-300))

    while True:
        reach = _reachability(d, parents)
        best = None
        for i in range(d):
            for j in range(d):
                if i == j or i in parents[j] or reach[j][i]:
                    continue
                gain = log_(current[j]) - log_(source.query(j, parents[j] | {i}))
                if best is None or gain > best[0] + _TIE:
                    best = (gain, i, j)
        if best is None or best[0] <= min_gain:
            break
        gain, i, j = best
        parents[j].add(i)
        current[j] = source.query(j, parents[j])
        trace.append(EdgeStep(i, j, gain))
    dag = Dag(d, frozenset((i, j) for j in range(d) for i in parents[j]))
    return Ordering(dag.topological_order()), trace


def _reachability(d: int, parents: list[set]) -> list[list[bool]]:
    """reach[a][b] is True when a directed path a -> ... -> b exists."""
    kids = [[j for j in range(d) if i in parents[j]] for i in range(d)]
    reach = [[False] * d for _ in range(d)]
    for a in range(d):
        stack = list(kids[a])
        while stack:
            b = stack.pop()
            if not reach[a][b]:
                reach[a][b] = True
                stack.extend(kids[b])
    return reach
