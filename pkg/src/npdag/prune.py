"""Parent selection given a topological ordering.

For each node, candidate parents are all of its predecessors in the ordering.
A greedy forward pass adds the candidate giving the largest relative drop in
held-out residual variance until the best drop falls below ``tau``; a single
backward pass then removes any parent whose deletion costs less than ``tau``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, philox
from .graph import Dag, Ordering
from .regress import RegressorSpec, fit


@dataclass(frozen=True)
class PruneConfig:
    spec: RegressorSpec = field(default_factory=RegressorSpec)
    tau: float = 0.05
    holdout: float = 0.5
    max_parents: int | None = None
    seed: int = 0
    # held-out mean squared error rather than the uncentered plug-in
    centered: bool = True
    # the single backward pass; off gives forward selection only
    backward: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.holdout < 1:
            raise ValueError("holdout must lie in (0, 1)")
        if self.max_parents is not None and int(self.max_parents) < 0:
            raise ValueError("max_parents must be non-negative")


class _Scorer:
    """Held-out residual variance of one node given a parent set, memoised."""

    def __init__(self, ds: Dataset, node: int, train: np.ndarray, test: np.ndarray,
                 cfg: PruneConfig):
        self.y_tr = ds.values[train, node]
        self.y_te = ds.values[test, node]
        self.X_tr = ds.values[train]
        self.X_te = ds.values[test]
        self.cfg = cfg
        self._memo: dict = {}

    def __call__(self, parents) -> float:
        key = tuple(sorted(parents))
        if key not in self._memo:
            if not key:
                # the empty model predicts the training mean
                value = float(np.mean((self.y_te - self.y_tr.mean()) ** 2))
            else:
                fr = fit(self.cfg.spec, self.X_tr[:, key], self.y_tr)
                fx = fr.predict(self.X_te[:, key])
                if self.cfg.centered:
                    value = float(np.mean((self.y_te - fx) ** 2))
                else:
                    value = float(np.mean(self.y_te**2) - np.mean(fx**2))
            self._memo[key] = value
        return self._memo[key]


def _select(score: _Scorer, candidates: list[int], cfg: PruneConfig) -> list[int]:
    limit = len(candidates) if cfg.max_parents is None else int(cfg.max_parents)
    chosen: list[int] = []
    current = score(())
    pool = list(candidates)
    while pool and len(chosen) < limit:
        trials = [(score(chosen + [c]), c) for c in pool]
        best_val, best = min(trials)
        if current <= 0 or (current - best_val) / current < cfg.tau:
            break
        chosen.append(best)
        pool.remove(best)
        current = best_val
    for c in list(chosen) if cfg.backward else []:
        without = [s for s in chosen if s != c]
        val = score(without)
        if current > 0 and (val - current) / current < cfg.tau:
            chosen = without
            current = val
    return sorted(chosen)


def prune_parents(ds: Dataset, ordering: Ordering, cfg: PruneConfig | None = None) -> Dag:
    cfg = cfg or PruneConfig()
    if len(ordering) != ds.d:
        raise ValueError(f"ordering has {len(ordering)} nodes, data has {ds.d} columns")
    rng = philox([cfg.seed, 71])
    perm = rng.permutation(ds.n)
    n_test = max(1, int(round(cfg.holdout * ds.n)))
    if ds.n - n_test < 2:
        raise ValueError("too few rows left for fitting after the holdout split")
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    perm_order = ordering.perm

    def parents_of(pos: int) -> tuple[int, list[int]]:
        node = perm_order[pos]
        preds = sorted(perm_order[:pos])
        if not preds:
            return node, []
        return node, _select(_Scorer(ds, node, train, test, cfg), preds, cfg)

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as ex:
            found = list(ex.map(parents_of, range(ds.d)))
    else:
        found = [parents_of(pos) for pos in range(ds.d)]
    edges = {(p, node) for node, pa in sorted(found) for p in pa}
    return Dag(ds.d, frozenset(edges))
