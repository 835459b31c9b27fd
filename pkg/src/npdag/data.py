"""Dataset container, CSV round-tripping and per-iteration sample splitting."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or non-finite input data."""


@dataclass(frozen=True, eq=False)
class Dataset:
    values: np.ndarray
    names: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise DataError(f"expected a 2-D matrix, got shape {values.shape}")
        if values.shape[0] < 1:
            raise DataError("dataset needs at least one row")
        names = tuple(str(s) for s in self.names)
        if len(names) != values.shape[1]:
            raise DataError(f"{len(names)} names for {values.shape[1]} columns")
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            r, c = bad[0]
            raise DataError(f"non-finite value at row {r + 1}, column {names[c]!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_array(cls, values, names: Sequence[str] | None = None) -> "Dataset":
        values = np.asarray(values, dtype=float)
        if names is None:
            names = [f"X{j + 1}" for j in range(values.shape[1])]
        return cls(values, tuple(names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def columns(self, idx: Sequence[int]) -> np.ndarray:
        return self.values[:, list(idx)]

    def take(self, rows) -> "Dataset":
        return Dataset(self.values[np.asarray(rows)], self.names)


@dataclass(frozen=True, eq=False)
class SplitPair:
    first: Dataset
    second: Dataset
    first_rows: np.ndarray | None = None
    second_rows: np.ndarray | None = None


def split_half(ds: Dataset, seed, disable_split: bool = False) -> SplitPair:
    """Random row partition into halves of size ceil(n/2) and floor(n/2).

    ``seed`` may be an int or a tuple of ints (e.g. ``(run_seed, iteration)``);
    it is fed to a counter-based Philox stream so the partition is a pure
    function of the seed.
    """
    if disable_split:
        return SplitPair(ds, ds)
    if ds.n < 4:
        raise DataError(f"need at least 4 rows to split, got {ds.n}")
    rng = philox(seed)
    perm = rng.permutation(ds.n)
    half = (ds.n + 1) // 2
    a, b = np.sort(perm[:half]), np.sort(perm[half:])
    return SplitPair(ds.take(a), ds.take(b), a, b)


def philox(seed) -> np.random.Generator:
    """Counter-based generator keyed by an int or a tuple of ints."""
    if isinstance(seed, (tuple, list)):
        entropy = [int(s) for s in seed]
    else:
        entropy = int(seed)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(names):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(names)}"
                )
            parsed = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}, column {names[col]!r}: cannot parse {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: row {lineno}, column {names[col]!r}: non-finite value {cell!r}"
                    )
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=float), tuple(names))


def write_csv(ds: Dataset, path) -> None:
    """Write with ``repr`` floats, which round-trip exactly."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    integral = np.all(ds.values == np.round(ds.values), axis=0)
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.names)
        for row in ds.values:
            w.writerow(
                [str(int(v)) if integral[j] and abs(v) < 2**53 else repr(float(v))
                 for j, v in enumerate(row)]
            )
    os.replace(tmp, path)
