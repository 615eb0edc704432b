"""Load scenario sampling and dispatch datasets.

Each scenario draw ``k`` uses its own PCG64 stream derived from
``SeedSequence(seed, spawn_key=(k,))``, so datasets are reproducible across
platforms and independent of how solves are scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .dispatch import InfeasibleDispatchError, solve_baseline
from .flow import PtdfMatrix, compute_ptdf
from .grid import Network

logger = logging.getLogger(__name__)

SamplingMode = Literal["per_bus", "system"]

#: Abort dataset generation once more than this share of draws is infeasible.
MAX_INFEASIBLE_RATE = 0.5
BALANCE_TOL = 1e-6
THREADS_ENV = "CARBONTRACE_THREADS"


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoadScenario:
    scale_factors: np.ndarray
    loads: np.ndarray
    draw_index: int = 0


def _rng(seed: int, draw_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(draw_index),))))


def _check_range(load_range):
    lo, hi = map(float, load_range)
    if not (0.0 <= lo <= hi):
        raise ValueError(f"load range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
    return lo, hi


def sample_loads(
    net: Network,
    load_range=(0.7, 1.0),
    rng_seed: int = 0,
    *,
    mode: SamplingMode = "per_bus",
    draw_index: int = 0,
) -> LoadScenario:
    """Draw one load scenario.

    ``mode="per_bus"`` scales every bus by an independent uniform factor in
    ``load_range``; ``mode="system"`` applies one common factor to all buses.
    Buses with zero base load stay at zero either way.
    """
    lo, hi = _check_range(load_range)
    rng = _rng(rng_seed, draw_index)
    n = net.n_buses
    if mode == "per_bus":
        factors = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)
    elif mode == "system":
        factors = np.full(n, rng.uniform(lo, hi) if hi > lo else lo)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return LoadScenario(factors, factors * net.base_loads, draw_index)


@dataclass
class Dataset:
    """Paired dispatch/load samples: ``P`` is S x G (MW), ``D`` is S x N (MW)."""

    P: np.ndarray
    D: np.ndarray
    bus_ids: tuple[int, ...]
    network_fingerprint: str
    seed: int | None = None
    infeasible_redraws: int = 0
    load_range: tuple[float, float] | None = None
    mode: str | None = None
    draw_indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.bus_ids = tuple(int(b) for b in self.bus_ids)
        if self.P.shape[0] != self.D.shape[0]:
            raise ValueError("P and D must have the same number of rows")
        if self.P.shape[0] == 0:
            raise ValueError("dataset must contain at least one sample")
        if self.D.shape[1] != len(self.bus_ids):
            raise ValueError("D columns must match bus_ids")

    def __len__(self):
        return self.P.shape[0]

    @property
    def n_generators(self):
        return self.P.shape[1]

    def balance_residuals(self) -> np.ndarray:
        return np.abs(self.P.sum(axis=1) - self.D.sum(axis=1))

    def verify_balance(self, tol: float = BALANCE_TOL):
        bad = np.flatnonzero(self.balance_residuals() > tol)
        if bad.size:
            raise ValueError(f"samples {bad[:5].tolist()} violate power balance by more than {tol} MW")

    def metadata(self) -> dict:
        return {
            "n_samples": len(self),
            "n_generators": self.n_generators,
            "bus_ids": list(self.bus_ids),
            "network_fingerprint": self.network_fingerprint,
            "seed": self.seed,
            "infeasible_redraws": self.infeasible_redraws,
            "load_range": list(self.load_range) if self.load_range else None,
            "mode": self.mode,
            **self.meta,
        }

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"p_{g + 1}" for g in range(self.n_generators)] + [f"d_{b}" for b in self.bus_ids])
        for p, d in zip(self.P, self.D):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in d])
        return buf.getvalue()

    def save(self, csv_path, meta_path=None):
        """Write the CSV and a JSON metadata file (default ``<csv>.json``)."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv_text())
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta_path.write_text(json.dumps(self.metadata(), indent=1, sort_keys=True))
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path, meta_path=None, verify: bool = True) -> "Dataset":
        csv_path = Path(csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{csv_path}: empty dataset file")
        header, body = rows[0], rows[1:]
        p_cols = [i for i, h in enumerate(header) if h.startswith("p_")]
        d_cols = [i for i, h in enumerate(header) if h.startswith("d_")]
        data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
        known = {"n_samples", "n_generators", "bus_ids", "network_fingerprint", "seed", "infeasible_redraws", "load_range", "mode"}
        ds = cls(
            P=data[:, p_cols],
            D=data[:, d_cols],
            bus_ids=tuple(int(header[i][2:]) for i in d_cols),
            network_fingerprint=meta.get("network_fingerprint", ""),
            seed=meta.get("seed"),
            infeasible_redraws=meta.get("infeasible_redraws", 0),
            load_range=tuple(meta["load_range"]) if meta.get("load_range") else None,
            mode=meta.get("mode"),
            meta={k: v for k, v in meta.items() if k not in known},
        )
        if verify:
            ds.verify_balance()
        return ds

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            self.P[rows], self.D[rows], self.bus_ids, self.network_fingerprint, self.seed,
            self.infeasible_redraws, self.load_range, self.mode,
            None if self.draw_indices is None else self.draw_indices[rows], dict(self.meta),
        )


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def generate_dataset(
    net: Network,
    ptdf: PtdfMatrix | None = None,
    S: int = 1000,
    load_range=(0.7, 1.0),
    rng_seed: int = 0,
    *,
    mode: SamplingMode = "per_bus",
    threads: int | None = None,
) -> Dataset:
    """Solve the baseline OPF for ``S`` feasible load scenarios.

    Infeasible draws are replaced by further draws; samples are kept in
    draw-index order so the result does not depend on ``threads``.

    Raises
    ------
    SamplingError
        More than half of the draws were infeasible.
    """
    if int(S) < 1:
        raise ValueError("S must be >= 1")
    S = int(S)
    _check_range(load_range)
    ptdf = ptdf or compute_ptdf(net)
    threads = threads or default_threads()

    def solve(k):
        sc = sample_loads(net, load_range, rng_seed, mode=mode, draw_index=k)
        try:
            res = solve_baseline(net, sc.loads, ptdf)
        except InfeasibleDispatchError:
            return k, None, sc.loads
        return k, res.p_g, sc.loads

    kept: list[tuple[int, np.ndarray, np.ndarray]] = []
    infeasible = 0
    next_k = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while len(kept) < S:
            batch = range(next_k, next_k + (S - len(kept)))
            next_k = batch.stop
            results = list(pool.map(solve, batch)) if pool else [solve(k) for k in batch]
            for k, p, d in results:
                if p is None:
                    infeasible += 1
                else:
                    kept.append((k, p, d))
            if infeasible > MAX_INFEASIBLE_RATE * next_k:
                raise SamplingError(
                    f"{infeasible} of {next_k} load scenarios were infeasible; check the case limits or the load range"
                )
    finally:
        if pool:
            pool.shutdown()
    if infeasible:
        logger.info("redrew %d infeasible scenarios", infeasible)
    kept.sort(key=lambda t: t[0])
    ds = Dataset(
        P=np.array([t[1] for t in kept]),
        D=np.array([t[2] for t in kept]),
        bus_ids=net.bus_ids,
        network_fingerprint=net.fingerprint(),
        seed=int(rng_seed),
        infeasible_redraws=infeasible,
        load_range=tuple(map(float, load_range)),
        mode=mode,
        draw_indices=np.array([t[0] for t in kept]),
    )
    ds.verify_balance()
    return ds


def split(dataset: Dataset, train_fraction: float = 0.8, rng_seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint train/test partition with ``round(S * fraction)`` training rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    s = len(dataset)
    n_train = int(round(s * train_fraction))
    if n_train == 0 or n_train == s:
        raise ValueError(f"a {train_fraction:g} split of {s} samples leaves one side empty")
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng_seed)))).permutation(s)
    train_rows, test_rows = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return dataset.subset(train_rows), dataset.subset(test_rows)
