"""Trace processes and the projected order process."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .chain import MarkovChain
from .potential import _factor, can_reach

__all__ = [
    "WellPartition",
    "Path",
    "OrderPath",
    "trace_generator",
    "time_change_trace",
    "project_order",
    "write_path_csv",
    "read_path_csv",
]

NEG_CLAMP = 1e-12


class WellPartition:
    """Disjoint nonempty wells indexed by labels; ``delta`` is the rest.

    Parameters
    ----------
    n : int
        Size of the state space.
    wells : mapping label -> iterable of state indices
    """

    def __init__(self, n: int, wells: Mapping[Hashable, Sequence[int]]):
        self.n = int(n)
        self.labels = tuple(wells.keys())
        self._wells = {}
        owner = np.full(self.n, -1, dtype=np.int64)
        for k, lab in enumerate(self.labels):
            idx = np.unique(np.asarray(list(wells[lab]), dtype=np.int64))
            if idx.size == 0:
                raise ValueError(f"well {lab!r} is empty")
            if idx[0] < 0 or idx[-1] >= self.n:
                raise IndexError(f"well {lab!r} has states outside 0..{self.n - 1}")
            clash = owner[idx] >= 0
            if clash.any():
                other = self.labels[owner[idx[clash][0]]]
                raise ValueError(f"wells {other!r} and {lab!r} overlap at state {int(idx[clash][0])}")
            owner[idx] = k
            idx.setflags(write=False)
            self._wells[lab] = idx
        owner.setflags(write=False)
        self.owner = owner  # well position per state, -1 on delta
        self.delta = np.flatnonzero(owner < 0)
        self.union_all = np.flatnonzero(owner >= 0)

    def __getitem__(self, label) -> np.ndarray:
        return self._wells[label]

    def __len__(self):
        return len(self.labels)

    def breve(self, label) -> np.ndarray:
        """Union of all wells other than ``label``."""
        k = self.labels.index(label)
        return np.flatnonzero((self.owner >= 0) & (self.owner != k))

    def union(self, labels) -> np.ndarray:
        ks = [self.labels.index(l) for l in labels]
        return np.flatnonzero(np.isin(self.owner, ks))

    def label_of(self, state: int):
        k = self.owner[state]
        return None if k < 0 else self.labels[k]


@dataclass(frozen=True)
class Path:
    """Piecewise-constant path: ``states[k]`` occupies ``[times[k], times[k+1])``.

    The last state is held until ``horizon``.
    """

    times: np.ndarray
    states: np.ndarray
    horizon: float
    _check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)
        if not self._check:
            return
        if t.ndim != 1 or t.shape != s.shape or t.size == 0:
            raise ValueError("times and states must be nonempty vectors of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if self.horizon < t[-1]:
            raise ValueError("horizon precedes the last jump")
        if s.size > 1 and np.any(s[1:] == s[:-1]):
            raise ValueError("consecutive states must differ")

    @property
    def sojourns(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.horizon))

    def __len__(self):
        return self.states.size

    def state_at(self, t: float):
        k = np.searchsorted(self.times, t, side="right") - 1
        if k < 0:
            raise ValueError("time precedes the path start")
        return self.states[k]


class OrderPath(Path):
    """Path over well labels."""


def _merge(times, states, horizon, cls=Path):
    """Drop zero-length pieces and merge repeated consecutive values."""
    soj = np.diff(np.append(times, horizon))
    keep = soj > 0
    if not keep.any():
        keep[-1] = True
    times, states = times[keep], states[keep]
    if states.size > 1:
        new = np.concatenate(([True], states[1:] != states[:-1]))
        times, states = times[new], states[new]
    return cls(times, states, float(horizon))


def trace_generator(chain: MarkovChain, A) -> MarkovChain:
    """Generator of the chain watched only while in ``A`` (Schur complement).

    ``L_A = L_AA - L_AD L_DD^{-1} L_DA`` with ``D`` the complement of ``A``.
    The factorization of ``L_DD`` is cached on the chain.
    """
    n = chain.n
    A = np.unique(np.asarray(A, dtype=np.int64))
    if A.size == 0:
        raise ValueError("trace set is empty")
    in_A = np.zeros(n, dtype=bool)
    in_A[A] = True
    D = np.flatnonzero(~in_A)
    L = chain.generator
    LAA = L[A][:, A].toarray() if A.size <= 2000 else L[A][:, A]
    if D.size:
        key = ("trace", A.tobytes())

        def build():
            if not can_reach(chain, A)[D].all():
                raise ValueError("the complement of the trace set has a component that never reaches it")
            return _factor(L[D][:, D].tocsc())

        lu = chain.cached(key, build)
        LDA = L[D][:, A].toarray()
        X = lu.solve(LDA)  # L_DD^{-1} L_DA
        LAD = L[A][:, D]
        corr = LAD @ X
        LA = (LAA.toarray() if sp.issparse(LAA) else LAA) - corr
    else:
        LA = LAA.toarray() if sp.issparse(LAA) else np.array(LAA)
    R = LA.copy()
    np.fill_diagonal(R, 0.0)
    tol = NEG_CLAMP * chain.scale
    if R.min(initial=0.0) < -tol:
        raise RuntimeError(f"trace rate {R.min()!r} is negative beyond round-off")
    R[R < 0] = 0.0
    return MarkovChain(sp.csr_matrix(R), [chain.states[i] for i in A])


def time_change_trace(path: Path, A) -> Path:
    """Excise the excursions of ``path`` outside ``A`` and close the gaps.

    The returned path runs on the clock ``T^A(t) = int_0^t chi_A``; its
    horizon is the total time spent in ``A``.
    """
    A = np.asarray(list(A) if not isinstance(A, np.ndarray) else A)
    inside = np.isin(path.states, A)
    if not inside.any():
        raise ValueError("path never visits the trace set")
    soj = path.sojourns[inside]
    states = path.states[inside]
    starts = np.concatenate(([0.0], np.cumsum(soj)[:-1]))
    horizon = float(soj.sum())
    return _merge(starts, states, horizon, type(path))


def project_order(trace_path: Path, wells: WellPartition) -> OrderPath:
    """Map states to well labels and merge repeated labels."""
    owner = wells.owner[np.asarray(trace_path.states, dtype=np.int64)]
    if np.any(owner < 0):
        bad = int(trace_path.states[np.argmax(owner < 0)])
        raise ValueError(f"state {bad} lies outside every well")
    labels = np.asarray(wells.labels)[owner]
    return _merge(trace_path.times, labels, trace_path.horizon, OrderPath)


def write_path_csv(path: Path, fh, column: str | None = None) -> None:
    """``t,state`` rows (``t,label`` for order paths), then a horizon row."""
    column = column or ("label" if isinstance(path, OrderPath) else "state")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", column])
    for t, s in zip(path.times, path.states):
        w.writerow([repr(float(t)), s])
    w.writerow([repr(float(path.horizon)), "END"])


def read_path_csv(fh, order: bool = False) -> Path:
    rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValueError("missing header")
    body = rows[1:]
    if not body or body[-1][1] != "END":
        raise ValueError("missing horizon row")
    horizon = float(body[-1][0])
    times = np.array([float(r[0]) for r in body[:-1]])
    if order:
        return OrderPath(times, np.array([r[1] for r in body[:-1]], dtype=object), horizon)
    return Path(times, np.array([int(r[1]) for r in body[:-1]], dtype=np.int64), horizon)
