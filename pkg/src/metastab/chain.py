"""Finite-state continuous-time Markov chains.

A chain is stored as a CSR matrix of jump rates with an empty diagonal.
State keys are arbitrary hashables mapped to dense indices in insertion
order; every function in this package that takes a *set of states* expects
dense indices (see :meth:`MarkovChain.indices` to convert keys).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order

__all__ = [
    "MarkovChain",
    "ProbMeasure",
    "build_chain",
    "stationary_distribution",
    "stationary_distribution_dense",
    "adjoint_chain",
    "dirichlet_form",
    "dirichlet_form_edges",
    "check_reversible",
    "write_chain",
    "read_chain",
    "write_measure",
    "read_measure",
    "RTOL",
]

RTOL = 1e-10


class MarkovChain:
    """Immutable continuous-time Markov chain on a finite state space.

    Parameters
    ----------
    rates : sparse or dense (n, n) array
        Nonnegative jump rates.  Explicit diagonal entries must be zero.
    states : sequence of hashables, optional
        State keys; defaults to ``range(n)``.
    """

    def __init__(self, rates, states: Sequence[Hashable] | None = None):
        R = sp.csr_matrix(rates, dtype=np.float64)
        R.sum_duplicates()
        n = R.shape[0]
        if R.shape != (n, n):
            raise ValueError(f"rate matrix must be square, got {R.shape}")
        if R.nnz and R.data.min() < 0:
            raise ValueError("jump rates must be nonnegative")
        if np.any(R.diagonal() != 0):
            raise ValueError("jump rates must vanish on the diagonal")
        R.eliminate_zeros()
        R.sort_indices()
        R.data.setflags(write=False)
        self._rates = R
        if states is None:
            states = range(n)
        self._states = tuple(states)
        if len(self._states) != n:
            raise ValueError("number of state keys does not match the rate matrix")
        self._index = None
        self.holding = np.asarray(R.sum(axis=1)).ravel()
        self.holding.setflags(write=False)
        self.irreducible = _strongly_connected(R)
        self._generator = None
        self._cache: dict = {}
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return self._rates.shape[0]

    @property
    def rates(self) -> sp.csr_matrix:
        return self._rates

    @property
    def states(self) -> tuple:
        return self._states

    @property
    def scale(self) -> float:
        """Largest holding rate; the reference magnitude for tolerances."""
        s = float(self.holding.max()) if self.n else 0.0
        return s if s > 0 else 1.0

    @property
    def generator(self) -> sp.csr_matrix:
        """``R - diag(holding)``; rows sum to zero."""
        if self._generator is None:
            L = (self._rates - sp.diags(self.holding)).tocsr()
            L.sort_indices()
            self._generator = L
        return self._generator

    def apply(self, F) -> np.ndarray:
        """``(L F)(i) = sum_j R(i, j) [F(j) - F(i)]``."""
        F = np.asarray(F, dtype=float)
        return self._rates @ F - self.holding * F

    def index_of(self, key) -> int:
        if self._index is None:
            self._index = {k: i for i, k in enumerate(self._states)}
        return self._index[key]

    def indices(self, keys: Iterable[Hashable]) -> np.ndarray:
        return np.array(sorted({self.index_of(k) for k in keys}), dtype=np.int64)

    def cached(self, key, factory):
        """Per-chain memo for factorizations; concurrent callers serialize here."""
        with self._lock:
            if key not in self._cache:
                self._cache[key] = factory()
            return self._cache[key]

    def __repr__(self):
        return f"MarkovChain(n={self.n}, nnz={self._rates.nnz}, irreducible={self.irreducible})"


def _strongly_connected(R: sp.csr_matrix) -> bool:
    n = R.shape[0]
    if n <= 1:
        return True
    fwd = breadth_first_order(R, 0, directed=True, return_predecessors=False)
    if len(fwd) < n:
        return False
    bwd = breadth_first_order(R.T.tocsr(), 0, directed=True, return_predecessors=False)
    return len(bwd) == n


@dataclass(frozen=True)
class ProbMeasure:
    """Probability vector over the dense state indices of a chain."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("measure must be a vector")
        if np.any(w < 0):
            raise ValueError("measure has negative entries")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"measure sums to {w.sum()!r}, not 1")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, w) -> "ProbMeasure":
        w = np.asarray(w, dtype=float)
        return cls(w / w.sum())

    @classmethod
    def point_mass(cls, n: int, i: int) -> "ProbMeasure":
        w = np.zeros(n)
        w[i] = 1.0
        return cls(w)

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, idx):
        return self.weights[idx]

    def mass(self, idx) -> float:
        return float(self.weights[np.asarray(idx, dtype=np.int64)].sum())

    def conditioned(self, idx) -> "ProbMeasure":
        """Restriction to ``idx`` (in the given order), renormalized."""
        return ProbMeasure.normalized(self.weights[np.asarray(idx, dtype=np.int64)])


def build_chain(states, rate_entries) -> MarkovChain:
    """Build a chain from ``{(i, j): rate}`` (or ``(i, j, rate)`` triples).

    ``states`` is either a state count or a sequence of keys; entry indices
    refer to positions in that sequence.
    """
    if isinstance(states, (int, np.integer)):
        keys = range(int(states))
    else:
        keys = list(states)
    n = len(keys)
    items = rate_entries.items() if isinstance(rate_entries, Mapping) else (
        ((i, j), v) for i, j, v in rate_entries)
    rows, cols, vals = [], [], []
    seen = set()
    for (i, j), v in items:
        i, j, v = int(i), int(j), float(v)
        if (i, j) in seen:
            raise ValueError(f"duplicate rate entry ({i}, {j})")
        seen.add((i, j))
        if i == j:
            raise ValueError(f"diagonal rate entry ({i}, {i})")
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"rate entry ({i}, {j}) outside {n} states")
        if v < 0 or not np.isfinite(v):
            raise ValueError(f"invalid rate {v!r} for ({i}, {j})")
        rows.append(i)
        cols.append(j)
        vals.append(v)
    R = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return MarkovChain(R, keys)


def stationary_distribution(chain: MarkovChain) -> ProbMeasure:
    """Unique stationary measure by a pinned sparse solve of ``mu^T L = 0``."""
    if not chain.irreducible:
        raise ValueError("chain is not irreducible: no unique stationary state")
    n = chain.n
    if n == 1:
        return ProbMeasure(np.ones(1))
    LT = chain.generator.T.tocsc()
    # pin mu[0] = 1 and solve the remaining n-1 balance equations
    A = LT[1:, 1:]
    b = -LT[1:, 0].toarray().ravel()
    x = spla.spsolve(A.tocsc(), b)
    w = np.concatenate(([1.0], np.atleast_1d(x)))
    w = np.clip(w, 0.0, None)
    mu = ProbMeasure.normalized(w)
    resid = np.abs(chain.generator.T @ mu.weights).max()
    if resid > RTOL * chain.scale:
        # refine once; pinned systems on stiff chains can lose a few digits
        r = -(chain.generator.T @ mu.weights)[1:]
        dx = spla.spsolve(A.tocsc(), r)
        w = mu.weights.copy()
        w[1:] += dx
        mu = ProbMeasure.normalized(np.clip(w, 0.0, None))
    return mu


def stationary_distribution_dense(chain: MarkovChain) -> ProbMeasure:
    """Dense left null space of the generator (oracle for small chains)."""
    ns = scipy.linalg.null_space(chain.generator.toarray().T)
    if ns.shape[1] != 1:
        raise ValueError(f"generator has a {ns.shape[1]}-dimensional left null space")
    v = ns[:, 0]
    return ProbMeasure.normalized(np.abs(v))


def adjoint_chain(chain: MarkovChain, mu: ProbMeasure) -> MarkovChain:
    """Time reversal in ``L^2(mu)``: ``R*(i, j) = mu(j) R(j, i) / mu(i)``."""
    w = np.asarray(mu.weights)
    if len(w) != chain.n:
        raise ValueError("measure and chain sizes differ")
    if np.any(w <= 0):
        raise ValueError("adjoint requires a strictly positive measure")
    R = sp.diags(1.0 / w) @ chain.rates.T @ sp.diags(w)
    return MarkovChain(R.tocsr(), chain.states)


def dirichlet_form(chain: MarkovChain, mu: ProbMeasure, F) -> float:
    """``<F, -L F>_mu``."""
    F = np.asarray(F, dtype=float)
    if F.shape != (chain.n,):
        raise ValueError(f"function has shape {F.shape}, expected ({chain.n},)")
    return float(np.dot(mu.weights * F, -chain.apply(F)))


def dirichlet_form_edges(chain: MarkovChain, mu: ProbMeasure, F) -> float:
    """``(1/2) sum mu(i) R(i, j) [F(j) - F(i)]^2`` (summation-by-parts form)."""
    F = np.asarray(F, dtype=float)
    R = chain.rates.tocoo()
    d = F[R.col] - F[R.row]
    return float(0.5 * np.sum(mu.weights[R.row] * R.data * d * d))


def check_reversible(chain: MarkovChain, mu: ProbMeasure, rtol: float = RTOL):
    """Return ``(is_reversible, max |mu(i)R(i,j) - mu(j)R(j,i)|)``."""
    w = mu.weights
    flow = sp.diags(w) @ chain.rates
    diff = (flow - flow.T).tocoo()
    viol = float(np.abs(diff.data).max()) if diff.nnz else 0.0
    scale = float(np.abs(flow.data).max()) if flow.nnz else 1.0
    return viol <= rtol * max(scale, np.finfo(float).tiny), viol


# -- text format ------------------------------------------------------------

def write_chain(chain: MarkovChain, fh) -> None:
    """``states <n>`` header then ``rate <i> <j> <value>`` lines, ascending."""
    fh.write(f"states {chain.n}\n")
    R = chain.rates
    for i in range(chain.n):
        lo, hi = R.indptr[i], R.indptr[i + 1]
        for j, v in zip(R.indices[lo:hi], R.data[lo:hi]):
            fh.write(f"rate {i} {j} {float(v)!r}\n")


def read_chain(fh) -> MarkovChain:
    n = None
    entries = []
    for lineno, line in enumerate(fh, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "states" and len(parts) == 2:
            n = int(parts[1])
        elif parts[0] == "rate" and len(parts) == 4:
            entries.append((int(parts[1]), int(parts[2]), float(parts[3])))
        else:
            raise ValueError(f"line {lineno}: cannot parse {line.rstrip()!r}")
    if n is None:
        raise ValueError("missing 'states <n>' header")
    return build_chain(n, entries)


def write_measure(mu: ProbMeasure, fh) -> None:
    for i, v in enumerate(mu.weights):
        fh.write(f"{i} {float(v)!r}\n")


def read_measure(fh) -> ProbMeasure:
    pairs = []
    for line in fh:
        parts = line.split()
        if parts:
            pairs.append((int(parts[0]), float(parts[1])))
    w = np.zeros(max(i for i, _ in pairs) + 1)
    for i, v in pairs:
        w[i] = v
    return ProbMeasure(w)
