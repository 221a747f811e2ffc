"""Exact potential theory by sparse linear solves.

Resolvents, equilibrium potentials, capacities, mean jump rates between
wells, equilibrium measures and mean hitting times.  Every quantity is the
solution of a linear system on the chain's generator; factorizations are
memoized on the chain.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order

from .chain import RTOL, MarkovChain, ProbMeasure, adjoint_chain, check_reversible

__all__ = [
    "ResolventSolution",
    "CapacityReport",
    "solve_resolvent",
    "solve_boundary_problem",
    "equilibrium_potential",
    "capacity",
    "capacity_report",
    "mean_jump_rate",
    "mean_jump_rates",
    "mean_jump_rate_from_capacities",
    "equilibrium_measure_dagger",
    "averaged_potential_identity",
    "occupation_time",
    "mean_hitting_time",
    "mean_hitting_time_by_capacity",
    "hitting_tail_exact",
    "expm_action",
    "can_reach",
]

# above this many unknowns the direct factorization is replaced by GMRES
DIRECT_LIMIT = 200_000
EXPM_DENSE_LIMIT = 2000
_GLOBAL_RNG_LOCK = threading.Lock()


def _as_index(idx, n) -> np.ndarray:
    a = np.unique(np.asarray(idx, dtype=np.int64).ravel())
    if a.size and (a[0] < 0 or a[-1] >= n):
        raise IndexError("state index out of range")
    return a


def _mask(n, idx) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    m[idx] = True
    return m


def can_reach(chain: MarkovChain, targets) -> np.ndarray:
    """Boolean mask of states from which ``targets`` is reachable."""
    n = chain.n
    targets = _as_index(targets, n)
    RT = chain.rates.T.tocsr()
    # extra source node n pointing at every target in the reversed graph
    extra = sp.csr_matrix((np.ones(len(targets)), (np.zeros(len(targets), dtype=np.int64), targets)),
                          shape=(1, n))
    G = sp.bmat([[RT, None], [extra, sp.csr_matrix((1, 1))]], format="csr")
    order = breadth_first_order(G, n, directed=True, return_predecessors=False)
    m = np.zeros(n + 1, dtype=bool)
    m[order] = True
    return m[:n]


def _factor(M: sp.spmatrix):
    M = M.tocsc()
    if M.shape[0] <= DIRECT_LIMIT:
        return spla.splu(M)
    ilu = spla.spilu(M, drop_tol=1e-6)
    return _Iterative(M, ilu)


class _Iterative:
    def __init__(self, M, ilu):
        self.M = M
        self.pre = spla.LinearOperator(M.shape, ilu.solve)

    def solve(self, b):
        x, info = spla.gmres(self.M, b, M=self.pre, rtol=1e-13, atol=0.0, maxiter=2000)
        if info != 0:
            raise RuntimeError(f"GMRES did not converge (info={info})")
        return x


def _refined_solve(lu, M, b, tol):
    x = lu.solve(b)
    r = b - M @ x
    if np.abs(r).max(initial=0.0) > tol:
        x = x + lu.solve(r)
        r = b - M @ x
    return x, float(np.abs(r).max(initial=0.0))


# -- resolvent ----------------------------------------------------------------

@dataclass(frozen=True)
class ResolventSolution:
    lam: float
    rhs: np.ndarray
    solution: np.ndarray
    residual: float

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.solution).max(initial=0.0))

    def to_record(self, include_values: bool = False) -> dict:
        rec = {"lambda": self.lam, "residual": self.residual, "sup_norm": self.sup_norm}
        if include_values:
            rec["values"] = [float(v) for v in self.solution]
        return rec


def _resolvent_factor(chain, lam):
    def build():
        M = (lam * sp.identity(chain.n, format="csc") - chain.generator).tocsc()
        return M, _factor(M)
    return chain.cached(("resolvent", float(lam)), build)


def solve_resolvent(chain: MarkovChain, lam: float, G) -> ResolventSolution:
    """Solve ``(lam - L) F = G`` for ``lam > 0``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    G = np.asarray(G, dtype=float)
    if G.shape != (chain.n,):
        raise ValueError(f"right-hand side has shape {G.shape}, expected ({chain.n},)")
    M, lu = _resolvent_factor(chain, lam)
    scale = (lam + chain.scale) * (np.abs(G).max(initial=0.0) / lam) + np.abs(G).max(initial=0.0)
    F, res = _refined_solve(lu, M, G, RTOL * max(scale, 1e-300))
    return ResolventSolution(float(lam), G, F, res)


# -- boundary value problems -------------------------------------------------

def solve_boundary_problem(chain: MarkovChain, fixed, fixed_values, rhs=None) -> np.ndarray:
    """Solve ``(L u)(i) = rhs(i)`` off ``fixed`` with ``u = fixed_values`` on it.

    Every free state must be able to reach ``fixed``.
    """
    n = chain.n
    fixed = _as_index(fixed, n)
    fixed_mask = _mask(n, fixed)
    free = np.flatnonzero(~fixed_mask)
    u = np.zeros(n)
    u[fixed] = np.broadcast_to(np.asarray(fixed_values, dtype=float), fixed.shape) if np.ndim(fixed_values) == 0 \
        else np.asarray(fixed_values, dtype=float)
    if free.size == 0:
        return u
    key = ("dirichlet", hashlib.blake2b(fixed_mask.tobytes(), digest_size=16).hexdigest())

    def build():
        reach = can_reach(chain, fixed)
        if not reach.all():
            bad = np.flatnonzero(~reach)[:5]
            raise ValueError(f"states {bad.tolist()} cannot reach the boundary set")
        L = chain.generator
        LII = L[free][:, free].tocsc()
        return LII, _factor(LII)

    LII, lu = chain.cached(key, build)
    b = np.zeros(free.size) if rhs is None else np.asarray(rhs, dtype=float)[free].copy()
    b -= chain.generator[free][:, fixed] @ u[fixed]
    tol = RTOL * chain.scale * max(np.abs(u).max(initial=0.0), np.abs(b).max(initial=0.0) / chain.scale, 1.0)
    x, _ = _refined_solve(lu, LII, b, tol)
    u[free] = x
    return u


def _check_disjoint(n, A, B):
    A = _as_index(A, n)
    B = _as_index(B, n)
    if A.size == 0 or B.size == 0:
        raise ValueError("sets must be nonempty")
    if np.intersect1d(A, B).size:
        raise ValueError("sets must be disjoint")
    return A, B


def equilibrium_potential(chain: MarkovChain, A, B) -> np.ndarray:
    """``h(i) = P_i[tau_A < tau_B]``: harmonic off A and B, 1 on A, 0 on B."""
    A, B = _check_disjoint(chain.n, A, B)
    fixed = np.concatenate([A, B])
    vals = np.concatenate([np.ones(A.size), np.zeros(B.size)])
    order = np.argsort(fixed)
    h = solve_boundary_problem(chain, fixed[order], vals[order])
    return np.clip(h, 0.0, 1.0)


@dataclass(frozen=True)
class CapacityReport:
    setA: np.ndarray
    setB: np.ndarray
    potential: np.ndarray
    capacity: float

    def to_record(self) -> dict:
        return {"setA": [int(i) for i in self.setA], "setB": [int(i) for i in self.setB],
                "capacity": self.capacity}


def _capacity_from_potential(chain, mu, h) -> float:
    return float(np.dot(mu.weights * h, -chain.apply(h)))


def capacity(chain: MarkovChain, mu: ProbMeasure, A, B, *, verify: bool = True) -> float:
    """``cap(A, B) = <h_AB, -L h_AB>_mu``.

    For reversible chains this is the Dirichlet form of the equilibrium
    potential.  Otherwise it equals the quadratic form of the symmetric part
    evaluated at ``h_AB``; with ``verify`` the value is checked against the
    capacity of the adjoint chain.
    """
    return capacity_report(chain, mu, A, B, verify=verify).capacity


def capacity_report(chain: MarkovChain, mu: ProbMeasure, A, B, *, verify: bool = True) -> CapacityReport:
    A, B = _check_disjoint(chain.n, A, B)
    h = equilibrium_potential(chain, A, B)
    cap = _capacity_from_potential(chain, mu, h)
    if verify and not check_reversible(chain, mu)[0]:
        adj = adjoint_chain(chain, mu)
        cap_adj = _capacity_from_potential(adj, mu, equilibrium_potential(adj, A, B))
        if abs(cap - cap_adj) > 1e-8 * max(abs(cap), abs(cap_adj), 1e-300):
            raise RuntimeError(f"capacity {cap!r} differs from adjoint capacity {cap_adj!r}")
    return CapacityReport(A, B, h, max(cap, 0.0))


# -- wells ------------------------------------------------------------------

def mean_jump_rates(chain: MarkovChain, mu: ProbMeasure, wells) -> np.ndarray:
    """Matrix ``r[x, y]`` of mean jump rates between wells (zero diagonal).

    One equilibrium-potential solve per target well: for ``eta`` in ``E^x``,
    ``lambda(eta) P_eta[tau_{E^y} < tau^+_{rest}] = sum_z R(eta, z) h(z)``
    with ``h = h_{E^y, rest}`` (1 on ``E^y``, 0 on the other wells).
    """
    k = len(wells.labels)
    r = np.zeros((k, k))
    if k < 2:
        return r
    for b, y in enumerate(wells.labels):
        h = equilibrium_potential(chain, wells[y], wells.breve(y))
        out = chain.rates @ h
        for a, x in enumerate(wells.labels):
            if a == b:
                continue
            Ex = wells[x]
            w = mu.weights[Ex]
            r[a, b] = float(np.dot(w, out[Ex]) / w.sum())
    return r


def mean_jump_rate(chain: MarkovChain, mu: ProbMeasure, wells, x, y) -> float:
    """Mean jump rate ``r_N(x, y)`` from well ``x`` to well ``y``."""
    if x == y:
        raise ValueError("mean jump rate needs two distinct wells")
    h = equilibrium_potential(chain, wells[y], wells.breve(y))
    Ex = wells[x]
    w = mu.weights[Ex]
    return float(np.dot(w, (chain.rates @ h)[Ex]) / w.sum())


def mean_jump_rate_from_capacities(chain: MarkovChain, mu: ProbMeasure, wells, x, y) -> float:
    """Reversible-case mean jump rate through three well capacities.

    ``r(x,y) = [cap(E^x, rest) + cap(E^y, rest) - cap(E^x u E^y, others)]
    / (2 mu(E^x))``; the last term is zero when there are only two wells.
    """
    if x == y:
        raise ValueError("mean jump rate needs two distinct wells")
    cx = capacity(chain, mu, wells[x], wells.breve(x), verify=False)
    cy = capacity(chain, mu, wells[y], wells.breve(y), verify=False)
    others = [z for z in wells.labels if z not in (x, y)]
    cxy = 0.0
    if others:
        cxy = capacity(chain, mu, wells.union([x, y]), wells.union(others), verify=False)
    return (cx + cy - cxy) / (2.0 * mu.mass(wells[x]))


def equilibrium_measure_dagger(chain: MarkovChain, mu: ProbMeasure, A, B):
    """Adjoint equilibrium measure on ``A`` and its normalizer.

    ``nu(z) = mu(z) lambda(z) P*_z[tau_B < tau^+_A] / cap(A, B)`` for ``z``
    in ``A``, returned as a full-length measure together with the normalizer
    (which equals ``cap(A, B)``).
    """
    A, B = _check_disjoint(chain.n, A, B)
    adj = adjoint_chain(chain, mu)
    hd = equilibrium_potential(adj, A, B)
    # lambda(z) P*_z[tau_B < tau_A^+] = sum_w R*(z, w) (1 - h*(w))
    esc = adj.rates @ (1.0 - hd)
    w = np.zeros(chain.n)
    w[A] = mu.weights[A] * esc[A]
    norm = float(w.sum())
    cap = capacity(chain, mu, A, B, verify=False)
    if abs(norm - cap) > 1e-8 * max(cap, 1e-300):
        raise RuntimeError(f"equilibrium-measure normalizer {norm!r} != capacity {cap!r}")
    return ProbMeasure.normalized(w), norm


def occupation_time(chain: MarkovChain, B, C) -> np.ndarray:
    """``u(i) = E_i[int_0^{tau_B} chi_C]``; solves ``L u = -chi_C`` off ``B``."""
    n = chain.n
    B = _as_index(B, n)
    rhs = -_mask(n, _as_index(C, n)).astype(float)
    return solve_boundary_problem(chain, B, 0.0, rhs)


def averaged_potential_identity(chain: MarkovChain, mu: ProbMeasure, A, B):
    """Both sides of the averaged-potential identity.

    Left: ``sum_{i not in A u B} mu(i) h*_{A,B}(i)``.  Right:
    ``cap(A, B) * E_{nu*}[int_0^{tau_B} chi_{(A u B)^c}]`` with ``nu*`` the
    adjoint equilibrium measure and the expectation for the original chain.
    """
    A, B = _check_disjoint(chain.n, A, B)
    adj = adjoint_chain(chain, mu)
    hd = equilibrium_potential(adj, A, B)
    outside = ~_mask(chain.n, np.concatenate([A, B]))
    lhs = float(np.dot(mu.weights[outside], hd[outside]))
    nu, cap = equilibrium_measure_dagger(chain, mu, A, B)
    u = occupation_time(chain, B, np.flatnonzero(outside))
    rhs = cap * float(np.dot(nu.weights, u))
    return lhs, rhs


# -- hitting times ----------------------------------------------------------

def mean_hitting_time(chain: MarkovChain, start, target, mu: ProbMeasure | None = None) -> float:
    """Expected hitting time of ``target`` from a state or a start measure.

    Solves ``L u = -1`` off ``target``.  When ``mu`` is given, the chain is
    reversible and ``start`` is a single state, the value is cross-checked
    against the capacity representation.
    """
    target = _as_index(target, chain.n)
    if target.size == 0:
        raise ValueError("target set is empty")
    try:
        u = solve_boundary_problem(chain, target, 0.0, -np.ones(chain.n))
    except ValueError as exc:
        raise ValueError(f"target unreachable: {exc}") from None
    u = np.maximum(u, 0.0)
    if isinstance(start, ProbMeasure):
        return float(np.dot(start.weights, u))
    start = int(start)
    value = float(u[start])
    if mu is not None and start not in set(target.tolist()) and check_reversible(chain, mu)[0]:
        alt = mean_hitting_time_by_capacity(chain, mu, start, target)
        if abs(alt - value) > 1e-8 * max(value, 1e-300):
            raise RuntimeError(f"hitting time {value!r} disagrees with capacity formula {alt!r}")
    return value


def mean_hitting_time_by_capacity(chain: MarkovChain, mu: ProbMeasure, start: int, target) -> float:
    """Reversible identity ``E_i[tau_B] = E_mu[h_{i,B}] / cap(i, B)``."""
    rep = capacity_report(chain, mu, [int(start)], target, verify=False)
    return float(np.dot(mu.weights, rep.potential) / rep.capacity)


def expm_action(Q, v, t: float) -> np.ndarray:
    """``exp(t Q) v``, reproducible to the last bit.

    Small matrices use a dense exponential.  Larger ones go through
    ``expm_multiply``, whose norm estimator draws from numpy's global
    generator; that draw is pinned to a fixed seed and the caller's global
    state is restored afterwards.
    """
    v = np.asarray(v, dtype=float)
    if t == 0:
        return v.copy()
    if Q.shape[0] <= EXPM_DENSE_LIMIT:
        Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q)
        return scipy.linalg.expm(t * Qd) @ v
    with _GLOBAL_RNG_LOCK:
        saved = np.random.get_state()
        np.random.seed(0)
        try:
            return spla.expm_multiply(Q * t, v)
        finally:
            np.random.set_state(saved)


def hitting_tail_exact(chain: MarkovChain, target, s_grid) -> np.ndarray:
    """``P_i[tau_target >= s]`` for every state ``i`` and every ``s`` in the grid.

    Uses the sub-generator killed on ``target``; rows are states, columns
    grid points.  States in ``target`` have tail 0 for ``s > 0``.
    """
    n = chain.n
    target = _as_index(target, n)
    free = np.flatnonzero(~_mask(n, target))
    s_grid = np.asarray(s_grid, dtype=float)
    out = np.zeros((n, s_grid.size))
    out[np.ix_(target, np.flatnonzero(s_grid <= 0))] = 1.0
    if free.size == 0:
        return out
    Q = chain.generator[free][:, free].tocsc()
    ones = np.ones(free.size)
    order = np.argsort(s_grid)
    t_prev = 0.0
    v = ones
    for k in order:
        s = max(s_grid[k], 0.0)
        if s > t_prev:
            v = expm_action(Q, v, s - t_prev)
            t_prev = s
        out[free, k] = np.clip(v, 0.0, 1.0)
    return out
