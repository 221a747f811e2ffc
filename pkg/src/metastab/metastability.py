"""Numerical diagnostics of metastable behaviour.

Condition checks operate on a chain, its stationary measure and a
:class:`~metastab.trace.WellPartition`.  Each check returns a
:class:`ConditionReport`; trends across a family of chains are judged by
the caller (see :mod:`metastab.experiments`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .chain import MarkovChain, ProbMeasure, build_chain, check_reversible
from .potential import (
    capacity,
    expm_action,
    hitting_tail_exact,
    mean_hitting_time,
    mean_jump_rates,
    solve_resolvent,
)
from .trace import WellPartition

__all__ = [
    "ReducedGenerator",
    "ConditionReport",
    "lift_well_function",
    "check_condition_R",
    "extract_reduced_generator",
    "check_condition_D",
    "check_condition_V",
    "reflected_chain",
    "transition_matrix",
    "uniformized_distribution",
    "tv_curve",
    "mixing_time",
    "spectral_gap",
    "check_H0_H1",
    "h1_ratio",
    "double_well_chain",
]

DENSE_LIMIT = 4000


@dataclass(frozen=True)
class ReducedGenerator:
    """Generator on the well labels: ``rates[a, b]`` for ``a != b``."""

    labels: tuple
    rates: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        R = np.array(self.rates, dtype=float)
        if R.shape != (len(self.labels),) * 2:
            raise ValueError("rate matrix does not match the labels")
        if np.any(np.diag(R) != 0):
            raise ValueError("reduced generator rates must vanish on the diagonal")
        if np.any(R < 0):
            raise ValueError("reduced generator rates must be nonnegative")
        R.setflags(write=False)
        object.__setattr__(self, "rates", R)

    @property
    def matrix(self) -> np.ndarray:
        return self.rates - np.diag(self.rates.sum(axis=1))

    def rate(self, x, y) -> float:
        return float(self.rates[self.labels.index(x), self.labels.index(y)])

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)


@dataclass
class ConditionReport:
    """Outcome of one condition check at one model size.

    ``verdict`` is ``"pass"``, ``"fail"`` or ``None`` when only the trend
    across sizes is meaningful.
    """

    condition: str
    diagnostics: dict
    params: dict = field(default_factory=dict)
    N: int | None = None
    verdict: str | None = None

    def to_record(self) -> dict:
        return {"condition": self.condition, "N": self.N, "params": _jsonable(self.params),
                "diagnostics": _jsonable(self.diagnostics), "verdict": self.verdict}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def lift_well_function(wells: WellPartition, g) -> np.ndarray:
    """``G = sum_x g(x) 1_{E^x}``, zero on the transition region."""
    if isinstance(g, dict):
        vals = np.array([float(g[x]) for x in wells.labels])
    else:
        vals = np.asarray(g, dtype=float)
        if vals.shape != (len(wells.labels),):
            raise ValueError("g must give one value per well")
    G = np.zeros(wells.n)
    inside = wells.owner >= 0
    G[inside] = vals[wells.owner[inside]]
    return G


def _well_averages(mu: ProbMeasure, wells: WellPartition, F) -> np.ndarray:
    out = np.empty(len(wells.labels))
    for k, x in enumerate(wells.labels):
        E = wells[x]
        w = mu.weights[E]
        out[k] = np.dot(w, F[E]) / w.sum()
    return out


def check_condition_R(chain, mu, wells, lam, g):
    """Resolvent flatness on the wells.

    Returns ``(report, F, f)`` where ``F`` solves the resolvent equation for
    the lifted ``g`` and ``f`` holds its mu-averages on each well.  The
    diagnostic per well is the oscillation ``max F - min F`` over the well.
    """
    G = lift_well_function(wells, g)
    F = solve_resolvent(chain, lam, G).solution
    f = _well_averages(mu, wells, F)
    osc = {x: float(np.ptp(F[wells[x]])) for x in wells.labels}
    rep = ConditionReport("R", {x: {"oscillation": osc[x], "f": float(f[k])}
                                for k, x in enumerate(wells.labels)},
                          params={"lambda": float(lam)})
    return rep, F, f


def extract_reduced_generator(chain, mu, wells, lam) -> ReducedGenerator:
    """Generator on the labels implied by the resolvent at ``lam``.

    Column ``j`` of ``M`` holds the well averages of the resolvent applied
    to the indicator of well ``j``; the reduced generator is
    ``lam I - M^{-1}``.  Row sums are restored by resetting the diagonal and
    negative off-diagonal entries are zeroed, with their total reported as
    ``negativity``.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    k = len(wells.labels)
    M = np.empty((k, k))
    for j in range(k):
        g = np.zeros(k)
        g[j] = 1.0
        F = solve_resolvent(chain, lam, lift_well_function(wells, g)).solution
        M[:, j] = _well_averages(mu, wells, F)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"well-average matrix is singular (condition number {cond:.3g})")
    Lhat = lam * np.eye(k) - np.linalg.inv(M)
    off = Lhat - np.diag(np.diag(Lhat))
    row_residual = float(np.abs(Lhat.sum(axis=1)).max())
    negativity = float(abs(off[off < 0].sum()))
    rates = np.where(off > 0, off, 0.0)
    return ReducedGenerator(tuple(wells.labels), rates,
                            {"lambda": float(lam), "negativity": negativity,
                             "row_sum_residual": row_residual, "condition_number": float(cond)})


def check_condition_D(chain, wells, lam, t_grid=()) -> ConditionReport:
    """Discounted time spent in the transition region, started in each well.

    ``u = (lam - L)^{-1} 1_Delta``; per well the maximum of ``u``.  For each
    ``t`` in ``t_grid`` the undiscounted occupation up to ``t`` is bounded by
    ``exp(lam t) u``.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    chi = np.zeros(chain.n)
    chi[wells.delta] = 1.0
    u = solve_resolvent(chain, lam, chi).solution if wells.delta.size else np.zeros(chain.n)
    u = np.maximum(u, 0.0)
    diag = {}
    for x in wells.labels:
        m = float(u[wells[x]].max())
        diag[x] = {"max_discounted": m,
                   "horizon_bound": [float(np.exp(lam * t) * m) for t in t_grid]}
    return ConditionReport("D", diag, params={"lambda": float(lam), "t_grid": list(map(float, t_grid))})


def check_condition_V(chain, wells, anchors, s_grid, *, n_samples: int = 0, seed: int = 0,
                      stream: int = 0) -> ConditionReport:
    """Hitting-time tails of the anchor states from inside each well.

    Exact tails come from the killed semigroup; the Markov bound uses the
    exact mean hitting time.  With ``n_samples > 0`` the tail and the mean
    from the worst start are also estimated by simulation.
    """
    from .sim import hitting_tail

    s_grid = np.asarray(s_grid, dtype=float)
    diag = {}
    for k, x in enumerate(wells.labels):
        a = int(anchors[x])
        E = wells[x]
        if a not in set(E.tolist()):
            raise ValueError(f"anchor {a} is not in well {x!r}")
        tails = hitting_tail_exact(chain, [a], s_grid)[E]
        means = np.array([mean_hitting_time(chain, int(e), [a]) for e in E])
        worst_pos = int(np.argmax(tails.sum(axis=1)))
        worst = int(E[worst_pos])
        d = {
            "anchor": a,
            "worst_start": worst,
            "sup_tail_exact": tails.max(axis=0).tolist(),
            "tail_exact_worst": tails[worst_pos].tolist(),
            "markov_bound": [float(min(1.0, means.max() / s)) if s > 0 else 1.0 for s in s_grid],
            "max_mean_hitting": float(means.max()),
            "mean_hitting_worst": float(means[worst_pos]),
        }
        if n_samples:
            st, mean_st = hitting_tail(chain, worst, [a], s_grid, n_samples, (seed, stream + k),
                                       return_mean=True)
            d["tail_sim"] = [s.mean for s in st]
            d["tail_sim_se"] = [s.stderr for s in st]
            d["mean_sim"] = mean_st.mean
            d["mean_sim_se"] = mean_st.stderr
            d["censored"] = mean_st.censored
        diag[x] = d
    return ConditionReport("V", diag, params={"s_grid": s_grid.tolist(), "n_samples": n_samples, "seed": seed})


# -- local mixing -------------------------------------------------------------

def reflected_chain(chain: MarkovChain, V) -> MarkovChain:
    """Chain restricted to ``V`` with jumps leaving ``V`` suppressed."""
    V = np.unique(np.asarray(V, dtype=np.int64))
    if V.size == 0:
        raise ValueError("reflection set is empty")
    R = chain.rates[V][:, V]
    out = MarkovChain(R, [chain.states[i] for i in V])
    if not out.irreducible:
        raise ValueError("restriction to the reflection set is not irreducible")
    return out


def transition_matrix(chain: MarkovChain, t: float) -> np.ndarray:
    """Dense ``exp(t L)``."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    return scipy.linalg.expm(t * chain.generator.toarray())


def uniformized_distribution(chain: MarkovChain, p0, t: float, tol: float = 1e-8) -> np.ndarray:
    """``p0 exp(t L)`` by uniformization with truncation error below ``tol``."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    p = np.asarray(p0, dtype=float)
    rate = chain.scale
    lt = rate * t
    if lt == 0:
        return p.copy()
    if lt > 1e7:
        raise ValueError(f"uniformization needs about {lt:.3g} steps; use the matrix exponential")
    lo = int(poisson.ppf(tol / 2, lt))
    hi = int(poisson.isf(tol / 2, lt)) + 1
    PT = (sp.identity(chain.n, format="csr") + chain.generator / rate).T.tocsr()
    w = poisson.pmf(np.arange(lo, hi + 1), lt)
    v = p.copy()
    for _ in range(lo):
        v = PT @ v
    acc = w[0] * v
    for k in range(1, w.size):
        v = PT @ v
        acc += w[k] * v
    return acc


def _tv_rows(P, pi):
    return 0.5 * np.abs(P - pi[None, :]).sum(axis=1)


def tv_curve(chain: MarkovChain, pi: ProbMeasure, t_grid, start="worst") -> np.ndarray:
    """Total-variation distance to ``pi`` at each time of ``t_grid``.

    ``start`` is a state index or ``"worst"`` (maximum over all starts).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0):
        raise ValueError("times must be nonnegative")
    w = pi.weights
    out = np.empty(t_grid.size)
    if start == "worst":
        if chain.n > DENSE_LIMIT:
            raise ValueError(f"worst-case distance needs dense semigroups; n={chain.n} exceeds {DENSE_LIMIT}")
        L = chain.generator.toarray()
        for k, t in enumerate(t_grid):
            out[k] = _tv_rows(scipy.linalg.expm(t * L), w).max()
        return out
    p0 = np.zeros(chain.n)
    p0[int(start)] = 1.0
    LT = chain.generator.T.tocsc()
    for k, t in enumerate(t_grid):
        p = expm_action(LT, p0, t)
        out[k] = 0.5 * np.abs(p - w).sum()
    return out


def mixing_time(chain: MarkovChain, pi: ProbMeasure, epsilon: float, t_min: float | None = None,
                rtol: float = 1e-3) -> float:
    """First time the worst-case TV distance drops to ``epsilon``.

    Doubling from ``t_min`` (default ``1e-3 / scale``) brackets the time,
    then bisection narrows the bracket to ``rtol``.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")

    def tv(t):
        return tv_curve(chain, pi, [t])[0]

    t = 1e-3 / chain.scale if t_min is None else float(t_min)
    if tv(t) <= epsilon:
        return t
    lo = t
    for _ in range(200):
        hi = 2 * lo
        if tv(hi) <= epsilon:
            break
        lo = hi
    else:
        raise RuntimeError("distance to stationarity did not drop below epsilon")
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if tv(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def spectral_gap(chain: MarkovChain, pi: ProbMeasure) -> float:
    """Smallest nonzero eigenvalue of ``-L`` for a reversible pair."""
    ok, viol = check_reversible(chain, pi)
    if not ok:
        raise ValueError(f"chain is not reversible for the given measure (violation {viol:.3g})")
    if chain.n < 2:
        raise ValueError("spectral gap needs at least two states")
    s = np.sqrt(pi.weights)
    S = sp.diags(s) @ chain.generator @ sp.diags(1.0 / s)
    S = 0.5 * (S + S.T)
    if chain.n <= DENSE_LIMIT:
        ev = np.sort(-scipy.linalg.eigvalsh(S.toarray()))
    else:
        ev = np.sort(-spla.eigsh(S.tocsc(), k=2, sigma=0.0, which="LM", v0=np.ones(chain.n),
                                 return_eigenvectors=False))
    return float(ev[1])


# -- (H0)/(H1) ----------------------------------------------------------------

def h1_ratio(chain, mu, wells, x, anchor) -> float:
    """``max over eta in E^x`` of ``cap(E^x, rest) / cap(anchor, eta)``; 0 if the well is a singleton."""
    E = wells[x]
    others = E[E != anchor]
    if others.size == 0:
        return 0.0
    c_well = capacity(chain, mu, E, wells.breve(x), verify=False)
    worst = 0.0
    for e in others:
        c = capacity(chain, mu, [int(anchor)], [int(e)], verify=False)
        worst = max(worst, c_well / c)
    return worst


def check_H0_H1(chain, mu, wells, anchors) -> ConditionReport:
    r = mean_jump_rates(chain, mu, wells)
    diag = {}
    for k, x in enumerate(wells.labels):
        a = int(anchors[x])
        if wells.owner[a] != k:
            raise ValueError(f"anchor {a} is not in well {x!r}")
        diag[x] = {"h1_ratio": h1_ratio(chain, mu, wells, x, a),
                   "jump_rates": {y: float(r[k, j]) for j, y in enumerate(wells.labels) if j != k}}
    return ConditionReport("H0H1", diag)


def double_well_chain(length: int, beta: float, well_width: int):
    """Birth-death chain on ``0..length`` in a symmetric double-well potential.

    ``V(i) = min(i, length - i)`` scaled to height 1 at the centre; rates are
    Metropolis, so ``exp(-beta V)`` is reversible.  Returns the chain, its
    stationary measure and the partition with wells at both ends.
    """
    n = length + 1
    i = np.arange(n)
    V = np.minimum(i, length - i) / (length / 2)
    entries = {}
    for a in range(length):
        entries[(a, a + 1)] = float(np.exp(-beta * max(V[a + 1] - V[a], 0.0)))
        entries[(a + 1, a)] = float(np.exp(-beta * max(V[a] - V[a + 1], 0.0)))
    chain = build_chain(n, entries)
    w = np.exp(-beta * V)
    mu = ProbMeasure.normalized(w)
    wells = WellPartition(n, {1: range(0, well_width + 1), 2: range(length - well_width, n)})
    return chain, mu, wells
