"""Exact-jump Monte Carlo for finite chains.

Samples are drawn in fixed-size blocks, each with its own Philox stream
keyed by ``(seed, stream, block)``; results therefore do not depend on the
number of worker threads.  The kernels run compiled under numba unless
``METASTAB_DISABLE_JIT`` is set, and only ever call ``rng.random()`` so the
compiled and interpreted paths consume identical random streams.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._jit import njit
from .chain import MarkovChain, ProbMeasure
from .trace import Path, WellPartition

__all__ = [
    "make_rng",
    "SampleStats",
    "sample_path",
    "hitting_times",
    "hitting_tail",
    "occupation_fraction",
    "discounted_functional",
    "trace_rate_estimate",
    "order_exit_statistics",
    "write_samples_csv",
    "worker_count",
]

BLOCK = 2048
MAX_JUMPS = 50_000_000


def make_rng(seed: int, stream: int = 0, block: int = 0) -> np.random.Generator:
    """Counter-based generator for the key ``(seed, stream, block)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def worker_count() -> int:
    v = os.environ.get("METASTAB_WORKERS", "")
    if v.strip():
        return max(1, int(v))
    return min(8, os.cpu_count() or 1)


@dataclass(frozen=True)
class SampleStats:
    count: int
    mean: float
    variance: float
    censored: int = 0
    cdf: dict | None = field(default=None, compare=False)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count else float("nan")

    @classmethod
    def from_values(cls, values, censored: int = 0, cdf_grid=None) -> "SampleStats":
        v = np.asarray(values, dtype=float)
        n = v.size
        mean = math.fsum(v.tolist()) / n if n else float("nan")
        var = math.fsum(((v - mean) ** 2).tolist()) / (n - 1) if n > 1 else 0.0
        cdf = None
        if cdf_grid is not None:
            srt = np.sort(v)
            cdf = {float(t): float(np.searchsorted(srt, t, side="right") / n) for t in cdf_grid}
        return cls(int(n), float(mean), float(var), int(censored), cdf)

    def to_record(self) -> dict:
        rec = {"count": self.count, "mean": self.mean, "variance": self.variance,
               "stderr": self.stderr, "censored": self.censored}
        if self.cdf is not None:
            rec["cdf"] = {repr(k): v for k, v in self.cdf.items()}
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _csr(chain: MarkovChain):
    R = chain.rates
    return (R.indptr.astype(np.int64), R.indices.astype(np.int64),
            np.ascontiguousarray(R.data, dtype=np.float64), np.ascontiguousarray(chain.holding))


# -- kernels ------------------------------------------------------------------

@njit(nogil=True)
def _next_state(indptr, indices, data, hold, i, rng):
    u = rng.random() * hold[i]
    lo = indptr[i]
    hi = indptr[i + 1]
    acc = 0.0
    for p in range(lo, hi):
        acc += data[p]
        if u < acc:
            return indices[p]
    return indices[hi - 1]


@njit(nogil=True)
def _holding_time(rate, rng):
    return -math.log(1.0 - rng.random()) / rate


@njit(nogil=True)
def _path_kernel(indptr, indices, data, hold, start, horizon, max_jumps, rng):
    cap = 64
    times = np.empty(cap)
    states = np.empty(cap, dtype=np.int64)
    times[0] = 0.0
    states[0] = start
    k = 1
    t = 0.0
    i = start
    absorbed = False
    while k < max_jumps:
        if hold[i] <= 0.0:
            absorbed = True
            break
        t += _holding_time(hold[i], rng)
        if t >= horizon:
            break
        i = _next_state(indptr, indices, data, hold, i, rng)
        if k == cap:
            cap *= 2
            nt = np.empty(cap)
            ns = np.empty(cap, dtype=np.int64)
            nt[:k] = times[:k]
            ns[:k] = states[:k]
            times = nt
            states = ns
        times[k] = t
        states[k] = i
        k += 1
    return times[:k].copy(), states[:k].copy(), absorbed


@njit(nogil=True)
def _hitting_kernel(indptr, indices, data, hold, starts, target, t_cap, max_jumps, rng):
    n = starts.shape[0]
    out = np.empty(n)
    cens = np.zeros(n, dtype=np.bool_)
    for s in range(n):
        i = starts[s]
        t = 0.0
        jumps = 0
        while not target[i]:
            if hold[i] <= 0.0 or t > t_cap or jumps >= max_jumps:
                cens[s] = True
                break
            t += _holding_time(hold[i], rng)
            i = _next_state(indptr, indices, data, hold, i, rng)
            jumps += 1
        out[s] = t
    return out, cens


@njit(nogil=True)
def _functional_kernel(indptr, indices, data, hold, starts, f, lam, horizon, max_jumps, rng):
    # int_0^horizon e^{-lam s} f(X_s) ds per sample
    n = starts.shape[0]
    out = np.empty(n)
    cens = np.zeros(n, dtype=np.bool_)
    for s in range(n):
        i = starts[s]
        t = 0.0
        acc = 0.0
        jumps = 0
        while True:
            if hold[i] <= 0.0:
                t_next = horizon
            else:
                t_next = t + _holding_time(hold[i], rng)
            end = t_next if t_next < horizon else horizon
            if f[i] != 0.0:
                if lam > 0.0:
                    acc += f[i] * (math.exp(-lam * t) - math.exp(-lam * end)) / lam
                else:
                    acc += f[i] * (end - t)
            if t_next >= horizon:
                break
            if lam > 0.0 and math.exp(-lam * t_next) < 1e-17:
                break
            jumps += 1
            if jumps >= max_jumps:
                cens[s] = True
                break
            t = t_next
            i = _next_state(indptr, indices, data, hold, i, rng)
        out[s] = acc
    return out, cens


@njit(nogil=True)
def _trace_kernel(indptr, indices, data, hold, starts, pos_in_A, horizon, max_jumps, rng):
    # counts[a, b]: trace jumps a -> b; occ[a]: time spent at a.  The horizon
    # is on the trace clock, so each path stops at a trace stopping time.
    m = 0
    for i in range(pos_in_A.shape[0]):
        if pos_in_A[i] >= 0:
            m += 1
    counts = np.zeros((m, m))
    occ = np.zeros(m)
    for s in range(starts.shape[0]):
        i = starts[s]
        last = pos_in_A[i]
        t = 0.0
        jumps = 0
        while jumps < max_jumps:
            dt = _holding_time(hold[i], rng)
            p = pos_in_A[i]
            if p >= 0:
                if t + dt >= horizon:
                    occ[p] += horizon - t
                    break
                occ[p] += dt
                t += dt
            jumps += 1
            i = _next_state(indptr, indices, data, hold, i, rng)
            q = pos_in_A[i]
            if q >= 0:
                if last >= 0 and q != last:
                    counts[last, q] += 1.0
                last = q
    return counts, occ


@njit(nogil=True)
def _order_exit_kernel(indptr, indices, data, hold, starts, owner, max_jumps, rng):
    # run until a well other than the start's is entered; return the time
    # spent inside wells (trace clock), the entered well and a censoring flag
    n = starts.shape[0]
    trace_t = np.empty(n)
    dest = np.full(n, -1, dtype=np.int64)
    cens = np.zeros(n, dtype=np.bool_)
    for s in range(n):
        i = starts[s]
        home = owner[i]
        tt = 0.0
        jumps = 0
        while True:
            if hold[i] <= 0.0 or jumps >= max_jumps:
                cens[s] = True
                break
            dt = _holding_time(hold[i], rng)
            if owner[i] >= 0:
                tt += dt
            i = _next_state(indptr, indices, data, hold, i, rng)
            jumps += 1
            if owner[i] >= 0 and owner[i] != home:
                dest[s] = owner[i]
                break
        trace_t[s] = tt
    return trace_t, dest, cens


# -- drivers ------------------------------------------------------------------

def _blocks(n_samples):
    return [(b, min(BLOCK, n_samples - b * BLOCK)) for b in range((n_samples + BLOCK - 1) // BLOCK)]


def _run_blocks(fn, n_samples, seed, stream):
    """Run ``fn(block_index, size, rng)`` over all blocks, results in block order."""
    blocks = _blocks(n_samples)
    work = [(b, size, make_rng(seed, stream, b)) for b, size in blocks]
    workers = worker_count()
    if workers == 1 or len(work) == 1:
        return [fn(*w) for w in work]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda w: fn(*w), work))


def _rng_key(rng):
    """Accept a ``(seed, stream)`` pair or an int seed; Generators are not splittable here."""
    if isinstance(rng, tuple):
        return int(rng[0]), int(rng[1])
    if isinstance(rng, (int, np.integer)):
        return int(rng), 0
    raise TypeError("pass the random source as a seed or a (seed, stream) pair")


def _starts(chain, start, size, rng):
    """Start indices: a fixed state, or draws from a measure by inverse CDF."""
    if isinstance(start, ProbMeasure):
        cdf = np.cumsum(start.weights)
        u = np.array([rng.random() for _ in range(size)])
        return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), chain.n - 1).astype(np.int64)
    return np.full(size, int(start), dtype=np.int64)


def sample_path(chain: MarkovChain, start: int, horizon: float, rng, max_jumps: int = MAX_JUMPS):
    """One exact-jump path on ``[0, horizon]``.

    ``rng`` is a :class:`numpy.random.Generator`.  Returns ``(path,
    absorbed)``; an absorbing state ends the path early and sets the flag.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    indptr, indices, data, hold = _csr(chain)
    t, s, absorbed = _path_kernel(indptr, indices, data, hold, int(start), float(horizon), max_jumps, rng)
    return Path(t, s, float(horizon), _check=False), bool(absorbed)


def hitting_times(chain, start, target, n_samples, rng, t_cap=np.inf, max_jumps=MAX_JUMPS):
    """Samples of the hitting time of ``target``; returns ``(times, censored_mask)``."""
    seed, stream = _rng_key(rng)
    indptr, indices, data, hold = _csr(chain)
    tmask = np.zeros(chain.n, dtype=np.bool_)
    tmask[np.asarray(target, dtype=np.int64)] = True

    def fn(b, size, g):
        st = _starts(chain, start, size, g)
        return _hitting_kernel(indptr, indices, data, hold, st, tmask, float(t_cap), max_jumps, g)

    parts = _run_blocks(fn, n_samples, seed, stream)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def hitting_tail(chain, start, target, s_grid, n_samples, rng, return_mean=False, t_cap=np.inf):
    """Empirical ``P[tau_target >= s]`` for each ``s`` with binomial errors.

    Censored samples (stopped before hitting) count as ``tau >= s`` for
    every ``s`` up to their stopping time and are reported, never dropped.
    """
    if isinstance(rng, np.random.Generator):
        raise TypeError("pass the random source as a seed or a (seed, stream) pair")
    times, cens = hitting_times(chain, start, target, n_samples, rng, t_cap=t_cap)
    out = []
    for s in np.asarray(s_grid, dtype=float):
        ind = (times >= s).astype(float)
        out.append(SampleStats.from_values(ind, censored=int(cens.sum())))
    if return_mean:
        return out, SampleStats.from_values(times, censored=int(cens.sum()))
    return out


def discounted_functional(chain, start, f, lam, n_samples, rng, horizon=np.inf):
    """Samples of ``int_0^horizon exp(-lam s) f(X_s) ds`` as :class:`SampleStats`."""
    if lam == 0 and not np.isfinite(horizon):
        raise ValueError("an undiscounted functional needs a finite horizon")
    seed, stream = _rng_key(rng)
    indptr, indices, data, hold = _csr(chain)
    f = np.ascontiguousarray(f, dtype=np.float64)

    def fn(b, size, g):
        st = _starts(chain, start, size, g)
        return _functional_kernel(indptr, indices, data, hold, st, f, float(lam), float(horizon), MAX_JUMPS, g)

    parts = _run_blocks(fn, n_samples, seed, stream)
    vals = np.concatenate([p[0] for p in parts])
    return SampleStats.from_values(vals, censored=int(sum(p[1].sum() for p in parts)))


def occupation_fraction(chain, start, C, horizon, n_samples, rng, lam: float = 0.0):
    """Time spent in ``C`` up to ``horizon`` (discounted at rate ``lam`` if positive)."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    f = np.zeros(chain.n)
    f[np.asarray(list(C), dtype=np.int64)] = 1.0
    return discounted_functional(chain, start, f, lam, n_samples, rng, horizon)


def trace_rate_estimate(chain, A, n_paths, horizon, rng, start=None):
    """Empirical trace jump rates on ``A`` from ``n_paths`` independent paths.

    Each path runs for ``horizon`` units of time spent in ``A`` and must
    start in ``A``.  Returns ``(rates, stderr, occupation)`` as ``|A| x |A|``
    arrays (the last a vector); rates are jump counts divided by occupation.
    """
    seed, stream = _rng_key(rng)
    A = np.unique(np.asarray(A, dtype=np.int64))
    pos = np.full(chain.n, -1, dtype=np.int64)
    pos[A] = np.arange(A.size)
    indptr, indices, data, hold = _csr(chain)
    if start is None:
        start = int(A[0])

    def fn(b, size, g):
        st = _starts(chain, start, size, g)
        if np.any(pos[st] < 0):
            raise ValueError("trace paths must start inside the trace set")
        return _trace_kernel(indptr, indices, data, hold, st, pos, float(horizon), MAX_JUMPS, g)

    parts = _run_blocks(fn, n_paths, seed, stream)
    counts = sum(p[0] for p in parts)
    occ = sum(p[1] for p in parts)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = counts / occ[:, None]
        se = np.sqrt(counts) / occ[:, None]
    return rates, se, occ


def order_exit_statistics(chain, wells: WellPartition, start_well, n_samples, rng,
                          mu: ProbMeasure | None = None, max_jumps: int = MAX_JUMPS) -> dict:
    """Exit statistics of the order process from ``start_well``.

    Starts are drawn from ``mu`` conditioned on the well (uniform on the
    well without ``mu``).  Sojourns are measured on the trace clock; the KS
    statistic compares them with an exponential of the fitted mean.
    """
    seed, stream = _rng_key(rng)
    E = wells[start_well]
    w = mu.weights[E] if mu is not None else np.ones(E.size)
    full = np.zeros(chain.n)
    full[E] = w
    start_measure = ProbMeasure.normalized(full)
    indptr, indices, data, hold = _csr(chain)
    owner = np.ascontiguousarray(wells.owner, dtype=np.int64)

    def fn(b, size, g):
        st = _starts(chain, start_measure, size, g)
        return _order_exit_kernel(indptr, indices, data, hold, st, owner, max_jumps, g)

    parts = _run_blocks(fn, n_samples, seed, stream)
    tt = np.concatenate([p[0] for p in parts])
    dest = np.concatenate([p[1] for p in parts])
    cens = np.concatenate([p[2] for p in parts])
    ok = ~cens
    sojourn = SampleStats.from_values(tt[ok], censored=int(cens.sum()))
    freqs = {lab: float(np.mean(dest[ok] == k)) if ok.any() else float("nan")
             for k, lab in enumerate(wells.labels) if lab != start_well}
    if ok.sum() > 1 and sojourn.mean > 0:
        ks = stats.kstest(tt[ok], "expon", args=(0.0, sojourn.mean))
        ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
    else:
        ks_stat, ks_p = float("nan"), float("nan")
    rate = 1.0 / sojourn.mean if sojourn.mean > 0 else float("nan")
    return {"frequencies": freqs, "sojourn": sojourn, "exit_rate": rate,
            "exit_rate_se": rate * sojourn.stderr / sojourn.mean if sojourn.mean > 0 else float("nan"),
            "ks_statistic": ks_stat, "ks_pvalue": ks_p, "censored": int(cens.sum()),
            "samples": tt, "destinations": dest, "censored_mask": cens}


def write_samples_csv(values, censored, fh) -> None:
    """``sample_id,value,censored`` rows."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample_id", "value", "censored"])
    for i, (v, c) in enumerate(zip(values, censored)):
        w.writerow([i, repr(float(v)), int(bool(c))])
