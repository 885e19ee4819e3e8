"""Pathwise single, multiple and contraction-indexed stochastic integrals.

All integrals are taken over ``[-t, t]`` in time (both sides of the two-sided
noise) with Ito ordering by ``|time|``: an inner integral seen by a jump at
``s`` only contains events with strictly smaller ``|time|``.

Two evaluation routes exist.  For separable integrands (sums of tensor
products of one-point functions) a dynamic program over subsets of arguments
(or blocks) sweeps the jumps once; compensator drifts between jumps are
integrated with Chebyshev-Lobatto collocation.  For general integrands a
dense tensor recursion is used, with compensators replaced by midpoint
pseudo-events; it is exact for jump parts and first order in the
compensator step.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial import chebyshev as C

from .contractions import Contraction, enumerate_product_contractions
from .domain import GridFunction, GridSpec, grid_points
from .noise import MartingaleField

DENSE_BUDGET = 4 * 10 ** 6


@dataclass(frozen=True)
class IntegralValue:
    """Value at the requested time, running sup of |value| over [0, t], and an
    estimate of the compensator quadrature error (zero when none is involved)."""

    value: float
    sup: float
    quadrature_error: float = 0.0

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# helpers


def _require_function(f, arity: int | None = None) -> GridFunction:
    if not isinstance(f, GridFunction):
        raise TypeError("integrands must be deterministic GridFunction objects")
    if arity is not None and f.arity != arity:
        raise ValueError(f"integrand arity {f.arity} does not match {arity}")
    return f


def _cutoff(M: MartingaleField, f: GridFunction, t: float) -> float:
    t = abs(float(t))
    tc = min(t, f.t_radius)
    if tc > M.horizon + 1e-12:
        raise ValueError(f"integrand support {f.t_radius} and time {t} exceed the sampled horizon")
    return tc


@dataclass(frozen=True)
class _Jumps:
    times: np.ndarray  # signed
    tau: np.ndarray  # |time|
    x: np.ndarray  # (J, d) sites
    comps: np.ndarray
    deltas: np.ndarray


def _jumps(M: MartingaleField, tc: float) -> _Jumps:
    sl = M.select(tc)
    times = M.times[sl]
    return _Jumps(times, np.abs(times), M.grid.unflat(M.sites[sl]), M.comps[sl], M.deltas[sl])


def _subset_tables(n: int):
    """For each element i, the subsets containing i and the same subsets without i."""
    full = np.arange(1 << n)
    with_i = [full[(full >> i) & 1 == 1] for i in range(n)]
    return with_i, [w ^ (1 << i) for i, w in enumerate(with_i)]


# ---------------------------------------------------------------------------
# single integrals


def ito_integral(M: MartingaleField, k: int, f: GridFunction, t: float) -> IntegralValue:
    """eps^d * sum over jumps of M^k with |s| <= t of f(s, x) * dM."""
    f = _require_function(f, 1)
    tc = _cutoff(M, f, t)
    J = _jumps(M, tc)
    w = M.grid.eps ** M.grid.d * J.deltas * (J.comps == k)
    inc = w * f.point_values(J.times, J.x)
    path = np.cumsum(inc)
    value = float(path[-1]) if path.size else 0.0
    sup = float(np.max(np.abs(path))) if path.size else 0.0
    return IntegralValue(value, sup)


# ---------------------------------------------------------------------------
# multiple integrals


def _multiple_separable(M: MartingaleField, K: tuple, f: GridFunction, J: _Jumps):
    n = len(K)
    epsd = M.grid.eps ** M.grid.d
    with_i, without_i = _subset_tables(n)
    full = (1 << n) - 1
    total = np.zeros(J.tau.size + 1)
    for coef, fs in f.terms:
        W = np.stack([epsd * J.deltas * (J.comps == K[i]) * fs[i].point_values(J.times, J.x)
                      for i in range(n)])
        S = np.zeros(1 << n)
        S[0] = 1.0
        path = np.zeros(J.tau.size + 1)
        for j in range(J.tau.size):
            old = S.copy()
            for i in range(n):
                if W[i, j] != 0.0:
                    S[with_i[i]] += W[i, j] * old[without_i[i]]
            path[j + 1] = S[full]
        total += coef * path
    return total


def _ordered_sum(T: np.ndarray, weights: list, tau: np.ndarray, thr: np.ndarray) -> np.ndarray:
    """sum over tuples of distinct events ordered by strictly increasing |time|
    below ``thr`` of T[j_1..j_m] * prod w_i[j_i], by literal recursion on the
    latest event.  T has shape (B, E, ..., E); returns (B,)."""
    m = T.ndim - 1
    B = T.shape[0]
    if m == 0:
        return T
    mask = (tau[None, :] < thr[:, None]).astype(float)  # (B, E)
    out = np.zeros(B)
    for i in range(m):
        Ti = np.moveaxis(T, i + 1, 1)  # (B, E, rest...)
        coef = mask * weights[i][None, :]
        rest_w = weights[:i] + weights[i + 1:]
        keep = np.flatnonzero(coef.any(axis=0))
        if keep.size == 0:
            continue
        sub = Ti[:, keep] * coef[:, keep].reshape(B, keep.size, *([1] * (m - 1)))
        inner = _ordered_sum(sub.reshape(B * keep.size, *Ti.shape[2:]), rest_w, tau,
                             np.tile(tau[keep], B))
        out += inner.reshape(B, keep.size).sum(axis=1)
    return out


def _dense_tensor(f: GridFunction, times: np.ndarray, x: np.ndarray, groups: list) -> np.ndarray:
    """f evaluated with argument group g set to event j_g, for all event tuples."""
    E = times.size
    m = len(groups)
    if E ** m > DENSE_BUDGET:
        raise MemoryError(f"dense evaluation needs {E}^{m} points; above budget {DENSE_BUDGET}")
    idx = np.stack(np.unravel_index(np.arange(E ** m), (E,) * m), axis=-1)  # (E^m, m)
    owner = np.empty(f.arity, dtype=int)
    for g, pos in enumerate(groups):
        owner[pos] = g
    ev = idx[:, owner]
    return f(times[ev], x[ev]).reshape((E,) * m)


def _multiple_dense(M: MartingaleField, K: tuple, f: GridFunction, J: _Jumps, t_eval: np.ndarray):
    n = len(K)
    epsd = M.grid.eps ** M.grid.d
    T = _dense_tensor(f, J.times, J.x, [[i] for i in range(n)])[None]
    W = [epsd * J.deltas * (J.comps == K[i]) for i in range(n)]
    return np.array([_ordered_sum(T, W, J.tau, np.array([te]))[0] for te in t_eval])


def multiple_integral(M: MartingaleField, K: Sequence[int], f: GridFunction, t: float,
                      method: str = "auto") -> IntegralValue:
    """Iterated Ito integral over distinct jumps, ordered by |time|.

    ``method`` is "separable", "dense" or "auto" (separable when ``f`` carries
    a separable form).  The dense route reports the running sup on jump times.
    """
    K = tuple(int(k) for k in K)
    f = _require_function(f, len(K))
    if len(K) == 1:
        return ito_integral(M, K[0], f, t)
    tc = _cutoff(M, f, t)
    J = _jumps(M, tc)
    if method == "auto":
        method = "separable" if f.is_separable else "dense"
    if method == "separable":
        if not f.is_separable:
            raise ValueError("integrand has no separable form")
        path = _multiple_separable(M, K, f, J)
    elif method == "dense":
        # values just after each jump when affordable, otherwise the end value only
        if J.tau.size ** len(K) * (J.tau.size + 1) <= DENSE_BUDGET:
            thr = np.concatenate([[0.0], np.nextafter(J.tau, np.inf)])
        else:
            thr = np.array([np.inf])
        path = _multiple_dense(M, K, f, J, thr)
    else:
        raise ValueError(f"unknown method {method!r}")
    sup = float(np.max(np.abs(path))) if path.size > 1 else float("nan")
    return IntegralValue(float(path[-1]), sup)


# ---------------------------------------------------------------------------
# contraction integrals


@lru_cache(maxsize=None)
def _lobatto(nodes: int):
    """Chebyshev-Lobatto nodes on [-1, 1] and the matrix of integrals from -1."""
    x = -np.cos(np.pi * np.arange(nodes) / (nodes - 1))
    V = C.chebvander(x, nodes - 1)
    coeffs = np.linalg.solve(V, np.eye(nodes))  # column m: coefficients of l_m
    Q = np.empty((nodes, nodes))
    for m in range(nodes):
        Q[:, m] = C.chebval(x, C.chebint(coeffs[:, m], lbnd=-1))
    return x, Q


@dataclass(frozen=True)
class _BlockInfo:
    positions: list
    labels: tuple
    flagged: bool
    equal: bool
    size: int

    @property
    def compensated(self) -> bool:
        return self.flagged and self.equal and self.size % 2 == 0


def _block_infos(gamma: Contraction) -> list[_BlockInfo]:
    infos = []
    for i, pos in enumerate(gamma.block_positions()):
        labs = gamma.block_labels(i)
        infos.append(_BlockInfo(pos, labs, gamma.flagged[i], len(set(labs)) == 1, len(pos)))
    return infos


def _jump_weights(M: MartingaleField, b: _BlockInfo, J: _Jumps) -> np.ndarray:
    """eps^d * eps^{d(|e|-1)} * dM^{|e|} for jumps of the block's common label."""
    if not b.equal:
        return np.zeros(J.tau.size)
    d = M.grid.d
    eps = M.grid.eps
    return eps ** (d * b.size) * J.deltas ** b.size * (J.comps == b.labels[0])


def _compensator_rate(M: MartingaleField, b: _BlockInfo) -> float:
    return M.grid.eps ** ((b.size / 2 - 1) * M.grid.s)


def _intervals(J: _Jumps, tc: float, step: float):
    """Sub-intervals of [0, tc] split at jump times with length <= step."""
    edges = np.concatenate([[0.0], J.tau, [tc]])
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            out.append([])
            continue
        k = max(1, int(np.ceil((b - a) / step - 1e-12)))
        pts = np.linspace(a, b, k + 1)
        out.append(list(zip(pts[:-1], pts[1:])))
    return out


def _gamma_separable(M: MartingaleField, gamma: Contraction, f: GridFunction, J: _Jumps,
                     tc: float, step: float, nodes: int):
    grid = M.grid
    blocks = _block_infos(gamma)
    B = len(blocks)
    with_b, without_b = _subset_tables(B)
    full = (1 << B) - 1
    comp = [i for i, b in enumerate(blocks) if b.compensated]
    pieces = _intervals(J, tc, step) if comp else None
    if comp:
        xr, Q = _lobatto(nodes)
        flat = [p for seg in pieces for p in seg]
        lo = np.array([p[0] for p in flat])
        hi = np.array([p[1] for p in flat])
        node_tau = (lo[:, None] + (hi - lo)[:, None] * (xr[None, :] + 1) / 2)  # (P, K)
        sites = grid.sites()
        nt = node_tau.ravel()
        tt = np.concatenate([np.repeat(nt, sites.shape[0]), np.repeat(-nt, sites.shape[0])])
        xx = np.tile(sites, (2 * nt.size, 1))
    value = 0.0
    sup_path = None
    for coef, fs in f.terms:
        W = np.zeros((B, J.tau.size))
        H = {}
        for i, b in enumerate(blocks):
            pv = np.ones(J.tau.size)
            for v in b.positions:
                pv = pv * fs[v].point_values(J.times, J.x)
            W[i] = _jump_weights(M, b, J) * pv
            if b.compensated:
                hv = np.ones(tt.size)
                for v in b.positions:
                    hv = hv * fs[v].point_values(tt, xx)
                hv = hv.reshape(2, nt.size, sites.shape[0]).sum(axis=(0, 2))
                H[i] = -_compensator_rate(M, b) * grid.eps ** grid.d * hv.reshape(node_tau.shape)
        S = np.zeros(1 << B)
        S[0] = 1.0
        path = [0.0]
        piece = 0
        order = sorted(range(1 << B), key=lambda A: bin(A).count("1"))
        for j in range(J.tau.size + 1):
            if comp:
                for (a, bnd) in pieces[j]:
                    half = (bnd - a) / 2
                    Sn = np.zeros((1 << B, nodes))
                    for A in order:
                        vals = np.full(nodes, S[A])
                        for i in comp:
                            if (A >> i) & 1:
                                vals = vals + half * Q @ (H[i][piece] * Sn[A ^ (1 << i)])
                        Sn[A] = vals
                    S = Sn[:, -1].copy()
                    path.extend(Sn[full])
                    piece += 1
            if j < J.tau.size:
                old = S.copy()
                for i in range(B):
                    if W[i, j] != 0.0:
                        S[with_b[i]] += W[i, j] * old[without_b[i]]
                path.append(S[full])
        value += coef * S[full]
        p = coef * np.asarray(path)
        sup_path = p if sup_path is None else sup_path + p
    return value, float(np.max(np.abs(sup_path)))


def _gamma_dense(M: MartingaleField, gamma: Contraction, f: GridFunction, J: _Jumps,
                 tc: float, step: float):
    grid = M.grid
    blocks = _block_infos(gamma)
    comp = any(b.compensated for b in blocks)
    times, x, tau = J.times, J.x, J.tau
    pseudo = 0
    if comp:
        k = max(1, int(np.ceil(tc / step - 1e-12)))
        h = tc / k
        mids = (np.arange(k) + 0.5) * h
        sites = grid.sites()
        nt = np.concatenate([mids, -mids])
        pt = np.repeat(nt, sites.shape[0])
        px = np.tile(sites, (nt.size, 1))
        pseudo = pt.size
        times = np.concatenate([times, pt])
        x = np.concatenate([x, px])
        tau = np.abs(times)
    weights = []
    for b in blocks:
        w = np.zeros(times.size)
        w[:J.tau.size] = _jump_weights(M, b, J)
        if b.compensated:
            w[J.tau.size:] = -_compensator_rate(M, b) * grid.eps ** grid.d * h
        weights.append(w)
    T = _dense_tensor(f, times, x, [b.positions for b in blocks])[None]
    value = float(_ordered_sum(T, weights, tau, np.array([np.inf]))[0])
    return value, pseudo


def gamma_integral(M: MartingaleField, gamma: Contraction, f: GridFunction, t: float,
                   method: str = "auto", quad_step: float | None = None,
                   quad_nodes: int = 8) -> IntegralValue:
    """Integral indexed by a contraction: unflagged blocks integrate against
    the raw bracket [M; l(e)], flagged blocks against bracket minus compensator.

    ``quad_step`` (default eps^2) bounds the length of the collocation pieces
    between jumps; ``quad_nodes`` is the number of Lobatto nodes per piece.
    """
    f = _require_function(f, gamma.n_vertices)
    tc = _cutoff(M, f, t)
    J = _jumps(M, tc)
    step = M.grid.eps ** 2 if quad_step is None else float(quad_step)
    if method == "auto":
        method = "separable" if f.is_separable else "dense"
    has_comp = any(b.compensated for b in _block_infos(gamma))
    if method == "separable":
        if not f.is_separable:
            raise ValueError("integrand has no separable form")
        value, sup = _gamma_separable(M, gamma, f, J, tc, step, quad_nodes)
        err = 0.0
        if has_comp:
            coarse, _ = _gamma_separable(M, gamma, f, J, tc, step, max(3, quad_nodes // 2))
            err = abs(value - coarse)
        return IntegralValue(float(value), sup, err)
    if method == "dense":
        value, _ = _gamma_dense(M, gamma, f, J, tc, step)
        return IntegralValue(value, abs(value), float("nan") if has_comp else 0.0)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# products and norms


def _tensor_all(fs: Sequence[GridFunction]) -> GridFunction:
    out = fs[0]
    for g in fs[1:]:
        out = out.tensor(g)
    return out


def chaos_expand_product(M: MartingaleField, factors: Sequence[tuple], t: float,
                         method: str = "auto") -> dict:
    """Compare prod_i I_{K_i}(f_i)_t with the sum of contraction integrals."""
    label_vectors = [tuple(K) for K, _ in factors]
    gammas = enumerate_product_contractions(label_vectors)
    lhs = 1.0
    for K, f in factors:
        lhs *= multiple_integral(M, K, f, t, method=method).value
    F = _tensor_all([f for _, f in factors])
    terms = [gamma_integral(M, g, F, t, method=method).value for g in gammas]
    rhs = float(np.sum(terms))
    return {"lhs": float(lhs), "rhs": rhs, "residual": abs(lhs - rhs) / (1.0 + abs(lhs)),
            "terms": terms, "contractions": [g.text() for g in gammas]}


def _hnorm_reduce(X: np.ndarray, flagged: bool, size: int, grid: GridSpec):
    """Apply the one-block norm formula along the last axis of |values| X."""
    s = grid.s
    w = grid.cell_volume
    l2 = grid.eps ** ((size - 1) * s / 2) * np.sqrt(w * np.sum(X * X, axis=-1))
    if flagged:
        return l2
    return grid.eps ** ((size / 2 - 1) * s) * w * np.sum(X, axis=-1) + l2


def h_gamma_norm(f: GridFunction, gamma: Contraction, grid: GridSpec) -> float:
    """Recursive weighted norm, always picking the first block in canonical order.

    Time integrals are grid sums with step eps^2 (both the L1 and L2 parts).
    """
    f = _require_function(f, gamma.n_vertices)
    blocks = _block_infos(gamma)
    t1, x1 = grid_points(grid, f.t_radius)
    if f.is_separable and len(f.terms) == 1:
        coef, fs = f.terms[0]
        total = abs(coef)
        for b in blocks:
            vals = np.ones(t1.size)
            for v in b.positions:
                vals = vals * fs[v].point_values(t1, x1)
            total *= float(_hnorm_reduce(np.abs(vals), b.flagged, b.size, grid))
        return float(total)
    X = np.abs(_dense_tensor(f, t1, x1, [b.positions for b in blocks]))
    for b in reversed(blocks):
        X = _hnorm_reduce(X, b.flagged, b.size, grid)
    return float(X)


__all__ = [
    "IntegralValue", "ito_integral", "multiple_integral", "gamma_integral",
    "chaos_expand_product", "h_gamma_norm",
]
