"""Lattice heat kernels, kernel norms, dyadic pieces, renormalized kernels and
renormalization constants.

Kernels live on the space-time grid: row ``k`` of ``values`` is time
``(t0 + k) * eps**2``.  Sums over the grid carry the cell weight
``eps**(d+2)``.  Correlations and convolutions use real FFTs, zero padded in
time and, for compactly supported kernels, in space.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy import special as sp_special

from .domain import GridSpec, TestFunction, make_test_function, rescale_test_function, torus_reduce
from .graphs import LabeledMultigraph

DEFAULT_BUDGET = 2e7


class BudgetError(RuntimeError):
    """Raised when an estimated cost exceeds the configured budget."""

    def __init__(self, estimate: float, budget: float, what: str = "operation"):
        super().__init__(f"{what} needs about {estimate:.3g} evaluations, budget is {budget:.3g}")
        self.estimate = estimate
        self.budget = budget


def compute_budget(default: float = DEFAULT_BUDGET) -> float:
    """Budget from ``JUMPSPDE_BUDGET`` if set, otherwise ``default``."""
    env = os.environ.get("JUMPSPDE_BUDGET")
    return float(env) if env else float(default)


# ---------------------------------------------------------------------------
# space-time arrays
#
# Spatial axes use FFT ordering: index i stands for the signed displacement
# i if i < (P + 1) // 2 else i - P, with P the length of the axis.  Periodic
# arrays live on the unit torus (P = N); free arrays hold a compactly
# supported function of the whole lattice and are zero padded as needed.


def signed_index(P: int) -> np.ndarray:
    i = np.arange(P)
    return np.where(i < (P + 1) // 2, i, i - P)


def _embed(v: np.ndarray, P_out: int) -> np.ndarray:
    """Place a free array into a larger box, keeping signed displacements."""
    P = v.shape[1]
    if P == P_out:
        return v
    if P > P_out:
        raise ValueError("cannot embed into a smaller box")
    out = np.zeros((v.shape[0],) + (P_out,) * (v.ndim - 1), dtype=v.dtype)
    idx = signed_index(P) % P_out
    out[(slice(None),) + np.ix_(*([idx] * (v.ndim - 1)))] = v
    return out


@dataclass(frozen=True, eq=False)
class STArray:
    """Array of shape (T, P, ..., P) whose row k sits at time index t0 + k."""

    values: np.ndarray
    t0: int
    grid: GridSpec
    periodic: bool = False

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def t1(self) -> int:
        return self.t0 + self.n_times

    @property
    def period(self) -> int:
        return self.values.shape[1]

    def reflect(self) -> "STArray":
        """z -> -z on the lattice."""
        v = self.values[::-1]
        axes = _space_axes(v)
        v = np.roll(np.flip(v, axis=axes), 1, axis=axes)
        return STArray(np.ascontiguousarray(v), -(self.t1 - 1), self.grid, self.periodic)

    def window(self, t0: int, t1: int, P: int | None = None) -> np.ndarray:
        """Rows for time indices [t0, t1), zero where undefined, embedded in period P."""
        v = self.values if P is None or self.periodic else _embed(self.values, P)
        out = np.zeros((t1 - t0,) + v.shape[1:], dtype=v.dtype)
        lo, hi = max(t0, self.t0), min(t1, self.t1)
        if hi > lo:
            out[lo - t0:hi - t0] = v[lo - self.t0:hi - self.t0]
        return out

    def map(self, fn: Callable) -> "STArray":
        return STArray(fn(self.values), self.t0, self.grid, self.periodic)


def _space_axes(a: np.ndarray) -> tuple:
    return tuple(range(1, a.ndim))


def _common_period(A: STArray, B: STArray, linear: bool) -> int:
    if A.periodic or B.periodic:
        if not (A.periodic and B.periodic) or A.period != B.period:
            raise ValueError("periodic arrays must share the torus")
        return A.period
    return A.period + B.period - 1 if linear else max(A.period, B.period)


def _fft_product(A: STArray, B: STArray, conj: bool) -> tuple[np.ndarray, int]:
    P = _common_period(A, B, linear=True)
    L = A.n_times + B.n_times - 1
    nfft = sp_fft.next_fast_len(L, real=True)
    d = A.values.ndim - 1
    a = A.values if A.periodic else _embed(A.values, P)
    b = B.values if B.periodic else _embed(B.values, P)
    axes = tuple(range(d + 1))
    shape = (nfft,) + (P,) * d
    fa = sp_fft.rfftn(a, s=shape, axes=axes, workers=-1)
    fb = sp_fft.rfftn(b, s=shape, axes=axes, workers=-1)
    prod = fa * (np.conj(fb) if conj else fb)
    del fa, fb
    return sp_fft.irfftn(prod, s=shape, axes=axes, workers=-1), nfft


def st_correlate(A: STArray, B: STArray) -> STArray:
    """C(tau, xi) = sum_z eps^s A(z + (tau, xi)) B(z)."""
    c, nfft = _fft_product(A, B, conj=True)
    # circular time index m holds tau = m + A.t0 - B.t0, m in [-(Tb-1), Ta-1]
    idx = np.arange(-(B.n_times - 1), A.n_times) % nfft
    return STArray(c[idx] * A.grid.cell_volume, A.t0 - B.t0 - (B.n_times - 1), A.grid, A.periodic)


def st_convolve(A: STArray, B: STArray) -> STArray:
    """C(z) = sum_y eps^s A(z - y) B(y)."""
    c, nfft = _fft_product(A, B, conj=False)
    L = A.n_times + B.n_times - 1
    return STArray(c[:L] * A.grid.cell_volume, A.t0 + B.t0, A.grid, A.periodic)


def st_pair(A: STArray, B: STArray) -> float:
    """sum_z eps^s A(z) B(z) over the common time range."""
    lo, hi = max(A.t0, B.t0), min(A.t1, B.t1)
    if hi <= lo:
        return 0.0
    P = _common_period(A, B, linear=False)
    return float(A.grid.cell_volume * np.sum(A.window(lo, hi, P) * B.window(lo, hi, P)))


def reflection_paired_sum(a: np.ndarray) -> float:
    """Sum over the spatial axes pairing x with -x, then over the rest.

    For values odd under x -> -x the pairs cancel exactly in floating point.
    """
    axes = _space_axes(a)
    flipped = np.roll(np.flip(a, axis=axes), 1, axis=axes)
    return float(np.sum(a + flipped) / 2.0)


def _symmetrize(v: np.ndarray) -> np.ndarray:
    """Average with the spatial reflection so x -> -x symmetry holds exactly."""
    axes = _space_axes(v)
    return 0.5 * (v + np.roll(np.flip(v, axis=axes), 1, axis=axes))


# ---------------------------------------------------------------------------
# lattice kernels


@dataclass(frozen=True, eq=False)
class LatticeKernel:
    """Kernel values on the grid with a singularity index and derivative order.

    ``periodic`` kernels live on the unit torus; free kernels are supported in
    a box of the whole lattice (see ``signed_index``).
    """

    grid: GridSpec
    values: np.ndarray
    a: float
    q: int = 3
    t0: int = 0
    periodic: bool = True
    vanishing_order: int | None = None
    name: str = "K"
    t_start: int = 0  # first time index of the smooth part (forward differences below it)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def period(self) -> int:
        return self.values.shape[1]

    @property
    def st(self) -> STArray:
        return STArray(self.values, self.t0, self.grid, self.periodic)

    def times(self) -> np.ndarray:
        return (self.t0 + np.arange(self.n_times)) * self.grid.time_step

    def displacements(self) -> np.ndarray:
        """Physical displacement of every spatial index, shape (P, ..., P, d)."""
        one = signed_index(self.period) * self.grid.eps
        mesh = np.meshgrid(*([one] * self.grid.d), indexing="ij")
        disp = np.stack(mesh, axis=-1)
        return torus_reduce(disp) if self.periodic else disp

    def norms(self) -> np.ndarray:
        """Parabolic norm of every stored point, shape like ``values``."""
        t = self.times()
        x = np.max(np.abs(self.displacements()), axis=-1)
        st = np.sqrt(np.abs(t)).reshape((-1,) + (1,) * self.grid.d)
        return np.maximum(st, x[None])

    def at(self, k, x) -> np.ndarray:
        """Values at time indices ``k`` (...,) and site displacements ``x`` (..., d); zero outside."""
        k = np.asarray(k, dtype=np.int64)
        x = np.asarray(x, dtype=np.int64)
        row = k - self.t0
        inside = (row >= 0) & (row < self.n_times)
        P = self.period
        if self.periodic:
            x = x % self.grid.n_sites
        else:
            half = (P + 1) // 2
            inside = inside & np.all((x < half) & (x >= half - P), axis=-1)
            x = x % P
        row = np.where(inside, row, 0)
        vals = self.values[(row,) + tuple(np.moveaxis(x, -1, 0))]
        return np.where(inside, vals, 0.0)

    def with_values(self, values: np.ndarray, **changes) -> "LatticeKernel":
        return replace(self, values=values, **changes)

    def periodized(self) -> np.ndarray:
        """Values folded onto the unit torus, shape (T, N, ..., N)."""
        if self.periodic:
            return self.values
        N, P, d = self.grid.n_sites, self.period, self.grid.d
        idx = signed_index(P) % N
        out = np.zeros((self.n_times,) + (N,) * d)
        src = self.values
        for axis in range(1, d + 1):
            moved = np.moveaxis(src, axis, 0)
            acc = np.zeros((N,) + moved.shape[1:])
            np.add.at(acc, idx, moved)
            src = np.moveaxis(acc, 0, axis)
        out[:] = src
        return out

    def header(self) -> dict:
        return {"d": self.grid.d, "eps": self.grid.eps, "a": self.a, "q": self.q, "t0": self.t0,
                "periodic": self.periodic, "shape": list(self.values.shape),
                "dtype": "float64-le", "name": self.name, "index_order": "fft-signed",
                "support_box": {"t": [self.t0 * self.grid.time_step,
                                      (self.t0 + self.n_times - 1) * self.grid.time_step],
                                "x_sites": [int(signed_index(self.period).min()),
                                            int(signed_index(self.period).max())]}}

    def export(self, path: str) -> tuple[str, str]:
        """Write ``path.bin`` (C-order little-endian float64) and ``path.json``."""
        with open(path + ".bin", "wb") as fh:
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        with open(path + ".json", "w") as fh:
            json.dump(self.header(), fh, indent=1, sort_keys=True)
        return path + ".bin", path + ".json"


def load_kernel(path: str) -> LatticeKernel:
    with open(path + ".json") as fh:
        h = json.load(fh)
    vals = np.fromfile(path + ".bin", dtype="<f8").reshape(h["shape"])
    return LatticeKernel(GridSpec(h["d"], h["eps"]), vals, h["a"], h["q"], h["t0"],
                         periodic=h["periodic"], name=h["name"])


def laplacian_eigenvalues(grid: GridSpec) -> np.ndarray:
    """Eigenvalues of the nearest-neighbour lattice Laplacian on the FFT modes."""
    n, eps = grid.n_sites, grid.eps
    k = np.arange(n)
    one = -(2.0 / eps ** 2) * (1.0 - np.cos(2 * np.pi * k * eps))
    out = np.zeros(grid.shape)
    for i in range(grid.d):
        sh = [1] * grid.d
        sh[i] = n
        out = out + one.reshape(sh)
    return out


def _n_times(grid: GridSpec, t_max: float) -> int:
    return int(math.floor(t_max / grid.time_step + 1e-9)) + 1


def discrete_green_function(grid: GridSpec, t_max: float = 1.0) -> LatticeKernel:
    """Heat semigroup of the lattice Laplacian on the torus applied to eps^-d
    times the lattice delta, at times k eps^2 for 0 <= k eps^2 <= t_max."""
    n = grid.n_sites
    if abs(1.0 / grid.eps - n) > 1e-9:
        raise ValueError("1/eps must be an integer")
    mu = laplacian_eigenvalues(grid)
    t = np.arange(_n_times(grid, t_max)) * grid.time_step
    spec = np.exp(t.reshape((-1,) + (1,) * grid.d) * mu[None]) * grid.eps ** (-grid.d)
    vals = _symmetrize(np.fft.ifftn(spec, axes=_space_axes(spec)).real)
    return LatticeKernel(grid, vals, a=float(grid.d), q=3, periodic=True, name="G")


def lattice_heat_kernel(grid: GridSpec, t_max: float = 1.0, radius: float = 1.0) -> LatticeKernel:
    """Heat kernel of the lattice Laplacian on the whole lattice eps Z^d, kept on
    the box |x_i| <= radius.  In one direction it is eps^-1 exp(-2u) I_j(2u)
    with u = t / eps^2, and it factorizes over directions."""
    M = int(math.ceil(radius / grid.eps - 1e-9))
    P = 2 * M + 2
    j = np.abs(signed_index(P))
    u = np.arange(_n_times(grid, t_max)) * grid.time_step / grid.eps ** 2
    one = sp_special.ive(j[None, :], 2.0 * u[:, None]) / grid.eps
    one[:, j > M] = 0.0
    vals = one
    for _ in range(grid.d - 1):
        vals = vals[..., None] * one.reshape((one.shape[0],) + (1,) * (vals.ndim - 1) + (P,))
    return LatticeKernel(grid, vals, a=float(grid.d), q=3, periodic=False, name="Gfree")


def smooth_step(r: np.ndarray) -> np.ndarray:
    """Smooth function equal to 1 for r <= 1/2 and 0 for r >= 1."""
    r = np.asarray(r, dtype=float)

    def f(s):
        s = np.asarray(s, dtype=float)
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    a, b = f(1.0 - r), f(r - 0.5)
    return a / (a + b)


def cutoff_weights(K: LatticeKernel) -> np.ndarray:
    """Smooth cutoff equal to 1 for norm <= 1/2 and 0 for norm >= 1.

    The cutoff is a function of rho = (t^2 + sum x_i^4)^(1/4), which scales like
    the parabolic norm but is smooth away from the origin; the max-norm itself
    has a kink on sqrt|t| = |x_i| that would spoil higher differences.  Since
    norm <= rho <= (1 + d)^(1/4) norm, the transition is placed on
    [(1 + d)^(1/4) / 2, 1].
    """
    d = K.grid.d
    t = K.times().reshape((-1,) + (1,) * d)
    x4 = np.sum(K.displacements() ** 4, axis=-1)
    rho = (t * t + x4[None]) ** 0.25
    r0 = (1.0 + d) ** 0.25 / 2.0
    return smooth_step(0.5 + 0.5 * (rho - r0) / (1.0 - r0))


@dataclass(frozen=True, eq=False)
class SplitKernel:
    slab: LatticeKernel
    kernel: LatticeKernel
    remainder: LatticeKernel
    c: int


def split_green(G: LatticeKernel, c: int = 1, q: int = 3) -> SplitKernel:
    """Torus Green's function = slab + periodized kernel + remainder.

    The slab holds the rows t < c eps^2.  The kernel is chi * (whole-lattice
    heat kernel minus its slab), with chi smooth, equal to 1 for norm <= 1/2
    and 0 for norm >= 1, so it is a free kernel supported in the unit ball.
    The remainder is smooth and lives on the torus.
    """
    if c < 0:
        raise ValueError("slab width must be non-negative")
    if not G.periodic:
        raise ValueError("split_green expects the torus Green's function")
    grid = G.grid
    rows = G.t0 + np.arange(G.n_times)
    mask = ((rows >= 0) & (rows < c)).reshape((-1,) + (1,) * grid.d)
    slab = np.where(mask, G.values, 0.0)
    t_max = (G.t0 + G.n_times - 1) * grid.time_step
    free = lattice_heat_kernel(grid, t_max=t_max)
    fmask = ((free.t0 + np.arange(free.n_times) >= 0) & (free.t0 + np.arange(free.n_times) < c))
    fvals = np.where(fmask.reshape((-1,) + (1,) * grid.d), 0.0, free.values)
    K = free.with_values(cutoff_weights(free) * fvals, name="K", q=q, t_start=max(c, G.t_start))
    R = G.values - slab - K.periodized()
    return SplitKernel(G.with_values(slab, name="slab", q=q), K,
                       G.with_values(R, name="R", q=q), c)


def discrete_gradient_kernel(K: LatticeKernel, axis: int = 0) -> LatticeKernel:
    """Centered spatial difference of a kernel along ``axis``."""
    eps = K.grid.eps
    ax = axis + 1
    v = (np.roll(K.values, -1, axis=ax) - np.roll(K.values, 1, axis=ax)) / (2 * eps)
    return K.with_values(v, a=K.a + 1, name="grad" + K.name)


def multi_indices(d: int, order_below: int) -> list[tuple]:
    """Multi-indices (k_t, k_1..k_d) with scaled order 2 k_t + sum k_i < order_below."""
    out = []
    for k in product(range(max(order_below, 0)), repeat=d + 1):
        if 2 * k[0] + sum(k[1:]) < order_below:
            out.append(tuple(k))
    out.sort(key=lambda k: (2 * k[0] + sum(k[1:]), k))
    return out


def derivative_values(K: LatticeKernel, k: Sequence[int]) -> np.ndarray:
    """Finite-difference derivative D^k K: centered in space, centered in time
    except forward on the first smooth row and backward on the last row."""
    v = K.values
    eps, dt = K.grid.eps, K.grid.time_step
    for i, ki in enumerate(k[1:]):
        for _ in range(ki):
            v = (np.roll(v, -1, axis=i + 1) - np.roll(v, 1, axis=i + 1)) / (2 * eps)
    for _ in range(k[0]):
        pad = np.zeros((1,) + v.shape[1:])
        up = np.concatenate([v[1:], pad])
        down = np.concatenate([pad, v[:-1]])
        rows = (K.t0 + np.arange(v.shape[0])).reshape((-1,) + (1,) * K.grid.d)
        last = rows == K.t0 + v.shape[0] - 1
        v = np.where(rows - 1 < K.t_start, (up - v) / dt,
                     np.where(last, (v - down) / dt, (up - down) / (2 * dt)))
    return v


def kernel_norm(K: LatticeKernel, a: float, q: int, return_point: bool = False):
    """sup over norm <= 1 and |k| < q of (norm v eps)^(a + |k|) |D^k K|."""
    eps = K.grid.eps
    nrm = K.norms()
    r = np.maximum(nrm, eps)
    inside = nrm <= 1.0 + 1e-12
    best, where = 0.0, None
    for k in multi_indices(K.grid.d, q):
        order = 2 * k[0] + sum(k[1:])
        w = np.where(inside, r ** (a + order) * np.abs(derivative_values(K, k)), 0.0)
        i = int(np.argmax(w))
        if w.flat[i] > best:
            best = float(w.flat[i])
            where = (k, np.unravel_index(i, w.shape))
    if return_point:
        return best, where
    return best


def kernel_bound_check(K: LatticeKernel, a: float, q: int, bound: float) -> dict:
    """Compare the kernel norm with ``bound``; report the maximizing point."""
    val, where = kernel_norm(K, a, q, return_point=True)
    out = {"norm": val, "bound": bound, "ok": bool(val <= bound)}
    if where is not None:
        k, idx = where
        disp = K.displacements()[tuple(idx[1:])]
        out["multi_index"] = list(k)
        out["point"] = {"t": float((K.t0 + idx[0]) * K.grid.time_step),
                        "x": [float(v) for v in disp]}
    return out


# ---------------------------------------------------------------------------
# dyadic decomposition


@dataclass(frozen=True, eq=False)
class DyadicDecomposition:
    kernel: LatticeKernel
    n_max: int
    pieces: tuple
    cutoffs: tuple

    def reconstruct(self) -> np.ndarray:
        return np.sum(np.stack(self.pieces), axis=0)

    def support_violations(self) -> list[int]:
        """Indices of pieces with values outside their annulus."""
        r = self.kernel.norms()
        bad = []
        for n, p in enumerate(self.pieces):
            hi = 2.0 ** (-n)
            lo = 2.0 ** (-(n + 2)) if n < self.n_max else 0.0
            outside = (r > hi + 1e-12) | (r < lo - 1e-12)
            if np.any(p[outside] != 0):
                bad.append(n)
        return bad

    def piece_sups(self) -> np.ndarray:
        return np.array([float(np.max(np.abs(p))) for p in self.pieces])

    def scale_constant(self, a: float, q: int = 1) -> np.ndarray:
        """sup|piece_n| / (2^(n a) * kernel_norm) for every n."""
        nrm = kernel_norm(self.kernel, a, q)
        n = np.arange(len(self.pieces))
        return self.piece_sups() / (2.0 ** (n * a) * nrm) if nrm > 0 else np.zeros(len(n))


def dyadic_decompose(K: LatticeKernel) -> DyadicDecomposition:
    """Smooth dyadic annulus partition of unity applied to a kernel supported in
    the unit ball; the last piece carries every point with norm below 2^-N."""
    r = K.norms()
    if np.any(K.values[r > 1.0 + 1e-12] != 0):
        raise ValueError("kernel is not supported in the unit ball")
    n_max = int(-math.floor(math.log2(K.grid.eps)))
    w = [smooth_step(2.0 ** n * r) for n in range(n_max + 1)]
    cut = [1.0 - w[1]] + [w[n] - w[n + 1] for n in range(1, n_max)] + [w[n_max]]
    pieces = tuple(c * K.values for c in cut)
    return DyadicDecomposition(K, n_max, pieces, tuple(cut))


# ---------------------------------------------------------------------------
# measures and renormalized kernels


@dataclass(frozen=True)
class GridMeasure:
    """eps^|s|-weighted counting measure on a box of lattice offsets around a center.

    Offsets are time indices in [k_lo, k_hi] and, per direction, sites in
    [x_lo, x_hi]; the box is translated with the center, so the measure is
    translation invariant.
    """

    grid: GridSpec
    k_lo: int
    k_hi: int
    x_lo: int
    x_hi: int

    @property
    def weight(self) -> float:
        return self.grid.cell_volume

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        ks = np.arange(self.k_lo, self.k_hi + 1)
        xs = np.arange(self.x_lo, self.x_hi + 1)
        grids = np.meshgrid(ks, *([xs] * self.grid.d), indexing="ij")
        flat = [g.ravel() for g in grids]
        return flat[0], np.stack(flat[1:], axis=-1)

    @property
    def n_points(self) -> int:
        return (self.k_hi - self.k_lo + 1) * (self.x_hi - self.x_lo + 1) ** self.grid.d

    @property
    def total_variation(self) -> float:
        return self.weight * self.n_points

    def integrate(self, f: Callable, center=(0, None)) -> float:
        """sum of weight * f(t, y) over the box, f in physical coordinates."""
        k, x = self.offsets()
        ck = center[0]
        cx = np.zeros(self.grid.d, dtype=np.int64) if center[1] is None else np.asarray(center[1])
        t = (k + ck) * self.grid.time_step
        y = (x + cx) * self.grid.eps
        return float(self.weight * np.sum(f(t, y)))

    @classmethod
    def around(cls, grid: GridSpec, t_radius: float, x_radius: float) -> "GridMeasure":
        kr = int(math.floor(t_radius / grid.time_step + 1e-9))
        xr = int(math.floor(x_radius / grid.eps + 1e-9))
        return cls(grid, -kr, kr, -xr, xr)


def _fd_stencil(k: Sequence[int], d: int) -> list[tuple[int, tuple, float]]:
    """(time shift, space shift, weight in grid units) for D^k: forward in time,
    centered in space; weights exclude the eps factors."""
    st = [(0, (0,) * d, 1.0)]
    for _ in range(k[0]):
        st = [(a + s, b, w * c) for a, b, w in st for s, c in ((0, -1.0), (1, 1.0))]
    for i, ki in enumerate(k[1:]):
        for _ in range(ki):
            nxt = []
            for a, b, w in st:
                for s, c in ((-1, -0.5), (1, 0.5)):
                    bb = list(b)
                    bb[i] += s
                    nxt.append((a, tuple(bb), w * c))
            st = nxt
    return st


def _fd_scale(k: Sequence[int], grid: GridSpec) -> float:
    return grid.time_step ** (-k[0]) * grid.eps ** (-sum(k[1:]))


def taylor_renormalize(K: LatticeKernel, r: int, phi: Callable, mu_minus: GridMeasure,
                       mu_plus: GridMeasure, constants: dict | None = None,
                       budget: float | None = None) -> float:
    """Pair a negative-order kernel with a two-point test function after removing
    the Taylor jet of order < |r| of its second argument, plus the constant terms.

    ``phi(t_m, y_m, t_p, y_p)`` takes physical coordinates; ``constants`` maps
    multi-indices to the constants of the diagonal terms (default zero).
    """
    if r >= 0:
        raise ValueError("taylor_renormalize needs r < 0; use positive_renormalize")
    grid = K.grid
    ks = multi_indices(grid.d, -r)
    constants = {} if constants is None else {tuple(k): float(v) for k, v in constants.items()}
    for k in constants:
        if k not in ks:
            raise ValueError(f"constant given for multi-index {k} of order >= {-r}")
    km, xm = mu_minus.offsets()
    kp, xp = mu_plus.offsets()
    cost = km.size * kp.size * (1 + len(ks))
    budget = compute_budget() if budget is None else budget
    if cost > budget:
        raise BudgetError(cost, budget, "taylor_renormalize")
    eps, dt = grid.eps, grid.time_step
    tm, ym = km * dt, xm * eps
    tp, yp = kp * dt, xp * eps
    # jets of phi in the second argument at the diagonal point (z_-, z_-)
    jets = []
    for k in ks:
        acc = np.zeros(km.size)
        for sh_t, sh_x, w in _fd_stencil(k, grid.d):
            acc += w * phi(tm, ym, tm + sh_t * dt, ym + np.asarray(sh_x) * eps)
        jets.append(acc * _fd_scale(k, grid))
    total = 0.0
    for i in range(km.size):
        Kv = K.at(kp - km[i], xp - xm[i])
        T = phi(np.full(kp.size, tm[i]), np.broadcast_to(ym[i], yp.shape), tp, yp)
        for k, jet in zip(ks, jets):
            mono = (tp - tm[i]) ** k[0] * np.prod((yp - ym[i]) ** np.asarray(k[1:]), axis=-1)
            T = T - mono / _kfact(k) * jet[i]
        total += float(np.sum(Kv * T))
    total *= mu_minus.weight * mu_plus.weight
    diag = phi(tm, ym, tm, ym)
    for k in ks:
        c = constants.get(k, 0.0)
        if c:
            total += c / _kfact(k) * mu_minus.weight * float(np.sum(diag))
    return total


def _kfact(k: Sequence[int]) -> float:
    return float(np.prod([math.factorial(v) for v in k]))


def positive_renormalize(K: LatticeKernel, r: int) -> Callable:
    """Two-point kernel K(z_+ - z_-) minus the Taylor jet of order < r at z_+ = 0.

    The returned function takes lattice points ``(k_m, x_m), (k_p, x_p)``.
    """
    if r < 0:
        raise ValueError("positive_renormalize needs r >= 0")
    grid = K.grid
    ks = multi_indices(grid.d, r)
    derivs = [K.with_values(derivative_values(K, k)) if any(k) else K for k in ks]

    def khat(zm, zp):
        km, xm = np.asarray(zm[0]), np.asarray(zm[1])
        kp, xp = np.asarray(zp[0]), np.asarray(zp[1])
        out = K.at(kp - km, xp - xm)
        for k, D in zip(ks, derivs):
            tp = kp * grid.time_step
            yp = torus_reduce(xp * grid.eps) if K.periodic else xp * grid.eps
            mono = tp ** k[0] * np.prod(yp ** np.asarray(k[1:]), axis=-1)
            out = out - mono / _kfact(k) * D.at(-km, -xm)
        return out
    return khat


def generalized_convolution(G: LabeledMultigraph, kernels: dict, lam: float, phi: TestFunction,
                            center: tuple, zdiamond: dict, measures: dict,
                            budget: float | None = None) -> float:
    """Grid sum over integrated vertices of the product of edge kernels and test factors.

    ``center = (k, x)`` is the lattice point of the root, ``zdiamond`` pins the
    noise vertices to lattice points and ``measures`` gives a GridMeasure per
    integrated vertex (boxes are relative to the center).  Edges with kernel id
    ``"test"`` carry the rescaled test function centered at the root.
    """
    grid = next(iter(kernels.values())).grid if kernels else measures[next(iter(measures))].grid
    integ = [v for v in G.vertices if G.roles[v] in ("up", "internal")]
    missing = [v for v in integ if v not in measures]
    if missing:
        raise ValueError(f"no measure for vertices {missing}")
    sizes = [measures[v].n_points for v in integ]
    cost = float(np.prod(sizes)) * max(1, len(G.edges))
    budget = compute_budget() if budget is None else budget
    if cost > budget:
        raise BudgetError(cost, budget, "generalized_convolution")
    ck = int(center[0])
    cx = np.asarray(center[1], dtype=np.int64).reshape(grid.d)
    phil = rescale_test_function(phi, lam, center=(ck * grid.time_step, cx * grid.eps))
    mesh = np.indices(sizes).reshape(len(sizes), -1) if sizes else np.zeros((0, 1), dtype=int)
    pos = {}
    weight = 1.0
    for j, v in enumerate(integ):
        k, x = measures[v].offsets()
        pos[v] = (k[mesh[j]] + ck, x[mesh[j]] + cx)
        weight *= measures[v].weight
    npts = mesh.shape[1]
    pos[G.star] = (np.full(npts, ck), np.broadcast_to(cx, (npts, grid.d)))
    for v in G.noise:
        zk, zx = zdiamond[v]
        pos[v] = (np.full(npts, int(zk)), np.broadcast_to(np.asarray(zx, dtype=np.int64), (npts, grid.d)))
    prodv = np.ones(npts)
    for e in G.edges:
        if e.kernel == "test":
            k, x = pos[e.dst]
            prodv = prodv * phil(k * grid.time_step, x * grid.eps)
            continue
        K = kernels[e.kernel]
        src, dst = pos[e.src], pos[e.dst]
        if e.r == 0:
            prodv = prodv * K.at(dst[0] - src[0], dst[1] - src[1])
        elif e.r > 0:
            khat = positive_renormalize(K, e.r)
            prodv = prodv * khat((src[0] - ck, src[1] - cx), (dst[0] - ck, dst[1] - cx))
        else:
            raise NotImplementedError("edges with r < 0 act on test functions; use taylor_renormalize")
    return float(weight * np.sum(prodv))


# ---------------------------------------------------------------------------
# renormalization constants


def equation_kernels(equation: str, eps: float, c: int = 1) -> tuple[GridSpec, LatticeKernel]:
    """Grid and edge kernel of an equation: K for phi4 (d=3), grad K for kpz (d=1)."""
    if equation == "phi4":
        grid = GridSpec(3, eps)
        return grid, split_green(discrete_green_function(grid), c=c).kernel
    if equation == "kpz":
        grid = GridSpec(1, eps)
        return grid, discrete_gradient_kernel(split_green(discrete_green_function(grid), c=c).kernel)
    raise ValueError(f"unknown equation {equation!r}")


def renorm_constants_phi4(K: LatticeKernel, with_c2: bool = True, budget: float | None = None) -> dict:
    """C1 = sum eps^s K^2 and C2 = 2 sum_w eps^s K(-w) Q(w)^2 with Q the autocorrelation of K."""
    A = K.st
    out = {"C1": st_pair(A, A)}
    if with_c2:
        cost = 4.0 * A.values.size * math.log2(max(2, 2 * A.values.size))
        budget = compute_budget(1e9) if budget is None else budget
        if cost > budget:
            raise BudgetError(cost, budget, "phi4 C2")
        Q = st_correlate(A, A)
        # Q is even, so K(-w) Q(w)^2 summed over w equals K(z) Q(z)^2 summed over z
        out["C2"] = 2.0 * st_pair(A, Q.map(np.square))
    return out


def renorm_constants_kpz(dK: LatticeKernel) -> dict:
    """C1, C2, C3 and c_eps for the differentiated kernel in d = 1."""
    A = dK.st
    Q = st_correlate(A, A).map(_symmetrize)
    C1 = st_pair(A, A)
    # C2 = 4 sum_{a,b} dK(a) dK(b) Q(b - a)^2
    X = st_correlate(Q.map(np.square), A)  # X(tau) = sum_b Q^2(b + tau) dK(b)
    C2 = 4.0 * st_pair(A, X.reflect())
    # C3 = 2 sum_l dK(-l) (dK Q * Q)(l), with the pinned vertex at the origin
    lo, hi = Q.t0, Q.t1
    AQ = STArray(A.window(lo, hi, Q.period) * Q.values, lo, A.grid)
    C3 = 2.0 * st_pair(A.reflect(), st_convolve(AQ, Q))
    # c_eps = sum dK(z) Q(z): odd in space, summed pairwise so it cancels exactly
    lo, hi = A.t0, A.t1
    c_eps = A.grid.cell_volume * reflection_paired_sum(A.window(lo, hi, Q.period) * Q.window(lo, hi))
    return {"C1": C1, "C2": C2, "C3": C3, "c_eps": c_eps}


def phi4_mass_constant(consts: dict) -> float:
    """Combined constant 3 C1 - 9 C2 used in the renormalized cubic equation."""
    return 3.0 * consts["C1"] - 9.0 * consts.get("C2", 0.0)


# ---------------------------------------------------------------------------
# model second moments


def sampled_test_function(phi: TestFunction, lam: float, grid: GridSpec) -> STArray:
    """phi^lam centered at the origin as a free array; lam below eps is raised to eps."""
    lam_eff = max(lam, grid.eps)
    phil = rescale_test_function(phi, lam_eff)
    m = int(math.floor(lam_eff ** 2 / grid.time_step + 1e-9))
    M = int(math.floor(lam_eff / grid.eps + 1e-9))
    ks = np.arange(-m, m + 1)
    one = signed_index(2 * M + 2)
    sites = np.stack(np.meshgrid(*([one] * grid.d), indexing="ij"), axis=-1).reshape(-1, grid.d)
    tt = np.repeat(ks * grid.time_step, sites.shape[0])
    yy = np.tile(sites * grid.eps, (ks.size, 1))
    # phi^lam is evaluated on the torus; slots beyond the support box would
    # pick up its periodic copy, so they are cleared
    inside = np.tile(np.all(np.abs(sites) <= M, axis=-1), ks.size)
    vals = np.where(inside, phil(tt, yy), 0.0).reshape((ks.size,) + (one.size,) * grid.d)
    return STArray(vals, -m, grid)


def model_second_moment(symbol: str, equation: str, lam: float, grid: GridSpec | None = None,
                        phi: TestFunction | None = None, kernel: LatticeKernel | None = None,
                        eps: float | None = None) -> float:
    """Exact second moment of a renormalized model component paired with phi^lam.

    Xi: |phi^lam|^2.  Psi: |f|^2 with f the kernel convolved against phi^lam.
    Psi2: 2 |g|^2 plus the compensated-pair term eps^s sum eps^s g(z, z)^2 with
    g(z1, z2) = sum_z eps^s phi^lam(z) K(z - z1) K(z - z2).
    """
    if symbol not in ("Xi", "Psi", "Psi2"):
        raise ValueError(f"unsupported symbol {symbol!r}")
    if kernel is None:
        if eps is None and grid is None:
            raise ValueError("need a grid, eps or kernel")
        grid, kernel = equation_kernels(equation, grid.eps if grid is not None else eps)
    grid = kernel.grid
    phi = make_test_function("bump4", grid.d) if phi is None else phi
    P = sampled_test_function(phi, lam, grid)
    if symbol == "Xi":
        return st_pair(P, P)
    A = kernel.st
    if symbol == "Psi":
        X = st_correlate(A, P)
        return st_pair(X, X)
    Q = st_correlate(A, A)
    R = Q.map(np.square)
    g2 = st_pair(P, st_convolve(R, P))
    D = st_correlate(A.map(np.square), P)
    jump = grid.cell_volume * st_pair(D, D)
    return 2.0 * g2 + jump
