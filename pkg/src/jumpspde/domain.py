"""Space-time lattice geometry, grid functions and rescaled test functions.

Points carry a real time and an integer site index on the periodic lattice of
mesh ``eps`` (``N = 1/eps`` sites per direction).  Physical spatial coordinates
are ``site * eps``.  Time integrals are grid sums with step ``eps**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial

_TOL = 1e-9


@dataclass(frozen=True)
class ScalingSpec:
    """Parabolic scaling (2, 1, ..., 1) in dimension ``d``."""

    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"spatial dimension must be a positive integer, got {self.d}")

    @property
    def s_norm_order(self) -> int:
        return self.d + 2

    def multi_index_order(self, k: Sequence[int]) -> int:
        """Scaled order of a multi-index (k_t, k_1, ..., k_d)."""
        k = tuple(int(v) for v in k)
        if len(k) != self.d + 1:
            raise ValueError("multi-index must have d + 1 entries")
        return 2 * k[0] + sum(k[1:])


@dataclass(frozen=True)
class GridSpec:
    """Periodic lattice of mesh ``eps`` on the unit torus with time step ``eps**2``."""

    d: int
    eps: float
    horizon: float = 1.0

    def __post_init__(self):
        ScalingSpec(self.d)
        if not (0.0 < self.eps <= 1.0):
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        n = 1.0 / self.eps
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"1/eps must be an integer, got 1/{self.eps} = {n}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def scaling(self) -> ScalingSpec:
        return ScalingSpec(self.d)

    @property
    def s(self) -> int:
        return self.d + 2

    @property
    def n_sites(self) -> int:
        return int(round(1.0 / self.eps))

    @property
    def time_step(self) -> float:
        return self.eps ** 2

    @property
    def cell_volume(self) -> float:
        return self.eps ** self.s

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_sites,) * self.d

    @property
    def volume_sites(self) -> int:
        return self.n_sites ** self.d

    def sites(self) -> np.ndarray:
        """All lattice sites as an integer array of shape (N**d, d), C order."""
        idx = np.indices(self.shape).reshape(self.d, -1).T
        return np.ascontiguousarray(idx)

    def flat_index(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x) % self.n_sites
        return np.ravel_multi_index(tuple(np.moveaxis(x, -1, 0)), self.shape)

    def unflat(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def time_nodes(self, radius: float, start: float | None = None) -> np.ndarray:
        """Grid times k*eps**2 inside [-radius, radius] (or [start, radius])."""
        dt = self.time_step
        kmax = int(np.floor(radius / dt + _TOL))
        kmin = -kmax if start is None else int(np.ceil(start / dt - _TOL))
        return np.arange(kmin, kmax + 1) * dt

    def to_dict(self) -> dict:
        return {"d": self.d, "eps": self.eps, "horizon": self.horizon}


@dataclass(frozen=True)
class SpaceTimePoint:
    """A time together with a lattice site; ``coords`` gives physical space."""

    t: float
    x: tuple
    eps: float

    def __post_init__(self):
        n = int(round(1.0 / self.eps))
        x = tuple(int(v) for v in np.atleast_1d(self.x))
        if any(v < 0 or v >= n for v in x):
            raise ValueError(f"site indices must lie in [0, {n}), got {x}")
        object.__setattr__(self, "x", x)

    @property
    def coords(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float) * self.eps


def torus_reduce(y: np.ndarray) -> np.ndarray:
    """Nearest representative of a unit-torus displacement, in (-1/2, 1/2]."""
    y = np.asarray(y, dtype=float)
    r = y - np.round(y)
    return np.where(r <= -0.5, r + 1.0, r)


def parabolic_norm(t, x, scaling: ScalingSpec | None = None, torus: bool = True) -> np.ndarray:
    """max(sqrt|t|, |x_1|, ..., |x_d|) for physical displacements ``x`` of shape (..., d)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if scaling is not None and x.shape[-1] != scaling.d:
        raise ValueError("displacement dimension does not match scaling")
    if torus:
        x = torus_reduce(x)
    return np.maximum(np.sqrt(np.abs(t)), np.max(np.abs(x), axis=-1))


# ---------------------------------------------------------------------------
# grid functions


def _as_args(t, x, arity: int, d: int):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x)
    if t.shape[-1:] != (arity,) or x.shape[-2:] != (arity, d):
        raise ValueError(f"expected t (..., {arity}) and x (..., {arity}, {d}), got {t.shape}, {x.shape}")
    return t, x


class GridFunction:
    """Deterministic function of ``arity`` space-time points on the lattice.

    The evaluator takes ``t`` of shape (..., n) and integer sites ``x`` of shape
    (..., n, d) and returns shape (...).  Values vanish whenever some argument
    has ``|t| > t_radius``.  A function may additionally carry a separable form
    ``terms = [(coef, (g_1, ..., g_n)), ...]`` with one-point factors ``g_i``;
    integrals and norms use it to avoid dense tensor evaluation.
    """

    def __init__(self, arity: int, d: int, evaluator: Callable, t_radius: float,
                 terms: list | None = None):
        if arity < 1:
            raise ValueError("arity must be at least 1")
        if not np.isfinite(t_radius):
            raise ValueError("grid functions must have bounded time support")
        self.arity = int(arity)
        self.d = int(d)
        self._evaluator = evaluator
        self.t_radius = float(t_radius)
        self.terms = terms

    # construction helpers
    @classmethod
    def point(cls, fn: Callable, d: int, t_radius: float) -> "GridFunction":
        """One-point function from ``fn(t, x)`` with t (...), x (..., d)."""
        def ev(t, x):
            return fn(t[..., 0], x[..., 0, :])
        g = cls(1, d, ev, t_radius)
        g.terms = [(1.0, (g,))]
        return g

    @classmethod
    def tensor_of(cls, factors: Sequence["GridFunction"], coef: float = 1.0) -> "GridFunction":
        """Rank-one tensor product of one-point functions."""
        factors = tuple(factors)
        if any(g.arity != 1 for g in factors):
            raise ValueError("tensor_of expects one-point factors")
        d = factors[0].d
        radius = min(g.t_radius for g in factors)

        def ev(t, x):
            out = np.full(t.shape[:-1], float(coef))
            for i, g in enumerate(factors):
                out = out * g.point_values(t[..., i], x[..., i, :])
            return out
        return cls(len(factors), d, ev, radius, [(float(coef), factors)])

    # evaluation
    def __call__(self, t, x) -> np.ndarray:
        t, x = _as_args(t, x, self.arity, self.d)
        inside = np.all(np.abs(t) <= self.t_radius + _TOL, axis=-1)
        vals = np.asarray(self._evaluator(t, x), dtype=float)
        return np.where(inside, vals, 0.0)

    def point_values(self, t, x) -> np.ndarray:
        """Evaluate a one-point function at t (...), x (..., d)."""
        if self.arity != 1:
            raise ValueError("point_values needs a one-point function")
        t = np.asarray(t, dtype=float)
        return self(t[..., None], np.asarray(x)[..., None, :])

    @property
    def is_separable(self) -> bool:
        return self.terms is not None

    # algebra
    def tensor(self, other: "GridFunction") -> "GridFunction":
        n1, n2 = self.arity, other.arity
        a, b = self, other

        def ev(t, x):
            return a(t[..., :n1], x[..., :n1, :]) * b(t[..., n1:], x[..., n1:, :])
        terms = None
        if a.is_separable and b.is_separable:
            terms = [(c1 * c2, f1 + f2) for c1, f1 in a.terms for c2, f2 in b.terms]
        return GridFunction(n1 + n2, self.d, ev, min(a.t_radius, b.t_radius), terms)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        if other.arity != self.arity:
            raise ValueError("arity mismatch")
        a, b = self, other
        terms = a.terms + b.terms if a.is_separable and b.is_separable else None
        return GridFunction(self.arity, self.d, lambda t, x: a(t, x) + b(t, x),
                            max(a.t_radius, b.t_radius), terms)

    def scale(self, c: float) -> "GridFunction":
        a = self
        terms = [(c * k, f) for k, f in a.terms] if a.is_separable else None
        return GridFunction(self.arity, self.d, lambda t, x: c * a(t, x), a.t_radius, terms)

    __rmul__ = scale

    def permute(self, perm: Sequence[int]) -> "GridFunction":
        """Function g with g(z_0..z_{n-1}) = f(z_{perm[0]}, ..., z_{perm[n-1]})."""
        perm = list(perm)
        a = self
        terms = None
        if a.is_separable:
            # f = sum c prod_i g_i(z_i); g(z) = f(z_perm) = sum c prod_i g_i(z_{perm[i]})
            inv = np.argsort(perm)
            terms = [(c, tuple(fs[inv[j]] for j in range(len(perm)))) for c, fs in a.terms]
        return GridFunction(self.arity, self.d,
                            lambda t, x: a(t[..., perm], x[..., perm, :]), a.t_radius, terms)

    def restrict(self, positions: Sequence[int], t_fixed, x_fixed) -> "GridFunction":
        """Fix the arguments at ``positions`` to the given points."""
        positions = list(positions)
        rest = [i for i in range(self.arity) if i not in positions]
        if not rest:
            raise ValueError("restriction would leave no free argument")
        a = self
        t_fixed = np.asarray(t_fixed, dtype=float)
        x_fixed = np.asarray(x_fixed)

        def ev(t, x):
            shape = t.shape[:-1]
            tt = np.empty(shape + (a.arity,))
            xx = np.empty(shape + (a.arity, a.d), dtype=x.dtype)
            tt[..., rest] = t
            xx[..., rest, :] = x
            tt[..., positions] = t_fixed
            xx[..., positions, :] = x_fixed
            return a(tt, xx)
        return GridFunction(len(rest), self.d, ev, self.t_radius)

    def diagonal(self, groups: Sequence[Sequence[int]]) -> "GridFunction":
        """Merge argument groups: g(w_1..w_m) = f with all of group j set to w_j."""
        groups = [list(g) for g in groups]
        owner = np.empty(self.arity, dtype=int)
        for j, g in enumerate(groups):
            owner[g] = j
        a = self
        terms = None
        if a.is_separable:
            terms = []
            for c, fs in a.terms:
                merged = []
                for g in groups:
                    merged.append(_product_point([fs[i] for i in g]))
                terms.append((c, tuple(merged)))
        return GridFunction(len(groups), self.d,
                            lambda t, x: a(t[..., owner], x[..., owner, :]), a.t_radius, terms)


def _product_point(fs: list) -> GridFunction:
    if len(fs) == 1:
        return fs[0]

    def fn(t, x):
        out = np.ones(np.shape(t))
        for g in fs:
            out = out * g.point_values(t, x)
        return out
    return GridFunction.point(fn, fs[0].d, min(g.t_radius for g in fs))


def zero_function(arity: int, d: int, t_radius: float = 1.0) -> GridFunction:
    z = GridFunction.point(lambda t, x: np.zeros(np.shape(t)), d, t_radius)
    return GridFunction.tensor_of([z] * arity, coef=0.0)


# ---------------------------------------------------------------------------
# test functions


def _poly_sup(p: Polynomial) -> float:
    """Sup of |p| on [-1, 1] from endpoints and interior critical points."""
    pts = [-1.0, 1.0]
    if p.degree() > 1:
        crit = p.deriv().roots()
        pts += [float(r.real) for r in crit if abs(r.imag) < 1e-12 and -1 <= r.real <= 1]
    return float(np.max(np.abs(p(np.array(pts)))))


@dataclass(frozen=True)
class TestFunction:
    """Compactly supported test function in physical coordinates.

    ``base(s, y)`` is supported in |s| <= 1, |y_i| <= 1.  The stored function is
    ``scale**(-|s|) * base((t - t0) / scale**2, (y - y0) / scale)`` with the
    spatial displacement reduced on the unit torus.
    """

    __test__ = False  # keep pytest from collecting the class

    d: int
    base: Callable = field(repr=False, compare=False)
    sup_norm: float = 1.0
    derivative_order: int = 0
    scale: float = 1.0
    center_t: float = 0.0
    center_x: tuple = ()
    kind: str = "custom"

    def __post_init__(self):
        if not self.center_x:
            object.__setattr__(self, "center_x", (0.0,) * self.d)

    def __call__(self, t, y) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        lam = self.scale
        s = (t - self.center_t) / lam ** 2
        u = torus_reduce(y - np.asarray(self.center_x)) / lam
        return lam ** (-(self.d + 2)) * self.base(s, u)

    def on_grid(self, grid: GridSpec) -> GridFunction:
        """One-point grid function sampling at lattice sites."""
        eps = grid.eps
        return GridFunction.point(lambda t, x: self(t, x * eps), grid.d, abs(self.center_t) + self.scale ** 2)

    def spatial_slice(self, grid: GridSpec, t: float = 0.0) -> np.ndarray:
        """Values at time ``t`` on all lattice sites, shape grid.shape."""
        return self(np.full(grid.volume_sites, t), grid.sites() * grid.eps).reshape(grid.shape)


def polynomial_bump(d: int, power: int = 4, derivative_order: int = 2) -> TestFunction:
    """(1 - s^2)^p prod_i (1 - y_i^2)^p, normalized so every derivative up to
    ``derivative_order`` (total order, unscaled) has sup norm at most one."""
    p = Polynomial([1.0, 0.0, -1.0]) ** power
    sups = [_poly_sup(p.deriv(k)) if k else _poly_sup(p) for k in range(derivative_order + 1)]
    worst = 0.0
    for k in np.ndindex(*([derivative_order + 1] * (d + 1))):
        if sum(k) <= derivative_order:
            worst = max(worst, float(np.prod([sups[j] for j in k])))
    amp = 1.0 / worst

    def base(s, y):
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=float)
        out = amp * np.where(np.abs(s) <= 1.0, (1.0 - s * s) ** power, 0.0)
        for i in range(d):
            yi = y[..., i]
            out = out * np.where(np.abs(yi) <= 1.0, (1.0 - yi * yi) ** power, 0.0)
        return out
    return TestFunction(d=d, base=base, sup_norm=amp, derivative_order=derivative_order,
                        kind=f"bump{power}")


def make_test_function(kind: str, d: int) -> TestFunction:
    """Test functions addressable from configs by ``phi_kind``."""
    if kind.startswith("bump"):
        power = int(kind[4:] or 4)
        return polynomial_bump(d, power=power)
    raise ValueError(f"unknown test function kind {kind!r}")


def rescale_test_function(phi: TestFunction, lam: float, z: SpaceTimePoint | None = None,
                          center: tuple | None = None) -> TestFunction:
    """phi^lam_z(t', y') = lam^{-|s|} phi(lam^-2 (t' - t), lam^-1 (y' - y)).

    The center is given either as a lattice point ``z`` or as physical
    coordinates ``center = (t, (y_1, ..., y_d))``.
    """
    if not lam > 0:
        raise ValueError(f"scale must be positive, got {lam}")
    if lam > 1:
        raise ValueError(f"scale must be at most 1, got {lam}")
    if z is not None:
        ct, cx = z.t, tuple(z.coords)
    elif center is not None:
        ct, cx = float(center[0]), tuple(float(v) for v in np.atleast_1d(center[1]))
    else:
        ct, cx = 0.0, (0.0,) * phi.d
    new_t = ct + lam ** 2 * phi.center_t
    new_x = tuple(float(v) for v in np.asarray(cx) + lam * np.asarray(phi.center_x))
    return TestFunction(d=phi.d, base=phi.base, sup_norm=phi.sup_norm,
                        derivative_order=phi.derivative_order, scale=phi.scale * lam,
                        center_t=new_t, center_x=new_x, kind=phi.kind)


# ---------------------------------------------------------------------------
# pairings and norms


def extend_to_distribution(u: GridFunction, phi: TestFunction | Callable, grid: GridSpec) -> float:
    """eps^d sum_x of the grid-quadrature time integral of u * phi."""
    if u.arity != 1:
        raise ValueError("extension pairs one-point functions")
    ts = grid.time_nodes(u.t_radius)
    sites = grid.sites()
    tt = np.repeat(ts, sites.shape[0])
    xx = np.tile(sites, (ts.size, 1))
    vals = u.point_values(tt, xx) * phi(tt, xx * grid.eps)
    return float(grid.time_step * grid.eps ** grid.d * np.sum(vals))


def grid_points(grid: GridSpec, t_radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All points of the time-space grid with |t| <= t_radius: (t (P,), x (P, d))."""
    ts = grid.time_nodes(t_radius)
    sites = grid.sites()
    return np.repeat(ts, sites.shape[0]), np.tile(sites, (ts.size, 1))


def _gram(g: GridFunction, h: GridFunction, grid: GridSpec) -> float:
    radius = min(g.t_radius, h.t_radius)
    t, x = grid_points(grid, radius)
    return float(grid.cell_volume * np.sum(g.point_values(t, x) * h.point_values(t, x)))


def l2_eps_norm(f: GridFunction, grid: GridSpec, chunk: int = 2 ** 22) -> float:
    """Square root of the cell-weighted n-fold grid sum of |f|^2."""
    if f.is_separable:
        total = 0.0
        terms = f.terms
        for a, (ca, fa) in enumerate(terms):
            for b, (cb, fb) in enumerate(terms):
                if b < a:
                    continue
                prod = ca * cb * np.prod([_gram(fa[i], fb[i], grid) for i in range(f.arity)])
                total += prod if a == b else 2.0 * prod
        return float(np.sqrt(max(total, 0.0)))
    t1, x1 = grid_points(grid, f.t_radius)
    p = t1.size
    n = f.arity
    count = p ** n
    total = 0.0
    for start in range(0, count, chunk):
        flat = np.arange(start, min(count, start + chunk))
        idx = np.stack(np.unravel_index(flat, (p,) * n), axis=-1)
        vals = f(t1[idx], x1[idx])
        total += float(np.sum(vals * vals))
    return float(np.sqrt(total * grid.cell_volume ** n))
