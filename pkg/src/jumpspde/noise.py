"""Pure-jump martingale noise on the lattice and its bracket processes.

Every site and component carries a compound Poisson process with rate
``eps**-2`` and fair signed jumps of size ``eps**(1 - d/2)``.  Negative times
use an independent copy, so a field is two-sided on ``[-T, T]``.  Jumps are
stored as flat arrays sorted by ``|time|``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .domain import GridSpec, TestFunction

SIDE_POSITIVE = 0
SIDE_NEGATIVE = 1


@dataclass(frozen=True)
class NoiseSpec:
    """Jump statistics of the driving noise; ``r`` independent components."""

    d: int
    eps: float
    r: int = 1

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("need at least one noise component")

    @property
    def jump_magnitude(self) -> float:
        return self.eps ** (1.0 - self.d / 2.0)

    @property
    def jump_rate(self) -> float:
        return self.eps ** -2.0

    @property
    def variance_constants(self) -> tuple:
        return (1.0,) * self.r

    @property
    def s(self) -> int:
        return self.d + 2

    @classmethod
    def for_grid(cls, grid: GridSpec, r: int = 1) -> "NoiseSpec":
        return cls(d=grid.d, eps=grid.eps, r=r)


@dataclass(frozen=True, eq=False)
class MartingaleField:
    """Realized jumps of all components on ``[-T, T]``, sorted by ``|time|``.

    ``times`` are signed; ``sites`` are flat lattice indices; ``signs`` are
    +-1 and the jump of the two-sided path at a record is ``sign * magnitude``
    (for negative times the jump is ``M_s - M_{s+}``).
    """

    spec: NoiseSpec
    grid: GridSpec
    times: np.ndarray
    sites: np.ndarray
    comps: np.ndarray
    signs: np.ndarray
    seed: int
    replica: int | None = None

    def __post_init__(self):
        for a in (self.times, self.sites, self.comps, self.signs):
            a.setflags(write=False)

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    @property
    def n_jumps(self) -> int:
        return int(self.times.size)

    @property
    def deltas(self) -> np.ndarray:
        return self.signs * self.spec.jump_magnitude

    def site_coords(self) -> np.ndarray:
        return self.grid.unflat(self.sites)

    def select(self, t: float) -> slice:
        """Records with |time| <= t (a prefix, since records are |time|-sorted)."""
        return slice(0, int(np.searchsorted(np.abs(self.times), abs(t), side="right")))

    # serialization
    def to_records(self) -> list[dict]:
        return [{"time": float(t), "site": int(s), "component": int(k), "sign": int(g)}
                for t, s, k, g in zip(self.times, self.sites, self.comps, self.signs)]

    def to_json(self) -> str:
        head = {"d": self.grid.d, "eps": self.grid.eps, "horizon": self.grid.horizon,
                "r": self.spec.r, "seed": self.seed, "replica": self.replica}
        return json.dumps({"header": head, "jumps": self.to_records()})

    @classmethod
    def from_json(cls, text: str) -> "MartingaleField":
        doc = json.loads(text)
        h = doc["header"]
        grid = GridSpec(d=h["d"], eps=h["eps"], horizon=h["horizon"])
        spec = NoiseSpec(d=h["d"], eps=h["eps"], r=h["r"])
        recs = doc["jumps"]
        return from_jumps(spec, grid, [r["time"] for r in recs], [r["site"] for r in recs],
                          [r["component"] for r in recs], [r["sign"] for r in recs],
                          seed=h["seed"], replica=h["replica"])

    def to_bytes(self) -> bytes:
        rec = np.zeros(self.n_jumps, dtype=[("time", "<f8"), ("site", "<i8"),
                                            ("component", "<i2"), ("sign", "i1")])
        rec["time"], rec["site"], rec["component"], rec["sign"] = (
            self.times, self.sites, self.comps, self.signs)
        return rec.tobytes()


def from_jumps(spec: NoiseSpec, grid: GridSpec, times, sites, comps, signs,
               seed: int = 0, replica: int | None = None) -> MartingaleField:
    """Build a field from explicit jump records (used for hand-made paths)."""
    times = np.asarray(times, dtype=float)
    order = np.argsort(np.abs(times), kind="stable")
    abs_sorted = np.abs(times[order])
    if abs_sorted.size > 1 and np.any(np.diff(abs_sorted) <= 0):
        raise ValueError("jump records must have distinct |time| values")
    if np.any(abs_sorted > grid.horizon) or np.any(abs_sorted == 0):
        raise ValueError("jump times must satisfy 0 < |t| <= horizon")
    comps = np.asarray(comps, dtype=np.int16)
    if comps.size and (comps.min() < 1 or comps.max() > spec.r):
        raise ValueError("component labels must lie in 1..r")
    return MartingaleField(spec, grid, times[order],
                           np.asarray(sites, dtype=np.int64)[order],
                           comps[order], np.asarray(signs, dtype=np.int8)[order],
                           int(seed), replica)


def _stream(seed: int, replica: int | None, side: int) -> np.random.Generator:
    key = [int(seed), side] if replica is None else [int(seed), int(replica), side]
    return np.random.default_rng(key)


def sample_field(spec: NoiseSpec, grid: GridSpec, seed: int,
                 replica: int | None = None) -> MartingaleField:
    """Sample the two-sided field on [-T, T]; each side has its own stream."""
    if spec.d != grid.d or abs(spec.eps - grid.eps) > 1e-15:
        raise ValueError("noise spec and grid disagree")
    T = grid.horizon
    cells = grid.volume_sites * spec.r
    parts = []
    for side, sgn in ((SIDE_POSITIVE, 1.0), (SIDE_NEGATIVE, -1.0)):
        rng = _stream(seed, replica, side)
        counts = rng.poisson(spec.jump_rate * T, size=cells)
        total = int(counts.sum())
        owner = np.repeat(np.arange(cells), counts)
        tau = rng.uniform(0.0, T, size=total)
        # uniform(0, T) can return exactly 0; nudge into (0, T]
        tau = np.where(tau == 0.0, T, tau)
        signs = rng.integers(0, 2, size=total).astype(np.int8) * 2 - 1
        parts.append((sgn * tau, owner // spec.r, owner % spec.r + 1, signs, rng))
    times = np.concatenate([p[0] for p in parts])
    # resample colliding |time| values; probability zero but guarded
    guard = _stream(seed, replica, 2)
    while True:
        a = np.abs(times)
        order = np.argsort(a, kind="stable")
        dup = np.flatnonzero(np.diff(a[order]) == 0.0)
        if dup.size == 0:
            break
        bad = order[dup + 1]
        times[bad] = np.sign(times[bad]) * guard.uniform(0.0, T, size=bad.size)
    sites = np.concatenate([p[1] for p in parts]).astype(np.int64)
    comps = np.concatenate([p[2] for p in parts]).astype(np.int16)
    signs = np.concatenate([p[3] for p in parts])
    order = np.argsort(np.abs(times), kind="stable")
    return MartingaleField(spec, grid, times[order], sites[order], comps[order],
                           signs[order], int(seed), replica)


def _side_mask(M: MartingaleField, t: float, strict: bool) -> np.ndarray:
    a = np.abs(M.times)
    same = (M.times > 0) if t >= 0 else (M.times < 0)
    within = a < abs(t) if strict else a <= abs(t)
    return same & within


def _check_time(M: MartingaleField, t: float):
    if abs(t) > M.horizon + 1e-12:
        raise ValueError(f"|t| = {abs(t)} exceeds the sampled horizon {M.horizon}")


def evaluate(M: MartingaleField, k: int, x, t: float, before: bool = False) -> float:
    """Path value M^k_t(x).  ``before=True`` gives the limit from the origin
    side (t- for positive times, t+ for negative times)."""
    _check_time(M, t)
    if t == 0:
        return 0.0
    site = int(M.grid.flat_index(np.atleast_1d(x)))
    m = _side_mask(M, t, before) & (M.sites == site) & (M.comps == k)
    return float(M.spec.jump_magnitude * np.sum(M.signs[m], dtype=np.int64))


def _labels(K: Sequence[int]) -> tuple:
    K = tuple(int(k) for k in K)
    if not K:
        raise ValueError("label vector must be non-empty")
    return K


def bracket_jumps(M: MartingaleField, K: Sequence[int], x, side: int = 1):
    """Jump times and increments of the bracket process [M; K](x) on one side."""
    K = _labels(K)
    n = len(K)
    site = int(M.grid.flat_index(np.atleast_1d(x)))
    sel = (M.sites == site) & ((M.times > 0) if side > 0 else (M.times < 0))
    if len(set(K)) > 1:
        return M.times[:0], np.zeros(0)
    sel &= M.comps == K[0]
    deltas = M.deltas[sel]
    return M.times[sel], M.spec.eps ** (M.spec.d * (n - 1)) * deltas ** n


def bracket(M: MartingaleField, K: Sequence[int], x, t: float) -> float:
    """eps^{d(n-1)} times the sum over jumps in (0, |t|] of prod_i dM^{k_i}(x)."""
    K = _labels(K)
    _check_time(M, t)
    if t == 0:
        return 0.0
    if len(K) == 1:
        return evaluate(M, K[0], x, t)
    times, inc = bracket_jumps(M, K, x, side=1 if t > 0 else -1)
    return float(np.sum(inc[np.abs(times) <= abs(t)]))


def compensator(M: MartingaleField | NoiseSpec, K: Sequence[int], x, t: float) -> float:
    """Predictable compensator of [M; K](x): eps^{(n/2-1)|s|} |t| for even
    equal-label K, zero otherwise."""
    K = _labels(K)
    spec = M.spec if isinstance(M, MartingaleField) else M
    n = len(K)
    if n % 2 or len(set(K)) > 1:
        return 0.0
    return spec.eps ** ((n / 2 - 1) * spec.s) * abs(t)


def compensator_rate(spec: NoiseSpec, K: Sequence[int]) -> float:
    """Time derivative of the compensator (constant for this noise)."""
    return compensator(spec, K, None, 1.0)


def compensated_bracket(M: MartingaleField, K: Sequence[int], x, t: float) -> float:
    """N_K(t, x) = [M; K]_t(x) - <M; K>_t(x)."""
    return bracket(M, K, x, t) - compensator(M, K, x, t)


def bracket_parity_prediction(M: MartingaleField, k: int, n: int, x, t: float) -> float:
    """Right-hand side of the parity identities for K = (k,)*n."""
    s = M.spec.s
    if n % 2:
        return M.spec.eps ** ((n - 1) * s / 2) * evaluate(M, k, x, t)
    return M.spec.eps ** (n * s / 2 - 2) * quadratic_variation(M, k, x, t)


def quadratic_variation(M: MartingaleField, k: int, x, t: float) -> float:
    """[M^k(x), M^k(x)]_t as a sum of squared jumps over (0, |t|]."""
    site = int(M.grid.flat_index(np.atleast_1d(x)))
    m = _side_mask(M, t, False) & (M.sites == site) & (M.comps == k)
    return float(np.sum(M.deltas[m] ** 2))


# ---------------------------------------------------------------------------
# covariation of two pure-jump paths


def _path_values(times, incs, grid_times):
    """Values of the pure-jump path sum_{s <= t} inc_s at the given sorted times."""
    order = np.argsort(times)
    cum = np.concatenate([[0.0], np.cumsum(incs[order])])
    return cum[np.searchsorted(times[order], grid_times, side="right")]


def covariation_jump_sum(ta, da, tb, db, t: float) -> float:
    """sum over common jump times s <= t of (dA_s)(dB_s)."""
    common, ia, ib = np.intersect1d(ta, tb, return_indices=True)
    keep = common <= t
    return float(np.sum(da[ia][keep] * db[ib][keep]))


def covariation_from_products(ta, da, tb, db, t: float) -> float:
    """A_t B_t - int A_{s-} dB_s - int B_{s-} dA_s for pure-jump paths
    starting at zero (positive-time jumps only)."""
    ta, da, tb, db = (np.asarray(v, dtype=float) for v in (ta, da, tb, db))
    a_t = float(np.sum(da[ta <= t]))
    b_t = float(np.sum(db[tb <= t]))
    ka, kb = ta <= t, tb <= t
    # left limits just before each jump of the integrator
    a_left = _path_values(ta, da, np.nextafter(tb[kb], -np.inf))
    b_left = _path_values(tb, db, np.nextafter(ta[ka], -np.inf))
    return a_t * b_t - float(np.sum(a_left * db[kb])) - float(np.sum(b_left * da[ka]))


# ---------------------------------------------------------------------------
# Wiener-limit statistics


def _field_sample_fast(spec: NoiseSpec, grid: GridSpec, t: float, rng: np.random.Generator,
                       k_comp: int = 1):
    """Path values M_t(x) for all sites in one draw: Poisson counts with
    binomial signs.  Equal in law to ``sample_field`` values, not path-identical."""
    counts = rng.poisson(spec.jump_rate * t, size=grid.volume_sites)
    ups = rng.binomial(counts, 0.5)
    return spec.jump_magnitude * (2 * ups - counts), counts


def wiener_statistics(spec: NoiseSpec, grid: GridSpec, phi: TestFunction, t: float,
                      replicas: int, seed: int) -> dict:
    """Statistics of the spatial pairing eps^d sum_x M_t(x) phi(0, x) over replicas."""
    if replicas < 100:
        raise ValueError("need at least 100 replicas")
    w = phi.spatial_slice(grid, 0.0).ravel()
    jump_scale = grid.eps ** grid.d * spec.jump_magnitude
    # eps^(1 + d/2) formed as eps^d * magnitude so the comparison is exact
    bound = jump_scale * phi.sup_norm * phi.scale ** (-(grid.d + 2))
    vals = np.empty(replicas)
    max_jump = 0.0
    for i in range(replicas):
        rng = np.random.default_rng([int(seed), i])
        m, counts = _field_sample_fast(spec, grid, t, rng)
        vals[i] = grid.eps ** grid.d * float(np.dot(m, w))
        if np.any(counts):
            max_jump = max(max_jump, float(np.max(jump_scale * np.abs(w[counts > 0]))))
    target = t * grid.eps ** grid.d * float(np.sum(w * w))
    var = float(np.var(vals, ddof=1))
    m4 = float(np.mean((vals - vals.mean()) ** 4))
    se_var = float(np.sqrt(max(m4 - var ** 2, 0.0) / replicas))
    kurt = float(stats.kurtosis(vals, fisher=True, bias=False)) if var > 0 else 0.0
    return {
        "variance": var,
        "target_variance": target,
        "variance_se": se_var,
        "variance_ratio": var / target if target > 0 else float("nan"),
        "excess_kurtosis": kurt,
        "max_jump": max_jump,
        "jump_bound": bound,
        "jump_bound_ok": bool(max_jump <= bound),
        "replicas": replicas,
    }
