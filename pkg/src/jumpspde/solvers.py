"""Jump-driven explicit time steppers for the lattice cubic (phi4) and KPZ
equations on the unit torus, with trajectory statistics.

Each step applies an explicit Euler drift update and then adds every noise
jump that falls in the step window at its site, so the integrated noise over
[0, T] at a site is exactly the martingale value there.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .domain import GridSpec
from .noise import NoiseSpec, sample_field

OVERFLOW_GUARD = 1e8


class BlowUpError(RuntimeError):
    """The field left the overflow guard; carries the time it happened."""

    def __init__(self, time: float, max_abs: float):
        super().__init__(f"blow-up at t = {time:.6g} (max |u| = {max_abs:.3g})")
        self.time = time
        self.max_abs = max_abs


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, LatticeState) else np.asarray(u, dtype=float)


def discrete_laplacian(u, eps: float | None = None) -> np.ndarray:
    """(sum of neighbours - 2d u) / eps^2 with periodic wrap."""
    if eps is None:
        eps = u.grid.eps
    v = _values(u)
    out = -2.0 * v.ndim * v
    for ax in range(v.ndim):
        out = out + np.roll(v, 1, axis=ax) + np.roll(v, -1, axis=ax)
    return out / eps ** 2


def discrete_gradient(u, eps: float | None = None) -> np.ndarray:
    """Centered difference (u(x + eps) - u(x - eps)) / (2 eps) in d = 1."""
    if eps is None:
        eps = u.grid.eps
    v = _values(u)
    if v.ndim != 1:
        raise ValueError("discrete_gradient is defined for d = 1")
    return (np.roll(v, -1) - np.roll(v, 1)) / (2 * eps)


@dataclass(frozen=True, eq=False)
class LatticeState:
    values: np.ndarray
    time: float
    equation: str
    grid: GridSpec

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass(frozen=True)
class SolverConfig:
    """Equation constants, renormalization constant and time stepping.

    ``C`` is subtracted as (C - a) u for phi4 and as lam ((grad h)^2 - C) for
    KPZ.  ``dt`` defaults to dt_safety * eps^2 / (2 d), rounded down so the
    horizon is a whole number of steps.
    """

    equation: str
    eps: float
    a: float = 0.0
    lam: float = 1.0
    C: float = 0.0
    dt: float | None = None
    dt_safety: float = 0.5
    initial: str = "zero"
    amplitude: float = 1.0
    burn_in: float = 0.25
    dim: int | None = None

    def __post_init__(self):
        if self.equation not in ("phi4", "kpz", "linear"):
            raise ValueError(f"unknown equation {self.equation!r}")
        if not 0 < self.dt_safety <= 1:
            raise ValueError("dt_safety must lie in (0, 1]")
        if self.dt is not None and self.dt > self.dt_limit * (1 + 1e-12):
            raise ValueError(f"dt = {self.dt} exceeds the stability limit {self.dt_limit}")
        if self.equation == "kpz" and self.dim not in (None, 1):
            raise ValueError("KPZ is solved in d = 1")
        if self.initial not in ("zero", "bump", "stationary"):
            raise ValueError(f"unknown initial condition {self.initial!r}")

    @property
    def d(self) -> int:
        if self.dim is not None:
            return self.dim
        return 3 if self.equation == "phi4" else 1

    @property
    def dt_limit(self) -> float:
        return self.eps ** 2 / (2 * self.d)

    def grid(self, horizon: float = 1.0) -> GridSpec:
        return GridSpec(self.d, self.eps, horizon)

    def steps(self, horizon: float) -> tuple[int, float]:
        """Number of steps and step size covering [0, horizon]."""
        dt = self.dt if self.dt is not None else self.dt_safety * self.dt_limit
        n = max(1, int(math.ceil(horizon / dt - 1e-9)))
        return n, horizon / n

    def to_dict(self) -> dict:
        return asdict(self)


def drift(u: np.ndarray, config: SolverConfig) -> np.ndarray:
    eps = config.eps
    lap = discrete_laplacian(u, eps)
    if config.equation == "phi4":
        return lap + (config.C - config.a) * u - config.lam * u ** 3
    if config.equation == "kpz":
        g = discrete_gradient(u, eps)
        return lap + config.lam * (g * g - config.C)
    return lap


def step(state: LatticeState, config: SolverConfig, dt: float, jump_sites=None,
         jump_deltas=None) -> LatticeState:
    """One drift step of size dt, then the window's jumps added at their sites."""
    if dt > config.dt_limit * (1 + 1e-12):
        raise ValueError(f"dt = {dt} exceeds the stability limit {config.dt_limit}")
    u = state.values + dt * drift(state.values, config)
    if jump_sites is not None and len(jump_sites):
        flat = u.reshape(-1)
        np.add.at(flat, np.asarray(jump_sites), np.asarray(jump_deltas))
    t = state.time + dt
    m = float(np.max(np.abs(u))) if u.size else 0.0
    if not np.isfinite(m) or m > OVERFLOW_GUARD:
        raise BlowUpError(t, m)
    return LatticeState(u, t, state.equation, state.grid)


BATCH = 64


def _laplacian_batch(v: np.ndarray, eps: float) -> np.ndarray:
    d = v.ndim - 1
    out = -2.0 * d * v
    for ax in range(1, d + 1):
        out = out + np.roll(v, 1, axis=ax) + np.roll(v, -1, axis=ax)
    return out / eps ** 2


def _gradient_batch(v: np.ndarray, eps: float) -> np.ndarray:
    return (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2 * eps)


def _drift_batch(v: np.ndarray, config: SolverConfig) -> np.ndarray:
    lap = _laplacian_batch(v, config.eps)
    if config.equation == "phi4":
        return lap + (config.C - config.a) * v - config.lam * v ** 3
    if config.equation == "kpz":
        g = _gradient_batch(v, config.eps)
        return lap + config.lam * (g * g - config.C)
    return lap


def _jump_windows(grid: GridSpec, seeds, replica: int | None, n: int, dt: float):
    """Positive-time jumps of each seed's field grouped by step window (t_k, t_k+1].

    Sites are offset by seed position so one flat index covers the batch.
    """
    V = grid.volume_sites
    win_all, site_all, delta_all = [], [], []
    for b, seed in enumerate(seeds):
        M = sample_field(NoiseSpec.for_grid(grid), grid, seed, replica)
        pos = M.times > 0
        win_all.append(np.clip(np.ceil(M.times[pos] / dt - 1e-12).astype(np.int64) - 1, 0, n - 1))
        site_all.append(M.sites[pos] + b * V)
        delta_all.append(M.deltas[pos])
    win = np.concatenate(win_all)
    order = np.argsort(win, kind="stable")
    sites, deltas = np.concatenate(site_all)[order], np.concatenate(delta_all)[order]
    bounds = np.searchsorted(win[order], np.arange(n + 1))
    return sites, deltas, bounds


def initial_values(config: SolverConfig, grid: GridSpec, seeds) -> np.ndarray:
    """Initial fields for a batch of seeds, shape (B,) + grid shape."""
    B = len(seeds)
    if config.initial == "zero":
        return np.zeros((B,) + grid.shape)
    if config.initial == "bump":
        y = grid.sites().reshape(grid.shape + (grid.d,)) * grid.eps
        v = config.amplitude * np.prod(np.sin(np.pi * y) ** 2, axis=-1)
        return np.broadcast_to(v, (B,) + grid.shape).copy()
    # near-stationary start: long run of the linear equation on its own noise stream
    lin = replace(config, equation="linear", initial="zero", lam=0.0, C=0.0, a=0.0)
    burn = GridSpec(grid.d, grid.eps, config.burn_in)
    return _run_batch(lin, burn, seeds, [], 0, replica=1)["final"]


def initial_state(config: SolverConfig, grid: GridSpec, seed: int) -> LatticeState:
    return LatticeState(initial_values(config, grid, [seed])[0], 0.0, config.equation, grid)


def _run_batch(config: SolverConfig, grid: GridSpec, seeds, probes, record_every: int,
               replica: int | None = None) -> dict:
    n, dt = config.steps(grid.horizon)
    B, V = len(seeds), grid.volume_sites
    sites, deltas, bounds = _jump_windows(grid, seeds, replica, n, dt)
    u = initial_values(config, grid, seeds) if replica is None else np.zeros((B,) + grid.shape)
    axes = tuple(range(1, grid.d + 1))
    alive = np.ones(B, dtype=bool)
    blowup = [None] * B
    noise_sum = np.zeros(B * V)
    grad_sq = np.zeros(B)
    rec = {"t": [], "mean": [], "var": [], "sup": [], "probes": []}
    pidx = tuple(np.array(probes, dtype=np.int64).reshape(-1, grid.d).T)

    def record(t):
        rec["t"].append(t)
        rec["mean"].append(np.mean(u, axis=axes))
        rec["var"].append(np.var(u, axis=axes))
        rec["sup"].append(np.max(np.abs(u), axis=axes))
        rec["probes"].append(u[(slice(None),) + pidx] if len(probes) else np.zeros((B, 0)))
    record(0.0)
    n_rec = [1] * B
    for k in range(n):
        lo, hi = bounds[k], bounds[k + 1]
        if config.equation == "kpz":
            g = _gradient_batch(u, config.eps)
            grad_sq += dt * np.mean(g * g, axis=axes)
        u = u + dt * _drift_batch(u, config)
        flat = u.reshape(-1)
        np.add.at(flat, sites[lo:hi], deltas[lo:hi])
        np.add.at(noise_sum, sites[lo:hi], deltas[lo:hi])
        m = np.max(np.abs(u), axis=axes)
        bad = alive & ~(np.isfinite(m) & (m <= OVERFLOW_GUARD))
        for b in np.flatnonzero(bad):
            blowup[b] = (k + 1) * dt
            alive[b] = False
        u[~alive] = 0.0
        if (record_every > 0 and (k + 1) % record_every == 0) or k + 1 == n:
            record((k + 1) * dt)
            for b in np.flatnonzero(alive):
                n_rec[b] += 1
    noise_mean = noise_sum.reshape(B, V).mean(axis=1)
    out = {"final": u, "blowup": blowup, "noise_mean": noise_mean, "grad_sq": grad_sq,
           "dt": dt, "n_steps": n, "n_rec": n_rec}
    for key in ("t", "mean", "var", "sup", "probes"):
        out[key] = np.array(rec[key]) if rec[key] else np.zeros((0, B))
    return out


def _split_batch(res: dict, seeds) -> list[dict]:
    paths = []
    for b, seed in enumerate(seeds):
        m = res["n_rec"][b]
        paths.append({"t": res["t"][:m], "mean": res["mean"][:m, b], "var": res["var"][:m, b],
                      "sup": res["sup"][:m, b], "probes": res["probes"][:m, b],
                      "final": res["final"][b], "blowup": res["blowup"][b],
                      "noise_mean": float(res["noise_mean"][b]),
                      "grad_sq_integral": float(res["grad_sq"][b]),
                      "dt": res["dt"], "n_steps": res["n_steps"], "seed": int(seed)})
    return paths


def run_path(config: SolverConfig, grid: GridSpec, seed: int, probes=None,
             record_every: int = 1) -> dict:
    """One trajectory on [0, grid.horizon]; records mean, variance and sup."""
    probes = [] if probes is None else [tuple(int(c) for c in p) for p in probes]
    return _split_batch(_run_batch(config, grid, [seed], probes, record_every), [seed])[0]


@dataclass
class SimulationResult:
    config: SolverConfig
    grid: GridSpec
    seeds: list
    paths: list = field(repr=False)

    @property
    def blowups(self) -> list:
        return [(p["seed"], p["blowup"]) for p in self.paths if p["blowup"] is not None]

    def _finite(self) -> list:
        return [p for p in self.paths if p["blowup"] is None]

    def mean_drift(self, remove_noise: bool = False) -> tuple[float, float]:
        """Sample mean and standard error of (mean h(T) - mean h(0)) / T over seeds.

        With ``remove_noise`` the spatial mean of the injected jumps, known
        exactly from each path, is subtracted first.
        """
        T = self.grid.horizon
        vals = np.array([(p["mean"][-1] - p["mean"][0] - (p["noise_mean"] if remove_noise else 0.0)) / T
                         for p in self._finite()])
        return _mean_se(vals)

    def site_second_moment(self, site=None) -> tuple[float, float]:
        """Mean and standard error of u(T, x)^2 over seeds at one site."""
        site = (0,) * self.grid.d if site is None else tuple(site)
        return _mean_se(np.array([p["final"][site] ** 2 for p in self._finite()]))

    def field_second_moment(self) -> tuple[float, float]:
        """Site-averaged u(T, x)^2, one value per seed, with its standard error."""
        return _mean_se(np.array([np.mean(p["final"] ** 2) for p in self._finite()]))

    def summary(self) -> dict:
        fin = self._finite()
        md, mse = self.mean_drift() if fin else (float("nan"), float("nan"))
        nd, nse = self.mean_drift(remove_noise=True) if fin else (float("nan"), float("nan"))
        out = {"config": self.config.to_dict(), "grid": self.grid.to_dict(), "seeds": list(self.seeds),
               "n_finite": len(fin), "blowups": [{"seed": s, "time": t} for s, t in self.blowups],
               "mean_drift": md, "mean_drift_se": mse,
               "drift_without_noise": nd, "drift_without_noise_se": nse}
        if fin:
            out["final_sup_max"] = float(max(p["sup"][-1] for p in fin))
            out["final_var_mean"] = float(np.mean([p["var"][-1] for p in fin]))
        return out


def _mean_se(vals: np.ndarray) -> tuple[float, float]:
    if vals.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return float(np.mean(vals)), se


def _run_chunk(args):
    config, grid, seeds, probes, record_every = args
    return _split_batch(_run_batch(config, grid, seeds, probes, record_every), seeds)


def simulate(config: SolverConfig, seeds, horizon: float, probes=None, record_every: int = 1,
             jobs: int = 1) -> SimulationResult:
    """Run one path per seed, in fixed chunks of seeds so ``jobs`` only changes speed."""
    grid = config.grid(horizon)
    seeds = [int(s) for s in seeds]
    probes = [] if probes is None else [tuple(int(c) for c in p) for p in probes]
    tasks = [(config, grid, seeds[i:i + BATCH], probes, record_every)
             for i in range(0, len(seeds), BATCH)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_run_chunk, tasks))
    else:
        chunks = [_run_chunk(t) for t in tasks]
    return SimulationResult(config, grid, seeds, [p for c in chunks for p in c])


# ---------------------------------------------------------------------------
# closed-form moments of the linear scheme


def _step_multipliers(grid: GridSpec, dt: float) -> np.ndarray:
    from .kernels import laplacian_eigenvalues
    return 1.0 + dt * laplacian_eigenvalues(grid)


def linear_second_moment(grid: GridSpec, dt: float, n_steps: int) -> float:
    """E u(n dt, x)^2 for the linear scheme from zero data, any site.

    Each window injects jumps with variance dt eps^-d per site, so by the
    isometry the moment is dt eps^-d sum_m sum_y (A^m)(x, y)^2, and
    Parseval turns the inner sum into the mean of the squared multipliers.
    """
    mult = _step_multipliers(grid, dt).reshape(-1) ** 2
    m = np.arange(n_steps)[:, None]
    return float(dt * grid.eps ** (-grid.d) * np.sum(np.mean(mult[None, :] ** m, axis=1)))


def kpz_scheme_constant(grid: GridSpec, dt: float, n_steps: int | None = None) -> float:
    """E (grad h)^2 of the linear scheme with the centered gradient.

    With ``n_steps`` it is the average over steps 0..n-1 from zero data, which
    is the constant that cancels the mean drift of a run of that length;
    without it, the stationary value.
    """
    if grid.d != 1:
        raise ValueError("the KPZ constant is defined for d = 1")
    k = np.arange(grid.n_sites)
    g2 = (np.sin(2 * np.pi * k * grid.eps) / grid.eps) ** 2
    a2 = _step_multipliers(grid, dt) ** 2
    scale = dt * grid.eps ** (-grid.d)
    keep = g2 > 0
    g2, a2 = g2[keep], a2[keep]
    if n_steps is None:
        return float(scale * np.mean(np.concatenate([g2 / (1.0 - a2), np.zeros(grid.n_sites - keep.sum())])))
    # E(grad h_n)^2 = scale * mean_k g2 (1 - a2^n) / (1 - a2); average over n < n_steps
    n = np.arange(n_steps)[:, None]
    per_step = np.sum(g2 * (1.0 - a2 ** n) / (1.0 - a2), axis=1) / grid.n_sites
    return float(scale * np.mean(per_step))


def renormalization_constant(equation: str, eps: float, kind: str = "kernel", dt: float | None = None,
                             n_steps: int | None = None) -> float:
    """Constant for the solver: 3 C1 - 9 C2 for phi4; C1 or the scheme constant for KPZ."""
    from . import kernels as kk
    if equation == "phi4":
        _, K = kk.equation_kernels("phi4", eps)
        return kk.phi4_mass_constant(kk.renorm_constants_phi4(K))
    if equation == "kpz":
        if kind == "scheme":
            grid = GridSpec(1, eps)
            if dt is None:
                dt = 0.5 * eps ** 2 / 2
            return kpz_scheme_constant(grid, dt, n_steps)
        _, dK = kk.equation_kernels("kpz", eps)
        return kk.renorm_constants_kpz(dK)["C1"]
    raise ValueError(f"unknown equation {equation!r}")
