"""Batch experiment driver.

Every command reads an optional JSON config, merges it over its defaults,
validates it, runs, and writes ``config.json``, ``results.csv`` and
``summary.json`` (plus ``figures/*.png`` for sweeps and trajectories) to
``<out>/<command>/<run id>/``.  The run id defaults to a UTC timestamp and
never appears inside the artifacts, so reruns with the same config produce
identical files.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 bad config or
arguments, 3 compute budget refused, 4 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction

import jsonschema
import numpy as np

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_RUNTIME = 4

COMMANDS = ("noise-stats", "bracket-check", "chaos-check", "moment-ratio", "graph-check",
            "exponents", "renorm-scan", "model-scaling", "simulate")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_EPS = {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5}

DEFAULTS = {
    "noise-stats": {"d": 1, "eps": 1 / 64, "t": 1.0, "replicas": 10000, "seed": 0,
                    "test_function": "bump4", "max_se": 5.0, "max_kurtosis": 0.3},
    "bracket-check": {"d": 1, "eps": 1 / 8, "horizon": 1.0, "paths": 100, "seed": 0,
                      "orders": [2, 3, 4, 5], "concat_max": 5, "tolerance": 1e-12},
    "chaos-check": {"d": 1, "eps": 1 / 8, "horizon": 0.25, "paths": 100, "seed": 0,
                    "cases": [{"m": [1, 1], "tolerance": 1e-9},
                              {"m": [2, 3], "tolerance": 1e-6},
                              {"m": [1, 1, 1], "tolerance": 1e-6}]},
    "moment-ratio": {"d": 1, "eps": 1 / 16, "horizon": 0.5, "replicas": 10000, "seed": 0,
                     "max_se": 5.0},
    "graph-check": {"corpus": None},
    "exponents": {"corpus": None, "fuzz": 0, "max_vertices": 7, "seed": 0, "tolerance": 1e-12},
    "renorm-scan": {"equation": "kpz", "eps": [1 / 8, 1 / 16, 1 / 32, 1 / 64], "slab": 1,
                    "with_c2": False, "slope": None, "c_eps_ratio": 0.3},
    "model-scaling": {"equation": "kpz", "eps": 1 / 128, "symbols": ["Xi", "Psi"],
                      "n_lambda": 8, "lambda_min_factor": 4.0, "lambda_max": 0.5,
                      "slopes": {"Xi": -3.0, "Psi": -1.0}, "slope_tolerance": 0.2,
                      "plateau_factors": [0.25, 0.5], "plateau_band": [0.8, 1.25]},
    "simulate": {"equation": "kpz", "d": None, "eps": 1 / 32, "dt_safety": 0.5, "lambda": 1.0,
                 "a": 0.0, "renormalize": True, "constant": "kernel", "horizon": 0.05,
                 "seeds": 10, "seed": 0, "probes": [], "initial": "zero", "record_every": 1,
                 "expect_no_blowup": True},
}

SCHEMAS = {
    "noise-stats": {"d": _INT, "eps": _EPS, "t": _POS, "replicas": {"type": "integer", "minimum": 100},
                    "seed": _INT, "test_function": {"type": "string"}, "max_se": _POS,
                    "max_kurtosis": _POS},
    "bracket-check": {"d": _INT, "eps": _EPS, "horizon": _POS, "paths": {"type": "integer", "minimum": 0},
                      "seed": _INT, "orders": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                      "concat_max": {"type": "integer", "minimum": 2}, "tolerance": _POS},
    "chaos-check": {"d": _INT, "eps": _EPS, "horizon": _POS, "paths": {"type": "integer", "minimum": 0},
                    "seed": _INT,
                    "cases": {"type": "array", "items": {
                        "type": "object", "required": ["m"],
                        "properties": {"m": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                             "minItems": 1},
                                       "tolerance": _POS}}}},
    "moment-ratio": {"d": _INT, "eps": _EPS, "horizon": _POS, "replicas": {"type": "integer", "minimum": 2},
                     "seed": _INT, "max_se": _POS},
    "graph-check": {"corpus": {"type": ["string", "null"]}},
    "exponents": {"corpus": {"type": ["string", "null"]}, "fuzz": {"type": "integer", "minimum": 0},
                  "max_vertices": {"type": "integer", "minimum": 3, "maximum": 12}, "seed": _INT,
                  "tolerance": _POS},
    "renorm-scan": {"equation": {"enum": ["kpz", "phi4"]}, "eps": {"type": "array", "items": _EPS},
                    "slab": {"type": "integer", "minimum": 0}, "with_c2": {"type": "boolean"},
                    "slope": {"type": ["array", "null"], "items": _NUM, "minItems": 2, "maxItems": 2},
                    "c_eps_ratio": {"type": ["number", "null"]}},
    "model-scaling": {"equation": {"enum": ["kpz", "phi4"]}, "eps": _EPS,
                      "symbols": {"type": "array", "items": {"enum": ["Xi", "Psi", "Psi2"]}},
                      "n_lambda": {"type": "integer", "minimum": 0}, "lambda_min_factor": _POS,
                      "lambda_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                      "slopes": {"type": "object", "additionalProperties": _NUM},
                      "slope_tolerance": _POS,
                      "plateau_factors": {"type": "array", "items": _POS},
                      "plateau_band": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    "simulate": {"equation": {"enum": ["kpz", "phi4", "linear"]}, "d": {"type": ["integer", "null"]},
                 "eps": _EPS, "dt_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                 "lambda": _NUM, "a": _NUM, "renormalize": {"type": "boolean"},
                 "constant": {"enum": ["kernel", "scheme"]}, "horizon": _POS,
                 "seeds": {"type": "integer", "minimum": 0}, "seed": _INT,
                 "probes": {"type": "array", "items": {"type": "array", "items": _INT}},
                 "initial": {"enum": ["zero", "bump", "stationary"]},
                 "record_every": {"type": "integer", "minimum": 0},
                 "expect_no_blowup": {"type": "boolean"}},
}


def resolve_config(command: str, doc: dict | None, overrides: dict | None = None) -> dict:
    """Defaults, then the config document, then command-line overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg.update(doc or {})
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    schema = {"type": "object", "properties": SCHEMAS[command], "additionalProperties": False}
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {path}: {err.message}") from None
    return cfg


def parse_eps(text: str) -> list[float]:
    """'1/8..1/64' is a halving sweep, '1/8,1/16' a list, '' an empty sweep."""
    text = text.strip()
    if not text:
        return []
    if ".." in text:
        lo, hi = (Fraction(p) for p in text.split(".."))
        out, e = [], lo
        while e >= hi:
            out.append(float(e))
            e /= 2
        if not out or abs(out[-1] - float(hi)) > 1e-15:
            raise ConfigError(f"{text!r} is not a halving range")
        return out
    return [float(Fraction(p)) for p in text.split(",")]


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_csv(path: str, header: list, rows: list):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in header])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def write_json(path: str, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


class Outcome:
    """Collected results of one command run."""

    def __init__(self, header: list):
        self.header = header
        self.rows: list = []
        self.summary: dict = {}
        self.checks: list = []
        self.figures: list = []  # (name, callable(ax_figure))
        self.extra: dict = {}  # relative path -> (header, rows)

    def check(self, name: str, ok: bool, detail=None):
        self.checks.append({"name": name, "passed": bool(ok), "detail": detail})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def _save_figures(run_dir: str, figures: list):
    if not figures:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    os.makedirs(os.path.join(run_dir, "figures"), exist_ok=True)
    for name, draw in figures:
        fig, ax = plt.subplots(figsize=(5.0, 3.6), dpi=100)
        draw(ax)
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "figures", name + ".png"), metadata={"Software": None})
        plt.close(fig)


def write_artifacts(run_dir: str, command: str, cfg: dict, out: Outcome, figures: bool = True):
    os.makedirs(run_dir, exist_ok=True)
    write_json(os.path.join(run_dir, "config.json"), {"command": command, "config": cfg})
    write_csv(os.path.join(run_dir, "results.csv"), out.header, out.rows)
    for rel, (header, rows) in sorted(out.extra.items()):
        path = os.path.join(run_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_csv(path, header, rows)
    summary = dict(out.summary)
    summary["checks"] = out.checks
    summary["passed"] = out.passed
    write_json(os.path.join(run_dir, "summary.json"), summary)
    if figures:
        _save_figures(run_dir, out.figures)


# ---------------------------------------------------------------------------
# helpers


def _pool_map(fn, items: list, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def fit_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def smooth_factor(grid, horizon: float, coef):
    """Smooth one-point integrand cos(a t + 2 pi b x_1) + c, tapered in time."""
    from .domain import GridFunction
    a, b, c = (float(v) for v in coef)
    eps = grid.eps

    def fn(t, x):
        taper = np.clip(1.0 - (t / horizon) ** 2, 0.0, None) ** 2
        return (np.cos(a * t + 2 * np.pi * b * x[..., 0] * eps) + c) * taper
    return GridFunction.point(fn, grid.d, horizon)


# ---------------------------------------------------------------------------
# commands


def cmd_noise_stats(cfg: dict, jobs: int) -> Outcome:
    from .domain import GridSpec, make_test_function
    from .noise import NoiseSpec, wiener_statistics
    grid = GridSpec(cfg["d"], cfg["eps"], cfg["t"])
    phi = make_test_function(cfg["test_function"], cfg["d"])
    st = wiener_statistics(NoiseSpec.for_grid(grid), grid, phi, cfg["t"], cfg["replicas"], cfg["seed"])
    out = Outcome(list(st.keys()))
    out.rows.append(st)
    z = abs(st["variance"] - st["target_variance"]) / st["variance_se"] if st["variance_se"] > 0 else 0.0
    out.summary = {"statistics": st, "variance_z": z}
    out.check("variance within max_se standard errors", z <= cfg["max_se"], z)
    out.check("excess kurtosis within band", abs(st["excess_kurtosis"]) <= cfg["max_kurtosis"],
              st["excess_kurtosis"])
    out.check("every test-function jump within bound", st["jump_bound_ok"], st["max_jump"])
    return out


def _rel(lhs: float, rhs: float, mass: float) -> float:
    """|lhs - rhs| over the larger of |lhs|, |rhs| and the absolute mass of the summands."""
    scale = max(abs(lhs), abs(rhs), mass)
    return abs(lhs - rhs) / scale if scale > 0 else 0.0


def _bracket_path(args):
    cfg, rep = args
    from .domain import GridSpec
    from .noise import (NoiseSpec, bracket, bracket_jumps, bracket_parity_prediction,
                        covariation_from_products, sample_field)
    grid = GridSpec(cfg["d"], cfg["eps"], cfg["horizon"])
    M = sample_field(NoiseSpec.for_grid(grid, r=2), grid, cfg["seed"], replica=rep)
    rng = np.random.default_rng([cfg["seed"], rep, 7])
    t = cfg["horizon"] * float(rng.uniform(0.5, 1.0))
    rows = []
    x = rng.integers(0, grid.n_sites, size=grid.d)

    def jumps(K):
        ts, ds = bracket_jumps(M, K, x) if len(K) > 1 else _value_jumps(M, K[0], x)
        keep = ts <= t
        return ts[keep], ds[keep]
    for n in cfg["orders"]:
        k = int(rng.integers(1, 3))
        lhs = bracket(M, (k,) * n, x, t)
        rhs = bracket_parity_prediction(M, k, n, x, t)
        mass = float(np.sum(np.abs(jumps((k,) * n)[1])))
        rows.append({"replica": rep, "check": f"parity n={n}", "lhs": lhs, "rhs": rhs,
                     "rel_error": _rel(lhs, rhs, mass)})
        mixed = [1] * n
        mixed[int(rng.integers(0, n))] = 2
        val = bracket(M, mixed, x, t)
        rows.append({"replica": rep, "check": f"mixed n={n}", "lhs": val, "rhs": 0.0,
                     "rel_error": 0.0 if val == 0.0 else float("inf")})
    total = int(rng.integers(2, cfg["concat_max"] + 1))
    cut = int(rng.integers(1, total))
    labels = np.full(total, int(rng.integers(1, 3)))
    if rng.random() < 0.25:
        labels[int(rng.integers(0, total))] = 3 - labels[0]
    K, L = tuple(int(v) for v in labels[:cut]), tuple(int(v) for v in labels[cut:])
    lhs = bracket(M, K + L, x, t)
    (ta, da), (tb, db) = jumps(K), jumps(L)
    w = M.spec.eps ** M.spec.d
    rhs = w * covariation_from_products(ta, da, tb, db, t)
    mass = w * float(np.sum(np.abs(da)) * np.sum(np.abs(db)))
    rows.append({"replica": rep, "check": "concat " + "".join(map(str, K)) + "|" + "".join(map(str, L)),
                 "lhs": lhs, "rhs": rhs, "rel_error": _rel(lhs, rhs, mass)})
    return rows


def _value_jumps(M, k, x):
    site = int(M.grid.flat_index(np.atleast_1d(x)))
    sel = (M.sites == site) & (M.comps == k) & (M.times > 0)
    return M.times[sel], M.deltas[sel]


def cmd_bracket_check(cfg: dict, jobs: int) -> Outcome:
    out = Outcome(["replica", "check", "lhs", "rhs", "rel_error"])
    for rows in _pool_map(_bracket_path, [(cfg, r) for r in range(cfg["paths"])], jobs):
        out.rows.extend(rows)
    worst = max([r["rel_error"] for r in out.rows], default=0.0)
    mixed_ok = all(r["lhs"] == 0.0 for r in out.rows if r["check"].startswith("mixed"))
    out.summary = {"worst_rel_error": worst, "rows": len(out.rows)}
    out.check("parity and concatenation identities within tolerance",
              all(r["rel_error"] <= cfg["tolerance"] for r in out.rows if not r["check"].startswith("mixed")),
              worst)
    out.check("mixed-label brackets vanish exactly", mixed_ok)
    return out


def _chaos_path(args):
    cfg, case_index, rep = args
    from .domain import GridFunction, GridSpec
    from .integrals import chaos_expand_product
    from .noise import NoiseSpec, sample_field
    grid = GridSpec(cfg["d"], cfg["eps"], cfg["horizon"])
    M = sample_field(NoiseSpec.for_grid(grid), grid, cfg["seed"], replica=rep)
    m = cfg["cases"][case_index]["m"]
    rng = np.random.default_rng([cfg["seed"], rep, 11, case_index])
    factors = []
    for mi in m:
        fs = [smooth_factor(grid, cfg["horizon"], rng.normal(size=3)) for _ in range(mi)]
        factors.append(((1,) * mi, GridFunction.tensor_of(fs)))
    r = chaos_expand_product(M, factors, cfg["horizon"])
    return {"case": "x".join(str(v) for v in m), "replica": rep, "lhs": r["lhs"], "rhs": r["rhs"],
            "residual": r["residual"], "n_contractions": len(r["terms"])}


def cmd_chaos_check(cfg: dict, jobs: int) -> Outcome:
    out = Outcome(["case", "replica", "lhs", "rhs", "residual", "n_contractions"])
    tasks = [(cfg, i, r) for i in range(len(cfg["cases"])) for r in range(cfg["paths"])]
    out.rows = _pool_map(_chaos_path, tasks, jobs)
    per_case = {}
    for i, case in enumerate(cfg["cases"]):
        name = "x".join(str(v) for v in case["m"])
        res = [r["residual"] for r in out.rows if r["case"] == name]
        worst = max(res, default=0.0)
        n = next((r["n_contractions"] for r in out.rows if r["case"] == name), None)
        per_case[name] = {"worst_residual": worst, "n_contractions": n}
        out.check(f"chaos expansion {name}", worst <= case.get("tolerance", 1e-6), worst)
    out.summary = {"cases": per_case}
    return out


def _moment_chunk(args):
    cfg, reps = args
    from .domain import GridSpec
    from .integrals import ito_integral
    from .noise import NoiseSpec, sample_field
    grid = GridSpec(cfg["d"], cfg["eps"], cfg["horizon"])
    f = smooth_factor(grid, cfg["horizon"], (3.0, 1.0, 0.5))
    spec = NoiseSpec.for_grid(grid)
    return [ito_integral(sample_field(spec, grid, cfg["seed"], replica=r), 1, f, cfg["horizon"]).value
            for r in reps]


def cmd_moment_ratio(cfg: dict, jobs: int) -> Outcome:
    from .domain import GridSpec, l2_eps_norm
    grid = GridSpec(cfg["d"], cfg["eps"], cfg["horizon"])
    f = smooth_factor(grid, cfg["horizon"], (3.0, 1.0, 0.5))
    target = l2_eps_norm(f, grid) ** 2
    n = cfg["replicas"]
    chunks = [list(range(i, min(n, i + 500))) for i in range(0, n, 500)]
    vals = np.array([v for c in _pool_map(_moment_chunk, [(cfg, c) for c in chunks], jobs) for v in c])
    sq = vals ** 2
    mean, se = float(np.mean(sq)), float(np.std(sq, ddof=1) / math.sqrt(n))
    z = abs(mean - target) / se if se > 0 else 0.0
    out = Outcome(["replicas", "second_moment", "standard_error", "norm_squared", "ratio", "z"])
    out.rows.append({"replicas": n, "second_moment": mean, "standard_error": se, "norm_squared": target,
                     "ratio": mean / target, "z": z})
    out.summary = dict(out.rows[0])
    out.check("second moment matches the squared norm", z <= cfg["max_se"], z)
    return out


def cmd_graph_check(cfg: dict, jobs: int) -> Outcome:
    from .graphs import all_pass, check_integrability, contract_graph, load_corpus, validate_graph
    out = Outcome(["name", "expected", "passed", "matches", "failing", "witness", "violations"])
    for entry in load_corpus(cfg["corpus"]):
        viol = validate_graph(entry.graph)
        rep = check_integrability(contract_graph(entry.graph, entry.gamma))
        passed = all_pass(rep)
        failing = sorted(k for k, r in rep.items() if not r.passed)
        witness = "; ".join(f"{k}: {rep[k].witness}" for k in failing)
        expected_pass = entry.expected == "pass"
        ok = (passed == expected_pass) and (expected_pass or set(entry.failing) <= set(failing))
        out.rows.append({"name": entry.name, "expected": entry.expected, "passed": passed, "matches": ok,
                         "failing": " ".join(failing), "witness": witness,
                         "violations": "; ".join(v.rule for v in viol)})
    out.summary = {"diagrams": len(out.rows), "mismatches": [r["name"] for r in out.rows if not r["matches"]]}
    out.check("corpus matches recorded expectations", all(r["matches"] for r in out.rows),
              out.summary["mismatches"])
    out.check("every corpus graph is valid", all(not r["violations"] for r in out.rows))
    return out


def _fuzz_chunk(args):
    seed, start, count, max_vertices = args
    from .graphs import alpha_gamma, beta_gamma, alpha_tilde_gamma, contract_graph, random_labeled_graph
    rows = []
    for i in range(start, start + count):
        rng = np.random.default_rng([seed, i])
        G, gamma = random_labeled_graph(rng, max_vertices)
        H = contract_graph(G, gamma)
        a, b, at = alpha_gamma(G, gamma, H), beta_gamma(G, gamma), alpha_tilde_gamma(G, gamma)
        rows.append({"kind": "fuzz", "name": f"random-{i}", "alpha": a, "beta": b, "alpha_tilde": at,
                     "defect": abs(at - (a + b))})
    return rows


def cmd_exponents(cfg: dict, jobs: int) -> Outcome:
    from .graphs import exponents, load_corpus
    out = Outcome(["kind", "name", "alpha", "beta", "alpha_tilde", "alpha_tilde_printed", "defect",
                   "kappa_sup", "kappa_slack", "kappa_reason", "integrable"])
    for entry in load_corpus(cfg["corpus"]):
        r = exponents(entry.graph, entry.gamma)
        out.rows.append({"kind": "corpus", "name": entry.name, "alpha": r.alpha, "beta": r.beta,
                         "alpha_tilde": r.alpha_tilde, "alpha_tilde_printed": r.alpha_tilde_printed,
                         "defect": abs(r.alpha_tilde - r.alpha - r.beta), "kappa_sup": r.kappa_sup,
                         "kappa_slack": r.kappa_slack, "kappa_reason": r.kappa_reason,
                         "integrable": all(c.passed for c in r.conditions.values())})
    n = cfg["fuzz"]
    chunks = [(cfg["seed"], i, min(100, n - i), cfg["max_vertices"]) for i in range(0, n, 100)]
    for rows in _pool_map(_fuzz_chunk, chunks, jobs):
        out.rows.extend(rows)
    worst = max([r["defect"] for r in out.rows], default=0.0)
    out.summary = {"graphs": len(out.rows), "fuzzed": n, "worst_defect": worst}
    out.check("alpha_tilde equals alpha + beta", worst <= cfg["tolerance"], worst)
    return out


# accepted C1 slope ranges when the config leaves "slope" unset
SLOPE_BANDS = {"kpz": [-1.15, -0.85], "phi4": [-1.3, -0.7]}


def _renorm_one(args):
    equation, eps, slab, with_c2 = args
    from . import kernels as kk
    from .domain import GridSpec
    t0 = time.perf_counter()
    if equation == "kpz":
        grid = GridSpec(1, eps)
        dK = kk.discrete_gradient_kernel(kk.split_green(kk.discrete_green_function(grid), c=slab).kernel)
        row = kk.renorm_constants_kpz(dK)
    else:
        grid = GridSpec(3, eps)
        K = kk.split_green(kk.discrete_green_function(grid), c=slab).kernel
        row = kk.renorm_constants_phi4(K, with_c2=with_c2)
    row = {"eps": eps, **row}
    row["seconds"] = time.perf_counter() - t0
    return row


def cmd_renorm_scan(cfg: dict, jobs: int) -> Outcome:
    eq = cfg["equation"]
    header = ["eps", "C1", "C2", "C3", "c_eps"] if eq == "kpz" else ["eps", "C1", "C2", "mass_constant"]
    out = Outcome(header)
    rows = _pool_map(_renorm_one, [(eq, e, cfg["slab"], cfg["with_c2"]) for e in cfg["eps"]], jobs)
    for r in rows:
        r.pop("seconds")
        if eq == "phi4":
            r["mass_constant"] = 3.0 * r["C1"] - 9.0 * r["C2"] if "C2" in r else None
    out.rows = rows
    eps = [r["eps"] for r in rows]
    slope = fit_slope(eps, [r["C1"] for r in rows]) if len(rows) >= 2 else None
    out.summary = {"equation": eq, "c1_slope": slope, "points": len(rows)}
    band = cfg["slope"] if cfg["slope"] is not None else SLOPE_BANDS[eq]
    if slope is not None:
        lo, hi = band
        out.check("C1 log-log slope within range", lo <= slope <= hi, slope)
    if eq == "kpz" and len(rows) >= 2 and cfg["c_eps_ratio"] is not None:
        c = np.abs([r["c_eps"] for r in rows])
        nonincreasing = bool(np.all(np.diff(c) <= 0))
        ratio_ok = bool(c[-1] <= cfg["c_eps_ratio"] * c[0])
        out.summary["c_eps_identically_zero"] = bool(np.all(c == 0))
        out.check("|c_eps| non-increasing with final/initial within ratio", nonincreasing and ratio_ok,
                  [float(v) for v in c])
    if rows:
        def draw(ax):
            for key in header[1:]:
                vals = np.array([np.nan if r.get(key) is None else abs(r[key]) for r in rows], dtype=float)
                if np.all(~np.isfinite(vals) | (vals == 0)):
                    continue
                ax.loglog(eps, vals, "o-", label=key)
            ax.set_xlabel("eps")
            ax.set_ylabel("|constant|")
            ax.set_title(f"{eq} constants, C1 slope {slope:.3f}" if slope is not None else f"{eq} constants")
            ax.legend()
        out.figures.append(("constants", draw))
    return out


def _model_one(args):
    symbol, equation, lam, eps = args
    from . import kernels as kk
    return kk.model_second_moment(symbol, equation, lam, kernel=_cached_kernel(equation, eps))


_KERNELS: dict = {}


def _cached_kernel(equation: str, eps: float):
    from . import kernels as kk
    key = (equation, eps)
    if key not in _KERNELS:
        _KERNELS[key] = kk.equation_kernels(equation, eps)[1]
    return _KERNELS[key]


def cmd_model_scaling(cfg: dict, jobs: int) -> Outcome:
    eps, eq = cfg["eps"], cfg["equation"]
    lam_lo = cfg["lambda_min_factor"] * eps
    lams = list(np.geomspace(lam_lo, cfg["lambda_max"], cfg["n_lambda"])) if cfg["n_lambda"] else []
    plateau = [f * eps for f in cfg["plateau_factors"]]
    tasks = [(s, eq, float(l), eps) for s in cfg["symbols"] for l in lams + plateau + [eps]]
    vals = _pool_map(_model_one, tasks, jobs)
    out = Outcome(["symbol", "lambda", "moment", "kind"])
    res = {}
    for (s, _, l, _), v in zip(tasks, vals):
        kind = "sweep" if l in lams else "plateau"
        if kind == "sweep" or l != eps or (s, l) not in res:
            out.rows.append({"symbol": s, "lambda": l, "moment": v, "kind": kind})
        res[(s, l)] = v
    slopes = {}
    for s in cfg["symbols"]:
        if len(lams) >= 2:
            slopes[s] = fit_slope(lams, [res[(s, l)] for l in lams])
            if s in cfg["slopes"]:
                target = cfg["slopes"][s]
                out.check(f"{s} slope", abs(slopes[s] - target) <= cfg["slope_tolerance"], slopes[s])
        if plateau:
            ratios = [res[(s, l)] / res[(s, eps)] for l in plateau]
            lo, hi = cfg["plateau_band"]
            out.check(f"{s} plateau below eps", all(lo <= r <= hi for r in ratios), ratios)
    out.summary = {"equation": eq, "eps": eps, "slopes": slopes, "lambdas": lams}
    if lams:
        def draw(ax):
            for s in cfg["symbols"]:
                ax.loglog(lams, [res[(s, l)] for l in lams], "o-", label=f"{s} ({slopes.get(s, float('nan')):.2f})")
            ax.axvline(eps, color="0.6", lw=0.8)
            ax.set_xlabel("lambda")
            ax.set_ylabel("second moment")
            ax.legend()
        out.figures.append(("moments", draw))
    return out


def cmd_simulate(cfg: dict, jobs: int) -> Outcome:
    from . import solvers as sv
    eq = cfg["equation"]
    C = 0.0
    conf = sv.SolverConfig(eq, cfg["eps"], a=cfg["a"], lam=cfg["lambda"], dt_safety=cfg["dt_safety"],
                           initial=cfg["initial"], dim=cfg["d"])
    n, dt = conf.steps(cfg["horizon"])
    if cfg["renormalize"] and eq != "linear":
        C = sv.renormalization_constant(eq, cfg["eps"], cfg["constant"], dt=dt, n_steps=n)
    conf = sv.SolverConfig(eq, cfg["eps"], a=cfg["a"], lam=cfg["lambda"], C=C, dt_safety=cfg["dt_safety"],
                           initial=cfg["initial"], dim=cfg["d"])
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    res = sv.simulate(conf, seeds, cfg["horizon"], probes=cfg["probes"], record_every=cfg["record_every"],
                      jobs=jobs)
    out = Outcome(["seed", "final_mean", "final_var", "final_sup", "drift", "drift_without_noise",
                   "blowup_time"])
    T = cfg["horizon"]
    for p in res.paths:
        out.rows.append({"seed": p["seed"], "final_mean": p["mean"][-1], "final_var": p["var"][-1],
                         "final_sup": p["sup"][-1], "drift": (p["mean"][-1] - p["mean"][0]) / T,
                         "drift_without_noise": (p["mean"][-1] - p["mean"][0] - p["noise_mean"]) / T,
                         "blowup_time": p["blowup"]})
        head = ["t", "mean", "var", "sup"] + [f"probe_{i}" for i in range(len(cfg["probes"]))]
        traj = [{"t": t, "mean": m, "var": v, "sup": s, **{f"probe_{i}": pv[i] for i in range(len(pv))}}
                for t, m, v, s, pv in zip(p["t"], p["mean"], p["var"], p["sup"], p["probes"])]
        out.extra[f"trajectories/seed_{p['seed']}.csv"] = (head, traj)
    out.summary = res.summary()
    out.summary["renormalization_constant"] = C
    out.summary["n_steps"], out.summary["dt"] = n, dt
    if eq == "kpz":
        from .domain import GridSpec
        out.summary["scheme_constant"] = sv.kpz_scheme_constant(GridSpec(1, cfg["eps"]), dt, n)
    if cfg["expect_no_blowup"]:
        out.check("no blow-up", not res.blowups, res.blowups)
    if res.paths:
        def draw(ax):
            for p in res.paths[:20]:
                ax.plot(p["t"], p["mean"], lw=0.8)
            ax.set_xlabel("t")
            ax.set_ylabel("spatial mean")
            ax.set_title(f"{eq}, eps={cfg['eps']:g}, C={C:.4g}")
        out.figures.append(("mean_trajectories", draw))
    return out


RUNNERS = {
    "noise-stats": cmd_noise_stats, "bracket-check": cmd_bracket_check, "chaos-check": cmd_chaos_check,
    "moment-ratio": cmd_moment_ratio, "graph-check": cmd_graph_check, "exponents": cmd_exponents,
    "renorm-scan": cmd_renorm_scan, "model-scaling": cmd_model_scaling, "simulate": cmd_simulate,
}


def run(command: str, cfg: dict, out_dir: str, jobs: int = 1, run_id: str | None = None,
        figures: bool = True) -> tuple[int, str, Outcome]:
    """Run a resolved config; returns (exit code, run directory, outcome)."""
    out = RUNNERS[command](cfg, jobs)
    run_id = run_id or time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    run_dir = os.path.join(out_dir, command, run_id)
    write_artifacts(run_dir, command, cfg, out, figures)
    return (EXIT_OK if out.passed else EXIT_ASSERT), run_dir, out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config merged over the command defaults")
    common.add_argument("--out", default="runs", help="artifact root directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--run-id", help="run directory name (default: UTC timestamp)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p = argparse.ArgumentParser(prog="jumpspde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("renorm-scan", "model-scaling", "simulate"):
            sp.add_argument("--eq", dest="equation", help="equation: kpz or phi4")
            sp.add_argument("--eps", help="renorm-scan: '1/8..1/64' or '1/8,1/16'; others: one value")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code is not None else EXIT_OK
    from .kernels import BudgetError
    try:
        doc = None
        if args.config:
            with open(args.config) as fh:
                doc = json.load(fh)
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "equation", None):
            overrides["equation"] = args.equation
        if getattr(args, "eps", None) is not None:
            eps = parse_eps(args.eps)
            if args.command == "renorm-scan":
                overrides["eps"] = eps
            elif len(eps) != 1:
                raise ConfigError("--eps takes a single value for this command")
            else:
                overrides["eps"] = eps[0]
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = resolve_config(args.command, doc, overrides)
    except (ConfigError, ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, run_dir, out = run(args.command, cfg, args.out, args.jobs, args.run_id, not args.no_figures)
    except BudgetError as err:
        print(f"budget refused: {err}", file=sys.stderr)
        return EXIT_BUDGET
    except ValueError as err:
        # invalid combinations only detectable when the grid is built, e.g. 1/eps not an integer
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for c in out.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    print(run_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
