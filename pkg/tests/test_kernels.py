import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from jumpspde.domain import GridSpec, make_test_function, rescale_test_function
from jumpspde.graphs import Edge, LabeledMultigraph
from jumpspde.kernels import (BudgetError, GridMeasure, LatticeKernel, STArray,
                              discrete_green_function, dyadic_decompose, equation_kernels,
                              generalized_convolution, kernel_bound_check, kernel_norm, lattice_heat_kernel,
                              load_kernel, model_second_moment, positive_renormalize, renorm_constants_kpz,
                              renorm_constants_phi4, signed_index, split_green, st_convolve, st_correlate,
                              st_pair, taylor_renormalize)


# ---------------------------------------------------------------------------
# brute-force oracles on dictionaries of lattice points


def _points(A: STArray) -> dict:
    """{(k, x...): value} for every nonzero entry of a free d=1 array."""
    out = {}
    xs = signed_index(A.period)
    for i, j in zip(*np.nonzero(A.values)):
        out[(A.t0 + i, xs[j])] = A.values[i, j]
    return out


def _correlate(a: dict, b: dict, w: float) -> dict:
    out = {}
    for (ka, xa), va in a.items():
        for (kb, xb), vb in b.items():
            key = (ka - kb, xa - xb)
            out[key] = out.get(key, 0.0) + w * va * vb
    return out


def _convolve(a: dict, b: dict, w: float) -> dict:
    out = {}
    for (ka, xa), va in a.items():
        for (kb, xb), vb in b.items():
            key = (ka + kb, xa + xb)
            out[key] = out.get(key, 0.0) + w * va * vb
    return out


def _random_kernel(rng, parity: int, T=4, M=2, t0=0):
    """Free d=1 kernel on eps = 1/4 with values even (+1) or odd (-1) in space."""
    grid = GridSpec(1, 1 / 4)
    P = 2 * M + 2
    v = np.zeros((T, P))
    xs = signed_index(P)
    half = rng.normal(size=(T, M + 1))
    for j, x in enumerate(xs):
        if abs(x) <= M:
            v[:, j] = half[:, abs(x)] * (np.sign(x) if parity < 0 else 1.0)
    return LatticeKernel(grid, v, a=1.0, t0=t0, periodic=False)


# ---------------------------------------------------------------------------
# Green's functions


@pytest.mark.parametrize("d,eps", [(1, 1 / 16), (2, 1 / 8), (3, 1 / 4)])
def test_green_delta_mass_positivity(d, eps):
    g = GridSpec(d, eps)
    G = discrete_green_function(g, t_max=0.25)
    first = G.values[0]
    assert first.flat[0] == pytest.approx(eps ** -d)
    assert np.allclose(first.flat[1:], 0.0, atol=1e-9 * eps ** -d)
    mass = eps ** d * G.values.reshape(G.n_times, -1).sum(axis=1)
    assert np.allclose(mass, 1.0, atol=1e-12)
    assert G.values.min() > -1e-12 * eps ** -d


def test_green_matches_matrix_exponential():
    g = GridSpec(1, 1 / 8)
    n = g.n_sites
    lap = (np.roll(np.eye(n), 1, axis=0) + np.roll(np.eye(n), -1, axis=0) - 2 * np.eye(n)) / g.eps ** 2
    G = discrete_green_function(g, t_max=0.1)
    delta = np.zeros(n)
    delta[0] = 1 / g.eps
    for k in (1, 3, 6):
        ref = expm(k * g.time_step * lap) @ delta
        assert np.allclose(G.values[k], ref, rtol=1e-12, atol=1e-12)


def test_whole_lattice_kernel_matches_large_ring():
    g = GridSpec(1, 1 / 8)
    H = lattice_heat_kernel(g, t_max=0.1)
    n = 200  # ring much wider than the heat spread at t = 0.1
    lap = (np.roll(np.eye(n), 1, axis=0) + np.roll(np.eye(n), -1, axis=0) - 2 * np.eye(n)) / g.eps ** 2
    delta = np.zeros(n)
    delta[0] = 1 / g.eps
    xs = signed_index(H.period)
    keep = np.abs(xs) <= 8
    for k in (2, 6):
        ref = expm(k * g.time_step * lap) @ delta
        assert np.allclose(H.values[k][keep], ref[xs[keep] % n], rtol=1e-10, atol=1e-13)


def _ratio(K, eps, ks):
    return np.array([K.at(k, (0,)) for k in ks]) * np.sqrt(4 * np.pi * ks * eps ** 2)


def test_green_continuum_oracle():
    ks = np.arange(10, 101)
    eps = 1 / 64
    torus = discrete_green_function(GridSpec(1, eps), t_max=0.03)
    assert np.all(np.abs(_ratio(torus, eps, ks) - 1) <= 0.05)
    # at eps = 1/32 the torus images matter near t = 0.1; the whole-lattice
    # kernel and the periodized continuum kernel still match
    eps = 1 / 32
    g = GridSpec(1, eps)
    assert np.all(np.abs(_ratio(lattice_heat_kernel(g, t_max=0.1), eps, ks) - 1) <= 0.05)
    G = discrete_green_function(g, t_max=0.1)
    t = ks * eps ** 2
    images = sum(np.exp(-n * n / (4 * t)) for n in range(-5, 6)) / np.sqrt(4 * np.pi * t)
    assert np.all(np.abs(np.array([G.at(k, (0,)) for k in ks]) / images - 1) <= 0.05)


# ---------------------------------------------------------------------------
# splitting, norms and dyadic pieces


@pytest.mark.parametrize("d,eps,c", [(1, 1 / 16, 1), (1, 1 / 16, 3), (3, 1 / 4, 1)])
def test_split_green(d, eps, c):
    g = GridSpec(d, eps)
    G = discrete_green_function(g)
    S = split_green(G, c=c)
    rows = np.arange(G.n_times)
    nz = np.any(S.slab.values.reshape(G.n_times, -1) != 0, axis=1)
    assert set(rows[nz]) <= set(range(c))
    total = S.slab.values + S.kernel.periodized() + S.remainder.values
    assert np.max(np.abs(total - G.values)) <= 1e-12 * np.max(np.abs(G.values))
    K = S.kernel
    assert np.all(K.values[K.norms() > 1.0] == 0)
    assert np.all(K.values[:c] == 0)
    # chi = 1 on the half ball: K equals the whole-lattice kernel there
    H = lattice_heat_kernel(g, t_max=1.0)
    inner = (K.norms() <= 0.5) & (rows >= c).reshape((-1,) + (1,) * d)
    assert np.allclose(K.values[inner], H.values[inner], rtol=1e-12, atol=0)
    with pytest.raises(ValueError):
        split_green(H)


def test_kernel_norm_trivial_cases():
    g = GridSpec(1, 1 / 8)
    zero = LatticeKernel(g, np.zeros((5, 18)), a=1.0, periodic=False)
    assert kernel_norm(zero, 1.0, 3) == 0.0
    v = np.zeros((5, 18))
    v[4, 2] = 3.0  # t = 4 eps^2, x = 2 eps: norm 2 eps
    one = LatticeKernel(g, v, a=1.0, periodic=False)
    assert kernel_norm(one, 1.5, 1) == pytest.approx((2 * g.eps) ** 1.5 * 3.0)
    chk = kernel_bound_check(one, 1.5, 1, bound=0.5)
    assert chk["ok"] and chk["point"]["x"] == [2 * g.eps] and chk["multi_index"] == [0, 0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 3.0), st.floats(0.0, 2.0))
def test_kernel_norm_monotone_in_a(seed, a, delta):
    # inside the unit ball (norm v eps) <= 1, so raising a cannot raise the norm
    K = _random_kernel(np.random.default_rng(seed), parity=1)
    assert kernel_norm(K, a + delta, 2) <= kernel_norm(K, a, 2) * (1 + 1e-12)


def test_phi4_kernel_norm_is_uniform():
    vals = [kernel_norm(equation_kernels("phi4", e)[1], 3.0, 1) for e in (1 / 4, 1 / 8, 1 / 16)]
    assert max(vals) / min(vals) <= 2.0


def test_kpz_gradient_kernel_bound_saturates():
    vals = [kernel_norm(equation_kernels("kpz", e)[1], 2.0, 3) for e in (1 / 32, 1 / 64, 1 / 128)]
    assert np.all(np.isfinite(vals))
    assert vals[2] / vals[1] <= 1.25
    assert vals[2] / vals[1] < vals[1] / vals[0]


@pytest.mark.parametrize("eq,eps", [("kpz", 1 / 32), ("phi4", 1 / 8)])
def test_dyadic_decomposition(eq, eps):
    _, K = equation_kernels(eq, eps)
    D = dyadic_decompose(K)
    assert D.n_max == -math.floor(math.log2(eps))
    assert len(D.pieces) == D.n_max + 1
    assert np.max(np.abs(D.reconstruct() - K.values)) <= 1e-10 * np.max(np.abs(K.values))
    assert D.support_violations() == []
    consts = D.scale_constant(K.a, 1)
    assert np.all(np.isfinite(consts)) and consts.max() > 0


def test_dyadic_scale_constant_is_uniform_in_eps():
    top = [dyadic_decompose(equation_kernels("kpz", e)[1]).scale_constant(2.0, 1).max()
           for e in (1 / 32, 1 / 64)]
    assert max(top) / min(top) <= 2.0


def test_dyadic_rejects_wide_support():
    g = GridSpec(1, 1 / 4)
    G = discrete_green_function(g, t_max=2.0)
    with pytest.raises(ValueError):
        dyadic_decompose(G)


# ---------------------------------------------------------------------------
# space-time array algebra


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(-3, 3), st.integers(-3, 3))
def test_correlate_and_convolve_match_direct_sums(seed, ta, tb):
    rng = np.random.default_rng(seed)
    A = _random_kernel(rng, 1, T=3, M=1, t0=ta).st
    B = _random_kernel(rng, -1, T=2, M=2, t0=tb).st
    w = A.grid.cell_volume
    for fast, slow in ((st_correlate(A, B), _correlate(_points(A), _points(B), w)),
                       (st_convolve(A, B), _convolve(_points(A), _points(B), w))):
        got = _points(STArray(np.where(np.abs(fast.values) > 1e-13, fast.values, 0.0),
                              fast.t0, fast.grid))
        keys = set(got) | set(slow)
        assert all(abs(got.get(k, 0.0) - slow.get(k, 0.0)) < 1e-12 for k in keys)
    direct = w * sum(v * _points(A).get(k, 0.0) for k, v in _points(B).items())
    assert st_pair(A, B) == pytest.approx(direct, abs=1e-13)


def test_periodic_correlation_wraps():
    g = GridSpec(1, 1 / 4)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    C = st_correlate(STArray(a, 0, g, True), STArray(b, 0, g, True))
    w = g.cell_volume
    for tau in range(-2, 2):
        for xi in range(4):
            ref = sum(w * a[t + tau, (y + xi) % 4] * b[t, y]
                      for t in range(3) for y in range(4) if 0 <= t + tau < 2)
            assert C.values[tau - C.t0, xi] == pytest.approx(ref, abs=1e-12)


def test_kernel_export_round_trip(tmp_path):
    _, K = equation_kernels("kpz", 1 / 8)
    binp, jsonp = K.export(str(tmp_path / "k"))
    back = load_kernel(str(tmp_path / "k"))
    assert np.array_equal(back.values, K.values) and back.periodic == K.periodic
    assert back.t0 == K.t0 and back.a == K.a


# ---------------------------------------------------------------------------
# renormalization constants against brute force


def test_kpz_constants_match_brute_force():
    rng = np.random.default_rng(7)
    dK = _random_kernel(rng, parity=-1, T=4, M=2)
    w = dK.grid.cell_volume
    a = _points(dK.st)
    Q = _correlate(a, a, w)
    C1 = w * sum(v * v for v in a.values())
    C2 = 4 * w * w * sum(va * vb * Q.get((kb - ka, xb - xa), 0.0) ** 2
                         for (ka, xa), va in a.items() for (kb, xb), vb in a.items())
    F = {k: v * Q.get(k, 0.0) for k, v in a.items()}
    FQ = _convolve(F, Q, w)
    C3 = 2 * w * sum(v * FQ.get((-k, -x), 0.0) for (k, x), v in a.items())
    c_eps = w * w * sum(v1 * a.get((k1 - k2, x1 - x2), 0.0) * a.get((-k2, -x2), 0.0)
                        for (k1, x1), v1 in a.items() for (k2, x2) in Q)
    got = renorm_constants_kpz(dK)
    assert got["C1"] == pytest.approx(C1, rel=1e-12)
    assert got["C2"] == pytest.approx(C2, rel=1e-10)
    assert got["C3"] == pytest.approx(C3, rel=1e-10, abs=1e-14)
    assert abs(c_eps) < 1e-12 and got["c_eps"] == 0.0


def test_phi4_constants_match_brute_force():
    rng = np.random.default_rng(11)
    K = _random_kernel(rng, parity=1, T=4, M=2)
    w = K.grid.cell_volume
    a = _points(K.st)
    Q = _correlate(a, a, w)  # Q(w) = sum_u K(w - u) K(-u)
    C1 = w * sum(v * v for v in a.values())
    C2 = 2 * w * sum(a.get((-k, -x), 0.0) * q * q for (k, x), q in Q.items())
    got = renorm_constants_phi4(K)
    assert got["C1"] == pytest.approx(C1, rel=1e-12)
    assert got["C2"] == pytest.approx(C2, rel=1e-10)
    with pytest.raises(BudgetError):
        renorm_constants_phi4(K, budget=1.0)


def test_constants_vanish_for_zero_kernels():
    _, dK = equation_kernels("kpz", 1 / 8)
    z = dK.with_values(np.zeros_like(dK.values))
    assert all(v == 0.0 for v in renorm_constants_kpz(z).values())
    _, K = equation_kernels("phi4", 1 / 4)
    z = K.with_values(np.zeros_like(K.values))
    assert all(v == 0.0 for v in renorm_constants_phi4(z).values())


def test_constants_are_bit_stable():
    _, dK = equation_kernels("kpz", 1 / 16)
    assert renorm_constants_kpz(dK) == renorm_constants_kpz(equation_kernels("kpz", 1 / 16)[1])


@pytest.mark.slow
def test_phi4_c1_scaling():
    eps = [1 / 4, 1 / 8, 1 / 16]
    c = [renorm_constants_phi4(equation_kernels("phi4", e)[1], with_c2=False)["C1"] for e in eps]
    slope = np.polyfit(np.log2(eps), np.log2(c), 1)[0]
    assert -1.3 <= slope <= -0.7
    assert abs(np.log2(c[2] / c[1]) - 1) <= 0.3
    assert all(v > 0 for v in c)


# ---------------------------------------------------------------------------
# measures, renormalized kernels and generalized convolutions


def test_grid_measure_converges_to_lebesgue():
    def f(t, y):
        return (1 - t * t) * (1 - y[..., 0] ** 2)
    errs = []
    for eps in (1 / 8, 1 / 16):
        mu = GridMeasure.around(GridSpec(1, eps), 1.0, 1.0)
        assert mu.total_variation == pytest.approx(mu.weight * mu.n_points)
        errs.append(abs(mu.integrate(f) - 16 / 9))
    assert errs[1] < errs[0] < 0.05


def _two_point_phi(t_m, y_m, t_p, y_p):
    return np.exp(-t_m * t_m - np.sum(y_m * y_m, axis=-1)) * (1 + 0.3 * t_p + np.sum(np.cos(3 * y_p), axis=-1))


def test_taylor_renormalize_examples():
    _, K = equation_kernels("kpz", 1 / 8)
    g = K.grid
    mu_m = GridMeasure(g, -2, 2, -2, 2)
    mu_p = GridMeasure(g, -2, 2, -2, 2)

    def const2(t_m, y_m, t_p, y_p):
        return np.exp(-t_m * t_m) * np.ones(np.shape(t_p))
    # constant in the second argument: only the diagonal constant survives
    with_c = taylor_renormalize(K, -1, const2, mu_m, mu_p, constants={(0, 0): 2.5})
    k, x = mu_m.offsets()
    tm, ym = k * g.time_step, x * g.eps
    diag = mu_m.weight * np.sum(const2(tm, ym, tm, ym))
    assert with_c == pytest.approx(2.5 * diag, rel=1e-12)
    zero = taylor_renormalize(K, -1, lambda *a: np.zeros(np.shape(a[2])), mu_m, mu_p)
    assert zero == 0.0
    # adding a polynomial of scaled degree < |r| to the second slot changes nothing
    base = taylor_renormalize(K, -2, _two_point_phi, mu_m, mu_p)

    def shifted(t_m, y_m, t_p, y_p):
        return _two_point_phi(t_m, y_m, t_p, y_p) + 1.7 - 0.4 * y_p[..., 0]
    assert taylor_renormalize(K, -2, shifted, mu_m, mu_p) == pytest.approx(base, rel=1e-9, abs=1e-12)
    with pytest.raises(ValueError):
        taylor_renormalize(K, 1, _two_point_phi, mu_m, mu_p)
    with pytest.raises(ValueError):
        taylor_renormalize(K, -1, _two_point_phi, mu_m, mu_p, constants={(0, 1): 1.0})
    with pytest.raises(BudgetError):
        taylor_renormalize(K, -1, _two_point_phi, mu_m, mu_p, budget=10)


def test_positive_renormalize_examples():
    _, K = equation_kernels("kpz", 1 / 8)
    rng = np.random.default_rng(1)
    km, xm = rng.integers(-20, 0, 50), rng.integers(-6, 7, (50, 1))
    kp, xp = rng.integers(0, 20, 50), rng.integers(-6, 7, (50, 1))
    k0 = positive_renormalize(K, 0)
    assert np.array_equal(k0((km, xm), (kp, xp)), K.at(kp - km, xp - xm))
    k1 = positive_renormalize(K, 1)
    assert np.allclose(k1((km, xm), (np.zeros(50, int), np.zeros((50, 1), int))), 0.0, atol=0)
    # r = 1 is the recentred difference K(z+ - z-) - K(-z-)
    assert np.allclose(k1((km, xm), (kp, xp)), K.at(kp - km, xp - xm) - K.at(-km, -xm), atol=0)
    with pytest.raises(ValueError):
        positive_renormalize(K, -1)


def _psi_graph(kernel="dK", r=0):
    verts = ("star", "u", "w")
    roles = {"star": "star", "u": "up", "w": "noise"}
    edges = (Edge("star", "u", 0.0, 0, "test"), Edge("w", "u", 2.0, r, kernel))
    return LabeledMultigraph(verts, roles, edges, 1, {"w": 1}, "psi")


def _psi_direct(dK, phi, lam, center, zd, mu):
    g = dK.grid
    ck, cx = center
    phil = rescale_test_function(phi, lam, center=(ck * g.time_step, np.asarray(cx) * g.eps))
    k, x = mu.offsets()
    k, x = k + ck, x + np.asarray(cx)
    total = 0.0
    for ki, xi in zip(k, x):
        total += phil(ki * g.time_step, xi * g.eps) * dK.at(ki - zd[0], xi - np.asarray(zd[1]))
    return mu.weight * total


def test_generalized_convolution_psi_matches_direct_sum():
    _, dK = equation_kernels("kpz", 1 / 16)
    g = dK.grid
    phi = make_test_function("bump4", 1)
    lam = 0.25
    mu = {"u": GridMeasure.around(g, lam ** 2, lam)}
    G = _psi_graph()
    for center, zd in (((0, (0,)), (-5, (2,))), ((7, (3,)), (1, (-1,)))):
        got = generalized_convolution(G, {"dK": dK}, lam, phi, center, {"w": zd}, mu)
        ref = _psi_direct(dK, phi, lam, center, zd, mu["u"])
        assert got == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_generalized_convolution_shift_identity():
    _, dK = equation_kernels("kpz", 1 / 16)
    g = dK.grid
    phi = make_test_function("bump4", 1)
    rng = np.random.default_rng(3)
    mu = {"u": GridMeasure.around(g, 1 / 16, 1 / 4)}
    G = _psi_graph()
    for _ in range(5):
        ck, cx = int(rng.integers(-30, 30)), int(rng.integers(-5, 5))
        zk, zx = int(rng.integers(-30, 30)), int(rng.integers(-5, 5))
        a = generalized_convolution(G, {"dK": dK}, 0.25, phi, (ck, (cx,)), {"w": (zk, (zx,))}, mu)
        b = generalized_convolution(G, {"dK": dK}, 0.25, phi, (0, (0,)), {"w": (zk - ck, (zx - cx,))}, mu)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_generalized_convolution_is_linear_in_kernels():
    _, dK = equation_kernels("kpz", 1 / 16)
    g = dK.grid
    other = dK.with_values(np.roll(dK.values, 3, axis=0) * 0.5)
    phi = make_test_function("bump4", 1)
    mu = {"u": GridMeasure.around(g, 1 / 16, 1 / 4)}
    args = (0.25, phi, (0, (0,)), {"w": (-4, (1,))}, mu)
    G = _psi_graph()
    a = generalized_convolution(G, {"dK": dK}, *args)
    b = generalized_convolution(G, {"dK": other}, *args)
    c = generalized_convolution(G, {"dK": dK.with_values(2 * dK.values + other.values)}, *args)
    assert c == pytest.approx(2 * a + b, rel=1e-12)
    with pytest.raises(BudgetError):
        generalized_convolution(G, {"dK": dK}, *args[:-1], mu, budget=10)
    with pytest.raises(ValueError):
        generalized_convolution(G, {"dK": dK}, *args[:-1], {})


def test_generalized_convolution_with_renormalized_edge():
    _, dK = equation_kernels("kpz", 1 / 16)
    phi = make_test_function("bump4", 1)
    mu = {"u": GridMeasure.around(dK.grid, 1 / 16, 1 / 4)}
    zd = {"w": (-6, (2,))}
    plain = generalized_convolution(_psi_graph(), {"dK": dK}, 0.25, phi, (0, (0,)), zd, mu)
    ren = generalized_convolution(_psi_graph(r=1), {"dK": dK}, 0.25, phi, (0, (0,)), zd, mu)
    # r = 1 subtracts K(-z_w) times the test-function mass
    phil = rescale_test_function(phi, 0.25)
    k, x = mu["u"].offsets()
    mass = mu["u"].weight * np.sum(phil(k * dK.grid.time_step, x * dK.grid.eps))
    assert plain - ren == pytest.approx(float(dK.at(6, (-2,))) * mass, rel=1e-10)


# ---------------------------------------------------------------------------
# model second moments


def test_model_moments_match_direct_sums():
    grid, dK = equation_kernels("kpz", 1 / 8)
    phi = make_test_function("bump4", 1)
    lam = 0.5
    w = grid.cell_volume
    phil = rescale_test_function(phi, lam)
    m, M = int(lam ** 2 / grid.time_step), int(lam / grid.eps)
    pts = [(k, x) for k in range(-m, m + 1) for x in range(-M, M + 1)]
    vals = {p: float(phil(p[0] * grid.time_step, [p[1] * grid.eps])) for p in pts}
    xi = w * sum(v * v for v in vals.values())
    assert model_second_moment("Xi", "kpz", lam, kernel=dK) == pytest.approx(xi, rel=1e-12)
    # f(z') = sum_z eps^s phi(z) dK(z - z')
    a = _points(dK.st)
    f = {}
    for (k, x), v in vals.items():
        for (ka, xa), va in a.items():
            key = (k - ka, x - xa)
            f[key] = f.get(key, 0.0) + w * v * va
    psi = w * sum(v * v for v in f.values())
    assert model_second_moment("Psi", "kpz", lam, kernel=dK) == pytest.approx(psi, rel=1e-10)
    with pytest.raises(ValueError):
        model_second_moment("Psi3", "kpz", lam, kernel=dK)


def test_psi2_moment_matches_direct_sum():
    rng = np.random.default_rng(5)
    K = _random_kernel(rng, parity=1, T=3, M=1)
    grid = K.grid
    w = grid.cell_volume
    phi = make_test_function("bump4", 1)
    lam = 0.5
    phil = rescale_test_function(phi, lam)
    m, M = int(lam ** 2 / grid.time_step), int(lam / grid.eps)
    vals = {(k, x): float(phil(k * grid.time_step, [x * grid.eps]))
            for k in range(-m, m + 1) for x in range(-M, M + 1)}
    a = _points(K.st)
    # g(z1, z2) = sum_z eps^s phi(z) K(z - z1) K(z - z2)
    g = {}
    for (k, x), v in vals.items():
        for (k1, x1), v1 in a.items():
            for (k2, x2), v2 in a.items():
                key = (k - k1, x - x1, k - k2, x - x2)
                g[key] = g.get(key, 0.0) + w * v * v1 * v2
    tensor = 2 * w * w * sum(v * v for v in g.values())
    jump = w * w * sum(v * v for (k1, x1, k2, x2), v in g.items() if (k1, x1) == (k2, x2))
    got = model_second_moment("Psi2", "kpz", lam, kernel=K)
    assert got == pytest.approx(tensor + jump, rel=1e-10)


def test_model_moment_plateau_below_eps():
    grid, dK = equation_kernels("kpz", 1 / 16)
    at_eps = model_second_moment("Psi", "kpz", grid.eps, kernel=dK)
    below = model_second_moment("Psi", "kpz", grid.eps / 2, kernel=dK)
    assert 0.8 <= below / at_eps <= 1.25
