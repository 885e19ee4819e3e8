import numpy as np
import pytest
from hypothesis import given, strategies as st

from jumpspde.domain import (GridFunction, GridSpec, ScalingSpec, SpaceTimePoint, extend_to_distribution,
                             l2_eps_norm, make_test_function, parabolic_norm, polynomial_bump,
                             rescale_test_function, torus_reduce, zero_function)


def test_scaling_orders():
    sc = ScalingSpec(3)
    assert sc.s_norm_order == 5
    assert sc.multi_index_order((1, 0, 2, 0)) == 4
    with pytest.raises(ValueError):
        ScalingSpec(0)
    with pytest.raises(ValueError):
        sc.multi_index_order((1, 0))


def test_grid_basic_properties():
    g = GridSpec(2, 1 / 8)
    assert g.n_sites == 8 and g.shape == (8, 8) and g.volume_sites == 64
    assert g.time_step == pytest.approx(1 / 64)
    assert g.cell_volume == pytest.approx((1 / 8) ** 4)
    x = g.sites()
    assert x.shape == (64, 2)
    assert np.array_equal(g.unflat(g.flat_index(x)), x)
    assert np.array_equal(g.flat_index(np.array([[9, -1]])), g.flat_index(np.array([[1, 7]])))


@pytest.mark.parametrize("eps", [0.0, 1.5, 0.3])
def test_grid_rejects_bad_eps(eps):
    with pytest.raises(ValueError):
        GridSpec(1, eps)


def test_time_nodes():
    g = GridSpec(1, 1 / 4)
    nodes = g.time_nodes(0.125)
    assert np.allclose(nodes, [-0.125, -0.0625, 0.0, 0.0625, 0.125])
    assert np.allclose(g.time_nodes(0.1, start=0.0), [0.0, 0.0625])


def test_space_time_point_range():
    z = SpaceTimePoint(0.1, (3,), 1 / 8)
    assert np.allclose(z.coords, [0.375])
    with pytest.raises(ValueError):
        SpaceTimePoint(0.0, (8,), 1 / 8)


def test_parabolic_norm_examples():
    assert parabolic_norm(0.04, [0.1]) == pytest.approx(0.2)
    assert parabolic_norm(-0.0001, [0.3, -0.4]) == pytest.approx(0.4)
    # torus reduction: 0.9 is 0.1 away from the origin
    assert parabolic_norm(0.0, [0.9]) == pytest.approx(0.1)
    assert parabolic_norm(0.0, [0.9], torus=False) == pytest.approx(0.9)


@given(st.floats(-3, 3, allow_nan=False), st.floats(-3, 3, allow_nan=False))
def test_torus_reduce_range_and_periodicity(y, k):
    r = float(torus_reduce(y))
    assert -0.5 < r <= 0.5 + 1e-12
    assert abs(float(torus_reduce(y + np.round(k))) - r) < 1e-9 or abs(abs(r) - 0.5) < 1e-9


@given(st.floats(-1, 1), st.floats(-0.5, 0.5), st.floats(0.01, 1))
def test_parabolic_norm_scaling(t, x, lam):
    # ||(lam^2 t, lam x)|| = lam ||(t, x)|| away from the torus wrap
    a = parabolic_norm(lam * lam * t, [lam * x], torus=False)
    b = parabolic_norm(t, [x], torus=False)
    assert a == pytest.approx(lam * b, rel=1e-9, abs=1e-12)


def test_bump_normalization_and_support():
    phi = polynomial_bump(1)
    assert phi.sup_norm <= 1.0
    assert phi(0.0, [0.0]) == pytest.approx(phi.sup_norm)
    assert phi(1.01, [0.0]) == 0.0 and phi(0.0, [0.5]) > 0
    assert make_test_function("bump4", 2).kind == "bump4"
    with pytest.raises(ValueError):
        make_test_function("gauss", 1)


def test_rescaled_bump_mass_is_scale_invariant():
    # lam^{-|s|} phi(lam^-2 t, lam^-1 y) keeps its integral; check on a fine grid
    g = GridSpec(1, 1 / 256)
    phi = polynomial_bump(1)
    masses = []
    for lam in (0.5, 0.25):
        p = rescale_test_function(phi, lam)
        u = GridFunction.point(lambda t, x: np.ones(np.shape(t)), 1, p.scale ** 2)
        masses.append(extend_to_distribution(u, p, g))
    assert masses[0] == pytest.approx(masses[1], rel=2e-3)
    with pytest.raises(ValueError):
        rescale_test_function(phi, 2.0)


def test_rescale_centres():
    phi = polynomial_bump(1)
    z = SpaceTimePoint(0.25, (2,), 1 / 8)
    p = rescale_test_function(phi, 0.5, z)
    assert p.center_t == 0.25 and p.center_x == (0.25,)
    assert p(0.25, [0.25]) == pytest.approx(phi.sup_norm * 0.5 ** -3)


def _one_point(c):
    return GridFunction.point(lambda t, x: c * np.cos(2 * np.pi * x[..., 0] / 8) + t, 1, 0.5)


def test_l2_norm_separable_matches_dense():
    g = GridSpec(1, 1 / 8, horizon=0.5)
    f, h = _one_point(1.0), _one_point(2.0)
    sep = f.tensor(h) + f.tensor(f).scale(-0.5)
    dense = GridFunction(2, 1, sep._evaluator, sep.t_radius)
    assert l2_eps_norm(sep, g) == pytest.approx(l2_eps_norm(dense, g), rel=1e-12)


def test_grid_function_algebra():
    f, h = _one_point(1.0), _one_point(3.0)
    fh = f.tensor(h)
    t = np.array([0.1, -0.2])
    x = np.array([[1], [5]])
    assert fh(t, x) == pytest.approx(f.point_values(0.1, [1]) * h.point_values(-0.2, [5]))
    swapped = fh.permute([1, 0])
    assert swapped(t, x) == pytest.approx(fh(t[::-1], x[::-1]))
    # separable permutation agrees with its evaluator
    dense = sum(c * np.prod([g.point_values(t[i], x[i]) for i, g in enumerate(fs)])
                for c, fs in swapped.terms)
    assert dense == pytest.approx(swapped(t, x))
    diag = fh.diagonal([[0, 1]])
    assert diag.point_values(0.1, [1]) == pytest.approx(fh(np.array([0.1, 0.1]), np.array([[1], [1]])))
    r = fh.restrict([0], 0.1, [1])
    assert r.point_values(-0.2, [5]) == pytest.approx(fh(t, x))
    assert fh(np.array([0.6, 0.0]), x) == 0.0
    assert zero_function(2, 1)(t, x) == 0.0
