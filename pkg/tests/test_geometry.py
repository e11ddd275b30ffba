import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.special import eval_gegenbauer, gamma

from qflow.geometry import (
    SPHERE,
    TORUS,
    GridField,
    SpectralField,
    center_of_mass,
    constant_field,
    dilation,
    field_from_csv,
    field_to_csv,
    gegenbauer_table,
    geometry_from_text,
    geometry_to_text,
    grid_field,
    integrate,
    make_geometry,
    pullback,
    spectral_from_json,
    spectral_tail,
    spectral_to_json,
    sphere_volume,
    to_grid,
    to_spectral,
)


def omega(n):
    return 2 * math.pi ** ((n + 1) / 2) / gamma((n + 1) / 2)


def test_volumes():
    assert_allclose(make_geometry(TORUS, 2, 64).volume, (2 * math.pi) ** 2, rtol=1e-14)
    assert_allclose(make_geometry(SPHERE, 2, 32).volume, 4 * math.pi, rtol=1e-14)
    assert_allclose(make_geometry(SPHERE, 4, 32).volume, 8 * math.pi**2 / 3, rtol=1e-14)
    assert_allclose(make_geometry(SPHERE, 6, 32).volume, 16 * math.pi**3 / 15, rtol=1e-14)
    for n in (2, 4, 6):
        assert_allclose(sphere_volume(n), omega(n), rtol=1e-14)


@pytest.mark.parametrize("kind,n,res", [("cube", 2, 16), (TORUS, 3, 16), (TORUS, 8, 16),
                                        (SPHERE, 2, 4), (TORUS, 2, 15)])
def test_make_geometry_rejects(kind, n, res):
    with pytest.raises(ValueError):
        make_geometry(kind, n, res)


def test_gegenbauer_table_matches_scipy():
    x = np.linspace(-1, 1, 17)
    for alpha in (0.5, 1.5, 2.5):
        table = gegenbauer_table(x, 12, alpha)
        for ell in range(13):
            assert_allclose(table[:, ell], eval_gegenbauer(ell, alpha, x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_sphere_basis_orthonormal(n):
    g = make_geometry(SPHERE, n, 24)
    B = g._basis
    gram = B.T @ (g.weights[:, None] * B)
    assert_allclose(gram, np.eye(25), atol=1e-12)


def test_constant_transforms_to_single_mode():
    for g in (make_geometry(TORUS, 2, 16), make_geometry(SPHERE, 4, 16)):
        c = to_spectral(constant_field(g, 1.0)).coeffs
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        assert list(nz) == [0]
        assert_allclose(abs(c.flat[0]), math.sqrt(g.volume), rtol=1e-13)


def test_torus_cos_single_pair():
    g = make_geometry(TORUS, 2, 32)
    c = to_spectral(grid_field(g, lambda x, y: np.cos(x))).coeffs
    idx = set(zip(*np.nonzero(np.abs(c) > 1e-12)))
    assert idx == {(1, 0), (31, 0)}


@pytest.mark.parametrize("kind,n,res", [(TORUS, 2, 32), (TORUS, 4, 8), (SPHERE, 2, 32),
                                        (SPHERE, 4, 32), (SPHERE, 6, 32)])
def test_round_trip_band_limited(kind, n, res, rng):
    g = make_geometry(kind, n, res)
    if kind == TORUS:
        c = rng.standard_normal(g.spectral_shape) + 0j
        c = g.forward(g.inverse(c))  # drop the non-Hermitian part
    else:
        c = rng.standard_normal(g.spectral_shape)
    u = to_grid(SpectralField(g, c))
    back = to_spectral(u)
    assert np.max(np.abs(back.coeffs - c)) <= 1e-10
    assert np.max(np.abs(to_grid(back).values - u.values)) <= 1e-10


def test_sphere_transform_against_direct_sum(rng):
    # evaluate the expansion with scipy's Gegenbauer polynomials
    g = make_geometry(SPHERE, 4, 16)
    c = rng.standard_normal(17)
    alpha = 1.5
    direct = np.zeros_like(g.nodes)
    for ell in range(17):
        p = eval_gegenbauer(ell, alpha, g.nodes)
        norm = np.sum(g.weights * p * p)
        direct += c[ell] * p / math.sqrt(norm)
    assert_allclose(g.inverse(c), direct, atol=1e-12)


def test_integrals():
    g4 = make_geometry(SPHERE, 4, 32)
    assert_allclose(integrate(constant_field(g4, 1.0)), 8 * math.pi**2 / 3, rtol=1e-14)
    gt = make_geometry(TORUS, 2, 64)
    assert abs(integrate(grid_field(gt, lambda x, y: np.cos(x)))) <= 1e-14
    g2 = make_geometry(SPHERE, 2, 32)
    p2 = GridField(g2, 0.5 * (3 * g2.nodes**2 - 1))
    assert abs(integrate(p2)) <= 1e-13


def test_field_shape_checked():
    g = make_geometry(TORUS, 2, 16)
    with pytest.raises(ValueError):
        GridField(g, np.zeros(16))
    with pytest.raises(ValueError):
        to_spectral(GridField(g, np.full((16, 16), np.nan)))


def test_dilation_identity():
    g = make_geometry(SPHERE, 4, 32)
    u = GridField(g, 0.2 * g.nodes**3)
    w = pullback(u, dilation(g, "north", 1.0))
    assert np.array_equal(w.values, u.values)


@pytest.mark.parametrize("n", [2, 4, 6])
@pytest.mark.parametrize("r", [1.5, 3.0, 8.0])
def test_dilation_preserves_volume(n, r):
    g = make_geometry(SPHERE, n, 96)
    for pole in ("north", "south"):
        w = pullback(constant_field(g, 0.0), dilation(g, pole, r))
        assert_allclose(integrate(GridField(g, np.exp(n * w.values))), omega(n), rtol=1e-9)


def test_dilation_jacobian_against_finite_difference():
    g = make_geometry(SPHERE, 2, 16)
    r = 2.5
    phi = dilation(g, "north", r)
    theta = g.theta
    theta_img = np.arccos(phi.image)
    expected = 2 * np.arctan(r * np.tan(theta / 2))
    assert_allclose(theta_img, expected, atol=1e-12)
    h = 1e-6
    dtheta = (2 * np.arctan(r * np.tan((theta + h) / 2)) - 2 * np.arctan(r * np.tan((theta - h) / 2))) / (2 * h)
    # area Jacobian on S^2
    assert_allclose(phi.jacobian, dtheta * np.sin(theta_img) / np.sin(theta), rtol=1e-6)


def test_dilation_rejects():
    g = make_geometry(SPHERE, 2, 16)
    with pytest.raises(ValueError):
        dilation(g, "east", 2.0)
    with pytest.raises(ValueError):
        dilation(g, "north", 0.5)
    with pytest.raises(ValueError):
        dilation(make_geometry(TORUS, 2, 16), "north", 2.0)


def test_center_of_mass():
    g = make_geometry(SPHERE, 4, 32)
    assert abs(center_of_mass(constant_field(g, 0.0))) <= 1e-14
    even = GridField(g, 0.3 * g.nodes**2)
    assert abs(center_of_mass(even)) <= 1e-14
    w = pullback(constant_field(g, 0.0), dilation(g, "north", 4.0))
    com = center_of_mass(w)
    assert 0 < com < 1
    with pytest.raises(ValueError):
        center_of_mass(constant_field(make_geometry(TORUS, 2, 16), 0.0))


def test_spectral_tail():
    g = make_geometry(TORUS, 2, 16)
    assert spectral_tail(constant_field(g, 0.0)) <= 1e-28
    smooth = spectral_tail(grid_field(g, lambda x, y: 0.1 * np.cos(x)))
    rough = spectral_tail(grid_field(g, lambda x, y: 3.0 * np.cos(x)))
    assert smooth < 1e-12 < rough


def test_serialization_round_trip(rng):
    for g in (make_geometry(TORUS, 2, 16), make_geometry(SPHERE, 6, 16)):
        assert geometry_from_text(geometry_to_text(g)) is g
        u = GridField(g, rng.standard_normal(g.grid_shape))
        assert np.array_equal(field_from_csv(field_to_csv(u), g).values, u.values)
        s = to_spectral(u)
        back = spectral_from_json(spectral_to_json(s))
        assert back.geometry.same_as(g)
        assert np.array_equal(back.coeffs, s.coeffs)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5), st.sampled_from([2, 4, 6]))
def test_round_trip_property(coeffs, n):
    g = make_geometry(SPHERE, n, 16)
    c = np.zeros(17)
    c[:5] = coeffs
    assert np.max(np.abs(g.forward(g.inverse(c)) - c)) <= 1e-12
