from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conic_xray.conic_manifold import ConicMetric
from conic_xray.errors import ArgumentError, CertificationError, SizeError
from conic_xray.link_geometry import LinkGrid, LinkMetric
from conic_xray.normal_operator import (
    CollarGrid,
    Localizer,
    NormalOperator,
    OperatorOptions,
    WeightSpec,
    apply_normal,
    assemble_matrix,
    bump,
    lam_hat_rule,
    localizer_scale,
    localizer_value,
    read_matrix,
    write_matrix,
)
from conic_xray.xray_transform import DecayClass, GridFunction, log_nodes

from oracles import circle_normal_operator

ONE_CUSP = WeightSpec.one_cusp()
LOC = Localizer()


@pytest.fixture(scope="module")
def sphere_setup(cone_sphere):
    g = LinkGrid.build(cone_sphere.link, 8)
    xn = log_nodes(0.05, 0.5, 8)
    grid = CollarGrid(xn, g, DecayClass.compact(0.0, 0.5))
    return cone_sphere, grid


def smooth_profile(x, y):
    return np.exp(-(((x - 0.25) / 0.08) ** 2)) * (1 + 0.3 * np.cos(y[:, 0]))


class TestLocalizerAndWeight:
    @given(st.floats(-10, 10))
    def test_localizer_even_nonnegative_supported(self, s):
        for loc in (Localizer(), Localizer("centered_null", 3.0)):
            assert loc(s) == pytest.approx(loc(-s))
            assert loc(s) >= 0
            if abs(s) >= loc.support:
                assert loc(s) == 0

    def test_localizer_origin(self):
        assert Localizer()(0.0) == 1.0
        assert Localizer("centered_null")(0.0) == 0.0
        with pytest.raises(ArgumentError):
            Localizer("box")
        with pytest.raises(ArgumentError):
            Localizer(support=0)

    def test_bump_plateau(self):
        u = np.array([-1.2, -0.5, 0.0, 0.3, 0.99, 1.0])
        b = bump(u)
        assert b[1] == b[2] == b[3] == 1.0 and b[0] == b[5] == 0.0 and 0 < b[4] < 1

    @given(st.floats(0.01, 0.49), st.floats(0.01, 0.49), st.sampled_from([1.0, 1.5, 2.0]))
    def test_one_cusp_exponent_sign(self, xb, x, p):
        w = WeightSpec.one_cusp(p)
        e = float(w.exponent(xb, x))
        assert (e <= 0) == (x <= xb) or abs(e) < 1e-12
        assert float(w.dF(x)) > 0

    @given(st.floats(0.01, 0.49))
    def test_combined_weight_increasing(self, x):
        w = WeightSpec.combined(0.5)
        assert float(w.dF(x)) > 0
        h = 1e-6
        assert (float(w.F(x + h)) - float(w.F(x - h))) / (2 * h) == pytest.approx(float(w.dF(x)), rel=1e-5)

    def test_combined_weight_pieces(self):
        w = WeightSpec.combined(0.5)
        assert float(w.F(0.1)) == pytest.approx(-0.5 / 0.01)
        assert float(w.F(0.4)) == pytest.approx(1 / 0.1)
        assert w.x_limit == 0.5 and ONE_CUSP.x_limit == math.inf
        with pytest.raises(ArgumentError):
            WeightSpec("combined", p=2.0)

    def test_localizer_scale(self, cone_sphere):
        assert localizer_scale(ONE_CUSP, cone_sphere, 0.04, 0.2) == pytest.approx(0.2 * 0.2)
        comb = localizer_scale(WeightSpec.combined(0.5), cone_sphere, 0.04, 0.1)
        # below the blend: F' = x^-3 and |alpha| = 1/2
        assert comb == pytest.approx(math.sqrt(0.04 * 0.5 * 0.01))
        assert localizer_value(LOC, 0.2, 0.0, h=0.04) == 1.0
        with pytest.raises(ArgumentError):
            localizer_value(LOC, 0.2, 0.0, h=0.04, weight=WeightSpec.combined(0.5))

    @pytest.mark.parametrize("k", [0, 1, 2, 5])
    def test_lam_hat_rule_integrates_abs_powers(self, k):
        s, w = lam_hat_rule(32, 4.0)
        assert np.sum(w * np.abs(s) ** k) == pytest.approx(2 * 4.0 ** (k + 1) / (k + 1), rel=1e-12)
        with pytest.raises(ArgumentError):
            lam_hat_rule(7, 4.0)


def test_brute_force_oracle_circle(cone_circle):
    g = LinkGrid.build(cone_circle.link, 4)
    xn = log_nodes(0.1, 0.5, 4)
    v = GridFunction.from_callable(cone_circle, xn, g,
                                   lambda x, y: (1 + x) * (1 + 0.5 * np.cos(y[:, 0]) + 0.2 * np.sin(y[:, 0])),
                                   DecayClass.compact(0.0, 0.5))
    out = apply_normal(cone_circle, ONE_CUSP, LOC, 0.1, v).profile
    ref = circle_normal_operator(lambda x, y: v(x, np.broadcast_to(y, x.shape)[:, None]), xn, g.nodes[:, 0], 0.1, LOC)
    assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-5


def test_matrix_matches_apply(sphere_setup):
    m, grid = sphere_setup
    op = NormalOperator(m, ONE_CUSP, LOC, 0.1, grid)
    v = GridFunction.from_callable(m, grid.x_nodes, grid.ygrid, smooth_profile, grid.decay)
    out = apply_normal(m, ONE_CUSP, LOC, 0.1, v, operator=op)
    A = op.matrix()
    np.testing.assert_allclose(A @ v.profile.ravel(), out.profile.ravel(), atol=1e-13 * np.abs(A).max())


def test_rotation_equivariance(sphere_setup):
    """Shifting the input by one longitude step shifts the output by the same step."""
    m, grid = sphere_setup
    op = NormalOperator(m, ONE_CUSP, LOC, 0.1, grid)
    nt, nphi = grid.ygrid.n_theta, grid.ygrid.n_phi
    rng = np.random.default_rng(3)
    v = rng.standard_normal((grid.x_nodes.size, nt, nphi))
    a = op.apply_profile(v.reshape(grid.x_nodes.size, -1)).reshape(v.shape)
    b = op.apply_profile(np.roll(v, 1, axis=-1).reshape(grid.x_nodes.size, -1)).reshape(v.shape)
    np.testing.assert_allclose(np.roll(a, 1, axis=-1), b, atol=1e-12 * np.abs(a).max())


def test_h_scaling_of_output_norm(sphere_setup):
    m, grid = sphere_setup
    v = GridFunction.from_callable(m, grid.x_nodes, grid.ygrid, smooth_profile, grid.decay)
    hs = np.array([0.2, 0.1, 0.05])
    norms = [np.linalg.norm(apply_normal(m, ONE_CUSP, LOC, h, v).profile) for h in hs]
    slope = np.polyfit(np.log(hs), np.log(norms), 1)[0]
    assert abs(slope - 1) < 0.15


def test_collar_locality(cone_sphere):
    """Blocks coupling x-nodes more than a factor 2 apart are negligible and shrink with h."""
    g = LinkGrid.build(cone_sphere.link, 8)
    xn = log_nodes(0.02, 0.5, 24)
    grid = CollarGrid(xn, g, DecayClass.compact(0.0, 0.5))
    prev = None
    for h in (0.1, 0.05):
        A = NormalOperator(cone_sphere, ONE_CUSP, LOC, h, grid).matrix()
        B = np.abs(A).reshape(24, 8, 24, 8).max(axis=(1, 3))
        ratios = []
        for i in (4, 12, 20):
            r = xn / xn[i]
            far = (r > 2) | (r < 0.5)
            ratios.append(B[i, far].max() / B[i, i])
        ratios = np.array(ratios)
        assert np.all(ratios < 1e-4)
        if prev is not None:
            assert np.all(ratios <= prev)
        prev = ratios


@pytest.mark.parametrize("C", [-0.5, 1.0])
def test_gaussian_class_exponent_bookkeeping(cone_circle, C):
    """Profiles in a Gaussian class: output profile = oracle on true values / envelope at the base node."""
    g = LinkGrid.build(cone_circle.link, 4)
    xn = log_nodes(0.1, 0.5, 4)
    dec = DecayClass.gaussian(C)
    v = GridFunction.from_callable(cone_circle, xn, g, lambda x, y: (1 + x) * (1 + 0.5 * np.cos(y[:, 0])), dec)
    out = apply_normal(cone_circle, ONE_CUSP, LOC, 0.1, v).profile
    ref = circle_normal_operator(lambda x, y: v(x, np.broadcast_to(y, x.shape)[:, None]), xn, g.nodes[:, 0], 0.1, LOC)
    ref /= np.exp(dec.log_envelope(xn))[:, None]
    assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-5


def test_combined_weight_runs(sphere_setup):
    m, grid = sphere_setup
    xn = log_nodes(0.05, 0.4, 8)
    v = GridFunction.from_callable(m, xn, grid.ygrid, smooth_profile, DecayClass.compact(0.0, 0.4))
    out = apply_normal(m, WeightSpec.combined(0.45), LOC, 0.1, v)
    assert np.all(np.isfinite(out.profile)) and np.abs(out.profile).max() > 0
    with pytest.raises(ArgumentError):
        NormalOperator(m, WeightSpec.combined(0.3), LOC, 0.1, CollarGrid(xn, grid.ygrid, DecayClass.compact(0, 0.4)))


def test_requires_certificate():
    m = ConicMetric(LinkMetric.round_sphere(1.0), 0.5)
    grid = CollarGrid(log_nodes(0.05, 0.5, 4), LinkGrid.build(m.link, 8), DecayClass.compact(0, 0.5))
    with pytest.raises(CertificationError):
        NormalOperator(m, ONE_CUSP, LOC, 0.1, grid)


def test_assemble_cap(sphere_setup):
    m, grid = sphere_setup
    with pytest.raises(SizeError):
        assemble_matrix(m, ONE_CUSP, LOC, 0.1, grid, cap=10)


def test_apply_rejects_nonfinite(sphere_setup):
    m, grid = sphere_setup
    v = GridFunction(m, grid.x_nodes, grid.ygrid, np.full((8, 8), np.nan), grid.decay)
    with pytest.raises(ArgumentError):
        apply_normal(m, ONE_CUSP, LOC, 0.1, v)


def test_nop1_round_trip(tmp_path, sphere_setup):
    m, grid = sphere_setup
    A = assemble_matrix(m, ONE_CUSP, LOC, 0.1, grid, options=OperatorOptions(n_lam=16))
    p = tmp_path / "a.nop"
    write_matrix(p, A, 0.1, ONE_CUSP, grid)
    raw = p.read_bytes()
    assert raw[:4] == b"NOP1" and len(raw) == 44 + 8 * grid.size**2
    B, head = read_matrix(p)
    np.testing.assert_array_equal(A, B)
    assert head == {"N": grid.size, "h": 0.1, "p": 1.0, "weight_code": 0, "grid_hash": grid.grid_hash()}
    p.write_bytes(raw[:-8])
    with pytest.raises(ArgumentError):
        read_matrix(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ArgumentError):
        read_matrix(p)
