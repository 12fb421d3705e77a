from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conic_xray.conic_manifold import ConicMetric
from conic_xray.errors import ArgumentError, ContractViolation
from conic_xray.geodesic_flow import trace
from conic_xray.link_geometry import LinkGrid, LinkMetric, LinkState
from conic_xray.xray_transform import (
    AnalyticFunction,
    DecayClass,
    GridFunction,
    build_family,
    eval_function,
    forward,
    forward_family,
    forward_family_scaled,
    log_nodes,
    read_gridfunction,
    write_gridfunction,
    x_interp_matrix,
)

from oracles import cone_radial_transform

SPHERE = LinkMetric.round_sphere(1.0)
CONE = ConicMetric(SPHERE, 0.5)
GRID = LinkGrid.build(SPHERE, 24)
XN = log_nodes(0.02, 0.5, 32)
STATE = LinkState.from_direction(SPHERE, [1.0, 0.5], 0.3)


@pytest.mark.parametrize("x0,lam", [(0.1, -0.6), (0.2, 0.0), (0.3, 0.3), (0.4, 0.6)])
def test_forward_radial_oracle(x0, lam):
    f = GridFunction.from_callable(CONE, XN, GRID, lambda x, y: np.ones_like(x), DecayClass.gaussian(0.5, 1))
    v = forward(f, trace(CONE, x0, STATE, lam))
    assert v == pytest.approx(cone_radial_transform(x0, lam, 0.5, CONE.x0), rel=1e-8)


def test_forward_analytic_matches_grid_for_link_harmonic():
    fn = lambda x, y: 1 + 0.3 * np.cos(y[:, 0])
    dec = DecayClass.gaussian(1.0)
    fg = GridFunction.from_callable(CONE, XN, GRID, fn, dec)
    fa = AnalyticFunction(CONE, fn, dec)
    p = trace(CONE, 0.2, STATE, 0.1)
    assert forward(fg, p) == pytest.approx(forward(fa, p), rel=1e-10)


def test_family_matches_single_paths():
    f = GridFunction.from_callable(CONE, XN, GRID,
                                   lambda x, y: 1 + 0.3 * np.cos(y[:, 0]) + 0.2 * np.sin(y[:, 0]) * np.cos(y[:, 1]),
                                   DecayClass.gaussian(0.5, 1))
    fam = build_family(CONE, [0.1, 0.3], GRID.nodes[:3], np.array([-0.5, 0.0, 0.5]), np.array([0.3, 1.0]), 0.9)
    D = forward_family(f, fam)
    assert D.shape == fam.shape == (2, 3, 3, 2)
    for idx in [(0, 0, 0, 0), (1, 2, 2, 1), (1, 1, 1, 0)]:
        assert D[idx] == pytest.approx(forward(f, fam.path(*idx)), rel=1e-12)
    S = forward_family_scaled(f, fam)
    env = np.exp(f.decay.log_envelope(np.array([0.1, 0.3])))
    np.testing.assert_allclose(S * env[:, None, None, None], D, rtol=1e-10)


class TestDecayAndInterpolation:
    def test_decay_classes(self):
        g = DecayClass.gaussian(2.0, 1.0)
        assert g.log_envelope(0.5) == pytest.approx(-8.0)
        assert g.log_envelope_dx(0.5) == pytest.approx(2 * 2.0 * 0.5**-3)
        assert g.shifted(-1.0) == DecayClass.gaussian(1.0, 1.0)
        with pytest.raises(ContractViolation):
            DecayClass.compact(0, 1).shifted(1.0)
        with pytest.raises(ArgumentError):
            DecayClass.compact(1, 0.5)

    @given(st.floats(0.02, 0.5))
    def test_spline_reproduces_cubics_in_log_x(self, x):
        coeffs = np.array([0.3, -1.0, 0.2, 0.05])
        f = lambda v: np.polyval(coeffs, np.log(v))
        W = x_interp_matrix(XN, np.array([x]))
        assert (W @ f(XN))[0] == pytest.approx(f(x), abs=1e-9)

    def test_interp_matrix_is_contiguous(self):
        assert x_interp_matrix(XN, np.array([0.1, 0.2])).flags["C_CONTIGUOUS"]

    def test_gridfunction_validation(self):
        with pytest.raises(ArgumentError):
            GridFunction(CONE, XN[::-1], GRID, np.zeros((32, 24)), DecayClass.compact(0, 0.5))
        with pytest.raises(ArgumentError):
            GridFunction(CONE, XN, GRID, np.zeros((31, 24)), DecayClass.compact(0, 0.5))
        with pytest.raises(ContractViolation):
            GridFunction(CONE, XN, LinkGrid.build(LinkMetric.circle(), 24), np.zeros((32, 24)),
                         DecayClass.compact(0, 0.5))

    def test_support_mask(self):
        f = GridFunction.from_callable(CONE, XN, GRID, lambda x, y: np.ones_like(x), DecayClass.compact(0.1, 0.3))
        m = f.support_mask(np.array([0.01, 0.05, 0.2, 0.4]))
        assert m.tolist() == [False, False, True, False]
        a = AnalyticFunction(CONE, lambda x, y: np.ones_like(x), DecayClass.gaussian(1.0))
        assert a.support_mask(np.array([0.01, 0.6])).tolist() == [True, False]

    def test_eval_at_node_is_exact(self):
        fn = lambda x, y: (1 + x) * (1 + 0.3 * np.cos(y[:, 0]))
        dec = DecayClass.gaussian(0.5)
        f = GridFunction.from_callable(CONE, XN, GRID, fn, dec)
        x, y = XN[5], GRID.nodes[7]
        expect = fn(np.array([x]), y[None])[0] * math.exp(dec.log_envelope(x))
        assert eval_function(f, (x, y)) == pytest.approx(expect, rel=1e-12)

    def test_arithmetic(self):
        dec = DecayClass.gaussian(0.5)
        f = GridFunction.from_callable(CONE, XN, GRID, lambda x, y: np.ones_like(x), dec)
        g = f + f * 2.0
        np.testing.assert_allclose(g.profile, 3.0)


def test_gfn1_round_trip(tmp_path):
    dec = DecayClass.gaussian(0.7, 1.0)
    f = GridFunction.from_callable(CONE, XN, GRID, lambda x, y: np.cos(y[:, 0]) * (1 + x), dec)
    p = tmp_path / "f.gfn"
    write_gridfunction(f, p)
    raw = p.read_bytes()
    assert raw[:4] == b"GFN1"
    assert len(raw) == 36 + 8 * (32 + 24 * 2 + 32 * 24)
    g = read_gridfunction(p, CONE)
    assert g.decay == dec
    np.testing.assert_array_equal(g.x_nodes, f.x_nodes)
    np.testing.assert_array_equal(g.profile, f.profile)
    assert np.all(np.isfinite(g.profile))
    write_gridfunction(g, tmp_path / "g.gfn")
    assert (tmp_path / "g.gfn").read_bytes() == raw


def test_gfn1_rejects_other_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(ContractViolation):
        read_gridfunction(p, CONE)


def test_forward_rejects_other_metric():
    f = GridFunction.from_callable(CONE, XN, GRID, lambda x, y: np.ones_like(x), DecayClass.gaussian(0.5))
    other = ConicMetric(SPHERE, 0.5, (1.0,))
    with pytest.raises(ContractViolation):
        forward(f, trace(other, 0.2, STATE, 0.0))
