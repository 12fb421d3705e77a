from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conic_xray.conic_manifold import (
    ConicMetric,
    ScCovector,
    btangent_norm,
    covector_to_btangent,
    dual_metric,
    sc_hamilton_field,
    unit_covector,
)
from conic_xray.errors import ArgumentError, ContractViolation, DomainError
from conic_xray.link_geometry import LinkMetric, LinkState

SPHERE = LinkMetric.round_sphere(1.0)


def test_metric_validation():
    with pytest.raises(ArgumentError):
        ConicMetric(SPHERE, x0=-1.0)
    with pytest.raises(ArgumentError):
        ConicMetric(SPHERE, warp=(-3.0,))
    m = ConicMetric(SPHERE, 0.5, (1.0, 0.5))
    assert m.n == 3 and not m.is_exact_cone
    assert m.c(0.2) == pytest.approx(1 + 0.2 + 0.5 * 0.04)
    assert m.dc(0.2) == pytest.approx(1 + 0.2)
    assert m.ddc(0.2) == pytest.approx(1.0)


def test_check_x_domain():
    m = ConicMetric(SPHERE, 0.5)
    with pytest.raises(DomainError):
        m.check_x(0.6)
    with pytest.raises(DomainError):
        m.check_x(0.0)


@given(st.floats(0.01, 0.5), st.floats(-1, 1), st.floats(0.3, 2.8), st.floats(0, 6.2), st.floats(0, 6.2),
       st.sampled_from([(), (1.0,), (0.5, -0.3)]))
def test_unit_covector_on_level_set(x, lam, th, ph, ang, warp):
    m = ConicMetric(SPHERE, 0.5, warp)
    s = LinkState.from_direction(SPHERE, [th, ph], ang)
    q = unit_covector(m, x, s.y, lam, s.mu_hat)
    assert dual_metric(m, q) == pytest.approx(1.0, abs=1e-12)
    b = covector_to_btangent(m, q)
    assert b.lam == pytest.approx(lam)
    # lam^2 + |omega|_h^2 = 1 on the unit level set
    assert b.lam**2 + btangent_norm(m, x, s.y, b.omega) ** 2 == pytest.approx(1.0, abs=1e-10)


def test_btangent_rejects_off_level_set():
    m = ConicMetric(SPHERE, 0.5)
    with pytest.raises(ContractViolation):
        covector_to_btangent(m, ScCovector(0.2, [1.0, 0.5], 0.5, [0.5, 0.0]))


@given(st.floats(0.02, 0.45), st.floats(-0.9, 0.9), st.floats(0.3, 2.8), st.floats(0, 6.2), st.floats(0, 6.2),
       st.sampled_from([(), (1.0,), (0.5, -0.3)]))
def test_hamilton_field_is_tangent_to_level_set(x, lam, th, ph, ang, warp):
    """d/dt G along the field must vanish; checked by a centered finite difference."""
    m = ConicMetric(SPHERE, 0.5, warp)
    s = LinkState.from_direction(SPHERE, [th, ph], ang)
    q = unit_covector(m, x, s.y, lam, s.mu_hat)
    dx, dy, dtau, dmu = sc_hamilton_field(m, q)
    eps = 1e-6

    def G(sgn):
        return dual_metric(m, ScCovector(q.x + sgn * eps * dx, q.y + sgn * eps * dy, q.tau + sgn * eps * dtau,
                                         q.mu + sgn * eps * dmu))

    assert abs(G(1) - G(-1)) / (2 * eps) < 1e-6


def test_hamilton_field_exact_cone_closed_form():
    m = ConicMetric(SPHERE, 0.5)
    s = LinkState.from_direction(SPHERE, [1.0, 0.0], 0.0)
    q = unit_covector(m, 0.2, s.y, 0.6, s.mu_hat)
    dx, dy, dtau, dmu = sc_hamilton_field(m, q)
    assert dx == pytest.approx(0.2 * 0.6)
    assert dtau == pytest.approx(-(1 - 0.36))
    assert np.linalg.norm(dy) == pytest.approx(0.8)


def test_circle_dual_metric():
    link = LinkMetric.circle(2.0)
    m = ConicMetric(link, 0.5)
    q = ScCovector(0.1, [0.0], 0.6, [2.0 * 0.8])
    assert dual_metric(m, q) == pytest.approx(1.0)
    assert math.isclose(covector_to_btangent(m, q).omega[0], 0.8 / 2.0)
