"""Asymptotically conic collar ``{0 < x <= x0} x Y`` with a scalar-warped link metric.

The metric is ``g = dx^2/x^4 + c(x) h0 / x^2`` with ``c(x) = 1 + sum_k a_k x^k``
and ``h0`` the link metric. In scattering coordinates ``tau dx/x^2 + mu.dy/x``
the dual metric is ``tau^2 + |mu|_{h0}^2 / c(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ArgumentError, ContractViolation, DomainError
from .link_geometry import LinkMetric

LEVEL_TOL = 1e-9


@dataclass(eq=False)
class ConicMetric:
    """Warped conic metric on the collar.

    ``warp`` holds ``(a_1, a_2, ...)`` so that ``c(x) = 1 + a_1 x + a_2 x^2 + ...``;
    ``p`` is the exponent of the Gaussian weight ``-1/(2 p x^{2p})``.
    ``certificate`` is filled by :func:`conic_xray.geodesic_flow.certify`.
    """

    link: LinkMetric
    x0: float = 0.5
    warp: tuple = ()
    p: float = 1.0
    certificate: Any = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.x0 > 0 and math.isfinite(self.x0)):
            raise ArgumentError("x0 must be positive")
        if not (self.p > 0):
            raise ArgumentError("p must be positive")
        self.warp = tuple(float(a) for a in self.warp)
        P = np.polynomial.polynomial
        self._c0 = np.concatenate([[1.0], self.warp])
        self._c1 = P.polyder(self._c0)
        self._c2 = P.polyder(self._c0, 2)
        xs = np.linspace(0.0, self.x0, 513)
        if np.min(self.c(xs)) <= 0.5:
            raise ArgumentError("warp factor c(x) must stay above 1/2 on [0, x0]")

    @property
    def n(self) -> int:
        """Dimension of the manifold."""
        return self.link.dim + 1

    @property
    def is_exact_cone(self) -> bool:
        return all(a == 0.0 for a in self.warp)

    def _poly(self, x, coef):
        x = np.asarray(x, dtype=float)
        out = np.full_like(x, coef[-1]) if coef.size else np.zeros_like(x)
        for a in coef[-2::-1]:
            out = out * x + a
        return out

    def c(self, x):
        return self._poly(x, self._c0)

    def dc(self, x):
        return self._poly(x, self._c1)

    def ddc(self, x):
        return self._poly(x, self._c2)

    def radial_damping(self, x):
        """``(1 - x c'/(2c)) / c``: rate at which ``|mu|^2`` drains into ``tau``."""
        if self.is_exact_cone:
            return np.ones_like(np.asarray(x, dtype=float))
        c = self.c(x)
        return (1.0 - x * self.dc(x) / (2.0 * c)) / c

    def radial_damping_dx(self, x):
        c, dc, ddc = self.c(x), self.dc(x), self.ddc(x)
        k = 1.0 - x * dc / (2.0 * c)
        dk = -(dc + x * ddc) / (2.0 * c) + x * dc**2 / (2.0 * c**2)
        return dk / c - k * dc / c**2

    def check_x(self, x):
        xa = np.asarray(x, dtype=float)
        if np.any(~(xa > 0)) or np.any(xa > self.x0 * (1 + 1e-12)):
            raise DomainError(f"x must lie in (0, {self.x0}]")

    def same_geometry(self, other: "ConicMetric") -> bool:
        return (self.link == other.link and self.x0 == other.x0 and self.warp == other.warp
                and self.p == other.p)


@dataclass(frozen=True)
class ScCovector:
    """Scattering covector ``tau dx/x^2 + mu.dy/x`` at ``(x, y)``."""

    x: float
    y: np.ndarray
    tau: float
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))


@dataclass(frozen=True)
class BTangent:
    """b-tangent vector ``lam x d_x + omega.d_y``."""

    lam: float
    omega: np.ndarray


def _h0_parts(link: LinkMetric, y, mu):
    """``H0 = |mu|_{h0}^2`` with its partial derivatives in ``mu`` and ``y``."""
    if link.kind == "circle":
        R2 = link.radius**2
        H = mu[0] ** 2 / R2
        return H, np.array([2.0 * mu[0] / R2]), np.array([0.0])
    theta = y[0]
    s, z = math.sin(theta), math.cos(theta)
    if s == 0.0:
        raise DomainError("covector fields are evaluated away from the coordinate poles")
    u, du, _ = link.log_conformal(z)
    e = math.exp(-2.0 * float(u))
    H = e * (mu[0] ** 2 + mu[1] ** 2 / s**2)
    dmu = np.array([2.0 * e * mu[0], 2.0 * e * mu[1] / s**2])
    dtheta = 2.0 * s * float(du) * H - 2.0 * e * mu[1] ** 2 * z / s**3
    return H, dmu, np.array([dtheta, 0.0])


def dual_metric(metric: ConicMetric, q: ScCovector) -> float:
    """``tau^2 + |mu|^2_{h(x)}`` for the warped model."""
    metric.check_x(q.x)
    H0 = float(metric.link.dual_norm(q.y, q.mu)) ** 2
    return float(q.tau**2 + H0 / metric.c(q.x))


def sc_hamilton_field(metric: ConicMetric, q: ScCovector):
    """Coordinate velocity ``(dx, dy, dtau, dmu)`` of half the rescaled Hamilton field.

    Written out for the warped model:

        dx   = x tau
        dy   = (1/2c) d_mu H0
        dtau = -(H0/c) (1 - x c'/(2c))
        dmu  = tau mu - (1/2c) d_y H0
    """
    metric.check_x(q.x)
    H0, dmu_H, dy_H = _h0_parts(metric.link, q.y, q.mu)
    x = q.x
    c = float(metric.c(x))
    dx = x * q.tau
    dy = 0.5 * dmu_H / c
    dtau = -H0 * float(metric.radial_damping(x))
    dmu = q.tau * q.mu - 0.5 * dy_H / c
    return dx, dy, dtau, dmu


def covector_to_btangent(metric: ConicMetric, q: ScCovector) -> BTangent:
    """Identify a unit covector with the b-tangent ``(lam, omega)``: ``lam = tau``, ``omega = h(x)^{-1} mu``."""
    G = dual_metric(metric, q)
    if abs(G - 1.0) > LEVEL_TOL:
        raise ContractViolation(f"covector is off the unit level set (G = {G:.12g})")
    c = float(metric.c(q.x))
    ginv = np.linalg.inv(metric.link.metric_tensor(q.y))
    return BTangent(float(q.tau), ginv @ q.mu / c)


def btangent_norm(metric: ConicMetric, x: float, y: Sequence[float], omega) -> float:
    """``|omega|_{h(x)}``."""
    gm = metric.link.metric_tensor(y) * float(metric.c(x))
    om = np.asarray(omega, dtype=float)
    return float(math.sqrt(om @ gm @ om))


def unit_covector(metric: ConicMetric, x: float, y, lam: float, mu_hat) -> ScCovector:
    """Unit covector with ``tau = lam`` and ``mu`` along the ``h0``-unit covector ``mu_hat``."""
    if abs(lam) > 1.0:
        raise ContractViolation("|lam| must not exceed 1 on the unit level set")
    rho = math.sqrt(float(metric.c(x)) * (1.0 - lam * lam))
    return ScCovector(x, y, lam, rho * np.asarray(mu_hat, dtype=float))
