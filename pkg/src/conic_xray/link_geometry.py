"""Link manifolds (Y, h): geodesic flow, Jacobi fields and quadrature grids.

Three families are supported: a circle of radius R, a round sphere of
radius R, and a Legendre-perturbed sphere

    h = R^2 (1 + a P_k(cos theta)) (d theta^2 + sin^2 theta d phi^2).

Sphere geodesics are integrated in the ambient R^3 embedding of the unit
sphere, which avoids the coordinate singularity at the poles. Points are
reported in colatitude/longitude coordinates and covectors in the
coordinate basis (mu_theta, mu_phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import ArgumentError, ContractViolation

UNIT_TOL = 1e-10
_KINDS = ("circle", "round_sphere", "perturbed_sphere")


@dataclass(frozen=True)
class LinkMetric:
    """Cross-section metric of the conic end.

    Parameters
    ----------
    kind : {"circle", "round_sphere", "perturbed_sphere"}
    radius : float
        Radius (base radius for the perturbed sphere).
    amplitude : float
        Coefficient ``a`` of the Legendre perturbation.
    harmonic_degree : int
        Degree ``k`` of the Legendre polynomial.
    """

    kind: str
    radius: float = 1.0
    amplitude: float = 0.0
    harmonic_degree: int = 2

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ArgumentError(f"unknown link kind {self.kind!r}; expected one of {_KINDS}")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ArgumentError("link radius must be positive")
        if self.kind == "perturbed_sphere":
            if abs(self.amplitude) >= self.radius / 4:
                raise ArgumentError("|amplitude| must be below base_radius/4")
            if self.harmonic_degree < 0 or self.harmonic_degree > 12:
                raise ArgumentError("harmonic_degree must be in [0, 12]")

    @classmethod
    def circle(cls, radius: float = 1.0) -> "LinkMetric":
        return cls("circle", radius)

    @classmethod
    def round_sphere(cls, radius: float = 1.0) -> "LinkMetric":
        return cls("round_sphere", radius)

    @classmethod
    def perturbed_sphere(cls, base_radius: float, amplitude: float, harmonic_degree: int) -> "LinkMetric":
        return cls("perturbed_sphere", base_radius, amplitude, int(harmonic_degree))

    @property
    def dim(self) -> int:
        return 1 if self.kind == "circle" else 2

    @property
    def is_sphere(self) -> bool:
        return self.kind != "circle"

    @property
    def axisymmetric(self) -> bool:
        return True

    @cached_property
    def _legendre(self):
        coef = np.zeros(self.harmonic_degree + 1)
        coef[-1] = 1.0
        return coef, npleg.legder(coef), npleg.legder(coef, 2)

    def log_conformal(self, z):
        """Return ``(u, u', u'')`` for the conformal factor ``e^{2u}`` as a function of ``z = cos theta``."""
        z = np.asarray(z, dtype=float)
        u0 = math.log(self.radius)
        if self.kind != "perturbed_sphere" or self.amplitude == 0.0:
            zero = np.zeros_like(z)
            return u0 + zero, zero, zero
        p, dp, ddp = self._legendre
        a = self.amplitude
        w = 1.0 + a * npleg.legval(z, p)
        wp = a * npleg.legval(z, dp)
        wpp = a * npleg.legval(z, ddp)
        return u0 + 0.5 * np.log(w), 0.5 * wp / w, 0.5 * (wpp / w - (wp / w) ** 2)

    def conformal_factor(self, theta):
        """``e^{2u}`` at colatitude ``theta``."""
        u, _, _ = self.log_conformal(np.cos(theta))
        return np.exp(2.0 * u)

    def metric_tensor(self, y) -> np.ndarray:
        """Coordinate metric tensor at ``y`` (shape ``(dim, dim)``)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.kind == "circle":
            return np.array([[self.radius**2]])
        e2u = float(self.conformal_factor(y[0]))
        return np.diag([e2u, e2u * math.sin(y[0]) ** 2])

    def dual_norm(self, y, mu):
        """``|mu|_h`` for coordinate covectors; broadcasts over leading axes."""
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == "circle":
            return np.abs(mu[..., 0]) / self.radius
        theta = y[..., 0]
        s = np.sin(theta)
        e2u = self.conformal_factor(theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi_part = np.where(np.abs(mu[..., 1]) > 0, mu[..., 1] ** 2 / s**2, 0.0)
        return np.sqrt((mu[..., 0] ** 2 + phi_part) / e2u)

    def curvature(self, z):
        """Gaussian curvature as a function of ``z = cos theta``."""
        u, du, ddu = self.log_conformal(z)
        lap = (1.0 - z**2) * ddu - 2.0 * z * du
        return np.exp(-2.0 * u) * (1.0 - lap)


@dataclass(frozen=True)
class LinkState:
    """A point on the link with a unit covector."""

    link: LinkMetric
    y: np.ndarray
    mu_hat: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).copy()
        mu = np.atleast_1d(np.asarray(self.mu_hat, dtype=float)).copy()
        d = self.link.dim
        if y.shape != (d,) or mu.shape != (d,):
            raise ContractViolation(f"link state needs {d} coordinates and {d} covector components")
        y.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mu_hat", mu)
        if self.check:
            n = float(self.link.dual_norm(y, mu))
            if abs(n - 1.0) > UNIT_TOL:
                raise ContractViolation(f"covector is not unit length (|mu|_h = {n:.12g})")

    @classmethod
    def from_direction(cls, link: LinkMetric, y, angle: float = 0.0) -> "LinkState":
        """Unit covector at ``y`` pointing along ``cos(angle) e_theta + sin(angle) e_phi``.

        For the circle, ``angle`` selects the orientation through ``sign(cos(angle))``.
        """
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if link.kind == "circle":
            sgn = 1.0 if math.cos(angle) >= 0 else -1.0
            return cls(link, y, np.array([sgn * link.radius]))
        eu = math.sqrt(float(link.conformal_factor(y[0])))
        mu = np.array([eu * math.cos(angle), eu * math.sin(y[0]) * math.sin(angle)])
        return cls(link, y, mu)

    def reversed(self) -> "LinkState":
        return LinkState(self.link, self.y, -self.mu_hat, check=False)


# ---------------------------------------------------------------------------
# Embedding helpers (unit sphere in R^3)
# ---------------------------------------------------------------------------


def _frame(theta, phi):
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    p = np.stack([st * cp, st * sp, ct], axis=-1)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(theta)], axis=-1)
    return p, e_theta, e_phi


def sphere_embed(link: LinkMetric, y, mu):
    """Map coordinate data ``(y, mu)`` to ambient position and velocity ``(p, dp/dr)``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    theta, phi = y[..., 0], y[..., 1]
    p, et, ep = _frame(theta, phi)
    e2u = link.conformal_factor(theta)
    s = np.sin(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        mphi = np.where(np.abs(mu[..., 1]) > 0, mu[..., 1] / s, 0.0)
    q = (mu[..., 0, None] * et + mphi[..., None] * ep) / e2u[..., None]
    return p, q


def sphere_unembed(link: LinkMetric, p, q):
    """Inverse of :func:`sphere_embed`; at a pole the longitude aligns ``q`` with ``e_theta``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    rho = np.hypot(p[..., 0], p[..., 1])
    theta = np.arctan2(rho, p[..., 2])
    phi = np.arctan2(p[..., 1], p[..., 0])
    pole = rho < 1e-13
    if np.any(pole):
        north = p[..., 2] > 0
        alt = np.where(north, np.arctan2(q[..., 1], q[..., 0]), np.arctan2(-q[..., 1], -q[..., 0]))
        phi = np.where(pole, alt, phi)
    phi = np.mod(phi, 2.0 * np.pi)
    _, et, ep = _frame(theta, phi)
    e2u = link.conformal_factor(theta)
    mu_t = e2u * np.sum(q * et, axis=-1)
    mu_p = e2u * np.sin(theta) * np.sum(q * ep, axis=-1)
    return np.stack([theta, phi], axis=-1), np.stack([mu_t, mu_p], axis=-1)


def _geodesic_rhs(link: LinkMetric, with_jacobi: bool):
    def rhs(_r, s):
        p, q = s[0:3], s[3:6]
        z = p[2]
        _, du, _ = link.log_conformal(z)
        du = float(du)
        grad = du * (np.array([0.0, 0.0, 1.0]) - z * p)
        qq = q @ q
        acc = -qq * p - 2.0 * (grad @ q) * q + qq * grad
        if not with_jacobi:
            return np.concatenate([q, acc])
        k = float(link.curvature(z))
        return np.concatenate([q, acc, [s[7], -k * s[6]]])

    return rhs


def _project(link: LinkMetric, p, q):
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    q = q - np.sum(q * p, axis=-1, keepdims=True) * p
    u, _, _ = link.log_conformal(p[..., 2])
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(qn > 0, q / np.where(qn > 0, qn, 1.0) * np.exp(-u)[..., None], q)
    return p, q


def _integrate_embedded(link: LinkMetric, p0, q0, r, with_jacobi=False, rtol=1e-12):
    """Integrate the embedded geodesic (and optionally the Jacobi field) and sample at ``r``."""
    r = np.asarray(r, dtype=float)
    s0 = np.concatenate([p0, q0] + ([[0.0, 1.0]] if with_jacobi else []))
    out = np.empty((r.size, s0.size))
    rhs = _geodesic_rhs(link, with_jacobi)
    for sign in (1.0, -1.0):
        sel = (r >= 0) if sign > 0 else (r < 0)
        if not np.any(sel):
            continue
        span = float(np.max(np.abs(r[sel])))
        if span == 0.0:
            out[sel] = s0
            continue
        sol = solve_ivp(rhs, (0.0, sign * span), s0, method="DOP853", rtol=rtol, atol=1e-13, dense_output=True)
        if not sol.success:
            from .errors import IntegrationFailure

            raise IntegrationFailure(f"link geodesic integration failed: {sol.message}", s0)
        out[sel] = sol.sol(r[sel]).T
    p, q = _project(link, out[:, 0:3], out[:, 3:6])
    out[:, 0:3], out[:, 3:6] = p, q
    return out


def flow_points(link: LinkMetric, y0, mu0, r):
    """Flow many unit states to arclengths ``r``.

    Parameters
    ----------
    y0, mu0 : array_like, shape (K, dim)
    r : array_like, shape (K, Q)

    Returns
    -------
    y, mu : ndarray, shape (K, Q, dim)
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    mu0 = np.atleast_2d(np.asarray(mu0, dtype=float))
    r = np.asarray(r, dtype=float)
    if r.ndim == 1:
        r = np.broadcast_to(r, (y0.shape[0], r.size))
    if link.kind == "circle":
        sgn = np.sign(mu0[:, 0])[:, None]
        y = np.mod(y0[:, 0, None] + sgn * r / link.radius, 2.0 * np.pi)
        mu = np.broadcast_to(mu0[:, 0, None], y.shape)
        return y[..., None], np.array(mu)[..., None]
    p0, q0 = sphere_embed(link, y0, mu0)
    if link.kind == "round_sphere" or link.amplitude == 0.0:
        R = link.radius
        t_hat = q0 * R
        ang = (r / R)[..., None]
        p = p0[:, None, :] * np.cos(ang) + t_hat[:, None, :] * np.sin(ang)
        q = (t_hat[:, None, :] * np.cos(ang) - p0[:, None, :] * np.sin(ang)) / R
        return sphere_unembed(link, p, q)
    ys = np.empty(r.shape + (2,))
    mus = np.empty(r.shape + (2,))
    for k in range(y0.shape[0]):
        s = _integrate_embedded(link, p0[k], q0[k], r[k])
        ys[k], mus[k] = sphere_unembed(link, s[:, 0:3], s[:, 3:6])
    return ys, mus


def link_flow(state: LinkState, r: float) -> LinkState:
    """Follow the unit-speed geodesic from ``state`` for arclength ``r``."""
    if not math.isfinite(r):
        raise ArgumentError("arclength must be finite")
    link = state.link
    LinkState(link, state.y, state.mu_hat)  # re-validates unit length
    if r == 0.0:
        return state
    y, mu = flow_points(link, state.y[None, :], state.mu_hat[None, :], np.array([[r]]))
    return LinkState(link, y[0, 0], mu[0, 0], check=False)


def state_distance(a: LinkState, b: LinkState) -> float:
    """Distance between two link states, combining position and unit velocity."""
    link = a.link
    if link.kind == "circle":
        d = np.angle(np.exp(1j * (a.y[0] - b.y[0])))
        return float(abs(d) * link.radius + abs(a.mu_hat[0] - b.mu_hat[0]))
    pa, qa = sphere_embed(link, a.y, a.mu_hat)
    pb, qb = sphere_embed(link, b.y, b.mu_hat)
    return float(np.linalg.norm(pa - pb) * link.radius + np.linalg.norm(qa - qb) * link.radius)


def jacobi_field(state: LinkState, r) -> np.ndarray:
    """Normal Jacobi field with ``J(0)=0, J'(0)=1`` sampled at arclengths ``r`` (sphere links)."""
    link = state.link
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if link.kind == "circle":
        raise ContractViolation("a one-dimensional link carries no normal Jacobi fields")
    if link.kind == "round_sphere" or link.amplitude == 0.0:
        R = link.radius
        return R * np.sin(r / R)
    p0, q0 = sphere_embed(link, state.y, state.mu_hat)
    return _integrate_embedded(link, p0, q0, r, with_jacobi=True)[:, 6]


def conjugate_scan(state: LinkState, r_max: float = math.pi / 2, tol: float = 1e-8) -> float | None:
    """First conjugate distance along the geodesic from ``state`` within ``(0, r_max]``.

    The Jacobi equation ``J'' + K J = 0`` is integrated with the geodesic; a
    zero is detected by a sign change or by a near-zero minimum of ``|J|``
    and refined by bracketing. Returns ``None`` if no conjugate point exists.
    """
    if not (r_max > 0):
        raise ArgumentError("r_max must be positive")
    if r_max > math.pi + 1e-12:
        raise ArgumentError("r_max must not exceed pi")
    link = state.link
    if link.kind == "circle":
        return None
    p0, q0 = sphere_embed(link, state.y, state.mu_hat)
    rhs = _geodesic_rhs(link, True)
    s0 = np.concatenate([p0, q0, [0.0, 1.0]])
    end = r_max * (1.0 + 1e-3)
    sol = solve_ivp(rhs, (0.0, end), s0, method="DOP853", rtol=1e-12, atol=1e-13, dense_output=True)
    grid = np.linspace(0.0, end, 4001)[1:]
    J = sol.sol(grid)[6]

    def jfun(s):
        return float(sol.sol(s)[6])

    root = None
    sc = np.nonzero(np.sign(J[1:]) != np.sign(J[:-1]))[0]
    if sc.size:
        i = sc[0]
        root = brentq(jfun, grid[i], grid[i + 1], xtol=1e-14)
    else:
        aj = np.abs(J)
        loc = np.nonzero((aj[1:-1] <= aj[:-2]) & (aj[1:-1] <= aj[2:]) & (aj[1:-1] < tol))[0]
        if loc.size:
            i = loc[0] + 1
            from scipy.optimize import minimize_scalar

            res = minimize_scalar(lambda s: abs(jfun(s)), bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                  options={"xatol": 1e-13})
            root = float(res.x)
    if root is None or root > r_max * (1.0 + 1e-9):
        return None
    return float(root)


# ---------------------------------------------------------------------------
# Quadrature grids on the link
# ---------------------------------------------------------------------------


def _dirichlet(u, n: int):
    """Cardinal function of trigonometric interpolation on ``n`` equispaced nodes."""
    u = np.asarray(u, dtype=float)
    half = 0.5 * u
    s = np.sin(half)
    small = np.abs(s) < 1e-14
    safe = np.where(small, 1.0, s)
    if n % 2:
        val = np.sin(n * half) / (n * safe)
    else:
        val = np.sin(n * half) * np.cos(half) / (n * safe)
    # the cardinal function equals 1 at every multiple of 2 pi
    return np.where(small, 1.0, val)


def _fejer_weights(n: int) -> np.ndarray:
    """Fejer first-rule weights on the Chebyshev points ``cos((l+1/2) pi/n)`` for ``int_{-1}^{1}``."""
    theta = (np.arange(n) + 0.5) * np.pi / n
    j = np.arange(1, n // 2 + 1)
    s = np.cos(2.0 * np.outer(theta, j)) / (4.0 * j**2 - 1.0)
    return (2.0 / n) * (1.0 - 2.0 * s.sum(axis=1))


@dataclass(frozen=True)
class LinkGrid:
    """Tensor quadrature grid on the link with trigonometric interpolation.

    Sphere nodes are ordered with colatitude as the slow index and longitude
    as the fast index; the longitude count is even so that the double Fourier
    extension across the poles is node-aligned.
    """

    link: LinkMetric
    n_theta: int
    n_phi: int

    @classmethod
    def build(cls, link: LinkMetric, ny: int) -> "LinkGrid":
        if ny < 1:
            raise ArgumentError("ny must be positive")
        if link.kind == "circle":
            return cls(link, 1, ny)
        if ny < 2:
            raise ArgumentError("sphere grids need at least 2 nodes")
        best = None
        for nt in range(1, int(math.isqrt(ny)) + 1):
            if ny % nt == 0 and (ny // nt) % 2 == 0 and nt * nt <= ny / 2:
                best = nt
        if best is None:
            raise ArgumentError(f"cannot factor ny={ny} into colatitude x even longitude counts")
        return cls(link, best, ny // best)

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    @cached_property
    def theta_nodes(self) -> np.ndarray:
        return (np.arange(self.n_theta) + 0.5) * np.pi / self.n_theta

    @cached_property
    def phi_nodes(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi

    @cached_property
    def nodes(self) -> np.ndarray:
        if self.link.kind == "circle":
            return self.phi_nodes[:, None].copy()
        th, ph = np.meshgrid(self.theta_nodes, self.phi_nodes, indexing="ij")
        return np.stack([th.ravel(), ph.ravel()], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        if self.link.kind == "circle":
            return np.full(self.n_phi, 2.0 * np.pi * self.link.radius / self.n_phi)
        wz = _fejer_weights(self.n_theta)
        # Fejer weights integrate in z = cos(theta); the conformal factor carries the area element
        wt = wz * self.link.conformal_factor(self.theta_nodes)
        return np.repeat(wt, self.n_phi) * (2.0 * np.pi / self.n_phi)

    def interp_matrix(self, y) -> np.ndarray:
        """Cardinal weights ``C`` with ``f(y) = C @ f_nodes`` for points ``y`` of shape ``(M, dim)``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.link.kind == "circle":
            return _dirichlet(y[:, 0, None] - self.phi_nodes[None, :], self.n_phi)
        th, ph = y[:, 0], y[:, 1]
        nt2 = 2 * self.n_theta
        dt_plus = _dirichlet(th[:, None] - self.theta_nodes[None, :], nt2)
        dt_minus = _dirichlet(th[:, None] + self.theta_nodes[None, :], nt2)
        dp = _dirichlet(ph[:, None] - self.phi_nodes[None, :], self.n_phi)
        dp_shift = _dirichlet(ph[:, None] + np.pi - self.phi_nodes[None, :], self.n_phi)
        out = dt_plus[:, :, None] * dp[:, None, :] + dt_minus[:, :, None] * dp_shift[:, None, :]
        return out.reshape(y.shape[0], -1)

    def directions(self, n_dir: int = 8):
        """Unit direction angles and their weights on the unit sphere of ``T_y Y``."""
        if self.link.kind == "circle":
            return np.array([0.0, np.pi]), np.array([1.0, 1.0])
        if n_dir < 2 or n_dir % 2:
            raise ArgumentError("direction count must be even and at least 2")
        return 2.0 * np.pi * np.arange(n_dir) / n_dir, np.full(n_dir, 2.0 * np.pi / n_dir)

    def grid_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(repr((self.link, self.n_theta, self.n_phi)).encode())
        return h.hexdigest()[:16]
