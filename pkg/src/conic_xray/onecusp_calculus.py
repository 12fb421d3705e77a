"""Model calculus on a periodic lattice and the principal symbol of the normal operator.

Quantization is left quantization with kernel ``e^{-i kappa (z - z')}`` and
frequency variable ``zeta = scale * kappa``; ``scale = h`` for the transverse
variable and ``h^{1/2}`` for tangential ones. With this sign ``Op(zeta)`` is
``i * scale * d/dz``.

The principal symbol at a collar point is the ``(t, lam_hat, omega)`` integral
of the rescaled phase ``xi (lam_hat t + alpha t^2) + eta.omega t`` against the
Gaussian damping ``e^{lam_hat t + alpha t^2}`` and the localizer. The ``t``
integral is a complex Gaussian and is done in closed form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conic_manifold import ConicMetric
from .errors import ArgumentError, DomainError, FoliationViolation
from .geodesic_flow import expansion_alpha
from .link_geometry import LinkState
from .normal_operator import Localizer

MAX_2D_SIDE = 64
DECAY_TOL = 1e-10

FIBER_XI = (0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0, 5.0, -5.0, 10.0, -10.0, 20.0, -20.0)
FIBER_ETA = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0)
FIBER_DIRS = 8


# ---------------------------------------------------------------------------
# Lattice quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParabolicSymbol:
    """Symbol ``a(z, zeta)`` with orders ``(m, l)``.

    ``fn`` is vectorized: ``z`` has shape ``(..., dim)`` (or ``(...)`` in 1D) and
    ``zeta`` broadcasts against it. ``polynomial`` marks differential-operator
    symbols, which grow in ``zeta`` and are exempt from the Nyquist decay check.
    """

    fn: Callable
    m: float = 0.0
    l: float = 0.0
    name: str = "a"
    polynomial: bool = False

    def __call__(self, z, zeta):
        return self.fn(z, zeta)

    def __mul__(self, other: "ParabolicSymbol") -> "ParabolicSymbol":
        f, g = self.fn, other.fn
        return ParabolicSymbol(lambda z, zeta: f(z, zeta) * g(z, zeta), self.m + other.m, self.l + other.l,
                               f"{self.name}*{other.name}", self.polynomial and other.polynomial)

    @classmethod
    def constant(cls, c: float = 1.0, dim: int = 1) -> "ParabolicSymbol":
        def fn(z, zeta):
            sz, sk = np.shape(z), np.shape(zeta)
            if dim > 1:
                sz, sk = sz[:-1], sk[:-1]
            return np.full(np.broadcast_shapes(sz, sk), c, dtype=complex)

        return cls(fn, 0.0, 0.0, f"{c:g}", polynomial=True)


@dataclass(frozen=True)
class Lattice:
    """Uniform periodic lattice with ``n`` points per axis on ``[lo, hi)``."""

    n: int = 256
    lo: float = -8.0
    hi: float = 8.0
    dim: int = 1

    def __post_init__(self):
        if self.n < 2 or not self.hi > self.lo:
            raise ArgumentError("lattice needs n >= 2 and hi > lo")
        if self.dim not in (1, 2):
            raise ArgumentError("lattices are 1D or 2D")
        if self.dim == 2 and self.n > MAX_2D_SIDE:
            raise ArgumentError(f"2D lattices are capped at {MAX_2D_SIDE} points per side")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.n

    @property
    def axis(self) -> np.ndarray:
        return self.lo + self.spacing * np.arange(self.n)

    @property
    def frequencies(self) -> np.ndarray:
        """Angular frequencies in FFT order (Nyquist ``-pi/spacing`` included once)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, self.spacing)

    @property
    def points(self) -> np.ndarray:
        if self.dim == 1:
            return self.axis
        zz = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([g.ravel() for g in zz], axis=-1)

    @property
    def size(self) -> int:
        return self.n**self.dim


def _freq_scales(h: float, scaling: str, dim: int) -> np.ndarray:
    """Per-axis factor between lattice frequency and symbol variable; the last axis is transverse."""
    if scaling == "transverse":
        s = np.full(dim, math.sqrt(h))
        s[-1] = h
        return s
    if scaling == "tangential":
        return np.full(dim, math.sqrt(h))
    raise ArgumentError(f"unknown scaling {scaling!r}")


def _check_decay(sym: ParabolicSymbol, lat: Lattice, scales: np.ndarray) -> None:
    if sym.polynomial:
        return
    zs = lat.axis
    if lat.dim == 1:
        z = zs
        k = lat.frequencies * scales[0]
        vals = np.abs(sym(z[:, None], k[None, :]))
        edge = np.abs(sym(z, np.full_like(z, np.pi / lat.spacing * scales[0])))
        edge = np.maximum(edge, np.abs(sym(z, np.full_like(z, -np.pi / lat.spacing * scales[0]))))
    else:
        Z = lat.points[::max(1, lat.size // 256)]
        k = lat.frequencies
        K = np.stack(np.meshgrid(k * scales[0], k * scales[1], indexing="ij"), axis=-1).reshape(-1, 2)
        vals = np.abs(sym(Z[:, None, :], K[None, :, :]))
        kmax = np.pi / lat.spacing
        ring = np.concatenate([np.stack([np.full_like(k, -kmax), k], -1), np.stack([k, np.full_like(k, -kmax)], -1)])
        ring = ring * scales
        edge = np.abs(sym(Z[:, None, :], ring[None, :, :]))
    peak = float(np.max(vals))
    worst = float(np.max(edge))
    if peak > 0 and worst > DECAY_TOL * peak:
        raise ArgumentError(f"symbol {sym.name!r} does not decay at the lattice cutoff "
                            f"(|a| at Nyquist = {worst:.3g}, peak {peak:.3g}); refine the lattice or raise h")


def quantize(sym: ParabolicSymbol, lattice: Lattice, h: float, scaling: str = "tangential") -> np.ndarray:
    """Dense matrix of ``Op_h(a)`` on lattice functions.

    ``(Op a) f (z_m) = N^{-dim} sum_k a(z_m, scale*kappa_k) sum_n e^{-i kappa_k (z_m - z_n)} f(z_n)``.
    """
    if not h > 0:
        raise ArgumentError("h must be positive")
    scales = _freq_scales(h, scaling, lattice.dim)
    _check_decay(sym, lattice, scales)
    n, lo = lattice.n, lattice.lo
    k = lattice.frequencies
    # row m is the inverse FFT of c_k = a(z_m, zeta_k) e^{-i kappa_k (z_m - lo)}
    if lattice.dim == 1:
        z = lattice.axis
        A = np.broadcast_to(np.asarray(sym(z[:, None], scales[0] * k[None, :]), dtype=complex), (n, n))
        return np.fft.ifft(A * np.exp(-1j * np.outer(z - lo, k)), axis=1)
    Z = lattice.points
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    Kz = np.stack([K1.ravel() * scales[0], K2.ravel() * scales[1]], axis=-1)
    out = np.empty((lattice.size, lattice.size), dtype=complex)
    for m in range(lattice.size):
        a = np.broadcast_to(np.asarray(sym(Z[m][None, :], Kz), dtype=complex), (n * n,)).reshape(n, n)
        ph = np.exp(-1j * ((Z[m, 0] - lo) * k[:, None] + (Z[m, 1] - lo) * k[None, :]))
        out[m] = np.fft.ifft2(a * ph).ravel()
    return out


@dataclass
class CompositionReport:
    """Operator-norm errors ``||Op(a) Op(b) - Op(ab)||_2`` for each ``h``."""

    hs: tuple
    errors: np.ndarray
    ratios: np.ndarray

    @property
    def err0(self) -> float:
        return float(self.errors[0])

    def within(self, lo: float = 0.5, hi: float = 0.9) -> bool:
        return bool(np.all((self.ratios >= lo) & (self.ratios <= hi)))


def compose_check(a: ParabolicSymbol, b: ParabolicSymbol, lattice: Lattice,
                  hs: Sequence[float] = (0.1, 0.05, 0.025), scaling: str = "tangential") -> CompositionReport:
    """Composition defect on the lattice; successive ratios ``err(h_{k+1}) / err(h_k)``."""
    hs = tuple(float(h) for h in hs)
    if not hs:
        raise ArgumentError("need at least one h")
    ab = a * b
    errs = []
    for h in hs:
        D = quantize(a, lattice, h, scaling) @ quantize(b, lattice, h, scaling) - quantize(ab, lattice, h, scaling)
        errs.append(float(np.linalg.norm(D, 2)))
    errs = np.array(errs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = errs[1:] / errs[:-1]
    return CompositionReport(hs, errs, ratios)


def symbol_estimate_constant(sym: ParabolicSymbol, z, zeta, dz: float = 1e-4) -> float:
    """Largest sampled ``|d_zeta a| / (<zeta>^{m-1} <z>^{l/2})`` over a 1D test lattice."""
    z = np.asarray(z, dtype=float)[:, None]
    k = np.asarray(zeta, dtype=float)[None, :]
    d = (sym(z, k + dz) - sym(z, k - dz)) / (2 * dz)
    w = (1 + k * k) ** ((sym.m - 1) / 2) * (1 + z * z) ** (sym.l / 4)
    return float(np.max(np.abs(d) / w))


# ---------------------------------------------------------------------------
# Principal symbol of the normal operator
# ---------------------------------------------------------------------------


def sphere_volume(k: int) -> float:
    """Volume of the unit sphere ``S^k``."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


def _omega_rule(link_dim: int, n: int):
    """Unit directions ``omega`` and weights on ``S^{link_dim - 1}``."""
    if link_dim == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    ang = 2.0 * math.pi * np.arange(n) / n
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1), np.full(n, 2.0 * math.pi / n)


def _eta_vector(eta, link_dim: int) -> np.ndarray:
    e = np.atleast_1d(np.asarray(eta, dtype=float))
    if e.size != link_dim:
        raise ArgumentError(f"eta must have {link_dim} component(s)")
    return e


def _alpha_at(metric: ConicMetric, x: float, y) -> float:
    state = LinkState.from_direction(metric.link, np.asarray(y, dtype=float), 0.0)
    return expansion_alpha(metric, x, state)


def principal_symbol(alpha: float, loc: Localizer, xi: float, eta, link_dim: int) -> complex:
    """Rescaled-limit symbol for a given ``alpha < 0``.

    The ``t`` integral of ``exp(-A t^2 + B t)`` with ``A = -(1 + i xi) alpha`` and
    ``B = (1 + i xi) lam_hat + i eta.omega`` equals ``sqrt(pi/A) exp(B^2/(4A))``.
    The remaining ``lam_hat`` integral uses Gauss-Legendre nodes and the
    ``omega`` integral the trapezoid rule, both sized to resolve the oscillation.
    """
    if not alpha < 0:
        raise FoliationViolation(f"alpha must be negative (got {alpha})")
    eta = _eta_vector(eta, link_dim)
    S = loc.support
    ne = float(np.linalg.norm(eta))
    a = abs(alpha)
    n_lam = int(64 + 4 * (abs(xi) * S * S / (2 * a) + ne * S / (2 * a)) / math.pi)
    n_om = 64 + 2 * int(math.ceil(ne * S / a + ne * ne / (4 * a)))
    t, w = np.polynomial.legendre.leggauss(n_lam)
    lam, w = S * t, S * w * loc(S * t)
    om, wo = _omega_rule(link_dim, n_om)
    proj = om @ eta
    A = -(1 + 1j * xi) * alpha
    B = (1 + 1j * xi) * lam[None, :] + 1j * proj[:, None]
    vals = np.sqrt(np.pi / A) * np.exp(B * B / (4 * A))
    return complex(wo @ (vals @ w))


def full_symbol_numeric(metric: ConicMetric, loc: Localizer, x: float, y, xi: float, eta,
                        alpha: float | None = None) -> complex:
    """Principal symbol at ``(x, y, xi, eta)`` normalized by ``x h``.

    ``eta`` holds components in an orthonormal frame of the link. ``alpha``
    defaults to the fitted value from a traced tangent geodesic.
    """
    link_dim = metric.link.dim
    if alpha is None:
        alpha = _alpha_at(metric, x, y)
    return principal_symbol(alpha, loc, xi, eta, link_dim)


def closed_form_symbol(alpha: float, xi: float, eta, link_dim: int, n_omega: int = 256) -> float:
    """``|alpha|^{-1} (1 + xi^2)^{-1/2} int exp((eta.omega)^2 / (2 alpha (1 + xi^2))) d omega``."""
    if not alpha < 0:
        raise DomainError("alpha must be negative")
    eta = _eta_vector(eta, link_dim)
    om, wo = _omega_rule(link_dim, n_omega)
    q = 1.0 + xi * xi
    integral = float(wo @ np.exp((om @ eta) ** 2 / (2 * alpha * q)))
    return integral / (abs(alpha) * math.sqrt(q))


def fiber_grid(xis: Sequence[float] = FIBER_XI, etas: Sequence[float] = FIBER_ETA, n_dir: int = FIBER_DIRS,
               link_dim: int = 2):
    """Rows ``(xi, |eta|, direction index, eta vector)`` of the standard fiber grid.

    ``eta = 0`` appears once (direction index 0).
    """
    rows = []
    for xi in xis:
        for e in etas:
            if link_dim == 1:
                dirs = [(0, np.array([e]))] if e == 0 else [(0, np.array([e])), (1, np.array([-e]))]
            else:
                ang = 2 * math.pi * np.arange(n_dir) / n_dir
                dirs = [(0, np.zeros(2))] if e == 0 else [(d, e * np.array([math.cos(a), math.sin(a)]))
                                                          for d, a in enumerate(ang)]
            for d, vec in dirs:
                rows.append((float(xi), float(e), int(d), vec))
    return rows


@dataclass
class SymbolSample:
    x: float
    y: np.ndarray
    xi: float
    eta: np.ndarray
    h: float | None
    value: complex


@dataclass
class EllipticityResult:
    """Minimum of ``|a| <(xi, eta)> / |a(0, 0)|`` over the scan."""

    passes: bool
    supported: bool
    min_normalized: float
    argmin: tuple
    threshold: float
    reference: float
    samples: list = field(default_factory=list, repr=False)
    note: str = ""

    def csv_rows(self):
        for s, (xi, e, d, _), nm in self.samples:
            yield (s.x, float(s.y[0]), xi, e, d, s.value.real, s.value.imag, nm)


CSV_COLUMNS = ("x", "y", "xi", "eta_mag", "eta_dir_index", "re", "im", "normalized_modulus")


def ellipticity_scan(metric: ConicMetric, loc: Localizer, x_grid: Sequence[float], fiber=None,
                     y=None, threshold: float = 0.05) -> EllipticityResult:
    """Scan the compensated symbol modulus over collar points and the fiber grid.

    The reference value is ``|a|`` at the origin of the fiber over the first ``x``.
    Circle links (surfaces) are flagged unsupported: the ellipticity argument
    at fiber infinity needs a link of dimension at least 2.
    """
    x_grid = [float(v) for v in x_grid]
    if not x_grid:
        raise ArgumentError("x grid must be nonempty")
    link_dim = metric.link.dim
    fiber = fiber if fiber is not None else fiber_grid(link_dim=link_dim)
    if not fiber:
        raise ArgumentError("fiber grid must be nonempty")
    y = np.asarray(y if y is not None else ([0.0] if link_dim == 1 else [math.pi / 2, 0.0]), dtype=float)
    samples = []
    ref = None
    best = (math.inf, None)
    for x in x_grid:
        alpha = _alpha_at(metric, x, y)
        if ref is None:
            ref = abs(principal_symbol(alpha, loc, 0.0, np.zeros(link_dim), link_dim))
        for row in fiber:
            xi, e, d, vec = row
            val = principal_symbol(alpha, loc, xi, vec, link_dim)
            nm = abs(val) * math.sqrt(1 + xi * xi + e * e) / ref
            samples.append((SymbolSample(x, y, xi, vec, None, val), row, nm))
            if nm < best[0]:
                best = (nm, (x, xi, e, d))
    supported = link_dim >= 2
    passes = supported and best[0] > threshold
    note = "" if supported else "surface links: ellipticity at fiber infinity is not covered; exploratory only"
    return EllipticityResult(passes, supported, float(best[0]), best[1], threshold, float(ref), samples, note)


def write_scan_csv(result: EllipticityResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for row in result.csv_rows():
            w.writerow(["%.17g" % v if isinstance(v, float) else v for v in row])
