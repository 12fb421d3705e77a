"""Localizer, exponential weights and the conjugated normal operator ``e^{-F/h} L chi I e^{F/h}``.

The operator is discretized in profile coordinates: if ``v = env_v * g`` then
``A v = env_v * (M g)`` with ``M`` built from exponents combined at log level,
so neither ``e^{F/h}`` nor a steep envelope is ever exponentiated on its own.
For axisymmetric links the rows of ``M`` for the link nodes on one meridian
determine all others by a cyclic shift in the azimuth.
"""

from __future__ import annotations

import hashlib
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .conic_manifold import ConicMetric
from .errors import ArgumentError, CertificationError, ContractViolation, SizeError
from .geodesic_flow import ARC, X, TraceOptions, alpha_closed_form
from .link_geometry import LinkGrid
from .xray_transform import AnalyticFunction, DecayClass, GeodesicFamily, GridFunction, build_family, x_interp_matrix

EXP_FLOOR = -36.0
STOP_LEVEL = -40.0
DEFAULT_CAP = 4096
NOP_MAGIC = b"NOP1"

_AUDITS: list = []


class ExponentAudit:
    """Largest argument handed to ``exp`` when forming kernel weights."""

    def __init__(self):
        self.max_arg = -math.inf
        self.calls = 0

    def record(self, arg) -> None:
        arg = np.asarray(arg)
        if arg.size:
            self.max_arg = max(self.max_arg, float(np.max(arg)))
        self.calls += 1


@contextmanager
def exponent_audit():
    """Collect every kernel exponent evaluated inside the block."""
    audit = ExponentAudit()
    _AUDITS.append(audit)
    try:
        yield audit
    finally:
        _AUDITS.remove(audit)


def _kernel_exp(arg):
    for audit in _AUDITS:
        audit.record(arg)
    return np.exp(arg)
_NOP_HEADER = struct.Struct("<4sIddI16s")


def _smooth_zero(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = t > 0
    out[m] = np.exp(-1.0 / t[m])
    return out


def bump(u):
    """Smooth even cutoff: 1 on ``[-1/2, 1/2]``, 0 outside ``(-1, 1)``."""
    a = np.abs(np.asarray(u, dtype=float))
    g1, g2 = _smooth_zero(1.0 - a), _smooth_zero(a - 0.5)
    return g1 / (g1 + g2)


def smooth_step(u):
    """Monotone smooth step: 0 for ``u <= 0``, 1 for ``u >= 1``, and its derivative."""
    u = np.asarray(u, dtype=float)
    g1, g2 = _smooth_zero(u), _smooth_zero(1.0 - u)
    s = g1 / (g1 + g2)
    m = (u > 0) & (u < 1)
    ds = np.zeros_like(u)
    um = u[m]
    d1, d2 = g1[m] / um**2, -g2[m] / (1.0 - um) ** 2
    ds[m] = (d1 * g2[m] - g1[m] * d2) / (g1[m] + g2[m]) ** 2
    return s, ds


@dataclass(frozen=True)
class Localizer:
    """Even cutoff profile on ``[-support, support]``.

    ``gaussian``: ``exp(s^2/(2 alpha_ref)) * bump(s/support)`` with ``chi(0) = 1``.
    ``centered_null``: ``s^4 exp(-s^2) * bump(s/support)``, which vanishes at 0;
    it serves as the negative control for the ellipticity scan.
    """

    profile: str = "gaussian"
    support: float = 4.0
    alpha_ref: float = -0.5

    def __post_init__(self):
        if self.profile not in ("gaussian", "centered_null"):
            raise ArgumentError(f"unknown localizer profile {self.profile!r}")
        if not self.support > 0:
            raise ArgumentError("support radius must be positive")
        if not self.alpha_ref < 0:
            raise ArgumentError("alpha_ref must be negative")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        cut = bump(s / self.support)
        if self.profile == "gaussian":
            return np.exp(s * s / (2.0 * self.alpha_ref)) * cut
        return s**4 * np.exp(-s * s) * cut


@dataclass(frozen=True)
class WeightSpec:
    """Exponential weight ``F``, applied as ``e^{F/h}``.

    ``one_cusp``: ``F(x) = -1/(2p x^{2p})``.
    ``combined``: ``-1/(2x^2)`` near 0 blended into ``1/(x_bar - x)`` over
    ``[0.3 x_bar, 0.7 x_bar]``; since the second piece dominates the first
    the blend keeps ``F' > 0`` on ``(0, x_bar)``.
    """

    kind: str = "one_cusp"
    p: float = 1.0
    x_bar: float = 0.5

    def __post_init__(self):
        if self.kind not in ("one_cusp", "combined"):
            raise ArgumentError(f"unknown weight kind {self.kind!r}")
        if not self.p > 0 or not self.x_bar > 0:
            raise ArgumentError("p and x_bar must be positive")
        if self.kind == "combined" and self.p != 1.0:
            raise ArgumentError("the combined weight uses p = 1")

    @classmethod
    def one_cusp(cls, p: float = 1.0) -> "WeightSpec":
        return cls("one_cusp", float(p))

    @classmethod
    def combined(cls, x_bar: float) -> "WeightSpec":
        return cls("combined", 1.0, float(x_bar))

    @property
    def code(self) -> int:
        return 0 if self.kind == "one_cusp" else 1

    @property
    def x_limit(self) -> float:
        """Upper end of the region where ``F`` is finite."""
        return math.inf if self.kind == "one_cusp" else self.x_bar

    def _parts(self, x):
        x = np.asarray(x, dtype=float)
        F0, dF0 = -0.5 / x**2, x**-3.0
        if self.kind == "one_cusp":
            p = self.p
            return -(x ** (-2.0 * p)) / (2.0 * p), x ** (-2.0 * p - 1.0)
        a, b = 0.3 * self.x_bar, 0.7 * self.x_bar
        beta, dbeta = smooth_step((x - a) / (b - a))
        dbeta = dbeta / (b - a)
        with np.errstate(divide="ignore", invalid="ignore"):
            gap = self.x_bar - x
            F1 = np.where(gap > 0, 1.0 / gap, np.inf)
            dF1 = np.where(gap > 0, 1.0 / gap**2, np.inf)
            F = np.where(beta == 0, F0, (1 - beta) * F0 + beta * F1)
            dF = np.where(beta == 0, dF0, (1 - beta) * dF0 + beta * dF1 + dbeta * (F1 - F0))
        return F, dF

    def F(self, x):
        return self._parts(x)[0]

    def dF(self, x):
        return self._parts(x)[1]

    def exponent(self, x_base: float, x):
        """``F(x) - F(x_base)``, finite wherever both are."""
        return self.F(x) - self.F(x_base)


def localizer_scale(weight: WeightSpec, metric: ConicMetric, h: float, x):
    """Factor ``s(x)`` with ``lam = s * lam_hat``.

    ``one_cusp``: ``h^{1/2} x^p``. ``combined``: ``h^{1/2} |alpha|^{1/2} / (x F'(x))^{1/2}``.
    """
    if not h > 0:
        raise ArgumentError("h must be positive")
    x = np.asarray(x, dtype=float)
    if weight.kind == "one_cusp":
        return math.sqrt(h) * x**weight.p
    alpha = np.abs(alpha_closed_form(metric, x))
    return np.sqrt(h * alpha / (x * weight.dF(x)))


def localizer_value(loc: Localizer, x, lam, omega=None, h: float = 0.1, weight: WeightSpec | None = None,
                    metric: ConicMetric | None = None):
    """``chi(lam / s(x))``.

    ``omega`` is accepted for interface symmetry; for the scalar warp ``alpha``
    does not depend on it. The combined weight needs ``metric`` for ``alpha``.
    """
    if not h > 0:
        raise ArgumentError("h must be positive")
    weight = weight or WeightSpec.one_cusp()
    if weight.kind == "combined" and metric is None:
        raise ArgumentError("the combined localizer needs the metric")
    s = localizer_scale(weight, metric, h, x)
    return loc(np.asarray(lam, dtype=float) / s)


def lam_hat_rule(n: int, support: float):
    """Gauss-Legendre rule on ``[-S, S]`` split into two panels at 0.

    At grid-edge base points the contribution of a direction has a kink at
    ``lam_hat = 0`` (the segment inside the grid shrinks to a point there).
    """
    if n < 2 or n % 2:
        raise ArgumentError("the lam_hat rule needs an even node count")
    t, w = np.polynomial.legendre.leggauss(n // 2)
    half = 0.5 * support
    nodes = np.concatenate([half * (t - 1.0), half * (t + 1.0)])
    return nodes, np.concatenate([half * w, half * w])


@dataclass(frozen=True)
class CollarGrid:
    """Tensor grid ``x_nodes x ygrid`` with the decay class of the unknowns."""

    x_nodes: np.ndarray
    ygrid: LinkGrid
    decay: DecayClass

    @property
    def size(self) -> int:
        return int(self.x_nodes.size * self.ygrid.size)

    def grid_hash(self) -> str:
        hs = hashlib.sha256()
        hs.update(self.ygrid.grid_hash().encode())
        hs.update(np.ascontiguousarray(self.x_nodes, dtype="<f8").tobytes())
        hs.update(repr(self.decay).encode())
        return hs.hexdigest()[:16]


def require_certificate(metric: ConicMetric) -> None:
    cert = metric.certificate
    if cert is None or not cert.passes:
        raise CertificationError("metric has no passing foliation/conjugate-point certificate; run certify() first")


@dataclass
class OperatorOptions:
    """Quadrature controls for the discretized operator."""

    n_lam: int | None = None
    n_dir: int = 8
    n_gl: int = 4
    step_factor: float = 0.5
    max_step: float = 0.1
    trace: TraceOptions = field(default_factory=TraceOptions)


class NormalOperator:
    """Discretized ``A_h`` acting on profiles of one decay class.

    ``matrix()`` maps the profile of ``v`` to the profile of ``A_h v`` in the
    same decay class.
    """

    def __init__(self, metric: ConicMetric, weight: WeightSpec, loc: Localizer, h: float, grid: CollarGrid,
                 options: OperatorOptions | None = None):
        if not h > 0:
            raise ArgumentError("h must be positive")
        require_certificate(metric)
        xn = np.asarray(grid.x_nodes, dtype=float)
        if xn[0] >= weight.x_limit:
            raise ArgumentError("grid reaches the artificial boundary of the combined weight")
        self.metric, self.weight, self.loc, self.h, self.grid = metric, weight, loc, float(h), grid
        self.options = options or OperatorOptions()
        o = self.options
        n_lam = o.n_lam or int(round(8 * loc.support))
        self.lam_hat, wt = lam_hat_rule(n_lam, loc.support)
        self.lam_weights = wt * loc(self.lam_hat)
        self.angles, self.dir_weights = grid.ygrid.directions(o.n_dir)
        self.scale = np.asarray(localizer_scale(weight, metric, self.h, xn), dtype=float)
        self._family: GeodesicFamily | None = None
        self._blocks: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.grid.size

    def _total_exponent(self, i: int, xq):
        xi = self.grid.x_nodes[i]
        dec = self.grid.decay
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self.weight.exponent(xi, xq) / self.h + dec.log_envelope(xq) - dec.log_envelope(xi)

    def _stop_and_step(self):
        """Per-base lower cutoff ``x`` and step cap from the local Gaussian width."""
        xn, dec = self.grid.x_nodes, self.grid.decay
        lo = xn[-1]
        if dec.kind == "compact":
            lo = max(lo, dec.a)
        lo *= 1 - 1e-9
        stops, caps = np.empty(xn.size), np.empty(xn.size)
        alpha = np.abs(alpha_closed_form(self.metric, xn))
        for i, xi in enumerate(xn):
            g = lambda x: float(self._total_exponent(i, x)) - STOP_LEVEL
            stops[i] = brentq(g, lo, xi, xtol=1e-14 * xi) if lo < xi and g(lo) < 0 < g(xi) else lo
            rate = self.weight.dF(xi) / self.h + dec.log_envelope_dx(xi)
            floor = 0.5 * self.weight.dF(xi) / self.h
            kappa = max(rate, floor) * alpha[i] * xi
            caps[i] = min(self.options.step_factor / math.sqrt(kappa), self.options.max_step)
        return stops, caps

    def _base_nodes(self) -> np.ndarray:
        """Link node indices whose rows are computed explicitly."""
        yg = self.grid.ygrid
        if yg.link.axisymmetric:
            return np.arange(yg.n_theta) * yg.n_phi
        return np.arange(yg.size)

    @property
    def family(self) -> GeodesicFamily:
        """Traced geodesics through every grid node (lane pairs shared across link nodes)."""
        if self._family is None:
            stops, caps = self._stop_and_step()
            opts = replace(self.options.trace, n_gl=self.options.n_gl)
            xn = self.grid.x_nodes
            fam = build_family(self.metric, xn, self.grid.ygrid.nodes, self.lam_hat, self.angles, self.scale,
                               opts, x_stop=stops, max_step=caps, x_outer=float(xn[0]))
            self._family = fam
        return self._family

    def lane_weights(self, i: int, pair, states, w):
        """Quadrature weight of each sample on lanes of base ``x_i`` (without the link factor)."""
        xq = states[:, X]
        total = self._total_exponent(i, xq)
        keep = self._support(xq) & np.isfinite(total) & (total >= EXP_FLOOR)
        with np.errstate(over="ignore", under="ignore"):
            wt = np.where(keep, w * _kernel_exp(np.where(keep, total, 0.0)) / xq, 0.0)
        wt *= self.lam_weights[pair] * self.scale[i]
        return keep, wt

    def _support(self, xq):
        xn, dec = self.grid.x_nodes, self.grid.decay
        m = (xq >= xn[-1] * (1 - 1e-12)) & (xq <= xn[0] * (1 + 1e-12))
        if dec.kind == "compact":
            m &= (xq >= dec.a) & (xq <= dec.b)
        return m

    def blocks(self) -> np.ndarray:
        """Rows for base link nodes, shape ``(nx, n_base, nx, ny)``."""
        if self._blocks is not None:
            return self._blocks
        fam = self.family
        yg, xn = self.grid.ygrid, self.grid.x_nodes
        bases = self._base_nodes()
        out = np.zeros((xn.size, bases.size, xn.size, yg.size))
        for i, pair, st, w in fam.quadrature_by_x():
            keep, wt = self.lane_weights(i, pair, st, w)
            if not np.any(keep):
                continue
            arc = st[keep, ARC]
            CXw = np.ascontiguousarray((x_interp_matrix(xn, st[keep, X]) * wt[keep, None]).T)
            for b, jb in enumerate(bases):
                ys = fam.link_points(jb, arc)
                acc = np.zeros((xn.size, yg.size))
                for d in range(self.angles.size):
                    acc += self.dir_weights[d] * (CXw @ yg.interp_matrix(ys[d]))
                out[i, b] = acc
        self._blocks = out
        return out

    def family_data(self, f, floor: float = EXP_FLOOR) -> np.ndarray:
        """Transforms of ``f`` along the operator's family divided by ``envelope_f(x_i)``.

        Shape ``(nx, ny, n_lam, n_dir)``; samples outside the grid range or with
        relative envelope exponent below ``floor`` are dropped, as in the matrix.
        ``f`` is a :class:`GridFunction` on this grid or an :class:`AnalyticFunction`.
        """
        analytic = isinstance(f, AnalyticFunction)
        if not analytic:
            if not isinstance(f, GridFunction):
                raise ArgumentError("f must be a GridFunction or an AnalyticFunction")
            if f.ygrid != self.grid.ygrid or not np.array_equal(f.x_nodes, self.grid.x_nodes):
                raise ContractViolation("grid function does not live on the operator grid")
        if not f.metric.same_geometry(self.metric):
            raise ContractViolation("function lives on a different metric")
        fam = self.family
        yg, xn = self.grid.ygrid, self.grid.x_nodes
        bases = self._base_nodes()
        sym = yg.link.axisymmetric
        nshift = yg.n_phi if sym else 1
        A, D = self.lam_hat.size, self.angles.size
        out = np.zeros((xn.size, yg.size, A, D))
        for i, pair, st, w in fam.quadrature_by_x():
            xq = st[:, X]
            with np.errstate(over="ignore", invalid="ignore"):
                ex = f.decay.log_envelope(xq) - f.decay.log_envelope(xn[i])
            keep = self._support(xq) & f.support_mask(xq) & np.isfinite(ex) & (ex >= floor)
            if not np.any(keep):
                continue
            xq, pair, arc = xq[keep], pair[keep], st[keep, ARC]
            fac = w[keep] * _kernel_exp(ex[keep]) / xq
            if not analytic:
                Gq = x_interp_matrix(xn, xq) @ f.profile
            for b, jb in enumerate(bases):
                ys = fam.link_points(jb, arc)
                for d in range(D):
                    if not analytic:
                        CY = yg.interp_matrix(ys[d])
                    for m in range(nshift):
                        if analytic:
                            yy = ys[d].copy()
                            yy[:, -1] += yg.phi_nodes[m] if sym else 0.0
                            vals = f.eval_profile(xq, yy)
                        elif sym:
                            G = np.roll(Gq.reshape(-1, yg.n_theta, yg.n_phi), -m, axis=-1).reshape(Gq.shape)
                            vals = np.einsum("qj,qj->q", CY, G)
                        else:
                            vals = np.einsum("qj,qj->q", CY, Gq)
                        j = jb + m
                        out[i, j, :, d] = np.bincount(pair, weights=vals * fac, minlength=A)
        return out

    def matrix(self) -> np.ndarray:
        """Dense ``N x N`` matrix on profiles, row/column index ``i * ny + j``."""
        B = self.blocks()
        yg = self.grid.ygrid
        nx, ny = self.grid.x_nodes.size, yg.size
        if not yg.link.axisymmetric:
            return B.reshape(nx * ny, nx * ny)
        nt, nphi = yg.n_theta, yg.n_phi
        M = np.empty((nx, nt, nphi, nx, nt, nphi))
        Bv = B.reshape(nx, nt, nx, nt, nphi)
        for m in range(nphi):
            M[:, :, m] = np.roll(Bv, m, axis=-1)
        return M.reshape(nx * ny, nx * ny)

    def apply_profile(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if g.shape != (self.grid.x_nodes.size, self.grid.ygrid.size):
            raise ArgumentError("profile shape does not match the grid")
        B = self.blocks()
        yg = self.grid.ygrid
        if not yg.link.axisymmetric:
            return np.einsum("ijkl,kl->ij", B, g)
        nx, nt, nphi = g.shape[0], yg.n_theta, yg.n_phi
        G = g.reshape(nx, nt, nphi)
        Bv = B.reshape(nx, nt, nx, nt, nphi)
        # row (i, l, m) pairs with column (k, l', m'+m); an FFT-free loop is cheap at these sizes
        out = np.empty((nx, nt, nphi))
        for m in range(nphi):
            out[:, :, m] = np.einsum("iakbc,kbc->ia", Bv, np.roll(G, -m, axis=-1))
        return out.reshape(nx, nt * nphi)


def _grid_of(v: GridFunction) -> CollarGrid:
    return CollarGrid(v.x_nodes, v.ygrid, v.decay)


def apply_normal(metric: ConicMetric, weight: WeightSpec, loc: Localizer, h: float, v: GridFunction,
                 options: OperatorOptions | None = None, operator: NormalOperator | None = None) -> GridFunction:
    """``A_h v`` as a grid function in the decay class of ``v``.

    Pass ``operator`` to reuse traced geodesics across calls on the same grid.
    """
    require_certificate(metric)
    if not np.all(np.isfinite(v.profile)):
        raise ArgumentError("input grid function has non-finite values")
    if not v.metric.same_geometry(metric):
        raise ContractViolation("grid function lives on a different metric")
    op = operator or NormalOperator(metric, weight, loc, h, _grid_of(v), options)
    return v.with_profile(op.apply_profile(v.profile))


def assemble_matrix(metric: ConicMetric, weight: WeightSpec, loc: Localizer, h: float, grid: CollarGrid,
                    cap: int = DEFAULT_CAP, options: OperatorOptions | None = None) -> np.ndarray:
    """Dense matrix of ``A_h`` on nodal profile coefficients."""
    if grid.size > cap:
        raise SizeError(f"grid size {grid.size} exceeds the assembly cap {cap}; use apply_normal (matrix-free)")
    return NormalOperator(metric, weight, loc, h, grid, options).matrix()


def write_matrix(path, matrix: np.ndarray, h: float, weight: WeightSpec, grid: CollarGrid) -> None:
    """Write ``NOP1``: magic, N, h, p, weight code, grid hash, then row-major little-endian float64."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    N = m.shape[0]
    if m.shape != (N, N):
        raise ArgumentError("matrix must be square")
    head = _NOP_HEADER.pack(NOP_MAGIC, N, float(h), float(weight.p), weight.code, grid.grid_hash().encode())
    Path(path).write_bytes(head + m.tobytes())


def read_matrix(path):
    """Return ``(matrix, header_dict)`` from a ``NOP1`` file."""
    raw = Path(path).read_bytes()
    if len(raw) < _NOP_HEADER.size:
        raise ArgumentError("file too short for a NOP1 header")
    magic, N, h, p, code, gh = _NOP_HEADER.unpack_from(raw)
    if magic != NOP_MAGIC:
        raise ArgumentError("not a NOP1 file")
    data = np.frombuffer(raw, dtype="<f8", offset=_NOP_HEADER.size)
    if data.size != N * N:
        raise ArgumentError("NOP1 payload size does not match N")
    return data.reshape(N, N).copy(), {"N": N, "h": h, "p": p, "weight_code": code, "grid_hash": gh.decode()}
