"""Grid functions on the collar and the weighted X-ray transform.

A :class:`GridFunction` stores values on a tensor grid ``x_nodes x y_nodes``
as ``envelope(x) * profile``. The envelope encodes the decay class
(``exp(-C/(p x^{2p}))`` for the Gaussian class, 1 for the compact class), so
functions decaying like ``exp(-20/x^2)`` remain representable and are
interpolated without loss of relative accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .conic_manifold import ConicMetric
from .errors import ArgumentError, ContractViolation, DomainError
from .geodesic_flow import ARC, X, GeodesicPath, LaneSteps, TraceOptions, initial_states, integrate_lanes
from .link_geometry import LinkGrid, LinkState, flow_points


@dataclass(frozen=True)
class DecayClass:
    """``gaussian``: envelope ``exp(-C/(p x^{2p}))`` (C may be negative); ``compact``: support in ``[lo, hi]``."""

    kind: str
    a: float
    b: float

    @classmethod
    def gaussian(cls, C: float, p: float = 1.0) -> "DecayClass":
        if not p > 0:
            raise ArgumentError("p must be positive")
        return cls("gaussian", float(C), float(p))

    @classmethod
    def compact(cls, x_lo: float, x_hi: float) -> "DecayClass":
        if not 0 <= x_lo < x_hi:
            raise ArgumentError("compact class needs 0 <= x_lo < x_hi")
        return cls("compact", float(x_lo), float(x_hi))

    @property
    def tag(self) -> int:
        return 0 if self.kind == "gaussian" else 1

    def log_envelope(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            C, p = self.a, self.b
            return -C * x ** (-2.0 * p) / p
        return np.zeros_like(x)

    def log_envelope_dx(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            C, p = self.a, self.b
            return 2.0 * C * x ** (-2.0 * p - 1.0)
        return np.zeros_like(x)

    def shifted(self, dC: float) -> "DecayClass":
        if self.kind != "gaussian":
            raise ContractViolation("only Gaussian classes can be shifted")
        return DecayClass.gaussian(self.a + dC, self.b)


def log_nodes(x_min: float, x_max: float, nx: int) -> np.ndarray:
    """Strictly decreasing log-spaced nodes from ``x_max`` down to ``x_min``."""
    if not (0 < x_min < x_max) or nx < 2:
        raise ArgumentError("need 0 < x_min < x_max and nx >= 2")
    return np.geomspace(x_max, x_min, nx)


@lru_cache(maxsize=64)
def _x_spline(nodes: tuple) -> CubicSpline:
    lx = np.log(np.asarray(nodes)[::-1])
    return CubicSpline(lx, np.eye(len(nodes)), axis=0)


def x_interp_matrix(x_nodes: np.ndarray, x) -> np.ndarray:
    """Cardinal weights of the cubic spline in ``log x`` (columns follow ``x_nodes`` order)."""
    sp = _x_spline(tuple(float(v) for v in x_nodes))
    W = sp(np.log(np.asarray(x, dtype=float)))
    return np.ascontiguousarray(W[:, ::-1])


class GridFunction:
    """Function on the collar grid, stored as ``envelope(x_i) * profile[i, j]``."""

    def __init__(self, metric: ConicMetric, x_nodes, ygrid: LinkGrid, profile, decay: DecayClass):
        x_nodes = np.asarray(x_nodes, dtype=float)
        if x_nodes.ndim != 1 or x_nodes.size < 2 or np.any(np.diff(x_nodes) >= 0):
            raise ArgumentError("x_nodes must be strictly decreasing")
        if x_nodes[-1] <= 0 or x_nodes[0] > metric.x0 * (1 + 1e-12):
            raise ArgumentError("x_nodes must lie in (0, x0]")
        if ygrid.link != metric.link:
            raise ContractViolation("link grid and metric disagree")
        profile = np.array(profile, dtype=float)
        if profile.shape != (x_nodes.size, ygrid.size):
            raise ArgumentError(f"profile shape {profile.shape} != {(x_nodes.size, ygrid.size)}")
        self.metric = metric
        self.x_nodes = x_nodes
        self.ygrid = ygrid
        self.profile = profile
        self.decay = decay

    @classmethod
    def from_profile(cls, metric, x_nodes, ygrid, profile, decay) -> "GridFunction":
        return cls(metric, x_nodes, ygrid, profile, decay)

    @classmethod
    def from_values(cls, metric, x_nodes, ygrid, values, decay) -> "GridFunction":
        x_nodes = np.asarray(x_nodes, dtype=float)
        env = np.exp(decay.log_envelope(x_nodes))
        return cls(metric, x_nodes, ygrid, np.asarray(values, float) / env[:, None], decay)

    @classmethod
    def from_callable(cls, metric, x_nodes, ygrid, fn, decay) -> "GridFunction":
        """Sample ``fn(x, y)`` given as the profile (the envelope is applied on top)."""
        x_nodes = np.asarray(x_nodes, dtype=float)
        xx = np.repeat(x_nodes, ygrid.size)
        yy = np.tile(ygrid.nodes, (x_nodes.size, 1))
        prof = np.asarray(fn(xx, yy), dtype=float).reshape(x_nodes.size, ygrid.size)
        return cls(metric, x_nodes, ygrid, prof, decay)

    @property
    def shape(self):
        return self.profile.shape

    @property
    def values(self) -> np.ndarray:
        return self.profile * np.exp(self.decay.log_envelope(self.x_nodes))[:, None]

    def with_profile(self, profile, decay: DecayClass | None = None) -> "GridFunction":
        return GridFunction(self.metric, self.x_nodes, self.ygrid, profile, decay or self.decay)

    def decay_bound(self) -> float:
        """Constant ``M`` with ``|f| <= M * envelope`` on the nodes."""
        return float(np.max(np.abs(self.profile))) if self.profile.size else 0.0

    def support_mask(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = (x >= self.x_nodes[-1] * (1 - 1e-12)) & (x <= self.x_nodes[0] * (1 + 1e-12))
        if self.decay.kind == "compact":
            inside &= (x >= self.decay.a) & (x <= self.decay.b)
        return inside

    def eval_profile(self, x, y) -> np.ndarray:
        """Interpolated profile; zero outside the support convention."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(x.size, -1)
        if np.any(x > self.metric.x0 * (1 + 1e-12)) or np.any(~(x > 0)):
            raise DomainError(f"x must lie in (0, {self.metric.x0}]")
        out = np.zeros(x.size)
        m = self.support_mask(x)
        if np.any(m):
            CX = x_interp_matrix(self.x_nodes, x[m])
            CY = self.ygrid.interp_matrix(y[m])
            out[m] = np.einsum("mk,kj,mj->m", CX, self.profile, CY)
        return out

    def __call__(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        prof = self.eval_profile(x, y)
        with np.errstate(over="ignore"):
            return prof * np.exp(self.decay.log_envelope(x))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        if other.decay != self.decay:
            raise ContractViolation("grid functions must share a decay class")
        return self.with_profile(self.profile + other.profile)

    def __mul__(self, a: float) -> "GridFunction":
        return self.with_profile(a * self.profile)

    __rmul__ = __mul__


class AnalyticFunction:
    """Function given by a callable profile ``fn(x, y)`` on top of a decay-class envelope.

    Used as ground truth: transforms of an analytic function sample ``fn``
    along the geodesics instead of an interpolant.
    """

    def __init__(self, metric: ConicMetric, fn, decay: DecayClass):
        self.metric = metric
        self.fn = fn
        self.decay = decay

    def support_mask(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = (x > 0) & (x <= self.metric.x0 * (1 + 1e-12))
        if self.decay.kind == "compact":
            m &= (x >= self.decay.a) & (x <= self.decay.b)
        return m

    def eval_profile(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(x.size, -1)
        out = np.zeros(x.size)
        m = self.support_mask(x)
        if np.any(m):
            out[m] = np.asarray(self.fn(x[m], y[m]), dtype=float)
        return out

    def __call__(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        with np.errstate(over="ignore"):
            return self.eval_profile(x, y) * np.exp(self.decay.log_envelope(x))

    def on_grid(self, x_nodes, ygrid: LinkGrid) -> GridFunction:
        return GridFunction.from_callable(self.metric, x_nodes, ygrid, self.fn, self.decay)


def eval_function(f: GridFunction, q) -> float:
    """Evaluate ``f`` at the point ``q = (x, y)``."""
    x, y = q
    return float(f(np.array([x]), np.atleast_2d(np.asarray(y, float)))[0])


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------

_GFN_MAGIC = b"GFN1"


def write_gridfunction(f: GridFunction, path) -> None:
    """Little-endian dump: magic, dims, decay tag/params, x nodes, y nodes, row-major profile.

    The payload is the envelope-free profile; true values are ``exp(log_envelope(x)) * profile``
    from the header's decay class. Steep envelopes underflow doubles, so values alone would lose data.
    """
    ynodes = f.ygrid.nodes
    head = _GFN_MAGIC + struct.pack("<IIII", f.x_nodes.size, f.ygrid.size, ynodes.shape[1], f.decay.tag)
    head += struct.pack("<dd", f.decay.a, f.decay.b)
    body = (np.ascontiguousarray(f.x_nodes, "<f8").tobytes() + np.ascontiguousarray(ynodes, "<f8").tobytes()
            + np.ascontiguousarray(f.profile, "<f8").tobytes())
    Path(path).write_bytes(head + body)


def read_gridfunction(path, metric: ConicMetric) -> GridFunction:
    raw = Path(path).read_bytes()
    if raw[:4] != _GFN_MAGIC:
        raise ContractViolation("not a GFN1 file")
    nx, ny, yd, tag = struct.unpack_from("<IIII", raw, 4)
    a, b = struct.unpack_from("<dd", raw, 20)
    off = 36
    xn = np.frombuffer(raw, "<f8", nx, off).copy()
    off += 8 * nx
    yn = np.frombuffer(raw, "<f8", ny * yd, off).reshape(ny, yd)
    off += 8 * ny * yd
    vals = np.frombuffer(raw, "<f8", nx * ny, off).reshape(nx, ny)
    grid = LinkGrid.build(metric.link, ny)
    if not np.array_equal(grid.nodes, yn):
        raise ContractViolation("stored link nodes do not match the rebuilt grid")
    decay = DecayClass.gaussian(a, b) if tag == 0 else DecayClass.compact(a, b)
    return GridFunction.from_profile(metric, xn, grid, vals, decay)


# ---------------------------------------------------------------------------
# Forward transform
# ---------------------------------------------------------------------------


def forward(f: GridFunction, path: GeodesicPath, n_gl: int | None = None) -> float:
    """``int f(gamma(t)) / x(gamma(t)) dt`` by Gauss-Legendre panels on the accepted steps."""
    if not f.metric.same_geometry(path.metric):
        raise ContractViolation("grid function and path live on different metrics")
    st, y, w = path.quadrature(n_gl)
    xq = st[:, X]
    keep = xq <= f.metric.x0
    vals = f(xq[keep], y[keep])
    return float(np.sum(vals * w[keep] / xq[keep]))


@dataclass
class GeodesicFamily:
    """Geodesics through the tensor base points ``base_x x base_y`` with directions ``(lam_hat_a, omega_d)``.

    ``lam[i, a] = scale[i] * lam_hat[a]``. For the scalar warp the radial part
    of a path depends only on ``(x_i, lam)``, so one traced lane pair per
    ``(i, a)`` serves every link base point and direction.
    """

    metric: ConicMetric
    base_x: np.ndarray
    base_y: np.ndarray
    lam_hat: np.ndarray
    angles: np.ndarray
    scale: np.ndarray
    steps: LaneSteps | None
    opts: TraceOptions

    @property
    def shape(self):
        return (self.base_x.size, self.base_y.shape[0], self.lam_hat.size, self.angles.size)

    @property
    def lam(self) -> np.ndarray:
        return self.scale[:, None] * self.lam_hat[None, :]

    def __len__(self) -> int:
        return int(np.prod(self.shape))

    def path(self, i: int, j: int, a: int, d: int) -> GeodesicPath:
        st = LinkState.from_direction(self.metric.link, self.base_y[j], self.angles[d])
        pair = i * self.lam_hat.size + a
        m = (self.steps.lane // 2) == pair
        sl = slice(2 * pair, 2 * pair + 2)
        sub = LaneSteps(self.steps.lane[m] - 2 * pair, self.steps.h[m], self.steps.theta_end[m], self.steps.y0[m],
                        self.steps.Q[m], self.steps.rmode[m], self.steps.sign[m], self.steps.y_end[sl],
                        self.steps.stop[sl], self.steps.max_drift, 2, self.metric)
        return GeodesicPath(self.metric, float(self.base_x[i]), st, float(self.lam[i, a]), sub, self.opts)

    def quadrature_by_x(self, n_gl: int | None = None):
        """Yield ``(i, pair_index_within_i, states, dt_weights)`` for each base ``x_i``."""
        lane, st, w = self.steps.quadrature(n_gl or self.opts.n_gl)
        pair = lane // 2
        A = self.lam_hat.size
        order = np.argsort(pair, kind="stable")
        pair, st, w = pair[order], st[order], w[order]
        bounds = np.searchsorted(pair, np.arange(self.base_x.size + 1) * A)
        for i in range(self.base_x.size):
            sl = slice(bounds[i], bounds[i + 1])
            yield i, pair[sl] - i * A, st[sl], w[sl]

    def link_points(self, j: int, arc: np.ndarray) -> np.ndarray:
        """Link coordinates reached from base ``j`` along every direction, shape ``(D, M, dim)``."""
        link = self.metric.link
        states = [LinkState.from_direction(link, self.base_y[j], ang) for ang in self.angles]
        y0 = np.array([s.y for s in states])
        mu0 = np.array([s.mu_hat for s in states])
        ys, _ = flow_points(link, y0, mu0, np.broadcast_to(arc, (self.angles.size, arc.size)))
        return ys


def build_family(metric: ConicMetric, base_x, base_y, lam_hat, angles, scale, opts: TraceOptions | None = None,
                 x_stop=None, max_step=None, x_outer: float | None = None) -> GeodesicFamily:
    """Trace one forward/backward lane pair per ``(x_i, lam_hat_a)``.

    ``x_stop`` and ``max_step`` may be given per base ``x``. Lanes end when they
    first rise above ``x_outer`` (default ``metric.x0``).
    """
    opts = opts or TraceOptions()
    base_x = np.atleast_1d(np.asarray(base_x, dtype=float))
    base_y = np.asarray(base_y, dtype=float).reshape(-1, metric.link.dim)
    lam_hat = np.atleast_1d(np.asarray(lam_hat, dtype=float))
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    scale = np.broadcast_to(np.asarray(scale, dtype=float), base_x.shape).copy()
    if base_x.size == 0 or lam_hat.size == 0:
        return GeodesicFamily(metric, base_x, base_y, lam_hat, angles, scale, None, opts)
    metric.check_x(base_x)
    lam = scale[:, None] * lam_hat[None, :]
    if np.any(np.abs(lam) > 1):
        raise ContractViolation("family directions leave the unit level set (|lam| > 1)")

    def per_lane(v):
        if v is None:
            return None
        v = np.broadcast_to(np.asarray(v, dtype=float), base_x.shape)
        return np.repeat(np.repeat(v, lam_hat.size), 2)

    xb = np.repeat(np.repeat(base_x, lam_hat.size), 2)
    Y0 = initial_states(metric, xb, np.repeat(lam.ravel(), 2))
    sign = np.tile([1.0, -1.0], lam.size)
    steps = integrate_lanes(metric, Y0, sign, opts, x_stop=per_lane(x_stop), max_step=per_lane(max_step),
                            x_outer=x_outer)
    return GeodesicFamily(metric, base_x, base_y, lam_hat, angles, scale, steps, opts)


def _family_transform(f: GridFunction, family: GeodesicFamily, n_gl, relative: bool, floor: float | None):
    shape = family.shape
    if family.steps is None or len(family) == 0:
        return np.zeros(shape)
    if not f.metric.same_geometry(family.metric):
        raise ContractViolation("grid function and family live on different metrics")
    out = np.zeros(shape)
    A = family.lam_hat.size
    for i, pair, st, w in family.quadrature_by_x(n_gl):
        xq = st[:, X]
        keep = f.support_mask(xq) & (xq <= f.metric.x0)
        lx = f.decay.log_envelope(xq)
        ex = lx - f.decay.log_envelope(family.base_x[i]) if relative else lx
        if floor is not None:
            keep &= ex >= floor
        if not np.any(keep):
            continue
        xq, pair, w, ex, arc = xq[keep], pair[keep], w[keep], ex[keep], st[keep, ARC]
        CX = x_interp_matrix(f.x_nodes, xq)
        G = CX @ f.profile
        with np.errstate(over="ignore", under="ignore"):
            fac = w * np.exp(ex) / xq
        for j in range(shape[1]):
            ys = family.link_points(j, arc)
            for d in range(shape[3]):
                CY = f.ygrid.interp_matrix(ys[d])
                vals = np.einsum("mj,mj->m", G, CY) * fac
                out[i, j, :, d] = np.bincount(pair, weights=vals, minlength=A)
    return out


def forward_family(f: GridFunction, family: GeodesicFamily, n_gl: int | None = None) -> np.ndarray:
    """Forward transform along every path of the family, shape ``(n_x, n_y, n_lam_hat, n_dir)``."""
    return _family_transform(f, family, n_gl, relative=False, floor=None)


def forward_family_scaled(f: GridFunction, family: GeodesicFamily, n_gl: int | None = None,
                          floor: float | None = None) -> np.ndarray:
    """``forward_family / envelope(x_i)`` evaluated at exponent level (no underflow for steep envelopes).

    Contributions whose relative envelope exponent falls below ``floor`` are dropped.
    """
    return _family_transform(f, family, n_gl, relative=True, floor=floor)
