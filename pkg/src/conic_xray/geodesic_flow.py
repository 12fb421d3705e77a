"""Bicharacteristics of the rescaled Hamilton field and foliation certificates.

For a scalar warp the flow reduces exactly to the six quantities

    x, tau, rho = |mu|_{h0}, R (link arclength), t, r = int |mu|_{h(x)} dt

because the link component always travels along an ``h0`` geodesic; the link
point is recovered afterwards as ``link_flow(y, R)``. The reduced system is
integrated lane-by-lane with a vectorised Dormand-Prince 4(5) pair, so many
initial conditions advance together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import RK45, solve_ivp
from scipy.optimize import brentq

from .conic_manifold import ConicMetric, ScCovector
from .errors import ArgumentError, ContractViolation, DomainError, FoliationViolation, IntegrationFailure
from .link_geometry import LinkState, flow_points, jacobi_field

X, TAU, RHO, ARC, T, R = range(6)
NSTATE = 6

_A = np.asarray(RK45.A, dtype=float)
_B = np.asarray(RK45.B, dtype=float)
_C = np.asarray(RK45.C, dtype=float)
_E = np.asarray(RK45.E, dtype=float)
_P = np.asarray(RK45.P, dtype=float)


@dataclass(frozen=True)
class TraceOptions:
    """Integrator settings; ``x_min=None`` means ``1e-3 * metric.x0``."""

    rtol: float = 1e-10
    atol: float = 1e-12
    x_min: float | None = None
    max_param: float = 60.0
    max_step: float = math.inf
    radial_threshold: float = 0.05
    project: bool = True
    max_steps: int = 200_000
    n_gl: int = 4

    def resolve_x_min(self, metric: ConicMetric) -> float:
        return self.x_min if self.x_min is not None else 1e-3 * metric.x0


# ---------------------------------------------------------------------------
# Batched Dormand-Prince
# ---------------------------------------------------------------------------


def _reduced_rhs(metric: ConicMetric, Y: np.ndarray, rmode: np.ndarray, sign: np.ndarray) -> np.ndarray:
    x, tau, rho = Y[:, X], Y[:, TAU], Y[:, RHO]
    F = np.empty_like(Y)
    F[:, X] = x * tau
    F[:, RHO] = tau * rho
    F[:, T] = 1.0
    if metric.is_exact_cone:
        F[:, TAU] = -rho * rho
        F[:, ARC] = rho
        F[:, R] = rho
        mu = rho
    else:
        c = metric.c(x)
        mu = rho / np.sqrt(c)
        F[:, TAU] = -rho * rho * metric.radial_damping(x)
        F[:, ARC] = rho / c
        F[:, R] = mu
    if rmode.any():
        sign = sign * np.where(rmode, 1.0 / np.where(rmode, mu, 1.0), 1.0)
    F *= sign[:, None]
    return F


def _project(metric: ConicMetric, Y: np.ndarray) -> np.ndarray:
    G = Y[:, TAU] ** 2 + Y[:, RHO] ** 2 / metric.c(Y[:, X])
    s = 1.0 / np.sqrt(G)
    Y[:, TAU] *= s
    Y[:, RHO] *= s
    return G


@dataclass
class LaneSteps:
    """Accepted steps of a batch of lanes, sorted by lane then by step order.

    ``Q`` holds the dense-output coefficients so that the state inside a step
    is ``y0 + h * Q @ [th, th^2, th^3, th^4]`` for ``th`` in ``[0, theta_end]``.
    """

    lane: np.ndarray
    h: np.ndarray
    theta_end: np.ndarray
    y0: np.ndarray
    Q: np.ndarray
    rmode: np.ndarray
    sign: np.ndarray
    y_end: np.ndarray
    stop: np.ndarray
    max_drift: float
    n_lanes: int
    metric: ConicMetric

    def dense(self, idx, theta):
        theta = np.asarray(theta, dtype=float)
        pw = np.stack([theta, theta**2, theta**3, theta**4], axis=-1)
        return self.y0[idx] + self.h[idx, None] * np.einsum("...dk,...k->...d", self.Q[idx], pw)

    def quadrature(self, n_gl: int = 4):
        """Gauss-Legendre nodes on every step for integrals ``int g dt``.

        Returns ``(lane, states, weights)`` with ``states`` of shape ``(M, 6)``.
        """
        xg, wg = leggauss(n_gl)
        th = 0.5 * (xg[None, :] + 1.0) * self.theta_end[:, None]
        w = 0.5 * wg[None, :] * self.theta_end[:, None] * self.h[:, None]
        pw = np.stack([th, th**2, th**3, th**4], axis=-1)
        st = self.y0[:, None, :] + self.h[:, None, None] * np.einsum("sdk,sgk->sgd", self.Q, pw)
        mu = st[..., RHO] / np.sqrt(self.metric.c(st[..., X]))
        dtds = np.where(self.rmode[:, None], 1.0 / np.where(self.rmode[:, None], mu, 1.0), 1.0)
        w = w * dtds
        lane = np.repeat(self.lane, n_gl)
        return lane, st.reshape(-1, NSTATE), w.reshape(-1)


_EXCURSION_THETA = np.linspace(0.125, 1.0, 8)
_EXCURSION_POW = _EXCURSION_THETA[:, None] ** np.arange(1, 5)[None, :]


def integrate_lanes(metric: ConicMetric, Y0: np.ndarray, sign: np.ndarray, opts: TraceOptions,
                    x_stop=None, x_outer: float | None = None, max_step=None) -> LaneSteps:
    """Advance each lane of the reduced flow until a stop condition fires.

    Parameters
    ----------
    Y0 : ndarray, shape (L, 6)
    sign : ndarray, shape (L,)
        +1 integrates forward in ``t``, -1 backward.
    x_stop : float or ndarray, optional
        Per-lane lower ``x`` threshold (default ``opts.x_min``).
    max_step : float or ndarray, optional
        Per-lane step cap overriding ``opts.max_step``.
    """
    Y = np.array(Y0, dtype=float)
    L = Y.shape[0]
    sign = np.asarray(sign, dtype=float)
    xs = np.broadcast_to(np.asarray(opts.resolve_x_min(metric) if x_stop is None else x_stop, float), (L,)).copy()
    x_out = metric.x0 if x_outer is None else x_outer
    max_drift = 0.0
    if opts.project and L:
        _project(metric, Y)
    active = np.ones(L, dtype=bool)
    stop = np.full(L, "", dtype=object)
    y_end = Y.copy()
    done_at_start = (Y[:, X] < xs) | (Y[:, X] > x_out * (1 + 1e-12))
    active[done_at_start] = False
    stop[done_at_start] = "start_outside"
    hmax = np.broadcast_to(np.asarray(opts.max_step if max_step is None else max_step, float), (L,)).copy()
    h = np.minimum(np.full(L, 1e-2), hmax)
    recs = []
    n_iter = 0
    K = np.empty((7, L, NSTATE))
    while np.any(active):
        n_iter += 1
        if n_iter > opts.max_steps:
            raise IntegrationFailure("step budget exhausted", Y[active][0])
        ia = np.nonzero(active)[0]
        y = Y[ia]
        hh = h[ia]
        sg = sign[ia]
        mu = y[:, RHO] / np.sqrt(metric.c(y[:, X]))
        rm = (mu > 0) & (mu < opts.radial_threshold)
        k = K[:, : ia.size]
        k[0] = _reduced_rhs(metric, y, rm, sg)
        for s in range(1, 6):
            dy = np.einsum("j,jld->ld", _A[s, :s], k[:s]) * hh[:, None]
            k[s] = _reduced_rhs(metric, y + dy, rm, sg)
        y_new = y + hh[:, None] * np.einsum("j,jld->ld", _B, k[:6])
        k[6] = _reduced_rhs(metric, y_new, rm, sg)
        err_vec = hh[:, None] * np.einsum("j,jld->ld", _E, k)
        scale = opts.atol + opts.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / scale) ** 2, axis=1))
        bad = ~np.isfinite(err) | (y_new[:, X] <= 0)
        err = np.where(bad, np.inf, err)
        acc = err <= 1.0
        fac = np.where(err == 0, 5.0, np.clip(0.9 * np.where(err > 0, err, 1.0) ** -0.2, 0.2, 5.0))
        fac = np.where(bad, 0.2, fac)
        fac = np.where(acc, fac, np.minimum(fac, 1.0))
        newh = np.minimum(hh * fac, hmax[ia])
        under = (~acc) & (newh < 1e-14 * np.maximum(1.0, np.abs(y[:, T])))
        if np.any(under):
            j = np.nonzero(under)[0][0]
            raise IntegrationFailure("step size underflow", y[j].copy())
        h[ia] = newh
        if not np.any(acc):
            continue
        ja = np.nonzero(acc)[0]
        ya = y[ja]
        yn = y_new[ja]
        Q = np.einsum("jld,jk->ldk", k[:, ja], _P)
        th_end = np.ones(ja.size)
        lanes = ia[ja]
        # stop conditions on the accepted step
        reason = np.full(ja.size, "", dtype=object)
        below = yn[:, X] < xs[lanes]
        # an outward excursion can leave and re-enter within one step
        xs_dense = ya[:, X, None] + hh[ja, None] * np.einsum("lk,sk->ls", Q[:, X, :], _EXCURSION_POW)
        above = (yn[:, X] > x_out) | np.any(xs_dense > x_out, axis=1)
        over = np.abs(yn[:, T]) > opts.max_param
        for m in np.nonzero(below | above | over)[0]:
            cands = []
            if below[m]:
                cands.append((X, xs[lanes[m]], "x_min"))
            if above[m]:
                cands.append((X, x_out, "x_outer"))
            if over[m]:
                cands.append((T, math.copysign(opts.max_param, yn[m, T]), "max_param"))
            best = (1.0, "")
            for comp, level, why in cands:
                def g(th, comp=comp, level=level, m=m):
                    pw = np.array([th, th * th, th**3, th**4])
                    return ya[m, comp] + hh[ja[m]] * (Q[m, comp] @ pw) - level
                hi = 1.0
                if why == "x_outer":
                    first = np.nonzero(xs_dense[m] > x_out)[0]
                    if first.size:
                        hi = _EXCURSION_THETA[first[0]]
                g0, g1 = g(0.0), g(hi)
                if g0 == 0.0 or (why == "x_outer" and g0 > 0.0):
                    th = 0.0
                elif np.sign(g0) != np.sign(g1):
                    th = brentq(g, 0.0, hi, xtol=1e-15, rtol=1e-15)
                else:
                    th = hi
                if th <= best[0]:
                    best = (th, why)
            th_end[m] = best[0]
            reason[m] = best[1]
        recs.append((lanes, hh[ja], th_end, ya, Q, rm[ja], sg[ja]))
        finished = reason != ""
        if opts.project:
            G = _project(metric, yn)
            max_drift = max(max_drift, float(np.max(np.abs(G - 1.0))))
        for m in np.nonzero(finished)[0]:
            th = th_end[m]
            pw = np.array([th, th * th, th**3, th**4])
            yn[m] = ya[m] + hh[ja[m]] * Q[m] @ pw
        Y[lanes] = yn
        y_end[lanes] = yn
        stop[lanes[finished]] = reason[finished]
        active[lanes[finished]] = False
    if recs:
        cat = [np.concatenate([r[i] for r in recs]) for i in range(7)]
        order = np.argsort(cat[0], kind="stable")
        cat = [c[order] for c in cat]
    else:
        cat = [np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros((0, NSTATE)), np.zeros((0, NSTATE, 4)),
               np.zeros(0, bool), np.zeros(0)]
    return LaneSteps(cat[0], cat[1], cat[2], cat[3], cat[4], cat[5], cat[6], y_end, stop, max_drift, L, metric)


def initial_states(metric: ConicMetric, x, lam) -> np.ndarray:
    """Reduced initial states for base points ``x`` and ``lam = tau``."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    x, lam = np.broadcast_arrays(x, lam)
    Y0 = np.zeros(x.shape + (NSTATE,))
    Y0[..., X] = x
    Y0[..., TAU] = lam
    Y0[..., RHO] = np.sqrt(metric.c(x) * np.clip(1.0 - lam * lam, 0.0, None))
    return Y0


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass
class GeodesicPath:
    """A traced bicharacteristic through ``(x, y)`` with b-tangent ``(lam, omega)``.

    Samples are the accepted step boundaries in increasing ``t``. Each
    sample carries the exponent ``E = x^{-2p}/(2p) - x(t)^{-2p}/(2p)``.
    """

    metric: ConicMetric
    x: float
    state: LinkState
    lam: float
    steps: LaneSteps
    opts: TraceOptions

    @property
    def initial(self):
        return (self.x, self.state.y, self.lam, self.state.mu_hat)

    @property
    def parameterization(self) -> str:
        return "r_param" if bool(np.any(self.steps.rmode)) else "t_param"

    @property
    def truncated(self) -> bool:
        return bool(np.any(self.steps.stop == "x_outer"))

    @property
    def max_drift(self) -> float:
        return self.steps.max_drift

    def exponent(self, xs):
        p = self.metric.p
        return (self.x ** (-2 * p) - np.asarray(xs) ** (-2 * p)) / (2 * p)

    @cached_property
    def reduced_samples(self) -> np.ndarray:
        """Reduced states at step boundaries ordered by ``t`` (shape ``(S, 6)``)."""
        st = self.steps
        ends = st.dense(np.arange(st.lane.size), st.theta_end)
        pts = np.concatenate([st.y0[:1] if st.lane.size else np.zeros((0, NSTATE)), ends, st.y0])
        pts = pts[np.argsort(pts[:, T], kind="stable")]
        keep = np.ones(len(pts), bool)
        keep[1:] = np.diff(pts[:, T]) > 0
        return pts[keep]

    def link_points(self, arc):
        """Link coordinates and covectors after arclength ``arc``."""
        y, mu = flow_points(self.metric.link, self.state.y[None], self.state.mu_hat[None], np.atleast_1d(arc)[None])
        return y[0], mu[0]

    @cached_property
    def samples(self):
        """List of ``(t, ScCovector, E)`` at the step boundaries."""
        S = self.reduced_samples
        y, muh = self.link_points(S[:, ARC])
        out = []
        for i in range(S.shape[0]):
            q = ScCovector(S[i, X], y[i], S[i, TAU], S[i, RHO] * muh[i])
            out.append((float(S[i, T]), q, float(self.exponent(S[i, X]))))
        return out

    def quadrature(self, n_gl: int | None = None):
        """``(states, y, dt_weights)`` on Gauss-Legendre nodes of every accepted step."""
        _, st, w = self.steps.quadrature(n_gl or self.opts.n_gl)
        y, _ = self.link_points(st[:, ARC])
        return st, y, w

    def at_t(self, t: float) -> np.ndarray:
        """Reduced state at parameter ``t`` using the dense output."""
        st = self.steps
        for i in range(st.lane.size):
            ta = st.y0[i, T]
            tb = st.dense(i, st.theta_end[i])[T]
            lo, hi = min(ta, tb), max(ta, tb)
            if lo <= t <= hi:
                if ta == t:
                    return st.y0[i].copy()
                th = brentq(lambda s: st.dense(i, s)[T] - t, 0.0, st.theta_end[i], xtol=1e-15, rtol=1e-15)
                return st.dense(i, th)
        raise DomainError(f"t={t} outside the traced range")

    def single_maximum(self) -> bool:
        xs = self.reduced_samples[:, X]
        d = np.diff(xs)
        d = d[np.abs(d) > 1e-14 * np.max(xs)]
        if d.size < 2:
            return True
        changes = np.sum((d[:-1] > 0) & (d[1:] < 0))
        rises_after_fall = np.sum((d[:-1] < 0) & (d[1:] > 0))
        return changes <= 1 and rises_after_fall == 0


def trace(metric: ConicMetric, x: float, state: LinkState, lam: float, opts: TraceOptions | None = None) -> GeodesicPath:
    """Trace the geodesic through ``(x, y)`` with ``tau = lam`` forward and backward in ``t``."""
    opts = opts or TraceOptions()
    metric.check_x(x)
    if state.link != metric.link:
        raise ContractViolation("link state belongs to a different link")
    if not (abs(lam) <= 1.0):
        raise ContractViolation("lam must lie in [-1, 1] on the unit level set")
    Y0 = initial_states(metric, np.array([x, x]), np.array([lam, lam]))
    steps = integrate_lanes(metric, Y0, np.array([1.0, -1.0]), opts)
    return GeodesicPath(metric, float(x), state, float(lam), steps, opts)


# ---------------------------------------------------------------------------
# Exact cone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConePoint:
    x: float
    state: LinkState
    tau: float
    mu_norm: float


def cone_radial(x0, lam, r):
    """Closed form ``(x, tau, |mu|)`` along the exact cone with ``lam = cot r0``."""
    r0 = math.atan2(1.0, lam)
    r = np.asarray(r, dtype=float)
    if np.any(r <= -r0) or np.any(r >= math.pi - r0):
        raise DomainError("r must lie in (-r0, pi - r0)")
    return x0 * np.sin(r + r0) / math.sin(r0), np.cos(r + r0), np.sin(r + r0)


def exact_cone_path(x0: float, state: LinkState, lam: float, r: float) -> ConePoint:
    """Point reached after link arclength ``r`` on the exact cone."""
    from .link_geometry import link_flow

    x, tau, mu = cone_radial(x0, lam, r)
    return ConePoint(float(x), link_flow(state, float(r)), float(tau), float(mu))


def cone_state_t(x0, tau0, t):
    """Closed form ``(x, tau, |mu|)`` in the ``t`` parameter for unit initial data with ``tau = tau0``."""
    t = np.asarray(t, dtype=float)
    rho0 = math.sqrt(max(0.0, 1.0 - tau0 * tau0))
    if tau0 >= 0:
        T_ = rho0 / (1.0 + tau0)
        e = T_ * T_ * np.exp(2 * t)
        ratio = np.exp(t) * (1 + T_ * T_) / (1 + e)
        tau = (1 - e) / (1 + e)
    else:
        S_ = rho0 / (1.0 - tau0)
        e = S_ * S_ * np.exp(-2 * t)
        ratio = np.exp(-t) * (1 + S_ * S_) / (1 + e)
        tau = -(1 - e) / (1 + e)
    return x0 * ratio, tau, np.sqrt(np.clip(1 - tau * tau, 0, None))


# ---------------------------------------------------------------------------
# Expansion coefficients
# ---------------------------------------------------------------------------


def alpha_closed_form(metric: ConicMetric, x) -> np.ndarray:
    """``alpha = -(1 - x c'/(2c))/2`` for the scalar warp (independent of ``y`` and ``omega``)."""
    x = np.asarray(x, dtype=float)
    c = metric.c(x)
    return -0.5 * (1.0 - x * metric.dc(x) / (2.0 * c))


def expansion_coefficients(metric: ConicMetric, x: float, state: LinkState):
    """Linear and quadratic coefficients of ``x(gamma(t))/x = 1 + a1 t + alpha t^2 + ...`` at ``lam = 0``."""
    delta = 1e-3 * x
    opts = TraceOptions(max_param=2.2 * delta, max_step=delta / 4, x_min=1e-6 * x)
    path = trace(metric, x, state, 0.0, opts)
    x0 = path.at_t(0.0)[X]

    def second(d):
        return (path.at_t(d)[X] - 2 * x0 + path.at_t(-d)[X]) / (d * d)

    D1, D2 = second(2 * delta), second(delta)
    xpp = (4 * D2 - D1) / 3.0
    a1 = (path.at_t(delta)[X] - path.at_t(-delta)[X]) / (2 * delta * x)
    return a1, xpp / (2.0 * x)


def expansion_alpha(metric: ConicMetric, x: float, state: LinkState) -> float:
    """Quadratic coefficient ``alpha`` of the tangent geodesic, fitted by Richardson second differences."""
    metric.check_x(x)
    _, alpha = expansion_coefficients(metric, x, state)
    if not alpha < 0:
        raise FoliationViolation(f"level sets of x are not strictly concave at x={x} (alpha={alpha:.3g})")
    return float(alpha)


# ---------------------------------------------------------------------------
# Foliation report
# ---------------------------------------------------------------------------

C3 = 2.0
C4 = 4.0


@dataclass
class FoliationReport:
    passes: bool
    c_concavity: float
    C3: float
    C4: float
    C5: float
    C_w: float
    per_x: list = field(default_factory=list)
    failing_x: list = field(default_factory=list)
    warning: str = ""
    max_drift: float = 0.0

    def constants(self) -> dict:
        return {"c_concavity": self.c_concavity, "C3": self.C3, "C4": self.C4, "C5": self.C5, "C_w": self.C_w}


def _lambda_fan(x: float) -> np.ndarray:
    lim = min(C3 * x, 1.0)
    lam = np.array([0.0, 0.25, 0.5, 0.75, 0.95]) * lim
    return np.unique(np.concatenate([lam, -lam]))


def foliation_report(metric: ConicMetric, x_grid: Sequence[float], y_samples: Sequence, omega_samples: Sequence[float],
                     opts: TraceOptions | None = None) -> FoliationReport:
    """Sample concavity at tangency points and fit the exponent-bound constants.

    ``omega_samples`` are direction angles (see :meth:`LinkState.from_direction`).
    For the scalar warp the reduced flow does not depend on ``(y, omega)``, so
    one fan of paths per ``x`` serves every link sample.
    """
    x_grid = [float(v) for v in x_grid]
    if not x_grid or len(y_samples) == 0:
        raise ArgumentError("x_grid and y_samples must be nonempty")
    if len(omega_samples) == 0:
        return FoliationReport(True, float("nan"), C3, C4, float("nan"), float("nan"),
                               warning="empty direction set: vacuous pass")
    opts = opts or TraceOptions()
    p = metric.p
    per_x = []
    conc_all, cw_all, c5_all, drift = [], [], [], 0.0
    single_ok = True
    lam_list, x_list = [], []
    for xv in x_grid:
        for lv in _lambda_fan(xv):
            x_list.append(xv)
            lam_list.append(lv)
    x_arr, lam_arr = np.array(x_list), np.array(lam_list)
    Y0 = initial_states(metric, np.repeat(x_arr, 2), np.repeat(lam_arr, 2))
    sign = np.tile([1.0, -1.0], x_arr.size)
    steps = integrate_lanes(metric, Y0, sign, opts)
    drift = steps.max_drift
    ends = steps.dense(np.arange(steps.lane.size), steps.theta_end)
    pair = steps.lane // 2
    for xv in x_grid:
        conc_x = []
        for ys in y_samples:
            for ang in omega_samples:
                st = LinkState.from_direction(metric.link, ys, ang)
                try:
                    a = expansion_alpha(metric, xv, st)
                except FoliationViolation:
                    a = 0.0
                conc_x.append(-2.0 * a)
        sel_paths = np.nonzero(x_arr == xv)[0]
        cw_x, c5_x = -math.inf, math.inf
        for j in sel_paths:
            m = pair == j
            pts = np.concatenate([Y0[2 * j][None], ends[m]])
            pts = pts[np.argsort(pts[:, T])]
            E = (xv ** (-2 * p) - pts[:, X] ** (-2 * p)) / (2 * p)
            lv = lam_arr[j]
            if abs(lv) < C3 * xv:
                cw_x = max(cw_x, float(E.max()))
            far = np.abs(pts[:, T]) > C4 * abs(lv)
            far &= np.abs(pts[:, T]) > 1e-12
            if np.any(far):
                c5_x = min(c5_x, float(np.min(-E[far] * xv ** (2 * p) / pts[far, T] ** 2)))
            xs = pts[:, X]
            d = np.diff(xs)
            d = d[np.abs(d) > 1e-13 * xs.max()]
            if d.size >= 2 and (np.sum((d[:-1] < 0) & (d[1:] > 0)) > 0):
                single_ok = False
        cmin = float(min(conc_x))
        ok = cmin > 0 and c5_x > 0
        per_x.append({"x": xv, "c_concavity": cmin, "C_w": cw_x, "C5": c5_x, "passes": bool(ok)})
        conc_all.append(cmin)
        cw_all.append(cw_x)
        c5_all.append(c5_x)
    c_conc = float(min(conc_all))
    C5v = float(min(c5_all))
    failing = [d["x"] for d in per_x if not d["passes"]]
    passes = c_conc > 0 and C5v > 0 and single_ok and not failing
    return FoliationReport(bool(passes), c_conc, C3, C4, C5v, float(max(cw_all)), per_x, failing,
                           "" if single_ok else "a sampled path has more than one local maximum of x", drift)


# ---------------------------------------------------------------------------
# Conjugate points of the map (t, lam, omega) -> (x(t)/x, y(t))
# ---------------------------------------------------------------------------


def _variational_rhs(metric: ConicMetric):
    def rhs(_t, s):
        x, tau, rho = s[0], s[1], s[2]
        c = float(metric.c(x))
        k = float(metric.radial_damping(x))
        dk = float(metric.radial_damping_dx(x))
        dc = float(metric.dc(x))
        F = [x * tau, -rho * rho * k, tau * rho, rho / c]
        v = s[4:8]
        dF = [
            tau * v[0] + x * v[1],
            -rho * rho * dk * v[0] - 2 * rho * k * v[2],
            rho * v[1] + tau * v[2],
            -rho * dc / c**2 * v[0] + v[2] / c,
        ]
        return np.array(F + dF)

    return rhs


def conjugate_check_detail(metric: ConicMetric, x: float, y, param_range: float,
                           lambdas=(0.0, 0.25, -0.25, 0.5, -0.5), n_dir: int = 8, n_samples: int = 200):
    """Smallest scaled singular value and sign changes of the geodesic-family Jacobian.

    Columns are ``d_t``, ``t^{-1} d_lam`` and ``t^{-1} d_beta`` (``beta`` the
    direction angle), written in the frame of the link velocity and its normal.
    Returns ``(ok, worst_margin, first_bad)``.
    """
    metric.check_x(x)
    link = metric.link
    p = metric.p
    rhs = _variational_rhs(metric)
    angles = np.arange(n_dir) * 2 * np.pi / n_dir if link.is_sphere else np.array([0.0])
    worst = math.inf
    first_bad = None

    def stop_arc(t, s):
        return abs(s[3]) - param_range
    stop_arc.terminal = True

    def stop_low(t, s):
        return s[0] - 1e-4 * x
    stop_low.terminal = True

    def stop_high(t, s):
        return s[0] - metric.x0
    stop_high.terminal = True

    for lam in lambdas:
        if abs(lam) >= 1:
            continue
        c0 = float(metric.c(x))
        rho0 = math.sqrt(c0 * (1 - lam * lam))
        s0 = np.array([x, lam, rho0, 0.0, 0.0, 1.0, -c0 * lam / rho0, 0.0])
        ts_all, ss_all = [np.array([0.0])], [s0[:, None]]
        if param_range > 0:
            for sgn in (1.0, -1.0):
                sol = solve_ivp(rhs, (0.0, sgn * 200.0), s0, method="DOP853", rtol=1e-11, atol=1e-13,
                                dense_output=True, events=[stop_arc, stop_low, stop_high])
                tend = sol.t[-1]
                ts = np.linspace(0.0, tend, n_samples + 1)[1:]
                ts_all.append(ts)
                ss_all.append(sol.sol(ts))
        ts = np.concatenate(ts_all)
        ss = np.concatenate(ss_all, axis=1)
        order = np.argsort(ts)
        ts, ss = ts[order], ss[:, order]
        xt, taut, rhot, arc = ss[0], ss[1], ss[2], ss[3]
        vx, varc = ss[4], ss[7]
        ct = metric.c(xt)
        E = (x ** (-2 * p) - xt ** (-2 * p)) / (2 * p)
        tz = ts == 0.0
        tsafe = np.where(tz, 1.0, ts)
        a11 = xt * taut / x
        a12 = np.where(tz, 1.0, vx / (x * tsafe))
        a21 = rhot / ct
        a22 = np.where(tz, -lam / math.sqrt(1 - lam * lam), varc / tsafe)
        for ang in angles:
            if link.is_sphere:
                st = LinkState.from_direction(link, y, ang)
                J = jacobi_field(st, arc)
                a33 = np.where(tz, 1.0, J / tsafe)
                mats = np.zeros((ts.size, 3, 3))
                mats[:, 2, 2] = a33
            else:
                mats = np.zeros((ts.size, 2, 2))
            mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 0], mats[:, 1, 1] = a11, a12, a21, a22
            sv = np.linalg.svd(mats, compute_uv=False)[:, -1]
            det = np.linalg.det(mats)
            thr = 1e-6 * np.minimum(1.0, np.exp(E))
            margin = sv / np.maximum(thr, 1e-300)
            worst = min(worst, float(margin.min()))
            flips = np.nonzero(np.sign(det[1:]) != np.sign(det[:-1]))[0]
            bad = np.nonzero(sv <= thr)[0]
            cand = []
            if flips.size:
                cand.append(float(min(abs(arc[flips[0]]), abs(arc[flips[0] + 1]))))
            if bad.size:
                cand.append(float(abs(arc[bad[0]])))
            if cand:
                r_bad = min(cand)
                first_bad = r_bad if first_bad is None else min(first_bad, r_bad)
    return first_bad is None, worst, first_bad


def conjugate_check(metric: ConicMetric, x: float, y, param_range: float) -> bool:
    """True iff the geodesic-family Jacobian stays non-degenerate for link arclength ``|R| <= param_range``."""
    ok, _, _ = conjugate_check_detail(metric, x, y, param_range)
    return ok


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------


@dataclass
class Certificate:
    passes: bool
    foliation: FoliationReport
    conjugate_ok: bool
    x_range: tuple

    def constants(self) -> dict:
        return self.foliation.constants()


def default_link_samples(metric: ConicMetric):
    link = metric.link
    if link.is_sphere:
        ys = [np.array([0.7, 0.3]), np.array([np.pi / 2, 1.9]), np.array([2.4, 4.0])]
        angs = [0.0, np.pi / 2, np.pi / 4, np.pi]
    else:
        ys = [np.array([0.0]), np.array([2.0])]
        angs = [0.0, np.pi]
    return ys, angs


def certify(metric: ConicMetric, x_lo: float | None = None, n_x: int = 12,
            param_range: float = math.pi / 2 - 0.1) -> Certificate:
    """Run the foliation and conjugate-point checks and attach the certificate to ``metric``."""
    lo = x_lo if x_lo is not None else metric.x0 / 20
    xg = np.geomspace(lo, metric.x0, n_x)
    ys, angs = default_link_samples(metric)
    rep = foliation_report(metric, xg, ys, angs)
    conj = all(conjugate_check(metric, float(xv), ys[0], param_range) for xv in (lo, metric.x0 / 2))
    cert = Certificate(bool(rep.passes and conj), rep, bool(conj), (float(lo), float(metric.x0)))
    metric.certificate = cert
    return cert
