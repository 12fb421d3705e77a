"""Reconstruction of Gaussian-decaying functions from the localized normal equation.

The unknown is ``w = e^{-F/h} f``. With the one-cusp weight and ``f`` in the
Gaussian class ``C`` the unknown lies in the Gaussian class ``C - 1/(2h)``, so
``f`` and ``w`` share their profile and ``f_rec = e^{F/h} w`` needs no
exponentiation at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conic_manifold import ConicMetric
from .errors import ArgumentError, ContractViolation, StagnationError
from .link_geometry import LinkGrid
from .onecusp_calculus import ellipticity_scan
from .normal_operator import (EXP_FLOOR, CollarGrid, Localizer, NormalOperator, OperatorOptions, WeightSpec,
                              require_certificate)
from .xray_transform import AnalyticFunction, DecayClass, GridFunction, log_nodes

SOLVERS = ("cgnr", "landweber")
STAGNATION_WINDOW = 50
STAGNATION_DROP = 1e-3


@dataclass
class ReconstructionConfig:
    """Solver and grid settings.

    ``f_decay`` is the Gaussian constant ``C`` of the functions to recover
    (envelope ``exp(-C/(p x^{2p}))``).
    """

    h: float = 0.05
    weight: WeightSpec = field(default_factory=WeightSpec.one_cusp)
    loc: Localizer = field(default_factory=Localizer)
    solver: str = "cgnr"
    max_iters: int = 5000
    rtol: float = 1e-8
    nx: int = 32
    ny: int = 24
    x_min: float = 0.02
    x_max: float | None = None
    x_report_lo: float | None = None
    f_decay: float = 1.0
    operator: OperatorOptions = field(default_factory=OperatorOptions)

    def __post_init__(self):
        if not 0 < self.h < 1:
            raise ArgumentError("h must lie in (0, 1)")
        if not 0 < self.rtol < 1e-2:
            raise ArgumentError("rtol must lie in (0, 1e-2)")
        if self.solver not in SOLVERS:
            raise ArgumentError(f"solver must be one of {SOLVERS}")
        if self.weight.kind != "one_cusp":
            raise ArgumentError("reconstruction uses the one-cusp weight; the combined weight is available to "
                                "apply_normal")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be positive")

    def f_class(self) -> DecayClass:
        return DecayClass.gaussian(self.f_decay, self.weight.p)

    def w_class(self) -> DecayClass:
        return self.f_class().shifted(-1.0 / (2.0 * self.h))

    def collar_grid(self, metric: ConicMetric) -> CollarGrid:
        xn = log_nodes(self.x_min, self.x_max or metric.x0, self.nx)
        return CollarGrid(xn, LinkGrid.build(metric.link, self.ny), self.w_class())

    def report_lo(self, grid: CollarGrid) -> float:
        return self.x_report_lo if self.x_report_lo is not None else 2.0 * float(grid.x_nodes[-1])


@dataclass
class ReconstructionReport:
    f_rec: GridFunction
    residuals: np.ndarray
    iterations: int
    converged: bool
    h: float
    relative_error: float | None = None
    weighted_error: float | None = None
    solver: str = "cgnr"

    def summary(self) -> str:
        parts = [f"h={self.h!r}", f"solver={self.solver}", f"iterations={self.iterations}",
                 f"converged={str(self.converged).lower()}", f"residual={float(self.residuals[-1])!r}"]
        if self.relative_error is not None:
            parts.append(f"relative_error={self.relative_error!r}")
        if self.weighted_error is not None:
            parts.append(f"weighted_error={self.weighted_error!r}")
        return " ".join(parts)


def build_operator(metric: ConicMetric, cfg: ReconstructionConfig) -> NormalOperator:
    return NormalOperator(metric, cfg.weight, cfg.loc, cfg.h, cfg.collar_grid(metric), cfg.operator)


def make_rhs(metric: ConicMetric, cfg: ReconstructionConfig, data, operator: NormalOperator | None = None
             ) -> GridFunction:
    """``e^{-F/h} L chi I f`` on the grid, in the decay class of the unknown.

    ``data`` is the true ``f`` (a Gaussian-class :class:`GridFunction` or
    :class:`AnalyticFunction`) or the output of :func:`forward_family_scaled` on
    the operator's family,
    i.e. ``I f / envelope_f(x_i)`` with shape ``(nx, ny, n_lam, n_dir)``.
    """
    op = operator or build_operator(metric, cfg)
    if not op.metric.same_geometry(metric):
        raise ContractViolation("operator and metric disagree")
    if isinstance(data, (GridFunction, AnalyticFunction)):
        if not data.metric.same_geometry(metric):
            raise ContractViolation("data lives on a different metric")
        if data.decay != cfg.f_class():
            raise ContractViolation(f"data decay class {data.decay} differs from the configured {cfg.f_class()}")
        data = op.family_data(data, floor=EXP_FLOOR)
    data = np.asarray(data, dtype=float)
    fam = op.family
    if data.shape != fam.shape:
        raise ContractViolation(f"data shape {data.shape} does not match the family {fam.shape}")
    rhs = np.einsum("ijad,a,d->ij", data, op.lam_weights, op.dir_weights) * op.scale[:, None]
    g = op.grid
    return GridFunction(metric, g.x_nodes, g.ygrid, rhs, g.decay)


def _check_stagnation(hist: list) -> None:
    if len(hist) > STAGNATION_WINDOW:
        old, new = hist[-STAGNATION_WINDOW - 1], hist[-1]
        if old > 0 and new > old * (1.0 - STAGNATION_DROP):
            raise StagnationError(
                f"relative residual fell by less than {STAGNATION_DROP:g} over {STAGNATION_WINDOW} iterations "
                f"({old:.3e} -> {new:.3e})", np.array(hist))


def solve(A: np.ndarray, b: np.ndarray, solver: str = "cgnr", rtol: float = 1e-8, max_iters: int = 5000,
          row_scale: np.ndarray | None = None):
    """Iterative solve of ``A u = b``; returns ``(u, residual_history, converged)``.

    The iteration runs on the row-equilibrated system ``D A u = D b`` and stops
    once both the equilibrated and the plain relative residuals are below ``rtol``.
    The history records the equilibrated residual.
    """
    D = np.ones(A.shape[0]) if row_scale is None else np.asarray(row_scale, dtype=float)
    As, bs = D[:, None] * A, D * b
    nb, nbs = float(np.linalg.norm(b)), float(np.linalg.norm(bs))
    u = np.zeros(A.shape[1])
    if nb == 0.0:
        return u, np.array([0.0]), True
    r = bs.copy()
    hist = [1.0]

    def done(r):
        return np.linalg.norm(r) / nbs <= rtol and np.linalg.norm(b - A @ u) / nb <= rtol

    if solver == "cgnr":
        z = As.T @ r
        p = z.copy()
        zz = float(z @ z)
        for _ in range(max_iters):
            if zz == 0.0:
                raise StagnationError("the normal-equation residual vanished before the residual did; "
                                      "the right-hand side is outside the range", np.array(hist))
            q = As @ p
            a = zz / float(q @ q)
            u += a * p
            r -= a * q
            hist.append(float(np.linalg.norm(r)) / nbs)
            if done(r):
                return u, np.array(hist), True
            _check_stagnation(hist)
            z = As.T @ r
            zz_new = float(z @ z)
            p = z + (zz_new / zz) * p
            zz = zz_new
        return u, np.array(hist), False
    if solver == "landweber":
        step = 0.9 / np.linalg.norm(As, 2) ** 2
        for _ in range(max_iters):
            u += step * (As.T @ r)
            r = bs - As @ u
            hist.append(float(np.linalg.norm(r)) / nbs)
            if done(r):
                return u, np.array(hist), True
            _check_stagnation(hist)
        return u, np.array(hist), False
    raise ArgumentError(f"unknown solver {solver!r}")


def relative_l2_error(f_rec: GridFunction, f_true: GridFunction, x_lo: float) -> float:
    """Relative L2 error over nodes with ``x >= x_lo`` (trapezoid in ``x`` times link weights).

    Envelopes are combined in log space against a common scale so steep
    envelopes cannot underflow the ratio.
    """
    if f_rec.decay != f_true.decay or f_rec.shape != f_true.shape:
        raise ContractViolation("error needs grid functions on the same grid and decay class")
    xn = f_rec.x_nodes
    sel = np.nonzero(xn >= x_lo * (1 - 1e-12))[0]
    if sel.size < 2:
        raise ArgumentError("the reporting window holds fewer than two x nodes")
    xs = xn[sel]
    wx = np.zeros(xs.size)
    dx = np.abs(np.diff(xs))
    wx[:-1] += dx / 2
    wx[1:] += dx / 2
    le = f_rec.decay.log_envelope(xs)
    scale = np.exp(2 * (le - le.max()))
    wy = f_rec.ygrid.weights
    d = (f_rec.profile[sel] - f_true.profile[sel]) ** 2 @ wy
    t = f_true.profile[sel] ** 2 @ wy
    den = float(np.sum(wx * scale * t))
    if den == 0.0:
        return 0.0 if float(np.sum(wx * scale * d)) == 0.0 else math.inf
    return math.sqrt(float(np.sum(wx * scale * d)) / den)


def reconstruct(metric: ConicMetric, cfg: ReconstructionConfig, data, f_true=None,
                operator: NormalOperator | None = None, matrix: np.ndarray | None = None) -> ReconstructionReport:
    """Solve ``A w = rhs`` and return ``f_rec = e^{F/h} w``.

    ``data`` is anything :func:`make_rhs` accepts, or a ready right-hand side
    in the unknown's decay class. With ``f_true`` the relative L2 error is
    reported on the window ``x >= report_lo``.
    """
    require_certificate(metric)
    op = operator or build_operator(metric, cfg)
    rhs = data if isinstance(data, GridFunction) and data.decay == cfg.w_class() else make_rhs(metric, cfg, data, op)
    A = op.matrix() if matrix is None else matrix
    xn = op.grid.x_nodes
    D = np.repeat(1.0 / (cfg.h * xn ** cfg.weight.p), op.grid.ygrid.size)
    u, hist, ok = solve(A, rhs.profile.ravel(), cfg.solver, cfg.rtol, cfg.max_iters, D)
    g = op.grid
    f_rec = GridFunction(metric, g.x_nodes, g.ygrid, u.reshape(g.x_nodes.size, g.ygrid.size), cfg.f_class())
    rep = ReconstructionReport(f_rec, hist, hist.size - 1, ok, cfg.h, solver=cfg.solver)
    if f_true is not None:
        if isinstance(f_true, AnalyticFunction):
            f_true = f_true.on_grid(g.x_nodes, g.ygrid)
        lo = cfg.report_lo(g)
        rep.relative_error = relative_l2_error(f_rec, f_true, lo)
        w_rec = f_rec.with_profile(f_rec.profile, cfg.w_class())
        w_true = f_true.with_profile(f_true.profile, cfg.w_class())
        rep.weighted_error = relative_l2_error(w_rec, w_true, lo)
    return rep


# ---------------------------------------------------------------------------
# Injectivity probe
# ---------------------------------------------------------------------------


def random_gaussian_function(metric: ConicMetric, rng: np.random.Generator, C: float,
                             p: float = 1.0) -> AnalyticFunction:
    """Smooth link polynomial of degree <= 1 times ``(1 + b x)`` in the Gaussian class ``C``."""
    link = metric.link
    c0 = 1.0 + rng.uniform(0.0, 0.5)
    coef = rng.uniform(-0.3, 0.3, size=3 if link.dim == 2 else 2)
    b = rng.uniform(-1.0, 1.0)

    def fn(x, y):
        if link.dim == 2:
            th, ph = y[:, 0], y[:, 1]
            e = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
        else:
            e = np.stack([np.cos(y[:, 0]), np.sin(y[:, 0])], axis=-1)
        return (c0 + e @ coef) * (1.0 + b * x)

    return AnalyticFunction(metric, fn, DecayClass.gaussian(C, p))


@dataclass
class ProbeReport:
    passes: bool
    trial_errors: list
    threshold: float
    sigma_min: float
    sigma_max: float
    sigma_ratio_floor: float
    scan_passes: bool | None
    scan_min: float | None
    notes: list = field(default_factory=list)

    def summary(self) -> str:
        errs = ",".join(f"{e:.6g}" for e in self.trial_errors)
        return (f"passes={str(self.passes).lower()} trials={len(self.trial_errors)} errors=[{errs}] "
                f"sigma_min={self.sigma_min!r} sigma_max={self.sigma_max!r} scan_passes={self.scan_passes}")


def scaled_singular_values(metric: ConicMetric, cfg: ReconstructionConfig) -> np.ndarray:
    """Singular values of the compact-class operator with rows scaled by ``1/(h x_i^p)``."""
    g = cfg.collar_grid(metric)
    grid = CollarGrid(g.x_nodes, g.ygrid, DecayClass.compact(0.0, float(g.x_nodes[0])))
    A = NormalOperator(metric, cfg.weight, cfg.loc, cfg.h, grid, cfg.operator).matrix()
    D = np.repeat(1.0 / (cfg.h * g.x_nodes ** cfg.weight.p), g.ygrid.size)
    return np.linalg.svd(D[:, None] * A, compute_uv=False)


def injectivity_probe(metric: ConicMetric, cfg: ReconstructionConfig, n_trials: int = 5, seed: int = 0,
                      threshold: float = 0.05, sigma_ratio_floor: float = 1e-3, scan: bool = True,
                      scan_x: float | None = None) -> ProbeReport:
    """Seeded recoveries of random Gaussian-class functions plus a singular-value and ellipticity check.

    Trial functions use the decay constant ``C = max(cfg.f_decay, 1/h)`` so the
    unknown ``w`` stays bounded. The ellipticity scan over one collar point is
    part of the probe: a localizer that is not elliptic fails it even when the
    small discrete system happens to be invertible.
    """
    if n_trials < 0:
        raise ArgumentError("n_trials must be nonnegative")
    notes = []
    if n_trials == 0:
        return ProbeReport(True, [], threshold, math.nan, math.nan, sigma_ratio_floor, None, None,
                           ["no trials requested"])
    require_certificate(metric)
    C = max(cfg.f_decay, 1.0 / cfg.h)
    tcfg = ReconstructionConfig(**{**cfg.__dict__, "f_decay": C})
    op = build_operator(metric, tcfg)
    A = op.matrix()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_trials):
        f = random_gaussian_function(metric, rng, C, cfg.weight.p)
        rep = reconstruct(metric, tcfg, f, f_true=f, operator=op, matrix=A)
        errs.append(float(rep.relative_error))
        if not rep.converged:
            notes.append("a trial stopped at max_iters")
    sv = scaled_singular_values(metric, cfg)
    smin, smax = float(sv[-1]), float(sv[0])
    ok = all(e < threshold for e in errs) and smin > sigma_ratio_floor * smax
    scan_pass = scan_min = None
    if scan:
        xs = scan_x if scan_x is not None else float(np.sqrt(op.grid.x_nodes[0] * op.grid.x_nodes[-1]))
        res = ellipticity_scan(metric, cfg.loc, [xs])
        scan_pass, scan_min = res.passes, res.min_normalized
        if not res.supported:
            notes.append(res.note)
        elif not res.passes:
            notes.append("ellipticity scan failed for this localizer")
            ok = False
    return ProbeReport(ok, errs, threshold, smin, smax, sigma_ratio_floor, scan_pass, scan_min, notes)
