"""Acceptance suite: one verdict line per criterion, repeated in the session summary."""

from __future__ import annotations

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from conic_xray.conic_manifold import ConicMetric
from conic_xray.geodesic_flow import (
    ARC,
    RHO,
    TAU,
    T,
    X,
    certify,
    conjugate_check,
    expansion_alpha,
    expansion_coefficients,
    foliation_report,
    trace,
)
from conic_xray.inversion import ReconstructionConfig, injectivity_probe, reconstruct
from conic_xray.link_geometry import LinkGrid, LinkMetric, LinkState, conjugate_scan
from conic_xray.normal_operator import Localizer, WeightSpec, apply_normal
from conic_xray.onecusp_calculus import (
    Lattice,
    ParabolicSymbol,
    closed_form_symbol,
    compose_check,
    ellipticity_scan,
    fiber_grid,
    full_symbol_numeric,
    quantize,
)
from conic_xray.xray_transform import AnalyticFunction, DecayClass, GridFunction, forward, log_nodes

from oracles import circle_normal_operator, cone_radial_transform, sech_oracle
from test_onecusp_calculus import PAIRS

SPHERE = LinkMetric.round_sphere(1.0)
LOC = Localizer()
ONE_CUSP = WeightSpec.one_cusp()
HS = (0.2, 0.1, 0.05)


def initial_conditions(n=50):
    """``n`` (x, state, lam) triples with lam spanning [-1, 1] and varied base points and directions."""
    lams = np.linspace(-1.0, 1.0, n)
    xs = np.geomspace(0.03, 0.45, 7)
    out = []
    for k, lam in enumerate(lams):
        y = np.array([0.3 + 2.5 * ((k * 0.37) % 1.0), 2 * math.pi * ((k * 0.61) % 1.0)])
        out.append((float(xs[k % xs.size]), LinkState.from_direction(SPHERE, y, 0.7 * k), float(lam)))
    return out


def test_criterion_01_cone_geodesic_oracle(criterion):
    metric = ConicMetric(SPHERE, 0.5)
    start = time.perf_counter()
    worst = 0.0
    for x0, state, lam in initial_conditions():
        S = trace(metric, x0, state, lam).reduced_samples
        ref = sech_oracle(x0, lam, S[:, T])
        for col, r in zip((X, TAU, RHO, ARC), ref):
            worst = max(worst, float(np.max(np.abs(S[:, col] - r))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10.0
    assert criterion(1, ok, f"max componentwise error {worst:.2e} over 50 paths, {elapsed:.1f} s")


def test_criterion_02_hamiltonian_drift(criterion):
    metrics = [ConicMetric(SPHERE, 0.5), ConicMetric(SPHERE, 0.5, (1.0,)),
               ConicMetric(SPHERE, 0.5, (0.5, -0.3)), ConicMetric(LinkMetric.perturbed_sphere(1.0, 0.05, 2), 0.5)]
    worst, count = 0.0, 0
    for m in metrics:
        for x0, state, lam in initial_conditions():
            st = LinkState.from_direction(m.link, state.y, 0.0)
            worst = max(worst, trace(m, x0, st, lam).max_drift)
            count += 1
    assert criterion(2, worst < 1e-8, f"max relative drift {worst:.2e} over {count} paths on 4 metrics")


def test_criterion_03_foliation_certificate(criterion):
    cone = ConicMetric(SPHERE, 0.5)
    worst = 0.0
    points = 0
    for x in np.geomspace(0.02, 0.45, 5):
        for y, ang in [((0.7, 0.3), 0.0), ((1.5, 1.9), 1.0), ((2.4, 4.0), 2.0), ((0.2, 5.0), 3.0)]:
            _, alpha = expansion_coefficients(cone, float(x), LinkState.from_direction(SPHERE, y, ang))
            worst = max(worst, abs(alpha + 0.5))
            points += 1
    concave = foliation_report(cone, np.geomspace(0.025, 0.5, 8), [np.array([1.0, 0.5])], [0.0]).passes

    warped = ConicMetric(SPHERE, 0.5, (1.0,))
    warp_cert = certify(warped).passes
    state = LinkState.from_direction(SPHERE, [1.0, 0.5], 0.3)
    xs = np.array([0.01, 0.02, 0.04, 0.08])
    slopes = np.array([(expansion_alpha(warped, float(x), state) + 0.5) / x for x in xs])
    # O(x): the deviation divided by x stays bounded and tends to the first-order coefficient 1/4
    bounded = bool(np.all(np.abs(slopes) < 1.0) and abs(slopes[0] - 0.25) < 0.05)

    ok = worst < 1e-4 and concave and warp_cert and bounded
    assert criterion(3, ok, f"cone |alpha+1/2| max {worst:.1e} at {points} points, concave={concave}; "
                            f"warp c=1+x certified={warp_cert}, (alpha+1/2)/x in "
                            f"[{slopes.min():.3f}, {slopes.max():.3f}]")


def test_criterion_04_conjugate_points(criterion):
    start = time.perf_counter()
    y = np.array([1.0, 0.5])
    unit_none = conjugate_scan(LinkState.from_direction(SPHERE, y, 0.3), r_max=math.pi / 2) is None
    small = LinkMetric.round_sphere(0.4)
    r = conjugate_scan(LinkState.from_direction(small, y, 0.3), r_max=math.pi / 2)
    located = r is not None and abs(r - 0.4 * math.pi) < 1e-3
    unit_pass = conjugate_check(ConicMetric(SPHERE, 0.5), 0.3, y, math.pi / 2 - 0.1)
    small_flag = not conjugate_check(ConicMetric(small, 0.5), 0.3, y, math.pi / 2 - 0.1)
    elapsed = time.perf_counter() - start
    ok = unit_none and located and unit_pass and small_flag and elapsed < 5.0
    err = abs(r - 0.4 * math.pi) if r is not None else math.nan
    assert criterion(4, ok, f"radius 1 passes={unit_pass and unit_none}; radius 0.4 flagged={small_flag}, "
                            f"first conjugate point off by {err:.1e}; {elapsed:.1f} s")


def test_criterion_05_forward_oracle(criterion):
    cone = ConicMetric(SPHERE, 0.5)
    grid = LinkGrid.build(SPHERE, 24)
    xn = log_nodes(0.02, 0.5, 32)
    f = GridFunction.from_callable(cone, xn, grid, lambda x, y: np.ones_like(x), DecayClass.gaussian(0.5))
    state = LinkState.from_direction(SPHERE, [1.0, 0.5], 0.3)
    worst = 0.0
    n = 0
    for x0 in (0.05, 0.1, 0.2, 0.3, 0.4):
        for lam in (-0.6, -0.2, 0.2, 0.6):
            v = forward(f, trace(cone, x0, state, lam))
            ref = cone_radial_transform(x0, lam, 0.5, cone.x0)
            worst = max(worst, abs(v - ref) / abs(ref))
            n += 1
    assert criterion(5, worst < 1e-6, f"max relative error {worst:.2e} over {n} geodesics")


def test_criterion_06_brute_force_normal_operator(criterion, cone_circle):
    g = LinkGrid.build(cone_circle.link, 4)
    xn = log_nodes(0.1, 0.5, 4)
    v = GridFunction.from_callable(cone_circle, xn, g,
                                   lambda x, y: (1 + x) * (1 + 0.5 * np.cos(y[:, 0]) + 0.2 * np.sin(y[:, 0])),
                                   DecayClass.compact(0.0, 0.5))
    out = apply_normal(cone_circle, ONE_CUSP, LOC, 0.1, v).profile
    ref = circle_normal_operator(lambda x, y: v(x, np.broadcast_to(y, x.shape)[:, None]), xn, g.nodes[:, 0], 0.1, LOC)
    err = float(np.abs(out - ref).max() / np.abs(ref).max())
    assert criterion(6, err < 1e-4, f"4x4 grid relative error {err:.2e}")


def test_criterion_07_symbol_closed_form(criterion):
    cone = ConicMetric(SPHERE, 0.5)
    x, y = 0.1, [math.pi / 2, 0.0]
    alpha = expansion_alpha(cone, x, LinkState.from_direction(SPHERE, y, 0.0))
    v0 = full_symbol_numeric(cone, LOC, x, y, 0.0, [0.0, 0.0], alpha=alpha)
    c0 = closed_form_symbol(-0.5, 0.0, [0.0, 0.0], 2)
    worst = 0.0
    rows = fiber_grid()
    for xi, _, _, vec in rows:
        a = full_symbol_numeric(cone, LOC, x, y, xi, vec, alpha=alpha) / v0
        c = closed_form_symbol(-0.5, xi, vec, 2) / c0
        worst = max(worst, abs(a - c) / c)
    ratio_err = 0.0
    for xi in (0.5, 1.0, 2.0, 5.0):
        r = abs(full_symbol_numeric(cone, LOC, x, y, xi, [0.0, 0.0], alpha=alpha) / v0)
        ratio_err = max(ratio_err, abs(r / (1 + xi * xi) ** -0.5 - 1))
    ok = worst < 0.02 and ratio_err < 0.02
    assert criterion(7, ok, f"closed-form relative error {worst:.2e} over {len(rows)} fiber points; "
                            f"eta=0 ratio error {ratio_err:.2e}")


def test_criterion_08_orders(criterion, cone_sphere):
    x, y = 0.1, [math.pi / 2, 0.0]
    xs = np.geomspace(2, 20, 8)
    vals = [abs(full_symbol_numeric(cone_sphere, LOC, x, y, float(xi), [0.0, 0.0])) for xi in xs]
    fiber_slope = float(np.polyfit(np.log(xs), np.log(vals), 1)[0])

    g = LinkGrid.build(SPHERE, 8)
    xn = log_nodes(0.05, 0.5, 8)
    v = GridFunction.from_callable(cone_sphere, xn, g,
                                   lambda x, y: np.exp(-(((x - 0.25) / 0.08) ** 2)) * (1 + 0.3 * np.cos(y[:, 0])),
                                   DecayClass.compact(0.0, 0.5))
    norms = [np.linalg.norm(apply_normal(cone_sphere, ONE_CUSP, LOC, h, v).profile) for h in HS]
    h_slope = float(np.polyfit(np.log(HS), np.log(norms), 1)[0])
    ok = abs(fiber_slope + 1) < 0.1 and abs(h_slope - 1) < 0.15
    assert criterion(8, ok, f"fiber slope {fiber_slope:.3f}, h slope {h_slope:.3f}")


def test_criterion_09_ellipticity(criterion):
    cone = ConicMetric(SPHERE, 0.5)
    xs = np.geomspace(0.02, 0.45, 3)
    good = ellipticity_scan(cone, LOC, xs)
    bad = ellipticity_scan(cone, Localizer("centered_null"), xs[:1])
    ok = good.passes and good.min_normalized > 0.05 and not bad.passes
    assert criterion(9, ok, f"min normalized modulus {good.min_normalized:.3f}; "
                            f"chi(0)=0 control min {bad.min_normalized:.4f} fails={not bad.passes}")


def test_criterion_10_composition(criterion):
    ratios = []
    ok = True
    for a, b in PAIRS:
        rep = compose_check(a, b, Lattice())
        ratios.extend(rep.ratios.tolist())
        ok &= rep.within(0.5, 0.9)
    one = ParabolicSymbol.constant(1.0)
    id_err = max(float(np.abs(quantize(one, Lattice(n, -4, 4), h) - np.eye(n)).max())
                 for n in (16, 64) for h in (0.1, 0.02))
    ok = ok and id_err < 1e-8
    assert criterion(10, ok, f"ratios in [{min(ratios):.3f}, {max(ratios):.3f}] for 3 pairs; "
                             f"Op(1)-Id max {id_err:.1e}")


@pytest.mark.slow
def test_criterion_11_reconstruction(criterion, cone_sphere):
    start = time.perf_counter()
    cfg = ReconstructionConfig(h=0.05, nx=32, ny=24, x_min=0.02, f_decay=1.0)
    f = AnalyticFunction(cone_sphere, lambda x, y: 1 + 0.3 * np.cos(y[:, 0]), cfg.f_class())
    rep = reconstruct(cone_sphere, cfg, f, f_true=f)
    elapsed = time.perf_counter() - start
    ok = rep.converged and rep.relative_error < 0.05 and elapsed < 300
    assert criterion(11, ok, f"32x24 grid, h=0.05: relative L2 error {rep.relative_error:.2e} after "
                             f"{rep.iterations} iterations, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_12_injectivity_probe(criterion, cone_sphere):
    reports = {h: injectivity_probe(cone_sphere, ReconstructionConfig(h=h, nx=32, ny=24, x_min=0.02), n_trials=5)
               for h in (0.1, 0.05)}
    smin = {h: r.sigma_min for h, r in reports.items()}
    ratio = smin[0.05] / smin[0.1]
    worst = max(max(r.trial_errors) for r in reports.values())
    ok = all(r.passes and len(r.trial_errors) == 5 for r in reports.values()) and 0.5 <= ratio <= 2.0
    assert criterion(12, ok, f"worst trial error {worst:.2e}; sigma_min {smin[0.1]:.3f} (h=0.1), "
                             f"{smin[0.05]:.3f} (h=0.05), ratio {ratio:.3f}")


DETERMINISM_CONFIG = """\
[metric]
link = sphere
[grid]
nx = 8
ny = 8
x_min = 0.05
[operator]
h = 0.2, 0.1
[solver]
trials = 1
[seed]
value = 11
"""


@pytest.mark.slow
def test_criterion_13_determinism(criterion, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(DETERMINISM_CONFIG)
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = []
    for o in outs:
        proc = subprocess.run([sys.executable, "-m", "conic_xray.cli", "all", "--config", str(cfg),
                               "--out", str(o), "--threads", "1"], capture_output=True, text=True)
        codes.append(proc.returncode)
    names = sorted(p.name for p in outs[0].iterdir())
    same_names = names == sorted(p.name for p in outs[1].iterdir())
    differing = [n for n in names if same_names and (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = codes == [0, 0] and same_names and not differing and len(names) > 5
    assert criterion(13, ok, f"exit codes {codes}; {len(names)} files, differing: {differing or 'none'}")
