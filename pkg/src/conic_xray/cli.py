"""Command-line runner: ``conic-xray <subcommand> --config PATH [--threads N] [--out DIR]``.

Config grammar: ``[section]`` headers, ``key = value`` lines, ``#`` comments.
Lists are comma separated. Unknown sections or keys, duplicates and malformed
numbers are errors that name the offending line.

Exit status: 0 when every check passes, 2 when a check fails, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .conic_manifold import ConicMetric
from .errors import ConfigError, ConicXrayError
from .geodesic_flow import RHO, TAU, T, X, TraceOptions, certify, cone_state_t, trace
from .inversion import ReconstructionConfig, build_operator, injectivity_probe, reconstruct, scaled_singular_values
from .link_geometry import LinkMetric, LinkState
from .normal_operator import Localizer, OperatorOptions, WeightSpec, write_matrix
from .onecusp_calculus import ellipticity_scan, write_scan_csv
from .xray_transform import AnalyticFunction, DecayClass, write_gridfunction

SUBCOMMANDS = ("trace", "certify", "forward", "symbol", "assemble", "invert", "sweep", "all")
EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2

# (type, default); a default of ``REQUIRED`` must be supplied
REQUIRED = object()
SCHEMA = {
    "metric": {
        "link": (str, REQUIRED),
        "radius": (float, 1.0),
        "amplitude": (float, 0.0),
        "harmonic_degree": (int, 2),
        "x0": (float, 0.5),
        "warp": ("floats", ()),
        "p": (float, 1.0),
    },
    "grid": {
        "nx": (int, REQUIRED),
        "ny": (int, REQUIRED),
        "x_min": (float, 0.02),
    },
    "operator": {
        "h": ("floats", (0.2, 0.1, 0.05)),
        "localizer": (str, "gaussian"),
        "support": (float, 4.0),
        "weight": (str, "one_cusp"),
        "x_bar": (float, 0.5),
        "n_dir": (int, 8),
    },
    "solver": {
        "method": (str, "cgnr"),
        "max_iters": (int, 5000),
        "rtol": (float, 1e-8),
        "f_decay": (float, 1.0),
        "threshold": (float, 0.05),
        "trials": (int, 5),
    },
    "output": {
        "dir": (str, "out"),
    },
    "seed": {
        "value": (int, 0),
    },
}


@dataclass
class ExperimentConfig:
    values: dict
    source_hash: str
    path: Path | None = None

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    def metric(self) -> ConicMetric:
        kind = self["metric.link"]
        R = self["metric.radius"]
        if kind == "circle":
            link = LinkMetric.circle(R)
        elif kind in ("sphere", "round_sphere"):
            link = LinkMetric.round_sphere(R)
        elif kind == "perturbed_sphere":
            link = LinkMetric.perturbed_sphere(R, self["metric.amplitude"], self["metric.harmonic_degree"])
        else:
            raise ConfigError(f"unknown link kind {kind!r} (circle, sphere, perturbed_sphere)")
        return ConicMetric(link, self["metric.x0"], tuple(self["metric.warp"]), self["metric.p"])

    def localizer(self) -> Localizer:
        return Localizer(self["operator.localizer"], self["operator.support"])

    def weight(self) -> WeightSpec:
        kind = self["operator.weight"]
        if kind == "one_cusp":
            return WeightSpec.one_cusp(self["metric.p"])
        if kind == "combined":
            return WeightSpec.combined(self["operator.x_bar"])
        raise ConfigError(f"unknown weight kind {kind!r}")

    def recon(self, h: float) -> ReconstructionConfig:
        return ReconstructionConfig(h=h, weight=self.weight(), loc=self.localizer(), solver=self["solver.method"],
                                    max_iters=self["solver.max_iters"], rtol=self["solver.rtol"],
                                    nx=self["grid.nx"], ny=self["grid.ny"], x_min=self["grid.x_min"],
                                    f_decay=self["solver.f_decay"],
                                    operator=OperatorOptions(n_dir=self["operator.n_dir"]))

    @property
    def hs(self) -> tuple:
        return tuple(self["operator.h"])


def _convert(kind, raw: str, key: str, line: int):
    try:
        if kind is str:
            return raw
        if kind is int:
            return int(raw)
        if kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "floats":
            return tuple(float(t) for t in raw.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"malformed value for {key!r}: {raw!r}", line) from None
    raise ConfigError(f"unsupported type for {key!r}", line)


def _validate(v: dict) -> None:
    checks = [
        (v["metric"]["x0"] > 0, "metric.x0 must be positive"),
        (v["metric"]["radius"] > 0, "metric.radius must be positive"),
        (v["metric"]["p"] > 0, "metric.p must be positive"),
        (v["grid"]["nx"] >= 2, "grid.nx must be at least 2"),
        (v["grid"]["ny"] >= 1, "grid.ny must be positive"),
        (0 < v["grid"]["x_min"] < v["metric"]["x0"], "grid.x_min must lie in (0, x0)"),
        (len(v["operator"]["h"]) > 0 and all(0 < h < 1 for h in v["operator"]["h"]), "operator.h must lie in (0, 1)"),
        (v["operator"]["support"] > 0, "operator.support must be positive"),
        (v["solver"]["max_iters"] > 0, "solver.max_iters must be positive"),
        (0 < v["solver"]["rtol"] < 1e-2, "solver.rtol must lie in (0, 1e-2)"),
        (v["solver"]["trials"] >= 0, "solver.trials must be nonnegative"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"range error: {msg}")


def parse_config_text(text: str, path: Path | None = None) -> ExperimentConfig:
    seen: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            seen.setdefault(section, {})
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, raw = (t.strip() for t in s.split("=", 1))
        if key not in SCHEMA[section]:
            known = ", ".join(sorted(SCHEMA[section]))
            raise ConfigError(f"unknown key {section}.{key} (known: {known})", lineno)
        if key in seen[section]:
            raise ConfigError(f"duplicate key {section}.{key}", lineno)
        seen[section][key] = _convert(SCHEMA[section][key][0], raw, f"{section}.{key}", lineno)
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (_, default) in keys.items():
            if key in seen.get(sec, {}):
                values[sec][key] = seen[sec][key]
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {sec}.{key}")
            else:
                values[sec][key] = default
    _validate(values)
    digest = hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()
    return ExperimentConfig(values, digest, path)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), path)


def defaults_help() -> str:
    lines = ["config keys (section.key = default):"]
    for sec, keys in SCHEMA.items():
        for key, (kind, default) in keys.items():
            d = "REQUIRED" if default is REQUIRED else (",".join(map(str, default)) if kind == "floats" else default)
            lines.append(f"  {sec}.{key} = {d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in items.items()))


def _summary(stage: str, items: dict) -> str:
    return f"[{stage}] " + " ".join(f"{k}={_fmt(v)}" for k, v in items.items())


@dataclass
class RunContext:
    config: ExperimentConfig
    out: Path
    threads: int
    constants: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    _metric: ConicMetric | None = None

    def metric(self, certified: bool = True) -> ConicMetric:
        if self._metric is None:
            self._metric = self.config.metric()
        if certified and self._metric.certificate is None:
            cert = certify(self._metric)
            self.constants.update(cert.constants())
        return self._metric

    def truth(self, metric: ConicMetric, C: float) -> AnalyticFunction:
        # degree-1 link harmonic: cos(theta) on the sphere, cos(phi) on the circle
        def fn(x, y):
            return 1.0 + 0.3 * np.cos(y[:, 0])

        return AnalyticFunction(metric, fn, DecayClass.gaussian(C, metric.p))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_trace(ctx: RunContext) -> int:
    metric = ctx.metric(certified=False)
    link = metric.link
    y = np.array([1.0, 0.5]) if link.dim == 2 else np.array([0.5])
    state = LinkState.from_direction(link, y, 0.3)
    rows = []
    worst_drift = 0.0
    worst_cone = 0.0
    for x0 in (0.1, 0.2, 0.3, 0.4):
        x0 = min(x0, metric.x0)
        for lam in (-0.6, -0.3, 0.0, 0.3, 0.6):
            path = trace(metric, x0, state, lam, TraceOptions())
            S = path.reduced_samples
            worst_drift = max(worst_drift, path.max_drift)
            if metric.is_exact_cone:
                xx, tt, mm = cone_state_t(x0, lam, S[:, T])
                err = max(np.max(np.abs(xx - S[:, X])), np.max(np.abs(tt - S[:, TAU])),
                          np.max(np.abs(mm - S[:, RHO])))
                worst_cone = max(worst_cone, float(err))
            for s in S:
                rows.append((x0, lam, s[T], s[X], s[TAU], s[RHO]))
    write_csv(ctx.out / "trace.csv", ("x_start", "lam", "t", "x", "tau", "mu_norm"), rows)
    ok = worst_drift < 1e-8 and worst_cone < 1e-8
    items = {"passes": ok, "paths": 20, "max_drift": worst_drift}
    if metric.is_exact_cone:
        items["cone_error"] = worst_cone
    print(_summary("trace", items))
    ctx.stages["trace"] = items
    return EXIT_OK if ok else EXIT_CHECK


def stage_certify(ctx: RunContext) -> int:
    metric = ctx.metric(certified=False)
    cert = certify(metric)
    ctx.constants.update(cert.constants())
    items = {"passes": cert.passes, "foliation": cert.foliation.passes, "conjugate_ok": cert.conjugate_ok,
             "x_lo": cert.x_range[0], "x_hi": cert.x_range[1]}
    items.update(cert.constants())
    write_kv(ctx.out / "certify.txt", items)
    print(_summary("certify", items))
    ctx.stages["certify"] = {"passes": cert.passes}
    return EXIT_OK if cert.passes else EXIT_CHECK


def _require_cert(ctx: RunContext, stage: str) -> ConicMetric | None:
    metric = ctx.metric()
    if not metric.certificate.passes:
        print(_summary(stage, {"passes": False, "reason": "metric not certified"}))
        ctx.stages[stage] = {"passes": False}
        return None
    return metric


def stage_forward(ctx: RunContext) -> int:
    metric = _require_cert(ctx, "forward")
    if metric is None:
        return EXIT_CHECK
    h = min(ctx.config.hs)
    cfg = ctx.config.recon(h)
    op = build_operator(metric, cfg)
    f = ctx.truth(metric, cfg.f_decay)
    data = op.family_data(f)
    write_gridfunction(f.on_grid(op.grid.x_nodes, op.grid.ygrid), ctx.out / "f_true.gfn")
    rows = []
    xn, yn = op.grid.x_nodes, op.grid.ygrid.nodes
    for i in range(xn.size):
        for a in range(op.lam_hat.size):
            for d in range(op.angles.size):
                rows.append((xn[i], *yn[0], op.lam_hat[a] * op.scale[i], d, data[i, 0, a, d]))
    ycols = tuple(f"y{k}" for k in range(yn.shape[1]))
    write_csv(ctx.out / "forward.csv", ("x", *ycols, "lam", "direction", "transform_over_envelope"), rows)
    ok = bool(np.all(np.isfinite(data)))
    items = {"passes": ok, "h": h, "paths": data.size, "max_abs": float(np.max(np.abs(data)))}
    print(_summary("forward", items))
    ctx.stages["forward"] = items
    return EXIT_OK if ok else EXIT_CHECK


def stage_symbol(ctx: RunContext) -> int:
    metric = ctx.metric(certified=False)
    x_mid = math.sqrt(ctx.config["grid.x_min"] * metric.x0)
    res = ellipticity_scan(metric, ctx.config.localizer(), [x_mid])
    write_scan_csv(res, ctx.out / "symbol_scan.csv")
    ctx.constants["c_prime"] = res.reference
    items = {"passes": res.passes, "supported": res.supported, "min_normalized": res.min_normalized,
             "threshold": res.threshold, "x": x_mid}
    print(_summary("symbol", items))
    ctx.stages["symbol"] = items
    return EXIT_OK if res.passes else EXIT_CHECK


def stage_assemble(ctx: RunContext) -> int:
    metric = _require_cert(ctx, "assemble")
    if metric is None:
        return EXIT_CHECK
    h = min(ctx.config.hs)
    cfg = ctx.config.recon(h)
    op = build_operator(metric, cfg)
    A = op.matrix()
    write_matrix(ctx.out / "matrix.nop", A, h, cfg.weight, op.grid)
    sv = scaled_singular_values(metric, cfg)
    items = {"passes": bool(sv[-1] > 0), "N": A.shape[0], "h": h, "sigma_min_scaled": sv[-1],
             "sigma_max_scaled": sv[0]}
    print(_summary("assemble", items))
    ctx.stages["assemble"] = items
    return EXIT_OK if items["passes"] else EXIT_CHECK


def _reconstruct_at(ctx: RunContext, metric: ConicMetric, h: float):
    cfg = ctx.config.recon(h)
    f = ctx.truth(metric, cfg.f_decay)
    return reconstruct(metric, cfg, f, f_true=f)


def stage_invert(ctx: RunContext) -> int:
    metric = _require_cert(ctx, "invert")
    if metric is None:
        return EXIT_CHECK
    h = min(ctx.config.hs)
    rep = _reconstruct_at(ctx, metric, h)
    write_gridfunction(rep.f_rec, ctx.out / "f_rec.gfn")
    write_csv(ctx.out / "residuals.csv", ("iteration", "relative_residual"), enumerate(rep.residuals))
    thr = ctx.config["solver.threshold"]
    ok = rep.converged and rep.relative_error < thr
    items = {"passes": ok, "h": h, "iterations": rep.iterations, "converged": rep.converged,
             "relative_error": rep.relative_error, "weighted_error": rep.weighted_error, "threshold": thr}
    probe = None
    if ctx.config["solver.trials"] > 0:
        probe = injectivity_probe(metric, ctx.config.recon(h), ctx.config["solver.trials"],
                                  seed=ctx.config["seed.value"], threshold=thr)
        items["probe_passes"] = probe.passes
        items["probe_worst"] = max(probe.trial_errors)
        ok = ok and probe.passes
        items["passes"] = ok
    write_kv(ctx.out / "invert.txt", items)
    print(_summary("invert", items))
    ctx.stages["invert"] = items
    return EXIT_OK if ok else EXIT_CHECK


def stage_sweep(ctx: RunContext) -> int:
    metric = _require_cert(ctx, "sweep")
    if metric is None:
        return EXIT_CHECK
    hs = sorted(ctx.config.hs, reverse=True)
    rows = []
    errs = []
    for h in hs:
        rep = _reconstruct_at(ctx, metric, h)
        sv = scaled_singular_values(metric, ctx.config.recon(h))
        rows.append((h, rep.relative_error, rep.iterations, sv[-1], sv[0]))
        errs.append(rep.relative_error)
    write_csv(ctx.out / "sweep.csv", ("h", "relative_error", "iterations", "sigma_min_scaled", "sigma_max_scaled"),
              rows)
    # error may not grow as h shrinks (10% slack between neighbours)
    mono = all(errs[k + 1] <= 1.1 * errs[k] + 1e-12 for k in range(len(errs) - 1))
    smins = [r[3] for r in rows]
    stable = all(smins[k + 1] >= 0.5 * smins[k] for k in range(len(smins) - 1))
    ok = mono and stable
    items = {"passes": ok, "monotone": mono, "sigma_stable": stable, "worst_error": max(errs)}
    print(_summary("sweep", items))
    ctx.stages["sweep"] = items
    return EXIT_OK if ok else EXIT_CHECK


STAGES = {
    "trace": stage_trace,
    "certify": stage_certify,
    "forward": stage_forward,
    "symbol": stage_symbol,
    "assemble": stage_assemble,
    "invert": stage_invert,
    "sweep": stage_sweep,
}


def write_manifest(ctx: RunContext, subcommand: str, status: int) -> None:
    if "C3" not in ctx.constants:
        try:
            ctx.metric(certified=True)
        except ConicXrayError:
            pass
    man = {
        "subcommand": subcommand,
        "status": status,
        "config_sha256": ctx.config.source_hash,
        "config": ctx.config.values,
        "versions": {"conic_xray": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "threads": ctx.threads,
        "constants": {k: (None if v is None or not math.isfinite(v) else float(v)) for k, v in ctx.constants.items()},
        "stages": ctx.stages,
    }
    (ctx.out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2, default=_fmt) + "\n")


def run_subcommand(name: str, config: ExperimentConfig, out: Path | None = None, threads: int | None = None) -> int:
    """Run one pipeline stage (or all of them) and write its artifacts and manifest."""
    if name not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {name!r}")
    out = Path(out if out is not None else config["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, out, threads or 1)
    names = list(STAGES) if name == "all" else [name]
    status = EXIT_OK
    with threadpool_limits(limits=ctx.threads):
        for n in names:
            status = max(status, STAGES[n](ctx))
    write_manifest(ctx, name, status)
    return status


def resolve_threads(arg: int | None) -> int:
    if arg is not None:
        if arg < 1:
            raise ConfigError("--threads must be positive")
        return arg
    env = os.environ.get("CONIC_XRAY_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"CONIC_XRAY_THREADS is not an integer: {env!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conic-xray",
        description="Geodesic X-ray transform toolkit for asymptotically conic collars.",
        epilog=defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, required=True, help="key=value config file with [section] headers")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread bound (default: $CONIC_XRAY_THREADS, then logical cores)")
    parser.add_argument("--out", type=Path, default=None, help="output directory (default: output.dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        return run_subcommand(args.subcommand, cfg, args.out, resolve_threads(args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ConicXrayError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
