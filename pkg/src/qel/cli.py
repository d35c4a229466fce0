"""Command line front end: ``qel <command> --config run.json [--out DIR]``.

Exit codes: 0 success, 1 numerical non-convergence, 2 configuration error,
3 internal invariant violation.
"""
import argparse
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__, plotting
from .balancing import (BalanceProblem, BalancingError, CertificateError, descend,
                        donaldson_iteration, self_consistent_A, weak_chow_certificate)
from .config import ConfigError, load
from .exact import NonPolynomialError
from .io import CompareError, RunManifest, compare, load_manifest, write_csv, write_json
from .quantisation import (FactorisationError, HermitianForm, PositivityError, bergman, fs, hilb,
                           rawnsley_check)
from .stability import (NormalisationError, chow_weight, df_invariant, df_of,
                        equivariant_density, extremal_normalisation, fit_expansions,
                        futaki_integral, inner_product_table, limit_weight_check,
                        relative_df_chi, scan_directions)
from .toric import PotentialError, build_quadrature, potential, scalar_curvature

log = logging.getLogger("qel")

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
COMMANDS = ("balance", "bergman", "equiv-rr", "df", "relative-df", "inner", "fit", "futaki",
            "limit-weight", "compare")


class NotConverged(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


def _threads():
    try:
        return max(1, int(os.environ.get("QEL_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    """Ordered map, optionally threaded through ``QEL_THREADS``."""
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _directions(cfg, default=None):
    dirs = cfg.get("directions")
    if dirs is None:
        if default is not None:
            return default
        n = cfg.polytope.dim
        return [tuple(int(i == j) for j in range(n)) for i in range(n)]
    return [tuple(Fraction(str(c)) if isinstance(c, str) else c for c in d) for d in dirs]


def _dir_label(d):
    return "(" + ",".join(str(Fraction(c).limit_denominator(10**6)) if not isinstance(c, int) else str(c)
                          for c in d) + ")"


class Context:
    def __init__(self, cfg, command, out):
        self.cfg = cfg
        self.out = out
        self.quad = build_quadrature(cfg.polytope, order=cfg.quadrature_order)
        self.figures = cfg.get("figures", True)
        self.manifest = RunManifest(command, cfg.hash, cfg.raw, out)
        self._model = None

    @property
    def model(self):
        if self._model is None:
            self._model = potential(self.cfg.polytope, self.cfg.perturbation, self.quad)
        return self._model

    def path(self, name, kind):
        return self.manifest.add(os.path.join(self.out, name), kind)

    def csv(self, name, columns, rows, meta=None):
        return write_csv(self.path(name, "csv"), columns, rows, meta)

    def json(self, name, obj):
        return write_json(self.path(name, "json"), obj)

    def figure(self, name, fn, *args, **kwargs):
        if self.figures:
            fn(self.path(name, "figure"), *args, **kwargs)

    def tol(self, key, default=None):
        return self.cfg.tolerances.get(key, default)


# --------------------------------------------------------------------------- balance

def _generator(ctx, problem):
    spec = ctx.cfg.get("generator") or {}
    if "diagonal" in spec:
        return np.asarray(spec["diagonal"], dtype=float)
    lam = np.asarray([float(Fraction(str(c))) for c in spec.get("direction", [1] * problem.n)])
    w = problem.basis.points @ lam
    return float(spec.get("scale", 0.0)) * (w - w.mean())


def _starts(ctx, N):
    rng = np.random.default_rng(ctx.cfg.seed)
    forms = [None]
    for _ in range(ctx.cfg.starts - 1):
        forms.append(HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.5, size=N))))
    return forms


def _balance_level(ctx, k):
    cfg = ctx.cfg
    sub = cfg.get("subtorus")
    torus = None if sub is None else [[float(Fraction(str(c))) for c in d] for d in sub]
    problem = BalanceProblem(cfg.polytope, k, mode=cfg.mode, quadrature=ctx.quad,
                             angles=cfg.angles, torus=torus)
    if cfg.mode == "fixed-A":
        problem.set_generator(_generator(ctx, problem))
    tol = ctx.tol("residual")
    max_iter = cfg.get("max_iter", 5000)
    runs = []
    for start, H0 in enumerate(_starts(ctx, problem.N)):
        if cfg.mode == "plain" and cfg.get("method") == "t-operator":
            form, history, ok = donaldson_iteration(cfg.polytope, k, H0, tol=tol or 1e-10,
                                                    max_iter=max_iter, quadrature=ctx.quad)
            report = descend(problem, form, tol=float("inf"), max_iter=0)
            report.converged, report.iterations = ok, len(history) - 1
            report.residual_trace = history
            report.energy_trace = []
        elif cfg.mode == "self-consistent-A":
            report = self_consistent_A(problem, H0, tol=ctx.tol("outer", 1e-6), inner_tol=tol,
                                       max_iter=max_iter)
        else:
            report = descend(problem, H0, tol=tol, max_iter=max_iter)
        runs.append((start, report))
    return problem, runs


def cmd_balance(ctx):
    cfg = ctx.cfg
    failures = []
    results = _map(lambda k: (k, _try(lambda: _balance_level(ctx, k))), cfg.levels)
    summary_rows = []
    for k, (outcome, err) in results:
        if err is not None:
            ctx.manifest.errors.append({"k": k, "error": str(err)})
            failures.append(err)
            continue
        problem, runs = outcome
        fixed_points = []
        for start, report in runs:
            tag = f"k{k}" if start == 0 else f"k{k}_start{start}"
            record = report.to_json()
            metric = fs(report.form, cfg.polytope, k, ctx.quad, cfg.angles)
            if cfg.mode == "plain":
                record["sup_rho_bar_dev"] = float(np.max(np.abs(metric.rho_bar() - 1)))
            if report.converged:
                cert = weak_chow_certificate(problem, report, tol=ctx.tol("certificate", 1e-8))
                record["certificate"] = cert.to_json()
                labels = list(record["certificate"]["b_nu"])
                ctx.figure(f"b_nu_{tag}.png", plotting.weights, labels,
                           [record["certificate"]["b_nu"][l] for l in labels], title=f"b_nu, k={k}")
                fixed_points.append(np.log(report.form.diag if report.form.diagonal
                                           else report.form.eigenvalues))
            else:
                failures.append(NotConverged(f"k={k} start {start}: residual {report.residual:.3e}"))
            record["A"] = report.A
            record["outer_rounds"] = report.outer
            ctx.json(f"balance_{tag}.json", record)
            ctx.csv(f"trace_{tag}.csv", ["iteration", "residual", "energy"],
                    [(i, r, report.energy_trace[i] if i < len(report.energy_trace) else "")
                     for i, r in enumerate(report.residual_trace)],
                    meta={"k": k, "mode": cfg.mode})
            ctx.figure(f"convergence_{tag}.png", plotting.convergence, report.residual_trace,
                       report.energy_trace or None, title=f"k={k}, {cfg.mode}")
            ctx.manifest.record(tag, {kk: record[kk] for kk in
                                      ("residual", "converged", "C_A", "c_normalised",
                                       "xi_weights", "iterations") if kk in record})
            summary_rows.append((k, start, report.residual, int(report.converged), report.C_A,
                                 report.c_normalised, record.get("sup_rho_bar_dev", "")))
        distinct = _distinct(fixed_points)
        ctx.manifest.record(f"k{k}_fixed_points", distinct)
    ctx.csv("balance_summary.csv", ["k", "start", "residual", "converged", "C_A", "c_normalised",
                                    "sup_rho_bar_dev"], summary_rows, meta={"mode": cfg.mode})
    _raise_first(failures)


def _distinct(logs, tol=1e-6):
    """Number of distinct fixed points up to the determinant gauge."""
    reps = []
    for v in logs:
        v = v - v.mean()
        if not any(np.max(np.abs(v - r)) < tol for r in reps):
            reps.append(v)
    return len(reps)


def _try(fn):
    try:
        return fn(), None
    except (BalancingError, NotConverged, FactorisationError, PositivityError) as exc:
        if isinstance(exc, CertificateError):
            raise
        return None, exc


def _raise_first(failures):
    if failures:
        raise NotConverged("; ".join(str(f) for f in failures))


# --------------------------------------------------------------------------- bergman

def cmd_bergman(ctx):
    cfg, model, quad = ctx.cfg, ctx.model, ctx.quad
    s, sbar = scalar_curvature(model, quad)
    rows = []

    def level(k):
        sample = bergman(model, hilb(model, k, quad), quad)
        expansion = 1 + (s - sbar) / (4 * np.pi * k)
        return (k, float(np.max(np.abs(sample.rho_bar - 1))),
                float(np.max(np.abs(sample.rho_bar - expansion))),
                rawnsley_check(model, k, quad), sample, expansion)

    out = _map(level, cfg.levels)
    for k, dev, rem, raw, sample, expansion in out:
        rows.append((k, dev, rem, raw))
        ctx.manifest.record(f"k{k}", {"sup_rho_bar_dev": dev, "expansion_remainder": rem,
                                      "rawnsley": raw})
    ctx.csv("bergman_series.csv", ["k", "sup_rho_bar_dev", "expansion_remainder", "rawnsley"], rows,
            meta={"Sbar": float(sbar)})
    ks = np.array([r[0] for r in rows], float)
    rems = np.array([r[2] for r in rows])
    slope = None
    if len(ks) > 1 and np.all(rems > 0):
        slope = float(np.polyfit(np.log(ks), np.log(rems), 1)[0])
        ctx.manifest.record("remainder_slope", slope)
        ctx.figure("bergman_remainder.png", plotting.loglog_slope, ks, rems, slope=slope,
                   title="Bergman expansion remainder")
    k, _, _, _, sample, expansion = out[-1]
    if cfg.polytope.dim == 1:
        x = quad.nodes[:, 0]
        ctx.csv(f"bergman_nodes_k{k}.csv", ["x", "rho_bar", "expansion", "S"],
                zip(x, sample.rho_bar, expansion, s), meta={"k": k})
        ctx.figure(f"bergman_profile_k{k}.png", plotting.profile, x,
                   {"rho_bar": sample.rho_bar, "1 + (S - Sbar)/4pi k": expansion},
                   ylabel="density", title=f"k={k}")
    else:
        ctx.csv(f"bergman_nodes_k{k}.csv", ["x", "y", "weight", "rho_bar", "expansion", "S"],
                zip(quad.nodes[:, 0], quad.nodes[:, 1], quad.weights, sample.rho_bar, expansion, s),
                meta={"k": k})


# --------------------------------------------------------------------------- stability

def cmd_fit(ctx):
    cfg = ctx.cfg
    levels = cfg.levels if len(cfg.levels) >= cfg.polytope.dim + 3 else None
    rows, fits = [], {}
    for d in _directions(ctx.cfg):
        fit = fit_expansions(cfg.polytope, d, levels, shift=cfg.get("shift", 0))
        label = _dir_label(d)
        fits[label] = fit.to_json()
        for k in fit.ks:
            rows.append((label, k, fit.N(k), fit.trace(k)))
        n1 = cfg.polytope.dim + 1
        ctx.figure(f"fit_{len(fits)}.png", plotting.sequence, fit.ks,
                   [float(fit.trace(k) / k**n1) for k in fit.ks], target=float(fit.b[0]),
                   ylabel="tr A_k / k^(n+1)", title=f"direction {label}")
    ctx.json("fits.json", fits)
    ctx.csv("fit_sequences.csv", ["direction", "k", "N", "trace"], rows)
    ctx.manifest.record("fits", {k: {"a": v["a"], "b": v["b"]} for k, v in fits.items()})


def cmd_df(ctx):
    cfg = ctx.cfg
    levels = cfg.levels if len(cfg.levels) > 1 else list(range(1, 13))
    rows, out = [], {}
    for d in _directions(cfg):
        fit = fit_expansions(cfg.polytope, d, shift=cfg.get("shift", 0))
        df = df_invariant(fit)
        label = _dir_label(d)
        chow = [chow_weight(fit, r) for r in levels]
        for r, c in zip(levels, chow):
            rows.append((label, r, c, float(c - df)))
        gaps = np.abs([float(c - df) for c in chow])
        slope = None
        if df != 0 and np.all(gaps > 0):
            slope = float(np.polyfit(np.log(levels), np.log(gaps), 1)[0])
        out[label] = {"DF": df, "DF_float": float(df), "chow_gap_slope": slope}
        ctx.figure(f"chow_{label.strip('()').replace(',', '_').replace('/', 'o')}.png",
                   plotting.sequence, levels, [float(c) for c in chow], target=float(df),
                   ylabel="Chow weight", title=f"direction {label}")
    ctx.json("df.json", out)
    ctx.csv("chow_sequence.csv", ["direction", "r", "chow", "chow_minus_DF"], rows)
    ctx.manifest.record("df", out)


def cmd_inner(ctx):
    cfg = ctx.cfg
    dirs = _directions(cfg)
    actions = {_dir_label(d): d for d in dirs}
    levels = cfg.levels if len(cfg.levels) >= cfg.polytope.dim + 4 else None
    table = inner_product_table(cfg.polytope, actions, levels)
    vals = table.values
    bad = []
    for i in range(len(dirs)):
        if vals[i][i] < 0:
            bad.append(f"<{table.names[i]},{table.names[i]}> < 0")
        for j in range(len(dirs)):
            if vals[i][j] != vals[j][i]:
                bad.append(f"asymmetric pair {i},{j}")
            if vals[i][j] ** 2 > vals[i][i] * vals[j][j]:
                bad.append(f"Cauchy-Schwarz fails for {table.names[i]}, {table.names[j]}")
    ctx.json("inner.json", table.to_json())
    ctx.csv("inner.csv", ["a", "b", "value", "value_float"],
            [(table.names[i], table.names[j], vals[i][j], float(vals[i][j]))
             for i in range(len(dirs)) for j in range(len(dirs))])
    ctx.figure("inner.png", plotting.weights,
               [f"{a}|{b}" for a in table.names for b in table.names],
               [float(v) for row in vals for v in row], title="inner products")
    ctx.manifest.record("inner", table.to_json()["values"])
    if bad:
        raise InvariantViolation("; ".join(bad))


def cmd_relative_df(ctx):
    cfg = ctx.cfg
    ex = extremal_normalisation(cfg.polytope, ctx.model, ctx.quad)
    dirs = _directions(cfg, default=scan_directions(cfg.polytope, 2))
    rows = []
    for d in dirs:
        v = relative_df_chi(cfg.polytope, d, ex)
        angle = math.atan2(float(d[1]), float(d[0])) if len(d) == 2 else float(np.sign(float(d[0])))
        rows.append((_dir_label(d), angle, float(df_of(cfg.polytope, d)), v, float(v)))
    ctx.json("extremal.json", ex.to_json())
    ctx.csv("relative_df_scan.csv", ["direction", "angle", "DF", "DF_chi", "DF_chi_float"], rows)
    ctx.figure("relative_df_scan.png", plotting.scan, [r[1] for r in rows], [r[4] for r in rows],
               title="relative DF over torus directions")
    minimum = min(r[4] for r in rows)
    ctx.manifest.record("extremal", ex.to_json())
    ctx.manifest.record("min_DF_chi", minimum)
    if minimum < -ctx.tol("certificate", 1e-6):
        log.warning("relative DF negative in the scan: %.3e", minimum)


def cmd_futaki(ctx):
    cfg, model = ctx.cfg, ctx.model
    rows, out = [], {}
    for d in _directions(cfg):
        lam = [float(Fraction(c)) for c in d]
        fut = futaki_integral(model, lam, shift=cfg.get("shift", 0.0), quadrature=ctx.quad)
        df = df_of(cfg.polytope, tuple(-Fraction(c) for c in d))
        label = _dir_label(d)
        rows.append((label, fut, float(df), fut - float(df)))
        out[label] = {"futaki_integral": fut, "DF": df, "difference": fut - float(df)}
    ctx.json("futaki.json", out)
    ctx.csv("futaki.csv", ["direction", "futaki_integral", "DF", "difference"], rows)
    ctx.figure("futaki.png", plotting.weights, [r[0] for r in rows], [r[1] for r in rows],
               title="Futaki integral")
    ctx.manifest.record("futaki", out)


def cmd_equiv_rr(ctx):
    cfg, model = ctx.cfg, ctx.model
    shift = cfg.get("shift", 0.0)
    rows = []
    for d in _directions(cfg):
        lam = [float(Fraction(c)) for c in d]
        for k in cfg.levels:
            e = equivariant_density(model, lam, k, shift=shift, quadrature=ctx.quad)
            rows.append((_dir_label(d), k, float(e.lhs), e.rhs, float(e.lhs) - e.rhs,
                         e.pointwise_error))
            ctx.manifest.record(f"{_dir_label(d)}_k{k}", e.to_json())
    ctx.csv("equivariant_density.csv", ["direction", "k", "lhs", "rhs", "difference",
                                        "pointwise_error"], rows, meta={"shift": shift})
    for i, d in enumerate(_directions(cfg)):
        mine = [r for r in rows if r[0] == _dir_label(d)]
        ctx.figure(f"equivariant_density_{i + 1}.png", plotting.profile, [r[1] for r in mine],
                   {"lattice side": [r[2] for r in mine], "integral side": [r[3] for r in mine]},
                   xlabel="k", title=f"direction {_dir_label(d)}")
    worst = max(abs(r[4]) for r in rows)
    worst_pt = max(r[5] for r in rows)
    tol = ctx.tol("certificate", 1e-8)
    if max(worst, worst_pt) > tol:
        raise InvariantViolation(f"equivariant density mismatch {worst:.3e} / pointwise {worst_pt:.3e}")


def cmd_limit_weight(ctx):
    cfg = ctx.cfg
    ex = extremal_normalisation(cfg.polytope)

    def level(k):
        problem = BalanceProblem(cfg.polytope, k, mode="self-consistent-A", quadrature=ctx.quad)
        return self_consistent_A(problem, tol=ctx.tol("outer", 1e-6), inner_tol=ctx.tol("residual"),
                                 max_iter=cfg.get("max_iter", 5000))

    reports = _map(level, cfg.levels)
    default = [tuple(ex.chi)] if not ex.is_zero else [tuple(1 if i == 0 else 0
                                                            for i in range(cfg.polytope.dim))]
    rows, out = [], {}
    for d in _directions(cfg, default=default):
        lw = limit_weight_check(cfg.polytope, reports, d, ex)
        label = _dir_label(d)
        out[label] = lw.to_json()
        for k, v in zip(lw.ks, lw.sequence):
            rows.append((label, k, v))
        ctx.figure(f"limit_weight_{len(out)}.png", plotting.sequence, lw.ks, lw.sequence,
                   limit=lw.limit, target=float(lw.target), ylabel="(V/N) tr(B M^-1)",
                   title=f"direction {label}")
    ctx.json("limit_weight.json", out)
    ctx.csv("limit_weight.csv", ["direction", "k", "value"], rows)
    ctx.manifest.record("limit_weight", out)


def cmd_compare(ctx):
    spec = ctx.cfg.get("compare")
    if not spec:
        raise ConfigError("compare needs a 'compare': {'a': ..., 'b': ...} block")
    try:
        report, ok = compare(load_manifest(spec["a"]), load_manifest(spec["b"]),
                             tol=ctx.tol("compare", 1e-8))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from None
    except CompareError as exc:
        raise ConfigError(str(exc)) from None
    ctx.json("compare.json", report)
    ctx.manifest.record("compare", {"max": report["max"], "ok": ok})
    if not ok:
        raise NotConverged(f"differences exceed tolerance (max {report['max']:.3e})")


HANDLERS = {
    "balance": cmd_balance, "bergman": cmd_bergman, "equiv-rr": cmd_equiv_rr, "df": cmd_df,
    "relative-df": cmd_relative_df, "inner": cmd_inner, "fit": cmd_fit, "futaki": cmd_futaki,
    "limit-weight": cmd_limit_weight, "compare": cmd_compare,
}


def _prepare_out(out):
    """Create ``out``; files left by an earlier qel run there are replaced."""
    os.makedirs(out, exist_ok=True)
    manifest = os.path.join(out, "manifest.json")
    previous = set()
    if os.path.exists(manifest):
        try:
            previous = set(load_manifest(manifest).get("files", {})) | {"manifest.json"}
        except (OSError, json.JSONDecodeError):
            previous = set()
    stray = []
    for root, _, files in os.walk(out):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), out)
            if rel not in previous:
                stray.append(rel)
    if stray:
        raise ConfigError(f"output directory {out} holds files from elsewhere: {sorted(stray)[:5]}")
    for rel in previous:
        path = os.path.join(out, rel)
        if os.path.exists(path):
            os.remove(path)


def run(command, config_path, out=None):
    """Run one command; returns ``(exit_code, manifest)``."""
    try:
        cfg = load(config_path)
        out = out or cfg.get("out") or os.path.join("qel-out", command)
        _prepare_out(out)
        ctx = Context(cfg, command, out)
        if cfg.perturbation is not None:
            ctx.model  # reject a non-convex potential before any work
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG, None
    except PotentialError as exc:
        log.error("invalid potential: %s", exc)
        return EXIT_CONFIG, None
    code = EXIT_OK
    start = time.perf_counter()
    try:
        HANDLERS[command](ctx)
    except ConfigError as exc:
        code = EXIT_CONFIG
        ctx.manifest.errors.append(str(exc))
    except PotentialError as exc:
        code = EXIT_CONFIG
        ctx.manifest.errors.append(f"invalid potential: {exc}")
    except (CertificateError, NormalisationError, NonPolynomialError, InvariantViolation) as exc:
        code = EXIT_INVARIANT
        ctx.manifest.errors.append(f"invariant violation: {exc}")
    except (NotConverged, BalancingError, FactorisationError, PositivityError) as exc:
        code = EXIT_NONCONVERGENCE
        ctx.manifest.errors.append(f"not converged: {exc}")
    ctx.manifest.wall_times[command] = round(time.perf_counter() - start, 3)
    if code != EXIT_OK:
        ctx.manifest.status = "partial"
        for e in ctx.manifest.errors:
            log.error("%s", e)
    ctx.manifest.write()
    return code, ctx.manifest


def build_parser():
    parser = argparse.ArgumentParser(prog="qel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (default qel-out/<command>)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    code, manifest = run(args.command, args.config, args.out)
    if manifest is not None:
        print(json.dumps({"status": manifest.status, "out": manifest.out_dir,
                          "files": len(manifest.files), "exit": code}))
    return code


if __name__ == "__main__":
    sys.exit(main())
