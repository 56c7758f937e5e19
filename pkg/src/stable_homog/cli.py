"""Command-line entry point: ``stable-homog <command> [options]``.

Exit codes: 0 on success, 1 on usage errors (bad flags, missing files,
invalid configurations), 2 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, harness
from .environment import Environment, box_pairs, parse_law
from .errors import ConfigurationError, DomainError, StableHomogError
from .lattice import GridFunction, LatticeBox, _fraction, write_grid_binary, write_grid_csv
from .operators import NonlocalOperator, check_alpha
from .reference import SmoothBump, make_test_function
from .solvers import solve_resolvent

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ints(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _env(seed, law, dim):
    return Environment(seed, parse_law(law), dim)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def _write_rows(rows: list, path, extra_summary: dict = None):
    """Write dict rows to CSV and a JSON summary next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    summary = {"rows": len(rows), "n_ok": sum(r.get("status") == "ok" for r in rows),
               "n_censored": sum(r.get("status") == "censored" for r in rows)}
    summary.update(extra_summary or {})
    json_path = path.with_suffix(".json")
    json_path.write_text(_dump(summary) + "\n")
    return path, json_path


def _seed_means(rows, key, value):
    """Mean of ``value`` over ok rows grouped by ``key``."""
    groups = {}
    for r in rows:
        if r.get("status") == "ok" and np.isfinite(r[value]):
            groups.setdefault(r[key], []).append(r[value])
    return {str(k): float(np.mean(v)) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# commands


def cmd_env_sample(a):
    env = _env(a.seed, a.law, a.dim)
    xs, ys, w = box_pairs(env, a.box)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "w"])
        for x, y, v in zip(xs, ys, w):
            wr.writerow([" ".join(map(str, x)), " ".join(map(str, y)), repr(float(v))])
    print(f"wrote {len(w)} pairs to {out}")


def _bump(a):
    center = a.center if a.center else [0.0] * a.dim
    if len(center) != a.dim:
        raise UsageError("--center needs one coordinate per dimension")
    return SmoothBump(tuple(center), a.radius)


def cmd_ref_testfn(a):
    box = LatticeBox(a.k, _fraction(a.box), a.dim)
    tf = make_test_function(_bump(a), a.lam, a.alpha, box)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grid_csv(GridFunction(box, np.column_stack([tf.f.values, tf.u.values])), out)
    report = {"alpha": a.alpha, "lambda": a.lam, "k": a.k, "box_m": str(box.M), "points": box.size,
              "columns": ["f", "g"], "accuracy_estimate": tf.accuracy}
    out.with_suffix(".json").write_text(_dump(report) + "\n")
    print(_dump(report))


def cmd_resolve(a):
    env = None if a.law == "constant" and a.variant == "reference" else _env(a.seed, a.law, a.dim)
    box = LatticeBox(a.k, _fraction(a.box), a.dim)
    g = _bump(a)
    tf = make_test_function(g, a.lam, a.alpha, box)
    op = NonlocalOperator(box, a.alpha, env, a.variant, a.boundary)
    u, rep = solve_resolvent(op, a.lam, tf.f, a.tol, precond="jacobi" if a.jacobi else None)
    err = float(np.sqrt(np.sum((u.values - tf.u.values) ** 2) * a.k ** (-a.dim)))
    record = {"alpha": a.alpha, "k": a.k, "seed": a.seed, "law": a.law, "boundary": a.boundary,
              "l2_error": err, "u_norm": u.norm(), "f_norm": tf.f.norm(), "iterations": rep.iterations,
              "residual": rep.residual}
    if a.out:
        out = Path(a.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        (write_grid_binary if out.suffix == ".bin" else write_grid_csv)(u, out)
        out.with_suffix(".json").write_text(_dump(record) + "\n")
    print(_dump(record))


def cmd_corrector(a):
    env = _env(a.seed, a.law, a.dim)
    field = analysis.compute_corrector(env, a.alpha, a.m, a.truncated, tol=a.tol)
    record = {"m": a.m, "energy": field.energy, "normalized_energy": field.normalized_energy,
              "iterations": field.report.iterations, "residual": field.report.residual,
              "radius": field.meta["radius"], "truncated": a.truncated, "seed": a.seed, "law": a.law}
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grid_binary(field.values, out)
    out.with_suffix(".json").write_text(_dump(record) + "\n")
    print(_dump(record))


def cmd_poincare(a):
    rows = []
    for seed in a.seeds:
        env = _env(seed, a.law, a.dim)
        for r in a.rs:
            rec = analysis.poincare_statistic(env, a.alpha, r)
            rows.append(dict(alpha=a.alpha, d=a.dim, law=a.law, seed=seed, r=r, gap=rec.gap,
                             box_size=rec.box_size, statistic=rec.statistic, status=rec.status))
    ratios = {}
    for seed in a.seeds:
        s = [row["statistic"] for row in rows if row["seed"] == seed and row["status"] == "ok"]
        ratios[str(seed)] = max(s) / min(s) if s else None
    _finish(a, rows, {"mean_statistic": _seed_means(rows, "r", "statistic"), "max_over_min_by_seed": ratios})


def cmd_concentration(a):
    rows = []
    for seed in a.seeds:
        env = _env(seed, a.law, a.dim)
        for rec in analysis.block_average_concentration(env, a.alpha, a.m, a.ks, a.theta):
            rows.append(dict(alpha=a.alpha, d=a.dim, law=a.law, seed=seed, m=a.m, k=rec.k_sub,
                             statistic=rec.statistic, bound=rec.bound, theta=rec.theta, status=rec.status))
    means = _seed_means(rows, "k", "statistic")
    vals = list(means.values())
    factors = [b / x if x > 0 else None for x, b in zip(vals, vals[1:])]
    _finish(a, rows, {"mean_statistic": means, "decay_factors": factors})


def cmd_opdiff(a):
    rows = []
    g = _bump(a)
    seeds = a.seeds if a.which != "ref_vs_continuum" else [a.seeds[0]]
    for seed in seeds:
        env = None if a.which == "ref_vs_continuum" else _env(seed, a.law, a.dim)
        for k in a.ks:
            rec = analysis.operator_difference_norm(env, a.alpha, k, a.which, g, _fraction(a.box))
            rows.append(dict(alpha=a.alpha, d=a.dim, law=a.law, seed=seed, k=k, which=a.which,
                             sq_norm=rec.sq_norm, status=rec.status))
    means = _seed_means(rows, "k", "sq_norm")
    extra = {"mean_sq_norm": means}
    if len(means) >= 2 and all(v > 0 for v in means.values()):
        x = np.log([float(k) for k in means])
        y = np.log(list(means.values()))
        extra["slope"] = float(np.polyfit(x, y, 1)[0])
    _finish(a, rows, extra)


def cmd_twoscale(a):
    rows = []
    g = _bump(a)
    for seed in a.seeds:
        env = _env(seed, a.law, a.dim)
        cache = {}
        for k in a.ks:
            m = analysis.corrector_level(k) + 2
            try:
                if m not in cache:
                    cache[m] = analysis.compute_corrector(env, a.alpha, m, tol=a.tol)
                rec = analysis.two_scale_diagnostic(env, a.alpha, k, g, a.lam, cache[m], _fraction(a.box), a.tol)
                rows.append(dict(alpha=a.alpha, d=a.dim, law=a.law, seed=seed, k=k, m=rec.m,
                                 expansion_gap=rec.expansion_gap, solution_gap=rec.solution_gap,
                                 bound=rec.bound, status="ok", reason=""))
            except StableHomogError as exc:
                rows.append(dict(alpha=a.alpha, d=a.dim, law=a.law, seed=seed, k=k, m=m - 2,
                                 expansion_gap=math.nan, solution_gap=math.nan, bound=math.nan,
                                 status="censored", reason=str(exc)))
    _finish(a, rows, {"mean_expansion_gap": _seed_means(rows, "k", "expansion_gap"),
                      "mean_solution_gap": _seed_means(rows, "k", "solution_gap")})


def _finish(a, rows, extra):
    params = {k: v for k, v in vars(a).items() if k not in ("func", "out") and not callable(v)}
    csv_path, json_path = _write_rows(rows, a.out, {"parameters": params, **extra})
    print(f"wrote {csv_path} and {json_path}")


def cmd_sweep(a):
    try:
        config = harness.ExperimentConfig.load(a.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ConfigurationError as exc:
        raise UsageError(f"{a.config}: {exc}") from None
    if a.output_dir:
        config.output_dir = a.output_dir
    recs, csv_path, json_path = harness.sweep_to_files(config, a.stem, a.threads)
    n_ok = sum(r.ok for r in recs)
    print(f"{n_ok}/{len(recs)} records ok; wrote {csv_path} and {json_path}")


def cmd_fit(a):
    for p in a.inputs:
        if not Path(p).is_file():
            raise UsageError(f"records file not found: {p}")
    recs, h = harness.load_records(a.inputs)
    fit = harness.fit_rate(recs, a.alpha, a.d)
    print(f"slope {fit.slope:.6g} (stderr {fit.stderr:.3g}, {fit.n_points} levels, "
          f"predicted {fit.predicted_exponent:.6g}, {fit.branch})")
    if a.json:
        Path(a.json).write_text(_dump(harness.summary(recs, h, a.alpha, a.d)) + "\n")


def cmd_plot_data(a):
    src = Path(a.inputs)
    if not src.is_file():
        raise UsageError(f"file not found: {src}")
    lines = [ln for ln in src.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    cols = reader.fieldnames or []
    for c in (a.x, a.y):
        if c not in cols:
            raise UsageError(f"column {c!r} not in {src} (have {', '.join(cols)})")
    group = a.group if a.group in cols else None
    series = {}
    for row in reader:
        if row.get("status", "ok") != "ok":
            continue
        series.setdefault(row[group] if group else "all", []).append((float(row[a.x]), float(row[a.y])))
    out_dir = Path(a.out_dir or src.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    dat = out_dir / f"{src.stem}.dat"
    with dat.open("w") as fh:
        for name, pts in series.items():
            fh.write(f"# {group or 'series'} {name}\n")
            for x, y in sorted(pts):
                fh.write(f"{x!r} {y!r}\n")
            fh.write("\n\n")
    plots = ", ".join(f"'{dat.name}' index {i} with linespoints title '{name}'" for i, name in enumerate(series))
    script = out_dir / f"{src.stem}.gp"
    script.write_text(
        f"set logscale xy\nset xlabel '{a.x}'\nset ylabel '{a.y}'\nset key left bottom\n"
        f"set terminal pngcairo size 800,600\nset output '{src.stem}.png'\nplot {plots}\n"
    )
    print(f"wrote {dat} and {script}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stable-homog", description="Homogenization experiments for stable-like random walks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def physics(sp, law=True, seed=True):
        sp.add_argument("--alpha", type=float, required=True)
        sp.add_argument("--dim", type=int, default=2)
        if law:
            sp.add_argument("--law", default="constant")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    def bump(sp):
        sp.add_argument("--radius", type=float, default=1.0)
        sp.add_argument("--center", type=_floats, default=None)

    env = sub.add_parser("env", help="environment utilities")
    env_sub = env.add_subparsers(dest="env_command", parser_class=_Parser, required=True)
    s = env_sub.add_parser("sample", help="dump all pair weights of a box")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--law", required=True)
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--box", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_env_sample)

    ref = sub.add_parser("ref", help="continuum reference quantities")
    ref_sub = ref.add_subparsers(dest="ref_command", parser_class=_Parser, required=True)
    s = ref_sub.add_parser("testfn", help="sample f = lambda g - L g and g on a box")
    physics(s, law=False, seed=False)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--box", default="2")
    s.add_argument("--out", required=True)
    bump(s)
    s.set_defaults(func=cmd_ref_testfn)

    s = sub.add_parser("resolve", help="solve one resolvent problem and report the error")
    physics(s)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--box", default="2")
    s.add_argument("--boundary", choices=["killed", "restricted"], default="killed")
    s.add_argument("--variant", choices=["random", "reference"], default="random")
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--jacobi", action="store_true", help="diagonal preconditioning")
    s.add_argument("--out")
    bump(s)
    s.set_defaults(func=cmd_resolve)

    s = sub.add_parser("corrector", help="solve the local Poisson equation on B_{2^m}")
    physics(s)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--truncated", action="store_true", help="use V cut at 2^m")
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrector)

    s = sub.add_parser("poincare", help="sharp local Poincare statistic over radii")
    physics(s, seed=False)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--rs", type=_ints, default=[4, 8, 16])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_poincare)

    s = sub.add_parser("concentration", help="block averages of the potential")
    physics(s, seed=False)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--ks", type=_ints, required=True)
    s.add_argument("--theta", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_concentration)

    s = sub.add_parser("opdiff", help="operator-difference norms")
    physics(s, seed=False)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--ks", type=_ints, required=True)
    s.add_argument("--which", choices=analysis.WHICH, required=True)
    s.add_argument("--box", default="2")
    s.add_argument("--out", required=True)
    bump(s)
    s.set_defaults(func=cmd_opdiff)

    s = sub.add_parser("twoscale", help="two-scale expansion distances")
    physics(s, seed=False)
    s.add_argument("--seeds", type=_ints, default=[0])
    s.add_argument("--ks", type=_ints, required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--box", default="2")
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--out", required=True)
    bump(s)
    s.set_defaults(func=cmd_twoscale)

    s = sub.add_parser("sweep", help="run a rate sweep from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir", default=None)
    s.add_argument("--stem", default="sweep")
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("fit", help="fit the error rate of sweep CSVs")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--json", default=None, help="also write the summary here")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("plot-data", help="re-emit a CSV as gnuplot data with a script")
    s.add_argument("--in", dest="inputs", required=True)
    s.add_argument("--x", default="k")
    s.add_argument("--y", default="l2_error")
    s.add_argument("--group", default="seed")
    s.add_argument("--out-dir", default=None)
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if hasattr(args, "alpha") and args.alpha is not None and args.func is not cmd_fit:
            check_alpha(args.alpha)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StableHomogError, ValueError, ArithmeticError, MemoryError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
