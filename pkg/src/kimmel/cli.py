"""Command-line front end.

Each command pairs a simulation or solver run with its exact counterpart and
writes deterministic CSV/JSON reports into ``--out``. Exit codes:

    0   success
    1   an assertion requested with --assert failed
    2   config or flag schema violation
    3   degenerate offspring law given to a theorem command
    4   infeasible conditioning or empty ensemble
    5   solver failure (non-convergence, regime outside the solver's scope)
    10  I/O failure
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bpre, stats, treesim
from .model import ConfigError, OffspringLaw, classify_regime, load_law, summarize
from .pmf import Pmf, format_float

EXIT_OK, EXIT_ASSERT, EXIT_SCHEMA, EXIT_DEGENERATE = 0, 1, 2, 3
EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_IO = 4, 5, 10

EXPLORATORY = "exploratory: no theorem target"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- parsing ------------------------------------------------------------------


def parse_condition(text: str) -> tuple[str, int]:
    """'none' | 'horizon' | 'margin=D' | 'forever' -> (conditioning, margin)."""
    if text == "none":
        return "none", 0
    if text == "horizon":
        return "survive_at_horizon", 0
    if text == "forever":
        return "survive_forever", 0
    if text.startswith("margin="):
        try:
            delta = int(text.split("=", 1)[1])
        except ValueError:
            delta = -1
        if delta >= 0:
            return "survive_with_margin", delta
    raise CliError(EXIT_SCHEMA, f"--condition must be none, horizon, forever or margin=D, got {text!r}")


def parse_config(path, args: argparse.Namespace | None = None,
                 theorem: bool = False) -> tuple[OffspringLaw, treesim.SimConfig | None]:
    """Load the model config and build the simulation config from the flags."""
    try:
        law = load_law(path)
    except ConfigError as exc:
        raise CliError(EXIT_SCHEMA, f"config error: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
    if theorem and not law.admissible:
        raise CliError(EXIT_DEGENERATE,
                       "degenerate offspring law rejected: " + "; ".join(law.flags)
                       + ". Theorem commands need condition (1.2): P((Z0, Z1) = (1, 1)) < 1 "
                       "and (Z0, Z1) not a.s. in {(1, 0), (0, 1)}.")
    if args is None or getattr(args, "horizon", None) is None:
        return law, None
    conditioning, margin = parse_condition(args.condition)
    try:
        cfg = treesim.SimConfig(
            law=law, horizon=args.horizon, replicates=args.replicates, master_seed=args.seed,
            conditioning=conditioning, margin=margin or 6, sampler=args.sampler,
            k_top=args.k_top, tag_from=getattr(args, "tag_from", None))
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    return law, cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kimmel", description="Parasites in dividing cells: solvers and simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, horizon=None, condition="none", replicates=10000):
        p.add_argument("--config", required=True, help="model config (JSON)")
        p.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
        p.add_argument("--replicates", type=int, default=replicates,
                       help="accepted replicates per ensemble")
        p.add_argument("--horizon", type=int, default=horizon)
        p.add_argument("--kmax", type=int, default=bpre.DEFAULT_K, help="solver truncation bound")
        p.add_argument("--k-top", dest="k_top", type=int, default=64,
                       help="largest cell count tracked individually")
        p.add_argument("--condition", default=condition,
                       help="none | horizon | margin=D | forever")
        p.add_argument("--sampler", choices=treesim.SAMPLERS, default="rejection")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (results do not depend on it)")
        p.add_argument("--out", default="kimmel_report", help="report directory")
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        p.add_argument("--assert", dest="check", action="store_true",
                       help="exit 1 when the report's acceptance check fails")
        p.add_argument("--tolerance", type=float, default=None,
                       help="override the --assert threshold")
        return p

    p = sub.add_parser("classify", help="regime of a model or of a mean pair")
    p.add_argument("--config")
    p.add_argument("--m0", type=float)
    p.add_argument("--m1", type=float)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("csv", "json", "both"), default="json")

    p = common(sub.add_parser("yaglom", help="quasistationary law by power iteration"))
    p.add_argument("--tol", type=float, default=1e-12)
    common(sub.add_parser("simulate", help="ensemble of tree simulations"), horizon=10)
    p = common(sub.add_parser("compare", help="cell-type proportions against the solver"),
               horizon=16, condition="auto")
    p.add_argument("--sensitivity", action="store_true",
                   help="repeat with margins 2, 6, 10 and report the spread")
    common(sub.add_parser("recovery", help="fraction of contaminated cells"),
           horizon=20, condition="margin=6")
    p = common(sub.add_parser("sizebias", help="ancestor counts against the size-biased law"),
               condition="margin=6")
    p.add_argument("--n0", type=int, default=8)
    p.add_argument("--p", type=int, default=8)
    common(sub.add_parser("identity-check", help="mean contaminated fraction vs exact survival"),
           horizon=10)
    p = common(sub.add_parser("d4-explore", help="decay and growth fits (exploratory)"),
               horizon=12, condition="margin=6", replicates=2000)
    p.add_argument("--n-min", type=int, default=6, help="first generation of the decay fit")
    p.add_argument("--n-max", type=int, default=22, help="last generation of the decay fit")
    return parser


# -- report emission ----------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _csv(header: list[str], rows) -> str:
    out = io.StringIO(newline="")
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(_cell(v) for v in row) + "\n")
    return out.getvalue()


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or not math.isfinite(v):
        return ""
    return format_float(v)


def emit_report(out_dir, fmt: str, csv_files: dict[str, str], summary: dict) -> list[Path]:
    """Write CSV files and/or the JSON summary; raise CliError(10) on I/O failure."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt in ("csv", "both"):
            for name, text in sorted(csv_files.items()):
                path = out / name
                path.write_bytes(text.encode())
                written.append(path)
        if fmt in ("json", "both"):
            path = out / "summary.json"
            text = json.dumps(_clean(summary), sort_keys=True, indent=1, allow_nan=False) + "\n"
            path.write_bytes(text.encode())
            written.append(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from exc
    return written


def _echo(args: argparse.Namespace) -> dict:
    """Resolved flags; the thread count is left out since it cannot change results."""
    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "out", "func")}
    return {"command": args.command, "flags": d, "version": __version__, "seed": d.get("seed")}


def _bucket_label(k: int, k_top: int) -> str:
    return str(k + 1) if k < k_top else f">{k_top}"


def _pmf_vector(pmf: Pmf, k_top: int) -> np.ndarray:
    """Law on 1..k_top plus a > k_top bucket (mass at 0 must be zero)."""
    v = np.zeros(k_top + 1)
    n = min(k_top, pmf.K)
    v[:n] = pmf.mass[1 : n + 1]
    v[k_top] = max(0.0, 1.0 - math.fsum(v[:k_top]))
    return v


def _check(args, passed: bool, summary: dict, what: str) -> int:
    summary["assert"] = {"requested": bool(args.check), "passed": bool(passed), "check": what}
    return EXIT_ASSERT if args.check and not passed else EXIT_OK


def _ensemble(cfg: treesim.SimConfig, threads) -> stats.EnsembleStats:
    ens = treesim.run_ensemble(cfg, threads)
    if ens.accepted_count == 0:
        raise CliError(EXIT_INFEASIBLE, "empty ensemble after conditioning")
    return ens


def _yaglom(law, kmax, tol=1e-12) -> bpre.YaglomResult:
    res = bpre.yaglom_power_iteration(law, K=kmax, tol=tol)
    if not res.converged:
        raise bpre.SolverError("power iteration did not converge")
    return res


# -- commands -----------------------------------------------------------------


def cmd_classify(args) -> tuple[int, dict, dict]:
    if args.config:
        law, _ = parse_config(args.config)
        summ = summarize(law, tol=args.tol)
        regime = summ.regime
        report = {"summary": summ.as_dict()}
    else:
        if args.m0 is None or args.m1 is None:
            raise CliError(EXIT_SCHEMA, "classify needs --config or both --m0 and --m1")
        try:
            regime = classify_regime(args.m0, args.m1, args.tol)
        except ValueError as exc:
            raise CliError(EXIT_SCHEMA, str(exc)) from exc
        report = {"m0": args.m0, "m1": args.m1}
    report.update(regime=regime.label, sublabel=regime.sublabel,
                  boundary_proximity=list(regime.boundary_proximity))
    print(str(regime))
    csv = _csv(["label", "sublabel"], [[regime.label, regime.sublabel or ""]])
    return EXIT_OK, {"classify.csv": csv}, report


def cmd_yaglom(args):
    law, _ = parse_config(args.config, theorem=True)
    res = _yaglom(law, args.kmax, args.tol)
    rows = [[k, res.pmf.mass[k]] for k in range(1, res.pmf.K + 1)]
    rows.append(["overflow", res.pmf.overflow])
    report = {"decay_ratio": res.decay_ratio, "iterations": res.iterations,
              "residual": res.residual, "converged": res.converged,
              "regime": summarize(law).regime.label}
    if law.family_tag == "linear_fractional_independent" and args.config:
        cfg = json.loads(Path(args.config).read_text())
        closed = bpre.linear_fractional_yaglom(cfg["b"], cfg["p"], res.pmf.K)
        report["closed_form_max_abs_error"] = float(np.max(np.abs(closed.mass - res.pmf.mass)))
    tol = 1e-8 if args.tolerance is None else args.tolerance
    code = _check(args, res.residual < tol, report, f"functional-equation residual < {tol:g}")
    print(f"P(Y=1) = {format_float(res.pmf.mass[1])}, decay ratio {res.decay_ratio:.6g}")
    return code, {"yaglom.csv": _csv(["k", "prob"], rows)}, report


def cmd_simulate(args):
    _, cfg = parse_config(args.config, args)
    ens = _ensemble(cfg, args.threads)
    files = {f"{name}.csv": ens.to_csv(name) for name in stats.SERIES}
    files["f.csv"] = ens.to_csv("f")
    print(f"accepted {ens.accepted_count} of {ens.attempted} replicates")
    return EXIT_OK, files, {"ensemble": ens.summary()}


def _default_condition(args, regime_label: str) -> str:
    if args.condition != "auto":
        return args.condition
    return "margin=6" if regime_label == "D3" else "horizon"


def cmd_compare(args):
    law = parse_config(args.config, theorem=True)[0]
    summ = summarize(law)
    label = summ.regime.label
    res = _yaglom(law, args.kmax)
    args.condition = _default_condition(args, label)
    _, cfg = parse_config(args.config, args, theorem=True)
    report = {"regime": label}
    if label == "D1":
        # counts stabilise in law; compare the horizon against horizon - 4
        h2 = cfg.horizon
        h1 = max(1, h2 - 4)
        e1 = _ensemble(replace(cfg, horizon=h1), args.threads)
        e2 = _ensemble(cfg, args.threads)
        x1, x2 = e1.n_contaminated[:, h1], e2.n_contaminated[:, h2]
        ks = stats.ks_from_samples(x1, x2)
        n = int(max(x1.max(), x2.max())) + 1
        p1, p2 = stats.empirical_pmf(x1, n), stats.empirical_pmf(x2, n)
        rows = [[k, p1[k], p2[k]] for k in range(1, n)]
        report.update(ks=ks, horizons=[h1, h2], ensemble=e2.summary())
        tol = 0.05 if args.tolerance is None else args.tolerance
        code = _check(args, ks <= tol, report, f"KS <= {tol:g}")
        print(f"KS(#G*_{h1}, #G*_{h2}) = {ks:.4g}")
        return code, {"compare.csv": _csv(["n_cells", f"freq_h{h1}", f"freq_h{h2}"], rows)}, report
    ens = _ensemble(cfg, args.threads)
    g = cfg.horizon
    emp, se = ens.f_mean(g), ens.f_stderr(g)
    target = _pmf_vector(res.pmf, cfg.k_top)
    l1 = stats.l1_distance(emp, target)
    rows = [[_bucket_label(k, cfg.k_top), emp[k], se[k], target[k], abs(emp[k] - target[k])]
            for k in range(cfg.k_top + 1)]
    report.update(l1=l1, horizon=g, ensemble=ens.summary())
    if args.sensitivity and cfg.conditioning == "survive_with_margin":
        report["margin_sensitivity"] = {
            str(d): stats.l1_distance(e.f_mean(g), target)
            for d, e in treesim.margin_sensitivity(cfg, threads=args.threads).items()}
    tol = 0.08 if args.tolerance is None else args.tolerance
    code = _check(args, l1 <= tol, report, f"L1 <= {tol:g}")
    print(f"L1(F({g}), Yaglom) = {l1:.4g}")
    return code, {"compare.csv": _csv(["k", "empirical", "stderr", "solver", "l1"], rows)}, report


def cmd_recovery(args):
    law, cfg = parse_config(args.config, args, theorem=True)
    rep = treesim.estimate_recovery(cfg, args.threads)
    summ = summarize(law)
    rows = [[key, rep.conditioned.get(key), rep.unconditioned.get(key)]
            for key in rep.conditioned if key != "n"]
    report = rep.as_dict()
    report["prod_mean"] = summ.prod_mean
    if summ.prod_mean <= 1:
        tol = 1e-3 if args.tolerance is None else args.tolerance
        ok, what = rep.conditioned["q0.99"] < tol, f"conditioned 0.99-quantile < {tol:g}"
    else:
        ok, what = rep.conditioned["q0.05"] > 0, "conditioned 5th percentile > 0"
    code = _check(args, ok, report, what)
    print(f"recovery ratio at {cfg.horizon}: conditioned mean {rep.conditioned['mean']:.4g}")
    return code, {"recovery.csv": _csv(["statistic", "conditioned", "unconditioned"], rows)}, report


def cmd_sizebias(args):
    law = parse_config(args.config, theorem=True)[0]
    res = _yaglom(law, args.kmax)
    if args.horizon is None or args.horizon < args.n0 + args.p:
        args.horizon = args.n0 + args.p
    _, cfg = parse_config(args.config, args, theorem=True)
    try:
        cfg = replace(cfg, ancestor_depth=(args.n0, args.p))
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from exc
    ens = _ensemble(cfg, args.threads)
    emp = treesim.ancestor_proportions(ens)
    target = _pmf_vector(bpre.size_biased(res.pmf), cfg.k_top)
    l1 = stats.l1_distance(emp, target)
    rows = [[_bucket_label(k, cfg.k_top), emp[k], target[k]] for k in range(cfg.k_top + 1)]
    report = {"l1": l1, "n0": args.n0, "p": args.p, "ensemble": ens.summary()}
    tol = 0.1 if args.tolerance is None else args.tolerance
    code = _check(args, l1 <= tol, report, f"L1 <= {tol:g}")
    print(f"L1(F(n0, n0+p), size-biased Yaglom) = {l1:.4g}")
    return code, {"sizebias.csv": _csv(["k", "empirical", "size_biased"], rows)}, report


def cmd_identity(args):
    _, cfg = parse_config(args.config, args, theorem=True)
    if cfg.conditioning != "none":
        raise CliError(EXIT_SCHEMA, "identity-check runs unconditioned (--condition none)")
    rep = treesim.mean_identity_check(cfg, args.threads)
    rows = list(zip(rep.generations, rep.mc_mean, rep.mc_stderr, rep.exact_lower,
                    rep.exact_upper, rep.z_score))
    report = rep.as_dict()
    tol = 4.0 if args.tolerance is None else args.tolerance
    code = _check(args, rep.max_abs_z <= tol, report, f"max |z| <= {tol:g}")
    print(f"max |z| = {rep.max_abs_z:.3g}")
    header = ["generation", "mc_mean", "mc_stderr", "exact_lower", "exact_upper", "z"]
    return code, {"identity.csv": _csv(header, rows)}, report


def cmd_d4(args):
    law, cfg = parse_config(args.config, args, theorem=True)
    summ = summarize(law)
    n_range = list(range(args.n_min, args.n_max + 1))
    fit = bpre.survival_decay_fit(law, n_range, K=args.kmax)
    curve = bpre.survival_curve(law, args.n_max, K=args.kmax, tight=True)
    report = {"label": EXPLORATORY, "regime": str(summ.regime), "m": summ.m,
              "decay_fit": fit._asdict()}
    rows = [[n, curve[n].lower, curve[n].upper] for n in range(args.n_max + 1)]
    try:
        ens = _ensemble(cfg, args.threads)
        mean_nc = ens.mean("n_contaminated")
        growth = stats.growth_rate_fit(mean_nc, (cfg.horizon // 2, cfg.horizon))
        report["growth_fit"] = growth._asdict()
        report["ensemble"] = ens.summary()
    except treesim.InfeasibleConditioning as exc:
        report["growth_fit"] = None
        report["growth_note"] = str(exc)
    print(f"{EXPLORATORY}; decay rate {fit.rate:.6g} (m = {summ.m:.6g})")
    return EXIT_OK, {"d4_survival.csv": _csv(["n", "lower", "upper"], rows)}, report


COMMANDS = {
    "classify": cmd_classify, "yaglom": cmd_yaglom, "simulate": cmd_simulate,
    "compare": cmd_compare, "recovery": cmd_recovery, "sizebias": cmd_sizebias,
    "identity-check": cmd_identity, "d4-explore": cmd_d4,
}


def run_command(args: argparse.Namespace) -> int:
    echo = _echo(args)
    try:
        code, files, report = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.code == EXIT_INFEASIBLE and getattr(args, "out", None):
            emit_report(args.out, args.format, {}, {"config": echo, "accepted_count": 0,
                                                     "error": str(exc)})
        return exc.code
    except (treesim.InfeasibleConditioning, treesim.BudgetExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(args, "out", None):
            emit_report(args.out, args.format, {}, {"config": echo, "accepted_count": 0,
                                                     "error": str(exc)})
        return EXIT_INFEASIBLE
    except (bpre.SolverError, bpre.BracketError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    # echo after the command ran so defaults it resolved are recorded
    report["config"] = _echo(args)
    if getattr(args, "out", None):
        emit_report(args.out, args.format, files, report)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run_command(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
