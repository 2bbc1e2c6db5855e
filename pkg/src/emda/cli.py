"""Command line: ``emda simulate | fit | sample | compare | surface``.

Exit codes: 0 success, 1 usage, 2 input parse, 3 plan or ordering
validation, 4 numerical failure during a run.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import io as fio
from .augmentation import WorkingAugmentation
from .em import (ALGORITHMS, EmOptions, NonMonotoneError, OrderingError, Trace, estimate_rate,
                 run_aecm, run_cda_em, run_ecm, run_ecme, run_em, run_mcem, run_nested_em,
                 run_pxem)
from .fitting import SpectralProblem, SpectralSampler
from .samplers import (ChainError, NormalWorkingPrior, PlanParseError, PlanViolation,
                       SamplerPlan, diagnostics, parse_plan, run_da, run_gibbs,
                       run_marginal_aug, run_partially_blocked, run_pcg)
from .spectral import DomainError, SpectralError, simulate_spectrum
from .toy import GaussianFamilyToy, GaussianToy, pxem_profile, q_alpha_value

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3, 4

SPECTRAL_BLOCKS = ("all", "line", "line_shape", "continuum", "absorption",
                   "continuum+absorption", "mu")
SAMPLERS = ("da", "gibbs", "blocked", "pcg", "marginal")
MODELS = ("spectral", "toy", "bivariate", "trivariate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file of option defaults")
    p.add_argument("--grid")
    p.add_argument("--rsp")
    p.add_argument("--spectrum")
    p.add_argument("--params")
    p.add_argument("--instance", choices=("heavy", "docs"),
                   help="use a bundled instance instead of --grid/--rsp/--spectrum/--params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")


def _fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--inner-n", type=int, default=4)
    p.add_argument("--mc-size", type=int, default=100)
    p.add_argument("--amin", choices=("off", "auto"), default="auto")
    p.add_argument("--model", choices=("spectral", "toy"), default="spectral")
    p.add_argument("--alpha", type=float, default=1.0, help="toy working parameter for cda_em")
    p.add_argument("--no-seconds", action="store_true",
                   help="write zeros in the seconds column (byte-reproducible traces)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emda", description="EM-type algorithms and samplers for "
                                              "Poisson spectral models and Gaussian toys.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a spectrum and its latent counts")
    _common(p)

    p = sub.add_parser("fit", help="fit with one EM-type algorithm")
    _common(p)
    _fit_options(p)
    p.add_argument("--alg", default="em", choices=ALGORITHMS)
    p.add_argument("--plan", help="CM-step plan file for ecm/ecme/aecm")

    p = sub.add_parser("compare", help="run several algorithms and merge their traces")
    _common(p)
    _fit_options(p)
    p.add_argument("--alg", default="em,nested_em,cda_em,cda_em+nested",
                   help="comma separated algorithm list")

    p = sub.add_parser("sample", help="run an MCMC sampler")
    _common(p)
    p.add_argument("--model", choices=MODELS, default="toy")
    p.add_argument("--alg", choices=SAMPLERS, default="da")
    p.add_argument("--plan", help="sampler plan file (draw:<vars> given:<vars> marg:<vars>)")
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--inner-n", type=int, default=1)
    p.add_argument("--tau", type=float, default=1.0, help="working prior scale (marginal)")

    p = sub.add_parser("surface", help="export the toy's expanded objective on an "
                                       "(alpha, theta) grid")
    p.add_argument("--config", help="key = value file of option defaults")
    p.add_argument("--params", help="toy settings file (n, m, x_bar, theta0)")
    p.add_argument("--out", help="CSV path (default: standard output)")
    p.add_argument("--alpha-range", type=_range, default=(-3.0, 2.0), help="lo,hi")
    p.add_argument("--theta-range", type=_range, default=(-1.0, 6.0), help="lo,hi")
    p.add_argument("--points", type=int, default=101, help="grid points per axis")
    return parser


def _range(text: str) -> tuple:
    lo, hi = (float(v) for v in text.split(","))
    if not lo < hi:
        raise ValueError(text)
    return lo, hi


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` act as defaults under the flags."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("emda: a subcommand is required (simulate, fit, sample, compare, surface)")
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    kv = fio.read_keyvalue(args.config)
    defaults = {}
    for key, (val, lineno) in kv.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in ("help", "config"):
            raise fio.ParseError(args.config, lineno, f"unknown option {key!r}")
        if act.nargs == 0:
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise fio.ParseError(args.config, lineno, f"{key} expects a boolean")
            defaults[dest] = val.lower() in ("true", "1", "yes")
            continue
        try:
            conv = act.type(val) if act.type else val
        except ValueError:
            raise fio.ParseError(args.config, lineno, f"bad value for {key}: {val!r}") from None
        if act.choices and conv not in act.choices:
            raise fio.ParseError(args.config, lineno, f"{key} must be one of {list(act.choices)}")
        defaults[dest] = conv
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------

def bundled_path(instance: str, name: str) -> Path:
    return Path(str(resources.files("emda") / "data" / instance / name))


def _model_files(args, need_spectrum: bool = True):
    """Resolve grid, response, spectrum and parameter paths."""
    if getattr(args, "instance", None):
        base = {"grid": "grid.csv", "rsp": "rsp.csv", "spectrum": "spectrum.csv",
                "params": "start.params"}
        paths = {k: getattr(args, k) or bundled_path(args.instance, v) for k, v in base.items()}
    else:
        paths = {k: getattr(args, k) for k in ("grid", "rsp", "spectrum", "params")}
    needed = ["grid", "rsp", "params"] + (["spectrum"] if need_spectrum else [])
    missing = [f"--{k}" for k in needed if paths[k] is None]
    if missing:
        raise UsageError(f"missing {', '.join(missing)}")
    for k in needed:
        if not Path(paths[k]).exists():
            raise UsageError(f"--{k}: no such file {paths[k]}")
    return paths


def load_spectral(args, need_spectrum: bool = True):
    paths = _model_files(args, need_spectrum)
    grid = fio.read_grid(paths["grid"])
    rsp = fio.read_response(paths["rsp"], (grid.detector_bins, grid.ideal_bins))
    params = fio.read_params(paths["params"])
    spec = fio.read_spectrum(paths["spectrum"]) if need_spectrum else None
    return grid, rsp, spec, params


def _toy_settings(args, defaults: dict) -> dict:
    out = dict(defaults)
    if args.params:
        if not Path(args.params).exists():
            raise UsageError(f"--params: no such file {args.params}")
        for key, (val, lineno) in fio.read_keyvalue(args.params).items():
            if key not in defaults:
                raise fio.ParseError(args.params, lineno, f"unknown key {key!r}")
            try:
                out[key] = type(defaults[key])(float(val)) if isinstance(defaults[key], int) \
                    else float(val)
            except ValueError:
                raise fio.ParseError(args.params, lineno, f"bad value {val!r}") from None
    return out


def _plan_path(path) -> Path:
    if not Path(path).exists():
        raise UsageError(f"--plan: no such file {path}")
    return Path(path)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(args, out=sys.stdout) -> int:
    grid, rsp, _, params = load_spectral(args, need_spectrum=False)
    spec, latent = simulate_spectrum(params, grid, rsp, args.seed)
    target = Path(args.out or ".")
    target.mkdir(parents=True, exist_ok=True)
    fio.write_spectrum(spec, target / "spectrum.csv")
    fio.write_latent(latent, target / "latent.csv")
    print(f"wrote {target / 'spectrum.csv'} ({int(spec.counts.sum())} counts) and "
          f"{target / 'latent.csv'}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# fit / compare
# --------------------------------------------------------------------------

def _options(args, seed) -> EmOptions:
    return EmOptions(max_iter=args.max_iter, tol=args.tol, inner_iters=args.inner_n,
                     mc_size=args.mc_size, seed=seed)


def _working(args):
    return "auto" if args.amin == "auto" else WorkingAugmentation(0.0, 0.0)


def _check_plan(steps):
    for s in steps:
        if s.block not in SPECTRAL_BLOCKS:
            raise fio.ParseError("", 0, f"unknown block {s.block!r}; expected one of "
                                        f"{list(SPECTRAL_BLOCKS)}")
    return steps


def run_spectral(alg: str, problem: SpectralProblem, theta0, opts: EmOptions, args,
                 steps=None) -> Trace:
    if alg == "em":
        return run_em(problem, theta0, opts)
    if alg == "ecm":
        return run_ecm(problem, theta0, opts, steps)
    if alg == "ecme":
        return run_ecme(problem, theta0, opts, steps)
    if alg == "aecm":
        return run_aecm(problem, theta0, opts, steps)
    if alg == "nested_em":
        return run_nested_em(problem, theta0, opts)
    if alg == "mcem":
        return run_mcem(problem, theta0, opts)
    if alg == "cda_em":
        return run_cda_em(problem, _working(args), theta0, opts)
    if alg == "cda_em+nested":
        return run_nested_em(problem.with_working(_working(args)), theta0, opts)
    raise UsageError(f"algorithm {alg!r} is not available for the spectral model")


def run_toy(alg: str, toy: GaussianToy, theta0: float, opts: EmOptions, args) -> Trace:
    if alg == "em":
        return run_em(toy, theta0, opts)
    if alg == "cda_em":
        return run_cda_em(toy, args.alpha, theta0, opts)
    if alg == "pxem":
        return run_pxem(toy, theta0, opts)
    if alg == "mcem":
        return run_mcem(toy, theta0, opts)
    raise UsageError(f"algorithm {alg!r} is not available for the toy model "
                     f"(use em, cda_em, pxem or mcem)")


def _summary(trace: Trace, out) -> None:
    print(f"algorithm: {trace.algorithm}", file=out)
    print(f"iterations: {trace.iterations}", file=out)
    print(f"converged: {trace.converged}", file=out)
    print(f"final loglik: {trace.final_loglik!r}", file=out)
    for name, v in zip(trace.labels, trace.params[-1]):
        print(f"  {name} = {float(v)!r}", file=out)
    try:
        r = estimate_rate(trace, trace.params[-1])
        flag = "" if r.reliable else " (unreliable)"
        print(f"rate estimate: {r.rho_hat:.6f}{flag}", file=out)
    except ValueError:
        print("rate estimate: n/a (trace too short)", file=out)


def _fit_one(args, alg, seed):
    opts = _options(args, seed)
    if args.model == "toy":
        s = _toy_settings(args, {"n": 1, "m": 5, "x_bar": 0.0, "theta0": 5.0})
        toy = GaussianToy(s["n"], s["m"], s["x_bar"])
        return run_toy(alg, toy, s["theta0"], opts, args)
    grid, rsp, spec, params = load_spectral(args)
    reduced = "auto" if args.amin == "auto" else "off"
    problem = SpectralProblem(grid, rsp, spec, params, reduced=reduced)
    steps = None
    if getattr(args, "plan", None):
        if alg not in ("ecm", "ecme", "aecm"):
            raise UsageError("--plan applies to ecm, ecme and aecm")
        steps = _check_plan(fio.parse_fit_plan(_plan_path(args.plan)))
    return run_spectral(alg, problem, params, opts, args, steps)


def cmd_fit(args, out=sys.stdout) -> int:
    trace = _fit_one(args, args.alg, args.seed)
    if args.out:
        trace.to_csv(args.out, with_seconds=not args.no_seconds)
    _summary(trace, out)
    return EXIT_OK


def cmd_compare(args, out=sys.stdout) -> int:
    algs = [a.strip() for a in (args.alg or "").split(",") if a.strip()]
    if not algs:
        raise UsageError("compare needs at least one algorithm")
    bad = [a for a in algs if a not in ALGORITHMS]
    if bad:
        raise UsageError(f"unknown algorithm(s) {bad}")
    # Runs are sequential so that wall-clock columns are comparable.
    traces = [_fit_one(args, alg, args.seed + k) for k, alg in enumerate(algs)]
    labels = traces[0].labels
    lines = [",".join(["algorithm", "iter", "seconds", "loglik", *labels])]
    for tr in traces:
        for row in tr.rows(with_seconds=not args.no_seconds):
            lines.append(",".join([tr.algorithm, str(row[0])] +
                                  [repr(float(x)) for x in row[1:]]))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{'algorithm':<16}{'iters':>8}{'seconds':>12}{'loglik':>22}", file=out)
    for tr in traces:
        print(f"{tr.algorithm:<16}{tr.iterations:>8}{tr.elapsed:>12.4f}"
              f"{tr.final_loglik:>22.10f}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# sample
# --------------------------------------------------------------------------

def _sampler_target(args):
    if args.model == "toy":
        s = _toy_settings(args, {"n": 1, "m": 5, "x_bar": 0.0, "theta0": 0.0})
        return GaussianToy(s["n"], s["m"], s["x_bar"]), s["theta0"]
    if args.model == "bivariate":
        s = _toy_settings(args, {"rho": 0.9})
        return GaussianFamilyToy.bivariate(s["rho"]), None
    if args.model == "trivariate":
        s = _toy_settings(args, {"rho_12": 0.5, "cond_rho_23": 0.95})
        return GaussianFamilyToy.trivariate(s["rho_12"], s["cond_rho_23"]), None
    grid, rsp, spec, params = load_spectral(args)
    return SpectralSampler(SpectralProblem(grid, rsp, spec, params)), params


def _sampler_plan(args, target) -> SamplerPlan:
    if args.plan:
        return parse_plan(_plan_path(args.plan).read_text())
    if args.alg == "pcg":
        raise UsageError("pcg needs --plan")
    names = SpectralSampler.BLOCKS if isinstance(target, SpectralSampler) else target.labels
    return SamplerPlan.gibbs([[v] for v in names])


def cmd_sample(args, out=sys.stdout) -> int:
    target, theta0 = _sampler_target(args)
    alg = args.alg
    if alg in ("da", "marginal") and isinstance(target, GaussianFamilyToy):
        raise UsageError(f"{alg} needs --model toy or spectral")
    if alg == "marginal" and not isinstance(target, GaussianToy):
        raise UsageError("marginal augmentation is available for --model toy")
    if alg in ("gibbs", "blocked", "pcg") and isinstance(target, GaussianToy):
        raise UsageError(f"{alg} needs --model bivariate, trivariate or spectral")
    if alg == "da":
        chain = run_da(target, theta0, args.iters, args.seed, args.burn_in)
    elif alg == "marginal":
        chain = run_marginal_aug(target, NormalWorkingPrior(args.tau), theta0, args.iters,
                                 args.seed, args.burn_in)
    else:
        plan = _sampler_plan(args, target)
        if alg == "gibbs":
            chain = run_gibbs(target, plan, theta0, args.iters, args.seed, args.burn_in)
        elif alg == "blocked":
            chain = run_partially_blocked(target, plan, args.inner_n, theta0, args.iters,
                                          args.seed, args.burn_in)
        else:
            chain = run_pcg(target, plan, theta0, args.iters, args.seed, args.burn_in)
    if args.out:
        chain.to_csv(args.out)
    print(diagnostics(chain).report(), file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# surface
# --------------------------------------------------------------------------

def cmd_surface(args, out=sys.stdout) -> int:
    """Rows ``alpha, theta, q, profile_theta``: the expanded objective at the
    identity working value, plus the maximising theta for each alpha."""
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    s = _toy_settings(args, {"n": 1, "m": 5, "x_bar": 0.0, "theta0": 5.0})
    toy = GaussianToy(s["n"], s["m"], s["x_bar"])
    lines = ["alpha,theta,q,profile_theta"]
    for a in np.linspace(*args.alpha_range, args.points):
        best = pxem_profile(toy, float(a), s["theta0"])
        for th in np.linspace(*args.theta_range, args.points):
            q = q_alpha_value(toy, float(th), float(a), s["theta0"], 0.0)
            lines.append(f"{float(a)!r},{float(th)!r},{float(q)!r},{float(best)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(lines) - 1} grid rows to {args.out}", file=out)
    else:
        out.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "compare": cmd_compare,
            "sample": cmd_sample, "surface": cmd_surface}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = _apply_config(build_parser(), argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except (fio.ParseError, PlanParseError) as exc:
        print(f"parse error: {exc}", file=err)
        return EXIT_PARSE
    except OrderingError as exc:
        print(f"invalid CM-step ordering: {exc.report.message}", file=err)
        return EXIT_VALIDATION
    except PlanViolation as exc:
        print(f"invalid sampler plan: {exc.report.message}", file=err)
        return EXIT_VALIDATION
    except (SpectralError, DomainError) as exc:
        print(f"input error: {exc}", file=err)
        return EXIT_PARSE
    except (NonMonotoneError, ChainError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=err)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
