"""fastfista CLI - build instances, run solver variants and spectral analyses."""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import pandas as pd

from src.config import InstanceFamily, Settings, load_settings
from src.core import (
    NumericalFault,
    OracleError,
    ProblemSpec,
    RunTrace,
    SolverConfig,
    max_cocoercivity_violation,
    max_descent_lemma_violation,
    max_directional_derivative_error,
    max_energy_violation,
)
from src.problems import (
    Instance,
    build_instance,
    load_instance,
    make_rng,
    recipe_from_dict,
    save_instance,
)
from src.sequences import (
    APGRule,
    BTRule,
    CDRule,
    ConstantRule,
    InertialRule,
    ModRule,
    optimal_r,
)
from src.solvers import Greedy, NoRestart, Rada, Restart, RestartPolicy, run
from src.spectral import (
    SpectralModel,
    envelope_ratio,
    k_eq,
    log_envelope_curve,
    optimal_d_fit,
    ratio_approx,
    tridiag_spectrum,
)

logger = logging.getLogger("fastfista.cli")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

# Reference solutions: greedy FISTA at gamma = 1.3/L down to this residual
REFERENCE_TOL = 1e-13
REFERENCE_MAX_ITERS = 1_000_000

# Threshold on ||x_k - x*|| reported by the benchmark table
BENCH_THRESHOLD = 1e-6

DEFAULT_TOL_SWEEP = (-2.0, -4.0, -6.0, -8.0, -10.0)


@dataclass
class VariantSetup:
    """A preset resolved against a problem."""

    preset: str
    rule: InertialRule
    policy: RestartPolicy
    step_gamma: float | None = None


def _numbers(preset: str, raw: str, count: int, defaults: tuple[float, ...] = ()) -> list[float]:
    parts = [p for p in raw.split(",") if p] if raw else []
    if len(parts) > count:
        raise ValueError(f"preset {preset!r} takes at most {count} parameters")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"preset {preset!r} has a non-numeric parameter") from None
    missing = count - len(values)
    if missing > len(defaults):
        raise ValueError(f"preset {preset!r} needs {count} parameters")
    return values + list(defaults[len(defaults) - missing :]) if missing else values


def resolve_variant(preset: str, problem: ProblemSpec) -> VariantSetup:
    """Turn a preset string into a rule, a restart policy and a step size.

    Presets: bt | cd:d | mod:p,q,r | alpha:p,q[,alpha] | restart | rada1[:xi|auto] |
    rada2[:xi|auto] | greedy[:gamma_scale,S,xi] | apg:sigma[,tau].

    Raises:
        ValueError: unknown preset or parameters out of range
    """
    name, _, raw = preset.strip().partition(":")
    name = name.lower()
    L = problem.lipschitz_L

    if name == "bt":
        return VariantSetup(preset, BTRule(), NoRestart())
    if name == "cd":
        (d,) = _numbers(preset, raw, 1)
        return VariantSetup(preset, CDRule(d=d), NoRestart())
    if name == "mod":
        p, q, r = _numbers(preset, raw, 3, (4.0,))
        return VariantSetup(preset, ModRule(p=p, q=q, r=r), NoRestart())
    if name == "alpha":
        p, q, alpha = _numbers(preset, raw, 3, (problem.strong_convexity_alpha,))
        r = optimal_r(alpha, 1.0 / L, p, q)
        return VariantSetup(preset, ModRule(p=p, q=q, r=r), NoRestart())
    if name == "restart":
        return VariantSetup(preset, BTRule(), Restart())
    if name in ("rada1", "rada2"):
        option = 1 if name == "rada1" else 2
        if raw.lower() in ("", "auto"):
            policy = Rada(option=option, auto_xi=True)
        else:
            (xi,) = _numbers(preset, raw, 1)
            policy = Rada(option=option, xi=xi)
        return VariantSetup(preset, ModRule(), policy)
    if name == "greedy":
        scale, S, xi = _numbers(preset, raw, 3, (1.3, 1.0, 0.96))
        return VariantSetup(preset, ConstantRule(a=1.0), Greedy(S=S, xi=xi), scale / L)
    if name == "apg":
        sigma, tau = _numbers(preset, raw, 2, (0.0,))
        return VariantSetup(preset, APGRule(sigma=sigma, tau=tau), NoRestart())
    raise ValueError(f"unknown variant preset: {preset!r}")


def setup_logging(settings: Settings) -> None:
    """Configure root logging for one CLI invocation."""
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.log_file is not None:
        handlers.append(logging.FileHandler(settings.log_file))
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def settings_from_args(args: argparse.Namespace) -> Settings:
    """Merge the config file and command-line flags."""
    flags = {
        key: getattr(args, key, None)
        for key in (
            "family",
            "n",
            "m",
            "seed",
            "mu",
            "nu",
            "noise_sigma",
            "dataset",
            "standardize",
            "variant",
            "max_iters",
            "tol",
            "trace_stride",
            "output_dir",
            "jobs",
            "log_level",
            "log_file",
        )
    }
    return load_settings(getattr(args, "config", None), **flags)


def recipe_for(settings: Settings, family: InstanceFamily | None = None) -> dict[str, Any]:
    """Recipe dictionary for a family using the applicable settings fields."""
    family = family or settings.family
    data: dict[str, Any] = {"kind": family.value, "seed": settings.seed}
    if settings.n is not None:
        data["n"] = settings.n
    if settings.m is not None and family not in (InstanceFamily.TRIDIAG, InstanceFamily.QUADRATIC):
        data["m"] = settings.m
    if settings.mu is not None and family not in (InstanceFamily.TRIDIAG, InstanceFamily.QUADRATIC):
        data["mu"] = settings.mu
    if family in (InstanceFamily.LASSO, InstanceFamily.LINF, InstanceFamily.TV):
        data["noise_sigma"] = settings.noise_sigma
    if family == InstanceFamily.PCP and settings.nu is not None:
        data["nu"] = settings.nu
    if family == InstanceFamily.LOGISTIC:
        data["standardize"] = settings.standardize
        if settings.dataset is not None:
            data["dataset"] = str(settings.dataset)
    return data


def instance_for(args: argparse.Namespace, settings: Settings) -> Instance:
    """Load ``--instance`` or generate one from the settings."""
    path = getattr(args, "instance", None)
    if path is not None:
        return load_instance(Path(path))
    return build_instance(recipe_from_dict(recipe_for(settings)))


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "_", text).strip("_")


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def write_trace(trace: RunTrace, path: Path) -> Path:
    """Write a trace CSV with header k,residual,obj,a_k,t_k,gamma,restarted[,dist_to_ref]."""
    path.parent.mkdir(parents=True, exist_ok=True)
    df = trace.to_frame()
    df["restarted"] = df["restarted"].astype(np.int64)
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def write_summary(summary: dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return path


def load_reference(path: Path | None, instance: Instance) -> np.ndarray | None:
    """Reference x* from a ``.npy`` file, else the instance's analytic solution."""
    if path is not None:
        return np.load(Path(path), allow_pickle=False)
    return instance.known_solution


def solve_one(
    instance: Instance,
    preset: str,
    settings: Settings,
    reference: np.ndarray | None,
    stem: str,
) -> tuple[RunTrace, dict[str, Any]]:
    """Run one (instance, preset) cell and write its CSV and JSON."""
    problem = instance.problem()
    setup = resolve_variant(preset, problem)
    config = SolverConfig(
        step_gamma=setup.step_gamma,
        max_iters=settings.max_iters,
        tol_residual=settings.tol,
        trace_stride=settings.trace_stride,
        initial_point=instance.default_start,
    )
    start = time.perf_counter()
    trace = run(problem, setup.rule, setup.policy, config, reference=reference)
    wall_time = time.perf_counter() - start

    summary = trace.summary()
    summary.update(
        {
            "seed": instance.recipe.seed,
            "preset": preset,
            "family": instance.family,
            "wall_time": wall_time,
        }
    )
    output_dir = settings.output_dir
    write_trace(trace, output_dir / f"{stem}.csv")
    write_summary(summary, output_dir / f"{stem}.json")
    return trace, summary


def cmd_solve(args: argparse.Namespace, settings: Settings) -> int:
    instance = instance_for(args, settings)
    reference = load_reference(args.reference, instance)
    stem = args.name or _slug(f"{instance.family}-seed{instance.recipe.seed}-{settings.variant}")
    trace, summary = solve_one(instance, settings.variant, settings, reference, stem)

    print(f"{summary['preset']} on {instance.family}: {summary['stop_reason']}")
    print(f"  iterations:     {summary['iterations']}")
    print(f"  restarts:       {summary['restarts']}")
    print(f"  final residual: {summary['final_residual']:.3e}")
    print(f"  trace:          {settings.output_dir / (stem + '.csv')}")
    return EXIT_NUMERICAL if trace.stop_reason == "numerical_fault" else EXIT_OK


def compute_reference(
    instance: Instance, tol: float = REFERENCE_TOL, max_iters: int = REFERENCE_MAX_ITERS
) -> tuple[np.ndarray, dict[str, Any]]:
    """High-accuracy minimiser: analytic when known, else greedy FISTA to ``tol``.

    Raises:
        NumericalFault: if the solver does not reach ``tol`` within ``max_iters``
    """
    known = instance.known_solution
    if known is not None:
        return known, {"residual": 0.0, "iterations": 0, "analytic": True}
    problem = instance.problem()
    setup = resolve_variant("greedy", problem)
    config = SolverConfig(
        step_gamma=setup.step_gamma,
        max_iters=max_iters,
        tol_residual=tol,
        trace_stride=max_iters,
        initial_point=instance.default_start,
    )
    trace = run(problem, setup.rule, setup.policy, config)
    if trace.stop_reason != "converged" or trace.final_iterate is None:
        raise NumericalFault(
            f"reference run stopped ({trace.stop_reason}) at residual {trace.final_residual:.3e}"
        )
    info = {"residual": trace.final_residual, "iterations": trace.iterations, "analytic": False}
    return trace.final_iterate, info


def cmd_reference(args: argparse.Namespace, settings: Settings) -> int:
    instance = instance_for(args, settings)
    tol = args.ref_tol if args.ref_tol is not None else REFERENCE_TOL
    max_iters = args.max_iters if args.max_iters is not None else REFERENCE_MAX_ITERS
    x_star, info = compute_reference(instance, tol, max_iters)
    path = Path(args.output) if args.output else (
        settings.output_dir / f"{instance.family}-seed{instance.recipe.seed}-reference.npy"
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(x_star, dtype=np.float64), allow_pickle=False)
    info.update({"family": instance.family, "seed": instance.recipe.seed, "tol": tol})
    write_summary(info, path.with_suffix(".json"))
    print(f"Reference written to {path} (residual {info['residual']:.3e})")
    return EXIT_OK


def spectral_model_for(args: argparse.Namespace, settings: Settings) -> SpectralModel:
    if args.eigenvalues is not None:
        return SpectralModel.from_eigenvalues(np.loadtxt(args.eigenvalues, ndmin=1))
    return tridiag_spectrum(settings.n if settings.n is not None else 201)


def cmd_spectral(args: argparse.Namespace, settings: Settings) -> int:
    model = spectral_model_for(args, settings)
    ds = args.d or [2.0, 20.0]
    if any(d < 2.0 for d in ds):
        raise ValueError(f"d must be at least 2, got {ds}")
    k_max = args.k_max
    every = max(1, args.every)

    ks = np.arange(1, k_max + 1)
    keep = (ks % every == 0) | (ks == 1) | (ks == k_max)
    frame = pd.DataFrame({"k": ks[keep]})
    for d in ds:
        curve = log_envelope_curve(d, k_max, model)
        frame[f"log10_E_d{d:g}"] = curve[keep]
        frame[f"E_d{d:g}"] = 10.0 ** curve[keep]

    scalars: dict[str, Any] = {
        "L": model.L,
        "alpha": model.alpha,
        "C": model.cond_C,
        "a_star": model.a_star,
        "rho_star": model.rho_star,
        "K_eq": {f"{d:g}": k_eq(d, model.a_star) for d in ds},
        "k_max": k_max,
        "d_star": {f"{tol:g}": optimal_d_fit(tol, args.shift) for tol in args.tol_sweep},
    }
    if len(ds) >= 2:
        d_fast, d_slow = min(ds), max(ds)
        scalars["envelope_ratio"] = envelope_ratio(d_fast, d_slow, k_max, model)
        if d_slow > 2.0 and d_fast == 2.0:
            estimate = ratio_approx(model.cond_C, k_max, d_slow)
            scalars["ratio_approx"] = estimate.value
            scalars["ratio_approx_valid"] = estimate.valid

    stem = args.name or f"spectral-{_slug('-'.join(f'{d:g}' for d in ds))}"
    output_dir = settings.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output_dir / f"{stem}.csv", index=False, float_format="%.17g", lineterminator="\n")
    write_summary(scalars, output_dir / f"{stem}.json")

    print(f"L={model.L:.6g} alpha={model.alpha:.6g} C={model.cond_C:.6g} a*={model.a_star:.9f}")
    if "envelope_ratio" in scalars:
        print(f"  envelope ratio at k={k_max}: {scalars['envelope_ratio']:.4g}")
    return EXIT_OK


def _bench_cell(
    instance: Instance,
    preset: str,
    settings: Settings,
    reference: np.ndarray,
    threshold: float,
) -> dict[str, Any]:
    stem = _slug(f"{instance.family}-seed{instance.recipe.seed}-{preset}")
    trace, summary = solve_one(instance, preset, settings, reference, stem)
    return {
        "family": instance.family,
        "seed": instance.recipe.seed,
        "preset": preset,
        "iterations": summary["iterations"],
        "restarts": summary["restarts"],
        "stop_reason": summary["stop_reason"],
        "k_to_threshold": trace.first_k_below("dist_to_ref", threshold),
    }


def cmd_bench(args: argparse.Namespace, settings: Settings) -> int:
    families = [InstanceFamily(f) for f in (args.families or [settings.family.value])]
    presets = args.variants or ["bt", "restart", "rada1", "greedy"]
    instances = [build_instance(recipe_from_dict(recipe_for(settings, f))) for f in families]
    references = [compute_reference(inst, max_iters=REFERENCE_MAX_ITERS)[0] for inst in instances]

    cells = [(inst, ref, preset) for inst, ref in zip(instances, references, strict=True)
             for preset in presets]
    logger.info(f"Running {len(cells)} benchmark cells with {settings.jobs} worker(s)")
    with ThreadPoolExecutor(max_workers=settings.jobs) as pool:
        futures = [
            pool.submit(_bench_cell, inst, preset, settings, ref, args.threshold)
            for inst, ref, preset in cells
        ]
        rows = [future.result() for future in futures]

    table = pd.DataFrame(rows)
    settings.output_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(settings.output_dir / "bench_summary.csv", index=False, lineterminator="\n")
    print(table.to_string(index=False))
    faulted = (table["stop_reason"] == "numerical_fault").any()
    return EXIT_NUMERICAL if faulted else EXIT_OK


def check_instance(problem: ProblemSpec, seed: int = 0) -> dict[str, float]:
    """Sampled oracle checks: cocoercivity, descent lemma, energy inequality, gradient."""
    rng = make_rng(seed)
    return {
        "cocoercivity": max_cocoercivity_violation(problem, rng, pairs=20),
        "descent_lemma": max_descent_lemma_violation(problem, rng, pairs=20),
        "energy": max_energy_violation(problem, rng, pairs=20),
        "gradient": max_directional_derivative_error(problem, rng, points=5),
    }


def cmd_make_instance(args: argparse.Namespace, settings: Settings) -> int:
    instance = build_instance(recipe_from_dict(recipe_for(settings)))
    path = Path(args.output) if args.output else (
        settings.output_dir / f"{instance.family}-seed{instance.recipe.seed}.npz"
    )
    save_instance(instance, path)
    print(f"Instance written to {path}")
    if not args.check:
        return EXIT_OK

    report = check_instance(instance.problem(), settings.seed)
    failed = False
    for name, value in report.items():
        limit = 1e-4 if name == "gradient" else 1e-6
        status = "ok" if value <= limit else "FAILED"
        failed = failed or value > limit
        print(f"  {name:<14} {value: .3e}  {status}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--log-level", default=None, help="Logging level (default: INFO)")
    parser.add_argument("--log-file", type=Path, default=None, help="Also log to this file")
    parser.add_argument("--output-dir", type=Path, default=None, help="Directory for outputs")


def _add_instance(parser: argparse.ArgumentParser, allow_file: bool = True) -> None:
    if allow_file:
        parser.add_argument("--instance", type=Path, default=None, help="Saved .npz instance")
    parser.add_argument(
        "--family", default=None, choices=[f.value for f in InstanceFamily], help="Instance family"
    )
    parser.add_argument("--n", type=int, default=None, help="Problem dimension")
    parser.add_argument("--m", type=int, default=None, help="Rows / samples")
    parser.add_argument("--seed", type=int, default=None, help="Generator seed")
    parser.add_argument("--mu", type=float, default=None, help="Regularisation weight")
    parser.add_argument("--nu", type=float, default=None, help="Nuclear-norm weight (pcp)")
    parser.add_argument("--noise-sigma", type=float, default=None, help="Observation noise")
    parser.add_argument("--dataset", type=Path, default=None, help="LIBSVM file (logistic)")
    parser.add_argument(
        "--standardize", action="store_const", const=True, default=None,
        help="Standardise logistic features",
    )


def _add_solver(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-iters", type=int, default=None, help="Iteration budget")
    parser.add_argument(
        "--tol", type=float, default=None, help="Stop when ||x_k - x_{k-1}|| <= tol"
    )
    parser.add_argument("--trace-stride", type=int, default=None, help="Record every n-th iterate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastfista",
        description="fastfista - FISTA-family solvers, benchmarks and spectral analysis",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  fastfista solve --family tridiag --n 201 --variant cd:20 --max-iters 1000000
  fastfista solve --family lasso --variant mod:0.05,0.5,4
  fastfista solve --family lasso --variant greedy:1.3,1,0.96
  fastfista spectral --n 201 --d 2 --d 20 --k-max 1000000
  fastfista reference --family lasso --seed 3
  fastfista bench --families lasso linf --variants bt restart rada1 greedy --jobs 4
  fastfista make-instance --family tv --seed 1 --check
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    solve_parser = subparsers.add_parser("solve", help="Run one solver variant")
    _add_common(solve_parser)
    _add_instance(solve_parser)
    _add_solver(solve_parser)
    solve_parser.add_argument("--variant", default=None, help="Solver preset (default: bt)")
    solve_parser.add_argument("--reference", type=Path, default=None, help="x* as .npy")
    solve_parser.add_argument("--name", default=None, help="Output file stem")

    spectral_parser = subparsers.add_parser("spectral", help="Envelopes of FISTA-CD on quadratics")
    _add_common(spectral_parser)
    spectral_parser.add_argument("--n", type=int, default=None, help="Tridiagonal size (201)")
    spectral_parser.add_argument(
        "--eigenvalues", type=Path, default=None, help="Text file of A^T A eigenvalues"
    )
    spectral_parser.add_argument(
        "--d", type=float, action="append", default=None, help="FISTA-CD d (repeatable)"
    )
    spectral_parser.add_argument("--k-max", type=int, default=10**6, help="Envelope horizon")
    spectral_parser.add_argument("--every", type=int, default=1000, help="CSV row stride")
    spectral_parser.add_argument(
        "--tol-sweep", type=float, nargs="+", default=list(DEFAULT_TOL_SWEEP),
        help="log10 tolerances for the fitted optimal d",
    )
    spectral_parser.add_argument("--shift", type=float, default=0.0, help="Fitted-law shift s")
    spectral_parser.add_argument("--name", default=None, help="Output file stem")

    reference_parser = subparsers.add_parser("reference", help="Compute a reference solution")
    _add_common(reference_parser)
    _add_instance(reference_parser)
    reference_parser.add_argument("--max-iters", type=int, default=None, help="Iteration budget")
    reference_parser.add_argument(
        "--ref-tol", type=float, default=None, help=f"Residual target (default {REFERENCE_TOL})"
    )
    reference_parser.add_argument("--output", type=Path, default=None, help="Output .npy path")

    bench_parser = subparsers.add_parser("bench", help="Run an instance x variant matrix")
    _add_common(bench_parser)
    _add_instance(bench_parser, allow_file=False)
    _add_solver(bench_parser)
    bench_parser.add_argument("--families", nargs="+", default=None, help="Instance families")
    bench_parser.add_argument("--variants", nargs="+", default=None, help="Solver presets")
    bench_parser.add_argument("--jobs", type=int, default=None, help="Parallel cells")
    bench_parser.add_argument(
        "--threshold", type=float, default=BENCH_THRESHOLD, help="Distance threshold"
    )

    make_parser = subparsers.add_parser("make-instance", help="Generate and save an instance")
    _add_common(make_parser)
    _add_instance(make_parser, allow_file=False)
    make_parser.add_argument("--output", type=Path, default=None, help="Output .npz path")
    make_parser.add_argument("--check", action="store_true", help="Run oracle checks")

    return parser


COMMANDS = {
    "solve": cmd_solve,
    "spectral": cmd_spectral,
    "reference": cmd_reference,
    "bench": cmd_bench,
    "make-instance": cmd_make_instance,
}


def main(argv: list[str] | None = None) -> NoReturn:
    """Main CLI entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors; 2 is reserved for numerical faults
        sys.exit(EXIT_OK if e.code in (0, None) else EXIT_USAGE)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_USAGE)

    try:
        settings = settings_from_args(args)
        setup_logging(settings)
        code = COMMANDS[args.command](args, settings)
    except (NumericalFault, OracleError) as e:
        print(f"Numerical fault: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL)
    except (ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    sys.exit(code)


if __name__ == "__main__":
    main()
