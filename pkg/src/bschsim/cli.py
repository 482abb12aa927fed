"""Command-line front end: one verb per run kind, deterministic artifacts.

Every verb reads one TOML config (see :mod:`bschsim.config`), builds the run,
and writes its artifacts into ``--out``: a reproducibility manifest, a copy
of the config, CSV time series, JSON summaries, and checkpoint dumps.
Nothing in the output depends on wall-clock time, so rerunning the same
config with the same seed reproduces every file byte for byte.

Exit codes: 0 success, 1 numerical failure (an ``error.json`` is left in the
output directory), 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy

from . import __version__
from .config import (ConfigError, RunContext, build_run, parse_config,
                     preset_text, random_initial)
from .diagnostics import (decay_gronwall_bound, record_columns,
                          separation_monitor, uniform_gronwall_bound,
                          write_summary_json, write_timeseries_csv)
from .experiments import (ExperimentPreconditionError, equilibrium_experiment,
                          pullback_experiment)
from .fem import BulkSurfaceField, assemble, build_disk_mesh, constant_field, export_mesh
from .forms import (CompatibilityError, ConstraintError, MeanZeroEllipticSolver,
                    field_mass, poincare_constant)
from .params import SystemParams
from .potentials import (LogPotential, SingularDomainError, YosidaPotential,
                         brute_force_kappa2, check_domination)
from .stationary import StationaryError, StationaryProblem, newton_solve
from .stepping import Discretization, SchemeConfig, run, save_state

NUMERICAL_ERRORS = (StationaryError, SingularDomainError, ConstraintError,
                    CompatibilityError, ExperimentPreconditionError,
                    np.linalg.LinAlgError, FloatingPointError, RuntimeError)


def _read_config(args) -> Tuple[str, object]:
    if args.config is None:
        raise ConfigError(["--config is required for this verb"])
    if args.config.startswith("preset:"):
        text = preset_text(args.config.split(":", 1)[1])
    else:
        text = Path(args.config).read_text(encoding="utf-8")
    return text, parse_config(text)


def _manifest(ctx: RunContext, verb: str, columns=()) -> dict:
    mesh = ctx.mesh
    return {
        "verb": verb,
        "label": ctx.config.label,
        "config_sha256": ctx.config.digest,
        "mesh_sha256": ctx.mesh_digest,
        "seed": ctx.seed,
        "threads": ctx.threads,
        "versions": {
            "bschsim": __version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "mesh": {
            "radius": mesh.radius,
            "level": mesh.level,
            "bulk_nodes": mesh.n_vertices,
            "surface_nodes": mesh.n_boundary,
            "triangles": mesh.n_triangles,
        },
        "columns": ["t"] + list(columns),
    }


def _write_common(out: Path, ctx: RunContext, verb: str, text: str,
                  columns=()) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(text, encoding="utf-8")
    write_summary_json(out / "manifest.json", _manifest(ctx, verb, columns))


def _record_summary(ctx: RunContext, record) -> dict:
    separation = separation_monitor(record)
    masses = record.mass(ctx.params)
    if ctx.params.combined_mass_mode:
        drift = float(np.max(np.abs(masses - ctx.params.mass_target)))
    else:
        drift = max(
            float(np.max(np.abs(masses[0] - ctx.params.mass_target[0]))),
            float(np.max(np.abs(masses[1] - ctx.params.mass_target[1]))))
    return {
        "label": ctx.config.label,
        "t_start": float(record.times[0]),
        "t_end": float(record.times[-1]),
        "dt": record.dt,
        "n_steps": record.n_steps,
        "energy_first": float(record.energy[0]),
        "energy_last": float(record.energy[-1]),
        "mass_drift_abs": drift,
        "separation_floor": separation.floor,
        "separation_time": separation.time_of_separation,
        "terminal_margin": separation.terminal_margin,
        "interior": separation.interior,
        "newton_iterations_max": int(np.max(record.newton_iterations))
        if record.newton_iterations.size else 0,
        "upwind_cells_max": int(np.max(record.upwind_cells))
        if record.upwind_cells.size else 0,
    }


# -- verbs -----------------------------------------------------------------------

def _verb_simulate(args) -> int:
    text, config = _read_config(args)
    ctx = build_run(config, seed=args.seed, threads=args.threads)
    record = run(ctx.disc, ctx.initial, config.t_start, config.t_end,
                 velocity=ctx.velocity, record_every=config.record_every)
    columns = record_columns(record, ctx.params)
    out = Path(args.out)
    _write_common(out, ctx, "simulate", text, columns)
    write_timeseries_csv(out / "timeseries.csv", record.times, columns)
    write_summary_json(out / "summary.json", _record_summary(ctx, record))
    save_state(record.final_state, out / "state.npz")
    return 0


def _verb_stationary(args) -> int:
    text, config = _read_config(args)
    ctx = build_run(config, seed=args.seed, threads=args.threads)
    problem = StationaryProblem(ctx.ops, ctx.params, ctx.disc.bulk_potential,
                                ctx.disc.surface_potential)
    solution = newton_solve(problem, ctx.initial,
                            tol=config.scheme.newton_tol,
                            max_iter=config.scheme.newton_max_iter)
    out = Path(args.out)
    _write_common(out, ctx, "stationary", text)
    write_summary_json(out / "summary.json", {
        "label": ctx.config.label,
        "converged": solution.converged,
        "iterations": solution.iterations,
        "residual_norm": solution.residual_norm,
        "mass_defect": solution.mass_defect,
        "separation_width": solution.separation,
        "bulk_multiplier": solution.bulk_multiplier,
        "surface_multiplier": solution.surface_multiplier,
        "multiplier_cross_check": solution.cross_check,
        "residual_history": list(solution.residual_history),
    })
    save_state(solution.to_state(), out / "state.npz")
    return 0


def _verb_pullback(args) -> int:
    text, config = _read_config(args)
    if config.pullback is None:
        raise ConfigError(["experiment.pullback: section required for the "
                           "pullback verb"])
    ctx = build_run(config, seed=args.seed, threads=args.threads)
    spec = config.pullback
    fields = [random_initial(ctx.ops, ctx.params, args.seed + i,
                             amplitude=config.initial.amplitude,
                             clamp=config.initial.clamp)
              for i in range(spec.n_fields)]
    report = pullback_experiment(ctx.disc, fields, spec.offsets, spec.t_fixed,
                                 velocity=ctx.velocity, threads=args.threads)
    out = Path(args.out)
    _write_common(out, ctx, "pullback",
                  text, ("offset", "max_h1_sq", "spread"))
    write_timeseries_csv(out / "pullback.csv",
                         np.asarray(report.start_times),
                         {"offset": np.asarray(report.offsets),
                          "max_h1_sq": report.max_h1_sq,
                          "spread": report.spreads})
    write_summary_json(out / "summary.json",
                       {"label": ctx.config.label, **report.as_summary()})
    return 0


def _verb_equilibrium(args) -> int:
    text, config = _read_config(args)
    if config.equilibrium is None:
        raise ConfigError(["experiment.equilibrium: section required for the "
                           "equilibrium verb"])
    ctx = build_run(config, seed=args.seed, threads=args.threads)
    spec = config.equilibrium
    report = equilibrium_experiment(
        ctx.disc, ctx.initial, config.t_end, velocity=ctx.velocity,
        t_start=config.t_start, decay_weight=spec.decay_weight,
        cauchy_tol=spec.cauchy_tol, tail_tol=spec.tail_tol,
        stationary_tol=spec.stationary_tol,
        fit_window_fraction=spec.fit_window_fraction,
        record_every=config.record_every or None)
    record = report.record
    columns = record_columns(record, ctx.params)
    out = Path(args.out)
    _write_common(out, ctx, "equilibrium", text, columns)
    write_timeseries_csv(out / "timeseries.csv", record.times, columns)
    write_summary_json(out / "summary.json",
                       {"label": ctx.config.label, **report.as_summary()})
    save_state(report.refined.to_state(time=float(record.times[-1])),
               out / "state.npz")
    return 0


def _verb_mesh_export(args) -> int:
    text, config = _read_config(args)
    ctx = build_run(config, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    _write_common(out, ctx, "mesh-export", text)
    export_mesh(ctx.mesh, out / "mesh.txt")
    return 0


# -- certify ---------------------------------------------------------------------

def _certify_checks() -> List[Tuple[str, Callable[[], Tuple[bool, str]]]]:
    """Cross-module invariant battery at desk scale.

    Each check returns (pass, one-line detail).  The battery re-derives its
    own small meshes and runs so that a certify failure points at the
    library, not at whatever config happens to be lying around.
    """
    ops = assemble(build_disk_mesh(level=2))
    params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=1.0,
                          beta=1.0, mass_target=0.1)
    pot = LogPotential()
    disc = Discretization(ops, params, pot, pot, SchemeConfig(dt=1.0 / 64.0))
    initial = random_initial(ops, params, seed=12345, amplitude=0.3)

    shared = {}

    def baseline_record():
        if "record" not in shared:
            shared["record"] = run(disc, initial, 0.0, 3.0)
        return shared["record"]

    def check_mass():
        record = baseline_record()
        drift = float(np.max(np.abs(record.mass(params) - params.mass_target)))
        return drift <= 1e-9, f"max abs drift {drift:.3e}"

    def check_energy():
        record = baseline_record()
        worst = float(np.max(np.diff(record.energy)))
        return worst <= 1e-10, f"worst energy increment {worst:.3e}"

    def check_separation():
        record = baseline_record()
        floor = float(np.min(record.separation_margin))
        return floor > 0.0, f"smallest separation margin {floor:.3e}"

    def check_domination_pair():
        kappa2 = brute_force_kappa2(pot, pot, alpha=0.5, kappa1=1.0)
        report = check_domination(pot, pot, alpha=0.5, kappa1=1.0,
                                  kappa2=kappa2 + 1e-9)
        return report.satisfied, (f"kappa2 {kappa2:.6f}, worst margin "
                                  f"{report.worst_margin:.3e}")

    def check_yosida():
        lam = 1e-2
        reg = YosidaPotential(pot, lam)
        xs = np.linspace(-3.0, 3.0, 2001)
        d = np.asarray(reg.singular_deriv(xs))
        lip = float(np.max(np.abs(np.diff(d) / np.diff(xs))))
        inside = np.linspace(-0.95, 0.95, 501)
        dominated = np.all(np.asarray(reg.value(inside))
                           <= np.asarray(pot.value(inside)) + 1e-12)
        ok = lip <= 1.0 / lam + 1e-6 and bool(dominated)
        return ok, f"slope bound {lip:.2f} vs {1.0 / lam:.0f}, below wall {bool(dominated)}"

    def check_poincare():
        result = poincare_constant(ops, 1.0, 1.0, 1.0)
        ok = result.converged and result.eigenvalue > 0.0
        return ok, (f"smallest eigenvalue {result.eigenvalue:.6f}, "
                    f"constant {result.constant:.4f}")

    def check_solver():
        solver = MeanZeroEllipticSolver(ops, params)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(5):
            raw = BulkSurfaceField(rng.normal(size=ops.n_bulk),
                                   rng.normal(size=ops.n_surface))
            shift = field_mass(ops, params, raw)
            denom = params.beta ** 2 * float(np.sum(ops.lumped_bulk)) \
                + float(np.sum(ops.lumped_surface))
            mean = shift / denom
            rhs = BulkSurfaceField(raw.bulk - params.beta * mean,
                                   raw.surface - mean)
            u = solver.solve(rhs)
            residual = abs(field_mass(ops, params, u))
            pairing = solver.dual_norm(rhs) ** 2
            energy = solver.form.value(u)
            worst = max(worst, residual, abs(pairing - energy))
        return worst <= 1e-8, f"worst identity defect {worst:.3e}"

    def check_gronwall():
        # frozen oracle values from tests/oracles/compute_oracles.py
        a = abs(decay_gronwall_bound(1.0, 1.0, 0.0) - 17.55790470650246)
        b = abs(uniform_gronwall_bound(math.log(2.0), 1.0, 1.0, 1.0) - 4.0)
        return max(a, b) <= 1e-9, f"oracle gaps {a:.1e}, {b:.1e}"

    def check_restart():
        whole = run(disc, initial, 0.0, 1.0)
        first = run(disc, initial, 0.0, 0.5)
        second = run(disc, first.final_state, 0.5, 1.0)
        same = np.array_equal(whole.final_state.phase.stacked(),
                              second.final_state.phase.stacked())
        return same, "restart composition bitwise equal: %s" % same

    def check_stationary():
        target_params = SystemParams(k_coupling=1.0, l_coupling=1.0,
                                     alpha=1.0, beta=1.0, mass_target=0.1)
        problem = StationaryProblem(ops, target_params, pot, pot)
        denom = float(np.sum(ops.lumped_bulk)) + float(np.sum(ops.lumped_surface))
        c = 0.1 / denom
        sol = newton_solve(problem, constant_field(ops, c, c))
        state = sol.to_state()
        local = Discretization(ops, target_params, pot, pot,
                               SchemeConfig(dt=1.0 / 64.0))
        drift = 0.0
        for _ in range(10):
            state, _stats = local.step(state)
            drift = max(drift, float(np.max(np.abs(
                state.phase.stacked() - sol.phase.stacked()))))
        return drift <= 1e-12, f"fixed-point drift {drift:.3e} over 10 steps"

    def check_artifacts():
        import tempfile
        record = baseline_record()
        columns = record_columns(record, params)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "series.csv"
            write_timeseries_csv(path, record.times, columns)
            once = path.read_bytes()
            write_timeseries_csv(path, record.times, columns)
            twice = path.read_bytes()
        return once == twice, "rewritten CSV identical: %s" % (once == twice)

    return [
        ("mass-conservation", check_mass),
        ("energy-dissipation", check_energy),
        ("separation-floor", check_separation),
        ("wall-domination", check_domination_pair),
        ("regularized-walls", check_yosida),
        ("poincare-definite", check_poincare),
        ("solver-identities", check_solver),
        ("gronwall-oracles", check_gronwall),
        ("restart-composition", check_restart),
        ("stationary-fixed-point", check_stationary),
        ("artifact-determinism", check_artifacts),
    ]


def _verb_certify(args) -> int:
    results = []
    checks = _certify_checks()
    width = max(len(name) for name, _ in checks)
    for name, check in checks:
        try:
            ok, detail = check()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append({"check": name, "passed": bool(ok), "detail": detail})
        print(f"{name.ljust(width)}  {'PASS' if ok else 'FAIL'}  {detail}")
    failed = [r for r in results if not r["passed"]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_json(out / "certify.json",
                           {"passed": not failed, "results": results})
    return 1 if failed else 0


VERBS = {
    "simulate": _verb_simulate,
    "stationary": _verb_stationary,
    "pullback": _verb_pullback,
    "equilibrium": _verb_equilibrium,
    "certify": _verb_certify,
    "mesh-export": _verb_mesh_export,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bschsim",
        description="Bulk-surface phase-field simulator and certification "
                    "harness on the disk")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None,
                       help="path to a TOML run config, or preset:<name>")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for random initial data (u64)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for experiment fan-out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    if not 0 <= args.seed < 2 ** 64:
        print("error: --seed must fit in an unsigned 64-bit integer",
              file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    needs_out = args.verb != "certify"
    if needs_out and args.out is None:
        print(f"error: {args.verb} needs --out DIR", file=sys.stderr)
        return 2
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "verb": args.verb,
            "seed": args.seed,
        }
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_summary_json(out / "error.json", record)
        print(f"numerical failure: {record['error']}: {record['message']}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
