"""Trajectory-level certificate experiments.

Three harnesses, each fanning independent runs across a thread pool and
reducing the results to a small report: start-time absorption (deeper start
times land in the same bounded set), settling to equilibrium with an
exponent fit for the final approach, and continuous dependence of
trajectories on the stirring velocity.  Reports are plain data; callers
decide which verdicts to enforce.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import (ExponentialFit, GradientInequalityFit,
                          SeparationReport, fit_exponential_decay,
                          fit_gradient_inequality, separation_monitor)
from .fem import BulkSurfaceField, h1_norm_sq
from .forms import MeanZeroEllipticSolver
from .stationary import StationaryProblem, StationarySolution, newton_solve
from .stepping import Discretization, TrajectoryRecord, run
from .velocity import VelocityPair, check_decay_condition


class ExperimentPreconditionError(ValueError):
    """Input data violates a precondition the experiment relies on."""


def _map_jobs(worker, jobs, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, jobs))


# -- pullback absorption -------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class PullbackReport:
    t_fixed: float
    offsets: Tuple[float, ...]
    start_times: Tuple[float, ...]
    max_h1_sq: np.ndarray
    spreads: np.ndarray
    plateau: float
    rate_fit: Optional[ExponentialFit]
    n_runs: int

    def as_summary(self) -> Dict:
        return {
            "t_fixed": self.t_fixed,
            "offsets": list(self.offsets),
            "max_h1_sq": self.max_h1_sq.tolist(),
            "spreads": self.spreads.tolist(),
            "plateau": self.plateau,
            "fitted_rate": None if self.rate_fit is None
            else self.rate_fit.rate,
            "n_runs": self.n_runs,
        }


def pullback_experiment(disc: Discretization,
                        initial_fields: Sequence[BulkSurfaceField],
                        offsets: Sequence[float], t_fixed: float,
                        velocity: Optional[VelocityPair] = None,
                        threads: int = 1) -> PullbackReport:
    """Start every field at ``t_fixed + offset`` and compare states at ``t_fixed``.

    Offsets must be negative; deeper offsets give the flow longer to forget
    the data.  The per-offset table holds the largest H1 norm over the set
    and the largest pairwise H1 distance; the approach of the norms to the
    deepest-offset plateau is fitted with an exponential in elapsed time.
    """
    if not initial_fields:
        raise ExperimentPreconditionError("need at least one initial field")
    offsets = tuple(float(o) for o in offsets)
    if any(o >= 0.0 for o in offsets):
        raise ExperimentPreconditionError(
            "offsets must be negative (start before the observation time)")
    if len(set(offsets)) != len(offsets):
        raise ExperimentPreconditionError("offsets must be distinct")
    start_times = tuple(t_fixed + o for o in offsets)

    jobs = [(tau, field) for tau in start_times for field in initial_fields]

    def worker(job):
        tau, field = job
        record = run(disc, field.copy(), tau, t_fixed, velocity=velocity)
        return record.final_state.phase

    finals = _map_jobs(worker, jobs, threads)
    n_fields = len(initial_fields)
    ops = disc.ops
    max_h1_sq = np.empty(len(offsets))
    spreads = np.empty(len(offsets))
    for i in range(len(offsets)):
        group = finals[i * n_fields:(i + 1) * n_fields]
        max_h1_sq[i] = max(h1_norm_sq(ops, phase) for phase in group)
        spread = 0.0
        for a in range(n_fields):
            for b in range(a + 1, n_fields):
                diff = BulkSurfaceField(
                    group[a].bulk - group[b].bulk,
                    group[a].surface - group[b].surface)
                spread = max(spread, math.sqrt(h1_norm_sq(ops, diff)))
        spreads[i] = spread

    deepest = int(np.argmin(offsets))
    plateau = float(max_h1_sq[deepest])
    elapsed = np.array([t_fixed - tau for tau in start_times])
    others = np.arange(len(offsets)) != deepest
    try:
        rate_fit = fit_exponential_decay(elapsed[others], max_h1_sq[others],
                                         plateau=plateau)
    except ValueError:
        rate_fit = None
    return PullbackReport(t_fixed=float(t_fixed), offsets=offsets,
                          start_times=start_times, max_h1_sq=max_h1_sq,
                          spreads=spreads, plateau=plateau, rate_fit=rate_fit,
                          n_runs=len(jobs))


# -- settling to equilibrium ---------------------------------------------------

@dataclasses.dataclass
class EquilibriumReport:
    record: TrajectoryRecord
    energy_limit: float
    energy_window_span: float
    tail_h1_max: float
    refined: StationarySolution
    exponent_fit: Optional[GradientInequalityFit]
    separation: SeparationReport
    terminal_margin_gap: float
    verdicts: Dict[str, bool]

    def as_summary(self) -> Dict:
        return {
            "energy_limit": self.energy_limit,
            "energy_window_span": self.energy_window_span,
            "tail_h1_max": self.tail_h1_max,
            "stationary_residual": self.refined.residual_norm,
            "stationary_iterations": self.refined.iterations,
            "separation_width": self.refined.separation,
            "terminal_margin": self.separation.terminal_margin,
            "terminal_margin_gap": self.terminal_margin_gap,
            "exponent": None if self.exponent_fit is None
            else self.exponent_fit.exponent,
            "exponent_samples": 0 if self.exponent_fit is None
            else self.exponent_fit.n_samples,
            "verdicts": dict(self.verdicts),
        }


def equilibrium_experiment(disc: Discretization, initial, t_end: float,
                           velocity: Optional[VelocityPair] = None, *,
                           t_start: float = 0.0, decay_weight: float = 1e-3,
                           cauchy_tol: float = 1e-6, tail_tol: float = 1e-4,
                           stationary_tol: float = 1e-10,
                           fit_window_fraction: float = 0.5,
                           record_every: Optional[int] = None) -> EquilibriumReport:
    """Long run, windowed energy limit, Newton refinement, exponent fit.

    The stirring must switch itself off: a nonzero velocity is admitted only
    when its exponentially weighted tail is finite.  The energy limit is the
    mean over the final 5% of samples (the settling theory gives no rate, so
    no rate is assumed), the state increments are measured in H1 against the
    final state over the last 10%, and the terminal state is refined by the
    stationary Newton solver.  The final-approach exponent comes from a
    log-log fit of energy excess against the chemical-potential norm over
    the last ``fit_window_fraction`` of the horizon; the excess is anchored
    at the refined equilibrium's energy (the windowed mean would bias the
    slope near the plateau), and samples below ``10 * stationary_tol`` are
    discarded as solver noise.
    """
    if velocity is not None and not velocity.is_zero:
        decay = check_decay_condition(velocity, decay_weight)
        if not decay.satisfied:
            raise ExperimentPreconditionError(
                "velocity does not satisfy the decaying-stirring condition "
                f"(weight {decay_weight:g}, integral {decay.integral!r})")
    span = t_end - t_start
    if span <= 0.0:
        raise ExperimentPreconditionError("t_end must exceed t_start")
    if record_every is None:
        n_steps = max(1, int(round(span / disc.config.dt)))
        record_every = max(1, n_steps // 512)
    record = run(disc, initial, t_start, t_end, velocity=velocity,
                 record_every=record_every)

    times = record.times
    energy = record.energy
    n_window = max(2, int(math.ceil(0.05 * times.shape[0])))
    window = energy[-n_window:]
    energy_limit = float(np.mean(window))
    energy_window_span = float(np.max(window) - np.min(window))

    final_phase = record.final_state.phase
    tail_start = t_end - 0.1 * span
    tail_h1_max = 0.0
    for idx, snapshot in zip(record.stored_indices, record.stored_states):
        if times[idx] < tail_start or times[idx] == t_end:
            continue
        diff = BulkSurfaceField(snapshot.bulk - final_phase.bulk,
                                snapshot.surface - final_phase.surface)
        tail_h1_max = max(tail_h1_max, math.sqrt(h1_norm_sq(disc.ops, diff)))

    problem = StationaryProblem(disc.ops, disc.params, disc.bulk_potential,
                                disc.surface_potential)
    refined = newton_solve(problem, final_phase, tol=stationary_tol)

    separation = separation_monitor(record)
    if refined.separation > 0.0:
        terminal_margin_gap = abs(separation.terminal_margin
                                  - refined.separation) / refined.separation
    else:
        terminal_margin_gap = math.inf

    tail_mask = times >= t_end - fit_window_fraction * span
    gaps = energy - disc.energy(refined.phase)
    norms = np.sqrt(np.maximum(record.dissipation, 0.0))
    exponent_fit = fit_gradient_inequality(
        gaps[tail_mask], norms[tail_mask],
        norm_cutoff=10.0 * stationary_tol,
        gap_cutoff=100.0 * abs(energy_limit) * np.finfo(np.float64).eps)

    verdicts = {
        "energy_cauchy": energy_window_span <= cauchy_tol,
        "tail_h1": tail_h1_max <= tail_tol,
        "stationary_residual": refined.residual_norm <= stationary_tol,
        "separation_positive": refined.separation > 0.0
        and separation.interior,
        "terminal_margin": terminal_margin_gap <= 0.1,
        "exponent_in_band": exponent_fit is not None
        and 0.0 < exponent_fit.exponent < 0.5,
    }
    return EquilibriumReport(record=record, energy_limit=energy_limit,
                             energy_window_span=energy_window_span,
                             tail_h1_max=tail_h1_max, refined=refined,
                             exponent_fit=exponent_fit,
                             separation=separation,
                             terminal_margin_gap=terminal_margin_gap,
                             verdicts=verdicts)


# -- continuous dependence on the velocity --------------------------------------

@dataclasses.dataclass(frozen=True)
class DependenceReport:
    deltas: Tuple[float, ...]
    distances: np.ndarray
    perturbation_integrals: np.ndarray
    fitted_constants: np.ndarray
    ratios: np.ndarray

    @property
    def stable(self) -> bool:
        return bool(np.all((self.ratios >= 0.5) & (self.ratios <= 2.0)))

    def as_summary(self) -> Dict:
        return {
            "deltas": list(self.deltas),
            "distances": self.distances.tolist(),
            "perturbation_integrals": self.perturbation_integrals.tolist(),
            "fitted_constants": self.fitted_constants.tolist(),
            "ratios": self.ratios.tolist(),
            "stable": self.stable,
        }


def _superpose(base: VelocityPair, perturbation: VelocityPair,
               delta: float) -> VelocityPair:
    if base.envelope != perturbation.envelope:
        raise ExperimentPreconditionError(
            "base and perturbation must share the same envelope")
    if base.trace_derived != perturbation.trace_derived:
        raise ExperimentPreconditionError(
            "base and perturbation must use the same surface-amplitude rule")
    stream = base.stream + delta * perturbation.stream
    if base.trace_derived:
        amplitude: object = "trace"
    else:
        base_amp = float(base.edge_amplitude[0]) if base.edge_amplitude.size \
            else 0.0
        pert_amp = float(perturbation.edge_amplitude[0]) \
            if perturbation.edge_amplitude.size else 0.0
        amplitude = base_amp + delta * pert_amp
    return VelocityPair(base.ops, stream, amplitude, base.envelope)


def continuous_dependence_experiment(
        disc: Discretization, initial, base: VelocityPair,
        perturbation: VelocityPair, deltas: Sequence[float], t_end: float,
        t_start: float = 0.0, threads: int = 1) -> DependenceReport:
    """Terminal trajectory gap against the size of a velocity perturbation.

    Both runs start from identical data; the perturbed stirring adds
    ``delta`` times the perturbation stream under the shared envelope.  The
    gap is measured in the dual norm induced by the chemical-potential form
    (both runs conserve the same mass, so the difference is compatible), and
    the reported constants ``gap^2 / integral ||delta v||^2`` should be
    stable as ``delta`` shrinks.
    """
    deltas = tuple(float(d) for d in deltas)
    if any(d <= 0.0 for d in deltas):
        raise ExperimentPreconditionError("perturbation sizes must be positive")
    base_record = run(disc, initial, t_start, t_end, velocity=base)
    base_final = base_record.final_state.phase
    solver = MeanZeroEllipticSolver(disc.ops, disc.params)

    dt = disc.config.dt
    n_steps = base_record.n_steps
    step_times = t_start + dt * np.arange(n_steps)

    def worker(delta):
        stirred = _superpose(base, perturbation, delta)
        record = run(disc, initial, t_start, t_end, velocity=stirred)
        final = record.final_state.phase
        diff = BulkSurfaceField(final.bulk - base_final.bulk,
                                final.surface - base_final.surface)
        distance = solver.dual_norm(diff)
        # left-endpoint quadrature matches the scheme's convection sampling
        pert_only = _superpose(stirred, base, -1.0)
        integral = dt * float(sum(pert_only.norm(t) ** 2 for t in step_times))
        return distance, integral

    results = _map_jobs(worker, list(deltas), threads)
    distances = np.array([r[0] for r in results])
    integrals = np.array([r[1] for r in results])
    constants = distances ** 2 / integrals
    ratios = constants[1:] / constants[:-1] if constants.shape[0] > 1 \
        else np.empty(0)
    return DependenceReport(deltas=deltas, distances=distances,
                            perturbation_integrals=integrals,
                            fitted_constants=constants, ratios=ratios)
