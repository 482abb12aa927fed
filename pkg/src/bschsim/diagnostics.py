"""Energy bookkeeping, comparison-lemma bounds, fits, and series writers.

Everything here is pure post-processing: functions consume fields or finished
trajectory records and produce scalars, fitted exponents, or files.  The
quadrature conventions are the solver's own (consistent Dirichlet and trace
terms, lumped potential wells), so the breakdown total reproduces the energy
the stepper reports.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .fem import BulkSurfaceField, FemOperators
from .params import SystemParams, coupling_weight
from .stepping import TrajectoryRecord


@dataclasses.dataclass(frozen=True)
class EnergyBreakdown:
    bulk_dirichlet: float
    bulk_potential: float
    surface_dirichlet: float
    surface_potential: float
    trace_penalty: float
    total: float

    def parts(self) -> Dict[str, float]:
        return {
            "bulk_dirichlet": self.bulk_dirichlet,
            "bulk_potential": self.bulk_potential,
            "surface_dirichlet": self.surface_dirichlet,
            "surface_potential": self.surface_potential,
            "trace_penalty": self.trace_penalty,
        }


def energy_breakdown(ops: FemOperators, params: SystemParams,
                     bulk_potential, surface_potential,
                     field: BulkSurfaceField) -> EnergyBreakdown:
    """Free energy split into gradient, well, and trace-mismatch parts.

    Totals match the time stepper's energy: gradient and trace terms use the
    assembled bilinear forms, the wells use the lumped nodal quadrature.
    """
    phi, psi = field.bulk, field.surface
    bulk_dirichlet = 0.5 * float(phi @ (ops.stiffness_bulk @ phi))
    surface_dirichlet = 0.5 * float(psi @ (ops.stiffness_surface @ psi))
    bulk_wells = float(ops.lumped_bulk
                       @ np.asarray(bulk_potential.value(phi)))
    surface_wells = float(ops.lumped_surface
                          @ np.asarray(surface_potential.value(psi)))
    weight = coupling_weight(params.k_coupling)
    mismatch = params.alpha * psi - ops.trace @ phi
    trace_penalty = 0.5 * weight * float(mismatch
                                         @ (ops.mass_surface @ mismatch))
    total = (bulk_dirichlet + bulk_wells + surface_dirichlet
             + surface_wells + trace_penalty)
    return EnergyBreakdown(bulk_dirichlet=bulk_dirichlet,
                           bulk_potential=bulk_wells,
                           surface_dirichlet=surface_dirichlet,
                           surface_potential=surface_wells,
                           trace_penalty=trace_penalty,
                           total=total)


def uniform_gronwall_bound(a1: float, a2: float, a3: float, r: float) -> float:
    """Window bound ``(a3 / r + a2) * exp(a1)`` for absorbed quantities.

    ``a1`` bounds the window integral of the multiplier, ``a2`` the forcing,
    ``a3`` the integral of the quantity itself; ``r`` is the window length.
    """
    if r <= 0.0:
        raise ValueError("window length r must be positive")
    if min(a1, a2, a3) < 0.0:
        raise ValueError("window integrals must be nonnegative")
    return (a3 / r + a2) * float(np.exp(a1))


def decay_gronwall_bound(gamma: float, a1: float, a2: float) -> float:
    """Asymptotic offset for differential inequalities with decay rate gamma.

    Quantities whose derivative is damped at rate ``gamma`` and forced by
    sources with unit-window integrals ``a1`` (square-root channel) and
    ``a2`` (direct channel) settle below twice their initial exponential
    decay plus this constant.
    """
    if gamma <= 0.0:
        raise ValueError("decay rate gamma must be positive")
    if min(a1, a2) < 0.0:
        raise ValueError("window integrals must be nonnegative")
    half = 0.5 * gamma
    first = np.exp(half) / (1.0 - np.exp(-half)) * a1
    second = 2.0 * np.exp(gamma) / (1.0 - np.exp(-gamma)) * a2
    return float(first * first + second)


@dataclasses.dataclass(frozen=True)
class SeparationReport:
    floor: float
    margins: np.ndarray
    times: np.ndarray
    time_of_separation: Optional[float]

    @property
    def interior(self) -> bool:
        return bool(np.all(self.margins > 0.0))

    @property
    def terminal_margin(self) -> float:
        return float(self.margins[-1])


def separation_monitor(record: TrajectoryRecord,
                       floor: Optional[float] = None) -> SeparationReport:
    """Earliest sample after which the wall margin stays at or above a floor.

    The default floor is half the terminal margin, the natural threshold for
    certifying eventual uniform separation; ``time_of_separation`` is None
    when the margin still dips below the floor near the end.
    """
    margins = np.asarray(record.separation_margin)
    times = np.asarray(record.times)
    if floor is None:
        floor = 0.5 * float(margins[-1])
    above = margins >= floor
    onset: Optional[float] = None
    if above[-1]:
        below = np.nonzero(~above)[0]
        first = 0 if below.size == 0 else int(below[-1]) + 1
        onset = float(times[first])
    return SeparationReport(floor=float(floor), margins=margins,
                            times=times, time_of_separation=onset)


@dataclasses.dataclass(frozen=True)
class ExponentialFit:
    rate: float
    amplitude: float
    n_samples: int


def fit_exponential_decay(times: Sequence[float], values: Sequence[float],
                          plateau: float = 0.0) -> ExponentialFit:
    """Least-squares rate of ``values - plateau ~ A * exp(-rate * t)``.

    Non-positive excesses carry no information about the rate and are
    dropped; at least two usable samples are required.
    """
    t = np.asarray(times, dtype=np.float64)
    excess = np.asarray(values, dtype=np.float64) - plateau
    keep = excess > 0.0
    if int(np.count_nonzero(keep)) < 2:
        raise ValueError("need at least two samples above the plateau")
    slope, intercept = np.polyfit(t[keep], np.log(excess[keep]), 1)
    return ExponentialFit(rate=float(-slope),
                          amplitude=float(np.exp(intercept)),
                          n_samples=int(np.count_nonzero(keep)))


@dataclasses.dataclass(frozen=True)
class GradientInequalityFit:
    slope: float
    exponent: float
    n_samples: int


def fit_gradient_inequality(energy_gaps: Sequence[float],
                            dual_norms: Sequence[float],
                            norm_cutoff: float,
                            gap_cutoff: float = 0.0) -> Optional[GradientInequalityFit]:
    """Log-log slope of energy excess against the chemical-potential norm.

    A slope ``s`` corresponds to the exponent ``1 - 1/s`` of the gradient
    inequality driving convergence to equilibrium.  Samples whose norm sits
    below ``norm_cutoff`` (solver noise) or whose gap is at most
    ``gap_cutoff`` (the energy-limit estimate's own uncertainty; such gaps
    carry plateau bias that steepens the slope artificially) are excluded;
    fewer than three survivors make the fit degenerate and the function
    returns None.
    """
    gaps = np.asarray(energy_gaps, dtype=np.float64)
    norms = np.asarray(dual_norms, dtype=np.float64)
    keep = (gaps > max(gap_cutoff, 0.0)) & (norms > norm_cutoff)
    if int(np.count_nonzero(keep)) < 3:
        return None
    slope = np.polyfit(np.log(norms[keep]), np.log(gaps[keep]), 1)[0]
    return GradientInequalityFit(slope=float(slope),
                                 exponent=float(1.0 - 1.0 / slope),
                                 n_samples=int(np.count_nonzero(keep)))


def record_columns(record: TrajectoryRecord,
                   params: SystemParams) -> Dict[str, np.ndarray]:
    """Named per-sample series of a finished run, mass regime resolved."""
    columns: Dict[str, np.ndarray] = {}
    mass = record.mass(params)
    if mass.ndim == 1:
        columns["mass"] = mass
    else:
        columns["mass_bulk"] = mass[:, 0]
        columns["mass_surface"] = mass[:, 1]
    for name in record.COLUMNS:
        if name in ("time", "bulk_integral", "surface_integral"):
            continue
        columns[name] = np.asarray(getattr(record, name))
    columns["bulk_integral"] = np.asarray(record.bulk_integral)
    columns["surface_integral"] = np.asarray(record.surface_integral)
    return columns


def write_timeseries_csv(path, times: Sequence[float],
                         columns: Mapping[str, Sequence[float]]) -> None:
    """One row per sample; full-precision reprs keep reruns byte-identical."""
    times = np.asarray(times)
    names = list(columns)
    series = [np.asarray(columns[name]) for name in names]
    for name, values in zip(names, series):
        if values.shape[0] != times.shape[0]:
            raise ValueError(f"column {name!r} has {values.shape[0]} rows, "
                             f"expected {times.shape[0]}")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(",".join(["t"] + names) + "\n")
        for i in range(times.shape[0]):
            row = [repr(float(times[i]))]
            for values in series:
                value = values[i]
                row.append(repr(int(value)) if values.dtype.kind in "iu"
                           else repr(float(value)))
            handle.write(",".join(row) + "\n")


def write_summary_json(path, payload: Mapping) -> None:
    """Sorted-key JSON with a stable float rendering."""

    def sanitize(value):
        if isinstance(value, Mapping):
            return {str(k): sanitize(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [sanitize(v) for v in value]
        if isinstance(value, np.ndarray):
            return [sanitize(v) for v in value.tolist()]
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (np.floating,)):
            return float(value)
        return value

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(sanitize(dict(payload)), handle, indent=2, sort_keys=True)
        handle.write("\n")
