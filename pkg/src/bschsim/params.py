"""Scalar parameters of the coupled bulk-surface phase-field model.

The model couples a bulk order parameter on a disk with a surface order
parameter on its boundary circle through two nonnegative coefficients, each
allowed to take the value infinity.  A coefficient value ``r`` enters the
equations only through the weight ``1/r``, extended by zero to the endpoints,
so infinity is represented by a dedicated sentinel (:data:`INFINITE`) and is
never fed to floating-point arithmetic.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Union


class Infinite:
    """Singleton sentinel for an infinite coupling coefficient."""

    _instance = None

    def __new__(cls) -> "Infinite":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "infinity"

    def __reduce__(self):
        return (Infinite, ())


INFINITE = Infinite()

ExtendedCoefficient = Union[float, Infinite]


def is_infinite(value: object) -> bool:
    """True when ``value`` is the infinite-coefficient sentinel."""
    return isinstance(value, Infinite) or value is INFINITE


def as_extended(value: object) -> ExtendedCoefficient:
    """Normalize a raw number or sentinel into an extended coefficient.

    Accepts the sentinel itself, the string ``"infinity"``, or a finite
    nonnegative real.  Raises ``ValueError`` otherwise; in particular the
    floats ``inf`` and ``nan`` are rejected so that infinity only ever
    appears as the sentinel.
    """
    if is_infinite(value):
        return INFINITE
    if isinstance(value, str):
        if value.strip().lower() == "infinity":
            return INFINITE
        raise ValueError(f"not a coupling coefficient: {value!r}")
    coefficient = float(value)
    if math.isnan(coefficient) or math.isinf(coefficient):
        raise ValueError("use the sentinel INFINITE (or 'infinity'), not float inf/nan")
    if coefficient < 0.0:
        raise ValueError(f"coupling coefficient must be nonnegative, got {coefficient}")
    return coefficient


def coupling_weight(value: ExtendedCoefficient) -> float:
    """Weight ``1/value`` on (0, inf), extended by zero to 0 and infinity."""
    if is_infinite(value):
        return 0.0
    coefficient = float(value)
    if coefficient < 0.0:
        raise ValueError(f"coupling coefficient must be nonnegative, got {coefficient}")
    if coefficient == 0.0:
        return 0.0
    return 1.0 / coefficient


@dataclasses.dataclass(frozen=True)
class DomainGeometry:
    """Measures of the computational domain: bulk area and boundary length."""

    bulk_measure: float
    surface_measure: float

    def __post_init__(self) -> None:
        if not (self.bulk_measure > 0.0 and math.isfinite(self.bulk_measure)):
            raise ValueError(f"bulk measure must be positive, got {self.bulk_measure}")
        if not (self.surface_measure > 0.0 and math.isfinite(self.surface_measure)):
            raise ValueError(f"surface measure must be positive, got {self.surface_measure}")


class AdmissibilityError(ValueError):
    """Parameter set violates a named admissibility rule."""

    def __init__(self, rule: str, message: str) -> None:
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


@dataclasses.dataclass(frozen=True)
class SystemParams:
    """Coefficients of the coupled system.

    Parameters
    ----------
    k_coupling, l_coupling:
        Boundary-condition coefficients for the order parameter and the
        chemical potential respectively; nonnegative reals or INFINITE.
    alpha:
        Trace weight of the surface phase in the bulk boundary condition,
        restricted to [-1, 1] so the coupled potential wells stay aligned.
    beta:
        Trace weight of the surface chemical potential; any real.
    mass_target:
        Conserved total mass.  A single real (the beta-weighted total
        ``beta * bulk integral + surface integral``) when ``l_coupling`` is
        finite; a pair of totals ``(bulk, surface)`` when it is infinite,
        since the two masses are then conserved separately.
    """

    k_coupling: ExtendedCoefficient
    l_coupling: ExtendedCoefficient
    alpha: float
    beta: float
    mass_target: Union[float, tuple]
    chi_k: float = dataclasses.field(init=False)
    chi_l: float = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_coupling", as_extended(self.k_coupling))
        object.__setattr__(self, "l_coupling", as_extended(self.l_coupling))
        if not (-1.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if not math.isfinite(self.beta):
            raise ValueError(f"beta must be finite, got {self.beta}")
        if is_infinite(self.l_coupling):
            target = self.mass_target
            if not (isinstance(target, (tuple, list)) and len(target) == 2):
                raise ValueError("infinite l_coupling conserves both masses; "
                                 "mass_target must be a (bulk, surface) pair")
            object.__setattr__(self, "mass_target", (float(target[0]), float(target[1])))
        else:
            if isinstance(self.mass_target, (tuple, list)):
                raise ValueError("finite l_coupling conserves one combined mass; "
                                 "mass_target must be a single real")
            object.__setattr__(self, "mass_target", float(self.mass_target))
        object.__setattr__(self, "chi_k", coupling_weight(self.k_coupling))
        object.__setattr__(self, "chi_l", coupling_weight(self.l_coupling))

    @property
    def combined_mass_mode(self) -> bool:
        """True when a single beta-weighted total mass is conserved."""
        return not is_infinite(self.l_coupling)

    def mean_target(self, geometry: DomainGeometry) -> Union[float, tuple]:
        """Mass target expressed as a (generalized) mean."""
        if self.combined_mass_mode:
            denom = self.beta ** 2 * geometry.bulk_measure + geometry.surface_measure
            return self.mass_target / denom
        bulk_total, surface_total = self.mass_target
        return (bulk_total / geometry.bulk_measure,
                surface_total / geometry.surface_measure)

    def constant_state(self, geometry: DomainGeometry) -> tuple:
        """Spatially constant pair (bulk value, surface value) with the target mass."""
        if self.combined_mass_mode:
            mean = self.mean_target(geometry)
            return (self.beta * mean, mean)
        return self.mean_target(geometry)


def generalized_mean(params: SystemParams, geometry: DomainGeometry,
                     bulk_integral: float, surface_integral: float):
    """Mean associated with the conserved quantity.

    For a finite ``l_coupling`` this is the beta-weighted combined mean
    ``(beta * bulk_integral + surface_integral) / (beta^2 |bulk| + |surface|)``;
    for an infinite one, the pair of plain means.
    """
    if params.combined_mass_mode:
        denom = params.beta ** 2 * geometry.bulk_measure + geometry.surface_measure
        return (params.beta * bulk_integral + surface_integral) / denom
    return (bulk_integral / geometry.bulk_measure,
            surface_integral / geometry.surface_measure)


def mass_functional(params: SystemParams,
                    bulk_integral: float, surface_integral: float):
    """Conserved mass: a combined total or a pair, depending on the regime."""
    if params.combined_mass_mode:
        return params.beta * bulk_integral + surface_integral
    return (bulk_integral, surface_integral)


def validate_admissibility(params: SystemParams, geometry: DomainGeometry) -> None:
    """Check the named admissibility rules against a concrete geometry.

    Raises :class:`AdmissibilityError` carrying the violated rule name:

    - ``coupling-compatibility``: ``alpha*beta*|bulk| + |surface|`` must stay
      away from zero, otherwise constants are invisible to the mean and the
      mean-zero elliptic problems degenerate.
    - ``mass-target-range``: the constant state realizing the mass target must
      be interior to the physical interval (-1, 1).
    """
    scale = geometry.bulk_measure + geometry.surface_measure
    compat = params.alpha * params.beta * geometry.bulk_measure + geometry.surface_measure
    if abs(compat) <= 1e-12 * scale:
        raise AdmissibilityError(
            "coupling-compatibility",
            f"alpha*beta*|bulk| + |surface| = {compat:.3e} is degenerate "
            f"(alpha={params.alpha}, beta={params.beta})")
    constant = params.constant_state(geometry)
    for label, value in zip(("bulk", "surface"), constant):
        if not (-1.0 < value < 1.0):
            raise AdmissibilityError(
                "mass-target-range",
                f"constant {label} state {value:.6g} leaves the interval (-1, 1); "
                f"adjust the mass target")


def params_from_mean(k_coupling, l_coupling, alpha: float, beta: float,
                     mean, geometry: DomainGeometry) -> SystemParams:
    """Build :class:`SystemParams` from a mean-valued mass target.

    ``mean`` is a single generalized mean for finite ``l_coupling`` and a pair
    of plain means otherwise; it is converted to the stored total(s) using the
    supplied geometry, so the constant state built from the result hits the
    mean exactly on that geometry.
    """
    l_norm = as_extended(l_coupling)
    if is_infinite(l_norm):
        bulk_mean, surface_mean = mean
        target = (bulk_mean * geometry.bulk_measure,
                  surface_mean * geometry.surface_measure)
    else:
        denom = beta ** 2 * geometry.bulk_measure + geometry.surface_measure
        target = float(mean) * denom
    return SystemParams(k_coupling=k_coupling, l_coupling=l_norm,
                        alpha=alpha, beta=beta, mass_target=target)
