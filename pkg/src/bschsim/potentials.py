"""Double-well potentials split into a convex wall part and a smooth perturbation.

The physical potential is ``W = W1 + W2`` where ``W1`` is convex with
``W1'' >= convexity_floor`` (for the logarithmic well the walls blow up at
``s = +-1``) and ``W2`` is smooth with a Lipschitz derivative.  The implicit
time discretization and the stationary solver only ever evaluate ``W1`` parts
implicitly, so this module also provides the Moreau-Yosida regularization of
``W1``: a globally defined convex envelope whose derivative is the scaled
distance to the resolvent.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np

from . import _accel


class SingularDomainError(ValueError):
    """A wall potential was evaluated at or beyond its domain boundary."""

    def __init__(self, message: str, node_index: Optional[int] = None,
                 region: Optional[str] = None) -> None:
        if node_index is not None:
            message = f"{message} (node {node_index}, {region or 'unknown region'})"
        super().__init__(message)
        self.node_index = node_index
        self.region = region


def _elementwise(func):
    """Accept scalars or arrays, return the matching kind."""

    def wrapper(self, s):
        arr = np.asarray(s, dtype=np.float64)
        out = func(self, arr)
        if arr.ndim == 0:
            return float(out)
        return out

    return wrapper


class SplitPotential:
    """Callable bundle for one split potential.

    Parameters are plain vectorized callables so test doubles are cheap to
    build.  ``bounded_domain`` marks wall potentials living on (-1, 1); their
    evaluation methods raise :class:`SingularDomainError` outside the open
    interval.
    """

    kind = "custom"

    def __init__(self, singular_value: Callable, singular_deriv: Callable,
                 singular_second: Callable, smooth_value: Callable,
                 smooth_deriv: Callable, smooth_lipschitz: float,
                 convexity_floor: float, bounded_domain: bool = True,
                 smooth_second: Optional[Callable] = None) -> None:
        self._singular_value = singular_value
        self._singular_deriv = singular_deriv
        self._singular_second = singular_second
        self._smooth_value = smooth_value
        self._smooth_deriv = smooth_deriv
        self._smooth_second = smooth_second
        self.smooth_lipschitz = float(smooth_lipschitz)
        self.convexity_floor = float(convexity_floor)
        self.bounded_domain = bool(bounded_domain)

    def _guard(self, arr: np.ndarray) -> None:
        if self.bounded_domain and arr.size and np.max(np.abs(arr)) >= 1.0:
            offender = int(np.argmax(np.abs(np.ravel(arr))))
            raise SingularDomainError(
                f"value {np.ravel(arr)[offender]!r} outside the open interval (-1, 1)",
                node_index=offender)

    @_elementwise
    def singular_value(self, s):
        self._guard(s)
        return self._singular_value(s)

    @_elementwise
    def singular_deriv(self, s):
        self._guard(s)
        return self._singular_deriv(s)

    @_elementwise
    def singular_second(self, s):
        self._guard(s)
        return self._singular_second(s)

    @_elementwise
    def smooth_value(self, s):
        return self._smooth_value(s)

    @_elementwise
    def smooth_deriv(self, s):
        return self._smooth_deriv(s)

    @_elementwise
    def smooth_second(self, s):
        if self._smooth_second is None:
            raise ValueError("potential was built without a smooth second "
                             "derivative; stationary solves need one")
        return self._smooth_second(s)

    def value(self, s):
        return self.singular_value(s) + self.smooth_value(s)

    def deriv(self, s):
        return self.singular_deriv(s) + self.smooth_deriv(s)


class LogPotential(SplitPotential):
    """Logarithmic double well with entropy strength theta and pull theta_c.

    The convex part is the mixing entropy, the smooth part the quadratic
    pull ``-(theta_c / 2) s^2``.  Defaults theta=1, theta_c=2 give the deep
    quench used throughout the built-in presets.
    """

    kind = "log"

    def __init__(self, theta: float = 1.0, theta_c: float = 2.0) -> None:
        if theta <= 0.0:
            raise ValueError(f"entropy strength theta must be positive, got {theta}")
        self.theta = float(theta)
        self.theta_c = float(theta_c)
        th = self.theta
        tc = self.theta_c
        super().__init__(
            singular_value=lambda s: 0.5 * th * ((1.0 + s) * np.log1p(s)
                                                 + (1.0 - s) * np.log1p(-s)),
            singular_deriv=lambda s: th * np.arctanh(s),
            singular_second=lambda s: th / (1.0 - s * s),
            smooth_value=lambda s: -0.5 * tc * s * s,
            smooth_deriv=lambda s: -tc * s,
            smooth_lipschitz=tc,
            convexity_floor=th,
            bounded_domain=True,
            smooth_second=lambda s: -tc * np.ones_like(s),
        )


def log_potential(theta: float = 1.0, theta_c: float = 2.0) -> LogPotential:
    return LogPotential(theta=theta, theta_c=theta_c)


def quadratic_potential(curvature: float = 1.0, pull: float = 0.0) -> SplitPotential:
    """Globally defined test potential: convex part ``c s^2 / 2``.

    Its resolvent has the closed form ``r = s / (1 + lam * c)``, which anchors
    the regularization tests.
    """
    c = float(curvature)
    p = float(pull)
    return SplitPotential(
        singular_value=lambda s: 0.5 * c * s * s,
        singular_deriv=lambda s: c * s,
        singular_second=lambda s: c * np.ones_like(s),
        smooth_value=lambda s: -0.5 * p * s * s,
        smooth_deriv=lambda s: -p * s,
        smooth_lipschitz=abs(p),
        convexity_floor=c,
        bounded_domain=False,
        smooth_second=lambda s: -p * np.ones_like(s),
    )


_RESOLVENT_TOL_FACTOR = 1e-13
_RESOLVENT_MAX_ITER = 200
_WALL_CLAMP = 1e-15


def _generic_resolvent(base: SplitPotential, lam: float, s: np.ndarray) -> np.ndarray:
    """Safeguarded Newton/bisection for ``r + lam * W1'(r) = s``.

    Works for any convex ``W1`` with ``W1'(0) = 0``: the root then lies
    between 0 and ``s``, intersected with the potential domain.
    """
    if base.bounded_domain:
        bound = 1.0 - _WALL_CLAMP
        lo = np.maximum(-bound, np.minimum(0.0, s))
        hi = np.minimum(bound, np.maximum(0.0, s))
    else:
        lo = np.minimum(0.0, s)
        hi = np.maximum(0.0, s)
    root = 0.5 * (lo + hi)
    tol = _RESOLVENT_TOL_FACTOR * (1.0 + np.abs(s))
    active = np.ones(s.shape, dtype=bool)
    for _ in range(_RESOLVENT_MAX_ITER):
        residual = root + lam * base.singular_deriv(root) - s
        active = active & (np.abs(residual) > tol)
        if not active.any():
            break
        positive = active & (residual > 0.0)
        negative = active & ~(residual > 0.0)
        hi[positive] = root[positive]
        lo[negative] = root[negative]
        collapsed = active & (hi - lo <= 2.3e-16)
        root = np.where(collapsed, 0.5 * (lo + hi), root)
        active = active & ~collapsed
        if not active.any():
            break
        slope = 1.0 + lam * base.singular_second(root)
        candidate = root - residual / slope
        outside = (candidate <= lo) | (candidate >= hi)
        candidate = np.where(outside & active, 0.5 * (lo + hi), candidate)
        root = np.where(active, candidate, root)
    return root


class YosidaPotential:
    """Moreau-Yosida regularization of the convex part of a split potential.

    The regularized convex part is defined everywhere on the line; its
    derivative is ``(s - resolvent(s)) / lam`` and is Lipschitz with constant
    ``1 / lam``.  The smooth perturbation is passed through unchanged, so this
    object is a drop-in replacement for the base potential in the scheme.
    """

    kind = "yosida"
    bounded_domain = False

    def __init__(self, base: SplitPotential, lam: float) -> None:
        if lam <= 0.0:
            raise ValueError(f"regularization level must be positive, got {lam}")
        self.base = base
        self.lam = float(lam)
        self.smooth_lipschitz = base.smooth_lipschitz
        floor = base.convexity_floor
        self.convexity_floor = floor / (1.0 + self.lam * floor)

    @_elementwise
    def resolvent(self, s):
        flat = np.atleast_1d(s)
        if isinstance(self.base, LogPotential):
            out = _accel.resolvent_log(flat, self.lam, self.base.theta)
        else:
            out = _generic_resolvent(self.base, self.lam, flat)
        return np.reshape(out, np.shape(s))

    @_elementwise
    def singular_value(self, s):
        r = self.resolvent(s)
        gap = s - r
        return gap * gap / (2.0 * self.lam) + self.base.singular_value(r)

    @_elementwise
    def singular_deriv(self, s):
        return (s - self.resolvent(s)) / self.lam

    @_elementwise
    def singular_second(self, s):
        curvature = self.base.singular_second(self.resolvent(s))
        return curvature / (1.0 + self.lam * curvature)

    def smooth_value(self, s):
        return self.base.smooth_value(s)

    def smooth_deriv(self, s):
        return self.base.smooth_deriv(s)

    def smooth_second(self, s):
        return self.base.smooth_second(s)

    def value(self, s):
        return self.singular_value(s) + self.smooth_value(s)

    def deriv(self, s):
        return self.singular_deriv(s) + self.smooth_deriv(s)


def eval_potential(potential, s):
    """Value and derivative of the full potential at ``s``.

    Raises :class:`SingularDomainError` when a bounded potential is evaluated
    at or beyond the wall.
    """
    return potential.value(s), potential.deriv(s)


@dataclasses.dataclass(frozen=True)
class DominationReport:
    """Outcome of a wall-domination scan between paired potentials."""

    kappa1: float
    kappa2: float
    worst_margin: float
    worst_point: float
    satisfied: bool


def _domination_grid(bulk_pot, surface_pot, alpha: float,
                     yosida_level: Optional[float], samples: int):
    if yosida_level is None:
        grid = np.linspace(-1.0 + 1e-9, 1.0 - 1e-9, samples)
        bulk_eval = bulk_pot.singular_deriv
        surf_eval = surface_pot.singular_deriv
    else:
        grid = np.linspace(-3.0, 3.0, samples)
        bulk_eval = YosidaPotential(bulk_pot, yosida_level).singular_deriv
        surf_eval = YosidaPotential(surface_pot, yosida_level).singular_deriv
    return grid, np.abs(bulk_eval(alpha * grid)), np.abs(surf_eval(grid))


def check_domination(bulk_pot, surface_pot, alpha: float, kappa1: float,
                     kappa2: float, yosida_level: Optional[float] = None,
                     samples: int = 20001) -> DominationReport:
    """Scan ``kappa1 |G1'(s)| + kappa2 - |F1'(alpha s)|`` for its worst margin.

    With ``yosida_level`` set, both walls are replaced by their regularization
    at that level and the scan extends outside the physical interval, probing
    that one constant pair works uniformly across regularizations.
    """
    grid, bulk_mag, surf_mag = _domination_grid(bulk_pot, surface_pot, alpha,
                                                yosida_level, samples)
    margin = kappa1 * surf_mag + kappa2 - bulk_mag
    worst = int(np.argmin(margin))
    return DominationReport(kappa1=float(kappa1), kappa2=float(kappa2),
                            worst_margin=float(margin[worst]),
                            worst_point=float(grid[worst]),
                            satisfied=bool(margin[worst] >= 0.0))


def brute_force_kappa2(bulk_pot, surface_pot, alpha: float, kappa1: float,
                       yosida_level: Optional[float] = None,
                       samples: int = 20001) -> float:
    """Smallest nonnegative kappa2 making the domination scan pass."""
    _, bulk_mag, surf_mag = _domination_grid(bulk_pot, surface_pot, alpha,
                                             yosida_level, samples)
    deficit = bulk_mag - kappa1 * surf_mag
    return float(max(0.0, np.max(deficit)))
