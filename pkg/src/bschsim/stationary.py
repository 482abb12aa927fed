"""Mass-constrained stationary states and their multiplier constants.

A stationary state is a critical point of the free energy on the
mass-constrained admissible set: the chemical potentials collapse to spatial
constants, a tied pair when the boundary exchange is finite and an
independent pair when it is switched off.  The solver treats those constants
as unknowns next to the nodal values and drives the coupled residual with a
damped Newton method.

Quadrature conventions match the time stepper exactly (lumped potential and
mass pairings, consistent trace coupling), so a converged solution is a
fixed point of the evolution scheme, not of a nearby discretization.
Constant test pairs yield closed identities for the multipliers; they are
computed after convergence as independent cross-checks on the assembly.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import BulkSurfaceField, FemOperators
from .forms import CouplingForm, mass_rows
from .params import SystemParams
from .stepping import SimState, _fraction_to_boundary


class StationaryError(RuntimeError):
    """Newton failed to reach the requested stationary residual."""


@dataclasses.dataclass
class StationarySolution:
    phase: BulkSurfaceField
    bulk_multiplier: float
    surface_multiplier: float
    residual_norm: float
    mass_defect: float
    separation: float
    iterations: int
    converged: bool
    residual_history: List[float]
    quadratic_ratios: List[float]
    cross_check: Dict[str, float]

    def to_state(self, time: float = 0.0) -> SimState:
        """Checkpoint-compatible state with the flat chemical-potential pair."""
        chemical = BulkSurfaceField(
            np.full(self.phase.bulk.shape[0], self.bulk_multiplier),
            np.full(self.phase.surface.shape[0], self.surface_multiplier))
        return SimState(time=time, step_index=0, phase=self.phase.copy(),
                        chemical=chemical)


def separation_width(candidate: Union[BulkSurfaceField, StationarySolution]) -> float:
    """Distance of the largest nodal magnitude from the potential walls."""
    field = candidate.phase if isinstance(candidate, StationarySolution) else candidate
    return 1.0 - field.max_abs()


class StationaryProblem:
    """Discrete stationary system for one parameter set on one mesh."""

    def __init__(self, ops: FemOperators, params: SystemParams,
                 bulk_potential, surface_potential) -> None:
        self.ops = ops
        self.params = params
        self.bulk_potential = bulk_potential
        self.surface_potential = surface_potential
        self.bounded = bool(bulk_potential.bounded_domain
                            or surface_potential.bounded_domain)
        self.form = CouplingForm(ops, params.k_coupling, params.alpha)
        self.reduction = self.form.reduction
        embedding = self.reduction.embedding
        self._embedding_sq_t = embedding.multiply(embedding).T.tocsr()
        self.m_hat = np.concatenate([ops.lumped_bulk, ops.lumped_surface])
        self.constraint = np.asarray(
            sp.csr_matrix(mass_rows(ops, params)).dot(embedding).todense())
        self.n_multipliers = self.constraint.shape[0]
        if params.combined_mass_mode:
            self._targets = np.array([params.mass_target], dtype=np.float64)
        else:
            self._targets = np.asarray(params.mass_target, dtype=np.float64)

    def _w_deriv(self, stacked: np.ndarray) -> np.ndarray:
        nb = self.ops.n_bulk
        return np.concatenate([
            np.asarray(self.bulk_potential.deriv(stacked[:nb])),
            np.asarray(self.surface_potential.deriv(stacked[nb:]))])

    def _w_second(self, stacked: np.ndarray) -> np.ndarray:
        nb = self.ops.n_bulk
        bulk = np.asarray(self.bulk_potential.singular_second(stacked[:nb])) \
            + np.asarray(self.bulk_potential.smooth_second(stacked[:nb]))
        surf = np.asarray(self.surface_potential.singular_second(stacked[nb:])) \
            + np.asarray(self.surface_potential.smooth_second(stacked[nb:]))
        return np.concatenate([bulk, surf])

    def _multiplier_vector(self, multipliers) -> np.ndarray:
        q = np.atleast_1d(np.asarray(multipliers, dtype=np.float64))
        if q.shape != (self.n_multipliers,):
            raise ValueError(
                f"expected {self.n_multipliers} multiplier(s), got shape {q.shape}")
        return q

    def weak_residual(self, reduced: np.ndarray, q: np.ndarray) -> np.ndarray:
        full = self.reduction.embedding @ reduced
        return self.form.matrix @ reduced \
            + self.reduction.embedding.T @ (self.m_hat * self._w_deriv(full)) \
            - self.constraint.T @ q

    def residual(self, candidate: BulkSurfaceField,
                 multipliers) -> Tuple[BulkSurfaceField, float]:
        """Stationary residual as a strong-form field plus the weak sup norm.

        The scalar is the infinity norm of the weak residual vector the
        Newton solver drives; the field divides out the lumped weights so
        its nodal values approximate the pointwise equation defect.
        """
        q = self._multiplier_vector(multipliers)
        reduced = self.reduction.reduce(candidate, check=True)
        weak = self.weak_residual(reduced, q)
        weights = self._embedding_sq_t @ self.m_hat
        field = self.reduction.prolong(weak / weights)
        return field, float(np.max(np.abs(weak)))

    def constant_test_pairs(self) -> List[np.ndarray]:
        """Reduced coordinates of constant test pairs with closed identities.

        The (alpha, 1) pair is admissible under the trace constraint and
        annihilates the trace penalty for every exchange strength, so it is
        always usable; without a constraint the plain bulk and surface
        indicator pairs give one identity per multiplier instead.
        """
        if self.params.combined_mass_mode or self.reduction.constrained:
            pair = self.reduction.constant_pair(1.0)
            if not self.reduction.constrained:
                pair = pair.copy()
                pair[:self.ops.n_bulk] = self.params.alpha
            return [pair]
        nb, ns = self.ops.n_bulk, self.ops.n_surface
        return [np.concatenate([np.ones(nb), np.zeros(ns)]),
                np.concatenate([np.zeros(nb), np.ones(ns)])]

    def _pair_identity(self, reduced: np.ndarray,
                       pair: np.ndarray) -> Tuple[np.ndarray, float]:
        """Row and value of the identity ``row @ q = value`` for one test pair."""
        full = self.reduction.embedding @ reduced
        pair_full = self.reduction.embedding @ pair
        value = float(pair @ (self.form.matrix @ reduced)) \
            + float(pair_full @ (self.m_hat * self._w_deriv(full)))
        return self.constraint @ pair, value

    def initial_multipliers(self, candidate: BulkSurfaceField) -> np.ndarray:
        """Least-squares multiplier guess from the constant-pair identities."""
        reduced = self.reduction.reduce(candidate, check=True)
        rows, values = [], []
        for pair in self.constant_test_pairs():
            row, value = self._pair_identity(reduced, pair)
            rows.append(row)
            values.append(value)
        guess, *_ = np.linalg.lstsq(np.vstack(rows), np.asarray(values),
                                    rcond=None)
        return guess

    def multiplier_identities(self, phase: BulkSurfaceField,
                              bulk_multiplier: float) -> Dict[str, float]:
        """Independent multiplier predictions from the constant-pair identities.

        With independent masses and a trace constraint only one admissible
        pair exists; its identity then predicts the surface constant from the
        solved bulk one (the weak substitute for the normal-flux balance).
        """
        reduced = self.reduction.reduce(phase, check=True)
        pairs = self.constant_test_pairs()
        out: Dict[str, float] = {}
        if self.params.combined_mass_mode:
            row, value = self._pair_identity(reduced, pairs[0])
            theta = value / float(row[0])
            out["surface_multiplier"] = theta
            out["bulk_multiplier"] = self.params.beta * theta
        elif not self.reduction.constrained:
            for name, pair in zip(("bulk_multiplier", "surface_multiplier"),
                                  pairs):
                row, value = self._pair_identity(reduced, pair)
                out[name] = value / float(row[np.argmax(np.abs(row))])
        else:
            row, value = self._pair_identity(reduced, pairs[0])
            out["surface_multiplier"] = \
                (value - float(row[0]) * bulk_multiplier) / float(row[1])
        return out


def stationary_residual(problem: StationaryProblem,
                        candidate: BulkSurfaceField,
                        multipliers) -> Tuple[BulkSurfaceField, float]:
    return problem.residual(candidate, multipliers)


def newton_solve(problem: StationaryProblem, guess: BulkSurfaceField,
                 tol: float = 1e-10, max_iter: int = 50,
                 multipliers: Optional[np.ndarray] = None) -> StationarySolution:
    """Damped Newton on the augmented field-plus-multiplier system.

    The mass rows enter the linear system exactly, so one undamped step
    restores the constraint and full steps keep it; the line search
    therefore measures the euclidean norm of the complete residual.  An
    interiority guard keeps iterates away from the potential walls, and a
    :class:`StationaryError` carrying the last residual is raised when the
    tolerance is out of reach.
    """
    red = problem.reduction
    if problem.bounded and guess.max_abs() >= 1.0:
        raise StationaryError("initial guess touches the potential wall")
    u = red.reduce(guess, check=True).copy()
    q = problem.initial_multipliers(guess) if multipliers is None \
        else problem._multiplier_vector(multipliers).copy()
    n_red = red.n_reduced
    constraint = problem.constraint
    targets = problem._targets
    weights = problem._embedding_sq_t @ problem.m_hat

    def evaluate(u_vec, q_vec):
        # control norm covers the weak residual, its lumped-weight-normalized
        # pointwise counterpart, and the mass defect; the pointwise part keeps
        # post-convergence identities tight on fine meshes where the lumped
        # weights shrink like the mesh size squared
        weak = problem.weak_residual(u_vec, q_vec)
        mass = constraint @ u_vec - targets
        norm = max(float(np.max(np.abs(weak))),
                   float(np.max(np.abs(weak / weights))),
                   float(np.max(np.abs(mass))))
        return weak, mass, norm

    weak, mass, norm = evaluate(u, q)
    history = [norm]
    iterations = 0
    while norm > tol:
        if iterations >= max_iter:
            raise StationaryError(
                f"no convergence after {max_iter} iterations; "
                f"last residual {norm:.3e}")
        full = red.embedding @ u
        wsec = problem._embedding_sq_t @ (problem.m_hat
                                          * problem._w_second(full))
        jac = sp.bmat(
            [[problem.form.matrix + sp.diags(wsec), -sp.csc_matrix(constraint.T)],
             [sp.csc_matrix(constraint), None]], format="csc")
        delta = spla.splu(jac).solve(np.concatenate([-weak, -mass]))
        du, dq = delta[:n_red], delta[n_red:]
        sigma = 1.0
        if problem.bounded:
            sigma = _fraction_to_boundary(full, red.embedding @ du)
            if sigma < 1e-6:
                raise StationaryError(
                    f"Newton direction pinned at the wall (damping {sigma:.1e})")
        l2 = float(np.linalg.norm(np.concatenate([weak, mass])))
        accepted = False
        for _ in range(12):
            u_try = u + sigma * du
            q_try = q + sigma * dq
            weak_try, mass_try, norm_try = evaluate(u_try, q_try)
            l2_try = float(np.linalg.norm(np.concatenate([weak_try, mass_try])))
            if l2_try <= (1.0 - 1e-4 * sigma) * l2 or norm_try <= tol:
                accepted = True
                break
            sigma *= 0.5
        if not accepted:
            raise StationaryError(
                f"backtracking stalled at residual {l2:.3e} "
                f"after {iterations + 1} iterations")
        u, q = u_try, q_try
        weak, mass, norm = weak_try, mass_try, norm_try
        iterations += 1
        history.append(norm)

    ratios = [current / previous ** 2
              for previous, current in list(zip(history[:-1], history[1:]))[-3:]
              if previous > 0.0]
    phase = red.prolong(u)
    if problem.params.combined_mass_mode:
        surface_multiplier = float(q[0])
        bulk_multiplier = problem.params.beta * surface_multiplier
    else:
        bulk_multiplier, surface_multiplier = float(q[0]), float(q[1])
    return StationarySolution(
        phase=phase,
        bulk_multiplier=bulk_multiplier,
        surface_multiplier=surface_multiplier,
        residual_norm=float(np.max(np.abs(weak))),
        mass_defect=float(np.max(np.abs(constraint @ u - targets))),
        separation=separation_width(phase),
        iterations=iterations,
        converged=True,
        residual_history=history,
        quadratic_ratios=ratios,
        cross_check=problem.multiplier_identities(phase, bulk_multiplier))
