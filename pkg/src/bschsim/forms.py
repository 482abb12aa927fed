"""Coupled bilinear forms, trace reductions, and mean-zero elliptic solves.

A pair of nonnegative extended coefficients controls how bulk and surface
quantities talk to each other: a finite positive coefficient contributes a
weighted trace-mismatch penalty, zero enforces the affine trace identity by
eliminating boundary bulk unknowns, and infinity decouples the regions.  The
same machinery instantiates both the order-parameter form (coefficient
``k_coupling``, weight ``alpha``) and the chemical-potential form
(coefficient ``l_coupling``, weight ``beta``).
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import BulkSurfaceField, FemOperators
from .params import (SystemParams, coupling_weight, is_infinite,
                     mass_functional)


class CompatibilityError(ValueError):
    """Right-hand side is not orthogonal to the conserved constants."""


class ConstraintError(ValueError):
    """Field violates the affine trace constraint of the reduced space."""


class UnsupportedRegimeError(ValueError):
    """Requested quantity is undefined in this coupling regime."""


class FieldReduction:
    """Embedding of reduced unknowns into stacked (bulk, surface) space.

    ``coeff=None`` is the identity embedding.  Otherwise boundary bulk nodes
    are eliminated through the trace identity ``bulk|boundary = coeff *
    surface`` and the reduced unknowns are the interior bulk nodes followed by
    the surface nodes.
    """

    def __init__(self, ops: FemOperators, coeff: Optional[float]) -> None:
        self.ops = ops
        self.coeff = None if coeff is None else float(coeff)
        n_bulk = ops.n_bulk
        n_surf = ops.n_surface
        self.n_full = n_bulk + n_surf
        cycle = ops.mesh.boundary_cycle
        if self.coeff is None:
            self.interior = np.arange(n_bulk)
            self.n_reduced = self.n_full
            self.embedding = sp.identity(self.n_full, format="csr")
        else:
            self.interior = np.setdiff1d(np.arange(n_bulk), cycle)
            n_int = self.interior.shape[0]
            self.n_reduced = n_int + n_surf
            rows = np.concatenate([self.interior, cycle,
                                   n_bulk + np.arange(n_surf)])
            cols = np.concatenate([np.arange(n_int),
                                   n_int + np.arange(n_surf),
                                   n_int + np.arange(n_surf)])
            data = np.concatenate([np.ones(n_int),
                                   np.full(n_surf, self.coeff),
                                   np.ones(n_surf)])
            self.embedding = sp.coo_matrix((data, (rows, cols)),
                                           shape=(self.n_full, self.n_reduced)).tocsr()

    @property
    def constrained(self) -> bool:
        return self.coeff is not None

    def reduce(self, field: BulkSurfaceField, check: bool = True) -> np.ndarray:
        """Reduced coordinates of a field living in the constrained space."""
        if self.coeff is None:
            return field.stacked()
        if check:
            trace = self.ops.boundary_values(field.bulk)
            defect = np.max(np.abs(trace - self.coeff * field.surface))
            scale = 1.0 + field.max_abs()
            if defect > 1e-9 * scale:
                raise ConstraintError(
                    f"trace constraint violated by {defect:.3e} "
                    f"(coefficient {self.coeff})")
        return np.concatenate([field.bulk[self.interior], field.surface])

    def prolong(self, reduced: np.ndarray) -> BulkSurfaceField:
        full = self.embedding @ reduced
        n_bulk = self.ops.n_bulk
        return BulkSurfaceField(full[:n_bulk], full[n_bulk:])

    def constant_pair(self, surface_value: float = 1.0) -> np.ndarray:
        """Reduced coordinates of the admissible constant pair.

        With a trace constraint that is ``(coeff * c, c)``; without one it is
        the pair ``(c, c)`` -- callers needing a different bulk constant can
        scale the two slices themselves.
        """
        out = np.empty(self.n_reduced)
        n_int = self.interior.shape[0] if self.coeff is not None else self.ops.n_bulk
        bulk_value = surface_value * self.coeff if self.coeff is not None else surface_value
        out[:n_int] = bulk_value
        out[n_int:] = surface_value
        return out


class CouplingForm:
    """Symmetric form: both Dirichlet energies plus the trace-mismatch penalty."""

    def __init__(self, ops: FemOperators, strength, coeff: float) -> None:
        self.ops = ops
        self.strength = strength
        self.coeff = float(coeff)
        self.weight = coupling_weight(strength)
        if is_infinite(strength):
            self.mode = "decoupled"
        elif float(strength) == 0.0:
            self.mode = "affine-trace"
        else:
            self.mode = "penalty"
        self.reduction = FieldReduction(
            ops, self.coeff if self.mode == "affine-trace" else None)
        stacked = sp.block_diag((ops.stiffness_bulk, ops.stiffness_surface),
                                format="csr")
        if self.mode == "penalty":
            trace = ops.trace
            mass_s = ops.mass_surface
            penalty = sp.bmat([
                [trace.T @ mass_s @ trace, -self.coeff * (trace.T @ mass_s)],
                [-self.coeff * (mass_s @ trace), self.coeff ** 2 * mass_s],
            ], format="csr")
            stacked = (stacked + self.weight * penalty).tocsr()
        emb = self.reduction.embedding
        self.matrix = (emb.T @ stacked @ emb).tocsr()

    def value(self, field: BulkSurfaceField) -> float:
        x = self.reduction.reduce(field)
        return float(x @ (self.matrix @ x))

    def norm(self, field: BulkSurfaceField) -> float:
        return float(np.sqrt(max(0.0, self.value(field))))


def stacked_consistent_mass(ops: FemOperators) -> sp.csr_matrix:
    return sp.block_diag((ops.mass_bulk, ops.mass_surface), format="csr")


def stacked_lumped_mass(ops: FemOperators) -> np.ndarray:
    return np.concatenate([ops.lumped_bulk, ops.lumped_surface])


def mass_rows(ops: FemOperators, params: SystemParams) -> np.ndarray:
    """Rows pairing a stacked field with its conserved mass(es)."""
    n_bulk = ops.n_bulk
    n_surf = ops.n_surface
    if params.combined_mass_mode:
        row = np.concatenate([params.beta * ops.lumped_bulk, ops.lumped_surface])
        return row[None, :]
    rows = np.zeros((2, n_bulk + n_surf))
    rows[0, :n_bulk] = ops.lumped_bulk
    rows[1, n_bulk:] = ops.lumped_surface
    return rows


def field_mass(ops: FemOperators, params: SystemParams, field: BulkSurfaceField):
    return mass_functional(params, ops.bulk_integral(field.bulk),
                           ops.surface_integral(field.surface))


class MeanZeroEllipticSolver:
    """Solution operator of the coupled constrained Poisson problem.

    ``solve(f)`` returns the unique mean-zero field ``u`` with
    ``form(u, test) = (f, test)`` for every admissible test pair, where the
    form carries the ``l_coupling`` penalty and the ``beta`` trace weight.
    The induced dual norm ``sqrt((f, solve(f)))`` is the metric in which
    trajectories depend continuously on the data.
    """

    def __init__(self, ops: FemOperators, params: SystemParams,
                 method: str = "direct") -> None:
        if method not in ("direct", "cg"):
            raise ValueError(f"unknown solver method {method!r}")
        self.ops = ops
        self.params = params
        self.method = method
        self.form = CouplingForm(ops, params.l_coupling, params.beta)
        reduction = self.form.reduction
        rows = mass_rows(ops, params)
        self.constraints = sp.csr_matrix(rows) @ reduction.embedding
        self.n_constraints = self.constraints.shape[0]
        self._mass = stacked_consistent_mass(ops)
        n = self.form.matrix.shape[0]
        if method == "direct":
            saddle = sp.bmat([[self.form.matrix, self.constraints.T],
                              [self.constraints, None]], format="csc")
            self._lu = spla.splu(saddle)
        else:
            dense_rows = self.constraints.toarray()
            scale = float(self.form.matrix.diagonal().mean())
            sigma = scale / max(float((dense_rows ** 2).sum()), 1e-300)
            augmented = (self.form.matrix
                         + sigma * sp.csr_matrix(dense_rows.T @ dense_rows))
            self._augmented = augmented.tocsr()
            diag = self._augmented.diagonal()
            self._precond = spla.LinearOperator(
                (n, n), matvec=lambda v: v / diag)

    def _solve_reduced(self, b_red: np.ndarray) -> np.ndarray:
        n = self.form.matrix.shape[0]
        if self.method == "direct":
            rhs = np.concatenate([b_red, np.zeros(self.n_constraints)])
            return self._lu.solve(rhs)[:n]
        solution, info = spla.cg(self._augmented, b_red, rtol=1e-12,
                                 atol=1e-14 * max(1.0, float(np.linalg.norm(b_red))),
                                 maxiter=20 * n, M=self._precond)
        if info != 0:
            raise RuntimeError(f"cg did not converge (info={info})")
        return solution

    def compatibility_defect(self, rhs: BulkSurfaceField):
        return field_mass(self.ops, self.params, rhs)

    def solve(self, rhs: BulkSurfaceField, check_compat: bool = True) -> BulkSurfaceField:
        defect = field_mass(self.ops, self.params, rhs)
        defects = np.atleast_1d(np.asarray(defect, dtype=float))
        if check_compat:
            from .fem import l2_norm_sq

            scale = 1.0 + np.sqrt(l2_norm_sq(self.ops, rhs))
            worst = float(np.max(np.abs(defects)))
            if worst > 1e-10 * scale:
                raise CompatibilityError(
                    f"rhs mass defect {worst:.3e} exceeds tolerance "
                    f"{1e-10 * scale:.3e}; the conserved constants are not "
                    f"orthogonal to this source")
        b_full = self._mass @ rhs.stacked()
        b_red = self.form.reduction.embedding.T @ b_full
        x = self._solve_reduced(b_red)
        return self.form.reduction.prolong(x)

    def dual_norm(self, rhs: BulkSurfaceField, check_compat: bool = True) -> float:
        solution = self.solve(rhs, check_compat=check_compat)
        b_full = self._mass @ rhs.stacked()
        pairing = float(b_full @ solution.stacked())
        return float(np.sqrt(max(0.0, pairing)))


@dataclasses.dataclass(frozen=True)
class PoincareResult:
    constant: float
    eigenvalue: float
    iterations: int
    converged: bool


def poincare_constant(ops: FemOperators, k_coupling, alpha: float, beta: float,
                      tol: float = 1e-10, max_iter: int = 500) -> PoincareResult:
    """Best constant in the mean-zero coupled Poincare inequality.

    Computes the smallest eigenvalue of the (k_coupling, alpha) form against
    the consistent L2 mass on the subspace where the beta-weighted combined
    mean vanishes, by inverse power iteration on the constrained saddle
    system; the constant is ``1/sqrt(eigenvalue)``.  The fully decoupled
    regime admits no such inequality (the surface-only constant pair is in
    the kernel), so an infinite ``k_coupling`` is rejected.
    """
    if is_infinite(k_coupling):
        raise UnsupportedRegimeError(
            "no joint Poincare inequality when the trace coupling is infinite: "
            "region-wise constants with zero combined mean are form-kernel states")
    form = CouplingForm(ops, k_coupling, alpha)
    reduction = form.reduction
    row = np.concatenate([beta * ops.lumped_bulk, ops.lumped_surface])
    constraint = sp.csr_matrix(row[None, :]) @ reduction.embedding
    mass_red = (reduction.embedding.T @ stacked_consistent_mass(ops)
                @ reduction.embedding).tocsr()
    saddle = sp.bmat([[form.matrix, constraint.T], [constraint, None]],
                     format="csc")
    lu = spla.splu(saddle)
    n = form.matrix.shape[0]

    # Deterministic generic start: coordinate field, projected onto the
    # constraint along the admissible constant pair.
    coords = ops.mesh.vertices[:, 0]
    if reduction.constrained:
        x = np.concatenate([coords[reduction.interior],
                            coords[ops.mesh.boundary_cycle]])
    else:
        x = np.concatenate([coords, coords[ops.mesh.boundary_cycle]])
    shift = reduction.constant_pair(1.0)
    c_row = constraint.toarray().ravel()
    x = x - (c_row @ x) / (c_row @ shift) * shift
    norm = np.sqrt(float(x @ (mass_red @ x)))
    x /= norm

    eigenvalue = float(x @ (form.matrix @ x))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        rhs = np.concatenate([mass_red @ x, np.zeros(1)])
        y = lu.solve(rhs)[:n]
        norm = np.sqrt(float(y @ (mass_red @ y)))
        x = y / norm
        new_eigenvalue = float(x @ (form.matrix @ x)) / float(x @ (mass_red @ x))
        if abs(new_eigenvalue - eigenvalue) <= tol * max(abs(new_eigenvalue), 1e-300):
            eigenvalue = new_eigenvalue
            converged = True
            break
        eigenvalue = new_eigenvalue
    if eigenvalue <= 0.0:
        raise RuntimeError(f"nonpositive Poincare eigenvalue {eigenvalue:.3e}")
    return PoincareResult(constant=1.0 / np.sqrt(eigenvalue),
                          eigenvalue=eigenvalue,
                          iterations=iterations,
                          converged=converged)


def project_to_mass_target(ops: FemOperators, params: SystemParams,
                           field: BulkSurfaceField) -> BulkSurfaceField:
    """Shift a field along admissible constant directions to hit the mass target.

    The directions respect the trace constraint in the identified regime
    (``k_coupling == 0``); with separately conserved masses and an identified
    trace, an interior bulk bump supplies the second degree of freedom.
    """
    identified = (not is_infinite(params.k_coupling)
                  and float(params.k_coupling) == 0.0)
    n_bulk = ops.n_bulk
    n_surf = ops.n_surface
    ones_b = np.ones(n_bulk)
    ones_s = np.ones(n_surf)

    if params.combined_mass_mode:
        if identified:
            direction = BulkSurfaceField(params.alpha * ones_b, ones_s)
        else:
            direction = BulkSurfaceField(params.beta * ones_b, ones_s)
        current = field_mass(ops, params, field)
        rate = field_mass(ops, params, direction)
        coefficient = (params.mass_target - current) / rate
        return field + coefficient * direction

    if identified:
        bump = np.zeros(n_bulk)
        interior = np.setdiff1d(np.arange(n_bulk), ops.mesh.boundary_cycle)
        bump[interior] = 1.0
        directions = [BulkSurfaceField(params.alpha * ones_b, ones_s),
                      BulkSurfaceField(bump, np.zeros(n_surf))]
    else:
        directions = [BulkSurfaceField(ones_b, np.zeros(n_surf)),
                      BulkSurfaceField(np.zeros(n_bulk), ones_s)]
    current = np.asarray(field_mass(ops, params, field))
    target = np.asarray(params.mass_target)
    system = np.column_stack([np.asarray(field_mass(ops, params, d))
                              for d in directions])
    coefficients = np.linalg.solve(system, target - current)
    out = field
    for coefficient, direction in zip(coefficients, directions):
        out = out + float(coefficient) * direction
    return out
