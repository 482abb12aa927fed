"""Stationary solver: residuals, Newton behaviour, multiplier identities."""

import numpy as np
import pytest

from bschsim.fem import (BulkSurfaceField, assemble, build_disk_mesh,
                         constant_field)
from bschsim.forms import ConstraintError, field_mass
from bschsim.params import INFINITE, SystemParams
from bschsim.potentials import LogPotential, SingularDomainError
from bschsim.stationary import (StationaryError, StationaryProblem,
                                StationarySolution, newton_solve,
                                separation_width, stationary_residual)
from bschsim.stepping import (Discretization, SchemeConfig, load_state, run,
                              save_state)


@pytest.fixture(scope="module")
def ops():
    return assemble(build_disk_mesh(level=3))


@pytest.fixture(scope="module")
def measures(ops):
    return float(np.sum(ops.lumped_bulk)), float(np.sum(ops.lumped_surface))


def make_problem(ops, k=1.0, l=1.0, alpha=1.0, beta=1.0, target=0.5):
    params = SystemParams(k_coupling=k, l_coupling=l, alpha=alpha, beta=beta,
                          mass_target=target)
    pot = LogPotential()
    return StationaryProblem(ops, params, pot, pot), pot


def admissible_constant(ops, problem, level_value):
    """Constant pair matching the trace constraint when one is active."""
    alpha = problem.params.alpha
    bulk_value = alpha * level_value if problem.reduction.constrained \
        else level_value
    return constant_field(ops, bulk_value, level_value)


class TestResidual:
    def test_constant_state_residual_tiny(self, ops, measures):
        bulk_area, surf_len = measures
        c = 0.75
        problem, pot = make_problem(ops, target=c * (bulk_area + surf_len))
        guess = constant_field(ops, c, c)
        q = problem.initial_multipliers(guess)
        _, norm = stationary_residual(problem, guess, q)
        assert norm <= 1e-12

    def test_initial_multiplier_closed_form(self, ops, measures):
        # beta * (alpha*|Omega|*F'(c) + |Gamma|*G'(c)) / (alpha*beta*|Omega| + |Gamma|)
        # with the discrete lumped measures; oracle evaluated inline
        bulk_area, surf_len = measures
        alpha, beta, c = 0.6, 0.8, 0.4
        problem, pot = make_problem(ops, k=2.0, alpha=alpha, beta=beta,
                                    target=0.1)
        guess = constant_field(ops, c, c)
        q = problem.initial_multipliers(guess)
        fprime = float(pot.deriv(np.array([c]))[0])
        mu_expected = beta * (alpha * bulk_area * fprime
                              + surf_len * fprime) \
            / (alpha * beta * bulk_area + surf_len)
        assert abs(beta * q[0] - mu_expected) <= 1e-12

    def test_zero_multipliers_leave_residual(self, ops):
        problem, _ = make_problem(ops)
        rng = np.random.default_rng(11)
        cand = BulkSurfaceField(0.3 + 0.1 * rng.normal(size=ops.n_bulk),
                                0.3 + 0.1 * rng.normal(size=ops.n_surface))
        _, norm = stationary_residual(problem, cand, [0.0])
        assert norm > 1e-4

    def test_wall_candidate_rejected(self, ops):
        problem, _ = make_problem(ops)
        bad = constant_field(ops, 1.0, 0.2)
        with pytest.raises(SingularDomainError):
            stationary_residual(problem, bad, [0.0])

    def test_trace_violating_candidate_rejected(self, ops):
        problem, _ = make_problem(ops, k=0.0, alpha=0.5)
        cand = constant_field(ops, 0.3, 0.3)  # trace should be 0.15
        with pytest.raises(ConstraintError):
            stationary_residual(problem, cand, [0.0])

    def test_multiplier_shape_validated(self, ops):
        problem, _ = make_problem(ops, l=INFINITE, target=(0.1, 0.1))
        cand = constant_field(ops, 0.1, 0.1)
        with pytest.raises(ValueError, match="multiplier"):
            stationary_residual(problem, cand, [0.0])

    def test_residual_field_matches_weak_vector(self, ops):
        problem, _ = make_problem(ops)
        rng = np.random.default_rng(5)
        cand = BulkSurfaceField(0.2 + 0.05 * rng.normal(size=ops.n_bulk),
                                0.2 + 0.05 * rng.normal(size=ops.n_surface))
        field, norm = stationary_residual(problem, cand, [0.3])
        reduced = problem.reduction.reduce(cand)
        weak = problem.weak_residual(reduced, np.array([0.3]))
        weights = problem._embedding_sq_t @ problem.m_hat
        assert np.allclose(field.stacked(),
                           problem.reduction.embedding @ (weak / weights),
                           atol=1e-14)
        assert norm == pytest.approx(np.max(np.abs(weak)))


class TestNewton:
    def test_exact_start_zero_iterations(self, ops, measures):
        bulk_area, surf_len = measures
        c = 0.75
        problem, _ = make_problem(ops, target=c * (bulk_area + surf_len))
        sol = newton_solve(problem, constant_field(ops, c, c))
        assert sol.iterations == 0
        assert sol.converged
        assert sol.residual_norm <= 1e-12
        assert np.array_equal(sol.phase.stacked(),
                              constant_field(ops, c, c).stacked())

    def test_perturbed_start_quadratic_convergence(self, ops, measures):
        bulk_area, surf_len = measures
        c = 0.75
        problem, _ = make_problem(ops, target=c * (bulk_area + surf_len))
        rng = np.random.default_rng(7)
        guess = BulkSurfaceField(c + 1e-3 * rng.normal(size=ops.n_bulk),
                                 c + 1e-3 * rng.normal(size=ops.n_surface))
        sol = newton_solve(problem, guess)
        assert sol.converged
        assert sol.residual_norm <= 1e-10
        assert sol.iterations <= 5
        # residual history contracts at least quadratically near the end
        assert sol.quadratic_ratios
        assert max(sol.quadratic_ratios) < 10.0
        # the constrained constant is the nearby critical point
        assert np.max(np.abs(sol.phase.stacked() - c)) <= 1e-9

    def test_wall_guess_rejected(self, ops):
        problem, _ = make_problem(ops)
        with pytest.raises(StationaryError, match="wall"):
            newton_solve(problem, constant_field(ops, 1.0, 0.0))

    @pytest.mark.parametrize("k,l", [
        (1.0, 1.0),
        (0.0, 1.0),
        (INFINITE, 1.0),
        (1.0, INFINITE),
        (0.0, INFINITE),
    ])
    def test_regimes_converge_with_consistent_multipliers(self, ops, k, l):
        alpha, beta, c = 0.6, 0.7, 0.35
        bulk_value = alpha * c if k == 0.0 else c
        guess = constant_field(ops, bulk_value, c)
        # target the constraint at the guess so the start is feasible
        probe, _ = make_problem(ops, k=k, l=l, alpha=alpha, beta=beta,
                                target=(0.1, 0.1) if l is INFINITE else 0.1)
        mass = field_mass(ops, probe.params, guess)
        problem, _ = make_problem(ops, k=k, l=l, alpha=alpha, beta=beta,
                                  target=mass)
        rng = np.random.default_rng(19)
        noise = 1e-2 * rng.normal(size=ops.n_bulk + ops.n_surface)
        if problem.reduction.constrained:
            # perturb inside the admissible set
            reduced = problem.reduction.reduce(guess)
            reduced = reduced + 1e-2 * rng.normal(size=reduced.shape[0])
            guess = problem.reduction.prolong(reduced)
        else:
            guess = BulkSurfaceField(guess.bulk + noise[:ops.n_bulk],
                                     guess.surface + noise[ops.n_bulk:])
        sol = newton_solve(problem, guess)
        assert sol.converged
        assert sol.residual_norm <= 1e-10
        assert sol.mass_defect <= 1e-10
        assert sol.separation > 0.0
        if problem.params.combined_mass_mode:
            assert sol.bulk_multiplier == beta * sol.surface_multiplier
        for name, predicted in sol.cross_check.items():
            assert abs(predicted - getattr(sol, name)) <= 1e-8

    def test_weak_flux_identity_is_the_only_constrained_check(self, ops):
        probe, _ = make_problem(ops, k=0.0, l=INFINITE, alpha=0.6, beta=0.7,
                                target=(0.18849, 0.31415))
        guess = admissible_constant(ops, probe, 0.1)
        mass = field_mass(ops, probe.params, guess)
        problem, _ = make_problem(ops, k=0.0, l=INFINITE, alpha=0.6, beta=0.7,
                                  target=mass)
        sol = newton_solve(problem, guess)
        assert set(sol.cross_check) == {"surface_multiplier"}
        assert abs(sol.cross_check["surface_multiplier"]
                   - sol.surface_multiplier) <= 1e-8


@pytest.fixture(scope="module")
def solved(ops):
    alpha, beta = 0.6, 0.7
    problem, pot = make_problem(ops, k=0.0, alpha=alpha, beta=beta,
                                target=0.5)
    bulk_area = float(np.sum(ops.lumped_bulk))
    surf_len = float(np.sum(ops.lumped_surface))
    c = 0.5 / (beta * alpha * bulk_area + surf_len)
    sol = newton_solve(problem, constant_field(ops, alpha * c, c))
    return problem, pot, sol


class TestFixedPointAndCriticality:

    def test_flow_fixed_point(self, ops, solved):
        problem, pot, sol = solved
        disc = Discretization(ops, problem.params, pot, pot,
                              SchemeConfig(dt=1.0 / 64.0))
        state = sol.to_state()
        reference = sol.phase.stacked()
        for _ in range(50):
            state, stats = disc.step(state)
            drift = float(np.max(np.abs(state.phase.stacked() - reference)))
            assert drift <= 1e-9
            assert stats.iterations == 0

    def test_criticality_along_projected_directions(self, ops, solved):
        problem, pot, sol = solved
        red = problem.reduction
        u = red.reduce(sol.phase)
        grad = problem.form.matrix @ u \
            + red.embedding.T @ (problem.m_hat
                                 * problem._w_deriv(red.embedding @ u))
        constraint = problem.constraint
        gram = constraint @ constraint.T
        rng = np.random.default_rng(23)
        for _ in range(20):
            direction = rng.normal(size=u.shape[0])
            direction -= constraint.T @ np.linalg.solve(
                gram, constraint @ direction)
            direction /= np.linalg.norm(direction)
            assert abs(float(grad @ direction)) <= 1e-8

    def test_gradient_pairing_matches_energy_quotient(self, ops, solved):
        # the weak vector really is the derivative of the discrete energy
        problem, pot, sol = solved
        red = problem.reduction
        u = red.reduce(sol.phase)
        grad = problem.form.matrix @ u \
            + red.embedding.T @ (problem.m_hat
                                 * problem._w_deriv(red.embedding @ u))

        def energy(x):
            full = red.embedding @ x
            nb = ops.n_bulk
            wells = problem.m_hat[:nb] @ np.asarray(pot.value(full[:nb])) \
                + problem.m_hat[nb:] @ np.asarray(pot.value(full[nb:]))
            return 0.5 * float(x @ (problem.form.matrix @ x)) + float(wells)

        rng = np.random.default_rng(29)
        direction = rng.normal(size=u.shape[0])
        direction /= np.linalg.norm(direction)
        eps = 1e-6
        quotient = (energy(u + eps * direction)
                    - energy(u - eps * direction)) / (2.0 * eps)
        assert abs(quotient - float(grad @ direction)) <= 1e-7


class TestSolutionObject:
    def test_separation_width_examples(self, ops):
        assert separation_width(constant_field(ops, 0.0, 0.0)) == 1.0
        field = constant_field(ops, 0.2, -0.1)
        assert separation_width(field) == pytest.approx(0.8)

    def test_separation_accepts_solution(self, ops, measures):
        bulk_area, surf_len = measures
        c = 0.75
        problem, _ = make_problem(ops, target=c * (bulk_area + surf_len))
        sol = newton_solve(problem, constant_field(ops, c, c))
        assert separation_width(sol) == sol.separation == pytest.approx(0.25)

    def test_to_state_checkpoint_roundtrip(self, ops, measures, tmp_path):
        bulk_area, surf_len = measures
        c = 0.75
        problem, _ = make_problem(ops, target=c * (bulk_area + surf_len))
        sol = newton_solve(problem, constant_field(ops, c, c))
        state = sol.to_state(time=2.5)
        path = tmp_path / "stationary.npz"
        save_state(state, path)
        loaded = load_state(path)
        assert loaded.time == 2.5
        assert np.array_equal(loaded.phase.stacked(), sol.phase.stacked())
        assert np.all(loaded.chemical.bulk == sol.bulk_multiplier)
        assert np.all(loaded.chemical.surface == sol.surface_multiplier)


class TestLongRunRefinement:
    def test_evolved_state_refines_quickly(self):
        ops = assemble(build_disk_mesh(level=2))
        params = SystemParams(k_coupling=1.0, l_coupling=1.0, alpha=1.0,
                              beta=1.0, mass_target=0.0)
        pot = LogPotential()
        rng = np.random.default_rng(41)
        init = BulkSurfaceField(0.2 * rng.normal(size=ops.n_bulk),
                                0.2 * rng.normal(size=ops.n_surface))
        init = BulkSurfaceField(np.clip(init.bulk, -0.6, 0.6),
                                np.clip(init.surface, -0.6, 0.6))
        from bschsim.forms import project_to_mass_target
        init = project_to_mass_target(ops, params, init)
        disc = Discretization(ops, params, pot, pot,
                              SchemeConfig(dt=1.0 / 128.0))
        record = run(disc, init, 0.0, 8.0)
        problem = StationaryProblem(ops, params, pot, pot)
        sol = newton_solve(problem, record.final_state.phase)
        assert sol.converged
        assert sol.iterations <= 10
        assert sol.residual_norm <= 1e-10
        assert sol.separation > 0.0
        # refined state stays close to where the flow had settled
        gap = np.max(np.abs(sol.phase.stacked()
                            - record.final_state.phase.stacked()))
        assert gap <= 0.05
