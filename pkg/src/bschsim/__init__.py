"""Simulator and certification harness for a convective bulk-surface
Cahn-Hilliard system with dynamic boundary conditions on a disk."""

__version__ = "0.1.0"

from .params import (INFINITE, AdmissibilityError, DomainGeometry,
                     SystemParams, coupling_weight, generalized_mean,
                     is_infinite, mass_functional, params_from_mean,
                     validate_admissibility)
from .potentials import (LogPotential, SingularDomainError, SplitPotential,
                         YosidaPotential, brute_force_kappa2, check_domination,
                         eval_potential, log_potential, quadratic_potential)
from .fem import (BulkSurfaceField, BulkSurfaceMesh, FemOperators, assemble,
                  build_disk_mesh, constant_field, export_mesh, h1_norm_sq,
                  integrate_nonlinear, l2_norm_sq)
from .forms import (CompatibilityError, ConstraintError, CouplingForm,
                    FieldReduction, MeanZeroEllipticSolver, PoincareResult,
                    UnsupportedRegimeError, field_mass, poincare_constant,
                    project_to_mass_target)
from .velocity import Envelope, VelocityPair, check_decay_condition
from .stepping import (Discretization, SchemeConfig, SimState,
                       TrajectoryRecord, load_state, run, save_state)
from .stationary import (StationaryError, StationaryProblem,
                         StationarySolution, newton_solve, separation_width,
                         stationary_residual)
from .diagnostics import (EnergyBreakdown, SeparationReport,
                          decay_gronwall_bound, energy_breakdown,
                          fit_exponential_decay, fit_gradient_inequality,
                          record_columns, separation_monitor,
                          uniform_gronwall_bound, write_summary_json,
                          write_timeseries_csv)
from .experiments import (DependenceReport, EquilibriumReport,
                          ExperimentPreconditionError, PullbackReport,
                          continuous_dependence_experiment,
                          equilibrium_experiment, pullback_experiment)
from .config import (ConfigError, RunConfig, RunContext, build_run,
                     load_config, load_preset, parse_config, random_initial)
