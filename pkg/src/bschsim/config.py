"""Run configuration: strict TOML schema, admissibility rules, assembly.

A run is described by one self-contained TOML file; there is no
environment-variable configuration, so the file (plus the CLI seed) pins the
whole run.  Parsing is strict: unknown keys are rejected, every error carries
the dotted path of the offending entry, and all schema errors are collected
before reporting.  Admissibility violations are reported under short rule
codes so they can be grepped and matched programmatically:

- ``A2``  coupling compatibility: ``alpha * beta * |bulk| + |surface|`` must
          not vanish, otherwise constants fall out of the mass pairing and
          the mean-zero elliptic problems degenerate.
- ``D1``  mass-target range: the constant state realizing the target mean
          must be interior to ``(-1, 1)`` componentwise.
- ``D5``  stirring decay: the settling experiment requires a velocity whose
          exponentially weighted tail is finite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fem import (BulkSurfaceField, BulkSurfaceMesh, FemOperators, assemble,
                  build_disk_mesh, constant_field)
from .forms import project_to_mass_target
from .params import (DomainGeometry, SystemParams, as_extended, is_infinite,
                     params_from_mean, validate_admissibility)
from .potentials import LogPotential
from .stepping import (CONVECTION_TREATMENTS, Discretization, SchemeConfig,
                       load_state)
from .velocity import ENVELOPE_KINDS, Envelope, VelocityPair


class ConfigError(ValueError):
    """Invalid run configuration; one line per problem, with key paths."""

    def __init__(self, problems: Sequence[str]) -> None:
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  "
                         + "\n  ".join(self.problems))


@dataclasses.dataclass(frozen=True)
class VelocitySpec:
    bulk: Tuple[Tuple[str, float], ...]
    surface: Union[float, str]
    envelope: Envelope

    def build(self, ops: FemOperators) -> VelocityPair:
        return VelocityPair.build(ops, bulk=list(self.bulk),
                                  surface_amplitude=self.surface,
                                  envelope=self.envelope)


@dataclasses.dataclass(frozen=True)
class InitialSpec:
    kind: str  # "noise" | "constant" | "checkpoint"
    amplitude: float = 0.2
    clamp: float = 0.9
    path: str = ""


@dataclasses.dataclass(frozen=True)
class PullbackSpec:
    offsets: Tuple[float, ...]
    t_fixed: float = 0.0
    n_fields: int = 3


@dataclasses.dataclass(frozen=True)
class EquilibriumSpec:
    decay_weight: float = 1e-3
    cauchy_tol: float = 1e-6
    tail_tol: float = 1e-4
    stationary_tol: float = 1e-10
    fit_window_fraction: float = 0.5


@dataclasses.dataclass(frozen=True)
class RunConfig:
    label: str
    radius: float
    level: int
    k_coupling: object
    l_coupling: object
    alpha: float
    beta: float
    mass_mean: Union[float, Tuple[float, float]]
    theta: float
    theta_c: float
    scheme: SchemeConfig
    t_start: float
    t_end: float
    record_every: int
    velocity: Optional[VelocitySpec]
    initial: InitialSpec
    pullback: Optional[PullbackSpec]
    equilibrium: Optional[EquilibriumSpec]
    digest: str


class _Walker:
    """Strict reader over the parsed TOML tree, collecting path-tagged errors."""

    def __init__(self) -> None:
        self.problems: List[str] = []

    def complain(self, path: str, message: str) -> None:
        self.problems.append(f"{path}: {message}")

    def section(self, tree: Dict, path: str, known: Sequence[str]) -> Dict:
        body = tree.get(path.rsplit(".", 1)[-1]) if "." in path \
            else tree.get(path)
        if body is None:
            return {}
        if not isinstance(body, dict):
            self.complain(path, "must be a table")
            return {}
        for key in body:
            if key not in known:
                self.complain(f"{path}.{key}", "unknown key")
        return body

    def take(self, body: Dict, path: str, key: str, kind, default):
        if key not in body:
            return default
        value = body[key]
        try:
            return kind(value)
        except (TypeError, ValueError) as exc:
            self.complain(f"{path}.{key}", str(exc))
            return default


def _as_float(value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    return float(value)


def _as_positive(value) -> float:
    number = _as_float(value)
    if not number > 0.0:
        raise ValueError(f"must be positive, got {number}")
    return number


def _as_int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)

def _as_nonneg_int(value) -> int:
    number = _as_int(value)
    if number < 0:
        raise ValueError(f"must be nonnegative, got {number}")
    return number


def _as_str(value) -> str:
    if not isinstance(value, str):
        raise ValueError(f"expected a string, got {value!r}")
    return value


def _as_mean(value):
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError("a mean pair needs exactly two entries")
        return (_as_float(value[0]), _as_float(value[1]))
    return _as_float(value)


_VELOCITY_PROFILES = ("zero", "rotation", "dipole", "quadrupole")


def _as_bulk_profiles(value) -> Tuple[Tuple[str, float], ...]:
    if isinstance(value, str):
        entries: List = [[value, 1.0]]
    elif isinstance(value, list):
        entries = value
    else:
        raise ValueError(f"expected a profile name or a list, got {value!r}")
    out = []
    for entry in entries:
        if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
            raise ValueError(f"each contribution is a [name, amplitude] "
                             f"pair, got {entry!r}")
        name = _as_str(entry[0])
        if name not in _VELOCITY_PROFILES:
            raise ValueError(f"unknown bulk profile {name!r}; "
                             f"choose from {_VELOCITY_PROFILES}")
        out.append((name, _as_float(entry[1])))
    return tuple(out)


_TOP_KEYS = ("label", "geometry", "params", "potential", "velocity",
             "scheme", "initial", "experiment")


def parse_config(text: str) -> RunConfig:
    """Parse and validate one TOML run description.

    Raises :class:`ConfigError` listing every problem found (unknown keys,
    type errors, and violations of the admissibility rules A2/D1/D5).
    """
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from exc
    w = _Walker()
    for key in tree:
        if key not in _TOP_KEYS:
            w.complain(key, "unknown key")
    label = w.take(tree, "", "label", _as_str, "run")

    geo = w.section(tree, "geometry", ("radius", "level"))
    radius = w.take(geo, "geometry", "radius", _as_positive, 1.0)
    level = w.take(geo, "geometry", "level", _as_nonneg_int, 4)

    par = w.section(tree, "params", ("k_coupling", "l_coupling", "alpha",
                                     "beta", "mass_mean"))
    try:
        k_coupling = as_extended(w.take(par, "params", "k_coupling",
                                        lambda v: v, 1.0))
    except ValueError as exc:
        w.complain("params.k_coupling", str(exc))
        k_coupling = 1.0
    try:
        l_coupling = as_extended(w.take(par, "params", "l_coupling",
                                        lambda v: v, 1.0))
    except ValueError as exc:
        w.complain("params.l_coupling", str(exc))
        l_coupling = 1.0
    alpha = w.take(par, "params", "alpha", _as_float, 1.0)
    beta = w.take(par, "params", "beta", _as_float, 1.0)
    mean = w.take(par, "params", "mass_mean", _as_mean, 0.0)

    pot = w.section(tree, "potential", ("kind", "theta", "theta_c",
                                        "yosida_level"))
    pot_kind = w.take(pot, "potential", "kind", _as_str, "log")
    if pot_kind not in ("log", "yosida"):
        w.complain("potential.kind", f"unknown kind {pot_kind!r}; "
                   "choose 'log' or 'yosida'")
        pot_kind = "log"
    theta = w.take(pot, "potential", "theta", _as_positive, 1.0)
    theta_c = w.take(pot, "potential", "theta_c", _as_positive, 2.0)
    yosida_level = w.take(pot, "potential", "yosida_level", _as_positive,
                          1e-3)

    sch = w.section(tree, "scheme", ("dt", "t_start", "t_end", "record_every",
                                     "newton_tol", "newton_max_iter",
                                     "convection"))
    dt = w.take(sch, "scheme", "dt", _as_positive, 1.0 / 64.0)
    t_start = w.take(sch, "scheme", "t_start", _as_float, 0.0)
    t_end = w.take(sch, "scheme", "t_end", _as_float, 1.0)
    record_every = w.take(sch, "scheme", "record_every", _as_nonneg_int, 0)
    newton_tol = w.take(sch, "scheme", "newton_tol", _as_positive, 1e-10)
    newton_max_iter = w.take(sch, "scheme", "newton_max_iter", _as_int, 50)
    convection = w.take(sch, "scheme", "convection", _as_str, "explicit")
    if t_end <= t_start:
        w.complain("scheme.t_end", f"must exceed t_start ({t_start})")
    if newton_max_iter < 1:
        w.complain("scheme.newton_max_iter", "needs at least one iteration")
    if convection not in CONVECTION_TREATMENTS:
        w.complain("scheme.convection", f"unknown treatment {convection!r}; "
                   f"choose from {CONVECTION_TREATMENTS}")
        convection = "explicit"

    vel_body = w.section(tree, "velocity", ("bulk", "amplitude", "surface",
                                            "envelope"))
    velocity: Optional[VelocitySpec] = None
    if vel_body:
        profiles = w.take(vel_body, "velocity", "bulk", _as_bulk_profiles,
                          (("zero", 0.0),))
        amplitude = w.take(vel_body, "velocity", "amplitude", _as_float, 1.0)
        profiles = tuple((name, amp * amplitude) for name, amp in profiles)
        surface = vel_body.get("surface", 0.0)
        if isinstance(surface, str):
            if surface != "trace":
                w.complain("velocity.surface",
                           f"expected a number or 'trace', got {surface!r}")
                surface = 0.0
        else:
            surface = w.take(vel_body, "velocity", "surface", _as_float, 0.0)
        env_body = w.section(vel_body, "velocity.envelope",
                             ("kind", "rate", "t_dec", "t_on", "t_off"))
        env_kind = w.take(env_body, "velocity.envelope", "kind", _as_str,
                          "constant")
        envelope = Envelope("constant")
        if env_kind not in ENVELOPE_KINDS:
            w.complain("velocity.envelope.kind",
                       f"unknown kind {env_kind!r}; "
                       f"choose from {ENVELOPE_KINDS}")
        else:
            try:
                envelope = Envelope(
                    kind=env_kind,
                    rate=w.take(env_body, "velocity.envelope", "rate",
                                _as_float, 0.0),
                    t_dec=w.take(env_body, "velocity.envelope", "t_dec",
                                 _as_float, 0.0),
                    t_on=w.take(env_body, "velocity.envelope", "t_on",
                                _as_float, 0.0),
                    t_off=w.take(env_body, "velocity.envelope", "t_off",
                                 _as_float, 1.0))
            except ValueError as exc:
                w.complain("velocity.envelope", str(exc))
        velocity = VelocitySpec(bulk=profiles, surface=surface,
                                envelope=envelope)

    ini = w.section(tree, "initial", ("kind", "amplitude", "clamp", "path"))
    ini_kind = w.take(ini, "initial", "kind", _as_str, "noise")
    if ini_kind not in ("noise", "constant", "checkpoint"):
        w.complain("initial.kind", f"unknown kind {ini_kind!r}; "
                   "choose 'noise', 'constant', or 'checkpoint'")
        ini_kind = "noise"
    initial = InitialSpec(
        kind=ini_kind,
        amplitude=w.take(ini, "initial", "amplitude", _as_float, 0.2),
        clamp=w.take(ini, "initial", "clamp", _as_positive, 0.9),
        path=w.take(ini, "initial", "path", _as_str, ""))
    if initial.kind == "checkpoint" and not initial.path:
        w.complain("initial.path", "checkpoint initial data needs a path")
    if not 0.0 < initial.clamp < 1.0:
        w.complain("initial.clamp", "must lie strictly between 0 and 1")

    exp = w.section(tree, "experiment", ("pullback", "equilibrium"))
    pullback: Optional[PullbackSpec] = None
    if "pullback" in exp:
        body = w.section(exp, "experiment.pullback",
                         ("offsets", "t_fixed", "n_fields"))
        raw_offsets = body.get("offsets")
        offsets: Tuple[float, ...] = ()
        if not isinstance(raw_offsets, list) or not raw_offsets:
            w.complain("experiment.pullback.offsets",
                       "needs a nonempty list of negative numbers")
        else:
            try:
                offsets = tuple(_as_float(v) for v in raw_offsets)
            except ValueError as exc:
                w.complain("experiment.pullback.offsets", str(exc))
            if any(o >= 0.0 for o in offsets):
                w.complain("experiment.pullback.offsets",
                           "offsets must be negative")
        pullback = PullbackSpec(
            offsets=offsets,
            t_fixed=w.take(body, "experiment.pullback", "t_fixed",
                           _as_float, 0.0),
            n_fields=w.take(body, "experiment.pullback", "n_fields",
                            _as_int, 3))
        if pullback.n_fields < 1:
            w.complain("experiment.pullback.n_fields", "needs at least one")
    equilibrium: Optional[EquilibriumSpec] = None
    if "equilibrium" in exp:
        body = w.section(exp, "experiment.equilibrium",
                         ("decay_weight", "cauchy_tol", "tail_tol",
                          "stationary_tol", "fit_window_fraction"))
        equilibrium = EquilibriumSpec(
            decay_weight=w.take(body, "experiment.equilibrium",
                                "decay_weight", _as_positive, 1e-3),
            cauchy_tol=w.take(body, "experiment.equilibrium", "cauchy_tol",
                              _as_positive, 1e-6),
            tail_tol=w.take(body, "experiment.equilibrium", "tail_tol",
                            _as_positive, 1e-4),
            stationary_tol=w.take(body, "experiment.equilibrium",
                                  "stationary_tol", _as_positive, 1e-10),
            fit_window_fraction=w.take(body, "experiment.equilibrium",
                                       "fit_window_fraction", _as_positive,
                                       0.5))

    # -- admissibility rules ----------------------------------------------------
    split_mode = is_infinite(l_coupling)
    if split_mode and not isinstance(mean, tuple):
        w.complain("params.mass_mean", "infinite l_coupling conserves two "
                   "masses; give a [bulk, surface] mean pair")
    if not split_mode and isinstance(mean, tuple):
        w.complain("params.mass_mean", "finite l_coupling conserves one "
                   "combined mass; give a single mean")
    if not -1.0 <= alpha <= 1.0:
        w.complain("params.alpha", f"must lie in [-1, 1], got {alpha}")
    elif not w.problems:
        bulk_measure = math.pi * radius ** 2
        surface_measure = 2.0 * math.pi * radius
        compat = alpha * beta * bulk_measure + surface_measure
        if abs(compat) <= 1e-12 * (bulk_measure + surface_measure):
            w.complain("params", "rule A2 violated: alpha * beta * |bulk| + "
                       f"|surface| = {compat:.3e} vanishes for the "
                       "configured disk")
        if split_mode:
            for tag, value in zip(("bulk", "surface"), mean):
                if not -1.0 < value < 1.0:
                    w.complain("params.mass_mean",
                               f"rule D1 violated: {tag} mean {value} "
                               "must lie in (-1, 1)")
        else:
            for tag, value in (("mean", mean), ("beta * mean", beta * mean)):
                if not -1.0 < value < 1.0:
                    w.complain("params.mass_mean",
                               f"rule D1 violated: {tag} = {value} "
                               "must lie in (-1, 1)")
    if equilibrium is not None and velocity is not None:
        moving = any(amp != 0.0 for _, amp in velocity.bulk) \
            or (velocity.surface != "trace" and velocity.surface != 0.0)
        tail = velocity.envelope.weighted_tail(equilibrium.decay_weight, 0.0)
        if moving and not math.isfinite(tail):
            w.complain("velocity.envelope", "rule D5 violated: the settling "
                       "experiment needs a stirring whose weighted tail "
                       f"integral is finite (weight "
                       f"{equilibrium.decay_weight:g})")

    if w.problems:
        raise ConfigError(w.problems)

    scheme = SchemeConfig(
        dt=dt, newton_tol=newton_tol, newton_max_iter=newton_max_iter,
        potential_mode="direct-log" if pot_kind == "log" else "yosida",
        yosida_level=yosida_level, convection_treatment=convection)
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return RunConfig(label=label, radius=radius, level=level,
                     k_coupling=k_coupling, l_coupling=l_coupling,
                     alpha=alpha, beta=beta, mass_mean=mean, theta=theta,
                     theta_c=theta_c, scheme=scheme, t_start=t_start,
                     t_end=t_end, record_every=record_every,
                     velocity=velocity, initial=initial, pullback=pullback,
                     equilibrium=equilibrium, digest=digest)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())


def preset_text(name: str) -> str:
    """Source text of a packaged run preset (``spinodal``, ``mixing``, ...)."""
    folder = resources.files("bschsim") / "presets"
    entry = folder / f"{name}.toml"
    if not entry.is_file():
        available = sorted(p.name[:-5] for p in folder.iterdir()
                           if p.name.endswith(".toml"))
        raise ConfigError([f"unknown preset {name!r}; available: {available}"])
    return entry.read_text(encoding="utf-8")


def load_preset(name: str) -> RunConfig:
    return parse_config(preset_text(name))


# -- assembly --------------------------------------------------------------------

def mesh_digest(mesh: BulkSurfaceMesh) -> str:
    blob = hashlib.sha256()
    blob.update(np.ascontiguousarray(mesh.vertices).tobytes())
    blob.update(np.ascontiguousarray(mesh.triangles).tobytes())
    blob.update(np.ascontiguousarray(mesh.boundary_cycle).tobytes())
    return blob.hexdigest()


def random_initial(ops: FemOperators, params: SystemParams, seed: int,
                   amplitude: float = 0.2, clamp: float = 0.9) -> BulkSurfaceField:
    """Seeded, clamped, mass-projected noise; admissible by construction.

    Noise is centered at the constant state realizing the mass target, so
    the final projection only corrects the noise's stray mass instead of
    shifting the whole field.  The trace constraint of the identified regime
    (``k_coupling == 0``) is imposed before projection, and the projection
    itself moves along constraint-respecting constant directions, so the
    result stays in the admissible set.  Same seed, same field, bit for bit.
    """
    geometry = DomainGeometry(float(np.sum(ops.lumped_bulk)),
                              float(np.sum(ops.lumped_surface)))
    try:
        center = constant_initial(ops, params, geometry)
    except ConfigError:
        # no trace-consistent constant exists; plain means still center well
        bulk_mean, surface_mean = params.mean_target(geometry)
        center = constant_field(ops, bulk_mean, surface_mean)
    rng = np.random.default_rng(seed)
    bulk = np.clip(center.bulk + amplitude * rng.standard_normal(ops.n_bulk),
                   -clamp, clamp)
    surface = np.clip(center.surface
                      + amplitude * rng.standard_normal(ops.n_surface),
                      -clamp, clamp)
    identified = (not is_infinite(params.k_coupling)
                  and float(params.k_coupling) == 0.0)
    if identified:
        bulk[ops.mesh.boundary_cycle] = params.alpha * surface
    field = project_to_mass_target(ops, params,
                                   BulkSurfaceField(bulk, surface))
    top = max(float(np.max(np.abs(field.bulk))),
              float(np.max(np.abs(field.surface))))
    if top >= 1.0:
        raise ConfigError(
            [f"initial: mass projection pushed noise to magnitude {top:.3f};"
             " lower initial.amplitude or move params.mass_mean inward"])
    return field


def constant_initial(ops: FemOperators, params: SystemParams,
                     geometry: DomainGeometry) -> BulkSurfaceField:
    """The admissible constant state hitting the mass target exactly."""
    identified = (not is_infinite(params.k_coupling)
                  and float(params.k_coupling) == 0.0)
    if not identified:
        bulk_value, surface_value = params.constant_state(geometry)
        return constant_field(ops, bulk_value, surface_value)
    if params.combined_mass_mode:
        denom = params.alpha * params.beta * geometry.bulk_measure \
            + geometry.surface_measure
        c = params.mass_target / denom
        return constant_field(ops, params.alpha * c, c)
    bulk_mean, surface_mean = params.mean_target(geometry)
    if abs(bulk_mean - params.alpha * surface_mean) > 1e-12:
        raise ConfigError(
            ["initial: no constant satisfies both the identified trace and "
             "the two mass targets; use kind = 'noise' instead"])
    return constant_field(ops, bulk_mean, surface_mean)


@dataclasses.dataclass
class RunContext:
    """Everything a verb needs, assembled from one config + seed + threads."""

    config: RunConfig
    mesh: BulkSurfaceMesh
    ops: FemOperators
    geometry: DomainGeometry
    params: SystemParams
    disc: Discretization
    velocity: Optional[VelocityPair]
    initial: BulkSurfaceField
    seed: int
    threads: int
    mesh_digest: str


def build_run(config: RunConfig, seed: int = 0, threads: int = 1) -> RunContext:
    """Assemble mesh, operators, parameters, stirring, and initial data.

    The mass mean from the config is converted to discrete totals with the
    lumped measures of the actual mesh, then re-checked by the discrete
    admissibility validator, so the continuum rules hold verbatim at the
    resolution being run.
    """
    mesh = build_disk_mesh(radius=config.radius, level=config.level)
    ops = assemble(mesh)
    geometry = DomainGeometry(float(np.sum(ops.lumped_bulk)),
                              float(np.sum(ops.lumped_surface)))
    params = params_from_mean(config.k_coupling, config.l_coupling,
                              config.alpha, config.beta, config.mass_mean,
                              geometry)
    validate_admissibility(params, geometry)
    potential = LogPotential(theta=config.theta, theta_c=config.theta_c)
    disc = Discretization(ops, params, potential, potential, config.scheme)
    velocity = config.velocity.build(ops) if config.velocity else None

    spec = config.initial
    if spec.kind == "noise":
        initial = random_initial(ops, params, seed,
                                 amplitude=spec.amplitude, clamp=spec.clamp)
    elif spec.kind == "constant":
        initial = constant_initial(ops, params, geometry)
    else:
        state = load_state(spec.path)
        initial = state.phase
        if initial.bulk.shape != (ops.n_bulk,):
            raise ConfigError(
                [f"initial.path: checkpoint has {initial.bulk.shape[0]} bulk "
                 f"nodes, the configured mesh has {ops.n_bulk}"])
    return RunContext(config=config, mesh=mesh, ops=ops, geometry=geometry,
                      params=params, disc=disc, velocity=velocity,
                      initial=initial, seed=seed, threads=threads,
                      mesh_digest=mesh_digest(mesh))
