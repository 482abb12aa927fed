"""Divergence-free stirring velocities and their convection operators.

Bulk velocities are perpendicular gradients of a P1 stream function that
vanishes identically on the boundary, which makes them exactly weakly
divergence-free against every P1 test function and exactly tangential on the
boundary.  Surface velocities are tangential with a constant amplitude per
edge, either prescribed or (in the trace-identified regime) inherited from
the bulk field.  A scalar envelope carries the whole time dependence, so one
static profile serves every sample time.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.integrate
import scipy.sparse as sp

from .fem import FemOperators


ENVELOPE_KINDS = ("zero", "constant", "decay_after", "exponential", "bump")


@dataclasses.dataclass(frozen=True)
class Envelope:
    """Scalar time profile multiplying a static velocity field.

    kinds:
      ``zero``        identically 0
      ``constant``    identically 1
      ``decay_after`` min(1, exp(-rate (t - t_dec)))
      ``exponential`` exp(-rate (t - t_dec)), growing into the past
      ``bump``        smooth compactly supported bump on (t_on, t_off)
    """

    kind: str = "constant"
    rate: float = 0.0
    t_dec: float = 0.0
    t_on: float = 0.0
    t_off: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ENVELOPE_KINDS:
            raise ValueError(f"unknown envelope kind {self.kind!r}")
        if self.kind in ("decay_after", "exponential") and self.rate <= 0.0:
            raise ValueError(f"{self.kind} envelope needs a positive rate")
        if self.kind == "bump" and not self.t_off > self.t_on:
            raise ValueError("bump envelope needs t_on < t_off")

    def value(self, t: float) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return 1.0
        if self.kind == "decay_after":
            return min(1.0, math.exp(-self.rate * (t - self.t_dec)))
        if self.kind == "exponential":
            return math.exp(-self.rate * (t - self.t_dec))
        x = (2.0 * t - self.t_on - self.t_off) / (self.t_off - self.t_on)
        if abs(x) >= 1.0:
            return 0.0
        return math.exp(1.0 - 1.0 / (1.0 - x * x))

    @property
    def reference_time(self) -> float:
        """Time after which the envelope is non-increasing."""
        if self.kind == "decay_after" or self.kind == "exponential":
            return self.t_dec
        if self.kind == "bump":
            return 0.5 * (self.t_on + self.t_off)
        return 0.0

    @property
    def nonincreasing_after_reference(self) -> bool:
        return True  # every supported kind decays (or stays flat) past it

    def weighted_tail(self, weight: float, from_time: float) -> float:
        """Closed form of ``integral_{from_time}^inf exp(weight*s) value(s) ds``.

        Returns ``math.inf`` when the integral diverges.
        """
        a = float(weight)
        t0 = float(from_time)
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            if a >= 0.0:
                return math.inf
            return math.exp(a * t0) / (-a)
        if self.kind == "exponential":
            if a >= self.rate:
                return math.inf
            return (math.exp(self.rate * self.t_dec)
                    * math.exp((a - self.rate) * t0) / (self.rate - a))
        if self.kind == "decay_after":
            head = 0.0
            if t0 < self.t_dec:
                if a == 0.0:
                    head = self.t_dec - t0
                else:
                    head = (math.exp(a * self.t_dec) - math.exp(a * t0)) / a
            if a >= self.rate:
                return math.inf
            start = max(t0, self.t_dec)
            tail = (math.exp(self.rate * self.t_dec)
                    * math.exp((a - self.rate) * start) / (self.rate - a))
            return head + tail
        lo = max(t0, self.t_on)
        if lo >= self.t_off:
            return 0.0
        result, _ = scipy.integrate.quad(
            lambda s: math.exp(a * s) * self.value(s), lo, self.t_off)
        return result


def stream_profile(ops: FemOperators, name: str, amplitude: float) -> np.ndarray:
    """Nodal stream-function values, exactly zero on the boundary."""
    coords = ops.mesh.vertices
    radius = ops.mesh.radius
    shape = 1.0 - (coords[:, 0] ** 2 + coords[:, 1] ** 2) / radius ** 2
    if name == "zero":
        stream = np.zeros(ops.n_bulk)
    elif name == "rotation":
        stream = amplitude * shape
    elif name == "dipole":
        stream = amplitude * shape * coords[:, 0]
    elif name == "quadrupole":
        stream = amplitude * shape * coords[:, 0] * coords[:, 1]
    else:
        raise ValueError(f"unknown bulk velocity profile {name!r}")
    stream[ops.mesh.boundary_cycle] = 0.0
    return stream


def _element_perp_gradient(ops: FemOperators, stream: np.ndarray) -> np.ndarray:
    grads = np.einsum("tid,ti->td", ops.tri_grads, stream[ops.mesh.triangles])
    return np.column_stack([grads[:, 1], -grads[:, 0]])


class VelocityPair:
    """Static bulk/surface profile pair scaled by a common envelope."""

    def __init__(self, ops: FemOperators, stream: np.ndarray,
                 surface_amplitude: Union[float, str], envelope: Envelope) -> None:
        self.ops = ops
        self.envelope = envelope
        self.stream = np.asarray(stream, dtype=np.float64)
        if self.stream.shape != (ops.n_bulk,):
            raise ValueError("stream function must be nodal on the bulk mesh")
        boundary = np.max(np.abs(self.stream[ops.mesh.boundary_cycle])) \
            if ops.n_surface else 0.0
        if boundary != 0.0:
            raise ValueError("stream function must vanish on the boundary")
        self.element_velocity = _element_perp_gradient(ops, self.stream)
        if isinstance(surface_amplitude, str):
            if surface_amplitude != "trace":
                raise ValueError(
                    f"surface amplitude must be a number or 'trace', "
                    f"got {surface_amplitude!r}")
            owners = ops.boundary_edge_triangle
            self.edge_amplitude = np.einsum(
                "jd,jd->j", self.element_velocity[owners], ops.edge_tangents)
            self.trace_derived = True
        else:
            self.edge_amplitude = np.full(ops.n_surface, float(surface_amplitude))
            self.trace_derived = False
        speeds = np.linalg.norm(self.element_velocity, axis=1)
        self.bulk_l2_sq_static = float(ops.tri_areas @ speeds ** 2)
        self.surf_l2_sq_static = float(ops.edge_lengths @ self.edge_amplitude ** 2)
        self.max_speed_static = max(
            float(speeds.max()) if speeds.size else 0.0,
            float(np.max(np.abs(self.edge_amplitude))) if ops.n_surface else 0.0)
        self._static_ops: Optional[Tuple[sp.csr_matrix, sp.csr_matrix]] = None
        self._static_peclet_max = 0.0

    @classmethod
    def build(cls, ops: FemOperators,
              bulk: Union[str, Sequence[Tuple[str, float]]] = "zero",
              amplitude: float = 1.0,
              surface_amplitude: Union[float, str] = 0.0,
              envelope: Envelope = Envelope("constant")) -> "VelocityPair":
        """Assemble a pair from named profiles.

        ``bulk`` is either one profile name (scaled by ``amplitude``) or a
        list of (name, amplitude) contributions whose streams add.
        """
        if isinstance(bulk, str):
            contributions: Iterable[Tuple[str, float]] = [(bulk, amplitude)]
        else:
            contributions = bulk
        stream = np.zeros(ops.n_bulk)
        for name, amp in contributions:
            stream = stream + stream_profile(ops, name, amp)
        return cls(ops, stream, surface_amplitude, envelope)

    @property
    def is_zero(self) -> bool:
        if self.envelope.kind == "zero":
            return True
        return self.max_speed_static == 0.0

    def norm(self, t: float) -> float:
        """Combined L2 norm of the pair at time ``t``."""
        g = abs(self.envelope.value(t))
        return g * math.sqrt(self.bulk_l2_sq_static + self.surf_l2_sq_static)

    def max_speed(self, t: float) -> float:
        return abs(self.envelope.value(t)) * self.max_speed_static

    def element_sample(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        g = self.envelope.value(t)
        return g * self.element_velocity, g * self.edge_amplitude

    def sample(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Velocity at time ``t``: nodal bulk vectors, per-edge amplitudes.

        The nodal bulk field is the area-weighted average of the element
        values, for output only; assembly always uses element values.
        """
        g = self.envelope.value(t)
        nodal = np.zeros((self.ops.n_bulk, 2))
        weights = np.zeros(self.ops.n_bulk)
        tri = self.ops.mesh.triangles
        areas = self.ops.tri_areas
        for corner in range(3):
            np.add.at(nodal, tri[:, corner], areas[:, None] * self.element_velocity)
            np.add.at(weights, tri[:, corner], areas)
        nodal /= weights[:, None]
        return g * nodal, g * self.edge_amplitude

    # -- convection operators -------------------------------------------------

    def _build_static_operators(self) -> None:
        ops = self.ops
        tri = ops.mesh.triangles
        areas = ops.tri_areas
        dots = np.einsum("td,tid->ti", self.element_velocity, ops.tri_grads)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        data = (np.repeat(dots, 3, axis=1)
                * (areas / 3.0)[:, None]).ravel()
        n = ops.n_bulk
        bulk = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

        m = ops.n_surface
        idx = np.arange(m)
        nxt = (idx + 1) % m
        amp = self.edge_amplitude
        srows = np.concatenate([nxt, nxt, idx, idx])
        scols = np.concatenate([idx, nxt, idx, nxt])
        sdata = np.concatenate([amp / 2.0, amp / 2.0, -amp / 2.0, -amp / 2.0])
        surf = sp.coo_matrix((sdata, (srows, scols)), shape=(m, m)).tocsr()

        p = ops.mesh.vertices[tri]
        lengths = np.stack([
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
        ]).max(axis=0)
        speeds = np.linalg.norm(self.element_velocity, axis=1)
        peclet_bulk = float(np.max(speeds * lengths / 2.0)) if speeds.size else 0.0
        peclet_surf = float(np.max(np.abs(amp) * ops.edge_lengths / 2.0)) if m else 0.0
        # publish the limit before the matrices: concurrent callers key off
        # _static_ops being set and must never observe a zero Peclet bound
        self._static_peclet_max = max(peclet_bulk, peclet_surf)
        self._static_ops = (bulk, surf)

    def convection_operators(self, t: float, peclet_limit: float = 2.0):
        """Sampled convection matrices ``(bulk, surface, n_upwind)``.

        Rows pair test functions with ``integral(phi v . grad test)``.  While
        every cell Peclet number stays at or below the limit the centered
        static matrices are scaled by the envelope; cells beyond the limit
        are reassembled with full upwind donor-cell rows.
        """
        if self._static_ops is None:
            self._build_static_operators()
        g = self.envelope.value(t)
        bulk_static, surf_static = self._static_ops
        if abs(g) * self._static_peclet_max <= peclet_limit:
            return bulk_static * g, surf_static * g, 0
        return self._assemble_upwind(g, peclet_limit)

    def _assemble_upwind(self, g: float, peclet_limit: float):
        ops = self.ops
        tri = ops.mesh.triangles
        areas = ops.tri_areas
        velocity = g * self.element_velocity
        p = ops.mesh.vertices[tri]
        lengths = np.stack([
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
        ]).max(axis=0)
        speeds = np.linalg.norm(velocity, axis=1)
        upwind = speeds * lengths / 2.0 > peclet_limit
        dots = np.einsum("td,tid->ti", velocity, ops.tri_grads)
        n = ops.n_bulk

        centered = ~upwind
        rows = np.repeat(tri[centered], 3, axis=1).ravel()
        cols = np.tile(tri[centered], (1, 3)).ravel()
        data = (np.repeat(dots[centered], 3, axis=1)
                * (areas[centered] / 3.0)[:, None]).ravel()
        if np.any(upwind):
            # Donor value: the most upstream vertex of the cell.
            positions = np.einsum("td,tjd->tj", velocity[upwind],
                                  p[upwind])
            donor = tri[upwind][np.arange(int(upwind.sum())),
                                np.argmin(positions, axis=1)]
            rows_up = tri[upwind].ravel()
            cols_up = np.repeat(donor, 3)
            data_up = (dots[upwind] * areas[upwind][:, None]).ravel()
            rows = np.concatenate([rows, rows_up])
            cols = np.concatenate([cols, cols_up])
            data = np.concatenate([data, data_up])
        bulk = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

        m = ops.n_surface
        idx = np.arange(m)
        nxt = (idx + 1) % m
        amp = g * self.edge_amplitude
        surf_upwind = np.abs(amp) * ops.edge_lengths / 2.0 > peclet_limit
        srows, scols, sdata = [], [], []
        keep = ~surf_upwind
        srows.extend([nxt[keep], nxt[keep], idx[keep], idx[keep]])
        scols.extend([idx[keep], nxt[keep], idx[keep], nxt[keep]])
        sdata.extend([amp[keep] / 2.0, amp[keep] / 2.0,
                      -amp[keep] / 2.0, -amp[keep] / 2.0])
        if np.any(surf_upwind):
            donor_s = np.where(amp[surf_upwind] > 0.0, idx[surf_upwind],
                               nxt[surf_upwind])
            srows.extend([nxt[surf_upwind], idx[surf_upwind]])
            scols.extend([donor_s, donor_s])
            sdata.extend([amp[surf_upwind], -amp[surf_upwind]])
        surf = sp.coo_matrix((np.concatenate(sdata),
                              (np.concatenate(srows), np.concatenate(scols))),
                             shape=(m, m)).tocsr()
        n_upwind = int(upwind.sum()) + int(surf_upwind.sum())
        return bulk, surf, n_upwind


def zero_velocity(ops: FemOperators) -> VelocityPair:
    return VelocityPair.build(ops, bulk="zero", surface_amplitude=0.0,
                              envelope=Envelope("zero"))


@dataclasses.dataclass(frozen=True)
class DecayReport:
    """Verdict on the decaying-stirring admissibility condition."""

    weight: float
    reference_time: float
    finite: bool
    integral: float
    quadrature_estimate: float
    monotone_after_reference: bool
    satisfied: bool


def check_decay_condition(pair: VelocityPair, weight: float,
                          quad_window: float = 80.0) -> DecayReport:
    """Check integrability of ``exp(weight t) * ||(v, w)(t)||`` past the decay time.

    The closed-form value uses the envelope's analytic tail; the quadrature
    estimate integrates numerically over a finite window and adds the
    analytic remainder, giving an independent route to the same number.
    """
    static = math.sqrt(pair.bulk_l2_sq_static + pair.surf_l2_sq_static)
    env = pair.envelope
    t0 = env.reference_time
    analytic = static * env.weighted_tail(weight, t0)
    finite = math.isfinite(analytic)
    if finite and static > 0.0 and env.kind != "zero":
        t_mid = t0 + quad_window
        windowed, _ = scipy.integrate.quad(
            lambda s: math.exp(weight * s) * abs(env.value(s)) * static,
            t0, t_mid, limit=200)
        estimate = windowed + static * env.weighted_tail(weight, t_mid)
    else:
        estimate = analytic if finite else math.inf
    monotone = env.nonincreasing_after_reference
    return DecayReport(weight=float(weight), reference_time=t0, finite=finite,
                       integral=analytic, quadrature_estimate=estimate,
                       monotone_after_reference=monotone,
                       satisfied=bool(finite and monotone))
