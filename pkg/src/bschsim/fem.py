"""Disk meshes and piecewise-linear finite-element operators.

The bulk domain is a disk triangulated by a deterministic polar lattice:
``sectors`` wedges and ``2**level`` concentric rings, ring ``k`` carrying
``sectors * k`` nodes, so boundary nodes land exactly on the circle and the
element count grows by a factor four per refinement level.  The boundary
polyline doubles as the surface mesh; surface node ``j`` is glued to bulk
node ``boundary_cycle[j]``.

Assembly produces consistent and lumped mass matrices, stiffness matrices for
both regions, the trace map, and per-element geometry caches needed by the
convection and velocity code.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Tuple

import numpy as np
import scipy.sparse as sp

from .potentials import SingularDomainError


class MeshResolutionError(ValueError):
    """Refinement level outside the supported desk-scale range."""


class DegenerateElementError(ValueError):
    """An element with nonpositive area was produced or encountered."""


MAX_LEVEL = 8


@dataclasses.dataclass
class BulkSurfaceMesh:
    """Triangulated disk plus its boundary cycle."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_cycle: np.ndarray
    radius: float
    level: int
    sectors: int
    triangle_min_angles_deg: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_cycle.shape[0]


def _triangle_min_angles(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    a = np.linalg.norm(p2 - p1, axis=1)
    b = np.linalg.norm(p0 - p2, axis=1)
    c = np.linalg.norm(p1 - p0, axis=1)
    angles = np.empty((triangles.shape[0], 3))
    for idx, (opp, s1, s2) in enumerate(((a, b, c), (b, c, a), (c, a, b))):
        cosine = np.clip((s1 ** 2 + s2 ** 2 - opp ** 2) / (2.0 * s1 * s2), -1.0, 1.0)
        angles[:, idx] = np.degrees(np.arccos(cosine))
    return angles.min(axis=1)


def build_disk_mesh(radius: float = 1.0, level: int = 4,
                    sectors: int = 24) -> BulkSurfaceMesh:
    """Deterministic polar triangulation of a disk.

    ``level`` doubles the ring count each time it increases by one; levels
    above ``MAX_LEVEL`` are refused because the element count (and every
    assembled operator) grows fourfold per level.
    """
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool):
        raise ValueError(f"refinement level must be an integer, got {level!r}")
    if level < 0 or level > MAX_LEVEL:
        raise MeshResolutionError(
            f"refinement level {level} outside supported range [0, {MAX_LEVEL}]")
    if sectors < 3:
        raise ValueError(f"need at least 3 sectors, got {sectors}")

    rings = 2 ** level
    ring_start = np.zeros(rings + 1, dtype=np.int64)
    ring_start[0] = 0
    counts = sectors * np.arange(1, rings + 1)
    ring_start[1:] = 1 + np.concatenate(([0], np.cumsum(counts)))[:-1]
    n_vertices = 1 + int(counts.sum())

    vertices = np.zeros((n_vertices, 2))
    for k in range(1, rings + 1):
        count = sectors * k
        angles = 2.0 * np.pi * np.arange(count) / count
        rk = radius * k / rings
        start = ring_start[k]
        vertices[start:start + count, 0] = rk * np.cos(angles)
        vertices[start:start + count, 1] = rk * np.sin(angles)

    triangles = []
    inner_count = sectors
    inner_start = ring_start[1]
    for m in range(sectors):
        triangles.append((0, inner_start + m, inner_start + (m + 1) % sectors))

    for k in range(1, rings):
        si, ni = ring_start[k], sectors * k
        so, no = ring_start[k + 1], sectors * (k + 1)
        for s in range(sectors):
            i = 0
            o = 0
            while i < k or o < k + 1:
                next_inner = (s + (i + 1) / k) if i < k else np.inf
                next_outer = (s + (o + 1) / (k + 1)) if o < k + 1 else np.inf
                inner_node = si + (s * k + i) % ni
                outer_node = so + (s * (k + 1) + o) % no
                if next_outer <= next_inner:
                    outer_next = so + (s * (k + 1) + o + 1) % no
                    triangles.append((inner_node, outer_node, outer_next))
                    o += 1
                else:
                    inner_next = si + (s * k + i + 1) % ni
                    triangles.append((outer_node, inner_next, inner_node))
                    i += 1

    tri = np.asarray(triangles, dtype=np.int32)
    p0 = vertices[tri[:, 0]]
    p1 = vertices[tri[:, 1]]
    p2 = vertices[tri[:, 2]]
    signed = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                    - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    flip = signed < 0.0
    tri[flip, 1], tri[flip, 2] = tri[flip, 2].copy(), tri[flip, 1].copy()

    boundary = ring_start[rings] + np.arange(sectors * rings, dtype=np.int64)
    return BulkSurfaceMesh(
        vertices=vertices,
        triangles=tri,
        boundary_cycle=boundary,
        radius=float(radius),
        level=int(level),
        sectors=int(sectors),
        triangle_min_angles_deg=_triangle_min_angles(vertices, tri),
    )


def surface_operators(points: np.ndarray):
    """P1 operators on a closed polyline given by its ordered points.

    Returns (consistent mass, stiffness, lumped mass, edge lengths, unit edge
    tangents).  Edge ``j`` joins point ``j`` to point ``j+1`` (cyclically).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 3:
        raise ValueError("a closed polyline needs at least 3 points")
    nxt = np.roll(np.arange(n), -1)
    delta = points[nxt] - points
    lengths = np.linalg.norm(delta, axis=1)
    if np.min(lengths) <= 0.0:
        raise DegenerateElementError(
            f"surface edge {int(np.argmin(lengths))} has zero length")
    tangents = delta / lengths[:, None]

    rows = np.concatenate([np.arange(n), np.arange(n), nxt, nxt])
    cols = np.concatenate([np.arange(n), nxt, np.arange(n), nxt])
    mass_data = np.concatenate([lengths / 3.0, lengths / 6.0,
                                lengths / 6.0, lengths / 3.0])
    stiff_data = np.concatenate([1.0 / lengths, -1.0 / lengths,
                                 -1.0 / lengths, 1.0 / lengths])
    mass = sp.coo_matrix((mass_data, (rows, cols)), shape=(n, n)).tocsr()
    stiffness = sp.coo_matrix((stiff_data, (rows, cols)), shape=(n, n)).tocsr()
    lumped = np.zeros(n)
    np.add.at(lumped, np.arange(n), lengths / 2.0)
    np.add.at(lumped, nxt, lengths / 2.0)
    return mass, stiffness, lumped, lengths, tangents


@dataclasses.dataclass
class FemOperators:
    """Assembled operators and geometry caches for one mesh."""

    mesh: BulkSurfaceMesh
    mass_bulk: sp.csr_matrix
    stiffness_bulk: sp.csr_matrix
    lumped_bulk: np.ndarray
    mass_surface: sp.csr_matrix
    stiffness_surface: sp.csr_matrix
    lumped_surface: np.ndarray
    trace: sp.csr_matrix
    tri_areas: np.ndarray
    tri_grads: np.ndarray
    edge_lengths: np.ndarray
    edge_tangents: np.ndarray
    boundary_edge_triangle: np.ndarray
    bulk_measure: float
    surface_measure: float
    h_min: float
    h_max: float

    @property
    def n_bulk(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_surface(self) -> int:
        return self.mesh.n_boundary

    def bulk_integral(self, values: np.ndarray) -> float:
        return float(self.lumped_bulk @ values)

    def surface_integral(self, values: np.ndarray) -> float:
        return float(self.lumped_surface @ values)

    def boundary_values(self, bulk_values: np.ndarray) -> np.ndarray:
        return bulk_values[self.mesh.boundary_cycle]


def assemble(mesh: BulkSurfaceMesh) -> FemOperators:
    """Assemble mass/stiffness/trace operators for a disk mesh."""
    pts = mesh.vertices
    tri = mesh.triangles
    n = mesh.n_vertices

    p0 = pts[tri[:, 0]]
    p1 = pts[tri[:, 1]]
    p2 = pts[tri[:, 2]]
    areas = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                   - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    if np.min(areas) <= 0.0:
        raise DegenerateElementError(
            f"triangle {int(np.argmin(areas))} has nonpositive area "
            f"{float(np.min(areas)):.3e}")

    # Barycentric gradients: grad lambda_i = (b_i, c_i) / (2 A).
    b = np.stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]], axis=1)
    c = np.stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]], axis=1)
    grads = np.stack([b, c], axis=2) / (2.0 * areas[:, None, None])

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    stiff_local = (np.einsum("tid,tjd->tij", grads, grads)
                   * areas[:, None, None]).ravel()
    mass_pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass_local = (areas[:, None, None] * mass_pattern[None, :, :]).ravel()
    stiffness = sp.coo_matrix((stiff_local, (rows, cols)), shape=(n, n)).tocsr()
    mass = sp.coo_matrix((mass_local, (rows, cols)), shape=(n, n)).tocsr()
    lumped = np.zeros(n)
    np.add.at(lumped, tri.ravel(), np.repeat(areas / 3.0, 3))

    cycle = mesh.boundary_cycle
    surf_mass, surf_stiff, surf_lumped, lengths, tangents = surface_operators(pts[cycle])

    n_b = cycle.shape[0]
    trace = sp.coo_matrix((np.ones(n_b), (np.arange(n_b), cycle)),
                          shape=(n_b, n)).tocsr()

    edge_owner = {}
    for t_idx, (i, j, k) in enumerate(tri):
        for a_node, b_node in ((i, j), (j, k), (k, i)):
            key = (int(a_node), int(b_node)) if a_node < b_node else (int(b_node), int(a_node))
            edge_owner.setdefault(key, []).append(t_idx)
    boundary_tri = np.empty(n_b, dtype=np.int64)
    for j in range(n_b):
        a_node, b_node = int(cycle[j]), int(cycle[(j + 1) % n_b])
        key = (a_node, b_node) if a_node < b_node else (b_node, a_node)
        owners = edge_owner.get(key, [])
        if len(owners) != 1:
            raise DegenerateElementError(
                f"boundary edge {j} is owned by {len(owners)} triangles")
        boundary_tri[j] = owners[0]

    edge_all = np.concatenate([
        np.linalg.norm(p1 - p0, axis=1),
        np.linalg.norm(p2 - p1, axis=1),
        np.linalg.norm(p0 - p2, axis=1),
    ])

    return FemOperators(
        mesh=mesh,
        mass_bulk=mass,
        stiffness_bulk=stiffness,
        lumped_bulk=lumped,
        mass_surface=surf_mass,
        stiffness_surface=surf_stiff,
        lumped_surface=surf_lumped,
        trace=trace,
        tri_areas=areas,
        tri_grads=grads,
        edge_lengths=lengths,
        edge_tangents=tangents,
        boundary_edge_triangle=boundary_tri,
        bulk_measure=float(lumped.sum()),
        surface_measure=float(surf_lumped.sum()),
        h_min=float(edge_all.min()),
        h_max=float(edge_all.max()),
    )


@dataclasses.dataclass
class BulkSurfaceField:
    """Nodal values of a bulk function and a surface function."""

    bulk: np.ndarray
    surface: np.ndarray

    def copy(self) -> "BulkSurfaceField":
        return BulkSurfaceField(self.bulk.copy(), self.surface.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.bulk, self.surface])

    @classmethod
    def from_stacked(cls, vec: np.ndarray, n_bulk: int) -> "BulkSurfaceField":
        return cls(vec[:n_bulk].copy(), vec[n_bulk:].copy())

    def __add__(self, other: "BulkSurfaceField") -> "BulkSurfaceField":
        return BulkSurfaceField(self.bulk + other.bulk, self.surface + other.surface)

    def __sub__(self, other: "BulkSurfaceField") -> "BulkSurfaceField":
        return BulkSurfaceField(self.bulk - other.bulk, self.surface - other.surface)

    def __mul__(self, scalar: float) -> "BulkSurfaceField":
        return BulkSurfaceField(self.bulk * scalar, self.surface * scalar)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        bulk_max = float(np.max(np.abs(self.bulk))) if self.bulk.size else 0.0
        surf_max = float(np.max(np.abs(self.surface))) if self.surface.size else 0.0
        return max(bulk_max, surf_max)


def constant_field(ops: FemOperators, bulk_value: float,
                   surface_value: float) -> BulkSurfaceField:
    return BulkSurfaceField(np.full(ops.n_bulk, float(bulk_value)),
                            np.full(ops.n_surface, float(surface_value)))


def h1_norm_sq(ops: FemOperators, field: BulkSurfaceField) -> float:
    """Squared discrete H^1 norm over both regions (consistent mass)."""
    bulk = float(field.bulk @ (ops.mass_bulk @ field.bulk)
                 + field.bulk @ (ops.stiffness_bulk @ field.bulk))
    surf = float(field.surface @ (ops.mass_surface @ field.surface)
                 + field.surface @ (ops.stiffness_surface @ field.surface))
    return bulk + surf


def l2_norm_sq(ops: FemOperators, field: BulkSurfaceField) -> float:
    bulk = float(field.bulk @ (ops.mass_bulk @ field.bulk))
    surf = float(field.surface @ (ops.mass_surface @ field.surface))
    return bulk + surf


def integrate_nonlinear(ops: FemOperators, func: Callable, values: np.ndarray,
                        region: str = "bulk") -> float:
    """Mass-lumped integral of ``func(values)`` over one region.

    A non-finite nodal evaluation (or a wall-potential domain violation)
    raises :class:`SingularDomainError` carrying the offending node index.
    """
    if region not in ("bulk", "surface"):
        raise ValueError(f"region must be 'bulk' or 'surface', got {region!r}")
    weights = ops.lumped_bulk if region == "bulk" else ops.lumped_surface
    values = np.asarray(values, dtype=np.float64)
    if values.shape != weights.shape:
        raise ValueError(f"expected {weights.shape[0]} nodal values, got {values.shape}")
    try:
        evaluated = np.asarray(func(values), dtype=np.float64)
    except SingularDomainError as err:
        raise SingularDomainError(str(err), node_index=err.node_index,
                                  region=region) from err
    if evaluated.shape != values.shape:
        raise ValueError("integrand must be evaluated nodewise")
    finite = np.isfinite(evaluated)
    if not finite.all():
        node = int(np.argmin(finite))
        raise SingularDomainError(
            f"integrand returned {evaluated[node]!r}", node_index=node, region=region)
    return float(weights @ evaluated)


def export_mesh(mesh: BulkSurfaceMesh, path) -> None:
    """Write the mesh as a legacy ASCII unstructured-grid file.

    Triangles are written as cell type 5, the boundary cycle as line cells of
    type 3, so downstream viewers see both the bulk triangulation and the
    surface polyline.
    """
    lines = []
    lines.append("# vtk DataFile Version 2.0")
    lines.append(f"disk mesh level {mesh.level} radius {mesh.radius!r} "
                 f"sectors {mesh.sectors}")
    lines.append("ASCII")
    lines.append("DATASET UNSTRUCTURED_GRID")
    lines.append(f"POINTS {mesh.n_vertices} double")
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r} 0.0")
    n_cells = mesh.n_triangles + mesh.n_boundary
    n_ints = 4 * mesh.n_triangles + 3 * mesh.n_boundary
    lines.append(f"CELLS {n_cells} {n_ints}")
    for i, j, k in mesh.triangles:
        lines.append(f"3 {int(i)} {int(j)} {int(k)}")
    cycle = mesh.boundary_cycle
    for j in range(mesh.n_boundary):
        lines.append(f"2 {int(cycle[j])} {int(cycle[(j + 1) % mesh.n_boundary])}")
    lines.append(f"CELL_TYPES {n_cells}")
    lines.extend(["5"] * mesh.n_triangles)
    lines.extend(["3"] * mesh.n_boundary)
    with open(path, "w", encoding="ascii") as handle:
        handle.write("\n".join(lines) + "\n")
