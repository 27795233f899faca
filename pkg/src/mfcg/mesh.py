"""Structured hexahedral meshes with an optional smooth deformation, and the
per-quadrature-point geometric data variants used by the matrix-free operator.

The authoritative geometry of every cell is the tri-quadratic interpolant of
the deformation map through the cell's 3x3x3 lattice, so the compute variants
(quadratic, isoparametric) and the load variants (inverse Jacobian, final
tensor) describe exactly the same map and the operator results agree to
machine precision.  The affine variant is only valid on undeformed meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (
    QuadratureRule1D,
    evaluate_gradients,
    evaluate_values,
    gauss_lobatto_quadrature,
    lagrange_basis,
)

__all__ = [
    "HexMesh",
    "GeometryVariant",
    "GeometryData",
    "build_cartesian_mesh",
    "deform_mesh",
    "quadratic_geometry_nodes",
    "geometry_data",
    "precompute_geometry",
    "mesh_to_text",
    "mesh_from_text",
]


class GeometryVariant(Enum):
    """How the operator obtains J^-1 and w_q det J at quadrature points."""

    AFFINE = "affine"
    QUADRATIC_COMPUTE = "quadratic_compute"
    ISOPARAMETRIC_COMPUTE = "isoparametric_compute"
    INVERSE_JACOBIAN_LOAD = "inverse_jacobian_load"
    FINAL_TENSOR_LOAD = "final_tensor_load"


@dataclass(frozen=True)
class HexMesh:
    """Axis-aligned structured mesh of the brick [0,extents], optionally
    pushed through the smooth boundary-preserving sine deformation."""

    cells_per_dim: tuple
    extents: tuple
    deformation: float = 0.0
    vertex_coordinates: np.ndarray = field(repr=False, compare=False, default=None)
    cell_vertex_indices: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.cells_per_dim
        return nx * ny * nz

    def cell_coords(self, cell: int) -> tuple:
        """(cx, cy, cz) lattice coordinates of a lexicographic cell index."""
        nx, ny, nz = self.cells_per_dim
        if not 0 <= cell < self.n_cells:
            raise IndexError(f"cell index {cell} out of range")
        return cell % nx, (cell // nx) % ny, cell // (nx * ny)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Apply the deformation map to undeformed coordinates (...,3)."""
        points = np.asarray(points, dtype=float)
        if self.deformation == 0.0:
            return points.copy()
        scaled = np.pi * points / np.asarray(self.extents)
        bump = np.prod(np.sin(scaled), axis=-1, keepdims=True)
        return points + self.deformation * bump


def build_cartesian_mesh(cells_per_dim, extents=(1.0, 1.0, 1.0)) -> HexMesh:
    """Uniform axis-aligned mesh of the brick [0,extents]^3."""
    cells = tuple(int(c) for c in cells_per_dim)
    ext = tuple(float(e) for e in extents)
    if any(c < 1 for c in cells):
        raise ValueError("cells_per_dim entries must be >= 1")
    if any(e <= 0 for e in ext):
        raise ValueError("extents must be positive")
    nx, ny, nz = cells
    xs = [np.linspace(0.0, ext[d], cells[d] + 1) for d in range(3)]
    Z, Y, X = np.meshgrid(xs[2], xs[1], xs[0], indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    conn = np.empty((nx * ny * nz, 8), dtype=np.int64)
    cell = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                conn[cell] = [vid(i + dk, j + dj, k + di)
                              for di in (0, 1) for dj in (0, 1) for dk in (0, 1)]
                cell += 1
    return HexMesh(cells, ext, 0.0, vertices, conn)


def deform_mesh(mesh: HexMesh, amplitude: float) -> HexMesh:
    """Apply x -> x + amplitude * prod_d sin(pi x_d / extent_d) to every
    coordinate.  The bump vanishes on the boundary, so boundary faces stay
    put.  Rejects amplitudes that flip any cell's Jacobian."""
    new = HexMesh(mesh.cells_per_dim, mesh.extents, mesh.deformation + amplitude,
                  mesh.vertex_coordinates, mesh.cell_vertex_indices)
    if amplitude != 0.0:
        try:
            _reference_jacobians(new, gauss_lobatto_quadrature(3))
        except ValueError as err:
            raise ValueError(
                f"deformation amplitude {new.deformation} produces a "
                f"non-positive Jacobian ({err})") from None
    return new


def _cell_lattice(mesh: HexMesh, order: np.ndarray):
    """Undeformed physical coordinates of per-cell tensor lattices.

    `order` holds the 1D reference positions in [0,1]; returns an array of
    shape (n_cells, len(order)^3, 3) in lexicographic x-fastest point order.
    """
    nx, ny, nz = mesh.cells_per_dim
    hx, hy, hz = (mesh.extents[d] / mesh.cells_per_dim[d] for d in range(3))
    cz, cy, cx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    origin = np.stack([cx.ravel() * hx, cy.ravel() * hy, cz.ravel() * hz], axis=1)
    t = np.asarray(order, dtype=float)
    TZ, TY, TX = np.meshgrid(t, t, t, indexing="ij")
    local = np.stack([TX.ravel() * hx, TY.ravel() * hy, TZ.ravel() * hz], axis=1)
    return origin[:, None, :] + local[None, :, :]


def quadratic_geometry_nodes(mesh: HexMesh, cell: int) -> np.ndarray:
    """The 27 tri-quadratic geometry support points of one cell (the deformed
    {0, 1/2, 1}^3 lattice), shape (27, 3), x fastest."""
    mesh.cell_coords(cell)  # validates the index
    lattice = _cell_lattice(mesh, np.array([0.0, 0.5, 1.0]))[cell]
    return mesh.map_points(lattice)


def _all_quadratic_nodes(mesh: HexMesh) -> np.ndarray:
    """(n_cells, 27, 3) tri-quadratic nodes for every cell."""
    return mesh.map_points(_cell_lattice(mesh, np.array([0.0, 0.5, 1.0])))


def _reference_jacobians(mesh: HexMesh, quad: QuadratureRule1D, cells=None):
    """Jacobians of the tri-quadratic cell maps at tensor quadrature points.

    Returns (jac, det) with jac of shape (n_cells, n_q^3, 3, 3) where
    jac[c, q, i, j] = d x_i / d ref_j, and det positive (checked).
    """
    basis = lagrange_basis(2, quad)
    nodes = _all_quadratic_nodes(mesh)
    if cells is not None:
        nodes = nodes[cells]
    n_cells = nodes.shape[0]
    nq = len(quad)
    # (cells, coord, 3, 3, 3) nodal coordinates as cell tensors
    coords = nodes.transpose(0, 2, 1).reshape(n_cells, 3, 3, 3, 3)
    g = evaluate_gradients(basis, coords)  # (3 ref-dir, cells, coord, nq,nq,nq)
    jac = np.transpose(g.reshape(3, n_cells, 3, nq**3), (1, 3, 2, 0))
    det = np.linalg.det(jac)
    if np.min(det) <= 0.0:
        raise ValueError(f"degenerate cell: min det J = {np.min(det):.3e}")
    return jac, det


@dataclass(frozen=True)
class GeometryData:
    """Per-cell geometric data for one variant.

    Depending on the variant the payload holds geometry node coordinates
    (compute variants), precomputed inverse Jacobians plus w_q det J, the
    final symmetric coefficient tensor plus w_q det J, or a single affine
    J^-1 / det J per mesh.  `doubles_per_cell` records the data volume the
    variant streams per cell so the locality analysis can model transfer.
    """

    variant: GeometryVariant
    quadrature: QuadratureRule1D
    payload: dict
    doubles_per_cell: int


def _final_tensor(jac, det, weights):
    """J^-1 (w det J) J^-T as symmetric 6-storage (xx,yy,zz,xy,xz,yz)."""
    inv = np.linalg.inv(jac)
    jxw = det * weights
    full = np.einsum("cqij,cqkj,cq->cqik", inv, inv, jxw)
    sym = np.stack([full[..., 0, 0], full[..., 1, 1], full[..., 2, 2],
                    full[..., 0, 1], full[..., 0, 2], full[..., 1, 2]], axis=-1)
    return sym


def _tensor_weights(quad: QuadratureRule1D) -> np.ndarray:
    w = quad.weights
    return np.einsum("k,j,i->kji", w, w, w).ravel()


def precompute_geometry(mesh: HexMesh, variant: GeometryVariant,
                        quad: QuadratureRule1D) -> GeometryData:
    """Build the geometry data of one variant for all cells at once."""
    nq = len(quad)
    weights = _tensor_weights(quad)
    if variant == GeometryVariant.AFFINE:
        if mesh.deformation != 0.0:
            raise ValueError("affine geometry requires an undeformed mesh")
        h = np.array([mesh.extents[d] / mesh.cells_per_dim[d] for d in range(3)])
        inv = np.diag(1.0 / h)
        det = float(np.prod(h))
        payload = {"inverse_jacobian": inv, "det_j": det, "weights": weights}
        return GeometryData(variant, quad, payload, 10)
    if variant == GeometryVariant.QUADRATIC_COMPUTE:
        payload = {"nodes": _all_quadratic_nodes(mesh), "weights": weights}
        return GeometryData(variant, quad, payload, 27 * 3)
    if variant == GeometryVariant.ISOPARAMETRIC_COMPUTE:
        # physical coordinates of the tri-quadratic map at the Gauss-Lobatto
        # lattice of n_q points per direction; the operator differentiates
        # the degree-(n_q-1) interpolant, which reproduces the quadratic map
        # exactly whenever n_q >= 3 (for n_q = 2 the stored map degrades to
        # tri-linear, still consistent but no longer identical to the others
        # on deformed meshes)
        if nq < 2:
            raise ValueError("isoparametric geometry needs >= 2 points/dir")
        support = gauss_lobatto_quadrature(nq).points
        lattice = _cell_lattice(mesh, np.array([0.0, 0.5, 1.0]))
        basis2 = lagrange_basis(2, QuadratureRule1D(support, np.full(len(support), 1.0 / len(support))))
        n_cells = mesh.n_cells
        coords = mesh.map_points(lattice).transpose(0, 2, 1).reshape(n_cells, 3, 3, 3, 3)
        vals = evaluate_values(basis2, coords)  # (cells, coord, s,s,s)
        nodes = vals.reshape(n_cells, 3, -1).transpose(0, 2, 1)
        payload = {"nodes": nodes, "weights": weights, "n_support": len(support)}
        return GeometryData(variant, quad, payload, 3 * len(support) ** 3)
    jac, det = _reference_jacobians(mesh, quad)
    if variant == GeometryVariant.INVERSE_JACOBIAN_LOAD:
        inv = np.linalg.inv(jac)
        payload = {"inverse_jacobian": inv, "jxw": det * weights}
        return GeometryData(variant, quad, payload, 10 * nq**3)
    if variant == GeometryVariant.FINAL_TENSOR_LOAD:
        sym = _final_tensor(jac, det, weights)
        payload = {"final_tensor": sym, "jxw": det * weights}
        return GeometryData(variant, quad, payload, 7 * nq**3)
    raise ValueError(f"unknown geometry variant {variant}")


def geometry_data(mesh: HexMesh, cell: int, variant: GeometryVariant,
                  quad: QuadratureRule1D) -> dict:
    """Per-cell view of the variant's data (see precompute_geometry for the
    all-cells form the operator consumes)."""
    mesh.cell_coords(cell)
    data = precompute_geometry(mesh, variant, quad)
    if variant == GeometryVariant.AFFINE:
        return dict(data.payload)  # identical for every cell
    per_cell = {"nodes", "inverse_jacobian", "jxw", "final_tensor"}
    return {key: (value[cell] if key in per_cell else value)
            for key, value in data.payload.items()}


def compute_jacobians_from_nodes(nodes: np.ndarray, geo_basis, nq: int):
    """On-the-fly Jacobians for a batch of cells from geometry node
    coordinates (n_batch, n_nodes, 3) via sum-factorized differentiation of
    the geometry polynomial."""
    n_batch = nodes.shape[0]
    npd = geo_basis.degree + 1
    coords = nodes.transpose(0, 2, 1).reshape(n_batch, 3, npd, npd, npd)
    g = evaluate_gradients(geo_basis, coords)
    jac = np.transpose(g.reshape(3, n_batch, 3, nq**3), (1, 3, 2, 0))
    det = np.linalg.det(jac)
    if np.min(det) <= 0.0:
        raise ValueError(f"degenerate cell: min det J = {np.min(det):.3e}")
    return jac, det


def mesh_to_text(mesh: HexMesh) -> str:
    """Serialize the mesh description as plain key-value lines."""
    nx, ny, nz = mesh.cells_per_dim
    ex, ey, ez = mesh.extents
    return (f"cells = {nx},{ny},{nz}\n"
            f"extents = {ex!r},{ey!r},{ez!r}\n"
            f"deformation = {mesh.deformation!r}\n")


def mesh_from_text(text: str) -> HexMesh:
    """Parse the key-value mesh description written by mesh_to_text."""
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    cells = tuple(int(v) for v in values["cells"].split(","))
    extents = tuple(float(v) for v in values["extents"].split(","))
    mesh = build_cartesian_mesh(cells, extents)
    amplitude = float(values.get("deformation", "0.0"))
    if amplitude != 0.0:
        mesh = deform_mesh(mesh, amplitude)
    return mesh
