"""Mesh construction, deformation, and geometry-variant tests.

The Jacobian oracle here is written independently of the library: explicit
quadratic Lagrange polynomials on {0, 1/2, 1} evaluated pointwise, plus a
central finite-difference cross-check of the analytic derivatives.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcg.mesh import (
    GeometryVariant,
    build_cartesian_mesh,
    compute_jacobians_from_nodes,
    deform_mesh,
    geometry_data,
    mesh_from_text,
    mesh_to_text,
    precompute_geometry,
    quadratic_geometry_nodes,
)
from mfcg.tensor import gauss_quadrature, lagrange_basis


# ---------------------------------------------------------------------------
# oracle: tri-quadratic interpolation written out longhand


def quad_shape(t):
    """Quadratic Lagrange values on nodes {0, 1/2, 1}."""
    return np.array([2.0 * (t - 0.5) * (t - 1.0),
                     -4.0 * t * (t - 1.0),
                     2.0 * t * (t - 0.5)])


def quad_shape_deriv(t):
    return np.array([4.0 * t - 3.0, -8.0 * t + 4.0, 4.0 * t - 1.0])


def oracle_map(nodes27, ref):
    """Evaluate the tri-quadratic interpolant of 27 points at one ref point."""
    lx, ly, lz = quad_shape(ref[0]), quad_shape(ref[1]), quad_shape(ref[2])
    out = np.zeros(3)
    for k in range(3):
        for j in range(3):
            for i in range(3):
                out += nodes27[i + 3 * j + 9 * k] * lx[i] * ly[j] * lz[k]
    return out


def oracle_jacobian(nodes27, ref):
    """d x_i / d ref_j of the tri-quadratic interpolant at one ref point."""
    lx, ly, lz = quad_shape(ref[0]), quad_shape(ref[1]), quad_shape(ref[2])
    dx, dy, dz = (quad_shape_deriv(ref[0]), quad_shape_deriv(ref[1]),
                  quad_shape_deriv(ref[2]))
    jac = np.zeros((3, 3))
    for k in range(3):
        for j in range(3):
            for i in range(3):
                p = nodes27[i + 3 * j + 9 * k]
                jac[:, 0] += p * dx[i] * ly[j] * lz[k]
                jac[:, 1] += p * lx[i] * dy[j] * lz[k]
                jac[:, 2] += p * lx[i] * ly[j] * dz[k]
    return jac


def quad_lattice(nq):
    """Reference coordinates of the tensor quadrature lattice, x fastest."""
    pts = gauss_quadrature(nq).points
    out = np.empty((nq**3, 3))
    q = 0
    for k in range(nq):
        for j in range(nq):
            for i in range(nq):
                out[q] = (pts[i], pts[j], pts[k])
                q += 1
    return out


# ---------------------------------------------------------------------------
# construction


class TestBuildMesh:
    def test_counts(self):
        mesh = build_cartesian_mesh((2, 3, 4))
        assert mesh.n_cells == 24
        assert mesh.vertex_coordinates.shape == (3 * 4 * 5, 3)
        assert mesh.cell_vertex_indices.shape == (24, 8)

    def test_vertex_corners(self):
        mesh = build_cartesian_mesh((2, 2, 2), extents=(2.0, 4.0, 8.0))
        coords = mesh.vertex_coordinates
        np.testing.assert_allclose(coords.min(axis=0), [0, 0, 0])
        np.testing.assert_allclose(coords.max(axis=0), [2, 4, 8])

    def test_connectivity_x_fastest(self):
        mesh = build_cartesian_mesh((2, 2, 2))
        first = mesh.vertex_coordinates[mesh.cell_vertex_indices[0]]
        # local corner l = dx + 2 dy + 4 dz on the unit sub-cube
        expected = 0.5 * np.array([[dx, dy, dz]
                                   for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
        np.testing.assert_allclose(first, expected)

    def test_cell_coords_roundtrip(self):
        mesh = build_cartesian_mesh((3, 4, 5))
        nx, ny, _ = mesh.cells_per_dim
        for cell in range(mesh.n_cells):
            cx, cy, cz = mesh.cell_coords(cell)
            assert cell == cx + nx * (cy + ny * cz)
        with pytest.raises(IndexError):
            mesh.cell_coords(mesh.n_cells)

    def test_validation(self):
        with pytest.raises(ValueError):
            build_cartesian_mesh((0, 1, 1))
        with pytest.raises(ValueError):
            build_cartesian_mesh((1, 1, 1), extents=(1.0, -1.0, 1.0))


# ---------------------------------------------------------------------------
# deformation


class TestDeformation:
    def test_zero_amplitude_is_identity(self):
        mesh = build_cartesian_mesh((2, 2, 2))
        pts = np.random.default_rng(0).random((10, 3))
        np.testing.assert_array_equal(mesh.map_points(pts), pts)

    def test_boundary_preserved(self):
        mesh = deform_mesh(build_cartesian_mesh((3, 3, 3), extents=(1.0, 2.0, 3.0)), 0.08)
        rng = np.random.default_rng(1)
        for d in range(3):
            for value in (0.0, mesh.extents[d]):
                pts = rng.random((20, 3)) * np.array(mesh.extents)
                pts[:, d] = value
                np.testing.assert_allclose(mesh.map_points(pts), pts, atol=1e-15)

    def test_interior_moves(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.05)
        center = np.array([0.5, 0.5, 0.5])
        np.testing.assert_allclose(mesh.map_points(center), center + 0.05, atol=1e-15)

    def test_excessive_amplitude_rejected(self):
        with pytest.raises(ValueError, match="Jacobian"):
            deform_mesh(build_cartesian_mesh((2, 2, 2)), 5.0)

    def test_affine_requires_undeformed(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.05)
        with pytest.raises(ValueError, match="undeformed"):
            precompute_geometry(mesh, GeometryVariant.AFFINE, gauss_quadrature(3))


# ---------------------------------------------------------------------------
# geometry nodes and Jacobians against the longhand oracle


class TestQuadraticNodes:
    def test_undeformed_lattice(self):
        mesh = build_cartesian_mesh((2, 1, 1), extents=(2.0, 3.0, 4.0))
        nodes = quadratic_geometry_nodes(mesh, 1)
        # cell 1 spans x in [1,2], y in [0,3], z in [0,4]
        assert nodes.shape == (27, 3)
        np.testing.assert_allclose(nodes[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(nodes[1], [1.5, 0.0, 0.0])
        np.testing.assert_allclose(nodes[13], [1.5, 1.5, 2.0])
        np.testing.assert_allclose(nodes[26], [2.0, 3.0, 4.0])

    def test_deformed_nodes_match_map(self):
        base = build_cartesian_mesh((2, 2, 2))
        mesh = deform_mesh(base, 0.06)
        nodes = quadratic_geometry_nodes(mesh, 3)
        undeformed = quadratic_geometry_nodes(base, 3)
        np.testing.assert_allclose(nodes, mesh.map_points(undeformed), atol=1e-15)


class TestJacobians:
    @pytest.mark.parametrize("nq", [2, 3, 4])
    def test_matches_analytic_oracle(self, nq):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2), extents=(1.0, 1.5, 2.0)), 0.07)
        quad = gauss_quadrature(nq)
        data = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        inv = data.payload["inverse_jacobian"]
        lattice = quad_lattice(nq)
        for cell in (0, 3, 7):
            nodes = quadratic_geometry_nodes(mesh, cell)
            for q in range(0, nq**3, max(1, nq**3 // 9)):
                expected = oracle_jacobian(nodes, lattice[q])
                np.testing.assert_allclose(np.linalg.inv(inv[cell, q]), expected,
                                           rtol=1e-12, atol=1e-13)

    def test_matches_finite_differences(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.05)
        nodes = quadratic_geometry_nodes(mesh, 5)
        ref = np.array([0.31, 0.67, 0.49])
        h = 1e-6
        fd = np.zeros((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            fd[:, j] = (oracle_map(nodes, ref + step) - oracle_map(nodes, ref - step)) / (2 * h)
        np.testing.assert_allclose(oracle_jacobian(nodes, ref), fd, atol=1e-8)

    def test_jxw_positive_and_consistent(self):
        mesh = deform_mesh(build_cartesian_mesh((3, 3, 3)), 0.05)
        quad = gauss_quadrature(3)
        data = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        assert np.all(data.payload["jxw"] > 0.0)
        lattice = quad_lattice(3)
        weights = np.array([quad.weights[i] * quad.weights[j] * quad.weights[k]
                            for k in range(3) for j in range(3) for i in range(3)])
        nodes = quadratic_geometry_nodes(mesh, 13)
        dets = np.array([np.linalg.det(oracle_jacobian(nodes, p)) for p in lattice])
        np.testing.assert_allclose(data.payload["jxw"][13], dets * weights, rtol=1e-12)

    def test_on_the_fly_matches_precomputed(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.06)
        quad = gauss_quadrature(4)
        basis = lagrange_basis(2, quad)
        data = precompute_geometry(mesh, GeometryVariant.QUADRATIC_COMPUTE, quad)
        jac, det = compute_jacobians_from_nodes(data.payload["nodes"], basis, len(quad))
        ref = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        np.testing.assert_allclose(np.linalg.inv(jac), ref.payload["inverse_jacobian"],
                                   rtol=1e-12, atol=1e-14)
        weights = data.payload["weights"]
        np.testing.assert_allclose(det * weights, ref.payload["jxw"], rtol=1e-12)


# ---------------------------------------------------------------------------
# variants agree with each other


class TestVariants:
    def test_affine_payload(self):
        mesh = build_cartesian_mesh((2, 4, 8), extents=(1.0, 1.0, 1.0))
        data = precompute_geometry(mesh, GeometryVariant.AFFINE, gauss_quadrature(2))
        np.testing.assert_allclose(data.payload["inverse_jacobian"],
                                   np.diag([2.0, 4.0, 8.0]))
        np.testing.assert_allclose(data.payload["det_j"], 0.5 * 0.25 * 0.125)
        assert data.doubles_per_cell == 10

    def test_final_tensor_matches_inverse_jacobian(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.07)
        quad = gauss_quadrature(3)
        load = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        final = precompute_geometry(mesh, GeometryVariant.FINAL_TENSOR_LOAD, quad)
        inv = load.payload["inverse_jacobian"]
        jxw = load.payload["jxw"]
        full = np.einsum("cqij,cqkj,cq->cqik", inv, inv, jxw)
        sym = final.payload["final_tensor"]
        for a, (i, k) in enumerate([(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]):
            np.testing.assert_allclose(sym[..., a], full[..., i, k], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(final.payload["jxw"], jxw)

    def test_isoparametric_reproduces_quadratic_map(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.05)
        quad = gauss_quadrature(4)
        data = precompute_geometry(mesh, GeometryVariant.ISOPARAMETRIC_COMPUTE, quad)
        nodes = data.payload["nodes"]
        assert nodes.shape == (8, 4**3, 3)
        from mfcg.tensor import gauss_lobatto_quadrature
        support = gauss_lobatto_quadrature(4).points
        cell_nodes = quadratic_geometry_nodes(mesh, 2)
        q = 0
        for k in range(4):
            for j in range(4):
                for i in range(4):
                    ref = np.array([support[i], support[j], support[k]])
                    np.testing.assert_allclose(nodes[2, q], oracle_map(cell_nodes, ref),
                                               atol=1e-13)
                    q += 1

    def test_isoparametric_jacobians_match(self):
        # n_q >= 3: the stored interpolant reproduces the quadratic map, so
        # differentiating it gives identical Jacobians
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.05)
        quad = gauss_quadrature(3)
        iso = precompute_geometry(mesh, GeometryVariant.ISOPARAMETRIC_COMPUTE, quad)
        basis = lagrange_basis(len(quad) - 1, quad)
        jac, det = compute_jacobians_from_nodes(iso.payload["nodes"], basis, len(quad))
        ref = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        np.testing.assert_allclose(np.linalg.inv(jac), ref.payload["inverse_jacobian"],
                                   rtol=1e-10, atol=1e-12)

    def test_doubles_per_cell(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.03)
        quad = gauss_quadrature(4)
        sizes = {
            GeometryVariant.QUADRATIC_COMPUTE: 81,
            GeometryVariant.ISOPARAMETRIC_COMPUTE: 3 * 64,
            GeometryVariant.INVERSE_JACOBIAN_LOAD: 10 * 64,
            GeometryVariant.FINAL_TENSOR_LOAD: 7 * 64,
        }
        for variant, size in sizes.items():
            assert precompute_geometry(mesh, variant, quad).doubles_per_cell == size

    def test_per_cell_view(self):
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.04)
        quad = gauss_quadrature(3)
        full = precompute_geometry(mesh, GeometryVariant.FINAL_TENSOR_LOAD, quad)
        view = geometry_data(mesh, 5, GeometryVariant.FINAL_TENSOR_LOAD, quad)
        np.testing.assert_array_equal(view["final_tensor"], full.payload["final_tensor"][5])
        np.testing.assert_array_equal(view["jxw"], full.payload["jxw"][5])

    def test_undeformed_volume(self):
        mesh = build_cartesian_mesh((3, 2, 2), extents=(1.0, 2.0, 1.5))
        quad = gauss_quadrature(2)
        data = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, quad)
        np.testing.assert_allclose(data.payload["jxw"].sum(), 3.0, rtol=1e-13)

    def test_deformed_volume_quadrature_independent(self):
        # det J is polynomial, so sufficiently accurate rules agree exactly
        mesh = deform_mesh(build_cartesian_mesh((2, 2, 2)), 0.08)
        volumes = []
        for nq in (4, 6):
            data = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD,
                                       gauss_quadrature(nq))
            volumes.append(data.payload["jxw"].sum())
        np.testing.assert_allclose(volumes[0], volumes[1], rtol=1e-13)


# ---------------------------------------------------------------------------
# serialization


class TestSerialization:
    def test_roundtrip(self):
        mesh = deform_mesh(build_cartesian_mesh((3, 4, 5), extents=(1.0, 2.5, 3.25)), 0.03)
        restored = mesh_from_text(mesh_to_text(mesh))
        assert restored.cells_per_dim == mesh.cells_per_dim
        assert restored.extents == mesh.extents
        assert restored.deformation == mesh.deformation
        np.testing.assert_array_equal(restored.vertex_coordinates, mesh.vertex_coordinates)

    def test_comments_and_blank_lines(self):
        text = "# structured brick\n\ncells = 2,2,2\nextents = 1.0,1.0,1.0\n"
        mesh = mesh_from_text(text)
        assert mesh.cells_per_dim == (2, 2, 2)
        assert mesh.deformation == 0.0


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 3), ny=st.integers(1, 3), nz=st.integers(1, 3),
       amplitude=st.floats(0.0, 0.1))
def test_deformation_keeps_cells_valid(nx, ny, nz, amplitude):
    mesh = deform_mesh(build_cartesian_mesh((nx, ny, nz)), amplitude)
    data = precompute_geometry(mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD,
                               gauss_quadrature(3))
    assert np.all(data.payload["jxw"] > 0.0)
