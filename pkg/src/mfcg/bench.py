"""Benchmark problem definitions and the timing harness.

The five classic operator configurations (scalar and 3-component mass and
Laplace operators integrated with p+2 Gauss points, plus the collocation
Laplace operator at p+1 Gauss-Lobatto points), a manufactured right-hand
side with a known smooth solution, and fixed-iteration throughput runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .dofs import batch_size, distribute_dofs, expand_cell_indices, make_batches
from .locality import predict_transfer
from .mesh import (
    GeometryVariant,
    build_cartesian_mesh,
    compute_jacobians_from_nodes,
    deform_mesh,
    quadratic_geometry_nodes,
)
from .operator import MatrixFreeOperator, OperatorSpec
from .solvers import SolverConfig, solve
from .tensor import (
    evaluate_values,
    gauss_lobatto_quadrature,
    gauss_quadrature,
    integrate_values,
    lagrange_basis,
)


@dataclass(frozen=True)
class BenchmarkProblem:
    """One row of the benchmark-problem table: which bilinear form, how many
    vector components, and which quadrature the operator uses."""

    bp_id: str
    equation: str            # "mass" | "laplace"
    components: int
    quadrature_kind: str     # "gauss" | "gauss_lobatto"
    quadrature_offset: int   # n_q_1d = degree + quadrature_offset

    def n_quadrature(self, degree: int) -> int:
        return degree + self.quadrature_offset

    def operator_spec(self, degree: int,
                      geometry: GeometryVariant = GeometryVariant.FINAL_TENSOR_LOAD
                      ) -> OperatorSpec:
        return OperatorSpec(self.equation, self.components, degree,
                            self.n_quadrature(degree), geometry,
                            quadrature_kind=self.quadrature_kind)


BENCHMARK_PROBLEMS = {
    "BP1": BenchmarkProblem("BP1", "mass", 1, "gauss", 2),
    "BP2": BenchmarkProblem("BP2", "mass", 3, "gauss", 2),
    "BP3": BenchmarkProblem("BP3", "laplace", 1, "gauss", 2),
    "BP4": BenchmarkProblem("BP4", "laplace", 3, "gauss", 2),
    "BP5": BenchmarkProblem("BP5", "laplace", 1, "gauss_lobatto", 1),
}


def manufactured_solution(points: np.ndarray) -> np.ndarray:
    """u(x) = prod_i sin(pi x_i), identical in every vector component.

    Vanishes on the boundary of the unit cube, so the Dirichlet data is
    g = 0 exactly.  `points` has the coordinate on the last axis.
    """
    return np.prod(np.sin(np.pi * np.asarray(points)), axis=-1)


def manufactured_forcing(points: np.ndarray, equation: str) -> np.ndarray:
    """The f with -lap u = f (laplace) or u = f (mass) for the manufactured
    solution, per component."""
    u = manufactured_solution(points)
    if equation == "laplace":
        return 3.0 * math.pi ** 2 * u
    if equation == "mass":
        return u
    raise ValueError(f"no manufactured forcing for equation {equation!r}")


def build_rhs(op: MatrixFreeOperator) -> np.ndarray:
    """Weak-form right-hand side b_i = integral f phi_i dx for the
    manufactured forcing, integrated with the operator's own quadrature on
    the tri-quadratic geometry.  Constrained entries are zeroed (g = 0)."""
    spec, mesh, handler = op.spec, op.mesh, op.handler
    nq = spec.n_q_1d
    quad = (gauss_lobatto_quadrature(nq) if spec.quadrature_kind == "gauss_lobatto"
            else gauss_quadrature(nq))
    basis = lagrange_basis(spec.degree, quad)
    geo_basis = lagrange_basis(2, quad)
    nodes = np.stack([quadratic_geometry_nodes(mesh, c)
                      for c in range(mesh.n_cells)])
    _, det = compute_jacobians_from_nodes(nodes, geo_basis, nq)
    coords = nodes.transpose(0, 2, 1).reshape(-1, 3, 3, 3, 3)
    pts = evaluate_values(geo_basis, coords)          # (cells, 3, nq, nq, nq)
    pts = pts.reshape(-1, 3, nq ** 3).transpose(0, 2, 1)
    w = quad.weights
    tw = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    f = manufactured_forcing(pts, spec.equation)
    fw = (f * det * tw).reshape(-1, nq, nq, nq)
    local = integrate_values(basis, fw).reshape(mesh.n_cells, -1)
    b = np.zeros(handler.n_dofs)
    for cell in range(mesh.n_cells):
        idx = expand_cell_indices(handler, cell)
        # indices within one cell are unique, so fancy += accumulates safely
        if spec.components == 1:
            b[idx] += local[cell]
        else:
            b[idx] += np.repeat(local[cell], spec.components)
    b[handler.constrained_dofs] = 0.0
    return b


@dataclass(frozen=True)
class RunRecord:
    """Result of one timed benchmark run."""

    bp_id: str
    degree: int
    cells: tuple
    n_dofs: int
    variant: str
    iterations: int
    wall_time: float         # min over repeats, seconds
    throughput: float        # DoFs/s = n_dofs * iterations / wall_time
    final_residual: float    # relative ||r|| / ||b|| after the run
    reads_per_dof: float     # modeled doubles per DoF per iteration
    writes_per_dof: float

    @staticmethod
    def from_run(bp_id, degree, cells, n_dofs, variant, iterations,
                 wall_time, final_residual, s=None) -> "RunRecord":
        pred = predict_transfer(variant, s=s)
        return RunRecord(bp_id, degree, tuple(cells), n_dofs, variant,
                         iterations, wall_time,
                         n_dofs * iterations / wall_time, final_residual,
                         pred.reads_per_dof, pred.writes_per_dof)


def estimate_problem_bytes(n_dofs: int, n_cells: int, nq: int) -> int:
    """Coarse allocation estimate: solver working vectors plus the largest
    geometry payload (symmetric final tensor, 6 doubles per point)."""
    return 16 * n_dofs * 8 + n_cells * nq ** 3 * 6 * 8


def assemble_problem(bp_id: str, degree: int, cells, *,
                     geometry: GeometryVariant = GeometryVariant.FINAL_TENSOR_LOAD,
                     deform: float = 0.05, numbering: str = "default",
                     traversal: str = "morton", simd_lanes: int = 8,
                     memory_limit_bytes: int = 2 ** 32):
    """Build the operator, manufactured right-hand side, and Jacobi
    preconditioner for one benchmark configuration.

    Returns (op, b, minv).  Raises MemoryError when the coarse size
    estimate exceeds `memory_limit_bytes`.
    """
    problem = BENCHMARK_PROBLEMS.get(bp_id)
    if problem is None:
        raise ValueError(f"unknown benchmark problem {bp_id!r}; "
                         f"expected one of {sorted(BENCHMARK_PROBLEMS)}")
    mesh = build_cartesian_mesh(cells)
    if deform:
        mesh = deform_mesh(mesh, deform)
    handler = distribute_dofs(mesh, degree, components=problem.components,
                              constrain_boundary=True)
    spec = problem.operator_spec(degree, geometry)
    estimate = estimate_problem_bytes(handler.n_dofs, mesh.n_cells, spec.n_q_1d)
    if estimate > memory_limit_bytes:
        raise MemoryError(
            f"size-too-large: {bp_id} p={degree} cells={tuple(cells)} needs "
            f"~{estimate / 2**20:.0f} MiB > limit {memory_limit_bytes / 2**20:.0f} MiB")
    plan = make_batches(mesh, batch_size(degree, problem.components, simd_lanes),
                        traversal)
    if numbering == "optimized":
        from .dofs import renumber_optimized
        handler = renumber_optimized(handler, plan)
    elif numbering != "default":
        raise ValueError(f"unknown numbering {numbering!r}")
    op = MatrixFreeOperator(spec, mesh, handler, plan)
    return op, build_rhs(op), op.compute_diagonal()


def run_benchmark(bp_id: str, degree: int, cells, variant: str, *,
                  iterations: int = 100, repeats: int = 8,
                  geometry: GeometryVariant = GeometryVariant.FINAL_TENSOR_LOAD,
                  numbering: str = "default", traversal: str = "morton",
                  simd_lanes: int = 8, s: int = 4,
                  memory_limit_bytes: int = 2 ** 32) -> RunRecord:
    """Time `variant` on one benchmark problem: a fixed iteration count per
    run, minimum wall time over sequential repeats."""
    op, b, minv = assemble_problem(
        bp_id, degree, cells, geometry=geometry, numbering=numbering,
        traversal=traversal, simd_lanes=simd_lanes,
        memory_limit_bytes=memory_limit_bytes)
    cfg = SolverConfig(fixed_iterations=iterations, s=s)
    best = math.inf
    result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        result = solve(variant, op, b, minv=minv, config=cfg)
        elapsed = time.perf_counter() - start
        best = min(best, elapsed)
    return RunRecord.from_run(bp_id, degree, cells, op.n_dofs, variant,
                              result.iterations, best, result.residual,
                              s=s if variant == "sstep" else None)
