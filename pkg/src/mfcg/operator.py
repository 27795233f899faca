"""Matrix-free cell-loop evaluation of mass and Laplace operators, with
optional pre/post range callbacks interleaved into the batch loop, the
diagonal preconditioner, and assembly oracles for testing.

Constrained (Dirichlet) unknowns are kept in the system as identity rows:
the gather zeroes constrained source entries, the scatter drops constrained
contributions, and the constrained entries of the result are copied straight
from the source.  This keeps the operator symmetric and the vectors full
length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from . import trace
from .dofs import (
    RANGE_SIZE,
    BatchPlan,
    DofHandler,
    _expand_scalar,
    compute_range_schedule,
    expand_batch,
)
from .mesh import (
    GeometryVariant,
    HexMesh,
    compute_jacobians_from_nodes,
    precompute_geometry,
)
from .tensor import (
    evaluate_gradients,
    evaluate_values,
    gauss_lobatto_quadrature,
    gauss_quadrature,
    integrate_gradients,
    integrate_values,
    lagrange_basis,
)

__all__ = ["OperatorSpec", "DiagonalPreconditioner", "MatrixFreeOperator"]

EQUATIONS = ("mass", "laplace", "mass_plus_laplace")


@dataclass(frozen=True)
class OperatorSpec:
    """What to integrate and how: equation, components, degree, quadrature,
    and the geometry-data variant the cell loop consumes."""

    equation: str
    components: int
    degree: int
    n_q_1d: int
    geometry: GeometryVariant
    quadrature_kind: str = "gauss"
    scaling: float = 1.0  # mass_plus_laplace: mass + scaling * laplace

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ValueError(f"unknown equation {self.equation!r}")
        if self.components not in (1, 3):
            raise ValueError("components must be 1 or 3")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.n_q_1d < self.degree + 1:
            raise ValueError("n_q_1d must be at least p+1")
        if self.quadrature_kind not in ("gauss", "gauss_lobatto"):
            raise ValueError(f"unknown quadrature {self.quadrature_kind!r}")
        if self.quadrature_kind == "gauss_lobatto" and self.n_q_1d != self.degree + 1:
            raise ValueError("gauss_lobatto requires n_q_1d == p+1 (collocation)")

    @property
    def needs_values(self) -> bool:
        return self.equation in ("mass", "mass_plus_laplace")

    @property
    def needs_gradients(self) -> bool:
        return self.equation in ("laplace", "mass_plus_laplace")


@dataclass(frozen=True)
class DiagonalPreconditioner:
    """Inverse operator diagonal, stored once per scalar node and applied
    identically to every vector component."""

    inverse_diagonal: np.ndarray  # length n_dofs / components

    def full_vector(self, components: int) -> np.ndarray:
        """Replicated full-length inverse diagonal (node-major interleave)."""
        return np.repeat(self.inverse_diagonal, components)

    def apply(self, r: np.ndarray, components: int) -> np.ndarray:
        if components == 1:
            return self.inverse_diagonal * r
        return (r.reshape(-1, components) * self.inverse_diagonal[:, None]).ravel()


def _cell_stream_ranges(cells: np.ndarray, bytes_per_cell: int) -> np.ndarray:
    """512-byte range ids covered by the per-cell records of `cells`."""
    pieces = [np.arange((int(c) * bytes_per_cell) // trace.GRAIN_BYTES,
                        -(-((int(c) + 1) * bytes_per_cell) // trace.GRAIN_BYTES))
              for c in cells]
    return np.unique(np.concatenate(pieces)) if pieces else np.empty(0, dtype=np.int64)


def _merge_spans(ranges: np.ndarray, range_size: int, n: int):
    """[(lo, hi), ...] dof spans of sorted range ids, consecutive runs merged."""
    spans = []
    if len(ranges) == 0:
        return spans
    run_start = prev = int(ranges[0])
    for r in ranges[1:]:
        r = int(r)
        if r == prev + 1:
            prev = r
            continue
        spans.append((run_start * range_size, min((prev + 1) * range_size, n)))
        run_start = prev = r
    spans.append((run_start * range_size, min((prev + 1) * range_size, n)))
    return spans


class MatrixFreeOperator:
    """v = A u evaluated batch by batch with sum-factorized cell kernels."""

    def __init__(self, spec: OperatorSpec, mesh: HexMesh, handler: DofHandler,
                 plan: BatchPlan):
        if spec.components != handler.components:
            raise ValueError("spec/handler component mismatch")
        if spec.degree != handler.degree:
            raise ValueError("spec/handler degree mismatch")
        if mesh.cells_per_dim != handler.cells_per_dim:
            raise ValueError("mesh/handler shape mismatch")
        self.spec = spec
        self.mesh = mesh
        self.handler = handler
        self.plan = plan
        if spec.quadrature_kind == "gauss":
            self.quadrature = gauss_quadrature(spec.n_q_1d)
        else:
            self.quadrature = gauss_lobatto_quadrature(spec.n_q_1d)
        self.basis = lagrange_basis(spec.degree, self.quadrature)
        self.geometry = precompute_geometry(mesh, spec.geometry, self.quadrature)
        self._geo_basis = None
        if spec.geometry == GeometryVariant.QUADRATIC_COMPUTE:
            self._geo_basis = lagrange_basis(2, self.quadrature)
        elif spec.geometry == GeometryVariant.ISOPARAMETRIC_COMPUTE:
            self._geo_basis = lagrange_basis(spec.n_q_1d - 1, self.quadrature)
        self.schedule = compute_range_schedule(handler, plan)
        self.n_dofs = handler.n_dofs
        self.components = spec.components

        mask = np.zeros(handler.n_dofs, dtype=bool)
        mask[handler.constrained_dofs] = True
        self._constrained_mask = mask
        self._constrained = handler.constrained_dofs

        # per-batch caches: expanded indices, constraint masks, touched ranges
        self._batch_idx = []
        self._batch_cmask = []
        self._batch_ranges = []
        self._batch_spans = []
        for cells in plan.batches:
            idx = expand_batch(handler, cells)
            cmask = mask[idx]
            self._batch_idx.append(idx)
            self._batch_cmask.append(cmask if cmask.any() else None)
            ranges = np.unique(idx // RANGE_SIZE)
            self._batch_ranges.append(ranges)
            self._batch_spans.append(_merge_spans(ranges, RANGE_SIZE, handler.n_dofs))
        self._zero_spans = self._first_touch_spans()
        self._geom_ranges, self._idx_ranges = self._metadata_ranges()

    # -- construction helpers ------------------------------------------------

    def _first_touch_spans(self):
        """Per batch: dof spans of dst ranges first written by that batch."""
        first = self.schedule.first_touch_batch
        spans = []
        for b in range(self.plan.n_batches):
            ranges = np.flatnonzero(first == b)
            spans.append(_merge_spans(ranges, RANGE_SIZE, self.n_dofs))
        return spans

    def _metadata_ranges(self):
        """512-byte range ids of the geometry and index streams per batch."""
        dpc_geo = self.geometry.doubles_per_cell * 8
        dpc_idx = 27 * 4
        geom, idxm = [], []
        for cells in self.plan.batches:
            cells = np.asarray(cells)
            geom.append(_cell_stream_ranges(cells, dpc_geo))
            idxm.append(_cell_stream_ranges(cells, dpc_idx))
        return geom, idxm

    # -- geometry per batch ----------------------------------------------------

    def _batch_geometry(self, cells: np.ndarray):
        """(coefficient tensor or None, jxw) for the cells of one batch.

        The coefficient tensor G = J^-1 (w det J) J^-T is either loaded
        (final-tensor variant), assembled from loaded inverse Jacobians, or
        computed on the fly from geometry node coordinates.
        """
        spec = self.spec
        payload = self.geometry.payload
        nq3 = len(self.quadrature) ** 3
        variant = spec.geometry
        if variant == GeometryVariant.AFFINE:
            inv = payload["inverse_jacobian"]
            jxw = payload["det_j"] * payload["weights"]
            G = None
            if spec.needs_gradients:
                G = np.einsum("ij,kj,q->qik", inv, inv, jxw)
            return G, np.broadcast_to(jxw, (len(cells), nq3))
        if variant == GeometryVariant.FINAL_TENSOR_LOAD:
            jxw = payload["jxw"][cells]
            G = None
            if spec.needs_gradients:
                sym = payload["final_tensor"][cells]
                G = np.empty(sym.shape[:-1] + (3, 3))
                G[..., 0, 0] = sym[..., 0]
                G[..., 1, 1] = sym[..., 1]
                G[..., 2, 2] = sym[..., 2]
                G[..., 0, 1] = G[..., 1, 0] = sym[..., 3]
                G[..., 0, 2] = G[..., 2, 0] = sym[..., 4]
                G[..., 1, 2] = G[..., 2, 1] = sym[..., 5]
            return G, jxw
        if variant == GeometryVariant.INVERSE_JACOBIAN_LOAD:
            inv = payload["inverse_jacobian"][cells]
            jxw = payload["jxw"][cells]
            G = None
            if spec.needs_gradients:
                G = np.einsum("cqij,cqkj,cq->cqik", inv, inv, jxw)
            return G, jxw
        # compute variants: differentiate the stored geometry interpolant
        nodes = payload["nodes"][cells]
        jac, det = compute_jacobians_from_nodes(nodes, self._geo_basis,
                                                len(self.quadrature))
        jxw = det * payload["weights"]
        G = None
        if spec.needs_gradients:
            inv = np.linalg.inv(jac)
            G = np.einsum("cqij,cqkj,cq->cqik", inv, inv, jxw)
        return G, jxw

    # -- cell kernel -------------------------------------------------------------

    def _batch_kernel(self, b: int, u: np.ndarray) -> np.ndarray:
        """Integrate the equation on one batch of cells.

        u, result: (n_batch, components, p+1, p+1, p+1) nodal values.
        """
        spec = self.spec
        nq = len(self.quadrature)
        nb = u.shape[0]
        cells = np.asarray(self.plan.batches[b])
        G, jxw = self._batch_geometry(cells)
        out = None
        if spec.needs_values:
            vals = evaluate_values(self.basis, u)
            vals *= jxw.reshape(nb, 1, nq, nq, nq)
            out = integrate_values(self.basis, vals)
        if spec.needs_gradients:
            grads = evaluate_gradients(self.basis, u)  # (3, nb, c, nq,nq,nq)
            gq = np.moveaxis(grads.reshape(3, nb, spec.components, nq**3), 0, -1)
            if G.ndim == 3:  # affine: one tensor per quadrature point
                flux = np.einsum("ncqe,qde->ncqd", gq, G)
            else:
                flux = np.einsum("ncqe,nqde->ncqd", gq, G)
            flux = np.moveaxis(flux, -1, 0).reshape(3, nb, spec.components, nq, nq, nq)
            lap = integrate_gradients(self.basis, flux)
            if out is None:
                out = lap
            else:
                out += spec.scaling * lap
        return out

    # -- application ------------------------------------------------------------

    def apply(self, src: np.ndarray, out: np.ndarray = None,
              recorder: trace.AccessRecorder = None,
              src_name: str = "src", dst_name: str = "dst") -> np.ndarray:
        """dst = A src over all batches (no callbacks)."""
        dst = out if out is not None else np.empty_like(src)
        self.apply_with_callbacks(src, dst, None, None, recorder=recorder,
                                  src_name=src_name, dst_name=dst_name)
        return dst

    def apply_with_callbacks(self, src: np.ndarray, dst: np.ndarray,
                             pre_fn=None, post_fn=None, *,
                             recorder: trace.AccessRecorder = None,
                             merge_ranges: bool = True,
                             checked: bool = False,
                             src_name: str = "src", dst_name: str = "dst") -> None:
        """Batched operator application with range callbacks interleaved.

        Per batch: fire pre_fn over the ranges scheduled before this batch,
        zero the dst ranges first written here, process the cells, then fire
        post_fn over the ranges whose last write just happened.  The final
        result (and any scalars accumulated by post_fn, up to summation
        order) is identical to running all pre_fn calls, then dst = A src,
        then all post_fn calls.  Callbacks receive dof bounds (lo, hi) and
        must only touch that span; with `checked` and a recorder, recorded
        events are asserted against the span.
        """
        if len(src) != self.n_dofs or len(dst) != self.n_dofs:
            raise ValueError("vector length does not match handler")
        if checked and recorder is None:
            raise ValueError("checked mode needs a recorder")
        schedule = self.schedule
        n_batches = self.plan.n_batches
        rec_src, rec_dst = src_name, dst_name
        if recorder is not None:
            recorder.register_dofs(rec_src, self.n_dofs)
            recorder.register_dofs(rec_dst, self.n_dofs)
            recorder.register("geometry", self.geometry.doubles_per_cell * 8
                              * self.handler.n_cells, kind="metadata")
            recorder.register("cell_indices", 27 * 4 * self.handler.n_cells,
                              kind="metadata")
        comp = self.spec.components
        n1 = self.spec.degree + 1
        for b in range(n_batches):
            if pre_fn is not None:
                for lo, hi in self._callback_spans(schedule.pre_schedule[b], merge_ranges):
                    mark = recorder.mark() if (checked and recorder) else None
                    pre_fn(lo, hi)
                    if mark is not None:
                        recorder.assert_within(mark, lo, hi, self.n_dofs)
            for lo, hi in self._zero_spans[b]:
                dst[lo:hi] = 0.0
                if recorder is not None:
                    recorder.record_dofs(rec_dst, lo, hi, trace.WRITE)
            idx = self._batch_idx[b]
            cmask = self._batch_cmask[b]
            u = src[idx]
            if cmask is not None:
                u[cmask] = 0.0
            u = u.reshape(len(idx), -1, comp).transpose(0, 2, 1)
            u = u.reshape(len(idx), comp, n1, n1, n1)
            local = self._batch_kernel(b, u)
            local = local.reshape(len(idx), comp, -1).transpose(0, 2, 1)
            local = local.reshape(len(idx), -1)
            if cmask is not None:
                local[cmask] = 0.0
            flat = np.bincount(idx.ravel(), weights=local.ravel(),
                               minlength=self.n_dofs)
            for lo, hi in self._batch_spans[b]:
                dst[lo:hi] += flat[lo:hi]
            if recorder is not None:
                recorder.record_ranges(rec_src, self._batch_ranges[b], trace.READ)
                recorder.record_ranges(rec_dst, self._batch_ranges[b], trace.READWRITE)
                recorder.record_ranges("geometry", self._geom_ranges[b], trace.READ)
                recorder.record_ranges("cell_indices", self._idx_ranges[b], trace.READ)
            if b == n_batches - 1 and len(self._constrained):
                dst[self._constrained] = src[self._constrained]
                if recorder is not None:
                    cranges = np.unique(self._constrained // RANGE_SIZE)
                    recorder.record_ranges(rec_src, cranges, trace.READ)
                    recorder.record_ranges(rec_dst, cranges, trace.WRITE)
            if post_fn is not None:
                for lo, hi in self._callback_spans(schedule.post_schedule[b], merge_ranges):
                    mark = recorder.mark() if (checked and recorder) else None
                    post_fn(lo, hi)
                    if mark is not None:
                        recorder.assert_within(mark, lo, hi, self.n_dofs)

    def _callback_spans(self, ranges: np.ndarray, merge: bool):
        if merge:
            return _merge_spans(np.sort(ranges), RANGE_SIZE, self.n_dofs)
        return [(r * RANGE_SIZE, min((r + 1) * RANGE_SIZE, self.n_dofs))
                for r in np.sort(ranges)]

    # -- diagonal preconditioner ---------------------------------------------

    def compute_diagonal(self) -> DiagonalPreconditioner:
        """Inverse diagonal of the scalar operator, assembled with (p+1)-point
        collocation (Gauss-Lobatto nodes = quadrature points), replicated per
        component on application.  Constrained entries are 1."""
        p = self.spec.degree
        n1 = p + 1
        rule = gauss_lobatto_quadrature(n1)
        basis = lagrange_basis(p, rule)
        geo = precompute_geometry(self.mesh, GeometryVariant.INVERSE_JACOBIAN_LOAD, rule)
        inv = geo.payload["inverse_jacobian"]
        jxw = geo.payload["jxw"]
        n_cells = self.handler.n_cells
        diag_loc = np.zeros((n_cells, n1, n1, n1))
        if self.spec.needs_values:
            diag_loc += jxw.reshape(n_cells, n1, n1, n1)
        if self.spec.needs_gradients:
            G = np.einsum("cqij,cqkj,cq->cqik", inv, inv, jxw)
            G = G.reshape(n_cells, n1, n1, n1, 3, 3)
            D2 = basis.shape_gradients ** 2
            lap = np.einsum("qi,ckjq->ckji", D2, G[..., 0, 0])
            lap += np.einsum("qj,ckqi->ckji", D2, G[..., 1, 1])
            lap += np.einsum("qk,cqji->ckji", D2, G[..., 2, 2])
            dd = np.diag(basis.shape_gradients)
            dx = dd[None, None, None, :]
            dy = dd[None, None, :, None]
            dz = dd[None, :, None, None]
            lap += 2.0 * (dx * dy * G[..., 0, 1] + dx * dz * G[..., 0, 2]
                          + dy * dz * G[..., 1, 2])
            scale = self.spec.scaling if self.spec.equation == "mass_plus_laplace" else 1.0
            diag_loc += scale * lap
        scalar_idx = _expand_scalar(self.handler, np.arange(n_cells))
        diag = np.bincount(scalar_idx.ravel(), weights=diag_loc.reshape(n_cells, -1).ravel(),
                           minlength=self.handler.n_nodes)
        constrained_nodes = np.unique(self._constrained // self.spec.components) \
            if len(self._constrained) else np.empty(0, dtype=np.int64)
        diag[constrained_nodes] = 1.0
        if np.any(~np.isfinite(diag)) or np.any(diag <= 0.0):
            raise ValueError("operator diagonal is not positive definite")
        return DiagonalPreconditioner(1.0 / diag)

    # -- assembly oracles --------------------------------------------------------

    def assemble_sparse(self) -> scipy.sparse.csr_matrix:
        """Assembled matrix from per-cell quadrature (independent of apply's
        sum-factorized path); constrained rows/columns cleared, unit diagonal."""
        spec = self.spec
        nq = len(self.quadrature)
        S1 = self.basis.shape_values
        D1 = self.basis.shape_gradients
        S3 = np.kron(np.kron(S1, S1), S1)
        tables = {0: np.kron(np.kron(S1, S1), D1),
                  1: np.kron(np.kron(S1, D1), S1),
                  2: np.kron(np.kron(D1, S1), S1)}
        n_cells = self.handler.n_cells
        cells = np.arange(n_cells)
        G, jxw = self._batch_geometry(cells)
        npc = (spec.degree + 1) ** 3
        local = np.zeros((n_cells, npc, npc))
        if spec.needs_values:
            local += np.einsum("qi,cq,qj->cij", S3, jxw, S3, optimize=True)
        if spec.needs_gradients:
            grad = np.stack([tables[0], tables[1], tables[2]])  # (3, nq^3, npc)
            if G.ndim == 3:  # affine
                Gc = np.broadcast_to(G, (n_cells,) + G.shape)
            else:
                Gc = G
            scale = spec.scaling if spec.equation == "mass_plus_laplace" else 1.0
            local += scale * np.einsum("dqi,cqde,eqj->cij", grad, Gc, grad,
                                       optimize=True)
        scalar_idx = _expand_scalar(self.handler, cells)
        rows = np.repeat(scalar_idx, npc, axis=1).ravel()
        cols = np.tile(scalar_idx, (1, npc)).ravel()
        n_nodes = self.handler.n_nodes
        A = scipy.sparse.coo_matrix((local.ravel(), (rows, cols)),
                                    shape=(n_nodes, n_nodes)).tocsr()
        if len(self._constrained):
            nodes = np.unique(self._constrained // spec.components)
            free = np.ones(n_nodes)
            free[nodes] = 0.0
            Pf = scipy.sparse.diags(free)
            Pc = scipy.sparse.diags(1.0 - free)
            A = Pf @ A @ Pf + Pc
        if spec.components > 1:
            A = scipy.sparse.kron(A, scipy.sparse.identity(spec.components),
                                  format="csr")
        return A.tocsr()

    def assemble_dense(self) -> np.ndarray:
        """Matrix from unit-vector probes of apply (guarded by size)."""
        if self.n_dofs > 20000:
            raise ValueError(f"dense assembly guard: {self.n_dofs} > 20000 DoFs")
        A = np.empty((self.n_dofs, self.n_dofs))
        e = np.zeros(self.n_dofs)
        for j in range(self.n_dofs):
            e[j] = 1.0
            A[:, j] = self.apply(e)
            e[j] = 0.0
        return A
