"""Degree-of-freedom distribution, cell batching, locality renumbering, and
the range pre/post schedule for split vector operations.

Unknowns of the continuous finite element space are stored once; each cell
keeps only 3^3 starting indices (one per vertex/edge/face/interior entity of
the cell) from which all (p+1)^3 node indices are expanded on the fly.  Nodes
of one entity are numbered contiguously, which is what makes the compressed
form lossless.  Vector-valued problems interleave components per node:
dof = node * components + c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mesh import HexMesh

__all__ = [
    "DofHandler",
    "BatchPlan",
    "RangeSchedule",
    "RANGE_SIZE",
    "distribute_dofs",
    "batch_size",
    "make_batches",
    "renumber_optimized",
    "compute_range_schedule",
    "expand_cell_indices",
    "expand_batch",
]

RANGE_SIZE = 64


@dataclass(frozen=True)
class DofHandler:
    """Numbering of a continuous Lagrange space on a structured hex mesh."""

    n_dofs: int
    components: int
    degree: int
    cells_per_dim: tuple
    cell_index_blocks: np.ndarray = field(repr=False, compare=False)
    constrained_dofs: np.ndarray = field(repr=False, compare=False)
    numbering_kind: str = "default-cell-order"
    permutation: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.cells_per_dim
        return nx * ny * nz

    @property
    def n_nodes(self) -> int:
        return self.n_dofs // self.components

    @property
    def dofs_per_cell(self) -> int:
        return (self.degree + 1) ** 3 * self.components


@dataclass(frozen=True)
class BatchPlan:
    """Cells grouped into batches processed back to back."""

    batch_size: int
    batches: tuple
    traversal: str

    @property
    def n_batches(self) -> int:
        return len(self.batches)


@dataclass(frozen=True)
class RangeSchedule:
    """First/last touching batch of every 64-entry vector range, and the
    derived per-batch pre/post work lists."""

    range_size: int
    n_dofs: int
    first_touch_batch: np.ndarray = field(repr=False, compare=False)
    last_touch_batch: np.ndarray = field(repr=False, compare=False)
    pre_schedule: tuple = field(repr=False, compare=False)
    post_schedule: tuple = field(repr=False, compare=False)

    @property
    def n_ranges(self) -> int:
        return len(self.first_touch_batch)

    def range_bounds(self, r: int) -> tuple:
        lo = r * self.range_size
        return lo, min(lo + self.range_size, self.n_dofs)


# ---------------------------------------------------------------------------
# distribution

# Per-direction slot of a local node: 0 (low face), 1 (interior), 2 (high
# face).  An entity of the cell is one slot triple; its nodes are the tensor
# product of the per-direction spans (1, p-1, 1 nodes).


def _slots(p: int) -> np.ndarray:
    i = np.arange(p + 1)
    return np.where(i == 0, 0, np.where(i == p, 2, 1))


_ENTITY_WALK = [(sx, sy, sz) for sz in (0, 1, 2) for sy in (0, 1, 2) for sx in (0, 1, 2)]


def _entity_size(p: int, sx: int, sy: int, sz: int) -> int:
    return int(np.prod([(p - 1) if s == 1 else 1 for s in (sx, sy, sz)]))


@lru_cache(maxsize=None)
def _expansion_template(p: int):
    """(entity index, offset) of every local node, x fastest.

    expanded_scalar = blocks[cell][entity] + offset reconstructs all (p+1)^3
    node indices of a cell from its 27 block starts.
    """
    slots = _slots(p)
    coord = np.where((np.arange(p + 1) > 0) & (np.arange(p + 1) < p),
                     np.arange(p + 1) - 1, 0)
    sx, sy, sz = (slots[None, None, :], slots[None, :, None], slots[:, None, None])
    cx, cy, cz = (coord[None, None, :], coord[None, :, None], coord[:, None, None])
    entity = sx + 3 * sy + 9 * sz
    mx = np.where(sx == 1, p - 1, 1)
    my = np.where(sy == 1, p - 1, 1)
    offset = cx + mx * (cy + my * cz)
    return entity.ravel(), offset.ravel()


def distribute_dofs(mesh: HexMesh, p: int, components: int = 1,
                    constrain_boundary: bool = False) -> DofHandler:
    """Number the unknowns cell by cell in lexicographic order, assigning each
    newly seen vertex/edge/face/interior entity a contiguous index block."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if components not in (1, 3):
        raise ValueError("components must be 1 or 3")
    nx, ny, nz = mesh.cells_per_dim
    # entity id on the refined lattice: 2*cell_coord + slot per direction
    rx, ry, rz = 2 * nx + 1, 2 * ny + 1, 2 * nz + 1
    sizes = {s: _entity_size(p, *s) for s in _ENTITY_WALK}
    blocks = np.full((mesh.n_cells, 27), -1, dtype=np.int32)
    entity_start = {}
    next_start = 0
    cell = 0
    for cz in range(nz):
        for cy in range(ny):
            for cx in range(nx):
                # nodes are walked x fastest, so entities are first seen in
                # slot order low/mid/high per direction, z slowest
                for sx, sy, sz in _ENTITY_WALK:
                    size = sizes[(sx, sy, sz)]
                    if size == 0:
                        continue
                    rid = (2 * cx + sx) + rx * ((2 * cy + sy) + ry * (2 * cz + sz))
                    start = entity_start.get(rid)
                    if start is None:
                        start = next_start
                        entity_start[rid] = start
                        next_start += size
                    blocks[cell, sx + 3 * sy + 9 * sz] = start
                cell += 1
    n_dofs = next_start * components
    constrained = np.empty(0, dtype=np.int64)
    handler = DofHandler(n_dofs, components, p, mesh.cells_per_dim, blocks, constrained)
    if constrain_boundary:
        nodes = _boundary_nodes(handler)
        constrained = (nodes[:, None] * components + np.arange(components)).ravel()
        handler = DofHandler(n_dofs, components, p, mesh.cells_per_dim, blocks,
                             np.sort(constrained))
    return handler


def _boundary_nodes(handler: DofHandler) -> np.ndarray:
    """Scalar node indices lying on the domain boundary."""
    p = handler.degree
    nx, ny, nz = handler.cells_per_dim
    found = []
    grid_shape = (p + 1, p + 1, p + 1)
    for cell in range(handler.n_cells):
        cx = cell % nx
        cy = (cell // nx) % ny
        cz = cell // (nx * ny)
        faces = []
        if cx == 0:
            faces.append((slice(None), slice(None), 0))
        if cx == nx - 1:
            faces.append((slice(None), slice(None), p))
        if cy == 0:
            faces.append((slice(None), 0, slice(None)))
        if cy == ny - 1:
            faces.append((slice(None), p, slice(None)))
        if cz == 0:
            faces.append((0, slice(None), slice(None)))
        if cz == nz - 1:
            faces.append((p, slice(None), slice(None)))
        if not faces:
            continue
        nodes = _expand_scalar(handler, np.array([cell]))[0].reshape(grid_shape)
        for sel in faces:
            found.append(nodes[sel].ravel())
    if not found:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(found))


def _expand_scalar(handler: DofHandler, cells: np.ndarray) -> np.ndarray:
    """(len(cells), (p+1)^3) scalar node indices, nodes x fastest."""
    entity, offset = _expansion_template(handler.degree)
    return handler.cell_index_blocks[cells][:, entity].astype(np.int64) + offset


def expand_cell_indices(handler: DofHandler, cell: int) -> np.ndarray:
    """All (p+1)^3 * components global indices of one cell, node-major with
    interleaved components."""
    if not 0 <= cell < handler.n_cells:
        raise IndexError(f"cell index {cell} out of range")
    return expand_batch(handler, np.array([cell]))[0]


def expand_batch(handler: DofHandler, cells) -> np.ndarray:
    """(len(cells), dofs_per_cell) global indices for a batch of cells."""
    scalar = _expand_scalar(handler, np.asarray(cells))
    c = handler.components
    if c == 1:
        return scalar
    out = scalar[..., None] * c + np.arange(c)
    return out.reshape(scalar.shape[0], -1)


# ---------------------------------------------------------------------------
# batching


def batch_size(p: int, components: int, simd_lanes: int) -> int:
    """Cells per batch: enough to fill roughly 1024 values of temporary
    storage per lane, but at least 2, times the number of SIMD lanes."""
    if p < 1 or components < 1 or simd_lanes < 1:
        raise ValueError("all batch-size inputs must be >= 1")
    return max(1024 // (components * (p + 1) ** 3), 2) * simd_lanes


def _morton_order(cells_per_dim) -> np.ndarray:
    """Cell indices ordered along the Morton curve (x bits lowest)."""
    nx, ny, nz = cells_per_dim
    bits = max(max(n - 1, 0).bit_length() for n in cells_per_dim)
    order = []
    for code in range(1 << (3 * bits)):
        x = y = z = 0
        for b in range(bits):
            x |= ((code >> (3 * b)) & 1) << b
            y |= ((code >> (3 * b + 1)) & 1) << b
            z |= ((code >> (3 * b + 2)) & 1) << b
        if x < nx and y < ny and z < nz:
            order.append(x + nx * (y + ny * z))
    return np.asarray(order, dtype=np.int64)


def make_batches(mesh: HexMesh, size: int, traversal: str = "lexicographic") -> BatchPlan:
    """Order cells by the chosen traversal and chunk into batches of `size`
    (the last batch may be partial)."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    if traversal == "lexicographic":
        order = np.arange(mesh.n_cells, dtype=np.int64)
    elif traversal == "morton":
        order = _morton_order(mesh.cells_per_dim)
    else:
        raise ValueError(f"unknown traversal {traversal!r}")
    batches = tuple(order[i:i + size] for i in range(0, len(order), size))
    return BatchPlan(size, batches, traversal)


# ---------------------------------------------------------------------------
# renumbering


def _entity_table(handler: DofHandler):
    """(starts, sizes, cells) of every entity, keyed by block start."""
    blocks = handler.cell_index_blocks
    sizes_by_slot = np.array([_entity_size(handler.degree, e % 3, (e // 3) % 3, e // 9)
                              for e in range(27)])
    entity_size_of = {}
    entity_cells = {}
    for cell in range(handler.n_cells):
        row = blocks[cell]
        for e in range(27):
            start = row[e]
            if start < 0:
                continue
            entity_size_of[int(start)] = int(sizes_by_slot[e])
            entity_cells.setdefault(int(start), []).append(cell)
    return entity_size_of, entity_cells


def renumber_optimized(handler: DofHandler, plan: BatchPlan) -> DofHandler:
    """Renumber unknowns by data locality of the batched cell loop.

    Category order: (1) entities touched by exactly one batch, in batch
    order; (2) entities touched by several batches; (3) entities shared with
    remote processes (structurally present, always empty in this
    single-process build); (4) constrained unknowns at the very end.

    A 64-entry range inherits the union of its entities' live windows, so
    entities are packed next to neighbors with near-identical windows:
    category 2 is ordered by descending window midpoint (its head, living
    near the last batches, meets the tail of category 1; its tail, living
    near batch 0, meets the constrained entities, which sit wide in the
    schedule anyway), remaining ties by old index for determinism.  Entity
    blocks stay contiguous, keeping the compressed per-cell storage valid.
    """
    if handler.numbering_kind != "default-cell-order":
        raise ValueError("handler already renumbered")
    comp = handler.components
    size_of, cells_of = _entity_table(handler)

    cell_batch = np.empty(handler.n_cells, dtype=np.int64)
    for b, cells in enumerate(plan.batches):
        cell_batch[np.asarray(cells)] = b

    constrained_nodes = _constrained_node_set(handler)

    categories = ([], [], [], [])
    for start, size in size_of.items():
        batches = sorted({int(cell_batch[c]) for c in cells_of[start]})
        node0 = start
        is_constrained = node0 in constrained_nodes
        covered = sum((node0 + t) in constrained_nodes for t in range(size))
        if 0 < covered < size:
            raise ValueError("partially constrained entity cannot keep "
                             "contiguous blocks")
        if is_constrained:
            cat = 3
        elif len(batches) == 1:
            cat = 0
        else:
            cat = 1
        categories[cat].append((batches[0], batches[-1], start, size))

    node_perm = np.full(handler.n_nodes, -1, dtype=np.int64)
    start_map = {}
    next_node = 0
    order = (sorted(categories[0]),
             sorted(categories[1],
                    key=lambda t: (-(t[0] + t[1]), t[1] - t[0], t[2])),
             sorted(categories[2]),
             sorted(categories[3]))
    for cat in order:
        for entry in cat:
            _, _, old_start, size = entry
            start_map[old_start] = next_node
            node_perm[old_start:old_start + size] = np.arange(next_node, next_node + size)
            next_node += size
    if next_node != handler.n_nodes or np.any(node_perm < 0):
        raise AssertionError("renumbering did not produce a bijection")

    blocks = handler.cell_index_blocks
    new_blocks = np.full_like(blocks, -1)
    for e in range(27):
        col = blocks[:, e]
        valid = col >= 0
        if np.any(valid):
            new_blocks[valid, e] = [start_map[int(s)] for s in col[valid]]

    perm = (node_perm[:, None] * comp + np.arange(comp)).ravel()
    new_constrained = np.sort(perm[handler.constrained_dofs])
    return DofHandler(handler.n_dofs, comp, handler.degree, handler.cells_per_dim,
                      new_blocks, new_constrained, "optimized", perm)


def _constrained_node_set(handler: DofHandler) -> set:
    """Scalar nodes whose every component is constrained; rejects partial
    per-component constraints (they would break the interleaved layout)."""
    if handler.constrained_dofs.size == 0:
        return set()
    comp = handler.components
    nodes, counts = np.unique(handler.constrained_dofs // comp, return_counts=True)
    if np.any(counts != comp):
        raise ValueError("constraints must cover whole nodes (all components)")
    return set(int(n) for n in nodes)


# ---------------------------------------------------------------------------
# range schedule


def compute_range_schedule(handler: DofHandler, plan: BatchPlan) -> RangeSchedule:
    """First/last touching batch of every 64-entry range, plus per-batch
    pre/post lists.  Ranges holding constrained unknowns are scheduled pre at
    batch 0 and post at the last batch, since the identity rows are applied
    alongside the final batch."""
    n_ranges = -(-handler.n_dofs // RANGE_SIZE)
    n_batches = plan.n_batches
    first = np.full(n_ranges, n_batches, dtype=np.int64)
    last = np.full(n_ranges, -1, dtype=np.int64)
    for b, cells in enumerate(plan.batches):
        touched = np.unique(expand_batch(handler, cells) // RANGE_SIZE)
        first[touched] = np.minimum(first[touched], b)
        last[touched] = np.maximum(last[touched], b)
    untouched = first == n_batches
    if np.any(untouched):
        # every DoF belongs to some cell, so this can only be a partial
        # trailing range made entirely of constrained DoFs — schedule wide
        first[untouched] = 0
        last[untouched] = n_batches - 1
    pre_batch = first.copy()
    post_batch = last.copy()
    if handler.constrained_dofs.size:
        constrained_ranges = np.unique(handler.constrained_dofs // RANGE_SIZE)
        pre_batch[constrained_ranges] = 0
        post_batch[constrained_ranges] = n_batches - 1
    pre_schedule = tuple(np.flatnonzero(pre_batch == b) for b in range(n_batches))
    post_schedule = tuple(np.flatnonzero(post_batch == b) for b in range(n_batches))
    return RangeSchedule(RANGE_SIZE, handler.n_dofs, first, last,
                         pre_schedule, post_schedule)
