"""Memory-locality analysis: analytic transfer model, trace summaries,
range-liveliness reporting, and a fully-associative LRU cache replay.

The analytic model counts ideal doubles moved per degree of freedom per
solver iteration, assuming each fused vector-access region streams its
operands exactly once.  Traces recorded by the instrumented solvers are
summarized with the same counting unit (unique stream touches per region
instance) so the two sides are directly comparable; the cache replay then
drops the perfect-reuse assumption and answers what an LRU cache of a given
capacity would actually fetch from RAM.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .dofs import RangeSchedule
from .trace import GRAIN_BYTES, READ, WRITE, AccessRecorder

__all__ = ["TransferPrediction", "predict_transfer", "TagTally",
           "TraceSummary", "summarize_trace", "LivelinessReport",
           "liveliness", "CacheModel", "CacheReplayResult", "replay_cache",
           "data_in_flight"]


# -- analytic transfer model --------------------------------------------------


@dataclass(frozen=True)
class TransferPrediction:
    """Ideal doubles per DoF per iteration, split into the fused
    vector-access regions and the matrix-vector product."""
    variant: str
    vector_reads: float
    vector_writes: float
    matvec_reads: float
    matvec_writes: float

    @property
    def reads_per_dof(self) -> float:
        return self.vector_reads + self.matvec_reads

    @property
    def writes_per_dof(self) -> float:
        return self.vector_writes + self.matvec_writes


def predict_transfer(variant: str, s: int = None) -> TransferPrediction:
    """Modeled ideal memory transfer per iteration.

    Non-combined variants stream their vector operations apart from the
    operator application, which adds (2 reads, 1 write) on top of the listed
    vector-access counts.  The combined variants run everything inside one
    region per iteration, so their numbers are totals: 3.5/3.5, with the
    preconditioned form reading the scalar inverse diagonal on top (one third
    of a vector on the three-component benchmark problems the model is
    normalized to).  The s-step variant amortizes its reduction cluster and
    block updates over s iterations.
    """
    if variant == "cg":
        return TransferPrediction("cg", 9.0, 3.0, 2.0, 1.0)
    if variant == "pcg":
        return TransferPrediction("pcg", 13.0, 4.0, 2.0, 1.0)
    if variant == "pipelined":
        return TransferPrediction("pipelined", 7.0, 6.0, 2.0, 1.0)
    if variant == "sstep":
        if s is None:
            raise ValueError("the s-step prediction needs s")
        if s < 1:
            raise ValueError("s must be at least 1")
        return TransferPrediction("sstep", 5.0 + 4.0 / s, 1.0 + 2.0 / s,
                                  2.0, 1.0)
    if variant == "combined_cg":
        return TransferPrediction("combined_cg", 3.5, 3.5, 0.0, 0.0)
    if variant == "combined_pcg":
        return TransferPrediction("combined_pcg", 3.5 + 1.0 / 3.0, 3.5,
                                  0.0, 0.0)
    if variant == "matvec":
        return TransferPrediction("matvec", 0.0, 0.0, 2.0, 1.0)
    raise ValueError(f"unknown variant {variant!r}")


def data_in_flight(p: int, components: int, batch_cells: int) -> int:
    """Bytes of unique data per vector touched by one cell batch: each cell
    owns p^3 interior-equivalent DoFs per component, eight bytes each."""
    if p < 1 or components < 1 or batch_cells < 1:
        raise ValueError("inputs must be positive")
    return batch_cells * components * p ** 3 * 8


# -- trace summaries -----------------------------------------------------------


@dataclass(frozen=True)
class TagTally:
    tag: str
    instances: int
    reads_per_iteration: float     # doubles / DoF / iteration
    writes_per_iteration: float
    reads_per_instance: float      # doubles / DoF / region instance
    writes_per_instance: float


@dataclass(frozen=True)
class TraceSummary:
    n_dofs: int
    n_iterations: int
    tags: dict                      # tag -> TagTally (vector streams)
    vector_reads: float             # per-iteration sum over vector-access tags
    vector_writes: float
    matvec_reads: float             # per matvec instance
    matvec_writes: float
    metadata_reads: float           # per iteration, all metadata streams
    metadata_writes: float


_NON_ROW_TAGS = frozenset({"matvec", "drift_check"})


def summarize_trace(recorder: AccessRecorder, n_dofs: int,
                    n_iterations: int) -> TraceSummary:
    """Reduce a recorded trace to doubles per DoF with the model's counting
    unit: within one region instance every (stream, range, direction) counts
    once.  Only iterations 1..n_iterations enter (setup work is labeled
    iteration 0).  Vector and metadata streams are tallied separately."""
    if n_iterations < 1:
        raise ValueError("need at least one iteration")
    sid_info = {}
    for stream in recorder.streams.values():
        tail = stream.n_ranges - 1
        sid_info[stream.sid] = (stream.kind, tail,
                                stream.range_doubles(tail))
    regions = {}
    for chunk in recorder.chunks:
        if not 1 <= chunk.iteration <= n_iterations:
            continue
        reg = regions.setdefault(chunk.region, (chunk.tag, [], []))
        key = chunk.sid * (1 << 40) + chunk.ranges
        if chunk.mode & READ:
            reg[1].append(key)
        if chunk.mode & WRITE:
            reg[2].append(key)

    def doubles(keys, want_kind) -> float:
        if not keys:
            return 0.0
        uniq = np.unique(np.concatenate(keys))
        sids = uniq >> 40
        rids = uniq & ((1 << 40) - 1)
        total = 0.0
        for sid in np.unique(sids):
            kind, tail, tail_doubles = sid_info[int(sid)]
            if kind != want_kind:
                continue
            mine = rids[sids == sid]
            total += 64.0 * len(mine)
            if mine[-1] == tail:
                total += tail_doubles - 64.0
        return total

    per_tag = {}
    meta_r = meta_w = 0.0
    for tag, read_keys, write_keys in regions.values():
        r = doubles(read_keys, "vector")
        w = doubles(write_keys, "vector")
        acc = per_tag.setdefault(tag, [0.0, 0.0, 0])
        acc[0] += r
        acc[1] += w
        acc[2] += 1
        meta_r += doubles(read_keys, "metadata")
        meta_w += doubles(write_keys, "metadata")

    scale = 1.0 / (n_dofs * n_iterations)
    tags = {}
    for tag, (r, w, inst) in per_tag.items():
        tags[tag] = TagTally(tag, inst, r * scale, w * scale,
                             r / (n_dofs * inst), w / (n_dofs * inst))
    row_r = sum(t.reads_per_iteration for n, t in tags.items()
                if n not in _NON_ROW_TAGS)
    row_w = sum(t.writes_per_iteration for n, t in tags.items()
                if n not in _NON_ROW_TAGS)
    mv = tags.get("matvec")
    return TraceSummary(n_dofs, n_iterations, tags, row_r, row_w,
                        mv.reads_per_instance if mv else 0.0,
                        mv.writes_per_instance if mv else 0.0,
                        meta_r * scale, meta_w * scale)


# -- liveliness ----------------------------------------------------------------


@dataclass(frozen=True)
class LivelinessReport:
    distances: np.ndarray           # per range: last - first touch batch
    n_batches: int
    same_batch_fraction: float
    cdf_distances: np.ndarray       # sorted unique distances
    cdf_fractions: np.ndarray       # fraction of ranges with distance <= d

    @property
    def n_ranges(self) -> int:
        return len(self.distances)

    def fraction_within(self, distance) -> np.ndarray:
        """CDF evaluated at arbitrary distances (vectorized, step function)."""
        idx = np.searchsorted(self.cdf_distances, np.asarray(distance),
                              side="right")
        padded = np.concatenate([[0.0], self.cdf_fractions])
        return padded[idx]


def liveliness(schedule: RangeSchedule) -> LivelinessReport:
    """How long each 64-entry vector range stays in flight during one
    operator application, in cell batches.  Distance zero means the range is
    produced and finished within a single batch."""
    first = np.asarray(schedule.first_touch_batch)
    last = np.asarray(schedule.last_touch_batch)
    distances = last - first
    n_batches = int(last.max()) + 1 if len(last) else 1
    uniq, counts = np.unique(distances, return_counts=True)
    fractions = np.cumsum(counts) / len(distances)
    return LivelinessReport(distances, n_batches,
                            float(np.mean(distances == 0)),
                            uniq, fractions)


# -- LRU cache replay ----------------------------------------------------------


@dataclass(frozen=True)
class CacheModel:
    """Fully-associative LRU cache with write-allocate and read-for-ownership
    accounting; capacity reasoning only, deliberately hardware-independent."""
    capacity_bytes: int
    line_bytes: int = 64

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ValueError("capacity must be non-negative")
        if self.line_bytes < 8 or self.line_bytes % 8:
            raise ValueError("line size must be a positive multiple of 8")


@dataclass(frozen=True)
class CacheReplayResult:
    capacity_bytes: int
    loads_per_dof: float            # doubles / DoF / iteration, all streams
    stores_per_dof: float
    vector_loads_per_dof: float
    vector_stores_per_dof: float
    metadata_loads_per_dof: float
    metadata_stores_per_dof: float


def replay_cache(recorder: AccessRecorder, model: CacheModel, n_dofs: int,
                 n_iterations: int) -> CacheReplayResult:
    """Replay every recorded event (including setup) through the cache model
    and report RAM traffic in doubles per DoF per iteration.

    Events arrive at range granularity and every range is touched whole, so
    tracking recency per range with line-weighted sizes is exactly equivalent
    to a per-line LRU.  A write to a non-resident range incurs a
    read-for-ownership load; dirty evictions and the final flush count as
    stores.
    """
    capacity_lines = model.capacity_bytes // model.line_bytes
    lines_of = {}
    kind_of = {}
    for stream in recorder.streams.values():
        kind_of[stream.sid] = stream.kind
        tail = stream.n_ranges - 1
        full = GRAIN_BYTES // model.line_bytes
        tail_lines = -(-int(stream.range_doubles(tail) * 8)
                       // model.line_bytes)
        lines_of[stream.sid] = (full, tail, tail_lines)
    doubles_per_line = model.line_bytes / 8.0

    cache = OrderedDict()           # (sid, rid) -> [n_lines, dirty]
    occupancy = 0
    loads = {"vector": 0, "metadata": 0}
    stores = {"vector": 0, "metadata": 0}

    for chunk in recorder.chunks:
        sid = chunk.sid
        kind = kind_of[sid]
        full, tail, tail_lines = lines_of[sid]
        writes = bool(chunk.mode & WRITE)
        for rid in chunk.ranges:
            rid = int(rid)
            key = (sid, rid)
            n_lines = tail_lines if rid == tail else full
            entry = cache.get(key)
            if entry is None:
                loads[kind] += n_lines
                cache[key] = [n_lines, writes]
                occupancy += n_lines
                while occupancy > capacity_lines and cache:
                    old_key, (old_lines, old_dirty) = cache.popitem(last=False)
                    occupancy -= old_lines
                    if old_dirty:
                        stores[kind_of[old_key[0]]] += old_lines
            else:
                entry[1] = entry[1] or writes
                cache.move_to_end(key)

    for (sid, _), (n_lines, dirty) in cache.items():
        if dirty:
            stores[kind_of[sid]] += n_lines

    scale = doubles_per_line / (n_dofs * n_iterations)
    return CacheReplayResult(
        model.capacity_bytes,
        (loads["vector"] + loads["metadata"]) * scale,
        (stores["vector"] + stores["metadata"]) * scale,
        loads["vector"] * scale, stores["vector"] * scale,
        loads["metadata"] * scale, stores["metadata"] * scale)
