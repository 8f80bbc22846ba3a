"""Layer-streaming execution of a transfer plan through a fixed staging buffer."""
from __future__ import annotations

import abc
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .planner import TransferPlan, TransferTask
from .topology import ModelSpec, ParallelConfig, ShardView, owners

logger = logging.getLogger(__name__)

DEFAULT_STAGING_BYTES = 4096

_FLOAT_DTYPES = {2: np.float16, 4: np.float32, 8: np.float64}


class IntegrityError(RuntimeError):
    pass


class TransportError(RuntimeError):
    pass


class TransferAborted(RuntimeError):
    def __init__(self, layer: int, cause: Exception):
        super().__init__(f"transfer aborted in layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause


def _as_elements(buffer, shape, bpe: int) -> np.ndarray:
    arr = np.frombuffer(buffer, dtype=np.uint8) if not isinstance(buffer, np.ndarray) else buffer
    return arr.reshape(tuple(shape) + (bpe,))


def slice_local(buffer, owner_view: ShardView, global_bounds: ShardView, bpe: int = 1) -> bytes:
    """Row-major bytes of ``global_bounds`` out of a buffer laid out over ``owner_view``."""
    if not owner_view.contains(global_bounds):
        raise IntegrityError(f"bounds {global_bounds} escape owner view {owner_view}")
    arr = _as_elements(buffer, owner_view.shape, bpe)
    return arr[global_bounds.slices(owner_view.lower)].tobytes()


def scatter_local(buffer, owner_view: ShardView, global_bounds: ShardView, payload, bpe: int = 1) -> None:
    """Inverse of :func:`slice_local`; writes ``payload`` in place."""
    if not owner_view.contains(global_bounds):
        raise IntegrityError(f"bounds {global_bounds} escape owner view {owner_view}")
    expected = global_bounds.numel * bpe
    if len(payload) != expected:
        raise IntegrityError(f"payload of {len(payload)} bytes, bounds {global_bounds} need {expected}")
    arr = _as_elements(buffer, owner_view.shape, bpe)
    arr[global_bounds.slices(owner_view.lower)] = _as_elements(payload, global_bounds.shape, bpe)


@dataclass
class Shard:
    view: ShardView
    data: np.ndarray  # flat uint8, row-major over ``view``


@dataclass
class ShardStore:
    """Per-rank shard buffers: ``shards[rank][tensor_id]``."""

    bytes_per_element: int
    shards: dict[int, dict[str, Shard]] = field(default_factory=dict)
    incomplete: bool = False

    @classmethod
    def allocate(cls, model: ModelSpec, config: ParallelConfig) -> "ShardStore":
        store = cls(model.bytes_per_element)
        for t in model.tensors:
            for rank, v in owners(t, config).items():
                data = np.zeros(v.numel * model.bytes_per_element, dtype=np.uint8)
                store.shards.setdefault(rank, {})[t.tensor_id] = Shard(v, data)
        return store

    @classmethod
    def from_full(cls, model: ModelSpec, config: ParallelConfig, full: dict[str, np.ndarray]) -> "ShardStore":
        store = cls.allocate(model, config)
        for rank, entries in store.shards.items():
            for tid, shard in entries.items():
                shard.data[:] = full[tid][shard.view.slices()].reshape(-1)
        return store

    def get(self, rank: int, tensor_id: str) -> Optional[Shard]:
        return self.shards.get(rank, {}).get(tensor_id)

    def __iter__(self) -> Iterator[tuple[int, str, Shard]]:
        for rank in sorted(self.shards):
            for tid, shard in self.shards[rank].items():
                yield rank, tid, shard

    @property
    def nbytes(self) -> int:
        return sum(s.data.nbytes for _, _, s in self)


def seeded_tensors(model: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Deterministic full tensors, shape ``(*shape, bytes_per_element)`` of uint8.

    Float widths get finite normal samples so deviations are meaningful numbers.
    """
    rng = np.random.default_rng(seed)
    bpe = model.bytes_per_element
    out = {}
    for t in model.tensors:
        if bpe in _FLOAT_DTYPES:
            vals = rng.standard_normal(t.shape).astype(_FLOAT_DTYPES[bpe])
            out[t.tensor_id] = vals.view(np.uint8).reshape(t.shape + (bpe,))
        else:
            out[t.tensor_id] = rng.integers(0, 256, size=t.shape + (bpe,), dtype=np.uint8)
    return out


def index_tensors(model: ModelSpec) -> dict[str, np.ndarray]:
    """Full tensors whose bytes encode (tensor, flat index), useful for eyeballing misplacements."""
    bpe = model.bytes_per_element
    out = {}
    for k, t in enumerate(model.tensors):
        codes = (np.arange(t.numel, dtype=np.uint64) + (np.uint64(k) << np.uint64(40)))
        raw = codes.astype("<u8").view(np.uint8).reshape(t.numel, 8)
        reps = -(-bpe // 8)
        out[t.tensor_id] = np.tile(raw, (1, reps))[:, :bpe].reshape(t.shape + (bpe,)).copy()
    return out


def gather_full(store: ShardStore, model: ModelSpec, config: ParallelConfig) -> dict[str, np.ndarray]:
    """Materialize full tensors from a store; replicas must agree."""
    bpe = model.bytes_per_element
    out = {}
    for t in model.tensors:
        full = np.zeros(t.shape + (bpe,), dtype=np.uint8)
        seen = np.zeros(t.shape, dtype=bool)
        for rank, v in owners(t, config).items():
            shard = store.get(rank, t.tensor_id)
            if shard is None or shard.view != v:
                raise IntegrityError(f"rank {rank} lacks shard {v} of {t.tensor_id}")
            block = _as_elements(shard.data, v.shape, bpe)
            sl = v.slices()
            if seen[sl].any() and not np.array_equal(full[sl][seen[sl]], block[seen[sl]]):
                raise IntegrityError(f"replicas of {t.tensor_id} disagree on {v}")
            full[sl] = block
            seen[sl] = True
        if not seen.all():
            raise IntegrityError(f"{t.tensor_id} not fully covered by {config.generation_id}")
        out[t.tensor_id] = full
    return out


def gather_reslice_reference(src_store: ShardStore, model: ModelSpec, old: ParallelConfig,
                             new: ParallelConfig) -> ShardStore:
    """Reference resharding: materialize each full tensor, then cut the new views."""
    return ShardStore.from_full(model, new, gather_full(src_store, model, old))


@dataclass(frozen=True)
class Comparison:
    mismatched_bytes: int
    max_deviation: float

    @property
    def exact(self) -> bool:
        return self.mismatched_bytes == 0


def compare_stores(actual: ShardStore, expected: ShardStore) -> Comparison:
    bpe = expected.bytes_per_element
    mismatched = 0
    worst = 0.0
    for rank, tid, exp in expected:
        got = actual.get(rank, tid)
        if got is None or got.view != exp.view:
            mismatched += exp.data.nbytes
            worst = float("inf")
            continue
        diff = got.data != exp.data
        mismatched += int(diff.sum())
        if bpe in _FLOAT_DTYPES:
            a = got.data.view(_FLOAT_DTYPES[bpe]).astype(np.float64)
            b = exp.data.view(_FLOAT_DTYPES[bpe]).astype(np.float64)
            dev = np.abs(a - b)
            if dev.size:
                worst = float("inf") if np.isnan(dev).any() else max(worst, float(dev.max()))
        elif diff.any():
            worst = max(worst, float(np.max(np.abs(got.data.astype(np.int64) - exp.data.astype(np.int64)))))
    return Comparison(mismatched, worst)


class Transport(abc.ABC):
    """Point-to-point byte transport with per-link FIFO delivery."""

    def __init__(self):
        self.bytes_sent = 0

    @abc.abstractmethod
    def send(self, src: int, dst: int, payload: bytes, *, layer: int) -> None: ...

    @abc.abstractmethod
    def recv(self, src: int, dst: int, *, layer: int) -> bytes: ...

    def barrier(self, layer: int) -> None:
        pass


class LoopbackTransport(Transport):
    """In-memory transport.  ``fail_at_layer`` injects a failure for tests."""

    def __init__(self, fail_at_layer: Optional[int] = None):
        super().__init__()
        self._links: dict[tuple[int, int], deque] = defaultdict(deque)
        self.fail_at_layer = fail_at_layer

    def send(self, src, dst, payload, *, layer):
        if self.fail_at_layer is not None and layer == self.fail_at_layer:
            raise TransportError(f"link {src}->{dst} lost")
        self._links[(src, dst)].append(bytes(payload))
        self.bytes_sent += len(payload)

    def recv(self, src, dst, *, layer):
        q = self._links.get((src, dst))
        if not q:
            raise TransportError(f"nothing in flight on {src}->{dst}")
        return q.popleft()

    @property
    def in_flight(self) -> int:
        return sum(len(p) for q in self._links.values() for p in q)


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: str
    layer: int
    src: int
    dst: int
    nbytes: int

    def to_record(self) -> str:
        return f"{self.seq},{self.kind},{self.layer},{self.src},{self.dst},{self.nbytes}"


class RecordingTransport(LoopbackTransport):
    """Loopback transport that keeps a time-ordered event trace."""

    def __init__(self, fail_at_layer: Optional[int] = None):
        super().__init__(fail_at_layer)
        self.trace: list[TraceEvent] = []

    def _record(self, kind, layer, src, dst, nbytes):
        self.trace.append(TraceEvent(len(self.trace), kind, layer, src, dst, nbytes))

    def send(self, src, dst, payload, *, layer):
        super().send(src, dst, payload, layer=layer)
        self._record("send", layer, src, dst, len(payload))

    def recv(self, src, dst, *, layer):
        payload = super().recv(src, dst, layer=layer)
        self._record("recv", layer, src, dst, len(payload))
        return payload

    def barrier(self, layer):
        self._record("barrier", layer, -1, -1, 0)

    def dump(self) -> str:
        return "seq,kind,layer,src,dst,bytes\n" + "\n".join(e.to_record() for e in self.trace) + "\n"

    def layer_link_bytes(self) -> dict[int, dict[tuple[int, int], int]]:
        out: dict[int, dict[tuple[int, int], int]] = defaultdict(lambda: defaultdict(int))
        for e in self.trace:
            if e.kind == "send":
                out[e.layer][(e.src, e.dst)] += e.nbytes
        return {k: dict(v) for k, v in out.items()}


class StagingBuffer:
    """Receive buffer allocated once and reused for every layer."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("staging capacity must be positive")
        self.capacity = capacity
        self._buf = bytearray(capacity)
        self.resident = 0
        self.high_water_mark = 0

    def fits(self, nbytes: int) -> bool:
        return self.resident + nbytes <= self.capacity

    def put(self, payload: bytes) -> memoryview:
        n = len(payload)
        if not self.fits(n):
            raise IntegrityError(f"staging overflow: {self.resident} + {n} > {self.capacity}")
        start = self.resident
        self._buf[start:start + n] = payload
        self.resident += n
        self.high_water_mark = max(self.high_water_mark, self.resident)
        return memoryview(self._buf)[start:start + n]

    def reset(self) -> None:
        self.resident = 0


def _split_bounds(bounds: ShardView, bpe: int, max_bytes: int) -> list[ShardView]:
    if bounds.numel * bpe <= max_bytes:
        return [bounds]
    for axis in range(bounds.ndim):
        lo, hi = bounds.bounds[axis]
        slab = bounds.numel // (hi - lo) * bpe
        if hi - lo > 1 and slab <= max_bytes:
            step = max_bytes // slab
            out = []
            for a in range(lo, hi, step):
                b = list(bounds.bounds)
                b[axis] = (a, min(hi, a + step))
                out.append(ShardView(tuple(b)))
            return out
        if hi - lo > 1:
            # one slab is still too big: cut into slabs and recurse inward
            out = []
            for a in range(lo, hi):
                b = list(bounds.bounds)
                b[axis] = (a, a + 1)
                out.extend(_split_bounds(ShardView(tuple(b)), bpe, max_bytes))
            return out
    raise IntegrityError(f"a single element ({bpe} bytes) exceeds the staging buffer ({max_bytes} bytes)")


def chunk_task(task: TransferTask, bpe: int, max_bytes: int) -> list[TransferTask]:
    """Split along the outermost splittable axis into pieces of at most ``max_bytes``."""
    if task.byte_size <= max_bytes:
        return [task]
    return [TransferTask(task.tensor_id, task.layer, task.src_rank, task.dst_rank, b, b.numel * bpe)
            for b in _split_bounds(task.bounds, bpe, max_bytes)]


@dataclass
class ExecutionReport:
    peak_staging_bytes: int = 0
    bytes_moved: int = 0
    local_bytes: int = 0
    layers_processed: int = 0
    tasks_executed: int = 0
    staging_capacity: int = 0

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.__dict__.items()) + "\n"


def _carry_retained(src_store: ShardStore, dst_store: ShardStore) -> None:
    # Shards whose view is unchanged stay in place: the new world reuses the storage.
    for rank, tid, dst in list(dst_store):
        src = src_store.get(rank, tid)
        if src is not None and src.view == dst.view:
            dst_store.shards[rank][tid] = src


def execute_plan(plan: TransferPlan, src_store: ShardStore, dst_store: ShardStore,
                 transport: Transport, staging_bytes: int = DEFAULT_STAGING_BYTES,
                 *, chunking: bool = True, carry_retained: bool = True) -> ExecutionReport:
    """Run ``plan`` one layer at a time; destination shards are assembled in place.

    Raises :class:`IntegrityError` for tasks outside the source or destination
    views and :class:`TransferAborted` when the transport fails.  In both cases
    ``dst_store.incomplete`` is set and the source store is untouched.
    """
    bpe = src_store.bytes_per_element
    staging = StagingBuffer(staging_bytes)
    report = ExecutionReport(staging_capacity=staging_bytes)
    if carry_retained:
        _carry_retained(src_store, dst_store)

    def flush(pending):
        for task, region in pending:
            dst = dst_store.get(task.dst_rank, task.tensor_id)
            scatter_local(dst.data, dst.view, task.bounds, region, bpe)
        pending.clear()
        staging.reset()

    dst_store.incomplete = True
    for layer in sorted(plan.tasks_by_layer):
        pending: list[tuple[TransferTask, memoryview]] = []
        try:
            for raw in plan.tasks_by_layer[layer]:
                if raw.layer != layer:
                    raise IntegrityError(f"task for layer {raw.layer} filed under layer {layer}")
                if chunking:
                    pieces = chunk_task(raw, bpe, staging_bytes)
                elif raw.byte_size > staging_bytes and not raw.is_local:
                    raise IntegrityError(f"task of {raw.byte_size} bytes exceeds staging buffer "
                                         f"of {staging_bytes} bytes and chunking is off")
                else:
                    pieces = [raw]
                for task in pieces:
                    src = src_store.get(task.src_rank, task.tensor_id)
                    if src is None or not src.view.contains(task.bounds):
                        raise IntegrityError(f"{task.tensor_id}: {task.bounds} outside source view of "
                                             f"rank {task.src_rank}")
                    dst = dst_store.get(task.dst_rank, task.tensor_id)
                    if dst is None or not dst.view.contains(task.bounds):
                        raise IntegrityError(f"{task.tensor_id}: {task.bounds} outside destination view "
                                             f"of rank {task.dst_rank}")
                    payload = slice_local(src.data, src.view, task.bounds, bpe)
                    if task.is_local:
                        scatter_local(dst.data, dst.view, task.bounds, payload, bpe)
                        report.local_bytes += len(payload)
                    else:
                        if not staging.fits(len(payload)):
                            flush(pending)
                        transport.send(task.src_rank, task.dst_rank, payload, layer=layer)
                        received = transport.recv(task.src_rank, task.dst_rank, layer=layer)
                        pending.append((task, staging.put(received)))
                        report.bytes_moved += len(received)
                    report.tasks_executed += 1
            flush(pending)
            transport.barrier(layer)
        except TransportError as exc:
            logger.warning("layer %d aborted: %s", layer, exc)
            raise TransferAborted(layer, exc) from exc
        staging.reset()
        report.layers_processed += 1
    dst_store.incomplete = False
    report.peak_staging_bytes = staging.high_water_mark
    return report
