"""Intersection-based transfer planning between two parallel configurations.

Planning only touches sharding metadata.  For every tensor the distinct old
views are the TP blocks of the hosting stage; each is held by ``dp`` replicas.
A destination view is tiled by intersecting it with the (sorted) old blocks,
found by bisection so the number of intersection checks stays proportional to
the number of destination ranks rather than to the product of rank counts.
"""
from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .topology import (ModelSpec, ParallelConfig, ShardView, TensorSpec, TopologyError, check_config,
                       owners, tp_block, view)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class TransferTask:
    tensor_id: str
    layer: int
    src_rank: int
    dst_rank: int
    bounds: ShardView
    byte_size: int

    @property
    def is_local(self) -> bool:
        return self.src_rank == self.dst_rank

    def to_record(self) -> str:
        axes = ";".join(f"{lo}:{hi}" for lo, hi in self.bounds.bounds)
        return f"{self.tensor_id}\t{self.layer}\t{self.src_rank}\t{self.dst_rank}\t{axes}\t{self.byte_size}"

    @classmethod
    def from_record(cls, line: str) -> "TransferTask":
        tid, layer, src, dst, axes, nbytes = line.rstrip("\n").split("\t")
        bounds = ShardView(tuple(tuple(int(x) for x in ax.split(":")) for ax in axes.split(";")))
        return cls(tid, int(layer), int(src), int(dst), bounds, int(nbytes))


@dataclass
class TransferPlan:
    src_config_gen: int
    dst_config_gen: int
    tasks_by_layer: dict[int, list[TransferTask]] = field(default_factory=dict)
    pair_checks: int = 0

    @property
    def tasks(self) -> list[TransferTask]:
        return [t for layer in sorted(self.tasks_by_layer) for t in self.tasks_by_layer[layer]]

    @property
    def total_bytes(self) -> int:
        return sum(t.byte_size for t in self.tasks)

    @property
    def per_link_bytes(self) -> dict[tuple[int, int], int]:
        """Bytes per network link; local copies (src == dst) never touch a link."""
        out: dict[tuple[int, int], int] = defaultdict(int)
        for t in self.tasks:
            if not t.is_local:
                out[(t.src_rank, t.dst_rank)] += t.byte_size
        return dict(out)

    def layer_link_bytes(self, layer: int) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = defaultdict(int)
        for t in self.tasks_by_layer.get(layer, ()):
            if not t.is_local:
                out[(t.src_rank, t.dst_rank)] += t.byte_size
        return dict(out)

    def __len__(self):
        return sum(len(v) for v in self.tasks_by_layer.values())

    def to_text(self) -> str:
        lines = [f"# plan {self.src_config_gen} -> {self.dst_config_gen}",
                 "# tensor_id\tlayer\tsrc\tdst\tbounds\tbytes"]
        lines += [t.to_record() for t in self.tasks]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransferPlan":
        src_gen = dst_gen = None
        by_layer: dict[int, list[TransferTask]] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("# plan "):
                a, b = line[len("# plan "):].split("->")
                src_gen, dst_gen = int(a), int(b)
                continue
            if line.startswith("#"):
                continue
            task = TransferTask.from_record(line)
            by_layer.setdefault(task.layer, []).append(task)
        if src_gen is None:
            raise PlanError("missing '# plan <src> -> <dst>' header")
        return cls(src_gen, dst_gen, dict(sorted(by_layer.items())))

    def __eq__(self, other):
        if not isinstance(other, TransferPlan):
            return NotImplemented
        return (self.src_config_gen, self.dst_config_gen, self.tasks) == \
            (other.src_config_gen, other.dst_config_gen, other.tasks)


def intersect(a: ShardView, b: ShardView) -> Optional[ShardView]:
    if a.ndim != b.ndim:
        raise TopologyError(f"dimensionality mismatch: {a.ndim} vs {b.ndim}")
    out = []
    for (alo, ahi), (blo, bhi) in zip(a.bounds, b.bounds):
        lo, hi = max(alo, blo), min(ahi, bhi)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return ShardView(tuple(out))


class _OldBlocks:
    """Distinct old TP blocks of one tensor, sorted along the sharded axis."""

    def __init__(self, tensor: TensorSpec, config: ParallelConfig):
        self.tensor = tensor
        self.config = config
        self.stage = config.stage_of(tensor.layer)
        self.axis = None if tensor.is_replicated or config.tp == 1 else tensor.tp_shard_axis
        self.blocks = []
        for t in range(config.tp if self.axis is not None else 1):
            blk = tp_block(tensor, config.tp, t)
            if blk is not None:
                self.blocks.append((t, blk))
        self.starts = [blk.bounds[self.axis][0] for _, blk in self.blocks] if self.axis is not None else [0]

    def overlapping(self, dst_view: ShardView):
        if self.axis is None:
            return self.blocks
        lo, hi = dst_view.bounds[self.axis]
        i = max(bisect.bisect_right(self.starts, lo) - 1, 0)
        j = bisect.bisect_left(self.starts, hi)
        return self.blocks[i:j]

    def holders(self, tp_index: int) -> list[int]:
        return [self.config.rank_at(tp_index, self.stage, d) for d in range(self.config.dp)]


def _plan_tensor(tensor: TensorSpec, old: ParallelConfig, new: ParallelConfig, bpe: int,
                 counter: list[int]) -> list[TransferTask]:
    src = _OldBlocks(tensor, old)
    tasks = []
    new_stage = new.stage_of(tensor.layer)
    for d in range(new.dp):
        for t in range(new.tp):
            dst_view = tp_block(tensor, new.tp, t)
            if dst_view is None:
                continue
            dst = new.rank_at(t, new_stage, d)
            mine = None
            own = old._coords.get(dst)
            if own is not None and own.pp == src.stage:
                # every old TP rank holds the single block of an unsharded tensor
                mine = own.tp if src.axis is not None else 0
            for tp_index, blk in src.overlapping(dst_view):
                counter[0] += 1
                piece = intersect(blk, dst_view)
                if piece is None:
                    continue
                if tp_index == mine:
                    if piece == dst_view and blk == dst_view:
                        continue  # shard already in place
                    sender = dst
                else:
                    sender = src.holders(tp_index)[0]
                tasks.append(TransferTask(tensor.tensor_id, tensor.layer, sender, dst, piece, piece.numel * bpe))
    return tasks


def compute_transfer_plan(old: ParallelConfig, new: ParallelConfig, model: ModelSpec,
                          *, validate: bool = True) -> TransferPlan:
    """Minimal layer-grouped peer-to-peer plan moving ``model`` from ``old`` to ``new``.

    Each destination shard is tiled exactly once.  When several DP replicas
    hold the same bytes, the destination's own copy wins, otherwise the replica
    with the lowest DP index.
    """
    if old.generation_id == new.generation_id:
        raise PlanError(f"source and destination share generation id {old.generation_id}")
    if validate:
        check_config(old, model)
        check_config(new, model)
    counter = [0]
    by_layer: dict[int, list[TransferTask]] = {}
    for tensor in model.tensors:
        tasks = _plan_tensor(tensor, old, new, model.bytes_per_element, counter)
        if tasks:
            by_layer.setdefault(tensor.layer, []).extend(tasks)
    return TransferPlan(old.generation_id, new.generation_id, dict(sorted(by_layer.items())), counter[0])


def verify_plan(plan: TransferPlan, old: ParallelConfig, new: ParallelConfig, model: ModelSpec) -> list[str]:
    """Brute-force check of a plan by counting coverage of every index tuple.

    Cost is proportional to the total number of destination elements, so only
    use it on small models.
    """
    problems = []
    by_tensor: dict[str, list[TransferTask]] = defaultdict(list)
    known = {t.tensor_id for t in model.tensors}
    for layer, tasks in plan.tasks_by_layer.items():
        for task in tasks:
            if task.layer != layer:
                problems.append(f"{task.tensor_id}: task filed under layer {layer} but tagged {task.layer}")
            if task.tensor_id not in known:
                problems.append(f"unknown tensor {task.tensor_id}")
                continue
            by_tensor[task.tensor_id].append(task)

    for tensor in model.tensors:
        old_views = owners(tensor, old)
        new_views = owners(tensor, new)
        coverage = {r: np.zeros(v.shape, dtype=np.int64) for r, v in new_views.items()}
        for task in by_tensor.get(tensor.tensor_id, ()):
            label = f"{tensor.tensor_id} {task.src_rank}->{task.dst_rank} {task.bounds}"
            if task.layer != tensor.layer:
                problems.append(f"{label}: layer {task.layer} != tensor layer {tensor.layer}")
            if task.bounds.numel == 0 or task.byte_size <= 0:
                problems.append(f"{label}: empty task")
            if task.byte_size != task.bounds.numel * model.bytes_per_element:
                problems.append(f"{label}: byte_size {task.byte_size} inconsistent with bounds")
            sv = old_views.get(task.src_rank)
            if sv is None or not sv.contains(task.bounds):
                problems.append(f"{label}: bounds outside the source's old view")
            dv = new_views.get(task.dst_rank)
            if dv is None or not dv.contains(task.bounds):
                problems.append(f"{label}: bounds outside the destination's new view")
                continue
            coverage[task.dst_rank][task.bounds.slices(dv.lower)] += 1

        for rank, dv in new_views.items():
            cov = coverage[rank]
            sv = old_views.get(rank)
            if sv is not None and sv == dv:
                # retained in place: nothing may be sent on top of it
                if cov.any():
                    problems.append(f"{tensor.tensor_id} rank {rank}: retained shard also receives data")
                continue
            for kind, mask in (("coverage gap", cov == 0), ("overlap", cov > 1)):
                bad = np.argwhere(mask)
                if len(bad):
                    g = tuple(int(i) + lo for i, lo in zip(bad[0], dv.lower))
                    problems.append(f"{tensor.tensor_id} rank {rank}: {kind} at {g} "
                                    f"({len(bad)} elements affected)")
    return problems


@dataclass(frozen=True)
class PlanCost:
    total_bytes: int
    max_link_bytes: int
    task_count: int


def plan_cost_summary(plan: TransferPlan) -> PlanCost:
    links = plan.per_link_bytes
    return PlanCost(plan.total_bytes, max(links.values(), default=0), len(plan))


def dst_view_bytes(model: ModelSpec, config: ParallelConfig) -> int:
    """Sum over ranks of the bytes in their views (a bound for any plan total)."""
    return sum(v.numel * model.bytes_per_element for t in model.tensors for v in owners(t, config).values())


def retained_bytes(model: ModelSpec, old: ParallelConfig, new: ParallelConfig) -> int:
    out = 0
    for t in model.tensors:
        for r, v in owners(t, new).items():
            if r in old._coords and view(t, old, r) == v:
                out += v.numel * model.bytes_per_element
    return out
