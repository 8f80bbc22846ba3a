"""Model/cluster descriptions and the view function.

A *view* is the half-open hyper-rectangle of a tensor's index space that one
rank owns under a parallel configuration.  Ranks are laid out with the TP
index varying fastest, then the pipeline stage, then the DP replica, so that
appending ranks to a configuration appends whole DP replicas.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

REPLICATED = "replicated"


class TopologyError(ValueError):
    """Raised for malformed configurations or out-of-domain queries."""


class TensorRole(str, enum.Enum):
    PARAMETER = "parameter"
    OPTIMIZER_MOMENT_1 = "optimizer_moment_1"
    OPTIMIZER_MOMENT_2 = "optimizer_moment_2"


@dataclass(frozen=True)
class TensorSpec:
    tensor_id: str
    layer: int
    shape: tuple[int, ...]
    tp_shard_axis: int | str = REPLICATED
    role: TensorRole = TensorRole.PARAMETER

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "role", TensorRole(self.role))
        if not self.shape or any(d < 1 for d in self.shape):
            raise TopologyError(f"{self.tensor_id}: dimensions must be >= 1, got {self.shape}")
        if self.tp_shard_axis != REPLICATED:
            if not isinstance(self.tp_shard_axis, int) or not 0 <= self.tp_shard_axis < len(self.shape):
                raise TopologyError(
                    f"{self.tensor_id}: tp_shard_axis {self.tp_shard_axis!r} invalid for rank-{len(self.shape)} tensor")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def is_replicated(self) -> bool:
        return self.tp_shard_axis == REPLICATED

    def with_role(self, role: TensorRole, suffix: str) -> "TensorSpec":
        return TensorSpec(f"{self.tensor_id}.{suffix}", self.layer, self.shape, self.tp_shard_axis, role)


@dataclass(frozen=True)
class ModelSpec:
    """A layered set of tensors.

    ``state_multiplier`` is the number of persistent bytes carried per
    parameter element (weights plus gradient, master copy and moments).  Cost
    accounting multiplies parameter element counts by it; moment tensors, when
    listed explicitly, are treated as already covered by that figure.
    """

    num_layers: int
    tensors: tuple[TensorSpec, ...]
    bytes_per_element: int = 2
    state_multiplier: float = 16.0
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if self.num_layers < 1:
            raise TopologyError("num_layers must be >= 1")
        if self.bytes_per_element < 1:
            raise TopologyError("bytes_per_element must be >= 1")
        if self.state_multiplier <= 0:
            raise TopologyError("state_multiplier must be positive")
        seen = set()
        for t in self.tensors:
            if not 0 <= t.layer < self.num_layers:
                raise TopologyError(f"{t.tensor_id}: layer {t.layer} outside [0, {self.num_layers})")
            if t.tensor_id in seen:
                raise TopologyError(f"duplicate tensor id {t.tensor_id}")
            seen.add(t.tensor_id)

    def tensors_in_layer(self, layer: int) -> list[TensorSpec]:
        return [t for t in self.tensors if t.layer == layer]

    def tensor(self, tensor_id: str) -> TensorSpec:
        for t in self.tensors:
            if t.tensor_id == tensor_id:
                return t
        raise KeyError(tensor_id)

    @property
    def parameter_count(self) -> int:
        return sum(t.numel for t in self.tensors if t.role is TensorRole.PARAMETER)

    def total_state_bytes(self) -> float:
        return self.parameter_count * self.state_multiplier

    def with_optimizer_moments(self) -> "ModelSpec":
        """Copy of the model that also lists both Adam moments per parameter."""
        extra = []
        for t in self.tensors:
            if t.role is TensorRole.PARAMETER:
                extra.append(t.with_role(TensorRole.OPTIMIZER_MOMENT_1, "exp_avg"))
                extra.append(t.with_role(TensorRole.OPTIMIZER_MOMENT_2, "exp_avg_sq"))
        return ModelSpec(self.num_layers, self.tensors + tuple(extra), self.bytes_per_element,
                         self.state_multiplier, self.name)


def split_layers(num_layers: int, pp: int) -> tuple[int, ...]:
    """Contiguous stage assignment; earlier stages take the remainder layers."""
    if pp < 1 or num_layers < pp:
        raise TopologyError(f"cannot split {num_layers} layers over {pp} stages")
    base, extra = divmod(num_layers, pp)
    out = []
    for stage in range(pp):
        out.extend([stage] * (base + (1 if stage < extra else 0)))
    return tuple(out)


@dataclass(frozen=True)
class Coord:
    tp: int
    pp: int
    dp: int


@dataclass(frozen=True)
class ParallelConfig:
    generation_id: int
    tp: int
    pp: int
    dp: int
    ranks: tuple[int, ...]
    layer_assignment: tuple[int, ...]
    _coords: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "layer_assignment", tuple(int(s) for s in self.layer_assignment))
        coords = {}
        for i, r in enumerate(self.ranks):
            coords[r] = Coord(i % self.tp, (i // self.tp) % self.pp, i // (self.tp * self.pp)) \
                if self.tp > 0 and self.pp > 0 else None
        object.__setattr__(self, "_coords", coords)

    @classmethod
    def create(cls, tp: int, pp: int, dp: int, num_layers: int, *, generation_id: int = 0,
               ranks: Optional[Iterable[int]] = None, first_rank: int = 0) -> "ParallelConfig":
        world = tp * pp * dp
        ranks = tuple(ranks) if ranks is not None else tuple(range(first_rank, first_rank + world))
        return cls(generation_id, tp, pp, dp, ranks, split_layers(num_layers, pp))

    def next_generation(self, tp: int, pp: int, dp: int, *, ranks: Optional[Iterable[int]] = None) -> "ParallelConfig":
        num_layers = len(self.layer_assignment)
        return ParallelConfig.create(tp, pp, dp, num_layers, generation_id=self.generation_id + 1, ranks=ranks)

    def with_generation(self, generation_id: int) -> "ParallelConfig":
        return ParallelConfig(generation_id, self.tp, self.pp, self.dp, self.ranks, self.layer_assignment)

    @property
    def world_size(self) -> int:
        return len(self.ranks)

    @property
    def degrees(self) -> tuple[int, int, int]:
        return self.tp, self.pp, self.dp

    def same_layout(self, other: "ParallelConfig") -> bool:
        return (self.degrees == other.degrees and self.ranks == other.ranks
                and self.layer_assignment == other.layer_assignment)

    def coord(self, rank: int) -> Coord:
        try:
            return self._coords[rank]
        except KeyError:
            raise TopologyError(f"rank {rank} not in generation {self.generation_id}") from None

    def rank_at(self, tp_index: int, pp_index: int, dp_index: int) -> int:
        return self.ranks[tp_index + self.tp * (pp_index + self.pp * dp_index)]

    def stage_of(self, layer: int) -> int:
        if not 0 <= layer < len(self.layer_assignment):
            raise TopologyError(f"layer {layer} outside the layer assignment")
        return self.layer_assignment[layer]

    def stage_ranks(self, stage: int) -> list[int]:
        return [self.rank_at(t, stage, d) for d in range(self.dp) for t in range(self.tp)]

    def layers_of_stage(self, stage: int) -> list[int]:
        return [l for l, s in enumerate(self.layer_assignment) if s == stage]


@dataclass(frozen=True)
class ShardView:
    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((int(lo), int(hi)) for lo, hi in self.bounds))
        for lo, hi in self.bounds:
            if not 0 <= lo < hi:
                raise TopologyError(f"empty or negative interval [{lo}, {hi})")

    @classmethod
    def full(cls, shape: Sequence[int]) -> "ShardView":
        return cls(tuple((0, d) for d in shape))

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in self.bounds)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def lower(self) -> tuple[int, ...]:
        return tuple(lo for lo, _ in self.bounds)

    def contains(self, other: "ShardView") -> bool:
        return other.ndim == self.ndim and all(
            lo <= olo and ohi <= hi for (lo, hi), (olo, ohi) in zip(self.bounds, other.bounds))

    def contains_index(self, index: Sequence[int]) -> bool:
        return all(lo <= i < hi for (lo, hi), i in zip(self.bounds, index))

    def slices(self, origin: Optional[Sequence[int]] = None) -> tuple[slice, ...]:
        origin = origin or (0,) * self.ndim
        return tuple(slice(lo - o, hi - o) for (lo, hi), o in zip(self.bounds, origin))

    def __str__(self):
        return "x".join(f"[{lo},{hi})" for lo, hi in self.bounds)


def block_bounds(length: int, parts: int, index: int) -> Optional[tuple[int, int]]:
    """Block ``index`` of ``length`` split into ``parts`` blocks of ceil(length/parts)."""
    size = -(-length // parts)
    lo = index * size
    hi = min(length, lo + size)
    return (lo, hi) if lo < hi else None


def tp_block(tensor: TensorSpec, tp: int, tp_index: int) -> Optional[ShardView]:
    if tensor.is_replicated or tp == 1:
        return ShardView.full(tensor.shape)
    axis = tensor.tp_shard_axis
    blk = block_bounds(tensor.shape[axis], tp, tp_index)
    if blk is None:
        return None
    bounds = [(0, d) for d in tensor.shape]
    bounds[axis] = blk
    return ShardView(tuple(bounds))


def view(tensor: TensorSpec, config: ParallelConfig, rank: int) -> Optional[ShardView]:
    """Index region owned by ``rank``, or None when its stage does not host the layer."""
    c = config.coord(rank)
    if config.stage_of(tensor.layer) != c.pp:
        return None
    return tp_block(tensor, config.tp, c.tp)


def owners(tensor: TensorSpec, config: ParallelConfig) -> dict[int, ShardView]:
    stage = config.stage_of(tensor.layer)
    out = {}
    for d in range(config.dp):
        for t in range(config.tp):
            v = tp_block(tensor, config.tp, t)
            if v is not None:
                out[config.rank_at(t, stage, d)] = v
    return out


def validate_config(config: ParallelConfig, model: ModelSpec) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    problems = []
    if min(config.tp, config.pp, config.dp) < 1:
        problems.append(f"degrees must be positive, got tp={config.tp} pp={config.pp} dp={config.dp}")
        return problems
    if config.tp * config.pp * config.dp != len(config.ranks):
        problems.append(f"tp*pp*dp = {config.tp}*{config.pp}*{config.dp} = "
                        f"{config.tp * config.pp * config.dp} != {len(config.ranks)} ranks")
    if len(set(config.ranks)) != len(config.ranks):
        problems.append("rank ids are not unique")
    if any(r < 0 for r in config.ranks):
        problems.append("rank ids must be non-negative")
    if config.generation_id < 0:
        problems.append("generation_id must be non-negative")

    la = config.layer_assignment
    if len(la) < model.num_layers:
        missing = list(range(len(la), model.num_layers))
        problems.append(f"layer_assignment missing layers {missing}")
    elif len(la) > model.num_layers:
        problems.append(f"layer_assignment covers {len(la)} layers, model has {model.num_layers}")
    if any(not 0 <= s < config.pp for s in la):
        problems.append(f"layer_assignment stages must lie in [0, {config.pp})")
    else:
        if any(b < a for a, b in zip(la, la[1:])):
            problems.append("layer_assignment is not contiguous per stage")
        empty = sorted(set(range(config.pp)) - set(la))
        if empty:
            problems.append(f"pipeline stages {empty} receive no layers")

    for t in model.tensors:
        if not t.is_replicated and t.shape[t.tp_shard_axis] < config.tp:
            problems.append(f"{t.tensor_id}: axis {t.tp_shard_axis} has length "
                            f"{t.shape[t.tp_shard_axis]} < tp={config.tp}")
    return problems


def check_config(config: ParallelConfig, model: ModelSpec) -> None:
    problems = validate_config(config, model)
    if problems:
        raise TopologyError(f"generation {config.generation_id}: " + "; ".join(problems))
