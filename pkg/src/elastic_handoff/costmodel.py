"""Latency and bandwidth constants plus the derived timing formulas.

All durations are seconds.  Bandwidths follow the units in their names
(GB/s = 1e9 bytes per second, Gb/s = 1e9 bits per second).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

from .planner import TransferPlan
from .topology import ModelSpec, ParallelConfig, TensorRole, tp_block

GB = 1e9


@dataclass(frozen=True)
class CostModel:
    """Defaults are calibrated against a 32-GPU (4 nodes x 8) testbed."""

    gpus_per_node: int = 8
    # interconnect, per point-to-point link
    intra_node_bw_GBps: float = 24.0
    inter_node_bw_GBps: float = 20.0
    bandwidth_derating: float = 1.0
    # persistent storage
    storage_bw_Gbps_per_gpu: float = 3.101812
    storage_aggregate_GBps: float = 46.25
    # distributed initialization
    process_spawn_s: float = 6.0
    tcp_bootstrap_s: float = 3.0
    topology_discovery_base_s: float = 4.0
    topology_discovery_per_rank_s: float = 0.03
    communicator_setup_base_s: float = 5.0
    communicator_setup_per_rank_s: float = 0.07
    warmup_base_s: float = 17.145203
    warmup_per_GB_s: float = 1.5
    misc_restart_s: float = 2.4
    # live switch path
    drain_base_s: float = 1.75
    collective_latency_s: float = 0.002
    swap_s: float = 0.4
    cleanup_s: float = 2.0
    plan_compute_s: float = 1.0
    communicator_metadata_bytes: int = 1 << 30
    staging_buffer_bytes: int = 512 << 20
    interference_factor: float = 0.003
    # checkpoint-reshape baseline keeps this fraction of the load time
    reshape_load_factor: float = 0.5
    # steady-state training
    gpu_peak_tflops: float = 312.0
    mfu: float = 0.35
    tokens_per_iteration: int = 262144
    duty_cycle: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        for name in ("intra_node_bw_GBps", "inter_node_bw_GBps", "storage_bw_Gbps_per_gpu",
                     "storage_aggregate_GBps", "bandwidth_derating", "gpu_peak_tflops", "mfu",
                     "tokens_per_iteration", "gpus_per_node"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty_cycle must lie in (0, 1]")

    def replace(self, **changes) -> "CostModel":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    # --- steady state -------------------------------------------------

    def iteration_time_s(self, config: ParallelConfig, model: ModelSpec) -> float:
        flops = 6.0 * model.parameter_count * self.tokens_per_iteration
        return flops / (config.world_size * self.gpu_peak_tflops * 1e12 * self.mfu)

    # --- initialization -----------------------------------------------

    def topology_discovery_s(self, world: int) -> float:
        return self.topology_discovery_base_s + self.topology_discovery_per_rank_s * world

    def communicator_setup_s(self, world: int) -> float:
        return self.communicator_setup_base_s + self.communicator_setup_per_rank_s * world

    def warmup_s(self, state_bytes_per_gpu: float) -> float:
        return self.warmup_base_s + self.warmup_per_GB_s * state_bytes_per_gpu / GB

    def init_s(self, world: int, state_bytes_per_gpu: float) -> float:
        return (self.process_spawn_s + self.tcp_bootstrap_s + self.topology_discovery_s(world)
                + self.communicator_setup_s(world) + self.warmup_s(state_bytes_per_gpu))

    # --- storage ------------------------------------------------------

    def effective_storage_Bps(self, world: int) -> float:
        per_gpu = self.storage_bw_Gbps_per_gpu * GB / 8
        return min(per_gpu, self.storage_aggregate_GBps * GB / world)

    def load_s(self, world: int, state_bytes_per_gpu: float) -> float:
        return state_bytes_per_gpu / self.effective_storage_Bps(world)

    # --- live path ----------------------------------------------------

    def collective_s(self, world: int) -> float:
        return self.collective_latency_s * math.log2(max(world, 2))

    def drain_s(self, world: int) -> float:
        return self.drain_base_s + self.collective_s(world)

    def link_Bps(self, src: int, dst: int) -> float:
        same = src // self.gpus_per_node == dst // self.gpus_per_node
        bw = self.intra_node_bw_GBps if same else self.inter_node_bw_GBps
        return bw * GB * self.bandwidth_derating


def state_bytes_per_gpu(model: ModelSpec, config: ParallelConfig) -> float:
    """Persistent state on the most loaded rank (parameters times the state multiplier)."""
    per_slot: dict[tuple[int, int], int] = {}
    for t in model.tensors:
        if t.role is not TensorRole.PARAMETER:
            continue
        stage = config.stage_of(t.layer)
        for tp_index in range(config.tp):
            v = tp_block(t, config.tp, tp_index)
            if v is not None:
                per_slot[(tp_index, stage)] = per_slot.get((tp_index, stage), 0) + v.numel
    return max(per_slot.values(), default=0) * model.state_multiplier


def _state_scale(model: ModelSpec) -> float:
    return model.state_multiplier / model.bytes_per_element


def layer_transfer_s(link_bytes: dict[tuple[int, int], int], cost: CostModel, scale: float) -> float:
    if not link_bytes:
        return 0.0
    return max(b * scale / cost.link_Bps(s, d) for (s, d), b in link_bytes.items())


def transfer_time_s(plan: TransferPlan, model: ModelSpec, cost: CostModel, world: int) -> float:
    """Layers serialize; within a layer the slowest link sets the pace, then a barrier.

    Plan bytes are scaled from parameter bytes to full persistent state, so the
    plan should be built over parameter tensors only.
    """
    scale = _state_scale(model)
    total = 0.0
    for layer in sorted(plan.tasks_by_layer):
        total += layer_transfer_s(plan.layer_link_bytes(layer), cost, scale) + cost.collective_s(world)
    return total


def transfer_state_bytes(plan: TransferPlan, model: ModelSpec) -> float:
    scale = _state_scale(model)
    return sum(t.byte_size for t in plan.tasks if not t.is_local) * scale


def parameter_only(model: ModelSpec) -> ModelSpec:
    if all(t.role is TensorRole.PARAMETER for t in model.tensors):
        return model
    return ModelSpec(model.num_layers, tuple(t for t in model.tensors if t.role is TensorRole.PARAMETER),
                     model.bytes_per_element, model.state_multiplier, model.name)
