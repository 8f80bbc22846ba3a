"""Live reconfiguration of distributed training jobs: resharding plans, a
layer-streamed executor, the generation state machine and a discrete-event
simulator comparing live handoff with checkpoint-based restarts."""

from .costmodel import CostModel
from .executor import ShardStore, execute_plan, gather_reslice_reference
from .models import gpt_by_size, gpt_model, toy_model
from .planner import TransferPlan, TransferTask, compute_transfer_plan, plan_cost_summary, verify_plan
from .runtime import GenerationStateMachine, Phase
from .simulator import ElasticityScenario, Event, EventKind, SimResult, Strategy, run_scenario
from .topology import ModelSpec, ParallelConfig, ShardView, TensorSpec, owners, view

__version__ = "0.1.0"

__all__ = [
    "CostModel", "ShardStore", "execute_plan", "gather_reslice_reference", "gpt_by_size", "gpt_model",
    "toy_model", "TransferPlan", "TransferTask", "compute_transfer_plan", "plan_cost_summary", "verify_plan",
    "GenerationStateMachine", "Phase", "ElasticityScenario", "Event", "EventKind", "SimResult", "Strategy",
    "run_scenario", "ModelSpec", "ParallelConfig", "ShardView", "TensorSpec", "owners", "view",
]
