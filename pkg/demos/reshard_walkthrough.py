"""Move a small model from TP2 x PP2 to TP4 x PP1 and check every byte.

    python3 demos/reshard_walkthrough.py
"""
from elastic_handoff import ParallelConfig, compute_transfer_plan, plan_cost_summary, verify_plan
from elastic_handoff.config import load_bundled
from elastic_handoff.executor import (RecordingTransport, ShardStore, compare_stores, execute_plan,
                                      gather_reslice_reference, seeded_tensors)


def main():
    rc = load_bundled("toy.yaml")
    model = rc.model
    old = rc.config("tp2pp2")
    new = ParallelConfig.create(4, 1, 1, model.num_layers, generation_id=old.generation_id + 1)

    plan = compute_transfer_plan(old, new, model)
    cost = plan_cost_summary(plan)
    print(f"{cost.task_count} tasks, {cost.total_bytes} bytes, busiest link {cost.max_link_bytes} bytes")
    print("plan problems:", verify_plan(plan, old, new, model) or "none")

    for task in plan.tasks_by_layer[0][:5]:
        print(f"  layer 0  {task.tensor_id:22s} rank {task.src_rank} -> {task.dst_rank}  {task.bounds}")

    src = ShardStore.from_full(model, old, seeded_tensors(model, seed=1))
    dst = ShardStore.allocate(model, new)
    transport = RecordingTransport()
    report = execute_plan(plan, src, dst, transport, staging_bytes=512)
    layers = [e.layer for e in transport.trace]
    print(f"sent {report.bytes_moved} bytes in {len(transport.trace)} messages; layers in order: {layers == sorted(layers)}")
    print(f"staging peak {report.peak_staging_bytes} of {report.staging_capacity} bytes")

    cmp = compare_stores(dst, gather_reslice_reference(src, model, old, new))
    print(f"max deviation against gather-and-reslice: {cmp.max_deviation}")


if __name__ == "__main__":
    main()
