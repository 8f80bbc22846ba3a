"""Per-event downtime of checkpoint restarts versus a live handoff, by model size.

    python3 demos/restart_vs_handoff.py
"""
from elastic_handoff import CostModel, gpt_by_size
from elastic_handoff.simulator import (Strategy, event_downtime, large_scale_configs, live_event_latency,
                                       regime_configs, restart_latency, speedup_report)


def main():
    cost = CostModel()
    print(f"{'model':10s} {'live s':>8s} {'cold s':>8s} {'reshape s':>10s} {'cold/live':>10s}")
    for row in speedup_report([1.7, 7, 14, 30], cost):
        print(f"{row.model:10s} {row.reference_s:8.2f} {row.baselines['cold']:8.1f} "
              f"{row.baselines['reshape']:10.1f} {row.ratio(Strategy.COLD):10.1f}")

    m = gpt_by_size(14)
    full, half = regime_configs(m)
    print("\nstorage sweep, 14B on 32 GPUs")
    for bw in (0.25, 0.5, 1.0, 2.0):
        c = cost.replace(storage_bw_Gbps_per_gpu=bw)
        bd = restart_latency(Strategy.COLD, full, m, c)
        live = live_event_latency(full, half, m, c)
        print(f"  {bw:4.2f} Gb/s  cold {bd.total_s:6.1f} s (load {bd.load_s:5.1f})  live {live.pause_s:.2f} s")

    m70 = gpt_by_size(70)
    old, new = large_scale_configs(m70)
    cold = event_downtime(Strategy.COLD, old, new, m70, cost)
    live = event_downtime(Strategy.LIVE, old, new, m70, cost)
    print(f"\n70B, {old.world_size} -> {new.world_size} GPUs: cold {cold:.0f} s, live {live:.1f} s ({cold / live:.0f}x)")


if __name__ == "__main__":
    main()
