"""A day of resizes between 32 and 16 GPUs under each recovery strategy.

    python3 demos/volatile_day.py [--window SECONDS]

A finite warning window makes some handoffs miss their deadline and fall
back to a checkpoint restart.
"""
import argparse
import logging

from elastic_handoff import CostModel, Strategy, gpt_by_size, run_scenario
from elastic_handoff.simulator import day_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--window", type=float, default=float("inf"), help="warning window per event (s)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    model = gpt_by_size(14)
    initial, scenario = day_scenario(model, warning_window_s=args.window)
    cost = CostModel()
    print(f"{len(scenario.events)} events over {scenario.duration_s / 3600:.0f} h")
    for strategy in Strategy:
        r = run_scenario(model, initial, scenario, cost, strategy)
        fallbacks = sum(e.fallback for e in r.events)
        print(f"{strategy.value:8s} goodput {r.goodput_fraction:7.2%}  pause {r.total_downtime_s / 60:6.1f} min  "
              f"wasted {r.wasted_gpu_hours:5.1f} GPU-h  fallbacks {fallbacks}")


if __name__ == "__main__":
    main()
