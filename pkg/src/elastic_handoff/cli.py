"""Command-line entry point: plan, verify, simulate and calibrate.

Exit codes: 0 success, 1 validation error, 2 verification mismatch, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .config import ConfigError, RunConfig, cost_model_yaml, load_bundled, load_run_config
from .executor import (DEFAULT_STAGING_BYTES, IntegrityError, LoopbackTransport, ShardStore, TransferAborted,
                       compare_stores, execute_plan, gather_reslice_reference, seeded_tensors)
from .planner import PlanError, TransferPlan, TransferTask, compute_transfer_plan, plan_cost_summary, verify_plan
from .simulator import PhaseTrace, ScenarioError, SimResult, Strategy, calibrate, run_scenario
from .topology import ParallelConfig, TopologyError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_MISMATCH = 2
EXIT_IO = 3

# verify materializes every tensor several times; refuse anything bigger
VERIFY_MAX_BYTES = 256 << 20

BUNDLED_PREFIX = "bundled:"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(path: str, seed: Optional[int] = None) -> RunConfig:
    try:
        if path.startswith(BUNDLED_PREFIX):
            return load_bundled(path[len(BUNDLED_PREFIX):], seed=seed)
        return load_run_config(path, seed=seed)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    except FileNotFoundError as exc:
        if path.startswith(BUNDLED_PREFIX):
            raise CliError(f"no bundled config {path[len(BUNDLED_PREFIX):]!r}", EXIT_INVALID) from None
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _pair(rc: RunConfig, src: str, dst: str) -> tuple[ParallelConfig, ParallelConfig]:
    try:
        old, new = rc.config(src), rc.config(dst)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    if new.generation_id == old.generation_id:
        # same named config on both sides: an in-place no-op transition
        new = new.with_generation(old.generation_id + 1)
    return old, new


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _plan(rc: RunConfig, old: ParallelConfig, new: ParallelConfig) -> TransferPlan:
    try:
        return compute_transfer_plan(old, new, rc.model)
    except (PlanError, TopologyError) as exc:
        raise CliError(str(exc), EXIT_INVALID) from None


# --- plan --------------------------------------------------------------------


def cmd_plan(args) -> int:
    rc = _load(args.config)
    old, new = _pair(rc, args.src, args.dst)
    plan = _plan(rc, old, new)
    text = plan.to_text()
    if args.out:
        _write(Path(args.out), text)
    elif not args.quiet:
        sys.stdout.write(text)
    cost = plan_cost_summary(plan)
    print(f"tasks={cost.task_count} total_bytes={cost.total_bytes} max_link_bytes={cost.max_link_bytes} "
          f"pair_checks={plan.pair_checks}", file=sys.stderr if not args.out and not args.quiet else sys.stdout)
    return EXIT_OK


# --- verify ------------------------------------------------------------------

MUTATIONS = ("drop", "duplicate", "shift")


def mutate_plan(plan: TransferPlan, how: str) -> TransferPlan:
    """Return a copy of ``plan`` with one task broken (fault injection)."""
    layers = {k: list(v) for k, v in plan.tasks_by_layer.items()}
    remote = [(k, i) for k, v in layers.items() for i, t in enumerate(v) if not t.is_local]
    candidates = remote or [(k, i) for k, v in layers.items() for i in range(len(v))]
    if not candidates:
        raise CliError("plan has no tasks to mutate", EXIT_INVALID)
    layer, i = candidates[0]
    task = layers[layer][i]
    if how == "drop":
        del layers[layer][i]
    elif how == "duplicate":
        layers[layer].insert(i, task)
    elif how == "shift":
        # same shape, one element further along the last axis of the source
        b = task.bounds.bounds
        lo, hi = b[-1]
        shifted = type(task.bounds)(b[:-1] + ((lo + 1, hi + 1),))
        layers[layer][i] = TransferTask(task.tensor_id, task.layer, task.src_rank, task.dst_rank, shifted,
                                        task.byte_size)
    else:
        raise ValueError(how)
    return TransferPlan(plan.src_config_gen, plan.dst_config_gen, layers, plan.pair_checks)


def cmd_verify(args) -> int:
    rc = _load(args.config)
    old, new = _pair(rc, args.src, args.dst)
    model = rc.model
    if model.parameter_count * model.bytes_per_element > VERIFY_MAX_BYTES:
        raise CliError(f"model {model.name} is too large to verify in memory "
                       f"(limit {VERIFY_MAX_BYTES} bytes)", EXIT_INVALID)
    if args.plan:
        try:
            plan = TransferPlan.from_text(Path(args.plan).read_text())
        except OSError as exc:
            raise CliError(f"cannot read {args.plan}: {exc}", EXIT_IO) from None
        except (PlanError, ValueError) as exc:
            raise CliError(f"{args.plan}: malformed plan: {exc}", EXIT_INVALID) from None
    else:
        plan = _plan(rc, old, new)
    if args.mutate:
        plan = mutate_plan(plan, args.mutate)

    problems = verify_plan(plan, old, new, model)
    for p in problems[:20]:
        print(f"plan: {p}")
    src = ShardStore.from_full(model, old, seeded_tensors(model, args.seed))
    expected = gather_reslice_reference(src, model, old, new)
    dst = ShardStore.allocate(model, new)
    try:
        report = execute_plan(plan, src, dst, LoopbackTransport(), args.staging_bytes, chunking=not args.no_chunking)
    except (IntegrityError, TransferAborted) as exc:
        print(f"execution failed: {exc}")
        return EXIT_MISMATCH
    cmp = compare_stores(dst, expected)
    print(f"max deviation {cmp.max_deviation:g}")
    print(f"mismatched_bytes={cmp.mismatched_bytes} bytes_moved={report.bytes_moved} "
          f"local_bytes={report.local_bytes} peak_staging_bytes={report.peak_staging_bytes} "
          f"staging_capacity={report.staging_capacity}")
    if problems or not cmp.exact:
        return EXIT_MISMATCH
    return EXIT_OK


# --- simulate ----------------------------------------------------------------


def _strategies(name: str) -> list[Strategy]:
    return list(Strategy) if name == "all" else [Strategy(name)]


def cmd_simulate(args) -> int:
    rc = _load(args.config, args.seed)
    if rc.scenario is None:
        raise CliError(f"{rc.source}: no scenario section", EXIT_INVALID)
    try:
        initial = rc.config(args.initial) if args.initial else rc.initial_config
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    scenario = rc.scenario
    results: list[SimResult] = []
    for strategy in _strategies(args.strategy):
        try:
            results.append(run_scenario(rc.model, initial, scenario, rc.cost, strategy))
        except (ScenarioError, TopologyError, ValueError) as exc:
            raise CliError(f"{rc.source}: {exc}", EXIT_INVALID) from None
    header = None
    rows = []
    for r in results:
        lines = r.summary_csv().splitlines()
        header = lines[0]
        rows.append(lines[1])
        s = r.summary()
        print(f"{s['strategy']:8s} goodput={s['goodput']:.4%} wasted_gpu_hours={s['wasted_gpu_hours']:.3f} "
              f"total_downtime_s={s['total_downtime_s']:.1f} events={s['events']}")
    if args.out:
        out = Path(args.out)
        for r in results:
            _write(out / f"events_{r.strategy.value}.csv", r.to_csv())
        _write(out / "summary.csv", "\n".join([header] + rows) + "\n")
    return EXIT_OK


# --- calibrate ---------------------------------------------------------------


def load_traces(path: str, rc: RunConfig) -> list[PhaseTrace]:
    """Traces file: ``traces: [{config: <name>, phases: {load: s, init: s, misc: s}}]``."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except yaml.YAMLError as exc:
        raise CliError(f"{path}: malformed YAML: {exc}", EXIT_INVALID) from None
    if not isinstance(data, dict) or set(data) - {"traces"}:
        raise CliError(f"{path}: expected a single 'traces' list", EXIT_INVALID)
    traces = []
    for i, t in enumerate(data.get("traces") or []):
        if not isinstance(t, dict) or set(t) != {"config", "phases"} or not isinstance(t["phases"], dict):
            raise CliError(f"{path}: trace {i} needs exactly 'config' and 'phases'", EXIT_INVALID)
        try:
            cfg = rc.config(t["config"])
        except ConfigError as exc:
            raise CliError(f"{path}: trace {i}: {exc}", EXIT_INVALID) from None
        phases = {}
        for k, v in t["phases"].items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise CliError(f"{path}: trace {i}: phase '{k}' must be a non-negative number", EXIT_INVALID)
            phases[str(k)] = float(v)
        traces.append(PhaseTrace(rc.model, cfg, phases))
    return traces


def cmd_calibrate(args) -> int:
    rc = _load(args.config)
    traces = load_traces(args.traces, rc)
    report = calibrate(rc.cost, traces, tolerance=args.tolerance)
    if not report.defined:
        print("divergence undefined: no usable traces")
    for (i, phase), err in sorted(report.divergence.items()):
        mark = "  FLAGGED" if (i, phase) in report.flagged else ""
        print(f"trace {i} {phase:6s} divergence {err:.4%}{mark}")
    if report.unresolved:
        print("unresolved phases: " + ", ".join(report.unresolved))
    text = cost_model_yaml(report.fitted)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- entry point -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; argparse's own code 2 means a mismatch here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elastic-handoff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?", default=BUNDLED_PREFIX + "default.yaml",
                        help="run-config YAML, or bundled:<name> (default: bundled:default.yaml)")

    sp = sub.add_parser("plan", help="compute a transfer plan between two named configs")
    with_config(sp)
    sp.add_argument("--from", dest="src", required=True)
    sp.add_argument("--to", dest="dst", required=True)
    sp.add_argument("--out", help="write the plan here instead of stdout")
    sp.add_argument("-q", "--quiet", action="store_true", help="print only the summary")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("verify", help="execute a plan on seeded data and compare with the reference")
    with_config(sp)
    sp.add_argument("--from", dest="src", required=True)
    sp.add_argument("--to", dest="dst", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--staging-bytes", type=_positive, default=DEFAULT_STAGING_BYTES)
    sp.add_argument("--no-chunking", action="store_true")
    sp.add_argument("--plan", help="verify this plan file instead of a freshly computed one")
    sp.add_argument("--mutate", choices=MUTATIONS, help="break one task before executing (fault injection)")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("simulate", help="run the scenario and write per-event CSVs")
    with_config(sp)
    sp.add_argument("--strategy", choices=["all"] + [s.value for s in Strategy], default="all")
    sp.add_argument("--initial", help="starting config (default: scenario.initial)")
    sp.add_argument("--seed", type=int, help="override scenario.seed (reshuffles generated events)")
    sp.add_argument("--out", help="directory for events_<strategy>.csv and summary.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="fit restart constants to measured phase traces")
    with_config(sp)
    sp.add_argument("traces", help="YAML file with measured phase totals")
    sp.add_argument("--tolerance", type=float, default=0.05)
    sp.add_argument("--out", help="write the fitted cost_model YAML here")
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
