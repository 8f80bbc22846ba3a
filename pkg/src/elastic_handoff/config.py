"""Run-config files: YAML with model, cluster, configs, scenario and cost_model sections.

Unknown keys are rejected and every error names the offending line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .costmodel import CostModel
from .models import GPT_SHAPES, gpt_model
from .simulator import INF, ElasticityScenario, Event, EventKind, alternating_scenario
from .topology import REPLICATED, ModelSpec, ParallelConfig, TensorSpec, TopologyError, validate_config


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: str = ""):
        self.line = line
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


@dataclass
class RunConfig:
    model: ModelSpec
    cost: CostModel
    configs: dict[str, ParallelConfig]
    scenario: Optional[ElasticityScenario] = None
    initial: Optional[str] = None
    source: str = ""
    nodes: Optional[int] = None
    raw: dict = field(default_factory=dict, repr=False)

    def config(self, name: str) -> ParallelConfig:
        try:
            return self.configs[name]
        except KeyError:
            raise ConfigError(f"unknown config '{name}' (known: {', '.join(sorted(self.configs))})") from None

    @property
    def initial_config(self) -> ParallelConfig:
        if self.initial is None:
            return next(iter(self.configs.values()))
        return self.config(self.initial)


# --- YAML with line numbers -----------------------------------------------------


class _Doc:
    """Plain Python values plus the source line of every mapping key."""

    def __init__(self, text: str, path: str):
        self.path = path
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                              mark.line + 1 if mark else None, path) from None
        self.data = self._build(node, ()) if node is not None else {}

    def _build(self, node, at: tuple):
        # a key line recorded by the parent mapping takes precedence
        self.lines.setdefault(at, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = k.value
                if key in out:
                    raise ConfigError(f"duplicate key '{key}'", k.start_mark.line + 1, self.path)
                self.lines[at + (key,)] = k.start_mark.line + 1
                out[key] = self._build(v, at + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(v, at + (i,)) for i, v in enumerate(node.value)]
        loader = yaml.SafeLoader("")
        try:
            return loader.construct_object(node)
        finally:
            loader.dispose()

    def line(self, at: tuple) -> Optional[int]:
        while at and at not in self.lines:
            at = at[:-1]
        return self.lines.get(at)

    def error(self, message: str, at: tuple) -> ConfigError:
        return ConfigError(message, self.line(at), self.path)


def _check_keys(doc: _Doc, obj, at: tuple, allowed, required=()):
    if not isinstance(obj, dict):
        raise doc.error(f"'{'.'.join(map(str, at)) or 'document'}' must be a mapping", at)
    for k in obj:
        if k not in allowed:
            raise doc.error(f"unknown key '{k}' in {'.'.join(map(str, at)) or 'document'}", at + (k,))
    for k in required:
        if k not in obj:
            raise doc.error(f"missing key '{k}' in {'.'.join(map(str, at)) or 'document'}", at)


def _number(doc: _Doc, value, at: tuple, *, integer=False, minimum=None) -> Any:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        value = INF
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if not ok or isinstance(value, bool):
        raise doc.error(f"'{at[-1]}' must be {'an integer' if integer else 'a number'}, got {value!r}", at)
    if minimum is not None and value < minimum:
        raise doc.error(f"'{at[-1]}' must be >= {minimum}, got {value}", at)
    return value


# --- sections ---------------------------------------------------------------------------

_TOP = ("model", "cluster", "configs", "scenario", "cost_model")
_MODEL = ("preset", "name", "layers", "hidden", "vocab", "tensors", "bytes_per_element", "state_multiplier")
_TENSOR = ("name", "shape", "shard_axis", "layer")
_CLUSTER = ("nodes", "gpus_per_node", "intra_node_bw_GBps", "inter_node_bw_GBps", "bandwidth_derating",
            "storage_bw_Gbps_per_gpu", "storage_aggregate_GBps")
_CONFIG = ("tp", "pp", "dp", "ranks", "first_rank", "layer_assignment")
_SCENARIO = ("duration_s", "regime", "seed", "checkpoint_interval", "iteration_time_s", "initial", "events",
             "generator")
_EVENT = ("time_s", "kind", "target", "warning_window_s")
_GENERATOR = ("interval_s", "configs", "jitter", "count", "kind", "warning_window_s")
_COST_FIELDS = tuple(f.name for f in dataclasses.fields(CostModel))


def _parse_model(doc: _Doc, sec: dict) -> ModelSpec:
    at = ("model",)
    _check_keys(doc, sec, at, _MODEL)
    bpe = _number(doc, sec.get("bytes_per_element", 2), at + ("bytes_per_element",), integer=True, minimum=1)
    mult = _number(doc, sec.get("state_multiplier", 16.0), at + ("state_multiplier",), minimum=0)
    if "preset" in sec:
        for k in ("layers", "hidden", "tensors"):
            if k in sec:
                raise doc.error(f"'{k}' cannot be combined with 'preset'", at + (k,))
        preset = sec["preset"]
        size = preset if isinstance(preset, (int, float)) else None
        if isinstance(preset, str):
            try:
                size = float(preset.lower().removeprefix("gpt-").removesuffix("b"))
            except ValueError:
                size = None
        size = int(size) if size is not None and float(size).is_integer() else size
        if size not in GPT_SHAPES:
            raise doc.error(f"unknown preset {preset!r}; known sizes {sorted(GPT_SHAPES)}", at + ("preset",))
        layers, hidden = GPT_SHAPES[size]
        vocab = _number(doc, sec.get("vocab", 50304), at + ("vocab",), integer=True, minimum=1)
        return gpt_model(layers, hidden, vocab=vocab, bytes_per_element=bpe, state_multiplier=mult,
                         name=str(sec.get("name", f"gpt-{size:g}b")))
    if "layers" not in sec:
        raise doc.error("model needs 'preset' or 'layers'", at)
    layers = _number(doc, sec["layers"], at + ("layers",), integer=True, minimum=1)
    if "hidden" in sec:
        if "tensors" in sec:
            raise doc.error("give either 'hidden' or 'tensors'", at + ("tensors",))
        hidden = _number(doc, sec["hidden"], at + ("hidden",), integer=True, minimum=1)
        vocab = _number(doc, sec.get("vocab", 50304), at + ("vocab",), integer=True, minimum=1)
        return gpt_model(layers, hidden, vocab=vocab, bytes_per_element=bpe, state_multiplier=mult,
                         name=str(sec.get("name", "")))
    tensors_sec = sec.get("tensors")
    if not isinstance(tensors_sec, list) or not tensors_sec:
        raise doc.error("'tensors' must be a non-empty list", at + ("tensors",))
    tensors = []
    for i, t in enumerate(tensors_sec):
        tat = at + ("tensors", i)
        _check_keys(doc, t, tat, _TENSOR, ("name", "shape"))
        shape = t["shape"]
        if not isinstance(shape, list) or not shape or not all(isinstance(d, int) and d > 0 for d in shape):
            raise doc.error("'shape' must be a list of positive integers", tat + ("shape",))
        axis = t.get("shard_axis", REPLICATED)
        if axis != REPLICATED and not (isinstance(axis, int) and 0 <= axis < len(shape)):
            raise doc.error(f"'shard_axis' must be an axis index or '{REPLICATED}'", tat + ("shard_axis",))
        per_layer = "layer" not in t
        targets = range(layers) if per_layer else [_number(doc, t["layer"], tat + ("layer",), integer=True,
                                                           minimum=0)]
        for layer in targets:
            if layer >= layers:
                raise doc.error(f"layer {layer} out of range", tat + ("layer",))
            tid = f"layers.{layer}.{t['name']}" if per_layer else str(t["name"])
            tensors.append(TensorSpec(tid, layer, tuple(shape), axis))
    try:
        return ModelSpec(layers, tuple(tensors), bpe, mult, str(sec.get("name", "custom")))
    except (ValueError, TopologyError) as exc:
        raise doc.error(str(exc), at) from None


def _parse_configs(doc: _Doc, sec: dict, model: ModelSpec) -> dict[str, ParallelConfig]:
    at = ("configs",)
    if not isinstance(sec, dict) or not sec:
        raise doc.error("'configs' must be a non-empty mapping of names to degrees", at)
    out = {}
    for gen, (name, c) in enumerate(sec.items()):
        cat = at + (name,)
        _check_keys(doc, c, cat, _CONFIG, ("tp", "pp", "dp"))
        tp, pp, dp = (_number(doc, c[k], cat + (k,), integer=True, minimum=1) for k in ("tp", "pp", "dp"))
        ranks = c.get("ranks")
        if ranks is not None and (not isinstance(ranks, list) or not all(isinstance(r, int) for r in ranks)):
            raise doc.error("'ranks' must be a list of integers", cat + ("ranks",))
        first = _number(doc, c.get("first_rank", 0), cat + ("first_rank",), integer=True, minimum=0)
        cfg = ParallelConfig.create(tp, pp, dp, model.num_layers, generation_id=gen, ranks=ranks, first_rank=first)
        if "layer_assignment" in c:
            la = c["layer_assignment"]
            if not isinstance(la, list) or not all(isinstance(s, int) for s in la):
                raise doc.error("'layer_assignment' must be a list of stage indices", cat + ("layer_assignment",))
            cfg = ParallelConfig(gen, tp, pp, dp, cfg.ranks, tuple(la))
        problems = validate_config(cfg, model)
        if problems:
            raise doc.error(f"config '{name}': " + "; ".join(problems), cat)
        out[name] = cfg
    return out


def _parse_cost(doc: _Doc, cluster: dict, sec: dict) -> tuple[CostModel, Optional[int]]:
    values = {}
    nodes = None
    if cluster:
        _check_keys(doc, cluster, ("cluster",), _CLUSTER)
        for k, v in cluster.items():
            if k == "nodes":
                nodes = _number(doc, v, ("cluster", k), integer=True, minimum=1)
            else:
                values[k] = _number(doc, v, ("cluster", k), integer=(k == "gpus_per_node"), minimum=0)
    if sec:
        _check_keys(doc, sec, ("cost_model",), _COST_FIELDS)
        for k, v in sec.items():
            if k in values:
                raise doc.error(f"'{k}' is set in both cluster and cost_model", ("cost_model", k))
            values[k] = _number(doc, v, ("cost_model", k), minimum=0)
    try:
        return CostModel(**values), nodes
    except ValueError as exc:
        raise doc.error(str(exc), ("cost_model",)) from None


def _parse_scenario(doc: _Doc, sec: dict, configs: dict[str, ParallelConfig],
                    seed_override: Optional[int] = None) -> tuple[ElasticityScenario, Optional[str]]:
    at = ("scenario",)
    _check_keys(doc, sec, at, _SCENARIO, ("duration_s",))
    duration = _number(doc, sec["duration_s"], at + ("duration_s",), minimum=0)
    seed = _number(doc, sec.get("seed", 0), at + ("seed",), integer=True)
    if seed_override is not None:
        seed = seed_override
    ckpt = _number(doc, sec.get("checkpoint_interval", 100), at + ("checkpoint_interval",), integer=True, minimum=1)
    it = sec.get("iteration_time_s")
    if it is not None:
        it = _number(doc, it, at + ("iteration_time_s",), minimum=0)
    regime = str(sec.get("regime", "custom"))
    initial = sec.get("initial")

    def resolve(name, where):
        if name not in configs:
            raise doc.error(f"unknown config '{name}'", where)
        return configs[name]

    if initial is not None:
        resolve(initial, at + ("initial",))

    def kind_of(value, where):
        try:
            return EventKind(value)
        except ValueError:
            raise doc.error(f"unknown event kind {value!r}; expected one of "
                            f"{', '.join(k.value for k in EventKind)}", where) from None

    if "events" in sec and "generator" in sec:
        raise doc.error("give either 'events' or 'generator'", at + ("generator",))
    if "generator" in sec:
        g = sec["generator"]
        gat = at + ("generator",)
        _check_keys(doc, g, gat, _GENERATOR, ("interval_s", "configs"))
        names = g["configs"]
        if not isinstance(names, list) or not names:
            raise doc.error("'configs' must list config names", gat + ("configs",))
        cfgs = [resolve(n, gat + ("configs", i)) for i, n in enumerate(names)]
        count = g.get("count")
        scenario = alternating_scenario(
            duration, _number(doc, g["interval_s"], gat + ("interval_s",), minimum=1e-9), cfgs,
            jitter=_number(doc, g.get("jitter", 0.0), gat + ("jitter",), minimum=0), seed=seed,
            warning_window_s=_number(doc, g.get("warning_window_s", INF), gat + ("warning_window_s",), minimum=0),
            kind=kind_of(g.get("kind", "planned"), gat + ("kind",)), regime=regime, checkpoint_interval=ckpt,
            iteration_time_s=it,
            count=None if count is None else _number(doc, count, gat + ("count",), integer=True, minimum=0))
        return scenario, initial
    events = []
    ev_sec = sec.get("events", []) or []
    if not isinstance(ev_sec, list):
        raise doc.error("'events' must be a list", at + ("events",))
    for i, e in enumerate(ev_sec):
        eat = at + ("events", i)
        _check_keys(doc, e, eat, _EVENT, ("time_s", "kind", "target"))
        kind = kind_of(e["kind"], eat + ("kind",))
        default_window = 0.0 if kind is EventKind.FAIL_STOP else INF
        window = _number(doc, e.get("warning_window_s", default_window), eat + ("warning_window_s",), minimum=0)
        events.append(Event(_number(doc, e["time_s"], eat + ("time_s",), minimum=0), kind,
                            resolve(e["target"], eat + ("target",)), window))
    scenario = ElasticityScenario(duration, events, regime, seed, ckpt, it)
    try:
        scenario.validate()
    except ValueError as exc:
        raise doc.error(str(exc), at + ("events",)) from None
    return scenario, initial


def parse_run_config(text: str, path: str = "<string>", *, seed: Optional[int] = None) -> RunConfig:
    """Parse a run config; ``seed`` replaces scenario.seed (and so reshuffles generated events)."""
    doc = _Doc(text, path)
    data = doc.data
    _check_keys(doc, data, (), _TOP, ("model", "configs"))
    model = _parse_model(doc, data["model"])
    cost, nodes = _parse_cost(doc, data.get("cluster") or {}, data.get("cost_model") or {})
    configs = _parse_configs(doc, data["configs"], model)
    if nodes is not None:
        capacity = nodes * cost.gpus_per_node
        for name, c in configs.items():
            if max(c.ranks) >= capacity:
                raise doc.error(f"config '{name}' uses rank {max(c.ranks)} but the cluster has {capacity} GPUs",
                                ("configs", name))
    scenario = initial = None
    if data.get("scenario") is not None:
        scenario, initial = _parse_scenario(doc, data["scenario"], configs, seed)
    return RunConfig(model, cost, configs, scenario, initial, path, nodes, data)


def load_run_config(path, *, seed: Optional[int] = None) -> RunConfig:
    p = Path(path)
    return parse_run_config(p.read_text(), str(p), seed=seed)


def bundled_config_text(name: str = "default.yaml") -> str:
    return resources.files("elastic_handoff").joinpath("data", name).read_text()


def load_bundled(name: str = "default.yaml", *, seed: Optional[int] = None) -> RunConfig:
    return parse_run_config(bundled_config_text(name), f"<bundled {name}>", seed=seed)


def cost_model_yaml(cost: CostModel) -> str:
    return yaml.safe_dump({"cost_model": cost.as_dict()}, sort_keys=False)
