"""Shared generators and brute-force oracles for the test suite."""
import itertools
import math
import random

from hypothesis import strategies as st

from elastic_handoff.topology import REPLICATED, ModelSpec, ParallelConfig, TensorSpec


def toy(layers=2, dims=(8, 8), bpe=2):
    tensors = []
    for l in range(layers):
        tensors += [
            TensorSpec(f"l{l}.col", l, dims, 0),
            TensorSpec(f"l{l}.row", l, dims, 1),
            TensorSpec(f"l{l}.ln", l, (dims[1],), REPLICATED),
        ]
    return ModelSpec(layers, tuple(tensors), bpe, 16.0, "toy")


def oracle_block(length, parts, index):
    """Block rule written out element by element: owner of i is i // ceil(length / parts)."""
    size = -(-length // parts)
    members = [i for i in range(length) if i // size == index]
    return (members[0], members[-1] + 1) if members else None


def oracle_stage(num_layers, pp, layer):
    """Stage of ``layer`` when earlier stages take ceil(L/pp) and later ones floor."""
    sizes = [num_layers // pp + (1 if s < num_layers % pp else 0) for s in range(pp)]
    edge = 0
    for s, n in enumerate(sizes):
        edge += n
        if layer < edge:
            return s
    raise AssertionError("layer out of range")


def oracle_rank(config, t, p, d):
    """Rank ids are laid out TP-fastest, then PP, then DP."""
    return config.ranks[(d * config.pp + p) * config.tp + t]


def oracle_owner_map(tensor, config, num_layers):
    """index tuple -> ranks holding it, by direct enumeration."""
    stage = oracle_stage(num_layers, config.pp, tensor.layer)
    out = {}
    for idx in itertools.product(*(range(n) for n in tensor.shape)):
        holders = []
        for d in range(config.dp):
            for t in range(config.tp):
                if tensor.tp_shard_axis == REPLICATED or config.tp == 1:
                    ok = True
                else:
                    ok = oracle_block(tensor.shape[tensor.tp_shard_axis], config.tp, t)
                    ok = ok is not None and ok[0] <= idx[tensor.tp_shard_axis] < ok[1]
                if ok:
                    holders.append(oracle_rank(config, t, stage, d))
        out[idx] = holders
    return out


def divisors_upto(n, cap):
    return [d for d in range(1, cap + 1) if n % d == 0]


@st.composite
def models(draw, max_layers=8, max_dim=64, max_ndim=3):
    layers = draw(st.integers(1, max_layers))
    bpe = draw(st.sampled_from([1, 2, 4]))
    tensors = []
    per_layer = draw(st.integers(1, 3))
    for l in range(layers):
        for k in range(per_layer):
            ndim = draw(st.integers(1, max_ndim))
            shape = tuple(draw(st.integers(1, max_dim if ndim == 1 else 12)) for _ in range(ndim))
            axis = draw(st.sampled_from([REPLICATED] + list(range(ndim))))
            tensors.append(TensorSpec(f"l{l}.t{k}", l, shape, axis))
    return ModelSpec(layers, tuple(tensors), bpe, 16.0, "hyp")


def max_tp(model):
    lengths = [t.shape[t.tp_shard_axis] for t in model.tensors if t.tp_shard_axis != REPLICATED]
    return min(lengths, default=8)


@st.composite
def configs(draw, model, max_world=16, generation_id=0, first_rank=None):
    tp = draw(st.integers(1, min(max_tp(model), max_world, 8)))
    pp = draw(st.integers(1, min(model.num_layers, max_world // tp)))
    dp = draw(st.integers(1, max(1, max_world // (tp * pp))))
    world = tp * pp * dp
    if first_rank is None:
        first_rank = draw(st.integers(0, max_world - world)) if world <= max_world else 0
    return ParallelConfig.create(tp, pp, dp, model.num_layers, generation_id=generation_id, first_rank=first_rank)


@st.composite
def transitions(draw, max_layers=8, max_world=16):
    """(model, old, new) over in-place, scale-out and scale-in shapes."""
    model = draw(models(max_layers=max_layers))
    old = draw(configs(model, max_world, 0, first_rank=0))
    new = draw(configs(model, max_world, 1, first_rank=0))
    return model, old, new


def random_transitions(n, seed=0, max_layers=8, max_world=16):
    """Deterministic list of (model, old, new) with a fixed class mix for the acceptance run."""
    rng = random.Random(seed)
    out = []
    kinds = ["in_place", "scale_out", "scale_in"]
    while len(out) < n:
        kind = kinds[len(out) % 3]
        layers = rng.randint(1, max_layers)
        bpe = rng.choice([1, 2, 4])
        tensors = []
        for l in range(layers):
            for k in range(rng.randint(1, 3)):
                ndim = rng.randint(1, 3)
                shape = tuple(rng.randint(4, 64) if ndim == 1 else rng.randint(2, 16) for _ in range(ndim))
                axis = rng.choice([REPLICATED] + list(range(ndim)))
                tensors.append(TensorSpec(f"l{l}.t{k}", l, shape, axis))
        model = ModelSpec(layers, tuple(tensors), bpe, 16.0, f"rand{len(out)}")
        cap = max_tp(model)

        def pick(world_cap):
            while True:
                tp = rng.choice([d for d in (1, 2, 3, 4, 8) if d <= min(cap, world_cap)])
                pp = rng.randint(1, min(layers, world_cap // tp))
                dp = rng.randint(1, max(1, world_cap // (tp * pp)))
                if tp * pp * dp <= world_cap:
                    return tp, pp, dp
        a = pick(max_world)
        b = pick(max_world)
        wa, wb = math.prod(a), math.prod(b)
        if kind == "in_place" and wa != wb:
            continue
        if kind == "scale_out" and not wb > wa:
            continue
        if kind == "scale_in" and not wb < wa:
            continue
        if a == b:
            continue
        old = ParallelConfig.create(*a, layers, generation_id=0)
        new = ParallelConfig.create(*b, layers, generation_id=1)
        out.append((kind, model, old, new))
    return out
