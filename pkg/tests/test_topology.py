import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_handoff.topology import (REPLICATED, ModelSpec, ParallelConfig, ShardView, TensorSpec, TopologyError,
                                      block_bounds, owners, split_layers, validate_config, view)

from helpers import configs, models, oracle_block, oracle_owner_map, oracle_stage, toy


def W(shape=(1024, 1024), axis=1, layer=0):
    return TensorSpec("W", layer, shape, axis)


# --- view ----------------------------------------------------------------------


def test_view_column_block_matches_oracle():
    cfg = ParallelConfig.create(4, 1, 1, 1)
    v = view(W(), cfg, cfg.rank_at(0, 0, 0))
    assert v.bounds == ((0, 1024), oracle_block(1024, 4, 0)) == ((0, 1024), (0, 256))


def test_view_unsharded_config_is_full_for_every_rank():
    cfg = ParallelConfig.create(1, 1, 3, 1)
    for r in cfg.ranks:
        assert view(W(), cfg, r) == ShardView.full((1024, 1024))


def test_view_absent_when_stage_does_not_host_layer():
    cfg = ParallelConfig(0, 1, 2, 1, (0, 1), (0, 0, 0, 0, 1, 1, 1, 1))
    assert view(W(layer=5), cfg, 0) is None
    assert view(W(layer=5), cfg, 1) is not None


def test_view_errors():
    cfg = ParallelConfig.create(2, 1, 1, 1)
    with pytest.raises(TopologyError):
        view(W(), cfg, 99)
    with pytest.raises(TopologyError):
        view(W(layer=3), cfg, 0)


@pytest.mark.parametrize("length,parts", [(10, 3), (7, 4), (8, 8), (5, 8), (1024, 4), (9, 2)])
def test_block_rule_matches_elementwise_oracle(length, parts):
    for i in range(parts):
        assert block_bounds(length, parts, i) == oracle_block(length, parts, i)


@pytest.mark.parametrize("layers,pp", [(8, 3), (44, 4), (5, 5), (96, 7), (3, 1)])
def test_split_layers_matches_oracle(layers, pp):
    got = split_layers(layers, pp)
    assert list(got) == [oracle_stage(layers, pp, l) for l in range(layers)]


# --- owners -----------------------------------------------------------------------


def test_owners_tp4_disjoint_and_covering_8x8():
    t = TensorSpec("t", 0, (8, 8), 0)
    cfg = ParallelConfig.create(4, 1, 2, 1)
    own = owners(t, cfg)
    assert len(own) == 8
    for d in range(2):
        group = [own[cfg.rank_at(i, 0, d)] for i in range(4)]
        cells = [idx for v in group for idx in itertools.product(*(range(lo, hi) for lo, hi in v.bounds))]
        assert sorted(cells) == sorted(itertools.product(range(8), range(8)))


def test_owners_replicated_dp2():
    t = TensorSpec("ln", 0, (8,), REPLICATED)
    cfg = ParallelConfig.create(1, 1, 2, 1)
    assert list(owners(t, cfg).values()) == [ShardView.full((8,))] * 2


def test_owners_only_hosting_stage():
    t = TensorSpec("t", 5, (8, 8), 0)
    cfg = ParallelConfig.create(2, 4, 1, 8)
    assert set(owners(t, cfg)) == set(cfg.stage_ranks(2))


# --- validate_config --------------------------------------------------------------------


def test_validate_table_config_ok():
    m = toy(layers=4, dims=(16, 16))
    assert validate_config(ParallelConfig.create(4, 2, 4, 4), m) == []


def test_validate_degree_product_mismatch():
    m = toy(layers=4)
    cfg = ParallelConfig(0, 3, 2, 4, tuple(range(32)), split_layers(4, 2))
    problems = validate_config(cfg, m)
    assert any("!= 32" in p for p in problems)


def test_validate_missing_layer():
    m = toy(layers=8)
    cfg = ParallelConfig(0, 1, 1, 1, (0,), (0,) * 7)
    assert any("missing layers [7]" in p for p in validate_config(cfg, m))


@pytest.mark.parametrize("cfg,needle", [
    (ParallelConfig(0, 2, 1, 1, (0, 0), (0, 0)), "unique"),
    (ParallelConfig(0, 1, 2, 1, (0, 1), (1, 0)), "contiguous"),
    (ParallelConfig(0, 1, 3, 1, (0, 1, 2), (0, 1)), "no layers"),
    (ParallelConfig(0, 16, 1, 1, tuple(range(16)), (0, 0)), "< tp=16"),
])
def test_validate_violations(cfg, needle):
    problems = validate_config(cfg, toy(layers=2))
    assert any(needle in p for p in problems), problems


def test_tensor_spec_rejects_bad_axis_and_dims():
    with pytest.raises(TopologyError):
        TensorSpec("x", 0, (4, 4), 2)
    with pytest.raises(TopologyError):
        TensorSpec("x", 0, (4, 0), 0)


def test_model_spec_rejects_layer_out_of_range():
    with pytest.raises(TopologyError):
        ModelSpec(2, (TensorSpec("x", 2, (4,), 0),))


def test_total_state_bytes_without_data():
    m = toy(layers=2, dims=(8, 8))
    assert m.total_state_bytes() == (2 * (64 + 64 + 8)) * 16.0


# --- properties ---------------------------------------------------------------------------


@settings(max_examples=60)
@given(st.data())
def test_exactly_once_coverage_per_replica(data):
    model = data.draw(models(max_layers=3, max_dim=10, max_ndim=2))
    cfg = data.draw(configs(model, max_world=16))
    for t in model.tensors:
        expected = oracle_owner_map(t, cfg, model.num_layers)
        own = owners(t, cfg)
        for idx, holders in expected.items():
            got = sorted(r for r, v in own.items() if v.contains_index(idx))
            assert got == sorted(holders)
            # exactly one holder per DP replica
            assert len(holders) == cfg.dp * (cfg.tp if t.is_replicated or cfg.tp == 1 else 1)


@settings(max_examples=40)
@given(st.data())
def test_replicas_have_identical_views(data):
    model = data.draw(models(max_layers=4))
    cfg = data.draw(configs(model))
    for t in model.tensors:
        stage = cfg.stage_of(t.layer)
        for ti in range(cfg.tp):
            views = {view(t, cfg, cfg.rank_at(ti, stage, d)) for d in range(cfg.dp)}
            assert len(views) == 1


@settings(max_examples=30)
@given(st.data())
def test_view_is_pure(data):
    model = data.draw(models(max_layers=3))
    cfg = data.draw(configs(model))
    t = model.tensors[0]
    assert [view(t, cfg, r) for r in cfg.ranks] == [view(t, cfg, r) for r in cfg.ranks]


def test_coords_are_unique():
    cfg = ParallelConfig.create(2, 3, 4, 6)
    coords = {cfg.coord(r) for r in cfg.ranks}
    assert len(coords) == cfg.world_size
