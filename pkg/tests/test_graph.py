import math

import numpy as np
import pytest

from denseplan import ops
from denseplan.alloctrace import pool_capacities, predict_peak_elements
from denseplan.densenet import DenseNetConfig, preset
from denseplan.errors import ConfigError, ProtocolError, ShapeError
from denseplan.graph import (
    ExecutionStrategy, NodeKind, backward, build_plan, forward, loss_grad_buffer, step_trace,
)
from denseplan.tensor import ArenaTag, wrap

STRATEGIES = list(ExecutionStrategy)


def _batch(cfg, n=2, hw=8, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((n, cfg.in_channels, hw, hw)), rng.integers(0, cfg.num_classes, n)


def test_strategy_parse():
    assert ExecutionStrategy.parse("shared_all") is ExecutionStrategy.SHARED_ALL
    assert ExecutionStrategy.parse("naive") is ExecutionStrategy.NAIVE
    with pytest.raises(ValueError):
        ExecutionStrategy.parse("gpu")


def test_node_sequence_of_one_layer_model():
    cfg = DenseNetConfig((1,), 2, initial_channels=2, num_classes=3)
    plan = build_plan(cfg, "naive", 1, (3, 4, 4))
    names = [n.name for n in plan.nodes]
    assert names == [
        "stem.conv", "block0.layer0.concat", "block0.layer0.bn1", "block0.layer0.relu1", "block0.layer0.conv1",
        "head.concat", "head.bn", "head.relu", "head.pool", "head.linear", "head.loss",
    ]
    assert plan.kinds()[-1] is NodeKind.LOSS


def test_storage_classes_under_shared_all():
    plan = build_plan(preset("desk"), "shared-all", 2, (3, 8, 8))
    for node in plan.nodes:
        if node.kind is NodeKind.CONCAT:
            assert node.storage_class is ArenaTag.SHARED1 and node.rematerializable
        elif node.kind in (NodeKind.BATCHNORM, NodeKind.RELU):
            assert node.storage_class is ArenaTag.SHARED2 and node.rematerializable
        elif node.kind in (NodeKind.CONV, NodeKind.POOL, NodeKind.LINEAR):
            assert node.storage_class is ArenaTag.FEATURE_OWNED and not node.rematerializable


def test_naive_owns_everything():
    plan = build_plan(preset("desk"), "naive", 2, (3, 8, 8))
    assert all(n.storage_class is ArenaTag.FEATURE_OWNED for n in plan.nodes)
    assert plan.pool.regions() == []


def test_shared1_fits_widest_layer_concat():
    # batch * (c0 + (m-1)k) * h * w for the last layer concat of a single block
    m, k, c0, n, hw = 32, 48, 96, 1, 4
    cfg = DenseNetConfig((m,), k, initial_channels=c0, num_classes=2)
    layer_max = max(node.out_shape.element_count for node in
                    build_plan(cfg, "shared-all", n, (3, hw, hw)).nodes
                    if node.kind is NodeKind.CONCAT and node.name.startswith("block"))
    assert layer_max == n * (c0 + (m - 1) * k) * hw * hw
    caps = pool_capacities(cfg, n, hw, hw)
    # the head concat carries one more feature map; the pool must hold it too
    assert caps["shared1"] == n * (c0 + m * k) * hw * hw


def test_pools_are_allocated_at_build_time():
    cfg = preset("desk")
    plan = build_plan(cfg, "shared-all", 2, (3, 8, 8))
    caps = pool_capacities(cfg, 2, 8, 8)
    assert plan.pool.shared1.capacity == caps["shared1"]
    assert plan.accountant.live[ArenaTag.SHARED1] == caps["shared1"] * 8
    assert plan.accountant.live[ArenaTag.SHARED_GRAD] == 8 * (caps["grad_acc"] + caps["grad_a"] + caps["grad_b"])


def test_zero_input_zero_head_loss_is_log_k():
    cfg = preset("desk")
    plan = build_plan(cfg, "shared-all", 2, (3, 8, 8), zero_head=True)
    res = step_trace(plan, np.zeros((2, 3, 8, 8)), np.array([0, 1]))
    assert math.isclose(res.loss, math.log(cfg.num_classes), rel_tol=1e-12)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_strategies_bitwise_equal(strategy):
    cfg = preset("desk")
    x, y = _batch(cfg)
    ref = step_trace(build_plan(cfg, "naive", 2, x.shape, seed=3), x, y)
    ref_grads = {k: v.copy() for k, v in ref.grads.items()}
    res = step_trace(build_plan(cfg, strategy, 2, x.shape, seed=3), x, y)
    assert res.loss == ref.loss
    assert np.array_equal(res.logits, ref.logits)
    for k in ref_grads:
        assert np.array_equal(res.grads[k], ref_grads[k]), k


def test_shared_all_survives_pool_poisoning():
    cfg = preset("desk")
    x, y = _batch(cfg)
    clean = step_trace(build_plan(cfg, "shared-all", 2, x.shape), x, y)
    clean_grads = {k: v.copy() for k, v in clean.grads.items()}
    dirty = step_trace(build_plan(cfg, "shared-all", 2, x.shape), x, y, poison_pools=True)
    assert dirty.loss == clean.loss
    assert all(np.array_equal(dirty.grads[k], clean_grads[k]) for k in clean_grads)


def test_train_and_eval_differ_and_eval_is_repeatable():
    cfg = preset("desk")
    x, _ = _batch(cfg)
    plan = build_plan(cfg, "shared-all", 2, x.shape)
    train = forward(plan, x, ops.Mode.TRAIN)
    t_logits = train.logits.data.copy()
    train.state.release()
    e1 = forward(plan, x, ops.Mode.EVAL)
    a = e1.logits.data.copy()
    e1.state.release()
    e2 = forward(plan, x, ops.Mode.EVAL)
    assert np.array_equal(a, e2.logits.data)
    assert not np.allclose(a, t_logits)
    e2.state.release()


def test_protocol_errors():
    cfg = preset("desk")
    x, y = _batch(cfg)
    plan = build_plan(cfg, "naive", 2, x.shape)
    with pytest.raises(ProtocolError):
        backward(plan, None, wrap(np.zeros((2, 10, 1, 1))))
    ev = forward(plan, x, ops.Mode.EVAL)
    with pytest.raises(ProtocolError):
        backward(plan, ev.state, wrap(np.zeros((2, 10, 1, 1))))
    ev.state.release()
    fwd = forward(plan, x)
    _, g = ops.softmax_xent(fwd.logits, y, grad_out=loss_grad_buffer(plan, fwd.state))
    backward(plan, fwd.state, g)
    with pytest.raises(ProtocolError):
        backward(plan, fwd.state, g)
    fwd.state.release()
    with pytest.raises(ProtocolError):
        backward(plan, fwd.state, g)


def test_shape_errors():
    cfg = preset("desk")
    with pytest.raises(ShapeError):
        build_plan(cfg, "naive", 2, (1, 8, 8))
    with pytest.raises(ShapeError):
        build_plan(cfg, "naive", 2, (3, 3, 8, 8))
    plan = build_plan(cfg, "naive", 2, (3, 8, 8))
    with pytest.raises(ShapeError):
        forward(plan, np.zeros((2, 3, 4, 4)))


def test_unknown_strategy_and_bad_batch():
    with pytest.raises(ValueError):
        build_plan(preset("desk"), "magic", 2, (3, 8, 8))
    with pytest.raises((ConfigError, ShapeError)):
        build_plan(preset("desk"), "naive", 0, (3, 8, 8))


def test_memory_ordering_and_prediction():
    cfg = DenseNetConfig((6, 6, 6), 12)
    x, y = _batch(cfg, n=2, hw=16)
    peaks = {}
    for s in STRATEGIES:
        plan = build_plan(cfg, s, 2, x.shape)
        res = step_trace(plan, x, y)
        peaks[s] = res.stats.total_feature_peak_bytes
        assert peaks[s] == predict_peak_elements(cfg, s, 2, (16, 16)).feature_bytes(8)
    assert peaks[ExecutionStrategy.SHARED_ALL] < peaks[ExecutionStrategy.SHARED_GRADIENT] < peaks[ExecutionStrategy.NAIVE]


def test_step_releases_everything_it_owned():
    cfg = preset("desk")
    x, y = _batch(cfg)
    for s in STRATEGIES:
        plan = build_plan(cfg, s, 2, x.shape)
        before = dict(plan.accountant.live)
        step_trace(plan, x, y)
        assert plan.accountant.live == before


def test_shared_all_recomputes_every_concat_and_bn_once():
    cfg = DenseNetConfig((3, 3), 4)
    x, y = _batch(cfg)
    plan = build_plan(cfg, "shared-all", 2, x.shape)
    res = step_trace(plan, x, y)
    for node in plan.nodes:
        if node.kind in (NodeKind.CONCAT, NodeKind.BATCHNORM):
            assert res.trace.counts[node.id].recompute == 1, node.name
        if node.kind in (NodeKind.CONV, NodeKind.POOL, NodeKind.LINEAR):
            assert res.trace.counts[node.id].recompute == 0, node.name
    naive = step_trace(build_plan(cfg, "naive", 2, x.shape), x, y)
    assert naive.trace.total("recompute") == 0


def test_state_dict_round_trip():
    cfg = preset("desk")
    a = build_plan(cfg, "naive", 2, (3, 8, 8), seed=1)
    b = build_plan(cfg, "shared-all", 2, (3, 8, 8), seed=2)
    b.load_state_dict(a.state_dict())
    x, y = _batch(cfg)
    assert step_trace(a, x, y).loss == step_trace(b, x, y).loss
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})
