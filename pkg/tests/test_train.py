import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from denseplan import ops
from denseplan.densenet import preset
from denseplan.errors import ConfigError, CorruptCheckpointError, FormatError, RangeError, ShapeError
from denseplan.tensor import wrap
from denseplan.train import (
    DataSource, LrSchedule, OptimizerState, TrainConfig, load_checkpoint, load_cifar10_batch, load_cifar10_dir,
    lr_at, save_checkpoint, sgd_step, synth_dataset, train,
)


# -- schedules -------------------------------------------------------------

def test_cosine_examples():
    s = LrSchedule.cosine(100)
    assert lr_at(s, 0) == 0.1
    assert math.isclose(lr_at(s, 50), 0.05, rel_tol=1e-15)
    assert lr_at(s, 0) == 2 * lr_at(s, 50)


def test_step_example():
    s = LrSchedule.step(100)
    assert s.milestones == (50, 75)
    assert math.isclose(lr_at(s, 80), 0.001, rel_tol=1e-12)


def test_step_table():
    s = LrSchedule.step(100)
    for t in range(100):
        expect = 0.1 if t < 50 else (0.1 * 0.1 if t < 75 else 0.1 * 0.1 * 0.1)
        assert lr_at(s, t) == expect


@given(st.integers(1, 400))
def test_cosine_positive_and_non_increasing(total):
    s = LrSchedule.cosine(total)
    lrs = [lr_at(s, t) for t in range(total)]
    assert all(v > 0 for v in lrs)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_range_and_config_errors():
    s = LrSchedule.cosine(10)
    for t in (-1, 10, 11):
        with pytest.raises(RangeError):
            lr_at(s, t)
    with pytest.raises(ConfigError):
        LrSchedule.cosine(0)
    with pytest.raises(ConfigError):
        LrSchedule.cosine(10, floor=-1)


def test_cosine_floor():
    s = LrSchedule.cosine(10, floor=0.01)
    assert lr_at(s, 9) == 0.01


# -- SGD -------------------------------------------------------------------

def _opt(params, mu, wd=0.0, nesterov=False):
    return OptimizerState.create(params, momentum=mu, weight_decay=wd, nesterov=nesterov)


def test_sgd_zero_lr_leaves_params(rng):
    p = {"w": rng.standard_normal((3, 2))}
    before = p["w"].copy()
    sgd_step(p, {"w": rng.standard_normal((3, 2))}, _opt(p, 0.9, 1e-4), 0.0)
    assert np.array_equal(p["w"], before)


def test_sgd_plain_gradient_descent(rng):
    p = {"w": rng.standard_normal(4)}
    g = rng.standard_normal(4)
    expect = p["w"] - 0.3 * g
    sgd_step(p, {"w": g}, _opt(p, 0.0), 0.3)
    assert np.array_equal(p["w"], expect)


def test_two_momentum_steps_on_quadratic():
    # f(p) = p^2 / 2, so g = p.  p0 = 1, lr = 0.1, mu = 0.9:
    # v1 = 1, p1 = 0.9;  v2 = 0.9 * 1 + 0.9 = 1.8, p2 = 0.9 - 0.18 = 0.72
    p = {"p": np.array([1.0])}
    opt = _opt(p, 0.9)
    sgd_step(p, {"p": p["p"].copy()}, opt, 0.1)
    assert math.isclose(p["p"][0], 0.9, rel_tol=1e-15)
    sgd_step(p, {"p": p["p"].copy()}, opt, 0.1)
    assert math.isclose(opt.velocity["p"][0], 1.8, rel_tol=1e-15)
    assert math.isclose(p["p"][0], 0.72, rel_tol=1e-15)


def test_weight_decay_and_nesterov():
    p = {"p": np.array([2.0])}
    opt = _opt(p, 0.5, wd=0.1, nesterov=True)
    sgd_step(p, {"p": np.array([1.0])}, opt, 0.1)
    # d = 1 + 0.2 = 1.2; v = 1.2; step = d + mu v = 1.8
    assert math.isclose(p["p"][0], 2.0 - 0.18, rel_tol=1e-15)


def test_sgd_shape_mismatch(rng):
    p = {"w": np.zeros(3)}
    with pytest.raises(ShapeError):
        sgd_step(p, {"w": np.zeros(4)}, _opt(p, 0.9), 0.1)
    with pytest.raises(ConfigError):
        OptimizerState.create(p, momentum=1.0)


# -- data ------------------------------------------------------------------

def _cifar_record(label, fill=0):
    return bytes([label]) + bytes([fill]) * 3072


def test_cifar_single_record(tmp_path):
    f = tmp_path / "one.bin"
    f.write_bytes(_cifar_record(7, 255))
    images, labels = load_cifar10_batch(f, mean=(0, 0, 0), std=(1, 1, 1))
    assert images.shape == (1, 3, 32, 32) and labels.tolist() == [7]
    assert np.all(images == 1.0)


def test_cifar_channel_major_and_normalisation(tmp_path):
    payload = bytes([0] * 1024 + [255] * 1024 + [51] * 1024)
    f = tmp_path / "b.bin"
    f.write_bytes(bytes([3]) + payload)
    images, _ = load_cifar10_batch(f, mean=(0.5, 0.5, 0.0), std=(0.5, 0.25, 0.2))
    assert np.all(images[0, 0] == -1.0)
    assert np.all(images[0, 1] == 2.0)
    assert np.allclose(images[0, 2], 1.0)


def test_cifar_empty_and_malformed(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    images, labels = load_cifar10_batch(empty)
    assert len(images) == 0 and len(labels) == 0
    short = tmp_path / "short.bin"
    short.write_bytes(bytes(3072))
    with pytest.raises(FormatError):
        load_cifar10_batch(short)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(_cifar_record(1) + _cifar_record(10))
    with pytest.raises(FormatError, match="record 1"):
        load_cifar10_batch(bad)


def test_cifar_dir(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(_cifar_record(1) + _cifar_record(2))
    (tmp_path / "data_batch_2.bin").write_bytes(_cifar_record(3))
    src = load_cifar10_dir(tmp_path)
    assert src.labels.tolist() == [1, 2, 3] and src.num_classes == 10
    with pytest.raises(FormatError):
        load_cifar10_dir(tmp_path / "missing")


def test_synth_deterministic():
    a = synth_dataset(5, 40, (3, 4, 4), 4)
    b = synth_dataset(5, 40, (3, 4, 4), 4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = synth_dataset(6, 40, (3, 4, 4), 4)
    assert not np.array_equal(a.images, c.images)
    assert sorted(set(a.labels.tolist())) == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        synth_dataset(0, 3, (3, 4, 4), 4)


def test_batches_are_deterministic_full_and_in_range():
    src = synth_dataset(1, 50, (3, 2, 2), 5)
    runs = [[y.tolist() for _, y in src.batches(8, epoch=2)] for _ in range(2)]
    assert runs[0] == runs[1]
    assert len(runs[0]) == 6 and all(len(b) == 8 for b in runs[0])
    assert all(0 <= v < 5 for b in runs[0] for v in b)
    other = [y.tolist() for _, y in src.batches(8, epoch=3)]
    assert other != runs[0]


def test_stratified_batches_balance_labels():
    src = synth_dataset(0, 320, (3, 2, 2), 10)
    for _, y in src.batches(40, epoch=0):
        assert np.bincount(y, minlength=10).tolist() == [4] * 10


def test_single_class_loss_is_zero():
    src = synth_dataset(0, 1, (3, 2, 2), 1)
    loss, _ = ops.softmax_xent(wrap(np.zeros((1, 1, 1, 1))), src.labels)
    assert loss == 0.0


def test_two_class_linear_classifier_bound():
    src = synth_dataset(0, 200, (3, 4, 4), 2)
    rng = np.random.Generator(np.random.PCG64(0))
    params = {"w": rng.standard_normal((2, 48)) * 0.01, "b": np.zeros(2)}
    opt = OptimizerState.create(params, momentum=0.9, weight_decay=0.0)
    acc = 0.0
    for epoch in range(20):
        correct = 0
        for x, y in src.batches(20, epoch):
            flat = wrap(x.reshape(len(y), 48, 1, 1))
            logits = ops.linear(flat, params["w"], params["b"])
            _, g = ops.softmax_xent(logits, y)
            correct += int(np.sum(np.argmax(logits.data.reshape(len(y), 2), axis=1) == y))
            gx = g.data.reshape(len(y), 2)
            sgd_step(params, {"w": gx.T @ flat.data.reshape(len(y), 48), "b": gx.sum(axis=0)}, opt, 0.05)
        acc = correct / len(src)
    assert acc > 0.95


def test_data_source_label_validation():
    with pytest.raises(FormatError):
        DataSource("synth", np.zeros((2, 3, 2, 2)), np.array([0, 3]), 3)


# -- checkpoints -----------------------------------------------------------

def _params(rng, dt=np.float64):
    return {"a.weight": rng.standard_normal((2, 3, 1, 1)).astype(dt), "b": rng.standard_normal(4).astype(dt)}


def test_checkpoint_round_trip(tmp_path, rng):
    p = _params(rng)
    opt = OptimizerState.create(p, momentum=0.8, weight_decay=3e-4, nesterov=True)
    opt.velocity["b"][:] = rng.standard_normal(4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, opt, 7)
    q, opt2, epoch = load_checkpoint(path)
    assert epoch == 7
    assert all(np.array_equal(p[k], q[k]) and p[k].dtype == q[k].dtype for k in p)
    assert np.array_equal(opt2.velocity["b"], opt.velocity["b"])
    assert (opt2.momentum, opt2.weight_decay, opt2.nesterov) == (0.8, 3e-4, True)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_f32_round_trip(tmp_path, rng):
    p = _params(rng, np.float32)
    save_checkpoint(tmp_path / "f.ckpt", p, None, 0)
    q, _, _ = load_checkpoint(tmp_path / "f.ckpt")
    assert q["b"].dtype == np.float32 and np.array_equal(q["b"], p["b"])


def test_checkpoint_header_layout(tmp_path, rng):
    path = tmp_path / "h.ckpt"
    save_checkpoint(path, _params(rng), None, 3)
    raw = path.read_bytes()
    assert raw[:4] == b"DPLN"
    assert struct.unpack_from("<IBI", raw, 4) == (1, 2, 3)


def test_checkpoint_corruption(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, _params(rng), None, 1)
    raw = bytearray(path.read_bytes())
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0x01
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CorruptCheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:20]))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


# -- training loop ---------------------------------------------------------

def _small_run(strategy, epochs=3):
    data = synth_dataset(0, 40, (3, 8, 8), 10)
    tc = TrainConfig(epochs=epochs, batch=20, seed=0, strategy=strategy)
    return train(preset("desk"), data, tc)


def test_loss_curves_identical_across_strategies_and_runs():
    curves = {s: [r.train_loss for r in _small_run(s).rows] for s in ("naive", "shared-grad", "shared-all")}
    assert curves["naive"] == curves["shared-grad"] == curves["shared-all"]
    assert [r.train_loss for r in _small_run("shared-all").rows] == curves["shared-all"]
    assert len(curves["naive"]) == 3


def test_train_rows_are_complete():
    res = _small_run("shared-all", epochs=2)
    assert [r.epoch for r in res.rows] == [0, 1]
    assert res.rows[0].lr == 0.1
    assert all(r.feature_peak_bytes > 0 and r.param_bytes > 0 for r in res.rows)


def test_train_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(strategy="gpu")
    with pytest.raises(ConfigError):
        train(preset("desk"), synth_dataset(0, 10, (3, 8, 8), 5), TrainConfig(epochs=1))
