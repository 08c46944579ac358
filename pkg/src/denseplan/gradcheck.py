"""Central finite-difference checks for every backward formula and the full model.

Relative error is ``|a - n| / max(|a|, |n|, floor)``.  The floor keeps
entries whose true gradient is ~0 from turning round-off into huge ratios;
it is far above the finite-difference noise and far below any gradient that
matters for these models.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .densenet import DenseNetConfig
from .graph import build_plan, forward, step_trace
from .tensor import Tensor, resolve_dtype

STEP = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-2}
TOLERANCE = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-2}
FLOOR = {np.dtype(np.float64): 1e-6, np.dtype(np.float32): 1e-2}


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float, skip: Callable[[], bool] | None = None):
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in place, then restored).

    ``skip`` is evaluated at both perturbed points; if either says so the
    entry is reported as NaN (excluded).
    """
    out = np.empty(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        bad = skip() if skip else False
        flat[i] = orig - h
        fm = f()
        bad = bad or (skip() if skip else False)
        flat[i] = orig
        out.reshape(-1)[i] = np.nan if bad else (fp - fm) / (2 * h)
    return out


def _max_err(analytic, numeric, floor) -> float:
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    return float(relative_error(np.asarray(analytic)[mask], numeric[mask], floor).max())


# --------------------------------------------------------------------------
# per-op checks: loss = sum(op(inputs) * R) for a fixed random R


@dataclass
class OpCase:
    name: str
    run: Callable[[np.random.Generator, np.dtype], float]


def _probe(out: np.ndarray, r: np.ndarray) -> float:
    # reduce in 64-bit so a 32-bit check measures the op, not the summation
    return float(np.sum(out.astype(np.float64) * r))


def _t(a) -> Tensor:
    return Tensor(a, ops.ArenaTag.SCRATCH) if a.ndim == 4 else a


def _check_concat(rng, dt):
    xs = [rng.standard_normal((2, c, 3, 3)).astype(dt) for c in (2, 3)]
    r = rng.standard_normal((2, 5, 3, 3)).astype(dt)
    f = lambda: _probe(ops.concat_forward([_t(x) for x in xs]).data, r)
    grads = ops.concat_backward(_t(r.copy()), (2, 3))
    return max(_max_err(g.data, numeric_grad(f, x, STEP[dt]), FLOOR[dt]) for g, x in zip(grads, xs))


def _check_batchnorm(rng, dt):
    x = rng.standard_normal((3, 2, 3, 3)).astype(dt)
    st = ops.BatchNormState.create(2, dt)
    st.gamma[:] = rng.standard_normal(2) + 1
    st.beta[:] = rng.standard_normal(2)
    r = rng.standard_normal(x.shape).astype(dt)
    f = lambda: _probe(ops.batchnorm_forward(_t(x), st, ops.Mode.TRAIN)[0].data, r)
    _, stats = ops.batchnorm_forward(_t(x), st, ops.Mode.TRAIN)
    gx, gg, gb = ops.batchnorm_backward(_t(r), _t(x), st, stats)
    h, fl = STEP[dt], FLOOR[dt]
    return max(
        _max_err(gx.data, numeric_grad(f, x, h), fl),
        _max_err(gg, numeric_grad(f, st.gamma, h), fl),
        _max_err(gb, numeric_grad(f, st.beta, h), fl),
    )


def _check_relu(rng, dt):
    x = rng.standard_normal((2, 2, 3, 3)).astype(dt)
    x[np.abs(x) < 0.1] = 0.5  # keep away from the kink
    r = rng.standard_normal(x.shape).astype(dt)
    f = lambda: _probe(ops.relu_forward(_t(x)).data, r)
    g = ops.relu_backward(_t(r), _t(x))
    return _max_err(g.data, numeric_grad(f, x, STEP[dt]), FLOOR[dt])


def _conv_case(kernel, padding, stride=1):
    def run(rng, dt):
        x = rng.standard_normal((2, 3, 5, 5)).astype(dt)
        w = rng.standard_normal((4, 3, kernel, kernel)).astype(dt)
        p = ops.ConvParams(w, stride, padding)
        out = ops.conv2d_forward(_t(x), p)
        r = rng.standard_normal(out.data.shape).astype(dt)
        f = lambda: _probe(ops.conv2d_forward(_t(x), p).data, r)
        gx, gw = ops.conv2d_backward(_t(r), _t(x), p)
        h, fl = STEP[dt], FLOOR[dt]
        return max(_max_err(gx.data, numeric_grad(f, x, h), fl), _max_err(gw, numeric_grad(f, w, h), fl))

    return run


def _check_avgpool(rng, dt):
    x = rng.standard_normal((2, 2, 4, 4)).astype(dt)
    r = rng.standard_normal((2, 2, 2, 2)).astype(dt)
    f = lambda: _probe(ops.avgpool2d(_t(x)).data, r)
    g = ops.avgpool2d_backward(_t(r), x.shape)
    return _max_err(g.data, numeric_grad(f, x, STEP[dt]), FLOOR[dt])


def _check_global_pool(rng, dt):
    x = rng.standard_normal((2, 3, 3, 3)).astype(dt)
    r = rng.standard_normal((2, 3, 1, 1)).astype(dt)
    f = lambda: _probe(ops.global_avgpool(_t(x)).data, r)
    g = ops.global_avgpool_backward(_t(r), x.shape)
    return _max_err(g.data, numeric_grad(f, x, STEP[dt]), FLOOR[dt])


def _check_linear(rng, dt):
    x = rng.standard_normal((3, 4, 1, 1)).astype(dt)
    w = rng.standard_normal((5, 4)).astype(dt)
    b = rng.standard_normal(5).astype(dt)
    r = rng.standard_normal((3, 5, 1, 1)).astype(dt)
    f = lambda: _probe(ops.linear(_t(x), w, b).data, r)
    gx, gw, gb = ops.linear_backward(_t(r), _t(x), w)
    h, fl = STEP[dt], FLOOR[dt]
    return max(
        _max_err(gx.data, numeric_grad(f, x, h), fl),
        _max_err(gw, numeric_grad(f, w, h), fl),
        _max_err(gb, numeric_grad(f, b, h), fl),
    )


def _check_softmax_xent(rng, dt):
    z = rng.standard_normal((4, 5, 1, 1)).astype(dt)
    y = rng.integers(0, 5, 4)
    f = lambda: ops.softmax_xent(_t(z), y)[0]
    _, g = ops.softmax_xent(_t(z), y)
    return _max_err(g.data, numeric_grad(f, z, STEP[dt]), FLOOR[dt])


OP_CASES = [
    OpCase("concat", _check_concat),
    OpCase("batchnorm", _check_batchnorm),
    OpCase("relu", _check_relu),
    OpCase("conv3x3", _conv_case(3, 1)),
    OpCase("conv1x1", _conv_case(1, 0)),
    OpCase("conv3x3_stride2", _conv_case(3, 1, 2)),
    OpCase("avgpool", _check_avgpool),
    OpCase("global_avgpool", _check_global_pool),
    OpCase("linear", _check_linear),
    OpCase("softmax_xent", _check_softmax_xent),
]


def check_ops(seed: int = 0, dtype="f64") -> dict[str, float]:
    dt = resolve_dtype(dtype)
    return {case.name: case.run(np.random.Generator(np.random.PCG64([seed, i])), dt)
            for i, case in enumerate(OP_CASES)}


# --------------------------------------------------------------------------
# full model


@dataclass
class ModelCheck:
    max_rel_err: float
    checked: int
    excluded: int
    per_param: dict


def check_model(
    cfg: DenseNetConfig,
    *,
    batch: int = 2,
    spatial=(8, 8),
    seed: int = 0,
    dtype="f64",
    strategy="naive",
) -> ModelCheck:
    """Compare every parameter gradient of one training step with central differences.

    An entry is excluded when either perturbation flips the sign of some
    ReLU input relative to the unperturbed forward pass (the loss is not
    differentiable across that kink).
    """
    dt = resolve_dtype(dtype)
    h, floor = STEP[dt], FLOOR[dt]
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = (batch, cfg.in_channels) + tuple(spatial)
    x = rng.standard_normal(shape).astype(dt)
    y = rng.integers(0, cfg.num_classes, batch)
    plan = build_plan(cfg, strategy, batch, shape, seed=seed, dtype=dt)

    def relu_signs():
        fwd = forward(plan, x, ops.Mode.TRAIN, collect_relu_inputs=True)
        fwd.state.release()
        return [np.signbit(v) | (v == 0) for _, v in fwd.state.relu_masks]

    def loss():
        fwd = forward(plan, x, ops.Mode.TRAIN)
        value = ops.softmax_xent(fwd.logits, y)[0]
        fwd.state.release()
        return value

    base = relu_signs()

    def flipped():
        return any(not np.array_equal(a, b) for a, b in zip(base, relu_signs()))

    analytic = {k: v.copy() for k, v in step_trace(plan, x, y).grads.items()}
    per_param, checked, excluded = {}, 0, 0
    for name in plan.trainable:
        num = numeric_grad(loss, plan.params[name].data, h, skip=flipped)
        mask = np.isnan(num)
        excluded += int(mask.sum())
        checked += int((~mask).sum())
        per_param[name] = _max_err(analytic[name], num, floor)
    return ModelCheck(max(per_param.values()), checked, excluded, per_param)
