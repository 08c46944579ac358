"""Execution plans for dense networks under three memory strategies.

``naive``
    Every node output and every gradient is a fresh owned buffer, kept for
    the whole step.
``shared-grad``
    Forward as naive; every gradient is written into pooled ``SHARED_GRAD``
    storage: one region that accumulates the gradients of a block's features
    (laid out like the block's concatenation) and two ping-pong regions for
    the single-consumer gradients.
``shared-all``
    Additionally, concatenation outputs go to ``SHARED1`` and batch-norm
    (+ in-place ReLU) outputs to ``SHARED2``.  Both are overwritten by the
    next layer, so backward first rebuilds them for each layer: the concat
    is re-copied and BN is re-applied with the batch statistics saved
    during forward.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .alloctrace import Accountant, MemoryStats, OpTrace, pool_capacities, use_accountant
from .densenet import ActivationOrder, DenseNetConfig, LayerOp, geometry, layer_spec
from .errors import ProtocolError, ShapeError
from .tensor import ArenaTag, Region, Shape4, Tensor, alloc, alloc_region, channel_view, resolve_dtype

INPUT = -1


class ExecutionStrategy(str, enum.Enum):
    NAIVE = "naive"
    SHARED_GRADIENT = "shared-grad"
    SHARED_ALL = "shared-all"

    @classmethod
    def parse(cls, value) -> "ExecutionStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"shared-gradient": "shared-grad", "shared_grad": "shared-grad", "shared_all": "shared-all"}
        return cls(aliases.get(value, value))


class NodeKind(str, enum.Enum):
    CONCAT = "concat"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    CONV = "conv"
    POOL = "pool"
    LINEAR = "linear"
    LOSS = "loss"


@dataclass
class GraphNode:
    id: int
    kind: NodeKind
    inputs: tuple
    out_shape: Shape4
    storage_class: ArenaTag
    name: str
    rematerializable: bool = False
    saved: tuple = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class BufferPool:
    shared1: Region | None = None
    shared2: Region | None = None
    grad_acc: Region | None = None
    grad_a: Region | None = None
    grad_b: Region | None = None

    def regions(self) -> list[Region]:
        return [r for r in (self.shared1, self.shared2, self.grad_acc, self.grad_a, self.grad_b) if r is not None]

    def high_water(self) -> dict:
        return {r.name: r.high_water for r in self.regions()}

    def region_for(self, arena: ArenaTag) -> Region:
        return {ArenaTag.SHARED1: self.shared1, ArenaTag.SHARED2: self.shared2}[arena]


class GraphPlan:
    """Nodes, parameters and pooled storage for one model/strategy/batch."""

    def __init__(self, config, strategy, input_shape, dtype, accountant):
        self.config: DenseNetConfig = config
        self.strategy: ExecutionStrategy = strategy
        self.input_shape: Shape4 = input_shape
        self.dtype = dtype
        self.accountant: Accountant = accountant
        self.trace = OpTrace()
        self.nodes: list[GraphNode] = []
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.trainable: list[str] = []
        self.bn_states: dict[int, ops.BatchNormState] = {}
        self.pool = BufferPool()
        self.grad_region: dict[int, str] = {}
        self.feature_slot: dict[int, tuple[int, int, int]] = {}
        self.block_acc_shape: dict[int, Shape4] = {}
        self.loss_id: int | None = None
        self.logits_id: int | None = None

    # -- structure helpers -------------------------------------------------
    @property
    def batch(self) -> int:
        return self.input_shape.n

    @property
    def shared_forward(self) -> bool:
        return self.strategy is ExecutionStrategy.SHARED_ALL

    @property
    def shared_grads(self) -> bool:
        return self.strategy is not ExecutionStrategy.NAIVE

    @property
    def param_bytes(self) -> int:
        return sum(t.nbytes for t in self.params.values()) + sum(t.nbytes for t in self.buffers.values())

    def kinds(self) -> list[NodeKind]:
        return [n.kind for n in self.nodes]

    def node_named(self, name: str) -> GraphNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update({name: t.data for name, t in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        for name, arr in state.items():
            target = self.params.get(name) or self.buffers.get(name)
            if target is None:
                raise KeyError(f"unknown parameter {name!r}")
            if target.data.shape != arr.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {target.data.shape}")
            np.copyto(target.data, arr)

    def grad_arrays(self) -> dict[str, np.ndarray]:
        return {name: self.grads[name].data for name in self.trainable}

    def poison_pools(self, value: float = np.nan) -> None:
        """Overwrite every pooled region; used to prove nothing reads stale data."""
        for r in self.pool.regions():
            r.fill(value)

    def close(self) -> None:
        """Release parameters and pools back to the plan's accountant."""
        for r in self.pool.regions():
            r.free()
        for t in list(self.params.values()) + list(self.grads.values()) + list(self.buffers.values()):
            t.free()

    def _conv(self, node: GraphNode) -> ops.ConvParams:
        return ops.ConvParams(self.params[node.attrs["weight"]].data, 1, node.attrs["padding"])


class _Builder:
    def __init__(self, plan: GraphPlan, rng: np.random.Generator, zero_head: bool):
        self.plan = plan
        self.rng = rng
        self.zero_head = zero_head
        self.shared = plan.shared_forward

    def add(self, kind, inputs, shape, name, storage=ArenaTag.FEATURE_OWNED, remat=False, saved=(), **attrs):
        node = GraphNode(len(self.plan.nodes), kind, tuple(inputs), shape, storage, name, remat, saved, attrs)
        self.plan.nodes.append(node)
        return node.id

    def shape(self, nid) -> Shape4:
        return self.plan.input_shape if nid == INPUT else self.plan.nodes[nid].out_shape

    def param(self, name, shape, init):
        p = self.plan
        t = alloc(shape, ArenaTag.PARAMS, p.dtype)
        t.data[...] = init(shape)
        p.params[name] = t
        p.grads[name] = alloc(shape, ArenaTag.PARAMS, p.dtype)
        p.trainable.append(name)
        return t

    def buffer(self, name, shape, value):
        t = alloc(shape, ArenaTag.PARAMS, self.plan.dtype)
        t.data[...] = value
        self.plan.buffers[name] = t
        return t

    def conv(self, src, out_c, kernel, name, padding):
        s = self.shape(src)
        fan_in = s.c * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.param(f"{name}.weight", (out_c, s.c, kernel, kernel),
                   lambda shp: self.rng.standard_normal(shp) * std)
        return self.add(NodeKind.CONV, (src,), s.with_channels(out_c), name,
                        saved=("input",), weight=f"{name}.weight", kernel=kernel, padding=padding)

    def bn(self, src, name, feature=False):
        s = self.shape(src)
        c = s.c
        gamma = self.param(f"{name}.gamma", (1, c, 1, 1), lambda shp: np.ones(shp))
        beta = self.param(f"{name}.beta", (1, c, 1, 1), lambda shp: np.zeros(shp))
        rm = self.buffer(f"{name}.running_mean", (1, c, 1, 1), 0.0)
        rv = self.buffer(f"{name}.running_var", (1, c, 1, 1), 1.0)
        shared = self.shared and not feature
        nid = self.add(NodeKind.BATCHNORM, (src,), s, name,
                       storage=ArenaTag.SHARED2 if shared else ArenaTag.FEATURE_OWNED,
                       remat=shared, saved=("input", "batch_stats"), param=name)
        self.plan.bn_states[nid] = ops.BatchNormState(
            gamma.data.reshape(-1), beta.data.reshape(-1), rm.data.reshape(-1), rv.data.reshape(-1)
        )
        return nid

    def relu(self, src, name):
        prev = self.plan.nodes[src]
        return self.add(NodeKind.RELU, (src,), prev.out_shape, name, storage=prev.storage_class,
                        remat=prev.rematerializable, saved=("output",), inplace=True)

    def concat(self, features, name):
        shapes = [self.shape(f) for f in features]
        out = shapes[0].with_channels(sum(s.c for s in shapes))
        return self.add(NodeKind.CONCAT, features, out, name,
                        storage=ArenaTag.SHARED1 if self.shared else ArenaTag.FEATURE_OWNED,
                        remat=self.shared, saved=(), splits=tuple(s.c for s in shapes))


def _validate_input_shape(batch, input_shape) -> Shape4:
    dims = tuple(input_shape)
    if len(dims) == 3:
        dims = (batch,) + dims
    shape = Shape4.of(dims)
    if shape.n != batch:
        raise ShapeError(f"input batch {shape.n} does not match plan batch {batch}")
    return shape


def build_plan(
    model: DenseNetConfig,
    strategy,
    batch: int,
    input_shape,
    *,
    seed: int = 0,
    dtype=None,
    accountant: Accountant | None = None,
    zero_head: bool = False,
) -> GraphPlan:
    """Lay out nodes, initialise parameters, pre-allocate pools.

    ``input_shape`` is (N, C, H, W) or (C, H, W).  Parameters come from a
    PCG64 generator seeded with ``seed`` so plans with the same seed hold
    identical weights regardless of strategy.
    """
    strategy = ExecutionStrategy.parse(strategy)
    shape = _validate_input_shape(batch, input_shape)
    cfg = model
    if shape.c != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} input channels, got {shape.c}")
    stages = geometry(cfg, shape.h, shape.w)
    dt = resolve_dtype(dtype) if dtype is not None else np.dtype(np.float64)
    plan = GraphPlan(cfg, strategy, shape, dt, accountant or Accountant())
    rng = np.random.Generator(np.random.PCG64(seed))
    with use_accountant(plan.accountant):
        b = _Builder(plan, rng, zero_head)
        features = [b.conv(INPUT, cfg.initial_channels, 3, "stem.conv", padding=1)]
        post = cfg.activation_order is ActivationOrder.POST
        for st in stages:
            bi = st.block_index
            for li in range(cfg.block_sizes[bi]):
                spec = layer_spec(cfg, bi, li)
                prefix = f"block{bi}.layer{li}"
                bn_positions = [i for i, o in enumerate(spec.ops) if o.op is LayerOp.BN]
                cur, nbn, nconv = None, 0, 0
                for i, op in enumerate(spec.ops):
                    if op.op is LayerOp.CONCAT:
                        cur = b.concat(features, f"{prefix}.concat")
                    elif op.op is LayerOp.BN:
                        nbn += 1
                        cur = b.bn(cur, f"{prefix}.bn{nbn}", feature=post and i == bn_positions[-1])
                    elif op.op is LayerOp.RELU:
                        cur = b.relu(cur, f"{prefix}.relu{nbn}")
                    else:
                        nconv += 1
                        kernel = 1 if op.op is LayerOp.CONV1X1 else 3
                        cur = b.conv(cur, op.out_channels, kernel, f"{prefix}.conv{nconv}",
                                     padding=1 if kernel == 3 else 0)
                features.append(cur)
            _register_block(plan, bi, features)
            if st.transition_out is not None:
                pre = f"trans{bi}"
                cur = b.concat(features, f"{pre}.concat")
                cur = b.relu(b.bn(cur, f"{pre}.bn"), f"{pre}.relu")
                cur = b.conv(cur, st.transition_out, 1, f"{pre}.conv", padding=0)
                s = b.shape(cur)
                nh, nw = st.next_hw
                cur = b.add(NodeKind.POOL, (cur,), Shape4(s.n, s.c, nh, nw), f"{pre}.pool",
                            saved=("input_shape",), mode="avg", window=2, stride=2)
                features = [cur]
            else:
                cur = b.concat(features, "head.concat")
                cur = b.relu(b.bn(cur, "head.bn"), "head.relu")
                s = b.shape(cur)
                cur = b.add(NodeKind.POOL, (cur,), Shape4(s.n, s.c, 1, 1), "head.pool",
                            saved=("input_shape",), mode="global")
                k = cfg.num_classes
                std = 0.0 if zero_head else 1.0 / np.sqrt(s.c)
                b.param("head.linear.weight", (k, s.c, 1, 1), lambda shp: rng.standard_normal(shp) * std)
                b.param("head.linear.bias", (1, k, 1, 1), lambda shp: np.zeros(shp))
                plan.logits_id = b.add(NodeKind.LINEAR, (cur,), Shape4(s.n, k, 1, 1), "head.linear",
                                       saved=("input",), weight="head.linear.weight", bias="head.linear.bias")
                grad_storage = ArenaTag.SHARED_GRAD if plan.shared_grads else ArenaTag.FEATURE_OWNED
                plan.loss_id = b.add(NodeKind.LOSS, (plan.logits_id,), Shape4(s.n, k, 1, 1), "head.loss",
                                     storage=grad_storage, saved=("logits", "labels"))
        _assign_grad_regions(plan)
        _allocate_pools(plan)
    return plan


def _register_block(plan: GraphPlan, block: int, features: list[int]) -> None:
    offset = 0
    for fid in features:
        c = plan.nodes[fid].out_shape.c if fid != INPUT else plan.input_shape.c
        plan.feature_slot[fid] = (block, offset, c)
        offset += c
    s = plan.nodes[features[0]].out_shape
    plan.block_acc_shape[block] = Shape4(s.n, offset, s.h, s.w)


def _assign_grad_regions(plan: GraphPlan) -> None:
    """Static placement of each node's output gradient.

    Feature gradients accumulate in the block region; every other gradient
    alternates between two ping-pong regions so a kernel never reads and
    writes the same buffer (ReLU, being in place, keeps its input's region).
    """
    region = {plan.logits_id: "a"}
    for node in reversed(plan.nodes):
        if node.kind is NodeKind.LOSS or node.id not in region:
            continue
        mine = region[node.id]
        for src in node.inputs:
            if src == INPUT:
                continue
            if node.kind is NodeKind.CONCAT:
                region[src] = "acc"
            elif node.kind is NodeKind.RELU:
                region[src] = mine
            else:
                region[src] = "b" if mine == "a" else "a"
    plan.grad_region = region


def _allocate_pools(plan: GraphPlan) -> None:
    s = plan.input_shape
    caps = pool_capacities(plan.config, s.n, s.h, s.w)
    dt = plan.dtype
    if plan.shared_forward:
        plan.pool.shared1 = alloc_region("shared1", caps["shared1"], ArenaTag.SHARED1, dt)
        plan.pool.shared2 = alloc_region("shared2", caps["shared2"], ArenaTag.SHARED2, dt)
    if plan.shared_grads:
        plan.pool.grad_acc = alloc_region("grad_acc", caps["grad_acc"], ArenaTag.SHARED_GRAD, dt)
        plan.pool.grad_a = alloc_region("grad_a", caps["grad_a"], ArenaTag.SHARED_GRAD, dt)
        plan.pool.grad_b = alloc_region("grad_b", caps["grad_b"], ArenaTag.SHARED_GRAD, dt)


# --------------------------------------------------------------------------
# execution

@dataclass
class StepState:
    """Everything forward leaves behind for backward."""

    plan: GraphPlan
    mode: ops.Mode
    input: Tensor
    outputs: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    owned: list = field(default_factory=list)
    pool_owner: dict = field(default_factory=dict)
    relu_masks: list | None = None
    backward_done: bool = False
    released: bool = False

    def release(self) -> None:
        """Free every owned buffer this step allocated."""
        if self.released:
            return
        with use_accountant(self.plan.accountant):
            for t in self.owned:
                t.free()
        self.owned.clear()
        self.outputs.clear()
        self.released = True


@dataclass
class ForwardResult:
    logits: Tensor
    state: StepState


@dataclass
class StepResult:
    loss: float
    logits: np.ndarray
    grads: dict
    stats: MemoryStats
    trace: OpTrace
    forward_feature_bytes: int = 0


def _flops_forward(node: GraphNode, plan: GraphPlan, phase: str, mode: ops.Mode) -> int:
    e = node.out_shape.element_count
    k = node.kind
    if k is NodeKind.CONCAT:
        return e
    if k is NodeKind.BATCHNORM:
        if phase == "recompute" or mode is ops.Mode.EVAL:
            return 3 * e
        return 7 * e
    if k is NodeKind.RELU:
        return e
    if k is NodeKind.CONV:
        cin = plan.input_shape.c if node.inputs[0] == INPUT else plan.nodes[node.inputs[0]].out_shape.c
        return 2 * e * cin * node.attrs["kernel"] ** 2
    if k is NodeKind.POOL:
        src = node.inputs[0]
        return plan.nodes[src].out_shape.element_count
    if k is NodeKind.LINEAR:
        return 2 * node.out_shape.n * plan.nodes[node.inputs[0]].out_shape.c * node.out_shape.c
    if k is NodeKind.LOSS:
        return 4 * e
    raise AssertionError(k)


def _flops_backward(node: GraphNode, plan: GraphPlan) -> int:
    k = node.kind
    if k is NodeKind.CONV:
        fwd = _flops_forward(node, plan, "forward", ops.Mode.TRAIN)
        return fwd if node.inputs[0] == INPUT else 2 * fwd
    if k is NodeKind.BATCHNORM:
        return 10 * node.out_shape.element_count
    if k is NodeKind.LINEAR:
        return 2 * _flops_forward(node, plan, "forward", ops.Mode.TRAIN)
    return _flops_forward(node, plan, "forward", ops.Mode.TRAIN)


def _src(state: StepState, nid: int) -> Tensor:
    return state.input if nid == INPUT else state.outputs[nid]


def _new_owned(state: StepState, shape) -> Tensor:
    t = alloc(shape, ArenaTag.FEATURE_OWNED, state.plan.dtype)
    state.owned.append(t)
    return t


def _run_node(plan: GraphPlan, state: StepState, node: GraphNode, phase: str) -> None:
    k = node.kind
    pooled = node.storage_class in (ArenaTag.SHARED1, ArenaTag.SHARED2)
    if k is NodeKind.RELU:
        x = _src(state, node.inputs[0])
        if state.relu_masks is not None and phase == "forward":
            state.relu_masks.append((node.id, x.data.copy()))
        out = ops.relu_forward(x, out=x)
    else:
        if pooled:
            out = plan.pool.region_for(node.storage_class).view(node.out_shape)
        else:
            out = _new_owned(state, node.out_shape)
        if k is NodeKind.CONCAT:
            ops.concat_forward([_src(state, i) for i in node.inputs], dst=out)
        elif k is NodeKind.BATCHNORM:
            x = _src(state, node.inputs[0])
            st = plan.bn_states[node.id]
            if phase == "recompute":
                ops.batchnorm_forward(x, st, ops.Mode.TRAIN, dst=out, stats=state.stats[node.id])
            else:
                _, stats = ops.batchnorm_forward(x, st, state.mode, dst=out)
                state.stats[node.id] = stats
        elif k is NodeKind.CONV:
            ops.conv2d_forward(_src(state, node.inputs[0]), plan._conv(node), out=out)
        elif k is NodeKind.POOL:
            x = _src(state, node.inputs[0])
            if node.attrs["mode"] == "avg":
                ops.avgpool2d(x, node.attrs["window"], node.attrs["stride"], out=out)
            else:
                ops.global_avgpool(x, out=out)
        elif k is NodeKind.LINEAR:
            w = plan.params[node.attrs["weight"]].data
            bias = plan.params[node.attrs["bias"]].data
            ops.linear(_src(state, node.inputs[0]), w.reshape(w.shape[0], -1), bias.reshape(-1), out=out)
        else:
            raise AssertionError(k)
    state.outputs[node.id] = out
    if pooled:
        state.pool_owner[node.storage_class] = node.id
    plan.trace.record(node.id, k.value, phase, _flops_forward(node, plan, phase, state.mode))


def forward(plan: GraphPlan, input, mode=ops.Mode.TRAIN, *, collect_relu_inputs: bool = False) -> ForwardResult:
    """Run every node up to the logits.

    Owned buffers stay alive until :meth:`StepState.release`; pooled ones
    only until the next layer writes the pool.
    """
    x = input if isinstance(input, Tensor) else Tensor(np.asarray(input), ArenaTag.SCRATCH)
    if x.data.shape != plan.input_shape.as_tuple():
        raise ShapeError(f"input shape {x.data.shape} does not match plan {plan.input_shape.as_tuple()}")
    if x.dtype != plan.dtype:
        x = Tensor(x.data.astype(plan.dtype), x.arena)
    state = StepState(plan, ops.Mode(mode), x, relu_masks=[] if collect_relu_inputs else None)
    with use_accountant(plan.accountant):
        for node in plan.nodes:
            if node.kind is NodeKind.LOSS:
                continue
            _run_node(plan, state, node, "forward")
    return ForwardResult(state.outputs[plan.logits_id], state)


def loss_grad_buffer(plan: GraphPlan, state: StepState) -> Tensor:
    """Where the loss gradient w.r.t. the logits must be written."""
    shape = plan.nodes[plan.loss_id].out_shape
    with use_accountant(plan.accountant):
        return _grad_dst(plan, state, plan.logits_id, shape)


def _grad_dst(plan: GraphPlan, state: StepState, nid: int, shape: Shape4) -> Tensor:
    if not plan.shared_grads:
        return _new_owned(state, shape)
    region = {"a": plan.pool.grad_a, "b": plan.pool.grad_b}[plan.grad_region[nid]]
    return region.view(shape)


def _ensure(plan: GraphPlan, state: StepState, nid: int) -> None:
    """Rebuild a pooled output if the pool no longer holds it."""
    if nid == INPUT:
        return
    node = plan.nodes[nid]
    if not node.rematerializable or state.pool_owner.get(node.storage_class) == nid:
        return
    for src in node.inputs:
        _ensure(plan, state, src)
    _run_node(plan, state, node, "recompute")


def _accumulate(plan: GraphPlan, state: StepState, grads: dict, fid: int, contrib: Tensor) -> None:
    if plan.shared_grads:
        block, offset, c = plan.feature_slot[fid]
        whole = plan.pool.grad_acc.view(plan.block_acc_shape[block])
        acc = channel_view(whole, offset, c)
    else:
        acc = grads.get(fid)
        if acc is None:
            acc = _new_owned(state, contrib.shape)
    if fid in grads:
        np.add(acc.data, contrib.data, out=acc.data)
    else:
        np.copyto(acc.data, contrib.data)
        grads[fid] = acc


def backward(plan: GraphPlan, state: StepState | None, loss_grad: Tensor) -> dict[str, Tensor]:
    """Reverse pass; fills ``plan.grads`` and returns it.

    Under ``shared-all`` the pools are treated as garbage on entry: each
    concat/BN/ReLU chain is rebuilt right before the first backward kernel
    that reads it.
    """
    if state is None or state.released:
        raise ProtocolError("backward called without a matching forward")
    if state.mode is not ops.Mode.TRAIN:
        raise ProtocolError("backward requires a train-mode forward")
    if state.backward_done:
        raise ProtocolError("backward already ran for this forward")
    logits_shape = plan.nodes[plan.logits_id].out_shape.as_tuple()
    if loss_grad.data.shape != logits_shape:
        raise ShapeError(f"loss gradient {loss_grad.data.shape} != logits {logits_shape}")
    state.pool_owner.clear()
    grads: dict[int, Tensor] = {plan.logits_id: loss_grad}
    with use_accountant(plan.accountant):
        for node in reversed(plan.nodes):
            if node.kind is NodeKind.LOSS:
                continue
            g = grads.pop(node.id)
            _backward_node(plan, state, node, g, grads)
    state.backward_done = True
    return plan.grads


def _backward_node(plan, state, node, g, grads) -> None:
    k = node.kind
    src = node.inputs[0]
    pg = plan.grads
    if k is NodeKind.CONCAT:
        for fid, view in zip(node.inputs, ops.concat_backward(g, node.attrs["splits"])):
            _accumulate(plan, state, grads, fid, view)
    elif k is NodeKind.RELU:
        _ensure(plan, state, node.id)
        ops.relu_backward(g, state.outputs[node.id], out=g)
        grads[src] = g
    elif k is NodeKind.BATCHNORM:
        _ensure(plan, state, src)
        x = _src(state, src)
        dst = _grad_dst(plan, state, src, x.shape)
        _, gg, gb = ops.batchnorm_backward(g, x, plan.bn_states[node.id], state.stats[node.id], out=dst)
        name = node.attrs["param"]
        np.copyto(pg[f"{name}.gamma"].data.reshape(-1), gg)
        np.copyto(pg[f"{name}.beta"].data.reshape(-1), gb)
        grads[src] = dst
    elif k is NodeKind.CONV:
        _ensure(plan, state, src)
        x = _src(state, src)
        p = plan._conv(node)
        if src == INPUT:
            _, gw = ops.conv2d_backward(g, x, p, need_input_grad=False)
        else:
            dst = _grad_dst(plan, state, src, x.shape)
            _, gw = ops.conv2d_backward(g, x, p, out=dst)
            grads[src] = dst
        np.copyto(pg[node.attrs["weight"]].data, gw)
    elif k is NodeKind.POOL:
        in_shape = plan.nodes[src].out_shape
        dst = _grad_dst(plan, state, src, in_shape)
        if node.attrs["mode"] == "avg":
            ops.avgpool2d_backward(g, in_shape, node.attrs["window"], node.attrs["stride"], out=dst)
        else:
            ops.global_avgpool_backward(g, in_shape, out=dst)
        grads[src] = dst
    elif k is NodeKind.LINEAR:
        x = _src(state, src)
        w = plan.params[node.attrs["weight"]].data
        dst = _grad_dst(plan, state, src, x.shape)
        _, gw, gb = ops.linear_backward(g, x, w.reshape(w.shape[0], -1), out=dst)
        np.copyto(pg[node.attrs["weight"]].data.reshape(gw.shape), gw)
        np.copyto(pg[node.attrs["bias"]].data.reshape(-1), gb)
        grads[src] = dst
    else:
        raise AssertionError(k)
    plan.trace.record(node.id, k.value, "backward", _flops_backward(node, plan))


def step_trace(plan: GraphPlan, input, labels, *, poison_pools: bool = False) -> StepResult:
    """One instrumented training step: forward, loss, backward, release.

    Counters are reset on entry, so the returned stats and trace describe
    this step alone.  ``poison_pools`` fills every pooled region with NaN
    between forward and backward.
    """
    plan.trace.reset()
    plan.accountant.reset_peaks()
    fwd = forward(plan, input, ops.Mode.TRAIN)
    state = fwd.state
    forward_bytes = plan.accountant.feature_live
    try:
        if poison_pools:
            plan.poison_pools()
        dst = loss_grad_buffer(plan, state)
        loss, grad = ops.softmax_xent(fwd.logits, labels, grad_out=dst)
        plan.trace.record(plan.loss_id, NodeKind.LOSS.value, "forward",
                          _flops_forward(plan.nodes[plan.loss_id], plan, "forward", state.mode))
        logits = fwd.logits.data.reshape(plan.batch, -1).copy()
        backward(plan, state, grad)
    finally:
        state.release()
    stats = plan.accountant.snapshot()
    return StepResult(loss, logits, plan.grad_arrays(), stats, plan.trace, forward_bytes)
