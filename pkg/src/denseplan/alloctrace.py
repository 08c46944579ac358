"""Exact allocation accounting and the analytic peak-memory model.

Accounting is explicit: :func:`denseplan.tensor.alloc` and ``Tensor.free``
report every owned buffer to the active :class:`Accountant`.  Nothing hooks
the host allocator, so the numbers are platform independent and can be
compared against :func:`predict_peak_elements` with zero tolerance.
"""
from __future__ import annotations

import contextvars
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

from .densenet import ActivationOrder, DenseNetConfig, LayerOp, geometry, layer_spec
from .errors import AccountingUnderflowError, ConfigError
from .tensor import FEATURE_ARENAS, ArenaTag


@dataclass(frozen=True)
class MemoryStats:
    live_bytes: dict
    peak_bytes: dict
    total_feature_peak_bytes: int
    feature_peak_split: dict
    param_bytes: int

    @property
    def feature_live_bytes(self) -> int:
        return sum(self.live_bytes[a] for a in FEATURE_ARENAS)

    def as_row(self) -> dict:
        row = {f"live_{a.value}": self.live_bytes[a] for a in ArenaTag}
        row.update({f"peak_{a.value}": self.peak_bytes[a] for a in ArenaTag})
        row["feature_peak"] = self.total_feature_peak_bytes
        row["param_bytes"] = self.param_bytes
        return row


class Accountant:
    """Live/peak byte counters per arena for one accounting context."""

    def __init__(self):
        self.live = {a: 0 for a in ArenaTag}
        self.peak = {a: 0 for a in ArenaTag}
        self.feature_live = 0
        self.feature_peak = 0
        self.feature_peak_split = {a: 0 for a in FEATURE_ARENAS}

    def record_alloc(self, arena: ArenaTag, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("negative allocation")
        self.live[arena] += nbytes
        if self.live[arena] > self.peak[arena]:
            self.peak[arena] = self.live[arena]
        if arena is not ArenaTag.PARAMS:
            self.feature_live += nbytes
            if self.feature_live > self.feature_peak:
                self.feature_peak = self.feature_live
                self.feature_peak_split = {a: self.live[a] for a in FEATURE_ARENAS}

    def record_free(self, arena: ArenaTag, nbytes: int) -> None:
        if nbytes > self.live[arena]:
            raise AccountingUnderflowError(
                f"free of {nbytes} bytes from {arena.value} with only {self.live[arena]} live"
            )
        self.live[arena] -= nbytes
        if arena is not ArenaTag.PARAMS:
            self.feature_live -= nbytes

    def reset_peaks(self) -> None:
        """Start a new measurement window at the current live level."""
        self.peak = dict(self.live)
        self.feature_peak = self.feature_live
        self.feature_peak_split = {a: self.live[a] for a in FEATURE_ARENAS}

    def snapshot(self) -> MemoryStats:
        return MemoryStats(
            live_bytes=dict(self.live),
            peak_bytes=dict(self.peak),
            total_feature_peak_bytes=self.feature_peak,
            feature_peak_split=dict(self.feature_peak_split),
            param_bytes=self.live[ArenaTag.PARAMS],
        )


_default = Accountant()
_current: contextvars.ContextVar[Accountant] = contextvars.ContextVar("denseplan_accountant", default=_default)


def current() -> Accountant:
    return _current.get()


@contextmanager
def use_accountant(acct: Accountant):
    token = _current.set(acct)
    try:
        yield acct
    finally:
        _current.reset(token)


def record_alloc(arena: ArenaTag, nbytes: int) -> None:
    current().record_alloc(arena, nbytes)


def record_free(arena: ArenaTag, nbytes: int) -> None:
    current().record_free(arena, nbytes)


def snapshot() -> MemoryStats:
    return current().snapshot()


@dataclass
class NodeCounts:
    forward: int = 0
    backward: int = 0
    recompute: int = 0


@dataclass
class OpTrace:
    """Per-node execution counts and per-op-kind FLOP estimates for a step."""

    counts: dict = field(default_factory=lambda: defaultdict(NodeCounts))
    flops: dict = field(default_factory=lambda: defaultdict(int))

    def reset(self) -> None:
        self.counts = defaultdict(NodeCounts)
        self.flops = defaultdict(int)

    def record(self, node_id: int, kind: str, phase: str, flops: int) -> None:
        c = self.counts[node_id]
        setattr(c, phase, getattr(c, phase) + 1)
        self.flops[(kind, phase)] += int(flops)

    def total_flops(self) -> int:
        return sum(self.flops.values())

    def phase_flops(self, phase: str) -> int:
        return sum(v for (_, p), v in self.flops.items() if p == phase)

    def kind_flops(self, *kinds: str) -> int:
        return sum(v for (k, _), v in self.flops.items() if k in kinds)

    def total(self, phase: str) -> int:
        return sum(getattr(c, phase) for c in self.counts.values())


# --------------------------------------------------------------------------
# Analytic peak model

@dataclass(frozen=True)
class PeakPrediction:
    """Element counts at the step's feature-memory peak."""

    arenas: dict
    breakdown: dict

    @property
    def feature_elements(self) -> int:
        return sum(self.arenas.get(a, 0) for a in FEATURE_ARENAS)

    def feature_bytes(self, itemsize: int) -> int:
        return self.feature_elements * itemsize


def _forward_outputs(cfg: DenseNetConfig, batch: int, h: int, w: int):
    """(role, elements, storage class) of every forward buffer.

    Storage class is ``"shared1"`` for concatenations, ``"shared2"`` for
    normalised maps that can be rebuilt, ``"owned"`` for everything else.
    """
    n = batch
    out = [("stem.conv", n * cfg.initial_channels * h * w, "owned")]
    stages = geometry(cfg, h, w)
    post = cfg.activation_order is ActivationOrder.POST
    for st in stages:
        area = st.h * st.w
        for layer in range(cfg.block_sizes[st.block_index]):
            spec = layer_spec(cfg, st.block_index, layer)
            c = spec.in_channels
            bn_positions = [i for i, o in enumerate(spec.ops) if o.op is LayerOp.BN]
            for i, op in enumerate(spec.ops):
                if op.op is LayerOp.CONCAT:
                    out.append(("layer.concat", n * c * area, "shared1"))
                elif op.op is LayerOp.BN:
                    if post and i == bn_positions[-1]:
                        out.append(("layer.bn_feature", n * c * area, "owned"))
                    else:
                        out.append(("layer.bn", n * c * area, "shared2"))
                elif op.op in (LayerOp.CONV1X1, LayerOp.CONV3X3):
                    c = op.out_channels
                    role = "layer.conv" if op.op is LayerOp.CONV3X3 else "layer.bottleneck"
                    out.append((role, n * c * area, "owned"))
        c = st.c_out
        if st.transition_out is not None:
            nh, nw = st.next_hw
            out += [
                ("transition.concat", n * c * area, "shared1"),
                ("transition.bn", n * c * area, "shared2"),
                ("transition.conv", n * st.transition_out * area, "owned"),
                ("transition.pool", n * st.transition_out * nh * nw, "owned"),
            ]
        else:
            out += [
                ("head.concat", n * c * area, "shared1"),
                ("head.bn", n * c * area, "shared2"),
                ("head.pool", n * c, "owned"),
                ("head.logits", n * cfg.num_classes, "owned"),
            ]
    return out


def _gradient_buffers(cfg: DenseNetConfig, batch: int, h: int, w: int):
    """(role, elements) of every non-accumulated gradient, plus accumulators.

    Every BN, conv (except the stem, whose input needs no gradient), pool
    and linear node produces one gradient the size of its input; the loss
    produces the logits gradient.  ReLU works in place and concatenation
    backward returns views, so neither adds a buffer.  Each block also owns
    gradient accumulators covering all of its features.
    """
    n = batch
    grads, accs = [("head.dlogits", n * cfg.num_classes)], []
    for st in geometry(cfg, h, w):
        area = st.h * st.w
        for layer in range(cfg.block_sizes[st.block_index]):
            spec = layer_spec(cfg, st.block_index, layer)
            c = spec.in_channels
            for op in spec.ops:
                if op.op is LayerOp.BN:
                    grads.append(("layer.bn_grad", n * c * area))
                elif op.op in (LayerOp.CONV1X1, LayerOp.CONV3X3):
                    grads.append(("layer.conv_grad", n * c * area))
                    c = op.out_channels
        accs.append(n * st.c_out * area)
        if st.transition_out is not None:
            grads += [
                ("transition.bn_grad", n * st.c_out * area),
                ("transition.conv_grad", n * st.c_out * area),
                ("transition.pool_grad", n * st.transition_out * area),
            ]
        else:
            grads += [
                ("head.bn_grad", n * st.c_out * area),
                ("head.pool_grad", n * st.c_out * area),
                ("head.linear_grad", n * st.c_out),
            ]
    return grads, accs


def pool_capacities(cfg: DenseNetConfig, batch: int, h: int, w: int) -> dict:
    """Element capacity of each pooled region: the widest buffer it must hold."""
    fwd = _forward_outputs(cfg, batch, h, w)
    grads, accs = _gradient_buffers(cfg, batch, h, w)
    return {
        "shared1": max(e for _, e, s in fwd if s == "shared1"),
        "shared2": max(e for _, e, s in fwd if s == "shared2"),
        "grad_acc": max(accs),
        "grad_a": max(e for _, e in grads),
        "grad_b": max(e for _, e in grads),
    }


def _strategy_name(strategy) -> str:
    value = getattr(strategy, "value", strategy)
    names = {"naive": "naive", "shared-grad": "shared-grad", "shared-all": "shared-all"}
    if value not in names:
        raise ConfigError(f"unsupported strategy {strategy!r}")
    return value


def predict_peak_elements(cfg: DenseNetConfig, strategy, batch: int, spatial) -> PeakPrediction:
    """Closed-form feature-memory peak (in elements) of one training step.

    Every strategy keeps what it allocates until the step ends, so the peak
    is the sum of all step allocations plus the pre-allocated pools:

    * naive: every concat/BN output, every gradient buffer and every feature
      gradient accumulator is a fresh owned buffer (quadratic in depth)
    * shared-grad: forward as naive; all gradients live in three pooled
      regions (block accumulator plus two ping-pong buffers)
    * shared-all: only conv/pool/linear outputs (and post-activation
      feature maps) are owned; concat and BN outputs reuse two pools sized
      to the widest one (linear in depth)
    """
    h, w = spatial
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    name = _strategy_name(strategy)
    fwd = _forward_outputs(cfg, batch, h, w)
    grads, accs = _gradient_buffers(cfg, batch, h, w)
    caps = pool_capacities(cfg, batch, h, w)

    breakdown: dict[str, int] = defaultdict(int)
    arenas = {a: 0 for a in FEATURE_ARENAS}
    for role, elems, storage in fwd:
        if name == "shared-all" and storage != "owned":
            continue
        breakdown[role] += elems
        arenas[ArenaTag.FEATURE_OWNED] += elems
    if name == "naive":
        for role, elems in grads:
            breakdown[role] += elems
            arenas[ArenaTag.FEATURE_OWNED] += elems
        breakdown["grad.accumulators"] = sum(accs)
        arenas[ArenaTag.FEATURE_OWNED] += sum(accs)
    else:
        grad_pool = caps["grad_acc"] + caps["grad_a"] + caps["grad_b"]
        breakdown["pool.shared_grad"] = grad_pool
        arenas[ArenaTag.SHARED_GRAD] = grad_pool
    if name == "shared-all":
        breakdown["pool.shared1"] = caps["shared1"]
        breakdown["pool.shared2"] = caps["shared2"]
        arenas[ArenaTag.SHARED1] = caps["shared1"]
        arenas[ArenaTag.SHARED2] = caps["shared2"]
    return PeakPrediction(arenas=arenas, breakdown=dict(breakdown))
