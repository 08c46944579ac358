"""DenseNet model descriptions: configs, presets, per-layer op sequences.

Conventions fixed here (the DenseNet-BC layout):

* stem: one 3x3 pad-1 conv from the image channels to ``initial_channels``
  (defaults to ``2 * growth_rate``)
* dense layer: BN -> ReLU -> conv (pre-activation) or conv -> BN -> ReLU
  (post-activation), with an optional 1x1 bottleneck to ``4 * growth_rate``
* transition: BN -> ReLU -> 1x1 conv to ``floor(compression * C)`` -> 2x2
  average pool, stride 2
* head: BN -> ReLU -> global average pool -> linear
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

from .errors import BoundsError, ConfigError

BOTTLENECK_FACTOR = 4


class ActivationOrder(enum.Enum):
    PRE = "pre"
    POST = "post"


class LayerOp(enum.Enum):
    CONCAT = "concat"
    BN = "bn"
    RELU = "relu"
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"


@dataclass(frozen=True)
class OpSpec:
    op: LayerOp
    out_channels: int | None = None

    def __str__(self):
        if self.out_channels is None:
            return self.op.value
        return f"{self.op.value}({self.out_channels})"


@dataclass(frozen=True)
class LayerSpec:
    block_index: int
    layer_index: int
    in_channels: int
    ops: tuple[OpSpec, ...]

    @property
    def kinds(self) -> list[LayerOp]:
        return [o.op for o in self.ops]


@dataclass(frozen=True)
class DenseNetConfig:
    block_sizes: tuple[int, ...]
    growth_rate: int
    bottleneck: bool = False
    compression: float = 1.0
    initial_channels: int | None = None
    activation_order: ActivationOrder = ActivationOrder.PRE
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if isinstance(self.activation_order, str):
            try:
                object.__setattr__(self, "activation_order", ActivationOrder(self.activation_order))
            except ValueError:
                raise ConfigError(f"activation_order must be 'pre' or 'post', got {self.activation_order!r}")
        if self.initial_channels is None:
            object.__setattr__(self, "initial_channels", 2 * int(self.growth_rate))
        if not self.block_sizes:
            raise ConfigError("at least one dense block is required")
        if any(b < 1 for b in self.block_sizes):
            raise ConfigError(f"block sizes must be >= 1, got {list(self.block_sizes)}")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        if self.initial_channels < 1:
            raise ConfigError("initial_channels must be >= 1")
        if not (0.0 < self.compression <= 1.0):
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        for c in block_widths(self)[:-1]:
            if transition_channels(self, c[1]) < 1:
                raise ConfigError("compression leaves a transition with zero channels")

    @property
    def k(self) -> int:
        return self.growth_rate

    @property
    def depth(self) -> int:
        """Layer count under the DenseNet-BC convention (convs + linear)."""
        per_layer = 2 if self.bottleneck else 1
        return sum(self.block_sizes) * per_layer + len(self.block_sizes) + 1

    def to_kv(self) -> str:
        d = asdict(self)
        d["activation_order"] = self.activation_order.value
        d["block_sizes"] = ",".join(str(b) for b in self.block_sizes)
        lines = [f"{key}={_kv_value(value)}" for key, value in d.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "DenseNetConfig":
        raw = parse_kv(text)
        return config_from_mapping(raw)


def _kv_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


MODEL_KEYS = (
    "block_sizes", "growth_rate", "bottleneck", "compression",
    "initial_channels", "activation_order", "num_classes", "in_channels",
)


def config_from_mapping(raw: dict, base: DenseNetConfig | None = None) -> DenseNetConfig:
    kw = {}
    try:
        if "block_sizes" in raw:
            kw["block_sizes"] = tuple(int(x) for x in str(raw["block_sizes"]).split(",") if x.strip())
        for key in ("growth_rate", "num_classes", "in_channels"):
            if key in raw:
                kw[key] = int(raw[key])
        if raw.get("initial_channels") not in (None, "", "None"):
            kw["initial_channels"] = int(raw["initial_channels"])
        if "compression" in raw:
            kw["compression"] = float(raw["compression"])
        if "bottleneck" in raw:
            kw["bottleneck"] = _parse_bool(raw["bottleneck"])
        if "activation_order" in raw:
            kw["activation_order"] = ActivationOrder(str(raw["activation_order"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if base is not None:
        if "growth_rate" in kw and "initial_channels" not in kw:
            kw["initial_channels"] = 2 * kw["growth_rate"]
        return replace(base, **kw)
    missing = {"block_sizes", "growth_rate"} - kw.keys()
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    return DenseNetConfig(**kw)


def blocks_for_depth(depth: int, bottleneck: bool, num_blocks: int = 3) -> tuple[int, ...]:
    """Per-block layer counts for a CIFAR-style DenseNet of total ``depth``."""
    convs_per_layer = 2 if bottleneck else 1
    body = depth - num_blocks - 1
    per_block, rem = divmod(body, num_blocks * convs_per_layer)
    if body <= 0 or rem or per_block < 1:
        raise ConfigError(
            f"depth {depth} does not give a whole number of layers per block "
            f"({num_blocks} blocks, bottleneck={bottleneck})"
        )
    return (per_block,) * num_blocks


def build_config(
    depth_or_blocks,
    k: int,
    bottleneck: bool = False,
    compression: float = 1.0,
    activation_order: ActivationOrder | str = ActivationOrder.PRE,
    num_classes: int = 10,
    initial_channels: int | None = None,
    in_channels: int = 3,
) -> DenseNetConfig:
    if isinstance(depth_or_blocks, int):
        blocks = blocks_for_depth(depth_or_blocks, bottleneck)
    else:
        blocks = tuple(depth_or_blocks)
    return DenseNetConfig(
        block_sizes=blocks,
        growth_rate=k,
        bottleneck=bottleneck,
        compression=compression,
        initial_channels=initial_channels,
        activation_order=activation_order,
        num_classes=num_classes,
        in_channels=in_channels,
    )


def transition_channels(cfg: DenseNetConfig, channels: int) -> int:
    return int(math.floor(cfg.compression * channels))


def block_widths(cfg: DenseNetConfig) -> list[tuple[int, int]]:
    """(input channels, output channels) of every dense block."""
    widths = []
    c = cfg.initial_channels
    for i, m in enumerate(cfg.block_sizes):
        out = c + m * cfg.growth_rate
        widths.append((c, out))
        if i < len(cfg.block_sizes) - 1:
            c = transition_channels(cfg, out)
    return widths


def layer_in_channels(cfg: DenseNetConfig, block_index: int, layer_index: int) -> int:
    c_in, _ = block_widths(cfg)[block_index]
    return c_in + layer_index * cfg.growth_rate


def layer_spec(cfg: DenseNetConfig, block_index: int, layer_index: int) -> LayerSpec:
    """Op sequence of one dense layer; both indices are zero-based."""
    if not 0 <= block_index < len(cfg.block_sizes):
        raise BoundsError(f"block index {block_index} out of range")
    if not 0 <= layer_index < cfg.block_sizes[block_index]:
        raise BoundsError(f"layer index {layer_index} out of range for block {block_index}")
    k = cfg.growth_rate
    c_in = layer_in_channels(cfg, block_index, layer_index)
    concat = OpSpec(LayerOp.CONCAT, c_in)
    bn, relu = OpSpec(LayerOp.BN), OpSpec(LayerOp.RELU)
    wide = BOTTLENECK_FACTOR * k
    if cfg.activation_order is ActivationOrder.PRE:
        if cfg.bottleneck:
            ops = (concat, bn, relu, OpSpec(LayerOp.CONV1X1, wide), bn, relu, OpSpec(LayerOp.CONV3X3, k))
        else:
            ops = (concat, bn, relu, OpSpec(LayerOp.CONV3X3, k))
    else:
        if cfg.bottleneck:
            ops = (concat, OpSpec(LayerOp.CONV1X1, wide), bn, relu, OpSpec(LayerOp.CONV3X3, k), bn, relu)
        else:
            ops = (concat, OpSpec(LayerOp.CONV3X3, k), bn, relu)
    return LayerSpec(block_index, layer_index, c_in, ops)


def conv_param_count(c_in: int, c_out: int, kernel: int) -> int:
    return c_in * c_out * kernel * kernel


def count_parameters(cfg: DenseNetConfig) -> int:
    """Trainable parameters: conv weights, BN scale/bias, classifier."""
    total = conv_param_count(cfg.in_channels, cfg.initial_channels, 3)
    widths = block_widths(cfg)
    for b, m in enumerate(cfg.block_sizes):
        for layer in range(m):
            spec = layer_spec(cfg, b, layer)
            c = spec.in_channels
            for op in spec.ops:
                if op.op is LayerOp.BN:
                    total += 2 * c
                elif op.op in (LayerOp.CONV1X1, LayerOp.CONV3X3):
                    kernel = 1 if op.op is LayerOp.CONV1X1 else 3
                    total += conv_param_count(c, op.out_channels, kernel)
                    c = op.out_channels
        c_block = widths[b][1]
        if b < len(cfg.block_sizes) - 1:
            total += 2 * c_block + conv_param_count(c_block, transition_channels(cfg, c_block), 1)
        else:
            total += 2 * c_block + c_block * cfg.num_classes + cfg.num_classes
    return total


@dataclass(frozen=True)
class StageGeometry:
    """Spatial layout of one dense block plus what follows it."""

    block_index: int
    c_in: int
    c_out: int
    h: int
    w: int
    transition_out: int | None = None
    next_hw: tuple[int, int] | None = field(default=None)


def geometry(cfg: DenseNetConfig, h: int, w: int) -> list[StageGeometry]:
    """Walk blocks and transitions; raises if pooling collapses the maps."""
    out = []
    for b, (c_in, c_out) in enumerate(block_widths(cfg)):
        if h < 1 or w < 1:
            raise ConfigError(f"spatial size collapses below 1 before block {b}")
        last = b == len(cfg.block_sizes) - 1
        if last:
            out.append(StageGeometry(b, c_in, c_out, h, w))
        else:
            nh, nw = h // 2, w // 2
            if nh < 1 or nw < 1:
                raise ConfigError(f"transition after block {b} pools {h}x{w} below 1x1")
            out.append(StageGeometry(b, c_in, c_out, h, w, transition_channels(cfg, c_out), (nh, nw)))
            h, w = nh, nw
    return out


def _imagenet(blocks, k):
    return DenseNetConfig(blocks, k, bottleneck=True, compression=0.5, num_classes=1000)


PRESETS: dict[str, DenseNetConfig] = {
    "desk": DenseNetConfig((2, 2, 2), 4, bottleneck=True, compression=0.5, num_classes=10),
    "tiny": DenseNetConfig((2, 2), 3, bottleneck=True, compression=0.5, num_classes=3),
    "minimal": DenseNetConfig((1,), 2, num_classes=2),
    "cifar-k12": DenseNetConfig((2, 2, 2), 12, num_classes=10),
    "cifar-bc-k12": build_config(100, 12, bottleneck=True, compression=0.5),
    "paper-160-k12": build_config(160, 12, bottleneck=True, compression=0.5),
    "paper-161-k48": _imagenet((6, 12, 36, 24), 48),
    "paper-264-k32": _imagenet((6, 32, 64, 48), 32),
    "paper-264-k48": _imagenet((6, 32, 64, 48), 48),
    "paper-232-k48": _imagenet((6, 32, 48, 48), 48),
    # second block of 12 layers reproduces the quoted 33M / 73M / 55M counts
    "densenet-264-k32": _imagenet((6, 12, 64, 48), 32),
    "densenet-264-k48": _imagenet((6, 12, 64, 48), 48),
    "densenet-232-k48": _imagenet((6, 12, 48, 48), 48),
}


def preset(name: str) -> DenseNetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def with_depth(cfg: DenseNetConfig, depth: int) -> DenseNetConfig:
    """Same family as ``cfg`` (k, bottleneck, compression...) at a new depth."""
    return replace(cfg, block_sizes=blocks_for_depth(depth, cfg.bottleneck, len(cfg.block_sizes)))
