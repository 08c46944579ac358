"""Arena-tagged 4-D tensors (N, C, H, W) with channel-range views.

Every byte of storage handed out by :func:`alloc` or :func:`alloc_region` is
recorded against the active :class:`~denseplan.alloctrace.Accountant`, which
is what makes the feature-map memory numbers exact.
"""
from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ShapeError, SizeOverflowError

MAX_BYTES = 2**63 - 1

_default_dtype = np.dtype(np.float64)


class ArenaTag(enum.Enum):
    PARAMS = "params"
    FEATURE_OWNED = "feature_owned"
    SHARED1 = "shared1"
    SHARED2 = "shared2"
    SHARED_GRAD = "shared_grad"
    SCRATCH = "scratch"


FEATURE_ARENAS = (
    ArenaTag.FEATURE_OWNED,
    ArenaTag.SHARED1,
    ArenaTag.SHARED2,
    ArenaTag.SHARED_GRAD,
    ArenaTag.SCRATCH,
)
POOLED_ARENAS = (ArenaTag.SHARED1, ArenaTag.SHARED2, ArenaTag.SHARED_GRAD)


@dataclass(frozen=True)
class Shape4:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ShapeError(f"Shape4.{name} must be a positive integer, got {v!r}")

    @classmethod
    def of(cls, shape) -> "Shape4":
        if isinstance(shape, Shape4):
            return shape
        if len(shape) != 4:
            raise ShapeError(f"expected 4 dims, got {tuple(shape)}")
        return cls(*(int(d) for d in shape))

    @property
    def element_count(self) -> int:
        return self.n * self.c * self.h * self.w

    @property
    def spatial(self) -> int:
        return self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    def with_channels(self, c: int) -> "Shape4":
        return Shape4(self.n, c, self.h, self.w)

    def __iter__(self):
        return iter(self.as_tuple())


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = resolve_dtype(dtype)


@contextmanager
def dtype_scope(dtype):
    """Temporarily change the element type used by :func:`alloc`."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = resolve_dtype(dtype)
    try:
        yield _default_dtype
    finally:
        _default_dtype = old


def resolve_dtype(dtype) -> np.dtype:
    aliases = {"f64": np.float64, "f32": np.float32}
    dt = np.dtype(aliases.get(dtype, dtype))
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ShapeError(f"unsupported element type {dt}")
    return dt


def _accountant():
    from . import alloctrace

    return alloctrace.current()


class Tensor:
    """A 4-D array plus the arena that pays for its storage.

    Tensors built by :func:`alloc` own their bytes and must be released with
    :meth:`free`.  Views (from :func:`channel_view` or pooled regions) never
    touch the counters.
    """

    __slots__ = ("data", "arena", "_owner", "_accountant", "_freed")

    def __init__(self, data: np.ndarray, arena: ArenaTag, *, _owner=False, _accountant=None):
        if data.ndim != 4:
            raise ShapeError(f"Tensor data must be 4-D, got ndim={data.ndim}")
        self.data = data
        self.arena = arena
        self._owner = _owner
        self._accountant = _accountant
        self._freed = False

    @property
    def shape(self) -> Shape4:
        return Shape4(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def contiguous(self) -> bool:
        return bool(self.data.flags.c_contiguous)

    @property
    def nbytes(self) -> int:
        return self.data.size * self.data.itemsize

    @property
    def is_view(self) -> bool:
        return not self._owner

    @property
    def freed(self) -> bool:
        return self._freed

    def free(self) -> None:
        if not self._owner:
            raise ShapeError("cannot free a view; free the owning tensor")
        if self._freed:
            return
        self._accountant.record_free(self.arena, self.nbytes)
        self._freed = True

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "view" if self.is_view else "owned"
        return f"Tensor(shape={self.data.shape}, dtype={self.dtype}, arena={self.arena.value}, {kind})"


def _check_bytes(count: int, dtype: np.dtype) -> int:
    nbytes = count * dtype.itemsize
    if nbytes > MAX_BYTES:
        raise SizeOverflowError(f"{count} elements of {dtype} overflow a 64-bit byte count")
    return nbytes


def alloc(shape, arena: ArenaTag, dtype=None) -> Tensor:
    """Zero-initialised contiguous tensor charged to ``arena``."""
    dt = resolve_dtype(dtype) if dtype is not None else _default_dtype
    if not isinstance(shape, Shape4):
        dims = tuple(shape)
        if len(dims) != 4:
            raise ShapeError(f"expected 4 dims, got {dims}")
        # overflow must be reported before numpy tries to build the array
        count = 1
        for d in dims:
            count *= int(d)
        _check_bytes(count, dt)
        shape = Shape4.of(dims)
    nbytes = _check_bytes(shape.element_count, dt)
    acct = _accountant()
    data = np.zeros(shape.as_tuple(), dtype=dt)
    acct.record_alloc(arena, nbytes)
    return Tensor(data, arena, _owner=True, _accountant=acct)


def wrap(array: np.ndarray, arena: ArenaTag = ArenaTag.SCRATCH) -> Tensor:
    """Unaccounted tensor around caller-owned data (inputs, test fixtures)."""
    return Tensor(np.asarray(array), arena)


def channel_view(t: Tensor, c_start: int, c_len: int) -> Tensor:
    if not t.contiguous:
        raise ShapeError("channel_view requires a contiguous parent")
    c = t.data.shape[1]
    if c_start < 0 or c_len < 1 or c_start + c_len > c:
        raise BoundsError(f"channel range [{c_start}, {c_start + c_len}) outside 0..{c}")
    return Tensor(t.data[:, c_start:c_start + c_len], t.arena)


def copy_into(src: Tensor, dst: Tensor) -> None:
    if src.data.shape != dst.data.shape:
        raise ShapeError(f"copy_into shape mismatch {src.data.shape} -> {dst.data.shape}")
    np.copyto(dst.data, src.data)


class Region:
    """A flat block of pooled storage that hands out aliased 4-D views.

    Regions back the shared buffers; any view may be overwritten by the next
    one taken, so callers must never rely on earlier contents.
    """

    __slots__ = ("name", "arena", "capacity", "buffer", "_owner_tensor", "high_water")

    def __init__(self, name: str, capacity: int, arena: ArenaTag, dtype=None):
        self.name = name
        self.arena = arena
        self.capacity = int(capacity)
        if self.capacity < 1:
            raise ShapeError(f"region {name!r} needs a positive capacity")
        self._owner_tensor = alloc((1, self.capacity, 1, 1), arena, dtype)
        self.buffer = self._owner_tensor.data.reshape(-1)
        self.high_water = 0

    def view(self, shape) -> Tensor:
        from .errors import CapacityError

        shape = Shape4.of(shape)
        count = shape.element_count
        if count > self.capacity:
            raise CapacityError(
                f"region {self.name!r} holds {self.capacity} elements, {count} requested"
            )
        self.high_water = max(self.high_water, count)
        return Tensor(self.buffer[:count].reshape(shape.as_tuple()), self.arena)

    def fill(self, value: float) -> None:
        self.buffer[:] = value

    def free(self) -> None:
        self._owner_tensor.free()

    @property
    def nbytes(self) -> int:
        return self._owner_tensor.nbytes


def alloc_region(name: str, capacity: int, arena: ArenaTag, dtype=None) -> Region:
    return Region(name, capacity, arena, dtype)
