"""Bit-slice codecs for quantized integer tensors.

A fixed-point value of precision ``p = (w - 1) * n + 1`` bits splits into
``n`` slices that a ``w``-bit datapath can process one at a time.  Two
encodings are provided:

* signed recode (``EncodingKind.SIGNED``): base ``B = 2**(w-1)`` magnitude
  digits of ``|x|`` with the sign of ``x`` applied to every digit.  Small
  negative values then have zero high-order slices instead of the
  sign-extension patterns a 2's-complement split would produce.
* conventional (``EncodingKind.CONVENTIONAL``): the sign-extended
  ``w * n``-bit 2's-complement pattern cut into ``w``-bit groups, low group
  first.  Low groups are unsigned, the top group is signed, and the value
  reconstructs with base ``2**w``.

Slices pack four at a time into sub-words (little-endian ``w``-bit
2's-complement fields) so a zero sub-word marks four consecutive zero
digits along the packing axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

DIGITS_PER_SUBWORD = 4

SBT_MAGIC = b"SBT1"


class CodecError(ValueError):
    pass


class EncodingKind(Enum):
    SIGNED = "signed"
    CONVENTIONAL = "conventional"


@dataclass(frozen=True)
class SliceConfig:
    """Slice-grid parameters: ``w``-bit slices, ``n`` of them per value.

    The covered precision is ``p = (w - 1) * n + 1``; only precisions on
    that grid are representable (for w=4: p in {4, 7, 10, 13, ...}).
    """

    slice_width: int = 4
    num_slices: int = 2

    def __post_init__(self) -> None:
        if not 3 <= self.slice_width <= 5:
            raise CodecError(f"slice_width must be in [3, 5], got {self.slice_width}")
        if self.num_slices < 1:
            raise CodecError(f"num_slices must be >= 1, got {self.num_slices}")

    @property
    def magnitude_bits(self) -> int:
        return self.slice_width - 1

    @property
    def base(self) -> int:
        return 1 << self.magnitude_bits

    @property
    def precision(self) -> int:
        return self.magnitude_bits * self.num_slices + 1

    @classmethod
    def for_precision(cls, precision: int, slice_width: int = 4) -> "SliceConfig":
        """Return the config covering ``precision`` exactly, or raise.

        Rejects any (w, p) pair off the grid p = (w-1)*n + 1.
        """
        m = slice_width - 1
        if m <= 0 or (precision - 1) % m != 0 or precision < slice_width:
            raise CodecError(
                f"precision {precision} is not on the (w={slice_width}) slice grid"
            )
        return cls(slice_width=slice_width, num_slices=(precision - 1) // m)


def _value_bounds(precision: int) -> tuple[int, int]:
    return -(1 << (precision - 1)), (1 << (precision - 1)) - 1


@dataclass
class QuantTensor:
    """Integer tensor with a declared 2's-complement precision."""

    values: np.ndarray
    precision: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.precision < 1:
            raise CodecError(f"precision must be >= 1, got {self.precision}")
        lo, hi = _value_bounds(self.precision)
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise CodecError(
                f"values out of range for {self.precision}-bit precision"
            )

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class SliceTensor:
    """Digit planes of a tensor: ``planes[i]`` holds slice order ``i``.

    Signed-recode digits lie in [-(B-1), B-1] except the top plane, which
    admits -B for the most negative representable value.  Conventional
    digits are unsigned in [0, 2**w - 1] except the signed top plane.
    """

    config: SliceConfig
    planes: np.ndarray  # shape [n, *dims]
    kind: EncodingKind

    def __post_init__(self) -> None:
        self.planes = np.asarray(self.planes, dtype=np.int64)
        if self.planes.shape[0] != self.config.num_slices:
            raise CodecError("plane count does not match num_slices")
        self._validate_digits()

    def _validate_digits(self) -> None:
        if not self.planes.size:
            return
        n = self.config.num_slices
        b = self.config.base
        if self.kind is EncodingKind.SIGNED:
            low, top = self.planes[: n - 1], self.planes[n - 1]
            if low.size and np.abs(low).max() >= b:
                raise CodecError("low-order signed digit out of [-(B-1), B-1]")
            if top.min() < -b or top.max() >= b:
                raise CodecError("top signed digit out of [-B, B-1]")
        else:
            full = 1 << self.config.slice_width
            low, top = self.planes[: n - 1], self.planes[n - 1]
            if low.size and (low.min() < 0 or low.max() >= full):
                raise CodecError("low conventional digit out of [0, 2^w - 1]")
            if top.min() < -full // 2 or top.max() >= full // 2:
                raise CodecError("top conventional digit out of signed w-bit range")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.planes.shape[1:]


def encode_signed(tensor: QuantTensor, config: SliceConfig) -> SliceTensor:
    """Recode a tensor into signed digit planes.

    Digits are the base-B digits of ``|x|`` with ``sign(x)`` applied to
    every digit.  The most negative value ``-2**(p-1)`` yields ``-B`` in
    the top plane and zeros below.
    """
    if tensor.precision != config.precision:
        raise CodecError(
            f"tensor precision {tensor.precision} != config precision {config.precision}"
        )
    n, b = config.num_slices, config.base
    sign = np.sign(tensor.values)
    mag = np.abs(tensor.values)
    planes = np.empty((n,) + tensor.values.shape, dtype=np.int64)
    for i in range(n - 1):
        planes[i] = mag % b
        mag //= b
    planes[n - 1] = mag  # at most B, hit only by the most negative value
    planes *= sign
    return SliceTensor(config=config, planes=planes, kind=EncodingKind.SIGNED)


def decode_signed(slices: SliceTensor) -> QuantTensor:
    """Invert :func:`encode_signed`: sum of ``planes[i] * B**i``."""
    if slices.kind is not EncodingKind.SIGNED:
        raise CodecError("decode_signed requires a signed-recode SliceTensor")
    b = slices.config.base
    values = np.zeros(slices.dims, dtype=np.int64)
    for i in range(slices.config.num_slices):
        values += slices.planes[i] * (b**i)
    return QuantTensor(values=values, precision=slices.config.precision)


def encode_conventional(tensor: QuantTensor, config: SliceConfig) -> SliceTensor:
    """Cut the sign-extended ``w*n``-bit 2's-complement pattern into w-bit groups.

    Low groups (orders 0..n-2) are unsigned; the top group is signed.
    ``sum(u_i * (2**w)**i) + s_top * (2**w)**(n-1)`` reconstructs the value.
    """
    if tensor.precision != config.precision:
        raise CodecError(
            f"tensor precision {tensor.precision} != config precision {config.precision}"
        )
    w, n = config.slice_width, config.num_slices
    total_bits = w * n
    full = 1 << w
    pattern = np.asarray(tensor.values, dtype=np.int64) & ((1 << total_bits) - 1)
    planes = np.empty((n,) + tensor.values.shape, dtype=np.int64)
    for i in range(n):
        planes[i] = (pattern >> (w * i)) & (full - 1)
    top = planes[n - 1]
    planes[n - 1] = np.where(top >= full // 2, top - full, top)
    return SliceTensor(config=config, planes=planes, kind=EncodingKind.CONVENTIONAL)


def decode_conventional(slices: SliceTensor) -> QuantTensor:
    if slices.kind is not EncodingKind.CONVENTIONAL:
        raise CodecError("decode_conventional requires a conventional SliceTensor")
    radix = 1 << slices.config.slice_width
    values = np.zeros(slices.dims, dtype=np.int64)
    for i in range(slices.config.num_slices):
        values += slices.planes[i] * (radix**i)
    return QuantTensor(values=values, precision=slices.config.precision)


def decode(slices: SliceTensor) -> QuantTensor:
    if slices.kind is EncodingKind.SIGNED:
        return decode_signed(slices)
    return decode_conventional(slices)


def conventional_msb_slice(tensor: QuantTensor, config: SliceConfig) -> np.ndarray:
    """Signed top ``w`` bits of the raw p-bit pattern (no sign extension).

    This is the grid-aligned conventional split (p = (w-1)*n + 1 bits cut at
    multiples of w-1): the top slice equals ``x >> ((w-1)*(n-1))`` with
    arithmetic shift.  Used to compare high-slice products between
    encodings on the same grid.
    """
    if tensor.precision != config.precision:
        raise CodecError("tensor precision does not match config")
    shift = config.magnitude_bits * (config.num_slices - 1)
    return tensor.values >> shift


# ---------------------------------------------------------------------------
# sub-word packing
# ---------------------------------------------------------------------------


@dataclass
class SubWordStream:
    """Digit plane packed into 4-digit sub-words along one axis.

    Each sub-word holds DIGITS_PER_SUBWORD little-endian w-bit
    2's-complement fields (digit j at bits [w*j + w - 1 : w*j]); the tail
    group is zero-padded.  Sub-word order is row-major with the packing
    axis moved innermost.
    """

    words: np.ndarray  # uint32, flat
    slice_width: int
    plane_shape: tuple[int, ...] | None
    axis: int = -1

    def __post_init__(self) -> None:
        self.words = np.asarray(self.words, dtype=np.uint32)
        if self.plane_shape is not None:
            self.plane_shape = tuple(int(d) for d in self.plane_shape)

    @property
    def total_subwords(self) -> int:
        return int(self.words.size)

    @property
    def subword_bits(self) -> int:
        return self.slice_width * DIGITS_PER_SUBWORD

    @property
    def zero_mask(self) -> np.ndarray:
        return self.words == 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SubWordStream):
            return NotImplemented
        return (
            self.slice_width == other.slice_width
            and self.plane_shape == other.plane_shape
            and self.axis == other.axis
            and np.array_equal(self.words, other.words)
        )


def _grouped_digits(plane: np.ndarray, axis: int) -> np.ndarray:
    """Return digits as [rows, groups, DIGITS_PER_SUBWORD] with zero-padded tail."""
    moved = np.moveaxis(plane, axis, -1)
    length = moved.shape[-1]
    groups = (length + DIGITS_PER_SUBWORD - 1) // DIGITS_PER_SUBWORD
    rows = moved.reshape(-1, length)
    padded = np.zeros((rows.shape[0], groups * DIGITS_PER_SUBWORD), dtype=np.int64)
    padded[:, :length] = rows
    return padded.reshape(rows.shape[0], groups, DIGITS_PER_SUBWORD)


def pack_subwords(plane: np.ndarray, slice_width: int, axis: int = -1) -> SubWordStream:
    """Pack a digit plane into sub-words of four digits along ``axis``."""
    plane = np.asarray(plane, dtype=np.int64)
    half = 1 << (slice_width - 1)
    if plane.size and (plane.min() < -half or plane.max() >= half):
        # -B from the top signed plane still fits: it is the w-bit minimum
        raise CodecError("digit does not fit a signed w-bit field")
    grouped = _grouped_digits(plane, axis)
    fields = grouped & ((1 << slice_width) - 1)
    words = np.zeros(grouped.shape[:2], dtype=np.uint32)
    for j in range(DIGITS_PER_SUBWORD):
        words |= (fields[:, :, j] << (slice_width * j)).astype(np.uint32)
    return SubWordStream(
        words=words.reshape(-1),
        slice_width=slice_width,
        plane_shape=plane.shape,
        axis=axis,
    )


def unpack_subwords(stream: SubWordStream) -> np.ndarray:
    """Exact inverse of :func:`pack_subwords` (tail padding removed)."""
    if stream.plane_shape is None:
        raise CodecError("stream carries no plane shape; cannot unpack")
    w = stream.slice_width
    half = 1 << (w - 1)
    shape = stream.plane_shape
    axis = stream.axis % len(shape) if shape else 0
    moved_shape = tuple(np.moveaxis(np.empty(shape, dtype=np.int8), axis, -1).shape)
    length = moved_shape[-1] if moved_shape else 0
    groups = (length + DIGITS_PER_SUBWORD - 1) // DIGITS_PER_SUBWORD
    rows = stream.words.reshape(-1, groups) if groups else stream.words.reshape(-1, 0)
    digits = np.zeros((rows.shape[0], groups * DIGITS_PER_SUBWORD), dtype=np.int64)
    for j in range(DIGITS_PER_SUBWORD):
        f = (rows >> (w * j)) & np.uint32((1 << w) - 1)
        f = f.astype(np.int64)
        digits[:, j::DIGITS_PER_SUBWORD] = np.where(f >= half, f - (1 << w), f)
    digits = digits[:, :length].reshape(moved_shape)
    return np.moveaxis(digits, -1, axis)


def zero_subword_mask(plane: np.ndarray, axis: int = -1) -> np.ndarray:
    """Boolean [rows, groups] mask: True where all four digits are zero."""
    grouped = _grouped_digits(np.asarray(plane, dtype=np.int64), axis)
    return (grouped == 0).all(axis=-1)


# ---------------------------------------------------------------------------
# sparsity statistics
# ---------------------------------------------------------------------------


@dataclass
class SparsityStats:
    """Zero-content measurements of a SliceTensor.

    ``total_zero_fraction`` is the element-weighted mean over planes (all
    planes hold one digit per element).  Sub-word fractions are measured
    after packing along the caller's axis (innermost spatial axis for
    activations, output-channel axis for weights).
    """

    per_plane_zero_fraction: list[float]
    total_zero_fraction: float
    per_plane_zero_subword_fraction: list[float]
    zero_subword_fraction: float
    element_zero_fraction: float


def sparsity_stats(slices: SliceTensor, packing_axis: int = -1) -> SparsityStats:
    n = slices.config.num_slices
    per_plane = []
    per_plane_sw = []
    for i in range(n):
        plane = slices.planes[i]
        per_plane.append(float(np.mean(plane == 0)) if plane.size else 0.0)
        mask = zero_subword_mask(plane, packing_axis)
        per_plane_sw.append(float(mask.mean()) if mask.size else 0.0)
    element_zero = (
        float(np.mean((slices.planes == 0).all(axis=0))) if slices.planes.size else 0.0
    )
    return SparsityStats(
        per_plane_zero_fraction=per_plane,
        total_zero_fraction=float(np.mean(per_plane)) if per_plane else 0.0,
        per_plane_zero_subword_fraction=per_plane_sw,
        zero_subword_fraction=float(np.mean(per_plane_sw)) if per_plane_sw else 0.0,
        element_zero_fraction=element_zero,
    )


# ---------------------------------------------------------------------------
# tensor file format (SBT1)
# ---------------------------------------------------------------------------


def write_sbt(path: str, tensor: QuantTensor) -> None:
    """Write `SBT1` format: magic, u32 precision, u32 ndims, u32 dims, i32 values."""
    lo, hi = _value_bounds(tensor.precision)
    if tensor.values.size and (tensor.values.min() < lo or tensor.values.max() > hi):
        raise CodecError("tensor values out of declared range")
    if tensor.precision > 32:
        raise CodecError("SBT1 stores i32 values; precision > 32 unsupported")
    with open(path, "wb") as fh:
        fh.write(SBT_MAGIC)
        fh.write(struct.pack("<II", tensor.precision, len(tensor.dims)))
        for d in tensor.dims:
            fh.write(struct.pack("<I", d))
        fh.write(tensor.values.astype("<i4").tobytes())


def read_sbt(path: str) -> QuantTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SBT_MAGIC:
        raise CodecError("bad magic; not an SBT1 file")
    precision, ndims = struct.unpack_from("<II", data, 4)
    offset = 12
    dims = []
    for _ in range(ndims):
        (d,) = struct.unpack_from("<I", data, offset)
        dims.append(d)
        offset += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = offset + 4 * count
    if len(data) != expected:
        raise CodecError(
            f"truncated or oversized SBT1 payload: {len(data)} != {expected} bytes"
        )
    values = np.frombuffer(data, dtype="<i4", count=count, offset=offset)
    values = values.astype(np.int64).reshape(dims)
    return QuantTensor(values=values, precision=precision)  # range re-checked here
