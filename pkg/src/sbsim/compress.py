"""Run-length compression of sub-word streams and the skip/compress policy.

The payload buffer keeps only nonzero sub-words; an 8-bit index entry per
payload sub-word records how many zero sub-words preceded it.  Runs longer
than 255 are split by emitting an explicit zero sub-word with run 255.
Trailing zeros are carried only by the stream's total sub-word count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .sbr import DIGITS_PER_SUBWORD, SparsityStats, SubWordStream

SBC_MAGIC = b"SBC1"
INDEX_BITS = 8
MAX_RUN = (1 << INDEX_BITS) - 1


class CompressionError(ValueError):
    pass


@dataclass
class CompressedPlane:
    """RLE form of one digit plane's sub-word stream."""

    payload: np.ndarray  # uint32 nonzero sub-words (plus run-split zero fillers)
    index: np.ndarray  # uint16 zero-run length before each payload entry
    total_subwords: int
    slice_width: int
    plane_shape: tuple[int, ...] | None = None
    axis: int = -1

    def __post_init__(self) -> None:
        self.payload = np.asarray(self.payload, dtype=np.uint32)
        self.index = np.asarray(self.index, dtype=np.uint16)
        if self.payload.size != self.index.size:
            raise CompressionError("payload and index lengths differ")
        if self.index.size and self.index.max() > MAX_RUN:
            raise CompressionError("zero-run exceeds the 8-bit index range")

    @property
    def payload_count(self) -> int:
        return int(self.payload.size)

    @property
    def subword_bits(self) -> int:
        return self.slice_width * DIGITS_PER_SUBWORD


def rle_compress(stream: SubWordStream) -> CompressedPlane:
    words = stream.words
    payload: list[int] = []
    index: list[int] = []
    run = 0
    for word in words.tolist():
        if word == 0:
            run += 1
            if run > MAX_RUN:
                # split the run: explicit zero sub-word carrying a full run
                payload.append(0)
                index.append(MAX_RUN)
                run = 0
            continue
        payload.append(word)
        index.append(run)
        run = 0
    plane = CompressedPlane(
        payload=np.array(payload, dtype=np.uint32),
        index=np.array(index, dtype=np.uint16),
        total_subwords=stream.total_subwords,
        slice_width=stream.slice_width,
        plane_shape=stream.plane_shape,
        axis=stream.axis,
    )
    recorded = int(plane.index.sum()) + plane.payload_count
    if recorded > plane.total_subwords:
        raise CompressionError("run accounting exceeds total sub-words")
    return plane


def rle_decompress(plane: CompressedPlane) -> SubWordStream:
    words = np.zeros(plane.total_subwords, dtype=np.uint32)
    pos = 0
    for run, word in zip(plane.index.tolist(), plane.payload.tolist()):
        pos += run
        if pos >= plane.total_subwords:
            raise CompressionError("payload overruns the declared total")
        words[pos] = word
        pos += 1
    return SubWordStream(
        words=words,
        slice_width=plane.slice_width,
        plane_shape=plane.plane_shape,
        axis=plane.axis,
    )


class Baseline(Enum):
    RAW16 = "raw16"
    ORIGINAL_FIXED_POINT = "original_fixed_point"


def compressed_bits(plane: CompressedPlane) -> int:
    """Payload bits plus one index entry per payload sub-word."""
    return plane.payload_count * (plane.subword_bits + INDEX_BITS)


def raw_bits(plane: CompressedPlane) -> int:
    return plane.total_subwords * plane.subword_bits


def compression_ratio(
    plane: CompressedPlane,
    baseline: Baseline = Baseline.RAW16,
    source_precision: int | None = None,
    source_elements: int | None = None,
) -> float:
    """Baseline bits over stored bits; empty payloads yield +inf.

    RAW16 compares against the uncompressed sub-word stream.  The
    fixed-point baseline counts ``p * elements`` source bits, under which
    an uncompressed slice stream is already larger than the original data.
    """
    stored = compressed_bits(plane)
    if baseline is Baseline.RAW16:
        top = raw_bits(plane)
    else:
        if source_precision is None:
            raise CompressionError("fixed-point baseline needs source_precision")
        if source_elements is None:
            if plane.plane_shape is None:
                raise CompressionError("fixed-point baseline needs source_elements")
            source_elements = int(np.prod(plane.plane_shape, dtype=np.int64))
        top = source_precision * source_elements
    if stored == 0:
        return float("inf")
    return top / stored


# ---------------------------------------------------------------------------
# dense-slice monitoring: per-plane compression and per-pass skip choices
# ---------------------------------------------------------------------------


class SkipOperand(Enum):
    INPUT = "input"
    WEIGHT = "weight"
    NONE = "none"


@dataclass(frozen=True)
class DsmPolicy:
    """Decision thresholds.

    Compression pays off when the nonzero sub-word fraction is under
    sw_bits / (sw_bits + index_bits) (2/3 for 16-bit sub-words).  Skipping
    is disabled below ``min_skip_fraction`` zero sub-words, where the
    index-buffer energy would exceed the savings.
    """

    min_skip_fraction: float = 0.05

    def compress_threshold(self, subword_bits: int) -> float:
        return subword_bits / (subword_bits + INDEX_BITS)


@dataclass
class DsmDecision:
    input_zero_subword_fractions: list[float]
    weight_zero_subword_fractions: list[float]
    input_compress_flags: list[bool]
    weight_compress_flags: list[bool]
    # keyed by (input plane order, weight plane order)
    skip_operand: dict[tuple[int, int], SkipOperand] = field(default_factory=dict)


def dsm_decide(
    input_stats: SparsityStats,
    weight_stats: SparsityStats,
    policy: DsmPolicy = DsmPolicy(),
    subword_bits: int = 16,
) -> DsmDecision:
    """Choose, per plane, whether to compress and, per pass, what to skip.

    A pass pairs one input plane with one weight plane; the operand whose
    plane shows the strictly higher zero-sub-word fraction is skipped,
    ties going to the input.  When both fractions sit under the policy
    minimum, skipping is off for that pass.
    """
    threshold = policy.compress_threshold(subword_bits)
    in_fr = input_stats.per_plane_zero_subword_fraction
    w_fr = weight_stats.per_plane_zero_subword_fraction
    decision = DsmDecision(
        input_zero_subword_fractions=list(in_fr),
        weight_zero_subword_fractions=list(w_fr),
        input_compress_flags=[(1.0 - z) < threshold for z in in_fr],
        weight_compress_flags=[(1.0 - z) < threshold for z in w_fr],
    )
    for i, zi in enumerate(in_fr):
        for j, zj in enumerate(w_fr):
            if zi < policy.min_skip_fraction and zj < policy.min_skip_fraction:
                pick = SkipOperand.NONE
            elif zj > zi:
                pick = SkipOperand.WEIGHT
            else:
                pick = SkipOperand.INPUT
            decision.skip_operand[(i, j)] = pick
    return decision


# ---------------------------------------------------------------------------
# compressed plane serialization (SBC1)
# ---------------------------------------------------------------------------


def write_sbc(path: str, plane: CompressedPlane) -> None:
    """Write `SBC1`: magic, u32 total_subwords, u32 payload_count, u16 payload, u8 index."""
    if plane.subword_bits > 16:
        raise CompressionError("SBC1 stores u16 payload entries; sub-word too wide")
    with open(path, "wb") as fh:
        fh.write(SBC_MAGIC)
        fh.write(struct.pack("<II", plane.total_subwords, plane.payload_count))
        fh.write(plane.payload.astype("<u2").tobytes())
        fh.write(plane.index.astype(np.uint8).tobytes())


def read_sbc(path: str, slice_width: int = 4) -> CompressedPlane:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SBC_MAGIC:
        raise CompressionError("bad magic; not an SBC1 file")
    total, count = struct.unpack_from("<II", data, 4)
    offset = 12
    expected = offset + 2 * count + count
    if len(data) != expected:
        raise CompressionError(
            f"truncated or oversized SBC1 payload: {len(data)} != {expected} bytes"
        )
    payload = np.frombuffer(data, dtype="<u2", count=count, offset=offset)
    index = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset + 2 * count)
    return CompressedPlane(
        payload=payload.astype(np.uint32),
        index=index.astype(np.uint16),
        total_subwords=total,
        slice_width=slice_width,
        plane_shape=None,
    )
