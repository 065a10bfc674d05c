"""Sub-word packing, RLE, and the skip/compress policy."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbsim import (
    Baseline,
    CompressionError,
    DsmPolicy,
    QuantTensor,
    SliceConfig,
    compressed_bits,
    compression_ratio,
    dsm_decide,
    encode_signed,
    pack_subwords,
    raw_bits,
    read_sbc,
    rle_compress,
    rle_decompress,
    sparsity_stats,
    unpack_subwords,
    write_sbc,
    zero_subword_mask,
)

from oracles import pack_subwords_ref, rle_ref, unrle_ref


def words_of(digits) -> list[int]:
    stream = pack_subwords(np.array(digits), 4)
    return stream.words.tolist()


def test_packing_frozen_words():
    assert words_of([1, 0, 0, 0]) == [0x0001]
    assert words_of([-1, 0, 0, 0]) == [0x000F]
    assert words_of([-3, 0, 0, 5]) == [0x500D]
    assert words_of([0, 0, 0, 0]) == [0x0000]


def test_unpacking_frozen_words():
    for digits in ([1, 0, 0, 0], [-1, 0, 0, 0], [-3, 0, 0, 5]):
        stream = pack_subwords(np.array(digits), 4)
        assert unpack_subwords(stream).tolist() == digits


def test_tail_padding_removed_on_unpack():
    digits = [3, -2, 7, 0, 0, -1]
    stream = pack_subwords(np.array(digits), 4)
    assert stream.words.size == 2
    assert unpack_subwords(stream).tolist() == digits


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=-8, max_value=7), min_size=1, max_size=40))
def test_packing_matches_oracle(digits):
    assert words_of(digits) == pack_subwords_ref(digits, 4)
    stream = pack_subwords(np.array(digits), 4)
    assert unpack_subwords(stream).tolist() == digits


def test_rle_run_split_frozen():
    words = np.zeros(301, dtype=np.uint32)
    words[300] = 0xA
    stream = pack_subwords(np.zeros(301 * 4, dtype=np.int64), 4)
    stream.words = words
    plane = rle_compress(stream)
    assert plane.payload.tolist() == [0x0, 0xA]
    assert plane.index.tolist() == [255, 44]
    assert rle_decompress(plane).words.tolist() == words.tolist()


@pytest.mark.parametrize(
    "pattern",
    [
        [],
        [0] * 12,
        [5] * 12,
        [0] * 255 + [9],
        [0] * 256 + [9],
        [0] * 511 + [9],
        [0] * 512 + [9],
        [9] + [0] * 300,
        [0, 7, 0, 0, 7, 0, 0, 0],
    ],
)
def test_rle_adversarial_round_trip(pattern):
    stream = pack_subwords(np.zeros(max(len(pattern), 1) * 4, dtype=np.int64), 4)
    stream.words = np.array(pattern or [0], dtype=np.uint32)
    plane = rle_compress(stream)
    ref_payload, ref_index = rle_ref(stream.words.tolist())
    assert plane.payload.tolist() == ref_payload
    assert plane.index.tolist() == ref_index
    back = rle_decompress(plane)
    assert back.words.tolist() == stream.words.tolist()
    assert back.words.tolist() == unrle_ref(
        ref_payload, ref_index, plane.total_subwords
    )


@settings(max_examples=300, deadline=None)
@given(
    st.lists(
        st.integers(min_value=0, max_value=0xFFFF).flatmap(
            lambda w: st.sampled_from([0, 0, 0, w])
        ),
        min_size=1,
        max_size=600,
    )
)
def test_rle_round_trip_property(words):
    stream = pack_subwords(np.zeros(len(words) * 4, dtype=np.int64), 4)
    stream.words = np.array(words, dtype=np.uint32)
    plane = rle_compress(stream)
    assert rle_decompress(plane).words.tolist() == words
    ref_payload, ref_index = rle_ref(words)
    assert plane.payload.tolist() == ref_payload
    assert plane.index.tolist() == ref_index


def test_size_accounting():
    words = np.array([0, 0, 3, 0, 0, 0, 9, 0], dtype=np.uint32)
    stream = pack_subwords(np.zeros(32, dtype=np.int64), 4)
    stream.words = words
    plane = rle_compress(stream)
    assert raw_bits(plane) == 8 * 16
    assert compressed_bits(plane) == 2 * (16 + 8)
    assert compression_ratio(plane, Baseline.RAW16) == (8 * 16) / (2 * 24)


def test_compression_pays_only_below_density_threshold():
    # a 16-bit sub-word plus 8-bit index beats raw storage only while the
    # nonzero fraction stays under 16/24
    total = 240
    for nonzero in (0, 100, 159, 160, 161, 240):
        words = np.zeros(total, dtype=np.uint32)
        words[:nonzero] = 5
        stream = pack_subwords(np.zeros(total * 4, dtype=np.int64), 4)
        stream.words = words
        plane = rle_compress(stream)
        wins = compressed_bits(plane) < raw_bits(plane)
        assert wins == (nonzero / total < 16 / 24)


def test_zero_subword_mask():
    plane = np.array([[0, 0, 0, 0, 1, 0, 0, 0]])
    mask = zero_subword_mask(plane)
    assert mask.shape == (1, 2)
    assert mask.tolist() == [[True, False]]


def _stats(values, zero_runs=0):
    cfg = SliceConfig.for_precision(7)
    return sparsity_stats(encode_signed(QuantTensor(np.asarray(values), 7), cfg))


def test_dsm_skip_operand_selection():
    # decisions are per pass (one input plane paired with one weight plane)
    sparse = _stats([0] * 56 + [9] * 8)
    dense = _stats([9] * 64)
    picks = dsm_decide(sparse, dense).skip_operand
    assert all(p.value == "input" for p in picks.values())
    picks = dsm_decide(dense, sparse).skip_operand
    assert all(p.value == "weight" for p in picks.values())
    # ties go to the input side
    picks = dsm_decide(sparse, sparse).skip_operand
    assert all(p.value == "input" for p in picks.values())
    # both effectively dense: not worth skipping
    picks = dsm_decide(dense, dense, DsmPolicy(min_skip_fraction=0.05)).skip_operand
    assert all(p.value == "none" for p in picks.values())


def test_dsm_compress_flags_match_size_rule():
    t = QuantTensor(np.concatenate([np.zeros(96, dtype=np.int64),
                                    np.arange(1, 33)]), 7)
    cfg = SliceConfig.for_precision(7)
    slices = encode_signed(t, cfg)
    decision = dsm_decide(sparsity_stats(slices), sparsity_stats(slices))
    for plane, flag in zip(slices.planes, decision.input_compress_flags):
        compressed = rle_compress(pack_subwords(plane, 4))
        assert flag == (compressed_bits(compressed) < raw_bits(compressed))


def test_hybrid_never_worse_than_all_on_or_all_off():
    rng = np.random.default_rng(11)
    for _ in range(10):
        vals = rng.integers(-63, 64, size=256) * rng.integers(0, 2, size=256)
        slices = encode_signed(QuantTensor(vals, 7), SliceConfig.for_precision(7))
        on = off = hybrid = 0
        for plane in slices.planes:
            compressed = rle_compress(pack_subwords(plane, 4))
            on += compressed_bits(compressed)
            off += raw_bits(compressed)
            hybrid += min(compressed_bits(compressed), raw_bits(compressed))
        assert hybrid <= on and hybrid <= off


def test_sbc_file_round_trip(tmp_path):
    words = np.array([0, 0, 0x500D, 0] * 9, dtype=np.uint32)
    stream = pack_subwords(np.zeros(words.size * 4, dtype=np.int64), 4)
    stream.words = words
    plane = rle_compress(stream)
    path = tmp_path / "p.sbc"
    write_sbc(str(path), plane)
    back = read_sbc(str(path))
    assert back.payload.tolist() == plane.payload.tolist()
    assert back.index.tolist() == plane.index.tolist()
    assert back.total_subwords == plane.total_subwords
    assert rle_decompress(back).words.tolist() == words.tolist()


def test_rle_rejects_inconsistent_totals():
    words = np.array([0, 5], dtype=np.uint32)
    stream = pack_subwords(np.zeros(8, dtype=np.int64), 4)
    stream.words = words
    plane = rle_compress(stream)
    plane.total_subwords = 1
    with pytest.raises(CompressionError):
        rle_decompress(plane)
