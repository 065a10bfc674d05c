"""Codec tests: signed and conventional slicing against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbsim import (
    CodecError,
    QuantTensor,
    SliceConfig,
    conventional_msb_slice,
    decode,
    decode_conventional,
    decode_signed,
    encode_conventional,
    encode_signed,
    generate_synthetic_tensor,
    read_sbt,
    sparsity_stats,
    write_sbt,
)
from sbsim.synth import Activation, Distribution

from oracles import conventional_digits_ref, signed_digits_ref

P7 = SliceConfig.for_precision(7)


def digits_of(value: int, config: SliceConfig, encoder) -> list[int]:
    tensor = QuantTensor(np.array([value]), config.precision)
    return encoder(tensor, config).planes.ravel().tolist()


def test_worked_value_minus_three():
    digits = digits_of(-3, P7, encode_signed)
    assert digits == [-3, 0]
    # low slice is 1101 as a 4-bit two's-complement pattern, high slice 0000
    assert [d & 0xF for d in digits] == [0b1101, 0b0000]


def test_worked_value_minus_three_conventional():
    assert digits_of(-3, P7, encode_conventional) == [13, -1]


def test_worked_values_twenty_five():
    assert digits_of(25, P7, encode_conventional) == [9, 1]
    assert digits_of(-25, P7, encode_conventional) == [7, -2]
    assert digits_of(25, P7, encode_signed) == [1, 3]
    assert digits_of(-25, P7, encode_signed) == [-1, -3]


def test_msb_slice_of_conventional_encoding():
    t = QuantTensor(np.array([25, -25]), 7)
    assert conventional_msb_slice(t, P7).tolist() == [3, -4]


def test_most_negative_value_top_digit():
    assert digits_of(-64, P7, encode_signed) == [0, -8]
    assert digits_of(-8, SliceConfig.for_precision(4), encode_signed) == [-8]


@pytest.mark.parametrize("precision", [4, 7])
def test_exhaustive_round_trip(precision):
    cfg = SliceConfig.for_precision(precision)
    lo = -(1 << (precision - 1))
    values = np.arange(lo, -lo)
    tensor = QuantTensor(values, precision)
    assert np.array_equal(decode(encode_signed(tensor, cfg)).values, values)
    assert np.array_equal(decode(encode_conventional(tensor, cfg)).values, values)


@pytest.mark.parametrize("slice_width,precision", [(3, 3), (3, 5), (5, 5), (5, 9)])
def test_other_slice_width_families(slice_width, precision):
    cfg = SliceConfig.for_precision(precision, slice_width=slice_width)
    lo = -(1 << (precision - 1))
    values = np.arange(lo, -lo)
    tensor = QuantTensor(values, precision)
    assert np.array_equal(decode_signed(encode_signed(tensor, cfg)).values, values)
    assert np.array_equal(
        decode_conventional(encode_conventional(tensor, cfg)).values, values
    )


@settings(max_examples=300, deadline=None)
@given(
    precision=st.sampled_from([4, 7, 10, 13]),
    raw=st.integers(min_value=0, max_value=(1 << 13) - 1),
)
def test_digits_match_oracle(precision, raw):
    lo = -(1 << (precision - 1))
    value = lo + raw % (1 << precision)
    cfg = SliceConfig.for_precision(precision)
    assert digits_of(value, cfg, encode_signed) == signed_digits_ref(
        value, 4, cfg.num_slices
    )
    assert digits_of(value, cfg, encode_conventional) == conventional_digits_ref(
        value, 4, cfg.num_slices
    )


@settings(max_examples=300, deadline=None)
@given(
    precision=st.sampled_from([4, 7, 10, 13]),
    raw=st.integers(min_value=0, max_value=(1 << 13) - 2),
)
def test_negation_symmetry(precision, raw):
    # every value except the most negative, which has no representable negation
    top = (1 << (precision - 1)) - 1
    value = -top + raw % (2 * top + 1)
    cfg = SliceConfig.for_precision(precision)
    plus = digits_of(value, cfg, encode_signed)
    minus = digits_of(-value, cfg, encode_signed)
    assert minus == [-d for d in plus]


def test_msb_plane_zero_for_small_magnitudes():
    cfg = SliceConfig.for_precision(10)
    below = cfg.base ** (cfg.num_slices - 1)
    values = np.arange(-below + 1, below)
    planes = encode_signed(QuantTensor(values, 10), cfg).planes
    assert not planes[-1].any()


def test_sparsity_stats_counting():
    # plane of 16 digits with 7 zeros -> 0.4375
    values = np.array([0] * 7 + [1] * 9)
    cfg = SliceConfig(4, 1)
    stats = sparsity_stats(encode_signed(QuantTensor(values, 4), cfg))
    assert stats.per_plane_zero_fraction == [7 / 16]
    zeros = QuantTensor(np.zeros(16, dtype=np.int64), 7)
    stats = sparsity_stats(encode_signed(zeros, P7))
    assert stats.total_zero_fraction == 1.0
    assert stats.zero_subword_fraction == 1.0
    assert stats.element_zero_fraction == 1.0


def test_dominance_on_symmetric_tensors():
    # signed zero-digit count >= conventional on symmetric zero-mode data
    for seed, dist in ((3, Distribution.LAPLACE), (4, Distribution.GAUSSIAN)):
        for zf in (0.1, 0.3, 0.57):
            t, _ = generate_synthetic_tensor(
                (4, 24, 24), 7, distribution=dist, zero_fraction=zf, seed=seed
            )
            signed = int((encode_signed(t, P7).planes == 0).sum())
            conv = int((encode_conventional(t, P7).planes == 0).sum())
            assert signed >= conv


def test_seed42_laplace_uplift():
    t, _ = generate_synthetic_tensor(
        (8, 32, 32), 7, distribution=Distribution.LAPLACE,
        activation=Activation.NONE, zero_fraction=0.292, seed=42,
    )
    signed = sparsity_stats(encode_signed(t, P7)).total_zero_fraction
    conv = sparsity_stats(encode_conventional(t, P7)).total_zero_fraction
    assert signed / conv >= 1.3


def test_out_of_range_rejected():
    with pytest.raises(CodecError):
        QuantTensor(np.array([200]), 7)
    with pytest.raises(CodecError):
        QuantTensor(np.array([64]), 7)
    # precision mismatch between tensor and slice config
    with pytest.raises(CodecError):
        encode_signed(QuantTensor(np.array([5]), 7), SliceConfig.for_precision(4))


def test_sbt_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = QuantTensor(rng.integers(-63, 64, size=(3, 5, 7)), 7)
    path = tmp_path / "t.sbt"
    write_sbt(str(path), t)
    back = read_sbt(str(path))
    assert back.precision == 7
    assert np.array_equal(back.values, t.values)
    # zero-element tensors are legal
    empty = QuantTensor(np.zeros((0, 3), dtype=np.int64), 7)
    write_sbt(str(path), empty)
    assert read_sbt(str(path)).values.shape == (0, 3)
