"""Acceptance gate: twelve numbered criteria, one reported line each.

Each test computes its evidence, prints a single
``[acceptance] criterion NN PASS/FAIL - detail`` line through the shared
reporter, and then asserts.  Criteria that quote tolerances or counts
use exactly those; derived quantities are checked against the
independent oracles in ``oracles.py``, never against the code under
test.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from sbsim import (
    Baseline,
    Instruction,
    LayerDescriptor,
    LayerKind,
    Opcode,
    PEConfig,
    Program,
    ProgramExecutor,
    QuantTensor,
    SkipMode,
    SkipOperand,
    SliceConfig,
    SpeculationConfig,
    SpeculationMode,
    accumulation_chain,
    compressed_bits,
    compression_ratio,
    conventional_msb_slice,
    decode,
    decode_instruction,
    disassemble,
    dsm_decide,
    encode_conventional,
    encode_instruction,
    encode_signed,
    layer_execute,
    layer_setup_program,
    pack_subwords,
    raw_bits,
    rle_compress,
    rle_decompress,
    sparsity_stats,
    speculation_scores,
    speculative_layer_execute,
)
from sbsim.harness import default_benchmark_config, emit_report, run_experiment
from sbsim.isa import TARGET_MPU_BASE, assemble
from sbsim.synth import Distribution, generate_synthetic_tensor

from conftest import acceptance_line, random_layer
from oracles import (
    chain_exact_ref,
    conv2d_ref,
    count_zero_digits_ref,
    conventional_digits_ref,
    rle_ref,
    signed_digits_ref,
    unrle_ref,
)

_T0 = time.monotonic()

P7 = SliceConfig.for_precision(7)

# (slice width, precisions): the 4-bit production grid plus the two
# smallest precisions of the neighbouring width families
FAMILIES = [(4, (4, 7, 10, 13)), (3, (3, 5)), (5, (5, 9))]


def _check(number, ok, detail):
    acceptance_line(number, bool(ok), detail)
    assert ok, f"criterion {number:02d}: {detail}"


@pytest.fixture(scope="module")
def bench_first():
    return run_experiment(default_benchmark_config())


def _rows_by(bench, layer, mode=None, p_in=None):
    rows = [r for r in bench["results"] if r["layer"] == layer]
    if mode is not None:
        rows = [r for r in rows if r["mode"] == mode]
    if p_in is not None:
        rows = [r for r in rows if r["p_in"] == p_in]
    return rows


def test_criterion_01_codec_identity_over_full_ranges():
    start = time.monotonic()
    checked = 0
    exact = True
    for width, precisions in FAMILIES:
        for precision in precisions:
            num = (precision - 1) // (width - 1)
            cfg = SliceConfig(width, num)
            lo = -(1 << (precision - 1))
            values = np.arange(lo, -lo, dtype=np.int64)
            tensor = QuantTensor(values, precision)
            exact &= np.array_equal(
                decode(encode_signed(tensor, cfg)).values, values)
            checked += values.size
    digits = encode_signed(QuantTensor(np.array([-3]), 7), P7).planes.ravel()
    worked = digits.tolist() == [-3, 0] and \
        [d & 0xF for d in digits.tolist()] == [0b1101, 0b0000]
    elapsed = time.monotonic() - start
    _check(1, exact and worked and elapsed < 5.0,
           f"{checked} values round-tripped over {sum(len(p) for _, p in FAMILIES)} "
           f"precision points, worked value -3@p7 -> (0000, 1101), {elapsed:.2f}s")


def test_criterion_02_negation_symmetry():
    failures = 0
    per_precision = 100_000
    rng = np.random.default_rng(20240819)
    for precision in (4, 7, 10, 13):
        cfg = SliceConfig.for_precision(precision)
        top = (1 << (precision - 1)) - 1
        x = rng.integers(-top, top + 1, per_precision)
        pos = encode_signed(QuantTensor(x, precision), cfg).planes
        neg = encode_signed(QuantTensor(-x, precision), cfg).planes
        failures += int(np.sum(np.any(pos != -neg, axis=0)))
    _check(2, failures == 0,
           f"digits(-x) == -digits(x) on {per_precision} draws x 4 precisions, "
           f"{failures} failures")


def test_criterion_03_functional_equivalence_200_layers():
    start = time.monotonic()
    rng = np.random.default_rng(3)
    mismatches = 0
    runs = 0
    modes = [SkipMode.NO_SKIP, SkipMode.INPUT_SKIP, SkipMode.HYBRID_SKIP,
             SkipMode.IN_OUT_SKIP]
    for i in range(200):
        layer, inputs, weights = random_layer(rng, name=f"acc{i}")
        expected = np.array(
            conv2d_ref(inputs.values, weights.values, layer.stride,
                       layer.padding),
            dtype=np.int64,
        )
        for mode in modes:
            for role in (SkipOperand.INPUT, SkipOperand.WEIGHT):
                out, _ = layer_execute(replace(layer, skip_mode=mode),
                                       inputs, weights, role_override=role)
                runs += 1
                if not np.array_equal(out.values, expected):
                    mismatches += 1
    elapsed = time.monotonic() - start
    _check(3, mismatches == 0 and elapsed < 60.0,
           f"200 layers x 4 modes x 2 roles = {runs} runs bit-identical to the "
           f"integer oracle, {elapsed:.1f}s")


def test_criterion_04_chain_error_bound():
    assert accumulation_chain([9, 10], 3) == 11
    rng = np.random.default_rng(4)
    worst = 0
    ok = True
    for n in (2, 3, 4):
        scale = 1 << (3 * (n - 1))
        bound = scale * (n - 1)
        vectors = rng.integers(-2048, 2048, (10_000, n))
        for row in vectors:
            partials = [int(v) for v in row]
            err = abs(accumulation_chain(partials, 3) * scale
                      - chain_exact_ref(partials, 3))
            worst = max(worst, err / scale)
            ok &= err < bound
    _check(4, ok,
           f"|chained*2^(3(n-1)) - exact| < 2^(3(n-1))*(n-1) on 10^4 vectors per "
           f"n in {{2,3,4}}; worst scaled error {worst:.2f}; (10,9)->11")


def test_criterion_05_sparsity_uplift():
    cases = [(0.292, 42), (0.175, 43), (0.573, 44)]
    ratios = []
    counts_ok = True
    total_signed = 0
    total_conv = 0
    for zero_fraction, seed in cases:
        tensor, _ = generate_synthetic_tensor(
            (8, 32, 32), 7, distribution=Distribution.LAPLACE,
            zero_fraction=zero_fraction, seed=seed)
        flat = tensor.values.ravel().tolist()
        oracle_signed = count_zero_digits_ref(flat, 4, 2, signed_digits_ref)
        oracle_conv = count_zero_digits_ref(flat, 4, 2, conventional_digits_ref)
        codec_signed = int((encode_signed(tensor, P7).planes == 0).sum())
        codec_conv = int((encode_conventional(tensor, P7).planes == 0).sum())
        counts_ok &= codec_signed == oracle_signed
        counts_ok &= codec_conv == oracle_conv
        ratios.append(codec_signed / codec_conv)
        total_signed += codec_signed
        total_conv += codec_conv
    pooled = total_signed / total_conv
    detail = (
        "zero-digit counts == counting oracle +/-0 on all three tensors; "
        f"uplift per tensor {ratios[0]:.3f}/{ratios[1]:.3f}/{ratios[2]:.3f}, "
        f"pooled {pooled:.4f} >= 1.3"
    )
    _check(5, counts_ok and pooled >= 1.3, detail)


def _stream_from_words(words):
    stream = pack_subwords(np.zeros(max(len(words), 1) * 4, dtype=np.int64), 4)
    stream.words = np.asarray(words, dtype=np.uint32)
    return stream


def test_criterion_06_compression():
    rng = np.random.default_rng(6)
    failures = 0
    adversarial = [
        [], [0], [0] * 255, [0] * 256, [0] * 257, [0] * 511, [0] * 512,
        [0] * 256 + [7], [0] * 300 + [0xFFFF], [5] + [0] * 256,
        [0xFFFF] * 64, [1, 0] * 100 + [0] * 9,
    ]
    streams = list(adversarial)
    for _ in range(10_000 - len(adversarial)):
        length = int(rng.integers(0, 64))
        words = rng.integers(0, 0x10000, size=length)
        words[rng.random(length) < 0.7] = 0
        streams.append(words.tolist())
    for words in streams:
        plane = rle_compress(_stream_from_words(words))
        payload, index = rle_ref(words)
        round_tripped = rle_decompress(plane).words.tolist()
        if (round_tripped != list(words)
                or plane.payload.tolist() != payload
                or plane.index.tolist() != index
                or round_tripped != unrle_ref(payload, index,
                                              plane.total_subwords)):
            failures += 1

    hybrid_ok = True
    dsm_ok = True
    for _ in range(10):
        vals = rng.integers(-63, 64, size=256) * rng.integers(0, 2, size=256)
        slices = encode_signed(QuantTensor(vals, 7), P7)
        on = off = hybrid = 0
        stats = sparsity_stats(slices)
        decision = dsm_decide(stats, stats)
        for plane, flag in zip(slices.planes, decision.input_compress_flags):
            compressed = rle_compress(pack_subwords(plane, 4))
            on += compressed_bits(compressed)
            off += raw_bits(compressed)
            hybrid += min(compressed_bits(compressed), raw_bits(compressed))
            if flag:
                dsm_ok &= compression_ratio(compressed, Baseline.RAW16) >= 1.0
        hybrid_ok &= hybrid <= on and hybrid <= off
    _check(6, failures == 0 and hybrid_ok and dsm_ok,
           f"10^4 RLE round trips ({len(adversarial)} adversarial) with "
           f"{failures} failures; hybrid <= all-on/all-off; DSM-enabled planes "
           f"realize Raw16 ratio >= 1.0")


def test_criterion_07_cycle_model_laws(bench_first):
    rng = np.random.default_rng(7)
    skip_ok = True
    for i in range(40):
        layer, inputs, weights = random_layer(rng, name=f"law{i}")
        _, base = layer_execute(replace(layer, skip_mode=SkipMode.NO_SKIP),
                                inputs, weights)
        _, skip = layer_execute(replace(layer, skip_mode=SkipMode.INPUT_SKIP),
                                inputs, weights)
        skip_ok &= skip.cycles_total <= base.cycles_total
    for row in bench_first["results"]:
        if row["mode"] != "input_skip":
            continue
        base = _rows_by(bench_first, row["layer"], "no_skip", row["p_in"])[0]
        skip_ok &= row["cycles"] <= base["cycles"]

    column_ok = True
    subwords = 16
    for z in (0.0, 0.25, 0.5, 0.75, 1.0):
        values = np.ones((1, 1, 4 * subwords), dtype=np.int64)
        values[0, 0, : 4 * int(round(z * subwords))] = 0
        layer = LayerDescriptor(
            "col", LayerKind.CONV2D, in_channels=1, height=1,
            width=4 * subwords, out_channels=4, kernel=(1, 1),
            input_slices=SliceConfig.for_precision(4),
            weight_slices=SliceConfig.for_precision(4),
            skip_mode=SkipMode.INPUT_SKIP,
        )
        weights = QuantTensor(np.ones((4, 1, 1, 1), dtype=np.int64), 4)
        _, report = layer_execute(layer, QuantTensor(values, 4), weights,
                                  PEConfig(drain_latency=0))
        column_ok &= report.cycles_total == math.ceil((1 - z) * subwords)

    # slice-pair work grows with the square of the slice count, so the
    # MAC-op ratio against the 7-bit (2-slice) point is n^2/4; the
    # integer cross-multiplication keeps the check exact
    nominal = {}
    for p in (4, 7, 10, 13):
        row = _rows_by(bench_first, "det_conv", "no_skip", p)[0]
        nominal[p] = row["mac_executed"] + row["mac_skipped"]
    scaling_ok = all(
        nominal[p] * 4 == nominal[7] * ((p - 1) // 3) ** 2
        for p in (4, 7, 10, 13)
    )
    throughput_ok = (
        _rows_by(bench_first, "det_conv", "no_skip", 4)[0]["speedup"] == 4.0
        and _rows_by(bench_first, "det_conv", "no_skip", 7)[0]["speedup"] == 1.0
    )
    ratios = [f"{nominal[p] / nominal[7]:g}" for p in (4, 7, 10, 13)]
    _check(7, skip_ok and column_ok and scaling_ok and throughput_ok,
           "InputSkip <= NoSkip on every run; single-column cycles == "
           "ceil((1-z)S) at z in {0,.25,.5,.75,1}; MAC-op ratios vs 7b = "
           f"[{', '.join(ratios)}] (n^2 law), positional throughput x4 at 4b")


def test_criterion_08_skip_mode_ordering(bench_first):
    order = ("input_skip", "hybrid_skip", "in_out_skip")
    pooled_ok = True
    for layer in ("point_vote_fc", "point_edge_fc"):
        speed = {m: _rows_by(bench_first, layer, m, 7)[0]["speedup"]
                 for m in ("no_skip",) + order}
        pooled_ok &= (speed["in_out_skip"] >= speed["hybrid_skip"]
                      >= speed["input_skip"] >= 1.0)
    strict_ok = True
    for layer, p in (("det_conv", 7), ("depth_dec_conv", 10)):
        hybrid = _rows_by(bench_first, layer, "hybrid_skip", p)[0]["speedup"]
        inputs = _rows_by(bench_first, layer, "input_skip", p)[0]["speedup"]
        strict_ok &= hybrid > inputs
    geo = bench_first["summary"]["speedup_geomean"]
    _check(8, pooled_ok and strict_ok,
           "pooled layers ordered in_out >= hybrid >= input >= 1; hybrid > "
           "input strictly on the leaky-relu and elu suites; geomeans "
           f"input {geo['input_skip']:.3f} hybrid {geo['hybrid_skip']:.3f} "
           f"in_out {geo['in_out_skip']:.3f}")


def test_criterion_09_output_speculation():
    x, _ = generate_synthetic_tensor(
        (16, 1, 4096), 7, distribution=Distribution.GAUSSIAN,
        zero_fraction=None, scale=30.0, seed=424242)
    w, _ = generate_synthetic_tensor(
        (8, 16, 1, 1), 7, distribution=Distribution.GAUSSIAN,
        zero_fraction=None, scale=30.0, seed=424243)

    def vote_layer(k):
        return LayerDescriptor(
            "vote", LayerKind.CONV2D, in_channels=16, height=1, width=4096,
            out_channels=8, kernel=(1, 1), pool_window=64,
            input_slices=P7, weight_slices=P7,
            speculation=SpeculationConfig(mode=SpeculationMode.MM,
                                          candidates_k=k, channel_group=4),
        )

    rates = {}
    for k in (1, 2, 4, 8, 64):
        _, stats, _ = speculative_layer_execute(vote_layer(k), x, w)
        rates[k] = stats.success_rate
    monotone = all(rates[a] <= rates[b]
                   for a, b in zip((1, 2, 4, 8), (2, 4, 8, 64)))
    reference, _ = layer_execute(replace(vote_layer(64), speculation=None), x, w)
    full, full_stats, _ = speculative_layer_execute(vote_layer(64), x, w)
    exact_at_window = (np.array_equal(full.values, reference.values)
                       and full_stats.success_rate == 1.0)

    demo = LayerDescriptor(
        "demo", LayerKind.CONV2D, in_channels=1, height=1, width=4,
        out_channels=1, kernel=(1, 1), pool_window=4,
        input_slices=P7, weight_slices=P7,
        speculation=SpeculationConfig(mode=SpeculationMode.MM,
                                      candidates_k=1, channel_group=4),
    )
    signed_scores = {}
    for v in (25, -25):
        xv = QuantTensor(np.full((1, 1, 4), v, dtype=np.int64), 7)
        wv = QuantTensor(np.array([[[[v]]]]), 7)
        s = speculation_scores(demo, encode_signed(xv, P7),
                               encode_signed(wv, P7))
        signed_scores[v] = s.ravel().tolist()
    conv_squares = [
        int(conventional_msb_slice(QuantTensor(np.array([v]), 7), P7)[0]) ** 2
        for v in (25, -25)
    ]
    balanced = (signed_scores[25] == signed_scores[-25]
                and sorted(conv_squares) == [9, 16])

    _check(9, monotone and rates[4] >= 0.90 and exact_at_window and balanced,
           f"success rates k=1/2/4/8 = {rates[1]:.3f}/{rates[2]:.3f}/"
           f"{rates[4]:.3f}/{rates[8]:.3f} non-decreasing, k=4 >= 0.90, "
           "k == window bit-exact; +/-25 signed scores equal while "
           "conventional high slices square to 16 vs 9")


def test_criterion_10_chained_link_width():
    from sbsim import uni_noc_link_width

    pe = PEConfig()
    widths = [uni_noc_link_width(pe, n) for n in range(1, 7)]
    constant = len({w.chained_bits for w in widths}) == 1
    naive_law = all(w.naive_bits == w.chained_bits + 3 * (n - 1)
                    for n, w in enumerate(widths, start=1))
    four = widths[3]
    reduction_pct = round(four.reduction * 100, 1)
    _check(10, constant and naive_law and reduction_pct == 42.9,
           f"chained width {widths[0].chained_bits}b constant in n, naive = "
           f"chained + 3(n-1); n=4 acc12 reduction {reduction_pct}%")


def test_criterion_11_isa_round_trips_and_fetch_law():
    rng = np.random.default_rng(11)
    opcodes = list(Opcode)
    failures = 0
    instructions = []
    for _ in range(10_000):
        inst = Instruction(int(rng.integers(0, 7)),
                           opcodes[int(rng.integers(0, len(opcodes)))],
                           int(rng.integers(0, 0x10000)))
        back = decode_instruction(encode_instruction(inst))
        if (back.target, back.opcode, back.operand) != (
                inst.target, inst.opcode, inst.operand):
            failures += 1
        instructions.append(inst)
    program = Program(instructions=instructions)
    if assemble(disassemble(program)).words() != program.words():
        failures += 1

    layer = LayerDescriptor(
        "tile", LayerKind.CONV2D, in_channels=2, height=4, width=8,
        out_channels=4, kernel=(1, 1), input_slices=P7, weight_slices=P7,
        skip_mode=SkipMode.INPUT_SKIP,
    )
    x = QuantTensor(rng.integers(-63, 64, (2, 4, 8)), 7)
    w = QuantTensor(rng.integers(-63, 64, (4, 2, 1, 1)), 7)
    setup = layer_setup_program(TARGET_MPU_BASE, layer,
                                ibase=0x100, wbase=0x200, obase=0x300)
    run = [Instruction(TARGET_MPU_BASE, Opcode.RUN, 0)] * 10
    ex = ProgramExecutor(n_mpus=1, memory={0x100: x, 0x200: w})
    trace = ex.run(Program(instructions=setup.instructions + run))
    fetch_law = (trace.fetch_count == len(setup.instructions) + 10
                 and len(trace.records) == 10)
    _check(11, failures == 0 and fetch_law,
           f"10^4 instruction encode/decode + assembly round trips, "
           f"{failures} failures; 10 tiles fetch setup+10 = {trace.fetch_count}")


def test_criterion_12_determinism_and_budget(bench_first, tmp_path):
    second = run_experiment(default_benchmark_config())
    dir_a = tmp_path / "a"
    dir_b = tmp_path / "b"
    emit_report(bench_first, dir_a)
    emit_report(second, dir_b)
    identical = all(
        (dir_a / name).read_bytes() == (dir_b / name).read_bytes()
        for name in ("results.csv", "transfers.csv", "summary.json")
    )
    elapsed = time.monotonic() - _T0
    _check(12, identical and elapsed < 600.0,
           f"two seeded benchmark runs byte-identical across CSV/JSON; "
           f"acceptance module wall time {elapsed:.1f}s < 600s")
