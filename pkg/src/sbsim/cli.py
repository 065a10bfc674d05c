"""Command-line front end.

Subcommands mirror the library layers: tensor codecs (encode, stats,
compress), execution (simulate, speculate), the program toolchain (asm,
disasm), and the benchmark harness (bench, report).  Output is JSON with
sorted keys so runs diff cleanly.
"""

from __future__ import annotations

import argparse
import json
import sys

from .compress import Baseline, compression_ratio, rle_compress, write_sbc
from .harness import (
    ExperimentConfig,
    LayerSpec,
    default_benchmark_config,
    emit_report,
    run_experiment,
    _generate_operands,
)
from .isa import assemble, disassemble, read_sbp, write_sbp
from .pe import AccumulateMode, PEConfig, SkipMode, layer_execute
from .sbr import (
    SliceConfig,
    encode_signed,
    pack_subwords,
    read_sbt,
    sparsity_stats,
)
from .speculate import speculative_layer_execute


def _emit(payload, args) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_floats(v) for v in obj]
    return obj


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = default_benchmark_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _find_layer(cfg: ExperimentConfig, name: str | None) -> LayerSpec:
    if name is None:
        return cfg.layers[0]
    for spec in cfg.layers:
        if spec.name == name:
            return spec
    raise SystemExit(f"no layer named {name!r} in the config")


def _cmd_encode(args) -> int:
    tensor = read_sbt(args.tensor)
    config = SliceConfig.for_precision(tensor.precision, args.slice_width)
    slices = encode_signed(tensor, config)
    stats = sparsity_stats(slices, packing_axis=args.axis)
    _emit(
        _round_floats(
            {
                "precision": tensor.precision,
                "slice_width": config.slice_width,
                "num_slices": config.num_slices,
                "shape": list(tensor.values.shape),
                "per_plane_zero_fraction": list(stats.per_plane_zero_fraction),
                "total_zero_fraction": stats.total_zero_fraction,
            }
        ),
        args,
    )
    return 0


def _cmd_stats(args) -> int:
    tensor = read_sbt(args.tensor)
    config = SliceConfig.for_precision(tensor.precision, args.slice_width)
    slices = encode_signed(tensor, config)
    stats = sparsity_stats(slices, packing_axis=args.axis)
    _emit(
        _round_floats(
            {
                "element_zero_fraction": stats.element_zero_fraction,
                "per_plane_zero_fraction": list(stats.per_plane_zero_fraction),
                "per_plane_zero_subword_fraction": list(
                    stats.per_plane_zero_subword_fraction
                ),
                "total_zero_fraction": stats.total_zero_fraction,
                "zero_subword_fraction": stats.zero_subword_fraction,
            }
        ),
        args,
    )
    return 0


def _cmd_compress(args) -> int:
    tensor = read_sbt(args.tensor)
    config = SliceConfig.for_precision(tensor.precision, args.slice_width)
    slices = encode_signed(tensor, config)
    planes = []
    total_raw16 = 0
    total_stored = 0
    compressed = None
    for order in range(config.num_slices):
        if args.plane is not None and order != args.plane:
            continue
        stream = pack_subwords(slices.planes[order], config.slice_width, axis=args.axis)
        plane = rle_compress(stream)
        compressed = plane
        ratio16 = compression_ratio(plane, Baseline.RAW16)
        ratio_fp = compression_ratio(
            plane,
            Baseline.ORIGINAL_FIXED_POINT,
            source_precision=tensor.precision,
            source_elements=tensor.values.size,
        )
        total_raw16 += plane.total_subwords * plane.subword_bits
        total_stored += plane.payload_count * (plane.subword_bits + 8)
        planes.append(
            {
                "plane": order,
                "total_subwords": plane.total_subwords,
                "payload_subwords": plane.payload_count,
                "ratio_raw16": ratio16 if ratio16 != float("inf") else "inf",
                "ratio_fixed_point": ratio_fp if ratio_fp != float("inf") else "inf",
            }
        )
    if args.out:
        if args.plane is None:
            raise SystemExit("--out stores one plane; pass --plane")
        write_sbc(args.out, compressed)
    _emit(
        _round_floats(
            {
                "planes": planes,
                "overall_ratio_raw16": (
                    total_raw16 / total_stored if total_stored else "inf"
                ),
            }
        ),
        args,
    )
    return 0


def _synthesize(args, spec: LayerSpec, cfg: ExperimentConfig):
    p_in = args.p_in or spec.p_in
    p_w = args.p_w or spec.p_w
    return p_in, p_w, _generate_operands(spec, p_in, p_w, cfg.seed)


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    spec = _find_layer(cfg, args.layer)
    pe = cfg.pe_config()
    p_in, p_w, ops = _synthesize(args, spec, cfg)
    mode = SkipMode(args.mode)
    desc = spec.descriptor(p_in, p_w, mode, pe)
    desc.speculation = None  # the speculate subcommand owns that path
    out, report = layer_execute(
        desc,
        ops.inputs,
        ops.weights,
        pe,
        AccumulateMode.CHAINED if args.chained else AccumulateMode.EXACT,
    )
    _emit(
        _round_floats(
            {
                "layer": spec.name,
                "mode": mode.value,
                "p_in": p_in,
                "p_w": p_w,
                "cycles": report.cycles_total,
                "energy": report.energy(),
                "counters": dict(report.counters),
                "output_shape": list(out.values.shape),
            }
        ),
        args,
    )
    return 0


def _cmd_speculate(args) -> int:
    cfg = _load_config(args)
    spec = _find_layer(cfg, args.layer)
    if args.k is not None:
        spec.spec_k = args.k
    if spec.spec_k < 1:
        spec.spec_k = 4
    pe = cfg.pe_config()
    p_in, p_w, ops = _synthesize(args, spec, cfg)
    desc = spec.descriptor(p_in, p_w, SkipMode.IN_OUT_SKIP, pe)
    if desc.speculation is None:
        raise SystemExit(f"layer {spec.name!r} has no pool window to speculate over")
    out, stats, report = speculative_layer_execute(desc, ops.inputs, ops.weights, pe)
    _emit(
        _round_floats(
            {
                "layer": spec.name,
                "candidates_k": desc.speculation.candidates_k,
                "mode": desc.speculation.mode.value,
                "pool_window": desc.pool_window,
                "windows_total": stats.windows_total,
                "windows_success": stats.windows_success,
                "success_rate": stats.success_rate,
                "skipped_pass_macs": stats.skipped_pass_macs,
                "output_mse": stats.output_mse,
                "cycles": report.cycles_total,
                "output_shape": list(out.values.shape),
            }
        ),
        args,
    )
    return 0


def _cmd_asm(args) -> int:
    with open(args.source) as fh:
        program = assemble(fh.read())
    write_sbp(args.out, program)
    print(f"{len(program.instructions)} words -> {args.out}")
    return 0


def _cmd_disasm(args) -> int:
    program = read_sbp(args.image)
    text = disassemble(program)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    if args.out_dir:
        paths = emit_report(result, args.out_dir)
        for name in sorted(paths):
            print(f"{name}: {paths[name]}")
    _emit(result["summary"], args)
    return 0


def _cmd_report(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    paths = emit_report(result, args.out_dir)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbsim",
        description="bit-slice accelerator simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_tensor(p):
        p.add_argument("tensor", help="SBT1 tensor file")
        p.add_argument("--slice-width", type=int, default=4)
        p.add_argument("--axis", type=int, default=-1, help="sub-word packing axis")

    p = sub.add_parser("encode", help="slice a tensor and report plane sparsity")
    common_tensor(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("stats", help="element and sub-word sparsity of a tensor")
    common_tensor(p)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("compress", help="run-length compress slice planes")
    common_tensor(p)
    p.add_argument("--plane", type=int, default=None)
    p.add_argument("--out", default=None, help="write one plane as SBC1")
    p.set_defaults(func=_cmd_compress)

    def common_run(p):
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--layer", default=None)
        p.add_argument("--p-in", type=int, default=None)
        p.add_argument("--p-w", type=int, default=None)

    p = sub.add_parser("simulate", help="run one synthetic layer")
    common_run(p)
    p.add_argument(
        "--mode",
        default=SkipMode.HYBRID_SKIP.value,
        choices=[m.value for m in SkipMode],
    )
    p.add_argument("--chained", action="store_true", help="order-serial accumulation")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("speculate", help="run one pooled layer with output speculation")
    common_run(p)
    p.add_argument("--k", type=int, default=None, help="candidates kept per window")
    p.set_defaults(func=_cmd_speculate)

    p = sub.add_parser("asm", help="assemble a .sba file to a .sbp image")
    p.add_argument("source")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_asm)

    p = sub.add_parser("disasm", help="disassemble a .sbp image")
    p.add_argument("image")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_disasm)

    p = sub.add_parser("bench", help="run the benchmark suite")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="run the suite and write the report files")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
