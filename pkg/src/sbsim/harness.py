"""Benchmark harness: synthetic layer suites, end-to-end runs, reports.

Every run goes through the control path: tensors are staged in executor
memory, a register bring-up program plus RUN is assembled, and the row is
built from the execution trace.  Reports are deterministic down to the
byte for a fixed config: RNG seeds derive from stable string hashes, all
floats are printed with six decimals, and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .compress import compressed_bits, dsm_decide, raw_bits, rle_compress
from .isa import (
    TARGET_MPU_BASE,
    Instruction,
    Opcode,
    ProgramExecutor,
    layer_setup_program,
)
from .noc import AllocationPattern, MeshConfig, allocate_workload, simulate_bi_noc_transfers
from .pe import (
    DEFAULT_ENERGY_COSTS,
    AccumulateMode,
    LayerDescriptor,
    LayerKind,
    PEConfig,
    SkipMode,
)
from .sbr import QuantTensor, SliceConfig, encode_signed, pack_subwords, sparsity_stats
from .speculate import SpeculationConfig, SpeculationMode
from .synth import Activation, Distribution, generate_synthetic_tensor

BASELINE_PRECISION = 7
MODE_ORDER = [
    SkipMode.NO_SKIP,
    SkipMode.INPUT_SKIP,
    SkipMode.HYBRID_SKIP,
    SkipMode.IN_OUT_SKIP,
]

RESULT_COLUMNS = [
    "layer",
    "p_in",
    "p_w",
    "mode",
    "cycles",
    "speedup",
    "mac_executed",
    "mac_skipped",
    "energy",
    "input_zero_fraction",
    "input_ratio_raw16",
    "input_ratio_fixed",
    "weight_ratio_raw16",
    "noc_reuse",
    "spec_success_rate",
    "output_hash",
]

TRANSFER_COLUMNS = [
    "layer",
    "p_in",
    "pattern",
    "data_class",
    "messages",
    "payload_bytes",
    "hop_bytes",
    "link_traversals",
    "reuse_factor",
]


class HarnessError(ValueError):
    pass


@dataclass
class LayerSpec:
    """JSON-friendly description of one synthetic benchmark layer."""

    name: str
    in_channels: int = 8
    height: int = 16
    width: int = 16
    out_channels: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_window: int | None = None
    p_in: int = 7
    p_w: int = 7
    input_distribution: str = "laplace"
    input_activation: str = "leaky_relu"
    input_zero_fraction: float = 0.25
    input_scale: float | None = None
    weight_distribution: str = "gaussian"
    weight_zero_fraction: float = 0.10
    weight_scale: float | None = None
    spec_mode: str = "mm"
    spec_k: int = 0
    allocation: str = "in_out_multicast"

    def descriptor(
        self, p_in: int, p_w: int, mode: SkipMode, pe: PEConfig
    ) -> LayerDescriptor:
        spec = None
        if mode is SkipMode.IN_OUT_SKIP and self.spec_k > 0 and self.pool_window:
            spec = SpeculationConfig(
                mode=SpeculationMode(self.spec_mode),
                candidates_k=self.spec_k,
                channel_group=pe.arrays_per_pe,
            )
        return LayerDescriptor(
            name=self.name,
            kind=LayerKind.CONV2D,
            in_channels=self.in_channels,
            height=self.height,
            width=self.width,
            out_channels=self.out_channels,
            kernel=(self.kernel, self.kernel),
            stride=(self.stride, self.stride),
            padding=(self.padding, self.padding),
            pool_window=self.pool_window,
            input_slices=SliceConfig.for_precision(p_in),
            weight_slices=SliceConfig.for_precision(p_w),
            skip_mode=mode,
            speculation=spec,
        )


@dataclass
class ExperimentConfig:
    layers: list[LayerSpec] = field(default_factory=list)
    modes: list[str] = field(
        default_factory=lambda: [m.value for m in MODE_ORDER]
    )
    sweep_layer: str | None = None
    sweep_precisions: list[int] = field(default_factory=lambda: [4, 7, 10, 13])
    seed: int = 20240801
    pe: dict = field(default_factory=dict)
    mesh: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        layers = [LayerSpec(**spec) for spec in raw.pop("layers", [])]
        cfg = cls(layers=layers, **raw)
        if not cfg.layers:
            raise HarnessError("config defines no layers")
        return cfg

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    def pe_config(self) -> PEConfig:
        return PEConfig(**self.pe)

    def mesh_config(self) -> MeshConfig:
        return MeshConfig(**self.mesh)


def default_benchmark_config() -> ExperimentConfig:
    """Five layers shaped after common detection / depth / point workloads."""
    layers = [
        LayerSpec(
            name="det_conv",
            in_channels=8,
            height=16,
            width=16,
            out_channels=16,
            kernel=3,
            padding=1,
            input_activation="leaky_relu",
            input_zero_fraction=0.292,
        ),
        LayerSpec(
            name="depth_enc_conv",
            in_channels=8,
            height=16,
            width=16,
            out_channels=16,
            kernel=3,
            padding=1,
            input_activation="relu",
            input_zero_fraction=0.573,
        ),
        LayerSpec(
            name="depth_dec_conv",
            in_channels=8,
            height=12,
            width=12,
            out_channels=8,
            kernel=3,
            padding=1,
            p_in=10,
            input_activation="elu",
            input_zero_fraction=0.175,
        ),
        LayerSpec(
            name="point_vote_fc",
            in_channels=16,
            height=1,
            width=256,
            out_channels=8,
            kernel=1,
            padding=0,
            pool_window=64,
            input_activation="relu",
            input_zero_fraction=0.55,
            weight_scale=15.0,
            spec_mode="mm",
            spec_k=4,
            allocation="input_reuse",
        ),
        LayerSpec(
            name="point_edge_fc",
            in_channels=8,
            height=1,
            width=200,
            out_channels=8,
            kernel=1,
            padding=0,
            pool_window=40,
            input_activation="leaky_relu",
            input_zero_fraction=0.3,
            weight_scale=15.0,
            spec_mode="mm_plus_lm",
            spec_k=4,
            allocation="input_reuse",
        ),
    ]
    return ExperimentConfig(layers=layers, sweep_layer="det_conv")


def derive_seed(root: int, *parts) -> int:
    tag = ":".join(str(p) for p in (root,) + parts)
    return zlib.crc32(tag.encode("utf-8"))


def _tensor_hash(t: QuantTensor) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(t.values.shape, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(t.values, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class _Operands:
    inputs: QuantTensor
    weights: QuantTensor
    input_zero_fraction: float
    weight_zero_fraction: float


def _generate_operands(spec: LayerSpec, p_in: int, p_w: int, seed: int) -> _Operands:
    in_t, in_info = generate_synthetic_tensor(
        (spec.in_channels, spec.height, spec.width),
        p_in,
        distribution=Distribution(spec.input_distribution),
        activation=Activation(spec.input_activation),
        zero_fraction=None if spec.input_scale else spec.input_zero_fraction,
        scale=spec.input_scale,
        seed=derive_seed(seed, spec.name, "input", p_in),
    )
    w_t, w_info = generate_synthetic_tensor(
        (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
        p_w,
        distribution=Distribution(spec.weight_distribution),
        activation=Activation.NONE,
        zero_fraction=None if spec.weight_scale else spec.weight_zero_fraction,
        scale=spec.weight_scale,
        seed=derive_seed(seed, spec.name, "weight", p_w),
    )
    return _Operands(
        inputs=in_t,
        weights=w_t,
        input_zero_fraction=in_info.achieved_zero_fraction,
        weight_zero_fraction=w_info.achieved_zero_fraction,
    )


@dataclass
class _StorageStats:
    """Hybrid-compressed footprint of one operand's slice planes."""

    raw16_bits: int
    stored_bits: int
    source_bits: int

    @property
    def ratio_raw16(self) -> float:
        return self.raw16_bits / self.stored_bits if self.stored_bits else float("inf")

    @property
    def ratio_fixed(self) -> float:
        return self.source_bits / self.stored_bits if self.stored_bits else float("inf")

    @property
    def stored_bytes(self) -> int:
        return -(-self.stored_bits // 8)


def _storage_stats(
    tensor: QuantTensor,
    config: SliceConfig,
    packing_axis: int,
    compress_flags: list[bool],
) -> _StorageStats:
    slices = encode_signed(tensor, config)
    raw_total = 0
    stored = 0
    for order in range(config.num_slices):
        stream = pack_subwords(slices.planes[order], config.slice_width, axis=packing_axis)
        plane = rle_compress(stream)
        plane_raw = raw_bits(plane)
        raw_total += plane_raw
        stored += compressed_bits(plane) if compress_flags[order] else plane_raw
    return _StorageStats(
        raw16_bits=raw_total,
        stored_bits=stored,
        source_bits=config.precision * tensor.values.size,
    )


def _run_one(
    desc: LayerDescriptor,
    ops: _Operands,
    pe: PEConfig,
    accumulate: AccumulateMode = AccumulateMode.EXACT,
) -> dict:
    """Stage memory, assemble bring-up + RUN + HALT, execute, return the record."""
    executor = ProgramExecutor(n_mpus=1, pe_config=pe)
    ibase, wbase, obase = 0x100, 0x200, 0x300
    executor.memory[ibase] = ops.inputs
    executor.memory[wbase] = ops.weights
    target = TARGET_MPU_BASE
    program = layer_setup_program(
        target, desc, ibase=ibase, wbase=wbase, obase=obase, accumulate=accumulate
    )
    program.instructions.append(Instruction(target, Opcode.RUN))
    program.instructions.append(Instruction(target, Opcode.HALT))
    trace = executor.run(program)
    record = dict(trace.records[-1])
    record["output"] = executor.memory[obase]
    return record


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute the full suite; returns result/transfer rows plus a summary."""
    if not config.layers:
        raise HarnessError("config defines no layers")
    pe = config.pe_config()
    mesh = config.mesh_config()
    modes = [SkipMode(m) for m in config.modes]
    rows: list[dict] = []
    transfer_rows: list[dict] = []
    baseline_cycles: dict[str, int] = {}

    for spec in config.layers:
        pairs = [(spec.p_in, spec.p_w)]
        if config.sweep_layer == spec.name:
            pairs = [(p, p) for p in config.sweep_precisions]
        if (BASELINE_PRECISION, BASELINE_PRECISION) not in pairs:
            pairs.append((BASELINE_PRECISION, BASELINE_PRECISION))
        pairs = sorted(set(pairs))
        for p_in, p_w in pairs:
            rows_here, transfers_here = _run_precision_point(
                spec, p_in, p_w, modes, config, pe, mesh
            )
            rows.extend(rows_here)
            transfer_rows.extend(transfers_here)
            for r in rows_here:
                if (
                    r["mode"] == SkipMode.NO_SKIP.value
                    and r["p_in"] == BASELINE_PRECISION
                    and r["p_w"] == BASELINE_PRECISION
                ):
                    baseline_cycles[r["layer"]] = r["cycles"]

    for r in rows:
        base = baseline_cycles.get(r["layer"])
        r["speedup"] = base / r["cycles"] if base else 0.0

    summary = _summarize(config, rows)
    return {"results": rows, "transfers": transfer_rows, "summary": summary}


def _run_precision_point(
    spec: LayerSpec,
    p_in: int,
    p_w: int,
    modes: list[SkipMode],
    config: ExperimentConfig,
    pe: PEConfig,
    mesh: MeshConfig,
) -> tuple[list[dict], list[dict]]:
    ops = _generate_operands(spec, p_in, p_w, config.seed)

    probe = spec.descriptor(p_in, p_w, SkipMode.HYBRID_SKIP, pe)
    in_sl = encode_signed(ops.inputs, probe.input_slices)
    w_sl = encode_signed(ops.weights, probe.weight_slices)
    dsm = dsm_decide(
        sparsity_stats(in_sl, packing_axis=-1),
        sparsity_stats(w_sl, packing_axis=0),
        subword_bits=probe.input_slices.slice_width * 4,
    )
    in_store = _storage_stats(ops.inputs, probe.input_slices, -1, dsm.input_compress_flags)
    w_store = _storage_stats(ops.weights, probe.weight_slices, 0, dsm.weight_compress_flags)

    out_bytes = probe.out_channels * probe.out_spatial * (-(-pe.acc_width // 8))
    assignment = allocate_workload(
        probe,
        mesh,
        AllocationPattern(spec.allocation),
        input_bytes=in_store.stored_bytes,
        weight_bytes=w_store.stored_bytes,
        output_bytes=out_bytes,
    )
    log = simulate_bi_noc_transfers(assignment, mesh)
    transfers = [
        {
            "layer": spec.name,
            "p_in": p_in,
            "pattern": spec.allocation,
            "data_class": row.data_class,
            "messages": row.messages,
            "payload_bytes": row.payload_bytes,
            "hop_bytes": row.hop_bytes,
            "link_traversals": row.link_traversals,
            "reuse_factor": row.reuse_factor,
        }
        for row in sorted(log.rows.values(), key=lambda r: r.data_class)
    ]
    dram_bytes = in_store.stored_bytes + w_store.stored_bytes + out_bytes
    noc_energy = log.bit_hops * DEFAULT_ENERGY_COSTS["noc_hop_bit"]
    dram_energy = -(-dram_bytes // 4) * DEFAULT_ENERGY_COSTS["dram_access"]

    rows = []
    reference_hash = None
    for mode in MODE_ORDER:
        if mode not in modes:
            continue
        desc = spec.descriptor(p_in, p_w, mode, pe)
        record = _run_one(desc, ops, pe)
        out_hash = _tensor_hash(record.pop("output"))
        speculative = "speculation_success_rate" in record
        if mode is SkipMode.NO_SKIP:
            reference_hash = out_hash
        elif not speculative and reference_hash and out_hash != reference_hash:
            raise HarnessError(
                f"{spec.name}@p{p_in}: {mode.value} output diverged from reference"
            )
        rows.append(
            {
                "layer": spec.name,
                "p_in": p_in,
                "p_w": p_w,
                "mode": mode.value,
                "cycles": record["cycles"],
                "speedup": 0.0,
                "mac_executed": record["mac_executed"],
                "mac_skipped": record["mac_skipped"],
                "energy": record["energy"] + noc_energy + dram_energy,
                "input_zero_fraction": ops.input_zero_fraction,
                "input_ratio_raw16": in_store.ratio_raw16,
                "input_ratio_fixed": in_store.ratio_fixed,
                "weight_ratio_raw16": w_store.ratio_raw16,
                "noc_reuse": log.reuse_factor,
                "spec_success_rate": record.get("speculation_success_rate", ""),
                "output_hash": reference_hash or out_hash,
            }
        )
    return rows, transfers


def _geomean(values: list[float]) -> float:
    if not values:
        return 0.0
    return float(np.exp(np.mean(np.log(values))))


def _summarize(config: ExperimentConfig, rows: list[dict]) -> dict:
    by_mode: dict[str, list[float]] = {}
    for r in rows:
        if r["p_in"] == BASELINE_PRECISION and r["p_w"] == BASELINE_PRECISION:
            if r["speedup"] > 0:
                by_mode.setdefault(r["mode"], []).append(r["speedup"])
    return {
        "seed": config.seed,
        "layers": len(config.layers),
        "rows": len(rows),
        "total_cycles": int(sum(r["cycles"] for r in rows)),
        "total_energy": round(float(sum(r["energy"] for r in rows)), 6),
        "speedup_geomean": {
            mode: round(_geomean(vals), 6) for mode, vals in sorted(by_mode.items())
        },
        "mean_input_ratio_raw16": round(
            float(np.mean([r["input_ratio_raw16"] for r in rows])), 6
        ),
    }


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def emit_report(result: dict, out_dir) -> dict[str, Path]:
    """Write results.csv, transfers.csv, and summary.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.csv",
        "transfers": out / "transfers.csv",
        "summary": out / "summary.json",
    }
    _write_csv(paths["results"], RESULT_COLUMNS, result["results"])
    _write_csv(paths["transfers"], TRANSFER_COLUMNS, result["transfers"])
    with open(paths["summary"], "w") as fh:
        fh.write(json.dumps(result["summary"], indent=2, sort_keys=True))
        fh.write("\n")
    return paths


def run_benchmark(config: ExperimentConfig | None = None, out_dir=None) -> dict:
    config = config or default_benchmark_config()
    result = run_experiment(config)
    if out_dir is not None:
        result["paths"] = emit_report(result, out_dir)
    return result
