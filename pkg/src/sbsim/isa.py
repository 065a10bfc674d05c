"""Control ISA: 32-bit configuration words, assembler, and executor.

Word layout (bit 31 down to 0):

    [31:25] target   0x00 = broadcast, 0x01 = DMU0, 0x02 + i = MPU_i
    [24:21] opcode
    [20:16] reserved, must read back zero
    [15:0]  operand

Configuration registers persist across RUNs, so a sweep re-issues only
the registers that change.  RUN on an unconfigured core is an error, not
silence: the hardware has no defaults.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .pe import (
    AccumulateMode,
    LayerDescriptor,
    LayerKind,
    PEConfig,
    QuantTensor,
    SkipMode,
    layer_execute,
)
from .sbr import SliceConfig
from .speculate import SpeculationConfig, SpeculationMode, speculative_layer_execute


class IsaError(ValueError):
    pass


class Opcode(IntEnum):
    NOP = 0x0
    CFG_W = 0x1
    CFG_H = 0x2
    CFG_IC = 0x3
    CFG_OC = 0x4
    CFG_PREC = 0x5
    CFG_MODE = 0x6
    CFG_IBASE = 0x7
    CFG_WBASE = 0x8
    CFG_OBASE = 0x9
    RUN = 0xA
    RESET = 0xB
    CFG_SPEC = 0xC
    SYNC = 0xD
    HALT = 0xE


TARGET_BROADCAST = 0x00
TARGET_DMU0 = 0x01
TARGET_MPU_BASE = 0x02
_TARGET_MAX = 0x7F
_OPERAND_MAX = 0xFFFF

_SKIP_CODES = {
    SkipMode.NO_SKIP: 0,
    SkipMode.INPUT_SKIP: 1,
    SkipMode.HYBRID_SKIP: 2,
    SkipMode.IN_OUT_SKIP: 3,
}
_SKIP_FROM_CODE = {v: k for k, v in _SKIP_CODES.items()}


@dataclass(frozen=True)
class Instruction:
    target: int
    opcode: Opcode
    operand: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.target <= _TARGET_MAX:
            raise IsaError(f"target {self.target:#x} out of range")
        if not 0 <= self.operand <= _OPERAND_MAX:
            raise IsaError(f"operand {self.operand:#x} does not fit 16 bits")


def encode_instruction(inst: Instruction) -> int:
    return (inst.target << 25) | (int(inst.opcode) << 21) | inst.operand


def decode_instruction(word: int) -> Instruction:
    if not 0 <= word <= 0xFFFFFFFF:
        raise IsaError("instruction word must fit 32 bits")
    reserved = (word >> 16) & 0x1F
    if reserved:
        raise IsaError(f"reserved bits set in {word:#010x}")
    op_bits = (word >> 21) & 0xF
    try:
        opcode = Opcode(op_bits)
    except ValueError:
        raise IsaError(f"unknown opcode {op_bits:#x}") from None
    return Instruction(target=word >> 25, opcode=opcode, operand=word & 0xFFFF)


def pack_mode_operand(
    skip_mode: SkipMode,
    accumulate: AccumulateMode,
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> int:
    if not (1 <= kh <= 7 and 1 <= kw <= 7):
        raise IsaError("kernel dims must fit 3 bits and be >= 1")
    if not (1 <= stride <= 3):
        raise IsaError("stride must fit 2 bits and be >= 1")
    if not 0 <= padding <= 3:
        raise IsaError("padding must fit 2 bits")
    chained = 1 if accumulate is AccumulateMode.CHAINED else 0
    return (
        _SKIP_CODES[skip_mode]
        | (chained << 4)
        | (kh << 5)
        | (kw << 8)
        | (stride << 11)
        | (padding << 13)
    )


def unpack_mode_operand(
    operand: int,
) -> tuple[SkipMode, AccumulateMode, int, int, int, int]:
    skip_bits = operand & 0xF
    if skip_bits not in _SKIP_FROM_CODE:
        raise IsaError(f"unknown skip mode code {skip_bits}")
    acc = AccumulateMode.CHAINED if operand & 0x10 else AccumulateMode.EXACT
    return (
        _SKIP_FROM_CODE[skip_bits],
        acc,
        (operand >> 5) & 0x7,
        (operand >> 8) & 0x7,
        (operand >> 11) & 0x3,
        (operand >> 13) & 0x3,
    )


def pack_prec_operand(p_in: int, p_w: int) -> int:
    if not (1 <= p_in <= 255 and 1 <= p_w <= 255):
        raise IsaError("precisions must fit 8 bits and be >= 1")
    return p_in | (p_w << 8)


def unpack_prec_operand(operand: int) -> tuple[int, int]:
    return operand & 0xFF, (operand >> 8) & 0xFF


def pack_spec_operand(k: int, mode: SpeculationMode, window: int) -> int:
    """k == 0 disables speculation; window is stored in units of 4."""
    if not 0 <= k <= 255:
        raise IsaError("candidate count must fit 8 bits")
    if window % 4 or not 0 <= window // 4 <= 0x7F:
        raise IsaError("window must be a multiple of 4 below 512")
    mode_bit = 1 if mode is SpeculationMode.MM_PLUS_LM else 0
    return k | (mode_bit << 8) | ((window // 4) << 9)


def unpack_spec_operand(operand: int) -> tuple[int, SpeculationMode, int]:
    mode = (
        SpeculationMode.MM_PLUS_LM if operand & 0x100 else SpeculationMode.MM
    )
    return operand & 0xFF, mode, ((operand >> 9) & 0x7F) * 4


@dataclass
class Program:
    instructions: list[Instruction] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)

    def words(self) -> list[int]:
        return [encode_instruction(i) for i in self.instructions]


def target_name(target: int) -> str:
    if target == TARGET_BROADCAST:
        return "all"
    if target == TARGET_DMU0:
        return "dmu0"
    return f"mpu{target - TARGET_MPU_BASE}"


def _parse_target(token: str) -> int:
    t = token.lower()
    if t == "all":
        return TARGET_BROADCAST
    if t == "dmu0":
        return TARGET_DMU0
    if t.startswith("mpu") and t[3:].isdigit():
        tid = TARGET_MPU_BASE + int(t[3:])
        if tid > _TARGET_MAX:
            raise IsaError(f"target {token!r} out of range")
        return tid
    raise IsaError(f"unknown target {token!r}")


def assemble(text: str) -> Program:
    """Text form: `<target> <mnemonic> [operand]`, `#` comments, `name:` labels.

    An operand may name a label; it resolves to that label's instruction
    index (forward references allowed).
    """
    prog = Program()
    pending: list[tuple[int, int, str]] = []  # (inst idx, line no, label)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        while tokens and tokens[0].endswith(":"):
            label = tokens.pop(0)[:-1]
            if not label.isidentifier():
                raise IsaError(f"line {lineno}: bad label {label!r}")
            if label in prog.labels:
                raise IsaError(f"line {lineno}: duplicate label {label!r}")
            prog.labels[label] = len(prog.instructions)
        if not tokens:
            continue
        if len(tokens) not in (2, 3):
            raise IsaError(f"line {lineno}: expected `target mnemonic [operand]`")
        target = _parse_target(tokens[0])
        mnemonic = tokens[1].upper()
        if mnemonic not in Opcode.__members__:
            raise IsaError(f"line {lineno}: unknown mnemonic {tokens[1]!r}")
        opcode = Opcode[mnemonic]
        operand = 0
        if len(tokens) == 3:
            tok = tokens[2]
            try:
                operand = int(tok, 0)
            except ValueError:
                pending.append((len(prog.instructions), lineno, tok))
        prog.instructions.append(Instruction(target, opcode, operand))
    for idx, lineno, label in pending:
        if label not in prog.labels:
            raise IsaError(f"line {lineno}: undefined label {label!r}")
        old = prog.instructions[idx]
        prog.instructions[idx] = Instruction(old.target, old.opcode, prog.labels[label])
    return prog


def disassemble(program: Program) -> str:
    by_index: dict[int, list[str]] = {}
    for name, idx in program.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines = []
    for idx, inst in enumerate(program.instructions):
        for name in sorted(by_index.get(idx, [])):
            lines.append(f"{name}:")
        lines.append(f"{target_name(inst.target)} {inst.opcode.name} {inst.operand}")
    for name in sorted(by_index.get(len(program.instructions), [])):
        lines.append(f"{name}:")
    return "\n".join(lines) + "\n"


def write_sbp(path, program: Program) -> None:
    with open(path, "wb") as fh:
        for word in program.words():
            fh.write(struct.pack("<I", word))


def read_sbp(path) -> Program:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % 4:
        raise IsaError("program image is not word aligned")
    insts = [
        decode_instruction(struct.unpack_from("<I", blob, off)[0])
        for off in range(0, len(blob), 4)
    ]
    return Program(instructions=insts)


@dataclass
class CoreState:
    width: int | None = None
    height: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    p_in: int | None = None
    p_w: int | None = None
    skip_mode: SkipMode | None = None
    accumulate: AccumulateMode | None = None
    kh: int = 1
    kw: int = 1
    stride: int = 1
    padding: int = 0
    ibase: int | None = None
    wbase: int | None = None
    obase: int | None = None
    spec_k: int = 0
    spec_mode: SpeculationMode = SpeculationMode.MM
    spec_window: int = 0
    cycles: int = 0
    energy: float = 0.0

    def missing_config(self) -> list[str]:
        required = {
            "CFG_W": self.width,
            "CFG_H": self.height,
            "CFG_IC": self.in_channels,
            "CFG_OC": self.out_channels,
            "CFG_PREC": self.p_in,
            "CFG_MODE": self.skip_mode,
            "CFG_IBASE": self.ibase,
            "CFG_WBASE": self.wbase,
            "CFG_OBASE": self.obase,
        }
        return [name for name, value in required.items() if value is None]


@dataclass
class ExecutionTrace:
    fetch_count: int = 0
    records: list[dict] = field(default_factory=list)
    halted: bool = False

    def to_dict(self) -> dict:
        return {
            "fetch_count": self.fetch_count,
            "halted": self.halted,
            "records": self.records,
        }


class ProgramExecutor:
    """Decodes a program against a bank of MPU cores plus one DMU.

    ``memory`` maps base addresses to whole tensors: the DMU's job of
    carving byte streams is out of scope here, address identity is what
    the control path needs.  Every decoded word bumps the fetch counter,
    NOPs included.
    """

    def __init__(
        self,
        n_mpus: int = 4,
        pe_config: PEConfig | None = None,
        memory: dict[int, QuantTensor] | None = None,
    ):
        if n_mpus < 1:
            raise IsaError("need at least one MPU core")
        self.n_mpus = n_mpus
        self.pe_config = pe_config or PEConfig()
        self.memory: dict[int, QuantTensor] = memory if memory is not None else {}
        self.cores = {TARGET_MPU_BASE + i: CoreState() for i in range(n_mpus)}
        self.dmu = CoreState()

    def _targets(self, target: int) -> list[int]:
        if target == TARGET_BROADCAST:
            return [TARGET_DMU0] + sorted(self.cores)
        if target == TARGET_DMU0 or target in self.cores:
            return [target]
        raise IsaError(f"target {target_name(target)} not present")

    def run(self, program: Program) -> ExecutionTrace:
        trace = ExecutionTrace()
        for inst in program.instructions:
            trace.fetch_count += 1
            if inst.opcode is Opcode.HALT:
                trace.halted = True
                break
            if inst.opcode is Opcode.SYNC:
                peak = max(c.cycles for c in self.cores.values())
                for core in self.cores.values():
                    core.cycles = peak
                continue
            for tid in self._targets(inst.target):
                self._apply(tid, inst, trace)
        return trace

    def _apply(self, tid: int, inst: Instruction, trace: ExecutionTrace) -> None:
        state = self.dmu if tid == TARGET_DMU0 else self.cores[tid]
        op = inst.opcode
        val = inst.operand
        if op is Opcode.NOP:
            return
        if op is Opcode.RESET:
            fresh = CoreState()
            fresh.cycles = state.cycles
            if tid == TARGET_DMU0:
                self.dmu = fresh
            else:
                self.cores[tid] = fresh
            return
        if op is Opcode.CFG_W:
            state.width = val
        elif op is Opcode.CFG_H:
            state.height = val
        elif op is Opcode.CFG_IC:
            state.in_channels = val
        elif op is Opcode.CFG_OC:
            state.out_channels = val
        elif op is Opcode.CFG_PREC:
            state.p_in, state.p_w = unpack_prec_operand(val)
        elif op is Opcode.CFG_MODE:
            (
                state.skip_mode,
                state.accumulate,
                state.kh,
                state.kw,
                state.stride,
                state.padding,
            ) = unpack_mode_operand(val)
        elif op is Opcode.CFG_IBASE:
            state.ibase = val
        elif op is Opcode.CFG_WBASE:
            state.wbase = val
        elif op is Opcode.CFG_OBASE:
            state.obase = val
        elif op is Opcode.CFG_SPEC:
            state.spec_k, state.spec_mode, state.spec_window = unpack_spec_operand(val)
        elif op is Opcode.RUN:
            if tid == TARGET_DMU0:
                return  # DMA kick: data objects are already in memory here
            self._run_layer(tid, state, trace)
        else:
            raise IsaError(f"unhandled opcode {op.name}")

    def _run_layer(self, tid: int, state: CoreState, trace: ExecutionTrace) -> None:
        missing = state.missing_config()
        if missing:
            raise IsaError(
                f"RUN on {target_name(tid)} before configuration: missing "
                + ", ".join(missing)
            )
        if state.ibase not in self.memory:
            raise IsaError(f"no tensor staged at ibase {state.ibase:#x}")
        if state.wbase not in self.memory:
            raise IsaError(f"no tensor staged at wbase {state.wbase:#x}")
        inputs = self.memory[state.ibase]
        weights = self.memory[state.wbase]
        spec = None
        if state.spec_k > 0 and state.spec_window > 0:
            spec = SpeculationConfig(
                mode=state.spec_mode,
                candidates_k=state.spec_k,
                channel_group=self.pe_config.arrays_per_pe,
            )
        layer = LayerDescriptor(
            name=f"{target_name(tid)}_run{len(trace.records)}",
            kind=LayerKind.CONV2D,
            in_channels=state.in_channels,
            height=state.height,
            width=state.width,
            out_channels=state.out_channels,
            kernel=(state.kh, state.kw),
            stride=(state.stride, state.stride),
            padding=(state.padding, state.padding),
            pool_window=state.spec_window or None,
            input_slices=SliceConfig.for_precision(state.p_in),
            weight_slices=SliceConfig.for_precision(state.p_w),
            skip_mode=state.skip_mode,
            speculation=spec,
        )
        record = {
            "core": target_name(tid),
            "layer": layer.name,
            "skip_mode": state.skip_mode.value,
            "p_in": state.p_in,
            "p_w": state.p_w,
            "obase": state.obase,
        }
        if spec is not None:
            out, stats, report = speculative_layer_execute(
                layer,
                inputs,
                weights,
                self.pe_config,
                state.accumulate,
            )
            record["speculation_success_rate"] = stats.success_rate
        else:
            out, report = layer_execute(
                layer,
                inputs,
                weights,
                self.pe_config,
                state.accumulate,
            )
        self.memory[state.obase] = out
        state.cycles += report.cycles_total
        state.energy += report.energy()
        record["cycles"] = report.cycles_total
        record["energy"] = report.energy()
        record["mac_executed"] = report.counters["mac_ops_executed"]
        record["mac_skipped"] = report.counters["mac_ops_skipped"]
        record["counters"] = dict(report.counters)
        trace.records.append(record)


def layer_setup_program(
    target: int,
    layer: LayerDescriptor,
    *,
    ibase: int,
    wbase: int,
    obase: int,
    accumulate: AccumulateMode = AccumulateMode.EXACT,
) -> Program:
    """Canonical register bring-up for one layer: 9 CFG words, no RUN."""
    spec = layer.speculation
    k = spec.candidates_k if spec is not None else 0
    mode = spec.mode if spec is not None else SpeculationMode.MM
    window = layer.pool_window or 0
    insts = [
        Instruction(target, Opcode.CFG_W, layer.width),
        Instruction(target, Opcode.CFG_H, layer.height),
        Instruction(target, Opcode.CFG_IC, layer.in_channels),
        Instruction(target, Opcode.CFG_OC, layer.out_channels),
        Instruction(
            target,
            Opcode.CFG_PREC,
            pack_prec_operand(
                layer.input_slices.precision, layer.weight_slices.precision
            ),
        ),
        Instruction(
            target,
            Opcode.CFG_MODE,
            pack_mode_operand(
                layer.skip_mode,
                accumulate,
                layer.kernel[0],
                layer.kernel[1],
                layer.stride[0],
                layer.padding[0],
            ),
        ),
        Instruction(target, Opcode.CFG_IBASE, ibase),
        Instruction(target, Opcode.CFG_WBASE, wbase),
        Instruction(target, Opcode.CFG_OBASE, obase),
    ]
    if k or window:
        insts.append(
            Instruction(target, Opcode.CFG_SPEC, pack_spec_operand(k, mode, window))
        )
    return Program(instructions=insts)
