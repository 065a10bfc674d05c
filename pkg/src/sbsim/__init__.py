"""Signed bit-slice DNN accelerator simulator.

Functional and cycle-level model of an accelerator that recodes
quantized tensors into signed slice planes, skips zero sub-words during
MAC execution, speculates on pooled outputs, compresses slice streams,
and moves data over a mesh interconnect under a small control ISA.
"""

from .compress import (
    Baseline,
    CompressedPlane,
    CompressionError,
    DsmDecision,
    DsmPolicy,
    SkipOperand,
    compressed_bits,
    compression_ratio,
    dsm_decide,
    raw_bits,
    read_sbc,
    rle_compress,
    rle_decompress,
    write_sbc,
)
from .harness import (
    ExperimentConfig,
    LayerSpec,
    default_benchmark_config,
    emit_report,
    run_benchmark,
    run_experiment,
)
from .isa import (
    CoreState,
    Instruction,
    IsaError,
    Opcode,
    Program,
    ProgramExecutor,
    assemble,
    decode_instruction,
    disassemble,
    encode_instruction,
    layer_setup_program,
    read_sbp,
    write_sbp,
)
from .noc import (
    AllocationPattern,
    Assignment,
    MeshConfig,
    NocError,
    TransferLog,
    allocate_workload,
    multicast_edges,
    simulate_bi_noc_transfers,
    uni_noc_link_width,
    xy_path,
)
from .pe import (
    DEFAULT_ENERGY_COSTS,
    AccumulateMode,
    CycleEnergyReport,
    LayerDescriptor,
    LayerKind,
    PEConfig,
    PEError,
    SkipMode,
    accumulate_wrap,
    accumulation_chain,
    conv_planes,
    layer_execute,
    signed_mac_product,
    zero_skip_schedule,
)
from .sbr import (
    CodecError,
    EncodingKind,
    QuantTensor,
    SliceConfig,
    SliceTensor,
    SparsityStats,
    SubWordStream,
    conventional_msb_slice,
    decode,
    decode_conventional,
    decode_signed,
    encode_conventional,
    encode_signed,
    pack_subwords,
    read_sbt,
    sparsity_stats,
    unpack_subwords,
    write_sbt,
    zero_subword_mask,
)
from .speculate import (
    SpeculationConfig,
    SpeculationError,
    SpeculationMode,
    SpeculationStats,
    mask_noncandidates,
    select_candidates,
    speculation_scores,
    speculative_layer_execute,
)
from .synth import Activation, Distribution, SynthError, generate_synthetic_tensor

__version__ = "0.1.0"
