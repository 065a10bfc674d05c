"""Output speculation for pooled layers.

High-order slice products predict which outputs win a max-pool window;
only those candidates are finished through the remaining low-order passes.
Scores come either from the MSB x MSB pass alone or from all input orders
against the weight MSB.  Masking works at a granularity of four adjacent
output channels (one accumulation round), so a window position survives
for a whole channel group if any channel in the group keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .compress import DsmDecision, SkipOperand, dsm_decide
from .pe import (
    AccumulateMode,
    CycleEnergyReport,
    LayerKind,
    PEConfig,
    PEError,
    SkipMode,
    _account_pass,
    _canonical_operands,
    _Geometry,
    _load_counters,
    _resolve_pass_role,
    combine_partials,
    input_zero_masks,
    pe_convolve_pass,
    pool_flat,
    weight_zero_masks,
)
from .pe import LayerDescriptor
from .sbr import (
    DIGITS_PER_SUBWORD,
    EncodingKind,
    QuantTensor,
    SliceTensor,
    SubWordStream,
    encode_signed,
    sparsity_stats,
)


class SpeculationError(ValueError):
    pass


class SpeculationMode(Enum):
    MM = "mm"
    MM_PLUS_LM = "mm_plus_lm"


@dataclass(frozen=True)
class SpeculationConfig:
    mode: SpeculationMode = SpeculationMode.MM
    candidates_k: int = 4
    channel_group: int = 4

    def __post_init__(self) -> None:
        if self.candidates_k < 1:
            raise SpeculationError("candidates_k must be >= 1")
        if self.channel_group < 1:
            raise SpeculationError("channel_group must be >= 1")


@dataclass
class SpeculationStats:
    windows_total: int
    windows_success: int
    skipped_pass_macs: int
    output_mse: float

    @property
    def success_rate(self) -> float:
        return self.windows_success / self.windows_total if self.windows_total else 1.0


def _score_pairs(mode: SpeculationMode, n_in: int, n_w: int) -> list[tuple[int, int]]:
    if mode is SpeculationMode.MM:
        return [(n_in - 1, n_w - 1)]
    return [(i, n_w - 1) for i in range(n_in - 1, -1, -1)]


def speculation_scores(
    layer: LayerDescriptor,
    input_slices: SliceTensor,
    weight_slices: SliceTensor,
    mode: SpeculationMode = SpeculationMode.MM,
) -> np.ndarray:
    """Per-output scores from the high-order passes, scaled to true weight.

    Requires the signed recode: its high slices track value magnitude, so
    same-magnitude operands score identically regardless of sign.
    """
    if (
        input_slices.kind is not EncodingKind.SIGNED
        or weight_slices.kind is not EncodingKind.SIGNED
    ):
        raise SpeculationError("mode/encoding mismatch: scores need the signed recode")
    if input_slices.config.slice_width != weight_slices.config.slice_width:
        raise SpeculationError("score scaling requires equal slice widths")
    from .pe import conv_planes  # local import keeps module load light

    base = input_slices.config.base
    n_in = input_slices.config.num_slices
    n_w = weight_slices.config.num_slices
    x = input_slices.planes.reshape(
        n_in, layer.in_channels, layer.height, layer.width
    )
    kshape = (layer.out_channels, layer.in_channels) + layer.kernel
    w = weight_slices.planes.reshape((n_w,) + kshape)
    scores = None
    for i, j in _score_pairs(mode, n_in, n_w):
        partial = conv_planes(x[i], w[j], layer.stride, layer.padding)
        term = partial * (base ** (i + j))
        scores = term if scores is None else scores + term
    return scores.reshape(layer.out_channels, -1)


def select_candidates(
    scores: np.ndarray, window: int, k: int, channel_group: int = 4
) -> np.ndarray:
    """Keep-mask [channel groups, positions] of the top-k scores per window.

    Selection is per channel and window (ties to the lowest linear index);
    the kept sets of the channels in a group are unioned, matching the
    4-channel mask granularity of the completion hardware.
    """
    scores = np.asarray(scores)
    oc, spatial = scores.shape
    if oc % channel_group:
        raise SpeculationError("channel_group must divide the output channels")
    if spatial % window:
        raise SpeculationError("window must tile the positions")
    if not 1 <= k <= window:
        raise SpeculationError("k must lie in [1, window]")
    nwin = spatial // window
    per_win = scores.reshape(oc, nwin, window)
    order = np.argsort(-per_win, axis=2, kind="stable")[:, :, :k]
    keep = np.zeros((oc, nwin, window), dtype=bool)
    np.put_along_axis(keep, order, True, axis=2)
    grouped = keep.reshape(oc // channel_group, channel_group, nwin, window)
    return grouped.any(axis=1).reshape(oc // channel_group, spatial)


def mask_noncandidates(
    stream: SubWordStream,
    keep: np.ndarray,
    operand: SkipOperand = SkipOperand.INPUT,
) -> SubWordStream:
    """Zero the sub-words a completion pass will never need.

    Input streams: ``keep`` flags positions along the packing axis; a
    sub-word survives if any of its four positions is kept.  Weight
    streams: ``keep`` flags whole sub-word groups (4 adjacent output
    channels).
    """
    keep = np.asarray(keep, dtype=bool)
    words = stream.words.copy()
    if operand is SkipOperand.WEIGHT:
        groups = keep.size
        if words.size % groups:
            raise SpeculationError("group mask does not tile the stream")
        words = words.reshape(-1, groups)
        words[:, ~keep] = 0
        words = words.reshape(-1)
    else:
        padded = np.zeros(
            -(-keep.size // DIGITS_PER_SUBWORD) * DIGITS_PER_SUBWORD, dtype=bool
        )
        padded[: keep.size] = keep
        group_keep = padded.reshape(-1, DIGITS_PER_SUBWORD).any(axis=1)
        if words.size % group_keep.size:
            raise SpeculationError("position mask does not tile the stream")
        words = words.reshape(-1, group_keep.size)
        words[:, ~group_keep] = 0
        words = words.reshape(-1)
    return SubWordStream(
        words=words,
        slice_width=stream.slice_width,
        plane_shape=stream.plane_shape,
        axis=stream.axis,
    )


def _check_speculation_geometry(layer: LayerDescriptor, cfg: PEConfig) -> None:
    if layer.pool_window is None:
        raise SpeculationError("speculative execution needs a pooled layer")
    if layer.kernel != (1, 1) or layer.stride != (1, 1) or layer.padding != (0, 0):
        raise SpeculationError(
            "output masking needs position-aligned (1x1, stride 1, unpadded) layers"
        )
    spec = layer.speculation
    if spec is None:
        raise SpeculationError("layer carries no speculation config")
    if spec.channel_group != cfg.arrays_per_pe:
        raise SpeculationError(
            "mask granularity must match the output channels in flight"
        )
    if layer.out_channels % spec.channel_group:
        raise SpeculationError("channel_group must divide the output channels")
    if spec.candidates_k > layer.pool_window:
        raise SpeculationError("more candidates than window positions")


def speculative_layer_execute(
    layer: LayerDescriptor,
    inputs: QuantTensor,
    weights: QuantTensor,
    cfg: PEConfig | None = None,
    accumulate_mode: AccumulateMode = AccumulateMode.EXACT,
    *,
    dsm: DsmDecision | None = None,
) -> tuple[QuantTensor, SpeculationStats, CycleEnergyReport]:
    """Pooled layer with output speculation.

    Score passes run first and their partials are reused, so kept
    candidates finish bit-identical to a plain execution; positions masked
    out of a channel group are excluded from that group's pooling max.
    """
    cfg = cfg or PEConfig()
    spec = layer.speculation
    _check_speculation_geometry(layer, cfg)
    x, k = _canonical_operands(layer, inputs, weights)
    in_sl = encode_signed(QuantTensor(x, inputs.precision), layer.input_slices)
    w_sl = encode_signed(QuantTensor(k, weights.precision), layer.weight_slices)
    geom = _Geometry(layer, cfg)
    in_masks = input_zero_masks(in_sl, layer)
    w_masks = weight_zero_masks(w_sl, layer)
    if dsm is None:
        dsm = dsm_decide(
            sparsity_stats(in_sl, packing_axis=-1),
            sparsity_stats(w_sl, packing_axis=0),
            subword_bits=layer.input_slices.slice_width * DIGITS_PER_SUBWORD,
        )
    report = CycleEnergyReport()
    _load_counters(report, in_masks, w_masks, dsm)

    n_in = layer.input_slices.num_slices
    n_w = layer.weight_slices.num_slices
    score_pairs = _score_pairs(spec.mode, n_in, n_w)
    all_pairs = [(i, j) for i in range(n_in) for j in range(n_w)]
    completion_pairs = [p for p in all_pairs if p not in score_pairs]

    partials: dict[tuple[int, int], np.ndarray] = {}
    base = layer.input_slices.base
    scores = None
    for pair in score_pairs:
        i, j = pair
        role, skip = _resolve_pass_role(SkipMode.HYBRID_SKIP, dsm, pair, None)
        partial, cost = pe_convolve_pass(
            geom, in_sl.planes[i], w_sl.planes[j], in_masks[i], w_masks[j], role, skip, cfg
        )
        partials[pair] = partial
        _account_pass(report, geom, cost, role, skip, cfg, pair)
        term = partial * (base ** (i + j))
        scores = term.copy() if scores is None else scores + term
    scores = scores.reshape(layer.out_channels, -1)
    keep = select_candidates(
        scores, layer.pool_window, spec.candidates_k, spec.channel_group
    )

    # masks at the schedule granularities of both streaming roles
    ocg = keep.shape[0]
    keep_tiles = _keep_as_tiles(keep, layer)
    keep_groups = _keep_as_spatial_groups(keep, layer, cfg)

    skipped_completion = 0
    for pair in completion_pairs:
        i, j = pair
        role, _ = _resolve_pass_role(SkipMode.HYBRID_SKIP, dsm, pair, None)
        # completion always runs through the skip path: masked sub-words are
        # regenerated as zeros and elided like any other zero sub-word
        partial, cost = pe_convolve_pass(
            geom,
            in_sl.planes[i],
            w_sl.planes[j],
            in_masks[i],
            w_masks[j],
            role,
            True,
            cfg,
            tile_candidates=keep_tiles if role is SkipOperand.INPUT else None,
            group_candidates=keep_groups if role is SkipOperand.WEIGHT else None,
        )
        partials[pair] = partial
        _account_pass(report, geom, cost, role, True, cfg, pair)
        skipped_completion += cost.macs_skipped

    full = combine_partials(
        {p: partials[p] for p in sorted(partials)},
        layer.input_slices,
        layer.weight_slices,
        accumulate_mode,
    ).reshape(layer.out_channels, -1)
    exact_pooled = pool_flat(full, layer.pool_window)
    spec_values = _masked_pool(full, keep, layer.pool_window, spec.channel_group)
    report.bump(
        "pool_cycles", -(-full.size // (cfg.arrays_per_pe * cfg.units_per_column))
    )
    report.bump("obuf_reads", full.size)
    report.bump("obuf_writes", spec_values.size)
    report.cycles_total = sum(report.pass_cycles.values()) + report.counters["pool_cycles"]

    nwin = full.shape[1] // layer.pool_window
    grp = spec.channel_group
    agree = spec_values == exact_pooled  # [OC, nwin]
    granule_ok = agree.reshape(ocg, grp, nwin).all(axis=1)
    stats = SpeculationStats(
        windows_total=int(ocg * nwin),
        windows_success=int(granule_ok.sum()),
        skipped_pass_macs=int(skipped_completion),
        output_mse=float(np.mean((spec_values - exact_pooled) ** 2)),
    )
    return QuantTensor(values=spec_values, precision=32), stats, report


def _keep_as_tiles(keep: np.ndarray, layer: LayerDescriptor) -> np.ndarray:
    """[OCG, positions] keep mask folded to input-role tiles [rounds, OH, OWG]."""
    ocg = keep.shape[0]
    oh, ow = layer.out_height, layer.out_width
    owg = -(-ow // DIGITS_PER_SUBWORD)
    padded = np.zeros((ocg, oh, owg * DIGITS_PER_SUBWORD), dtype=bool)
    padded[:, :, :ow] = keep.reshape(ocg, oh, ow)
    return padded.reshape(ocg, oh, owg, DIGITS_PER_SUBWORD).any(axis=3)


def _keep_as_spatial_groups(
    keep: np.ndarray, layer: LayerDescriptor, cfg: PEConfig
) -> np.ndarray:
    """[OCG, positions] keep mask folded to weight-role tiles [OCG, T]."""
    ocg, spatial = keep.shape
    arrays = cfg.arrays_per_pe
    tiles = -(-spatial // arrays)
    padded = np.zeros((ocg, tiles * arrays), dtype=bool)
    padded[:, :spatial] = keep
    return padded.reshape(ocg, tiles, arrays).any(axis=2)


def _masked_pool(
    values: np.ndarray, keep: np.ndarray, window: int, channel_group: int
) -> np.ndarray:
    """Max over kept positions only; channels use their group's keep mask."""
    oc, spatial = values.shape
    nwin = spatial // window
    keep_per_chan = np.repeat(keep, channel_group, axis=0)[:oc]
    lows = np.iinfo(np.int64).min
    masked = np.where(keep_per_chan, values, lows)
    return masked.reshape(oc, nwin, window).max(axis=2)
