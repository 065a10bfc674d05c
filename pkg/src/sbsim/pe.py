"""Processing-element model: slice-serial convolution with zero skipping.

Functional semantics and cost accounting are kept separate.  Outputs of an
Exact-mode execution are always the plain integer convolution of the
original values (skipping elides only zero products); cycle counts come
from how many sub-words each column actually streams.

Dataflow modeled per pass (one input plane order x one weight plane order):

* input-streamed role: each column holds an input-channel partition and
  streams its sub-words once per kernel position and output-channel round;
  the sub-word feeds 4 spatially adjacent outputs across the column's MAC
  units while 4 arrays cover 4 output channels.
* weight-streamed role (operands swapped): sub-words of 4 adjacent output
  channels stream instead, re-fetched once per spatial tile; outputs are
  restored to channel order before the output buffer.

A group of in-flight outputs drains into the accumulation unit at
``drain_latency`` extra cycles; columns synchronize per group (max of
their work), groups within an array serialize, arrays run independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .compress import DsmDecision, DsmPolicy, SkipOperand, dsm_decide
from .sbr import (
    DIGITS_PER_SUBWORD,
    QuantTensor,
    SliceConfig,
    SliceTensor,
    encode_signed,
    sparsity_stats,
    zero_subword_mask,
)

if TYPE_CHECKING:  # pragma: no cover
    from .speculate import SpeculationConfig


class PEError(ValueError):
    pass


class SkipMode(Enum):
    NO_SKIP = "no_skip"
    INPUT_SKIP = "input_skip"
    HYBRID_SKIP = "hybrid_skip"
    IN_OUT_SKIP = "in_out_skip"


class AccumulateMode(Enum):
    EXACT = "exact"
    CHAINED = "chained"


class LayerKind(Enum):
    CONV2D = "conv2d"
    FULLY_CONNECTED = "fully_connected"
    MAX_POOL = "max_pool"


POOL_WINDOW_SIZES = (4, 16, 32, 40, 64)

DEFAULT_ENERGY_COSTS = {
    # relative proxy units, not joules
    "mac": 1.0,
    "rf_access": 1.0,
    "sram_access": 6.0,
    "dram_access": 200.0,
    "noc_hop_bit": 0.1,
}


@dataclass(frozen=True)
class PEConfig:
    arrays_per_pe: int = 4  # output channels in flight
    columns_per_array: int = 4  # input-channel partitions
    units_per_column: int = 4  # spatially adjacent outputs
    acc_width: int = 12
    slice_width: int = 4
    product_width: int | None = None  # defaults to 2 * slice_width
    latch_depth: int = 1
    pe_arrays_per_core: int = 3
    drain_latency: int = 1

    def __post_init__(self) -> None:
        if min(self.arrays_per_pe, self.columns_per_array, self.units_per_column) < 1:
            raise PEError("PE geometry fields must be positive")
        if self.resolved_product_width > self.acc_width:
            raise PEError("acc_width must cover a full slice product")

    @property
    def resolved_product_width(self) -> int:
        return self.product_width or 2 * self.slice_width

    @property
    def mac_units(self) -> int:
        return self.arrays_per_pe * self.columns_per_array * self.units_per_column


@dataclass
class LayerDescriptor:
    """Geometry and execution options of one layer.

    FULLY_CONNECTED layers put the point/batch count in ``width`` with
    ``height == 1`` and an implicit 1x1 kernel; MAX_POOL layers carry no
    weights and pool the flattened spatial axis.
    """

    name: str
    kind: LayerKind
    in_channels: int
    height: int
    width: int
    out_channels: int = 1
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    pool_window: int | None = None
    input_slices: SliceConfig = field(default_factory=SliceConfig)
    weight_slices: SliceConfig = field(default_factory=SliceConfig)
    skip_mode: SkipMode = SkipMode.NO_SKIP
    speculation: "SpeculationConfig | None" = None

    def __post_init__(self) -> None:
        if min(self.in_channels, self.height, self.width) < 1:
            raise PEError(f"layer {self.name}: non-positive input geometry")
        if self.kind is LayerKind.FULLY_CONNECTED:
            if self.height != 1 or self.kernel != (1, 1) or self.padding != (0, 0):
                raise PEError(f"layer {self.name}: fully-connected layers are 1x1, height 1")
        if self.kind is not LayerKind.MAX_POOL:
            if self.out_channels < 1:
                raise PEError(f"layer {self.name}: non-positive out_channels")
            if self.out_height < 1 or self.out_width < 1:
                raise PEError(f"layer {self.name}: kernel does not fit the padded input")
        if self.pool_window is not None:
            if self.pool_window not in POOL_WINDOW_SIZES:
                raise PEError(
                    f"layer {self.name}: pool window {self.pool_window} not in {POOL_WINDOW_SIZES}"
                )
            spatial = (
                self.height * self.width
                if self.kind is LayerKind.MAX_POOL
                else self.out_height * self.out_width
            )
            if spatial % self.pool_window:
                raise PEError(f"layer {self.name}: pool window must tile the spatial extent")
        if self.kind is LayerKind.MAX_POOL and self.pool_window is None:
            raise PEError(f"layer {self.name}: max-pool layer needs a pool window")

    @property
    def out_height(self) -> int:
        kh, _ = self.kernel
        sh, _ = self.stride
        ph, _ = self.padding
        return (self.height + 2 * ph - kh) // sh + 1

    @property
    def out_width(self) -> int:
        _, kw = self.kernel
        _, sw = self.stride
        _, pw = self.padding
        return (self.width + 2 * pw - kw) // sw + 1

    @property
    def out_spatial(self) -> int:
        return self.out_height * self.out_width


@dataclass
class CycleEnergyReport:
    """Cycle totals per pass plus event counters feeding the energy proxy."""

    pass_cycles: dict[tuple[int, int], int] = field(default_factory=dict)
    cycles_total: int = 0
    counters: dict[str, int] = field(default_factory=dict)

    COUNTER_KEYS = (
        "mac_ops_executed",
        "mac_ops_skipped",
        "mac_work_cycles",
        "drain_cycles",
        "pool_cycles",
        "ibuf_reads",
        "ibuf_writes",
        "wbuf_reads",
        "wbuf_writes",
        "idxbuf_reads",
        "idxbuf_writes",
        "obuf_reads",
        "obuf_writes",
        "acc_overflow_events",
        "noc_bytes",
        "noc_bit_hops",
        "dram_bytes",
    )

    def __post_init__(self) -> None:
        for key in self.COUNTER_KEYS:
            self.counters.setdefault(key, 0)

    def bump(self, key: str, amount: int) -> None:
        self.counters[key] = self.counters.get(key, 0) + int(amount)

    def add(self, other: "CycleEnergyReport") -> "CycleEnergyReport":
        merged = CycleEnergyReport()
        merged.pass_cycles = dict(self.pass_cycles)
        for key, val in other.pass_cycles.items():
            merged.pass_cycles[key] = merged.pass_cycles.get(key, 0) + val
        merged.cycles_total = self.cycles_total + other.cycles_total
        for key in set(self.counters) | set(other.counters):
            merged.counters[key] = self.counters.get(key, 0) + other.counters.get(key, 0)
        return merged

    def energy(self, cost_table: dict[str, float] | None = None) -> float:
        """Relative energy proxy: weighted event counts, not a power estimate.

        MAC ops cost one multiply plus one accumulator-register update;
        buffer events cost one SRAM access each; DRAM traffic is charged
        per 32-bit word; NoC traffic per bit-hop.
        """
        t = dict(DEFAULT_ENERGY_COSTS)
        if cost_table:
            t.update(cost_table)
        c = self.counters
        sram_events = (
            c["ibuf_reads"]
            + c["ibuf_writes"]
            + c["wbuf_reads"]
            + c["wbuf_writes"]
            + c["idxbuf_reads"]
            + c["idxbuf_writes"]
            + c["obuf_reads"]
            + c["obuf_writes"]
        )
        return float(
            c["mac_ops_executed"] * (t["mac"] + t["rf_access"])
            + sram_events * t["sram_access"]
            + math.ceil(c["dram_bytes"] / 4) * t["dram_access"]
            + c["noc_bit_hops"] * t["noc_hop_bit"]
        )


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def signed_mac_product(a: int, b: int, slice_width: int = 4) -> int:
    """Product of two signed digits; fits 2w bits ((-B)*(-B) = 2**(2w-2))."""
    base = 1 << (slice_width - 1)
    if not (-base <= a < base) or not (-base <= b < base):
        raise PEError("digit operand out of slice range")
    return a * b


def accumulate_wrap(acc, addend, acc_width: int = 12):
    """2's-complement addition wrapping at ``acc_width`` bits."""
    span = 1 << acc_width
    half = span >> 1
    if isinstance(acc, np.ndarray) or isinstance(addend, np.ndarray):
        return ((np.asarray(acc, dtype=np.int64) + addend + half) % span) - half
    return ((int(acc) + int(addend) + half) % span) - half


def accumulation_chain(partials, shift: int, orders=None):
    """Order-serial reduction: shift-right the running value, add the next.

    ``partials`` is ordered low order first.  Entries sharing an order (per
    ``orders``) add with no shift; each order step applies one arithmetic
    right shift by ``shift``.  The result approximates the exact weighted
    sum scaled down by ``2**(shift * (top_order - low_order))``.
    """
    parts = list(partials)
    if not parts:
        raise PEError("accumulation chain needs at least one partial")
    if orders is None:
        orders = list(range(len(parts)))
    orders = [int(o) for o in orders]
    if len(orders) != len(parts):
        raise PEError("orders must match partials")
    if any(b < a for a, b in zip(orders, orders[1:])):
        raise PEError("orders must be non-decreasing")
    acc = parts[0]
    for prev, cur, part in zip(orders, orders[1:], parts[1:]):
        step = cur - prev
        if step:
            acc = acc >> (shift * step)
        acc = acc + part
    return acc


def zero_skip_schedule(work, drain_latency: int = 1) -> int:
    """Array cycles from per-group, per-column work counts.

    ``work`` is [groups][columns] (a 1-D vector means a single group).
    Columns within a group run in parallel (max), groups serialize, each
    non-empty group pays the drain latency once.
    """
    arr = np.asarray(work, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise PEError("work must be [groups][columns]")
    if arr.size == 0:
        return 0
    group_max = arr.max(axis=1)
    return int(group_max.sum() + drain_latency * np.count_nonzero(group_max))


# ---------------------------------------------------------------------------
# digit-plane convolution
# ---------------------------------------------------------------------------


def conv_planes(
    x: np.ndarray,
    k: np.ndarray,
    stride: tuple[int, int],
    padding: tuple[int, int],
) -> np.ndarray:
    """Integer convolution of one input plane [IC,H,W] with one kernel plane
    [OC,IC,KH,KW]; zero padding, no dilation."""
    ic, h, w = x.shape
    oc, kic, kh, kw = k.shape
    if kic != ic:
        raise PEError("channel mismatch between input and kernel planes")
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xpad = np.zeros((ic, h + 2 * ph, w + 2 * pw), dtype=np.int64)
    xpad[:, ph : ph + h, pw : pw + w] = x
    out = np.zeros((oc, oh, ow), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            xs = xpad[:, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw]
            out += np.tensordot(k[:, :, i, j], xs, axes=(1, 0))
    return out


# ---------------------------------------------------------------------------
# per-pass cost model
# ---------------------------------------------------------------------------


@dataclass
class _Geometry:
    """Stream bookkeeping shared by every pass of a layer."""

    layer: LayerDescriptor
    cfg: PEConfig

    def __post_init__(self) -> None:
        lay = self.layer
        self.kh, self.kw = lay.kernel
        self.sh, self.sw = lay.stride
        self.ph, self.pw = lay.padding
        self.oh, self.ow = lay.out_height, lay.out_width
        self.in_groups = -(-lay.width // DIGITS_PER_SUBWORD)
        self.out_tiles_w = -(-lay.out_width // DIGITS_PER_SUBWORD)
        self.oc_rounds = -(-lay.out_channels // self.cfg.arrays_per_pe)
        self.oc_groups = -(-lay.out_channels // DIGITS_PER_SUBWORD)
        self.spatial_tiles = -(-lay.out_spatial // self.cfg.arrays_per_pe)
        self.columns = self.cfg.columns_per_array
        self.col_of_channel = np.arange(lay.in_channels) % self.columns
        # first-need sub-word fetch schedule: new_s[kw][owg] lists the input
        # sub-word indices first required by output tile owg at kernel col kw
        self.new_s: list[list[list[int]]] = []
        for j in range(self.kw):
            per_tile: list[list[int]] = []
            prev_max = -1
            for owg in range(self.out_tiles_w):
                ows = range(
                    owg * DIGITS_PER_SUBWORD,
                    min(self.ow, (owg + 1) * DIGITS_PER_SUBWORD),
                )
                needed = sorted(
                    {
                        (o * self.sw - self.pw + j) // DIGITS_PER_SUBWORD
                        for o in ows
                        if 0 <= o * self.sw - self.pw + j < lay.width
                    }
                )
                fresh = [s for s in needed if s > prev_max]
                if needed:
                    prev_max = max(prev_max, needed[-1])
                per_tile.append(fresh)
            self.new_s.append(per_tile)
        # valid output-row range per kernel row
        self.oh_range: list[tuple[int, int]] = []
        for i in range(self.kh):
            lo = max(0, math.ceil((self.ph - i) / self.sh))
            hi = min(self.oh - 1, (lay.height - 1 + self.ph - i) // self.sh)
            self.oh_range.append((lo, hi))
        # in-bounds (oh, ow) pair counts per kernel position, for MAC accounting
        self.valid_ow: list[int] = []
        for j in range(self.kw):
            self.valid_ow.append(
                sum(1 for o in range(self.ow) if 0 <= o * self.sw - self.pw + j < lay.width)
            )
        self.valid_oh: list[int] = []
        for i in range(self.kh):
            lo, hi = self.oh_range[i]
            self.valid_oh.append(max(0, hi - lo + 1))
        self.inbounds_pairs = sum(
            self.valid_oh[i] * self.valid_ow[j] for i in range(self.kh) for j in range(self.kw)
        )

    @property
    def nominal_macs_per_pass(self) -> int:
        # in-bounds products only: padding contributes no fetch and no MAC
        return self.inbounds_pairs * self.layer.in_channels * self.layer.out_channels


def _column_sums(mask: np.ndarray, col_of_channel: np.ndarray, columns: int) -> np.ndarray:
    """Fold a per-channel mask [IC, ...] into per-column counts [C, ...]."""
    out = np.zeros((columns,) + mask.shape[1:], dtype=np.int64)
    np.add.at(out, col_of_channel, mask.astype(np.int64))
    return out


@dataclass
class _PassCost:
    cycles: int
    work_cycles: int
    drain_cycles: int
    processed_events: int
    macs_skipped: int


def _tile_work_input_role(
    geom: _Geometry, col_counts: np.ndarray
) -> np.ndarray:
    """Per-(output row, tile, column) sub-word fetch counts, [OH, OWG, C]."""
    w0 = np.zeros((geom.oh, geom.out_tiles_w, geom.columns), dtype=np.int64)
    for i in range(geom.kh):
        lo, hi = geom.oh_range[i]
        if lo > hi:
            continue
        ohs = np.arange(lo, hi + 1)
        ihs = ohs * geom.sh - geom.ph + i
        for j in range(geom.kw):
            for owg in range(geom.out_tiles_w):
                for s in geom.new_s[j][owg]:
                    w0[lo : hi + 1, owg, :] += col_counts[:, ihs, s].T
    return w0


def _input_role_cost(
    geom: _Geometry,
    processed: np.ndarray,  # bool [IC, H, S]
    zero_elem: np.ndarray | None,  # bool [IC, H, W] when skipping, else None
    cfg: PEConfig,
    tile_candidates: np.ndarray | None = None,  # bool [rounds, OH, OWG]
) -> _PassCost:
    lay = geom.layer
    col_counts = _column_sums(processed, geom.col_of_channel, geom.columns)
    w0 = _tile_work_input_role(geom, col_counts)
    drain = cfg.drain_latency
    if tile_candidates is None:
        tile_max = w0.max(axis=2)
        work = int(tile_max.sum()) * geom.oc_rounds
        drains = int(np.count_nonzero(tile_max)) * geom.oc_rounds * drain
        events = int(w0.sum()) * geom.oc_rounds
    else:
        if tile_candidates.shape != (geom.oc_rounds, geom.oh, geom.out_tiles_w):
            raise PEError("candidate mask shape mismatch")
        work = drains = events = 0
        tile_max = w0.max(axis=2)
        for r in range(geom.oc_rounds):
            keep = tile_candidates[r]
            masked = tile_max * keep
            work += int(masked.sum())
            drains += int(np.count_nonzero(masked)) * drain
            events += int((w0 * keep[:, :, None]).sum())
    # MAC accounting on the nominal (in-bounds) product count
    skipped = 0
    if zero_elem is not None:
        zcount = conv_planes(
            zero_elem.astype(np.int64),
            np.ones((1, lay.in_channels, geom.kh, geom.kw), dtype=np.int64),
            lay.stride,
            lay.padding,
        )
        if tile_candidates is None:
            skipped = int(zcount.sum()) * lay.out_channels
        else:
            skipped = _masked_skip_count_input(geom, zero_elem, tile_candidates)
    elif tile_candidates is not None:
        skipped = _masked_skip_count_input(geom, None, tile_candidates)
    return _PassCost(
        cycles=work + drains,
        work_cycles=work,
        drain_cycles=drains,
        processed_events=events,
        macs_skipped=skipped,
    )


def _masked_skip_count_input(
    geom: _Geometry, zero_elem: np.ndarray | None, tile_candidates: np.ndarray
) -> int:
    """Skipped nominal MACs for masked 1x1 passes (speculation completion)."""
    lay = geom.layer
    if (geom.kh, geom.kw) != (1, 1) or (geom.sh, geom.sw) != (1, 1) or geom.ph or geom.pw:
        raise PEError("output-masked passes require 1x1 stride-1 unpadded geometry")
    arrays = geom.cfg.arrays_per_pe
    # elementwise processed mask per position: [IC, H, W]
    if zero_elem is None:
        dense = np.zeros((lay.in_channels, lay.height, lay.width), dtype=bool)
    else:
        dense = zero_elem
    skipped = 0
    for r in range(geom.oc_rounds):
        chans = min(arrays, lay.out_channels - r * arrays)
        keep_tiles = tile_candidates[r]  # [OH, OWG]
        keep_elem = np.repeat(keep_tiles, DIGITS_PER_SUBWORD, axis=1)[:, : lay.width]
        # skipped if the sub-word was zero anyway or the position is masked out
        miss = np.logical_or(dense, ~keep_elem[None, :, :])
        skipped += int(miss.sum()) * chans
    return skipped


def _weight_role_cost(
    geom: _Geometry,
    processed_w: np.ndarray,  # bool [OCG, IC, KH, KW]
    zero_welem: np.ndarray | None,  # bool [OC, IC, KH, KW] when skipping
    cfg: PEConfig,
    group_candidates: np.ndarray | None = None,  # bool [OCG, T] per spatial tile
) -> _PassCost:
    lay = geom.layer
    counts = np.zeros((geom.columns, geom.oc_groups), dtype=np.int64)
    per_chan = processed_w.sum(axis=(2, 3))  # [OCG, IC]
    for ic in range(lay.in_channels):
        counts[geom.col_of_channel[ic]] += per_chan[:, ic]
    tiles = geom.spatial_tiles
    drain = cfg.drain_latency
    group_max = counts.max(axis=0)  # [OCG]
    group_sum = counts.sum(axis=0)
    if group_candidates is None:
        work = int(group_max.sum()) * tiles
        drains = int(np.count_nonzero(group_max)) * tiles * drain
        events = int(group_sum.sum()) * tiles
    else:
        if group_candidates.shape != (geom.oc_groups, tiles):
            raise PEError("candidate mask shape mismatch")
        active = group_candidates.sum(axis=1)  # tiles needing each oc group
        work = int((group_max * active).sum())
        drains = int(((group_max > 0) * active).sum()) * drain
        events = int((group_sum * active).sum())
    skipped = 0
    if zero_welem is not None or group_candidates is not None:
        skipped = _skip_count_weight(geom, zero_welem, group_candidates)
    return _PassCost(
        cycles=work + drains,
        work_cycles=work,
        drain_cycles=drains,
        processed_events=events,
        macs_skipped=skipped,
    )


def _skip_count_weight(
    geom: _Geometry,
    zero_welem: np.ndarray | None,
    group_candidates: np.ndarray | None,
) -> int:
    lay = geom.layer
    if zero_welem is None:
        zero_welem = np.zeros(
            (lay.out_channels, lay.in_channels, geom.kh, geom.kw), dtype=bool
        )
    if group_candidates is None:
        inb = np.zeros((geom.kh, geom.kw), dtype=np.int64)
        for i in range(geom.kh):
            for j in range(geom.kw):
                inb[i, j] = geom.valid_oh[i] * geom.valid_ow[j]
        return int((zero_welem.sum(axis=(0, 1)) * inb).sum())
    # masked completion passes are 1x1: every output position pairs with
    # every weight element of its channel
    if (geom.kh, geom.kw) != (1, 1):
        raise PEError("output-masked passes require 1x1 geometry")
    arrays = DIGITS_PER_SUBWORD
    spatial = lay.out_spatial
    tile_of_pos = np.arange(spatial) // geom.cfg.arrays_per_pe
    skipped = 0
    for g in range(geom.oc_groups):
        chans = min(arrays, lay.out_channels - g * arrays)
        oc_lo = g * arrays
        nzero = int(zero_welem[oc_lo : oc_lo + chans].sum())  # zero weight elems
        cand_pos = group_candidates[g][tile_of_pos]  # [spatial]
        n_cand = int(cand_pos.sum())
        n_masked = spatial - n_cand
        skipped += nzero * n_cand + chans * lay.in_channels * n_masked
    return skipped


# ---------------------------------------------------------------------------
# layer execution
# ---------------------------------------------------------------------------


def _canonical_operands(
    layer: LayerDescriptor, inputs: QuantTensor, weights: QuantTensor | None
) -> tuple[np.ndarray, np.ndarray | None]:
    x = inputs.values
    if layer.kind is LayerKind.FULLY_CONNECTED:
        if x.shape != (layer.in_channels, layer.width):
            raise PEError(
                f"layer {layer.name}: expected input dims "
                f"({layer.in_channels}, {layer.width}), got {x.shape}"
            )
        x = x.reshape(layer.in_channels, 1, layer.width)
    else:
        if x.shape != (layer.in_channels, layer.height, layer.width):
            raise PEError(
                f"layer {layer.name}: expected input dims "
                f"({layer.in_channels}, {layer.height}, {layer.width}), got {x.shape}"
            )
    if layer.kind is LayerKind.MAX_POOL:
        return x, None
    assert weights is not None
    k = weights.values
    if layer.kind is LayerKind.FULLY_CONNECTED and k.shape == (
        layer.out_channels,
        layer.in_channels,
    ):
        k = k.reshape(layer.out_channels, layer.in_channels, 1, 1)
    expected = (layer.out_channels, layer.in_channels) + layer.kernel
    if k.shape != expected:
        raise PEError(f"layer {layer.name}: expected weight dims {expected}, got {k.shape}")
    return x, k


def input_zero_masks(in_slices: SliceTensor, layer: LayerDescriptor) -> list[np.ndarray]:
    """Zero-sub-word masks per input plane, shaped [IC, H, S]."""
    masks = []
    groups = -(-layer.width // DIGITS_PER_SUBWORD)
    for i in range(in_slices.config.num_slices):
        m = zero_subword_mask(in_slices.planes[i], axis=-1)
        masks.append(m.reshape(layer.in_channels, -1, groups))
    return masks


def weight_zero_masks(w_slices: SliceTensor, layer: LayerDescriptor) -> list[np.ndarray]:
    """Zero-sub-word masks per weight plane, shaped [OCG, IC, KH, KW].

    Sub-words group four adjacent output channels holding the same
    (ic, kh, kw) weight position.
    """
    kh, kw = layer.kernel
    ocg = -(-layer.out_channels // DIGITS_PER_SUBWORD)
    masks = []
    for j in range(w_slices.config.num_slices):
        m = zero_subword_mask(w_slices.planes[j], axis=0)
        # rows iterate the non-packed dims in order (IC, KH, KW)
        masks.append(m.reshape(layer.in_channels, kh, kw, ocg).transpose(3, 0, 1, 2))
    return masks


def _resolve_pass_role(
    mode: SkipMode,
    dsm: DsmDecision | None,
    pair: tuple[int, int],
    role_override: SkipOperand | None,
) -> tuple[SkipOperand, bool]:
    """Return (streamed operand, skip enabled) for one pass."""
    if mode is SkipMode.NO_SKIP:
        role, skip = SkipOperand.INPUT, False
    elif mode is SkipMode.INPUT_SKIP:
        role, skip = SkipOperand.INPUT, True
    else:
        choice = dsm.skip_operand[pair] if dsm else SkipOperand.INPUT
        if choice is SkipOperand.NONE:
            role, skip = SkipOperand.INPUT, False
        else:
            role, skip = choice, True
    if role_override is not None and role_override is not SkipOperand.NONE:
        role = role_override
    return role, skip


def pe_convolve_pass(
    geom: _Geometry,
    in_plane: np.ndarray,
    w_plane: np.ndarray,
    in_mask: np.ndarray,
    w_mask: np.ndarray,
    role: SkipOperand,
    skip_enabled: bool,
    cfg: PEConfig,
    tile_candidates: np.ndarray | None = None,
    group_candidates: np.ndarray | None = None,
) -> tuple[np.ndarray, _PassCost]:
    """One (input plane, weight plane) pass: partial sums plus its cost.

    ``in_mask``/``w_mask`` are the zero-sub-word masks of the two planes.
    Skipping never changes the partial sums; zero sub-words contribute
    nothing whether or not they are fetched.
    """
    lay = geom.layer
    partial = conv_planes(in_plane, w_plane, lay.stride, lay.padding)
    if role is SkipOperand.WEIGHT:
        processed = ~w_mask if skip_enabled else np.ones_like(w_mask, dtype=bool)
        zero_welem = None
        if skip_enabled:
            zero_welem = np.repeat(w_mask, DIGITS_PER_SUBWORD, axis=0)[: lay.out_channels]
        cost = _weight_role_cost(geom, processed, zero_welem, cfg, group_candidates)
    else:
        processed = ~in_mask if skip_enabled else np.ones_like(in_mask, dtype=bool)
        zero_elem = None
        if skip_enabled:
            zero_elem = np.repeat(in_mask, DIGITS_PER_SUBWORD, axis=2)[:, :, : lay.width]
        cost = _input_role_cost(geom, processed, zero_elem, cfg, tile_candidates)
    return partial, cost


def pool_flat(values: np.ndarray, window: int) -> np.ndarray:
    """Max over consecutive windows of the flattened spatial axis, per channel."""
    ch = values.shape[0]
    flat = values.reshape(ch, -1)
    if flat.shape[1] % window:
        raise PEError("pool window must tile the spatial extent")
    return flat.reshape(ch, -1, window).max(axis=2)


def _load_counters(
    report: CycleEnergyReport,
    in_masks: list[np.ndarray],
    w_masks: list[np.ndarray],
    dsm: DsmDecision | None,
) -> None:
    """Buffer-write accounting for the one-time operand load."""
    for i, m in enumerate(in_masks):
        total = m.size
        nz = total - int(m.sum())
        compressed = bool(dsm and dsm.input_compress_flags[i])
        report.bump("ibuf_writes", nz if compressed else total)
        if compressed:
            report.bump("idxbuf_writes", nz)
    for j, m in enumerate(w_masks):
        total = m.size
        nz = total - int(m.sum())
        compressed = bool(dsm and dsm.weight_compress_flags[j])
        report.bump("wbuf_writes", nz if compressed else total)
        if compressed:
            report.bump("idxbuf_writes", nz)


def layer_execute(
    layer: LayerDescriptor,
    inputs: QuantTensor,
    weights: QuantTensor | None,
    cfg: PEConfig | None = None,
    accumulate_mode: AccumulateMode = AccumulateMode.EXACT,
    *,
    dsm: DsmDecision | None = None,
    role_override: SkipOperand | None = None,
    hw_check: bool = False,
) -> tuple[QuantTensor, CycleEnergyReport]:
    """Run one layer on a single PE.

    Exact mode returns the plain integer convolution of the original
    values for every skip mode; chained mode returns the order-serial
    approximation.  Speculative output skipping lives in the speculation
    module; here IN_OUT_SKIP schedules like HYBRID_SKIP and pooling, when
    present, is exact.
    """
    cfg = cfg or PEConfig()
    if layer.kind is LayerKind.MAX_POOL:
        return _execute_pool(layer, inputs, cfg)
    x, k = _canonical_operands(layer, inputs, weights)
    in_sl = encode_signed(QuantTensor(x, inputs.precision), layer.input_slices)
    w_sl = encode_signed(QuantTensor(k, weights.precision), layer.weight_slices)
    geom = _Geometry(layer, cfg)
    in_masks = input_zero_masks(in_sl, layer)
    w_masks = weight_zero_masks(w_sl, layer)
    if dsm is None and layer.skip_mode in (SkipMode.HYBRID_SKIP, SkipMode.IN_OUT_SKIP):
        dsm = dsm_decide(
            sparsity_stats(in_sl, packing_axis=-1),
            sparsity_stats(w_sl, packing_axis=0),
            subword_bits=layer.input_slices.slice_width * DIGITS_PER_SUBWORD,
        )
    report = CycleEnergyReport()
    _load_counters(report, in_masks, w_masks, dsm)

    n_in = layer.input_slices.num_slices
    n_w = layer.weight_slices.num_slices
    partials: dict[tuple[int, int], np.ndarray] = {}
    for i in range(n_in):
        for j in range(n_w):
            role, skip = _resolve_pass_role(layer.skip_mode, dsm, (i, j), role_override)
            partial, cost = pe_convolve_pass(
                geom,
                in_sl.planes[i],
                w_sl.planes[j],
                in_masks[i],
                w_masks[j],
                role,
                skip,
                cfg,
            )
            partials[(i, j)] = partial
            _account_pass(report, geom, cost, role, skip, cfg, (i, j))
            if hw_check:
                _hw_acc_check(report, geom, in_sl.planes[i], w_sl.planes[j], cfg)
    out = combine_partials(
        partials, layer.input_slices, layer.weight_slices, accumulate_mode
    )
    out = _finalize_outputs(layer, out, report, cfg)
    report.cycles_total = sum(report.pass_cycles.values()) + report.counters["pool_cycles"]
    return out, report


def _account_pass(
    report: CycleEnergyReport,
    geom: _Geometry,
    cost: _PassCost,
    role: SkipOperand,
    skip_enabled: bool,
    cfg: PEConfig,
    pair: tuple[int, int],
) -> None:
    lay = geom.layer
    nominal = geom.nominal_macs_per_pass
    executed = nominal - cost.macs_skipped
    report.pass_cycles[pair] = cost.cycles
    report.bump("mac_work_cycles", cost.work_cycles)
    report.bump("drain_cycles", cost.drain_cycles)
    report.bump("mac_ops_executed", executed)
    report.bump("mac_ops_skipped", cost.macs_skipped)
    report.bump("ibuf_reads", cost.processed_events)
    report.bump("wbuf_reads", cost.processed_events * cfg.arrays_per_pe)
    if skip_enabled:
        report.bump("idxbuf_reads", cost.processed_events)
    out_elems = lay.out_channels * lay.out_spatial
    report.bump("obuf_writes", out_elems)
    report.bump("obuf_reads", out_elems)


def _hw_acc_check(
    report: CycleEnergyReport,
    geom: _Geometry,
    in_plane: np.ndarray,
    w_plane: np.ndarray,
    cfg: PEConfig,
) -> None:
    """Diagnostic: count per-column partial sums that overflow the register."""
    lay = geom.layer
    half = 1 << (cfg.acc_width - 1)
    for c in range(geom.columns):
        chans = np.nonzero(geom.col_of_channel == c)[0]
        if not chans.size:
            continue
        part = conv_planes(
            in_plane[chans], w_plane[:, chans], lay.stride, lay.padding
        )
        report.bump(
            "acc_overflow_events",
            int(((part < -half) | (part >= half)).sum()),
        )


def combine_partials(
    partials: dict[tuple[int, int], np.ndarray],
    in_config: SliceConfig,
    w_config: SliceConfig,
    accumulate_mode: AccumulateMode,
) -> np.ndarray:
    """Reduce per-pass partial sums to output values.

    Exact mode weights each pass by B_in**i * B_w**j; chained mode folds
    the combined orders through the order-serial chain (equal slice widths
    required so every order step shifts by the same amount).
    """
    n_in, n_w = in_config.num_slices, w_config.num_slices
    if accumulate_mode is AccumulateMode.EXACT:
        out = None
        for (i, j), p in partials.items():
            term = p * (in_config.base**i) * (w_config.base**j)
            out = term if out is None else out + term
        return out
    if in_config.slice_width != w_config.slice_width:
        raise PEError("chained accumulation requires equal slice widths")
    top = n_in + n_w - 2
    by_order = []
    for k in range(top + 1):
        acc = None
        for i in range(n_in):
            j = k - i
            if 0 <= j < n_w:
                p = partials[(i, j)]
                acc = p.copy() if acc is None else acc + p
        by_order.append(acc)
    return accumulation_chain(by_order, in_config.magnitude_bits)


def _finalize_outputs(
    layer: LayerDescriptor,
    out: np.ndarray,
    report: CycleEnergyReport,
    cfg: PEConfig,
) -> QuantTensor:
    out = out.reshape(layer.out_channels, layer.out_height, layer.out_width)
    if layer.pool_window:
        pooled = pool_flat(out, layer.pool_window)
        report.bump(
            "pool_cycles",
            -(-out.size // (cfg.arrays_per_pe * cfg.units_per_column)),
        )
        report.bump("obuf_reads", out.size)
        report.bump("obuf_writes", pooled.size)
        return QuantTensor(values=pooled, precision=32)
    if layer.kind is LayerKind.FULLY_CONNECTED:
        out = out.reshape(layer.out_channels, layer.out_width)
    return QuantTensor(values=out, precision=32)


def _execute_pool(
    layer: LayerDescriptor, inputs: QuantTensor, cfg: PEConfig
) -> tuple[QuantTensor, CycleEnergyReport]:
    x = inputs.values
    if x.shape[0] != layer.in_channels:
        raise PEError(f"layer {layer.name}: channel mismatch")
    pooled = pool_flat(x.reshape(layer.in_channels, -1), layer.pool_window)
    report = CycleEnergyReport()
    report.bump("obuf_reads", x.size)
    report.bump("obuf_writes", pooled.size)
    cycles = -(-x.size // (cfg.arrays_per_pe * cfg.units_per_column))
    report.bump("pool_cycles", cycles)
    report.cycles_total = cycles
    return QuantTensor(values=pooled, precision=inputs.precision), report
