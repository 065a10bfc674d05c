"""Mesh interconnect model: workload placement and traffic accounting.

Nodes sit on a 2-D mesh and messages follow dimension-ordered (X then Y)
routes.  A multicast is charged once per tree edge, where the tree is the
union of the unicast routes to the destination cores; the reuse factor of
a traffic class compares that against routing a private copy to every PE
array slot.  Bandwidth between accumulation stages is modeled separately:
chaining passes partially-combined sums at accumulator width instead of
fully shifted ones, which narrows the inter-stage link.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .pe import LayerDescriptor, PEConfig


class NocError(ValueError):
    pass


class AllocationPattern(Enum):
    IN_OUT_MULTICAST = "in_out_multicast"
    INPUT_REUSE = "input_reuse"
    WEIGHT_BROADCAST_ACROSS_ORDERS = "weight_broadcast_across_orders"
    INPUT_SHARE_SPATIAL_WEIGHTS = "input_share_spatial_weights"


@dataclass(frozen=True)
class MeshConfig:
    mpu_cores: int = 4
    dmu_cores: int = 1
    pe_arrays_per_core: int = 3
    link_width_bits: int = 32
    mesh_cols: int | None = None

    def __post_init__(self) -> None:
        if self.mpu_cores < 1 or self.dmu_cores < 1:
            raise NocError("need at least one MPU and one DMU")
        if self.pe_arrays_per_core < 1:
            raise NocError("pe_arrays_per_core must be >= 1")
        if self.link_width_bits < 1:
            raise NocError("link_width_bits must be >= 1")
        if self.mesh_cols is not None and self.mesh_cols < 1:
            raise NocError("mesh_cols must be >= 1")

    @property
    def total_nodes(self) -> int:
        return self.mpu_cores + self.dmu_cores

    @property
    def cols(self) -> int:
        return self.mesh_cols or math.ceil(math.sqrt(self.total_nodes))

    @property
    def dmu_nodes(self) -> list[int]:
        return list(range(self.dmu_cores))

    @property
    def mpu_nodes(self) -> list[int]:
        return list(range(self.dmu_cores, self.total_nodes))

    def coords(self, node: int) -> tuple[int, int]:
        if not 0 <= node < self.total_nodes:
            raise NocError(f"node {node} outside the mesh")
        return divmod(node, self.cols)

    def slots(self) -> list[tuple[int, int]]:
        return [
            (core, a)
            for core in self.mpu_nodes
            for a in range(self.pe_arrays_per_core)
        ]


def xy_path(mesh: MeshConfig, src: int, dst: int) -> list[int]:
    """Node sequence from src to dst, inclusive: column steps, then row."""
    r0, c0 = mesh.coords(src)
    r1, c1 = mesh.coords(dst)
    path = [src]
    c_step = 1 if c1 > c0 else -1
    for c in range(c0 + c_step, c1 + c_step, c_step) if c1 != c0 else []:
        path.append(r0 * mesh.cols + c)
    r_step = 1 if r1 > r0 else -1
    for r in range(r0 + r_step, r1 + r_step, r_step) if r1 != r0 else []:
        path.append(r * mesh.cols + c1)
    return path


def hop_count(mesh: MeshConfig, src: int, dst: int) -> int:
    r0, c0 = mesh.coords(src)
    r1, c1 = mesh.coords(dst)
    return abs(r0 - r1) + abs(c0 - c1)


def multicast_edges(
    mesh: MeshConfig, src: int, dests: list[int]
) -> set[tuple[int, int]]:
    """Directed links of the multicast tree (XY route union, edges deduped)."""
    edges: set[tuple[int, int]] = set()
    for dst in dests:
        path = xy_path(mesh, src, dst)
        edges.update(zip(path, path[1:]))
    return edges


@dataclass
class DataObject:
    name: str
    data_class: str  # "input" | "weight" | "output" | "partial"
    nbytes: int
    source: int
    dest_slots: list[tuple[int, int]]
    intra_core: bool = False

    def __post_init__(self) -> None:
        if self.nbytes < 0:
            raise NocError("object size must be non-negative")
        if not self.dest_slots:
            raise NocError("object needs at least one destination slot")


@dataclass
class PEAssignment:
    core: int
    array: int
    oc_range: tuple[int, int] | None = None
    row_range: tuple[int, int] | None = None
    orders: tuple[int, ...] | None = None
    kernel_range: tuple[int, int] | None = None


@dataclass
class Assignment:
    pattern: AllocationPattern
    objects: list[DataObject]
    slots: list[PEAssignment]


def _split_range(total: int, parts: int) -> list[tuple[int, int]]:
    bounds = [round(i * total / parts) for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


def _split_bytes(total_bytes: int, sizes: list[int]) -> list[int]:
    """Byte shares proportional to sizes, summing to the total exactly."""
    whole = sum(sizes)
    if whole == 0:
        return [0] * len(sizes)
    cum = 0
    out = []
    prev = 0
    for s in sizes:
        cum += s
        mark = total_bytes * cum // whole
        out.append(mark - prev)
        prev = mark
    return out


def allocate_workload(
    layer: LayerDescriptor,
    mesh: MeshConfig,
    pattern: AllocationPattern,
    *,
    input_bytes: int,
    weight_bytes: int,
    output_bytes: int,
) -> Assignment:
    """Place one layer's tiles on the mesh under a reuse pattern.

    Every pattern covers each output exactly once; they differ in which
    operand is multicast and along which axis work is cut.
    """
    dmu = mesh.dmu_nodes[0]
    cores = mesh.mpu_nodes
    arrays = mesh.pe_arrays_per_core
    slots = mesh.slots()
    objects: list[DataObject] = []
    assigns: list[PEAssignment] = []
    oh = layer.out_height

    if pattern is AllocationPattern.INPUT_REUSE:
        objects.append(
            DataObject("input", "input", input_bytes, dmu, list(slots))
        )
        oc_chunks = _split_range(layer.out_channels, len(slots))
        w_shares = _split_bytes(weight_bytes, [hi - lo for lo, hi in oc_chunks])
        o_shares = _split_bytes(output_bytes, [hi - lo for lo, hi in oc_chunks])
        for idx, ((core, a), (lo, hi)) in enumerate(zip(slots, oc_chunks)):
            assigns.append(PEAssignment(core, a, oc_range=(lo, hi), row_range=(0, oh)))
            if hi > lo:
                objects.append(
                    DataObject(f"w_oc{lo}_{hi}", "weight", w_shares[idx], dmu, [(core, a)])
                )
                objects.append(
                    DataObject(f"o_oc{lo}_{hi}", "output", o_shares[idx], core, [(dmu, 0)])
                )

    elif pattern is AllocationPattern.WEIGHT_BROADCAST_ACROSS_ORDERS:
        objects.append(
            DataObject("weights", "weight", weight_bytes, dmu, list(slots))
        )
        n_in = layer.input_slices.num_slices
        row_chunks = _split_range(oh, len(cores))
        in_core = _split_bytes(input_bytes, [hi - lo for lo, hi in row_chunks])
        out_core = _split_bytes(output_bytes, [hi - lo for lo, hi in row_chunks])
        order_chunks = _split_range(n_in, arrays)
        for ci, core in enumerate(cores):
            rlo, rhi = row_chunks[ci]
            in_arr = _split_bytes(in_core[ci], [hi - lo for lo, hi in order_chunks])
            for a in range(arrays):
                olo, ohi = order_chunks[a]
                assigns.append(
                    PEAssignment(
                        core,
                        a,
                        oc_range=(0, layer.out_channels),
                        row_range=(rlo, rhi),
                        orders=tuple(range(olo, ohi)),
                    )
                )
                if rhi > rlo and ohi > olo:
                    objects.append(
                        DataObject(
                            f"in_r{rlo}_{rhi}_s{olo}_{ohi}",
                            "input",
                            in_arr[a],
                            dmu,
                            [(core, a)],
                        )
                    )
            if rhi > rlo:
                # low-to-high handoffs along the in-core accumulation chain
                objects.append(
                    DataObject(
                        f"chain_r{rlo}_{rhi}",
                        "partial",
                        out_core[ci] * (arrays - 1),
                        core,
                        [(core, a) for a in range(1, arrays)] or [(core, 0)],
                        intra_core=True,
                    )
                )
                objects.append(
                    DataObject(
                        f"o_r{rlo}_{rhi}", "output", out_core[ci], core, [(dmu, 0)]
                    )
                )

    elif pattern is AllocationPattern.INPUT_SHARE_SPATIAL_WEIGHTS:
        kh, kw = layer.kernel
        kern_chunks = _split_range(kh * kw, arrays)
        w_shares = _split_bytes(weight_bytes, [hi - lo for lo, hi in kern_chunks])
        row_chunks = _split_range(oh, len(cores))
        in_core = _split_bytes(input_bytes, [hi - lo for lo, hi in row_chunks])
        out_core = _split_bytes(output_bytes, [hi - lo for lo, hi in row_chunks])
        for a in range(arrays):
            klo, khi = kern_chunks[a]
            if khi > klo:
                objects.append(
                    DataObject(
                        f"w_k{klo}_{khi}",
                        "weight",
                        w_shares[a],
                        dmu,
                        [(core, a) for core in cores],
                    )
                )
        for ci, core in enumerate(cores):
            rlo, rhi = row_chunks[ci]
            for a in range(arrays):
                klo, khi = kern_chunks[a]
                assigns.append(
                    PEAssignment(
                        core,
                        a,
                        oc_range=(0, layer.out_channels),
                        row_range=(rlo, rhi),
                        kernel_range=(klo, khi),
                    )
                )
            if rhi > rlo:
                objects.append(
                    DataObject(
                        f"in_r{rlo}_{rhi}",
                        "input",
                        in_core[ci],
                        dmu,
                        [(core, a) for a in range(arrays)],
                    )
                )
                objects.append(
                    DataObject(
                        f"chain_r{rlo}_{rhi}",
                        "partial",
                        out_core[ci] * (arrays - 1),
                        core,
                        [(core, a) for a in range(1, arrays)] or [(core, 0)],
                        intra_core=True,
                    )
                )
                objects.append(
                    DataObject(
                        f"o_r{rlo}_{rhi}", "output", out_core[ci], core, [(dmu, 0)]
                    )
                )

    elif pattern is AllocationPattern.IN_OUT_MULTICAST:
        grid_r = _largest_divisor_at_most(len(cores), math.isqrt(len(cores)))
        grid_c = len(cores) // grid_r
        row_chunks = _split_range(oh, grid_r)
        oc_chunks = _split_range(layer.out_channels, grid_c)
        in_shares = _split_bytes(input_bytes, [hi - lo for lo, hi in row_chunks])
        w_shares = _split_bytes(weight_bytes, [hi - lo for lo, hi in oc_chunks])
        core_at = lambda r, c: cores[r * grid_c + c]  # noqa: E731
        for r in range(grid_r):
            rlo, rhi = row_chunks[r]
            if rhi > rlo:
                dests = [
                    (core_at(r, c), a) for c in range(grid_c) for a in range(arrays)
                ]
                objects.append(
                    DataObject(f"in_r{rlo}_{rhi}", "input", in_shares[r], dmu, dests)
                )
        for c in range(grid_c):
            clo, chi = oc_chunks[c]
            if chi > clo:
                dests = [
                    (core_at(r, c), a) for r in range(grid_r) for a in range(arrays)
                ]
                objects.append(
                    DataObject(f"w_oc{clo}_{chi}", "weight", w_shares[c], dmu, dests)
                )
        out_sizes = []
        out_cells = []
        for r in range(grid_r):
            for c in range(grid_c):
                rlo, rhi = row_chunks[r]
                clo, chi = oc_chunks[c]
                out_cells.append((r, c))
                out_sizes.append((rhi - rlo) * (chi - clo))
                sub = _split_range(chi - clo, arrays)
                for a in range(arrays):
                    alo, ahi = sub[a]
                    assigns.append(
                        PEAssignment(
                            core_at(r, c),
                            a,
                            oc_range=(clo + alo, clo + ahi),
                            row_range=(rlo, rhi),
                        )
                    )
        o_shares = _split_bytes(output_bytes, out_sizes)
        for (r, c), share in zip(out_cells, o_shares):
            if share > 0:
                objects.append(
                    DataObject(
                        f"o_r{r}c{c}", "output", share, core_at(r, c), [(dmu, 0)]
                    )
                )
    else:
        raise NocError(f"unknown pattern {pattern!r}")

    return Assignment(pattern=pattern, objects=objects, slots=assigns)


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for d in range(max(cap, 1), 0, -1):
        if n % d == 0:
            return d
    return 1


@dataclass
class TransferRow:
    data_class: str
    messages: int = 0
    payload_bytes: int = 0
    hop_bytes: int = 0
    naive_hop_bytes: int = 0
    link_traversals: int = 0

    @property
    def reuse_factor(self) -> float:
        if self.hop_bytes == 0:
            return 1.0
        return self.naive_hop_bytes / self.hop_bytes


@dataclass
class TransferLog:
    rows: dict[str, TransferRow] = field(default_factory=dict)

    def row(self, data_class: str) -> TransferRow:
        if data_class not in self.rows:
            self.rows[data_class] = TransferRow(data_class)
        return self.rows[data_class]

    @property
    def total_payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.rows.values())

    @property
    def total_hop_bytes(self) -> int:
        return sum(r.hop_bytes for r in self.rows.values())

    @property
    def total_traversals(self) -> int:
        return sum(r.link_traversals for r in self.rows.values())

    @property
    def bit_hops(self) -> int:
        return self.total_hop_bytes * 8

    @property
    def reuse_factor(self) -> float:
        hop = self.total_hop_bytes
        naive = sum(r.naive_hop_bytes for r in self.rows.values())
        return naive / hop if hop else 1.0


def simulate_bi_noc_transfers(assignment: Assignment, mesh: MeshConfig) -> TransferLog:
    """Charge every object once per multicast-tree edge, in link beats.

    The naive reference routes a private copy to every destination slot,
    so arrays sharing a core (or a route prefix) show up as reuse > 1.
    """
    log = TransferLog()
    for obj in assignment.objects:
        row = log.row(obj.data_class)
        row.messages += 1
        row.payload_bytes += obj.nbytes
        if obj.intra_core:
            continue
        dest_cores = sorted({core for core, _ in obj.dest_slots})
        edges = multicast_edges(mesh, obj.source, dest_cores)
        beats = -(-(obj.nbytes * 8) // mesh.link_width_bits)
        row.hop_bytes += obj.nbytes * len(edges)
        row.link_traversals += len(edges) * beats
        row.naive_hop_bytes += obj.nbytes * sum(
            hop_count(mesh, obj.source, core) for core, _ in obj.dest_slots
        )
    return log


@dataclass(frozen=True)
class UniNocWidths:
    chained_bits: int
    naive_bits: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.chained_bits / self.naive_bits


def uni_noc_link_width(cfg: PEConfig, n_orders: int) -> UniNocWidths:
    """Inter-stage link width with and without chained accumulation.

    A chained hop carries one accumulator word.  Without chaining every
    stage's sum must be pre-shifted to its final weight, so the last hop
    grows by the slice offset times the number of deferred stages.
    """
    if n_orders < 1:
        raise NocError("n_orders must be >= 1")
    m = cfg.slice_width - 1
    return UniNocWidths(
        chained_bits=cfg.acc_width,
        naive_bits=cfg.acc_width + m * (n_orders - 1),
    )
