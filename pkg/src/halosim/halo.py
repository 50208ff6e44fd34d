"""Halo swapping over a 2-D rank grid with four communication backends.

The public surface is four procedures: a context is initialized once,
swaps are split into a nonblocking initiation and a blocking completion,
and a finalisation tears the context down.  Backends:

* ``p2p``      — nonblocking sends/receives into per-neighbor buffers.
* ``fence``    — one put per neighbor inside fence epochs.
* ``pscw``     — the same puts inside post-start-complete-wait epochs.
* ``passive``  — lock_all once, flush per swap, empty-message notifications.

All RMA backends drive data by remote writes.  Each rank allocates one
contiguous RMA buffer; the per-neighbor offsets into it are exchanged with
nonblocking two-sided messages during initialization, so every rank knows
both where each neighbor writes into its own buffer and where it must
write into each neighbor's buffer.  Completion hands the unpacker
zero-copy views into that single buffer.

Epoch placement is shifted by default: the first epoch opens during
initialization and completion reopens the next one after unpacking, so
initiation never blocks on epoch creation.  ``naive`` placement (epoch
opened inside initiation) is kept for comparison runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from math import isqrt
from typing import Callable, Optional, Sequence

import numpy as np

from .netsim import Rank, RequestHandle
from .onesided import Assertions, MemoryModel, Rma, RmaConfig, Window

# canonical neighbor order; index = direction
DIRECTIONS: tuple[tuple[int, int], ...] = (
    (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))
DIR_NAMES = ("x-", "x+", "y-", "y+", "x-y-", "x-y+", "x+y-", "x+y+")
OPPOSITE = (1, 0, 3, 2, 7, 6, 5, 4)
DIR_KINDS = ("face_x", "face_x", "face_y", "face_y", "corner", "corner", "corner", "corner")


class Backend(str, Enum):
    P2P = "p2p"
    FENCE = "fence"
    PSCW = "pscw"
    PASSIVE = "passive"


class HaloError(RuntimeError):
    pass


class HaloConfigError(HaloError):
    pass


class HaloStateError(HaloError):
    pass


@dataclass(frozen=True)
class DecompositionPlan:
    nx: int
    ny: int
    nz: int
    px: int
    py: int
    periodic: bool
    depth: int
    element_size: int

    @property
    def n_ranks(self) -> int:
        return self.px * self.py

    def coords(self, rank: int) -> tuple[int, int]:
        return rank % self.px, rank // self.px

    def rank_at(self, cx: int, cy: int) -> int:
        return cy * self.px + cx

    def local_dims(self, rank: int) -> tuple[int, int, int]:
        cx, cy = self.coords(rank)
        lx = self.nx // self.px + (1 if cx < self.nx % self.px else 0)
        ly = self.ny // self.py + (1 if cy < self.ny % self.py else 0)
        return lx, ly, self.nz

    def local_origin(self, rank: int) -> tuple[int, int]:
        cx, cy = self.coords(rank)
        bx, rx = divmod(self.nx, self.px)
        by, ry = divmod(self.ny, self.py)
        ox = cx * bx + min(cx, rx)
        oy = cy * by + min(cy, ry)
        return ox, oy


def plan_decomposition(global_dims: tuple[int, int, int], n_ranks: int,
                       periodic: bool = True, depth: int = 2,
                       element_size: int = 8) -> DecompositionPlan:
    """Split (nx, ny) over the closest-to-square px*py = n_ranks rank grid.

    The z dimension is never decomposed.  Remainder columns and rows go to
    the low-index ranks.
    """
    nx, ny, nz = global_dims
    if n_ranks < 1:
        raise HaloConfigError("need at least one rank")
    px = 1
    for cand in range(isqrt(n_ranks), 0, -1):
        if n_ranks % cand == 0:
            px = cand
            break
    py = n_ranks // px
    plan = DecompositionPlan(nx, ny, nz, px, py, periodic, depth, element_size)
    if nx // px < depth or ny // py < depth or nz < depth:
        raise HaloConfigError(
            f"local dims ({nx // px}, {ny // py}, {nz}) must all be >= depth {depth}")
    return plan


@dataclass(frozen=True)
class Neighbor:
    rank: int
    kind: str


def neighbor_table(plan: DecompositionPlan, rank: int) -> list[Optional[Neighbor]]:
    """Canonical-order table [x-, x+, y-, y+, x-y-, x-y+, x+y-, x+y+].

    Periodic worlds always fill all eight entries (possibly with duplicate
    or self ranks); non-periodic boundary ranks get None at the boundary.
    """
    if rank >= plan.n_ranks:
        raise HaloConfigError(f"rank {rank} outside the {plan.px}x{plan.py} grid")
    cx, cy = plan.coords(rank)
    table: list[Optional[Neighbor]] = []
    for d, (dx, dy) in enumerate(DIRECTIONS):
        tx, ty = cx + dx, cy + dy
        if plan.periodic:
            tx %= plan.px
            ty %= plan.py
        elif not (0 <= tx < plan.px and 0 <= ty < plan.py):
            table.append(None)
            continue
        table.append(Neighbor(plan.rank_at(tx, ty), DIR_KINDS[d]))
    return table


@dataclass(frozen=True)
class FieldDescriptor:
    name: str
    lx: int
    ly: int
    lz: int
    element_size: int = 8


def region_bytes(desc: FieldDescriptor, plan: DecompositionPlan, direction: int,
                 accounting: str = "geometric") -> int:
    """Bytes one field contributes to the region for one direction."""
    d = plan.depth
    kind = DIR_KINDS[direction]
    if kind == "face_x":
        cells = d * desc.ly * desc.lz
    elif kind == "face_y":
        cells = d * desc.lx * desc.lz
    elif accounting == "geometric":
        cells = d * d * desc.lz
    elif accounting == "paper":
        cells = d * desc.lz
    else:
        raise HaloConfigError(f"unknown accounting mode {accounting!r}")
    return cells * desc.element_size


def halo_region_sizes(fields: Sequence[FieldDescriptor], plan: DecompositionPlan,
                      rank: int, accounting: str = "geometric") -> list[Optional[int]]:
    """Per-direction byte counts summed over fields; None where no neighbor."""
    table = neighbor_table(plan, rank)
    return [sum(region_bytes(f, plan, d, accounting) for f in fields)
            if table[d] is not None else None
            for d in range(8)]


@dataclass
class ReceiveView:
    """Zero-copy slice of the RMA buffer holding one neighbor's field data."""

    offset: int
    length: int
    direction: int
    field_index: int
    array: np.ndarray
    valid: bool = True

    def require_valid(self) -> None:
        if not self.valid:
            raise HaloStateError("receive view used outside its validity span")


@dataclass
class HaloOptions:
    epoch_placement: str = "shifted"      # or "naive"
    use_assertions: bool = False          # pass fence assertion hints
    get_driven: bool = False              # validator mode: drive by remote reads
    copy_out_unpack: bool = False         # rejected design kept for the audit
    suppress_win_sync: bool = False       # validator mode: skip the target sync
    passive_variant: str = "adopted"      # or "simple"
    debug_validate_offsets: bool = False


PackFn = Callable[[int, int, np.ndarray], None]
UnpackFn = Callable[[int, int, ReceiveView], None]


class HaloSwapContext:
    """State of one halo-swapping context on one rank."""

    def __init__(self) -> None:
        self.rank: Rank = None  # type: ignore[assignment]
        self.rma: Optional[Rma] = None
        self.plan: DecompositionPlan = None  # type: ignore[assignment]
        self.fields: list[FieldDescriptor] = []
        self.backend: Backend = Backend.P2P
        self.options = HaloOptions()
        self.neighbors: list[Optional[Neighbor]] = []
        self.present: list[int] = []
        self.window: Optional[Window] = None
        self.rma_nbytes = 0
        self.incoming_offsets: dict[int, int] = {}
        self.remote_offsets: dict[int, int] = {}
        self.slot_sizes: dict[int, int] = {}
        self.field_sub: dict[int, list[int]] = {}
        self.staging: dict[int, np.ndarray] = {}
        self.get_staging: dict[int, np.ndarray] = {}
        self.views: dict[int, list[ReceiveView]] = {}
        self.pscw_group: tuple[int, ...] = ()
        self.barrier_groups: list[tuple[int, ...]] = []
        self.tag_base = 0
        self.generation = 0
        self.epoch_open = False
        self.epochs_opened = 0
        self.epochs_closed = 0
        self.in_flight = False
        self.finalised = False
        self.swap_allocs = 0
        self.notify_recvs: dict[int, RequestHandle] = {}
        self.p2p_recvs: dict[int, RequestHandle] = {}

    # -- guards ------------------------------------------------------------

    def _check_live(self) -> None:
        if self.finalised:
            raise HaloStateError("halo context used after finalise")

    @property
    def group(self) -> tuple[int, ...]:
        ranks = {self.rank.rank}
        ranks.update(self.neighbors[d].rank for d in self.present)
        return tuple(sorted(ranks))

    def neighbor_rank(self, direction: int) -> int:
        nb = self.neighbors[direction]
        if nb is None:
            raise HaloConfigError(f"no neighbor in direction {DIR_NAMES[direction]}")
        return nb.rank


def _fence_asserts(ctx: HaloSwapContext, which: str) -> Assertions:
    if not ctx.options.use_assertions:
        return Assertions()
    if which == "open":
        return Assertions(noprecede=True)
    return Assertions(nosucceed=True)


def _open_epoch(ctx: HaloSwapContext) -> None:
    rma, win = ctx.rma, ctx.window
    if ctx.backend is Backend.FENCE:
        rma.fence(win, _fence_asserts(ctx, "open"))
    elif ctx.backend is Backend.PSCW:
        rma.post(win, ctx.pscw_group)
        rma.start(win, ctx.pscw_group)
    ctx.epoch_open = True
    ctx.epochs_opened += 1


def init_halo_communication(rank: Rank, fields: Sequence[FieldDescriptor],
                            plan: DecompositionPlan, backend: Backend | str,
                            options: Optional[HaloOptions] = None,
                            rma_config: Optional[RmaConfig] = None) -> HaloSwapContext:
    """Collective context setup: buffer, offsets, window, first epoch."""
    backend = Backend(backend)
    ctx = HaloSwapContext()
    ctx.rank = rank
    ctx.plan = plan
    ctx.fields = list(fields)
    ctx.backend = backend
    ctx.options = options or HaloOptions()
    if not ctx.fields:
        raise HaloConfigError("need at least one field")
    lx, ly, lz = plan.local_dims(rank.rank)
    for f in ctx.fields:
        if (f.lx, f.ly, f.lz) != (lx, ly, lz):
            raise HaloConfigError(
                f"field {f.name!r} dims {(f.lx, f.ly, f.lz)} do not match "
                f"rank {rank.rank} local dims {(lx, ly, lz)}")

    ctx.neighbors = neighbor_table(plan, rank.rank)
    ctx.present = [d for d in range(8) if ctx.neighbors[d] is not None]

    tags = rank.world.shared.setdefault("halo_tag_bases", {})
    count = tags.get(rank.rank, 0)
    tags[rank.rank] = count + 1
    ctx.tag_base = 1000 + 32 * count

    # single buffer layout: direction slots in canonical order, fields
    # back to back inside each slot
    offset = 0
    for d in ctx.present:
        ctx.field_sub[d] = [offset + s for s in _prefix([region_bytes(f, plan, d) for f in ctx.fields])]
        size = sum(region_bytes(f, plan, d) for f in ctx.fields)
        ctx.incoming_offsets[d] = offset
        ctx.slot_sizes[d] = size
        offset += size
    ctx.rma_nbytes = offset

    use_rma = backend is not Backend.P2P
    if use_rma:
        ctx.rma = Rma(rank, rma_config)
        region = ctx.rma.alloc_region(ctx.rma_nbytes)
        ctx.window = ctx.rma.win_create(region, ctx.group)

    # exchange, per neighbor, the offset at which it must interact with this
    # rank's buffer (plus the slot size so inconsistent field sets fail fast)
    sends = []
    recvs: dict[int, RequestHandle] = {}
    for d in ctx.present:
        peer = ctx.neighbor_rank(d)
        payload = struct.pack("<qq", ctx.incoming_offsets[d], ctx.slot_sizes[d])
        sends.append(rank.isend(peer, ctx.tag_base + d, payload))
        recvs[d] = rank.irecv(peer, ctx.tag_base + OPPOSITE[d])
    for d in ctx.present:
        st = rank.wait(recvs[d])
        remote_off, remote_size = struct.unpack("<qq", st.payload)
        if remote_size != ctx.slot_sizes[d]:
            raise HaloConfigError(
                f"direction {DIR_NAMES[d]}: neighbor region is {remote_size} bytes, "
                f"local packing produces {ctx.slot_sizes[d]} (inconsistent fields?)")
        ctx.remote_offsets[d] = remote_off
    if ctx.options.debug_validate_offsets:
        _cross_validate_offsets(ctx)

    for d in ctx.present:
        nfloats = ctx.slot_sizes[d] // 8
        ctx.staging[d] = np.empty(nfloats, dtype=np.float64)
        if ctx.options.get_driven:
            ctx.get_staging[d] = np.empty(nfloats, dtype=np.float64)

    if use_rma:
        buf = ctx.rma.private_array(ctx.window)
        for d in ctx.present:
            views = []
            for fi, f in enumerate(ctx.fields):
                off = ctx.field_sub[d][fi]
                length = region_bytes(f, plan, d)
                arr = buf[off:off + length].view(np.float64)
                views.append(ReceiveView(off, length, d, fi, arr))
            ctx.views[d] = views

    if backend is Backend.PSCW:
        ctx.pscw_group = tuple(sorted({ctx.neighbor_rank(d) for d in ctx.present}))
    if backend is Backend.PASSIVE and ctx.options.passive_variant == "simple":
        groups = {ctx.group}
        for d in ctx.present:
            peer = ctx.neighbor_rank(d)
            peer_table = neighbor_table(plan, peer)
            members = {peer}
            members.update(nb.rank for nb in peer_table if nb is not None)
            groups.add(tuple(sorted(members)))
        ctx.barrier_groups = sorted(groups)
    if backend is Backend.PASSIVE and ctx.options.passive_variant == "adopted":
        ctx.rma.lock_all(ctx.window, Assertions(nocheck=True))
        ctx.epoch_open = True
        ctx.epochs_opened += 1
        for d in ctx.present:
            ctx.notify_recvs[d] = rank.irecv(ctx.neighbor_rank(d),
                                             ctx.tag_base + 16 + OPPOSITE[d])
    elif use_rma and backend is not Backend.PASSIVE:
        if ctx.options.epoch_placement == "shifted":
            _open_epoch(ctx)
    return ctx


def _prefix(sizes: list[int]) -> list[int]:
    out, acc = [], 0
    for s in sizes:
        out.append(acc)
        acc += s
    return out


def _cross_validate_offsets(ctx: HaloSwapContext) -> None:
    rank = ctx.rank
    recvs = {}
    for d in ctx.present:
        peer = ctx.neighbor_rank(d)
        rank.isend(peer, ctx.tag_base + 24 + d, struct.pack("<q", ctx.remote_offsets[d]))
        recvs[d] = rank.irecv(peer, ctx.tag_base + 24 + OPPOSITE[d])
    for d in ctx.present:
        (echo,) = struct.unpack("<q", rank.wait(recvs[d]).payload)
        if echo != ctx.incoming_offsets[d]:
            raise HaloConfigError(
                f"offset duality broken for {DIR_NAMES[d]}: neighbor believes "
                f"{echo}, local table says {ctx.incoming_offsets[d]}")


def initiate_nonblocking_halo_swap(ctx: HaloSwapContext, packer: PackFn) -> None:
    """Pack edge data and launch all transfers; never blocks for neighbors
    under shifted epoch placement."""
    ctx._check_live()
    if ctx.in_flight:
        raise HaloStateError("swap initiated twice without completion")
    rank = ctx.rank
    ctx.swap_allocs = 0
    ctx.generation += 1
    for views in ctx.views.values():
        for v in views:
            v.valid = False

    if ctx.backend is Backend.P2P:
        for d in ctx.present:
            ctx.p2p_recvs[d] = rank.irecv(ctx.neighbor_rank(d),
                                          ctx.tag_base + 8 + OPPOSITE[d])
        _pack_all(ctx, packer)
        for d in ctx.present:
            rank.isend(ctx.neighbor_rank(d), ctx.tag_base + 8 + d, ctx.staging[d].tobytes())
        ctx.in_flight = True
        return

    if ctx.backend is Backend.PASSIVE and ctx.options.passive_variant == "simple":
        ctx.rma.lock_all(ctx.window)  # epoch per swap; conflict bookkeeping on
        ctx.epoch_open = True
        ctx.epochs_opened += 1

    _pack_all(ctx, packer)
    if ctx.options.get_driven:
        # validator mode: expose the packed edges in this rank's own buffer,
        # then remotely read each neighbor's region
        for d in ctx.present:
            ctx.rma.local_write(ctx.window, ctx.incoming_offsets[d], ctx.staging[d])
    if ctx.options.epoch_placement == "naive" and ctx.backend is not Backend.PASSIVE:
        _open_epoch(ctx)  # after packing: the opening sync publishes the edges
    if not ctx.epoch_open:
        raise HaloStateError("no epoch open at swap initiation")
    if ctx.options.get_driven:
        for d in ctx.present:
            ctx.rma.get(ctx.window, ctx.neighbor_rank(d), ctx.remote_offsets[d],
                        ctx.slot_sizes[d], ctx.get_staging[d])
    else:
        for d in ctx.present:
            ctx.rma.put(ctx.window, ctx.neighbor_rank(d), ctx.remote_offsets[d],
                        ctx.staging[d])
    ctx.in_flight = True


def _pack_all(ctx: HaloSwapContext, packer: PackFn) -> None:
    for d in ctx.present:
        slot = ctx.staging[d]
        for fi, f in enumerate(ctx.fields):
            lo = (ctx.field_sub[d][fi] - ctx.incoming_offsets[d]) // 8
            hi = lo + region_bytes(f, ctx.plan, d) // 8
            packer(d, fi, slot[lo:hi])


def complete_nonblocking_halo_swap(ctx: HaloSwapContext, unpacker: UnpackFn) -> None:
    """Block until all transfers landed, unpack, and reopen the next epoch."""
    ctx._check_live()
    if not ctx.in_flight:
        raise HaloStateError("completion without an initiated swap")
    rank = ctx.rank
    backend = ctx.backend

    if backend is Backend.P2P:
        for d in ctx.present:
            payload = rank.wait(ctx.p2p_recvs.pop(d)).payload
            data = np.frombuffer(payload, dtype=np.float64)
            _unpack_slot(ctx, d, data, unpacker)
        ctx.in_flight = False
        return

    if backend is Backend.FENCE:
        ctx.rma.fence(ctx.window, _fence_asserts(ctx, "close"))
        ctx.epoch_open = False
        ctx.epochs_closed += 1
        _unpack_rma(ctx, ctx.present, unpacker)
        if ctx.options.epoch_placement == "shifted":
            _open_epoch(ctx)
    elif backend is Backend.PSCW:
        ctx.rma.complete(ctx.window)
        ctx.rma.wait_exposure(ctx.window)
        ctx.epoch_open = False
        ctx.epochs_closed += 1
        _unpack_rma(ctx, ctx.present, unpacker)
        if ctx.options.epoch_placement == "shifted":
            _open_epoch(ctx)
    elif ctx.options.passive_variant == "simple":
        ctx.rma.unlock_all(ctx.window)  # implies the flush
        ctx.epoch_open = False
        ctx.epochs_closed += 1
        # a rank belongs to every neighborhood that contains it; enter each
        # group's nonblocking barrier, then block only on the own group's
        own = None
        for group in ctx.barrier_groups:
            handle = rank.ibarrier(group)
            if group == ctx.group:
                own = handle
        rank.finish_barrier(own)
        _target_sync(ctx)
        _unpack_rma(ctx, ctx.present, unpacker)
    else:  # adopted passive target
        ctx.rma.flush_all(ctx.window)
        for d in ctx.present:
            rank.isend(ctx.neighbor_rank(d), ctx.tag_base + 16 + d, b"")
        pending = {d: ctx.notify_recvs[d] for d in ctx.present}
        order = list(pending)
        handles = [pending[d] for d in order]
        done = 0
        while done < len(order):
            idx = rank.test_any(handles)
            if idx is None:
                idx = rank.wait_any(handles)
            d = order[idx]
            done += 1
            _target_sync(ctx)
            _unpack_rma(ctx, [d], unpacker)
            ctx.notify_recvs[d] = rank.irecv(ctx.neighbor_rank(d),
                                             ctx.tag_base + 16 + OPPOSITE[d])
    ctx.in_flight = False


def _target_sync(ctx: HaloSwapContext) -> None:
    if ctx.options.suppress_win_sync:
        return
    if ctx.rma.memory_model(ctx.window) is MemoryModel.SEPARATE:
        ctx.rma.win_sync(ctx.window)


def _unpack_rma(ctx: HaloSwapContext, directions: Sequence[int],
                unpacker: UnpackFn) -> None:
    if ctx.options.get_driven:
        for d in directions:
            _unpack_slot(ctx, d, ctx.get_staging[d], unpacker)
        return
    for d in directions:
        ctx.rma.note_private_read(ctx.window, ctx.incoming_offsets[d], ctx.slot_sizes[d])
        if ctx.options.copy_out_unpack:
            copied = np.empty(ctx.slot_sizes[d] // 8, dtype=np.float64)
            ctx.swap_allocs += 1
            base = ctx.incoming_offsets[d]
            for v in ctx.views[d]:
                lo = (v.offset - base) // 8
                copied[lo:lo + v.length // 8] = v.array
            _unpack_slot(ctx, d, copied, unpacker)
            continue
        for v in ctx.views[d]:
            v.valid = True
            unpacker(d, v.field_index, v)


def _unpack_slot(ctx: HaloSwapContext, d: int, slot: np.ndarray,
                 unpacker: UnpackFn) -> None:
    base = ctx.incoming_offsets[d]
    for fi, f in enumerate(ctx.fields):
        lo = (ctx.field_sub[d][fi] - base) // 8
        hi = lo + region_bytes(f, ctx.plan, d) // 8
        view = ReceiveView(ctx.field_sub[d][fi], region_bytes(f, ctx.plan, d),
                           d, fi, slot[lo:hi])
        unpacker(d, fi, view)


def finalise_halo_communication(ctx: HaloSwapContext) -> None:
    """Close the trailing epoch and retire the context."""
    ctx._check_live()
    if ctx.in_flight:
        raise HaloStateError("finalise with a swap in flight")
    if ctx.backend is Backend.FENCE and ctx.epoch_open:
        ctx.rma.fence(ctx.window, _fence_asserts(ctx, "open"))
        ctx.epochs_closed += 1
    elif ctx.backend is Backend.PSCW and ctx.epoch_open:
        ctx.rma.complete(ctx.window)
        ctx.rma.wait_exposure(ctx.window)
        ctx.epochs_closed += 1
    elif ctx.backend is Backend.PASSIVE and ctx.options.passive_variant == "adopted":
        ctx.rma.unlock_all(ctx.window)
        ctx.epochs_closed += 1
    ctx.epoch_open = False
    ctx.finalised = True
    ctx.staging.clear()
    ctx.get_staging.clear()


def subbuffer_views(ctx: HaloSwapContext, direction: int) -> list[ReceiveView]:
    """Per-field zero-copy views of one neighbor's region in the RMA buffer."""
    ctx._check_live()
    if direction not in ctx.views:
        raise HaloConfigError(f"no RMA region for direction {DIR_NAMES[direction]}")
    return ctx.views[direction]


def debug_dump(ctx: HaloSwapContext) -> str:
    lines = [
        f"halo context rank={ctx.rank.rank} backend={ctx.backend.value} "
        f"generation={ctx.generation}",
        f"  buffer: {ctx.rma_nbytes} bytes, fields={len(ctx.fields)}",
    ]
    for d in range(8):
        nb = ctx.neighbors[d]
        if nb is None:
            lines.append(f"  {DIR_NAMES[d]:>4}: (boundary)")
            continue
        lines.append(
            f"  {DIR_NAMES[d]:>4}: rank {nb.rank} {nb.kind} size={ctx.slot_sizes[d]} "
            f"in_off={ctx.incoming_offsets[d]} out_off={ctx.remote_offsets[d]}")
    return "\n".join(lines)
