"""Coordinate-encoded 3-D fields and an exact halo-correctness oracle.

Every interior cell holds ``field_index*2^39 + gx*2^26 + gy*2^13 + gz``,
an integer that is exactly representable as a 64-bit float and injective
over the supported grid sizes, so halo verification is bitwise equality,
never tolerance.  Halo cells start as a distinguished quiet-NaN sentinel;
after a correct swap each one must equal the encoding of its (periodically
wrapped) global coordinate.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .halo import (
    DIRECTIONS,
    Backend,
    DecompositionPlan,
    FieldDescriptor,
    HaloOptions,
    ReceiveView,
    complete_nonblocking_halo_swap,
    finalise_halo_communication,
    init_halo_communication,
    initiate_nonblocking_halo_swap,
    neighbor_table,
)
from .netsim import Rank
from .onesided import RmaConfig

ENC_X = 2 ** 26
ENC_Y = 2 ** 13
ENC_FIELD = 2 ** 39

SENTINEL = np.frombuffer(np.uint64(0x7FF8_DEAD_BEEF_0001).tobytes(), dtype=np.float64)[0]


class HaloVerificationError(RuntimeError):
    def __init__(self, rank: int, step: int, mismatches: list):
        self.rank = rank
        self.step = step
        self.mismatches = mismatches
        head = "; ".join(f"{idx}: expected {exp!r}, found {got!r}"
                         for idx, exp, got in mismatches[:4])
        super().__init__(
            f"halo verification failed on rank {rank} at step {step}: "
            f"{len(mismatches)} mismatching cells ({head}{', ...' if len(mismatches) > 4 else ''})")


def encode(gx, gy, gz, field_index: int):
    return float(field_index) * ENC_FIELD + gx * float(ENC_X) + gy * float(ENC_Y) + gz


class Field:
    """One rank's slab of a prognostic field, with depth-wide halos."""

    def __init__(self, plan: DecompositionPlan, rank: int, field_index: int):
        self.plan = plan
        self.rank = rank
        self.field_index = field_index
        self.lx, self.ly, self.lz = plan.local_dims(rank)
        self.ox, self.oy = plan.local_origin(rank)
        d = plan.depth
        self.data = np.full((self.lx + 2 * d, self.ly + 2 * d, self.lz),
                            SENTINEL, dtype=np.float64)

    @property
    def descriptor(self) -> FieldDescriptor:
        return FieldDescriptor(f"f{self.field_index}", self.lx, self.ly, self.lz,
                               self.plan.element_size)

    def interior(self) -> np.ndarray:
        d = self.plan.depth
        return self.data[d:d + self.lx, d:d + self.ly, :]


def make_field(plan: DecompositionPlan, rank: int, field_index: int) -> Field:
    f = Field(plan, rank, field_index)
    top = encode(plan.nx - 1, plan.ny - 1, plan.nz - 1, field_index)
    if top >= 2 ** 53:
        raise ValueError("grid too large for exact float64 coordinate encoding")
    gx = (f.ox + np.arange(f.lx, dtype=np.float64))[:, None, None]
    gy = (f.oy + np.arange(f.ly, dtype=np.float64))[None, :, None]
    gz = np.arange(f.lz, dtype=np.float64)[None, None, :]
    f.interior()[:] = field_index * float(ENC_FIELD) + gx * ENC_X + gy * ENC_Y + gz
    return f


def _pack_slice(field: Field, direction: int) -> tuple[slice, slice]:
    """Interior cells adjacent to the given face or corner."""
    d = field.plan.depth
    dx, dy = DIRECTIONS[direction]
    if dx < 0:
        sx = slice(d, 2 * d)
    elif dx > 0:
        sx = slice(field.lx, d + field.lx)
    else:
        sx = slice(d, d + field.lx)
    if dy < 0:
        sy = slice(d, 2 * d)
    elif dy > 0:
        sy = slice(field.ly, d + field.ly)
    else:
        sy = slice(d, d + field.ly)
    return sx, sy


def _halo_slice(field: Field, direction: int) -> tuple[slice, slice]:
    """Ghost cells on the given side."""
    d = field.plan.depth
    dx, dy = DIRECTIONS[direction]
    if dx < 0:
        sx = slice(0, d)
    elif dx > 0:
        sx = slice(d + field.lx, 2 * d + field.lx)
    else:
        sx = slice(d, d + field.lx)
    if dy < 0:
        sy = slice(0, d)
    elif dy > 0:
        sy = slice(d + field.ly, 2 * d + field.ly)
    else:
        sy = slice(d, d + field.ly)
    return sx, sy


def pack_halo(field: Field, direction: int, out: np.ndarray) -> None:
    """Copy the edge cells for one direction, in (layer, row, z) order."""
    sx, sy = _pack_slice(field, direction)
    src = field.data[sx, sy, :]
    if out.size != src.size:
        raise ValueError(f"staging size {out.size} != region size {src.size}")
    out[:] = src.reshape(-1)


def unpack_halo(field: Field, direction: int, view: ReceiveView) -> None:
    """Inverse of pack_halo: fill the halo cells from a received view."""
    sx, sy = _halo_slice(field, direction)
    dst = field.data[sx, sy, :]
    if view.array.size != dst.size:
        raise ValueError(f"view size {view.array.size} != halo size {dst.size}")
    dst[:] = view.array.reshape(dst.shape)


def verify_halos(field: Field, plan: DecompositionPlan) -> list[tuple]:
    """Every halo cell must equal its wrapped-coordinate encoding, bitwise;
    boundary halos of non-periodic worlds must still hold the sentinel."""
    mismatches: list[tuple] = []
    d = plan.depth
    table = neighbor_table(plan, field.rank)
    bits = field.data.view(np.uint64)
    sentinel_bits = np.float64(SENTINEL).view(np.uint64) if hasattr(np.float64(SENTINEL), "view") else None
    sent = np.array([SENTINEL]).view(np.uint64)[0]
    for direction in range(8):
        sx, sy = _halo_slice(field, direction)
        got = field.data[sx, sy, :]
        gotbits = bits[sx, sy, :]
        if table[direction] is None:
            bad = np.argwhere(gotbits != sent)
            for idx in bad:
                i, j, k = (int(v) for v in idx)
                mismatches.append(((sx.start + i, sy.start + j, k), SENTINEL,
                                   got[i, j, k]))
            continue
        xi = np.arange(sx.start, sx.stop, dtype=np.int64)
        yj = np.arange(sy.start, sy.stop, dtype=np.int64)
        gx = (field.ox + xi - d) % plan.nx
        gy = (field.oy + yj - d) % plan.ny
        gz = np.arange(field.lz, dtype=np.int64)
        expected = (field.field_index * float(ENC_FIELD)
                    + gx[:, None, None] * float(ENC_X)
                    + gy[None, :, None] * float(ENC_Y)
                    + gz[None, None, :].astype(np.float64))
        expbits = expected.view(np.uint64)
        bad = np.argwhere(expbits != gotbits)
        for idx in bad:
            i, j, k = (int(v) for v in idx)
            mismatches.append(((sx.start + i, sy.start + j, k),
                               expected[i, j, k], got[i, j, k]))
    return mismatches


DelayFn = Callable[[int, int], int]


def run_timesteps(rank: Rank, plan: DecompositionPlan, backend: Backend | str,
                  n_fields: int, timesteps: int, rounds_per_step: int = 1,
                  compute_delay: Optional[DelayFn] = None,
                  options: Optional[HaloOptions] = None,
                  rma_config: Optional[RmaConfig] = None,
                  verify: bool = True) -> dict:
    """Per-rank driver: swap all fields each step and verify the halos.

    Returns per-step simulated communication time and the blocking-time
    split between initiation and completion, plus bookkeeping counters.
    """
    fields = [make_field(plan, rank.rank, i) for i in range(n_fields)]
    ctx = init_halo_communication(rank, [f.descriptor for f in fields], plan,
                                  backend, options, rma_config)

    def packer(direction: int, fi: int, out: np.ndarray) -> None:
        pack_halo(fields[fi], direction, out)

    def unpacker(direction: int, fi: int, view: ReceiveView) -> None:
        unpack_halo(fields[fi], direction, view)

    stats = {
        "comm_ns": [], "init_block_ns": [], "complete_block_ns": [],
        "allocs_per_swap": 0, "epochs_opened": 0, "epochs_closed": 0,
        "sync_after_init": rank.world.sync_msgs,
        "bytes_after_init": rank.world.data_bytes,
    }
    for step in range(timesteps):
        if compute_delay is not None:
            rank.advance(compute_delay(rank.rank, step))
        comm = init_block = complete_block = 0
        for _ in range(rounds_per_step):
            t0 = rank.now
            initiate_nonblocking_halo_swap(ctx, packer)
            t1 = rank.now
            complete_nonblocking_halo_swap(ctx, unpacker)
            t2 = rank.now
            comm += t2 - t0
            init_block += t1 - t0
            complete_block += t2 - t1
            stats["allocs_per_swap"] = ctx.swap_allocs
        stats["comm_ns"].append(comm)
        stats["init_block_ns"].append(init_block)
        stats["complete_block_ns"].append(complete_block)
        if verify:
            for f in fields:
                mismatches = verify_halos(f, plan)
                if mismatches:
                    raise HaloVerificationError(rank.rank, step, mismatches)
    stats["epochs_opened"] = ctx.epochs_opened
    stats["epochs_closed"] = ctx.epochs_closed
    finalise_halo_communication(ctx)
    stats["epochs_closed"] = ctx.epochs_closed
    stats["field_hash"] = field_digest(fields)
    return stats


def field_digest(fields: list[Field]) -> str:
    import hashlib

    h = hashlib.sha256()
    for f in fields:
        h.update(f.data.tobytes())
    return h.hexdigest()
