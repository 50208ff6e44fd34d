"""Field encoding, pack/unpack index maps, and the exact halo oracle."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import run_world
from halosim.grid import (
    ENC_FIELD,
    ENC_X,
    ENC_Y,
    SENTINEL,
    HaloVerificationError,
    encode,
    field_digest,
    make_field,
    pack_halo,
    run_timesteps,
    unpack_halo,
    verify_halos,
)
from halosim.halo import Backend, ReceiveView, plan_decomposition
from halosim.onesided import MemoryModel, RmaConfig

SEP = RmaConfig(memory_model=MemoryModel.SEPARATE)


def bits(a):
    return np.asarray(a, dtype=np.float64).view(np.uint64)


def test_make_field_interior_encoded_halos_sentinel():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 2)
    assert f.interior()[3, 5, 1] == encode(3, 5, 1, 2)
    d = plan.depth
    assert bits(f.data[0, 0, 0]) == bits(SENTINEL)
    assert bits(f.data[d + f.lx, d, 0]) == bits(SENTINEL)
    assert not np.isnan(f.interior()).any()


def test_encoding_injective_capacity():
    # largest supported case must stay under 2^53 for exactness
    top = encode(2047, 2047, 127, 27)
    assert top == 27 * ENC_FIELD + 2047 * ENC_X + 2047 * ENC_Y + 127
    assert top < 2 ** 53
    # the three coordinates and the field index occupy disjoint bit ranges
    assert ENC_Y > 127 and ENC_X // ENC_Y > 2047 and ENC_FIELD // ENC_X > 2047


def test_adjacent_ranks_have_consecutive_x_encodings():
    plan = plan_decomposition((16, 8, 4), 4, periodic=False)
    assert plan.px == 2
    left = make_field(plan, 0, 0)
    right = make_field(plan, 1, 0)
    last_left = left.interior()[-1, 0, 0]
    first_right = right.interior()[0, 0, 0]
    assert first_right - last_left == ENC_X


def test_pack_face_matches_index_map_oracle():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    d = plan.depth
    out = np.empty(d * f.ly * f.lz, dtype=np.float64)
    pack_halo(f, 0, out)  # x- face
    expected = []
    for layer in range(d):
        for row in range(f.ly):
            for k in range(f.lz):
                expected.append(encode(layer, row, k, 0))
    assert out.tolist() == expected


def test_pack_corner_matches_index_map_oracle():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    d = plan.depth
    out = np.empty(d * d * f.lz, dtype=np.float64)
    pack_halo(f, 4, out)  # x-y- corner
    expected = []
    for i in range(d):
        for j in range(d):
            for k in range(f.lz):
                expected.append(encode(i, j, k, 0))
    assert out.tolist() == expected


def test_single_rank_wrap_identity():
    # the packed x- face is exactly what must appear in the own x+ halo
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    d = plan.depth
    out = np.empty(d * f.ly * f.lz, dtype=np.float64)
    pack_halo(f, 0, out)
    expected = []
    for layer in range(d):
        for row in range(f.ly):
            for k in range(f.lz):
                expected.append(encode((plan.nx + layer) % plan.nx, row, k, 0))
    assert out.tolist() == expected


def test_unpack_is_inverse_of_pack():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    d = plan.depth
    buf = np.empty(d * f.ly * f.lz, dtype=np.float64)
    pack_halo(f, 0, buf)  # own x- edge wraps into the own x+ halo
    unpack_halo(f, 1, ReceiveView(0, buf.nbytes, 1, 0, buf))
    assert f.data[d + f.lx:, d:d + f.ly, :].reshape(-1).tolist() == buf.tolist()


def test_pack_size_mismatch_rejected():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    with pytest.raises(ValueError):
        pack_halo(f, 0, np.empty(3, dtype=np.float64))
    with pytest.raises(ValueError):
        unpack_halo(f, 0, ReceiveView(0, 24, 0, 0, np.empty(3, dtype=np.float64)))


def test_full_swap_halos_match_neighbor_interiors():
    plan = plan_decomposition((8, 8, 4), 2, periodic=True)

    def program(rank):
        return run_timesteps(rank, plan, Backend.FENCE, n_fields=1, timesteps=1,
                             rma_config=SEP)

    run_world(2, program)  # run_timesteps verifies every halo cell bitwise


def test_sentinel_absent_after_periodic_swap():
    plan = plan_decomposition((8, 8, 4), 4, periodic=True)

    def program(rank):
        from halosim.halo import (complete_nonblocking_halo_swap,
                                  finalise_halo_communication,
                                  init_halo_communication,
                                  initiate_nonblocking_halo_swap)

        fields = [make_field(plan, rank.rank, 0)]
        ctx = init_halo_communication(rank, [fields[0].descriptor], plan,
                                      Backend.P2P)
        initiate_nonblocking_halo_swap(ctx, lambda d, fi, out: pack_halo(fields[fi], d, out))
        complete_nonblocking_halo_swap(ctx, lambda d, fi, v: unpack_halo(fields[fi], d, v))
        finalise_halo_communication(ctx)
        return bool(np.any(bits(fields[0].data) == bits(SENTINEL)))

    assert run_world(4, program).results == [False] * 4


def test_verify_reports_single_corruption():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    # fill all halos correctly by construction, then corrupt one cell
    for direction in range(8):
        from halosim.grid import _halo_slice
        sx, sy = _halo_slice(f, direction)
        d = plan.depth
        for i in range(sx.start, sx.stop):
            for j in range(sy.start, sy.stop):
                gx = (f.ox + i - d) % plan.nx
                gy = (f.oy + j - d) % plan.ny
                f.data[i, j, :] = [encode(gx, gy, k, 0) for k in range(f.lz)]
    assert verify_halos(f, plan) == []
    f.data[0, plan.depth, 1] += 1.0
    mismatches = verify_halos(f, plan)
    assert len(mismatches) == 1
    assert mismatches[0][0] == (0, plan.depth, 1)


def test_skipped_corner_reported_cell_for_cell():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    d = plan.depth
    from halosim.grid import _halo_slice
    for direction in range(1, 8):  # leave direction 0 (x- face) unswapped
        sx, sy = _halo_slice(f, direction)
        for i in range(sx.start, sx.stop):
            for j in range(sy.start, sy.stop):
                gx = (f.ox + i - d) % plan.nx
                gy = (f.oy + j - d) % plan.ny
                f.data[i, j, :] = [encode(gx, gy, k, 0) for k in range(f.lz)]
    mismatches = verify_halos(f, plan)
    assert len(mismatches) == d * f.ly * f.lz


def test_swap_is_idempotent_and_leaves_interior_untouched():
    plan = plan_decomposition((8, 8, 4), 4, periodic=True)

    def program(rank):
        from halosim.halo import (complete_nonblocking_halo_swap,
                                  finalise_halo_communication,
                                  init_halo_communication,
                                  initiate_nonblocking_halo_swap)

        fields = [make_field(plan, rank.rank, 0)]
        interior_before = fields[0].interior().copy()
        ctx = init_halo_communication(rank, [fields[0].descriptor], plan,
                                      Backend.FENCE, rma_config=SEP)
        packer = lambda d, fi, out: pack_halo(fields[fi], d, out)
        unpacker = lambda d, fi, v: unpack_halo(fields[fi], d, v)
        digests = []
        for _ in range(2):
            initiate_nonblocking_halo_swap(ctx, packer)
            complete_nonblocking_halo_swap(ctx, unpacker)
            digests.append(field_digest(fields))
        finalise_halo_communication(ctx)
        interior_same = np.array_equal(interior_before, fields[0].interior())
        return digests[0] == digests[1], interior_same

    assert run_world(4, program).results == [(True, True)] * 4


def test_verification_failure_aborts_with_diagnostics():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)
    f = make_field(plan, 0, 0)
    f.data[0, plan.depth, 0] = 123.0
    mm = verify_halos(f, plan)
    err = HaloVerificationError(0, 3, mm)
    assert "rank 0" in str(err) and "step 3" in str(err)


def test_zero_timesteps_empty_stats():
    plan = plan_decomposition((8, 8, 4), 1, periodic=True)

    def program(rank):
        return run_timesteps(rank, plan, Backend.P2P, n_fields=1, timesteps=0)

    stats = run_world(1, program).results[0]
    assert stats["comm_ns"] == [] and stats["init_block_ns"] == []


def test_many_fields_many_ranks_all_backends():
    plan = plan_decomposition((12, 12, 4), 4, periodic=True)

    def make_program(backend):
        def program(rank):
            return run_timesteps(rank, plan, backend, n_fields=28, timesteps=2,
                                 rma_config=SEP if backend is not Backend.P2P else None)
        return program

    for backend in Backend:
        run_world(4, make_program(backend), seed=8)
