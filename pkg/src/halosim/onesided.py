"""One-sided communication over the simulated transport.

Windows expose per-rank memory regions to a group of peers.  Puts and gets
are nonblocking and complete under one of three synchronization modes:
fence epochs, post-start-complete-wait (PSCW), or passive-target locks with
flushes.  Both RMA memory models are supported: under ``separate`` a window
keeps distinct public (remotely written) and private (locally read) byte
stores that only merge at defined sync points; under ``unified`` they alias.

A visibility ledger built on vector clocks records every engine-mediated
window read and write.  It flags two kinds of violation and lets the run
continue:

* a private-copy read of bytes whose remote write was protocol-ordered
  before the read but never merged (missing win_sync / fence / wait), and
* a read of bytes whose latest write is concurrent with the read — no
  synchronization chain orders the writer before the reader.

Fence-mode operations apply at the target as soon as they are delivered;
the safety of a fence program therefore rests on the collective barrier
behaviour of non-asserted fences, and honoring a ``noprecede`` assertion
(which turns that fence into a local call) re-creates the classic stale
read when transfers are get-driven.  PSCW operations instead defer at the
target until the matching exposure epoch opens.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .netsim import Rank, World, _Message, _RankRuntime


class MemoryModel(str, Enum):
    SEPARATE = "separate"
    UNIFIED = "unified"


@dataclass(frozen=True)
class Assertions:
    noprecede: bool = False
    nosucceed: bool = False
    noput: bool = False
    nocheck: bool = False


NO_ASSERTS = Assertions()


@dataclass(frozen=True)
class RmaConfig:
    memory_model: MemoryModel = MemoryModel.SEPARATE
    honor_assertions: bool = False
    start_blocks_for_post: bool = False


class RmaError(RuntimeError):
    pass


class RmaStateError(RmaError):
    """Operation issued in an illegal epoch state."""


class RmaBoundsError(RmaError):
    """RMA access outside the target region."""


@dataclass
class Violation:
    rank: int        # the rank whose read was unsafe
    window: int      # window family index
    offset: int
    length: int
    read_seq: int
    missing_sync: str
    writer: int = -1

    def line(self) -> str:
        return f"{self.rank},{self.window},{self.offset},{self.length},{self.read_seq},{self.missing_sync}"


class Region:
    """Fixed-length, zero-initialized allocation registered for RMA."""

    def __init__(self, nbytes: int, alloc_id: int):
        if nbytes < 0:
            raise ValueError("region length must be >= 0")
        self.nbytes = nbytes
        self.alloc_id = alloc_id
        self.buffer = np.zeros(nbytes, dtype=np.uint8)


@dataclass(frozen=True)
class Window:
    """Per-rank handle to one collectively created window family."""

    family: int
    owner: int
    group: tuple[int, ...]


def vc_leq(a: Sequence[int], b: Sequence[int]) -> bool:
    return all(x <= y for x, y in zip(a, b))


class _WriteRec:
    __slots__ = ("lo", "hi", "writer", "vc", "kind", "in_public", "in_private")

    def __init__(self, lo, hi, writer, vc, kind, in_public, in_private):
        self.lo = lo
        self.hi = hi
        self.writer = writer
        self.vc = vc
        self.kind = kind  # "put" | "store"
        self.in_public = in_public
        self.in_private = in_private

    def clone(self, lo, hi):
        return _WriteRec(lo, hi, self.writer, self.vc, self.kind, self.in_public, self.in_private)


class _ReadRec:
    __slots__ = ("lo", "hi", "reader", "vc", "seq", "copy")

    def __init__(self, lo, hi, reader, vc, seq, copy):
        self.lo = lo
        self.hi = hi
        self.reader = reader
        self.vc = vc
        self.seq = seq
        self.copy = copy  # "private" | "public"


class _WindowState:
    """Engine-side state of one rank's exposure in a window family."""

    def __init__(self, family: int, owner: int, group: tuple[int, ...],
                 region: Region, model: MemoryModel):
        self.family = family
        self.owner = owner
        self.group = group
        self.region = region
        self.public = region.buffer
        self.private = region.buffer if model is MemoryModel.UNIFIED else region.buffer.copy()
        # fence
        self.fence_seq = 0
        self.fence_open = False
        self.fence_enters: dict[tuple[int, int], tuple[list[int], int]] = {}
        self.fence_deferred: dict[int, list[_Message]] = {}
        # origin-side op accounting
        self.sent_cum: dict[int, int] = {}
        self.outstanding = 0
        self.apply_high_water = 0
        # target-side op accounting
        self.applied_cum_from: dict[int, int] = {}
        # pscw
        self.access_open = False
        self.access_seq = 0
        self.start_group: tuple[int, ...] = ()
        self.issued_access: dict[int, int] = {}
        self.exposure_seq = 0
        self.exposure_open: list[int] = []
        self.post_groups: dict[int, tuple[int, ...]] = {}
        self.posts_seen: dict[tuple[int, int], list[int]] = {}
        self.completes_seen: dict[tuple[int, int], tuple[list[int], int]] = {}
        self.exposure_applied: dict[tuple[int, int], int] = {}
        self.deferred: dict[int, list[_Message]] = {}
        # passive
        self.locked = False
        self.lock_excl = False
        self.lock_used_msgs = False
        self.grants = 0
        self.holders: list[tuple[int, bool]] = []
        self.lock_queue: list[_Message] = []
        # ledger
        self.writes: list[_WriteRec] = []
        self.reads: list[_ReadRec] = []
        self.create_vc: list[int] = []
        self.create_time = 0


class _RmaWorld:
    """World-shared registries for the one-sided engine."""

    def __init__(self, world: World, config: RmaConfig):
        self.world = world
        self.config = config
        self.families: dict[int, dict[int, _WindowState]] = {}
        self.win_calls: dict[int, int] = {}
        self.alloc_seq = 0
        self.read_seq = 0
        self.violations: list[Violation] = []
        self.put_audit: list[tuple[int, int, int, int, int]] = []  # origin, target, family, offset, len
        world.register_handler("rma_put", _h_put)
        world.register_handler("rma_get", _h_get)
        world.register_handler("rma_get_reply", _h_get_reply)
        world.register_handler("fence_enter", _h_fence_enter)
        world.register_handler("pscw_post", _h_post)
        world.register_handler("pscw_complete", _h_complete)
        world.register_handler("lock_req", _h_lock_req)
        world.register_handler("lock_grant", _h_lock_grant)
        world.register_handler("lock_release", _h_lock_release)

    def state(self, family: int, rank: int) -> _WindowState:
        return self.families[family][rank]

    @property
    def separate(self) -> bool:
        return self.config.memory_model is MemoryModel.SEPARATE

    # -- ledger ---------------------------------------------------------------

    def note_write(self, st: _WindowState, lo: int, hi: int, writer: int,
                   vc: list[int], kind: str) -> None:
        if hi <= lo:
            return
        separate = self.separate
        keep_reads: list[_ReadRec] = []
        for rd in st.reads:
            if rd.hi <= lo or rd.lo >= hi:
                keep_reads.append(rd)
                continue
            # A remote read raced by a store or put of the same locations is a
            # conflicting access in either memory model.  A private read merely
            # overwritten later observed the old bytes legitimately (the owner
            # copy serves them under separate; under unified the read completed
            # before this write arrived).
            if rd.copy == "public" and not vc_leq(rd.vc, vc):
                self._violate(st, max(lo, rd.lo), min(hi, rd.hi), rd.seq,
                              "racy-read-overwritten", reader=rd.reader, writer=writer)
        st.reads = keep_reads
        pruned: list[_WriteRec] = []
        for w in st.writes:
            if w.hi <= lo or w.lo >= hi:
                pruned.append(w)
                continue
            if w.lo < lo:
                pruned.append(w.clone(w.lo, lo))
            if w.hi > hi:
                pruned.append(w.clone(hi, w.hi))
        if kind == "put":
            rec = _WriteRec(lo, hi, writer, vc, kind, True, not separate)
        else:  # local store lands in the private copy first
            rec = _WriteRec(lo, hi, writer, vc, kind, not separate, True)
        pruned.append(rec)
        st.writes = pruned

    def note_private_read(self, st: _WindowState, lo: int, hi: int, vc: list[int]) -> None:
        if hi <= lo:
            return
        self.read_seq += 1
        seq = self.read_seq
        for w in st.writes:
            if w.hi <= lo or w.lo >= hi:
                continue
            olo, ohi = max(lo, w.lo), min(hi, w.hi)
            if not self.separate or w.in_private:
                if not vc_leq(w.vc, vc):
                    self._violate(st, olo, ohi, seq, "unsynchronized-read",
                                  reader=st.owner, writer=w.writer)
            else:
                # write only visible in the public copy
                if vc_leq(w.vc, vc):
                    self._violate(st, olo, ohi, seq, "missing-merge-before-read",
                                  reader=st.owner, writer=w.writer)
                # else: concurrent unmerged put; the private copy legitimately
                # still serves the old bytes
        st.reads.append(_ReadRec(lo, hi, st.owner, vc, seq, "private"))

    def note_public_read(self, st: _WindowState, lo: int, hi: int, reader: int,
                         vc: list[int]) -> None:
        if hi <= lo:
            return
        self.read_seq += 1
        seq = self.read_seq
        for w in st.writes:
            if w.hi <= lo or w.lo >= hi:
                continue
            olo, ohi = max(lo, w.lo), min(hi, w.hi)
            if not self.separate or w.in_public:
                if not vc_leq(w.vc, vc):
                    self._violate(st, olo, ohi, seq, "unsynchronized-read",
                                  reader=reader, writer=w.writer)
            else:
                label = "missing-push-before-read" if vc_leq(w.vc, vc) else "unsynchronized-read"
                self._violate(st, olo, ohi, seq, label, reader=reader, writer=w.writer)
        st.reads.append(_ReadRec(lo, hi, reader, vc, seq, "public"))

    def _violate(self, st: _WindowState, lo: int, hi: int, read_seq: int,
                 label: str, reader: int, writer: int) -> None:
        self.violations.append(Violation(reader, st.family, lo, hi - lo, read_seq,
                                         label, writer=writer))
        rt = self.world._runtimes[reader] if 0 <= reader < self.world.config.n_ranks else None
        self.world.log.add(rt.clock if rt else 0, st.owner, "violation", reader, hi - lo)

    # -- merges (separate model) -----------------------------------------------

    def merge_pull(self, st: _WindowState) -> None:
        """Make remotely written (public) bytes visible to private reads.

        Only writes the owner is synchronized with are pulled: a merge makes a
        write visible iff it covers that write.  An early arrival from a peer
        that raced ahead into its next epoch stays public-only until a later
        sync orders it before the owner.
        """
        if not self.separate:
            return
        owner_vc = self.world.vcs[st.owner]
        for w in st.writes:
            if w.in_public and not w.in_private and vc_leq(w.vc, owner_vc):
                st.private[w.lo:w.hi] = st.public[w.lo:w.hi]
                w.in_private = True

    def merge_push(self, st: _WindowState) -> None:
        """Publish locally stored (private) bytes to the public copy."""
        if not self.separate:
            return
        for w in st.writes:
            if w.in_private and not w.in_public:
                st.public[w.lo:w.hi] = st.private[w.lo:w.hi]
                w.in_public = True


class Rma:
    """Per-rank facade for windows, epochs and RMA operations."""

    def __init__(self, rank: Rank, config: Optional[RmaConfig] = None):
        self.rank = rank
        self.r = rank.rank
        world = rank.world
        shared = world.shared.get("rma")
        if shared is None:
            shared = _RmaWorld(world, config or RmaConfig())
            world.shared["rma"] = shared
        elif config is not None and config != shared.config:
            raise RmaStateError("inconsistent RmaConfig across ranks")
        self._w: _RmaWorld = shared

    @property
    def config(self) -> RmaConfig:
        return self._w.config

    def _st(self, win: Window) -> _WindowState:
        return self._w.state(win.family, self.r)

    def _log(self, kind: str, peer: int = -1, nbytes: int = 0) -> None:
        rt = self.rank._rt
        self.rank.world.log.add(rt.clock, self.r, kind, peer, nbytes)

    # -- allocation & window creation -------------------------------------------

    def alloc_region(self, nbytes: int) -> Region:
        self._w.alloc_seq += 1
        return Region(nbytes, self._w.alloc_seq)

    def win_create(self, region: Region, group: Iterable[int]) -> Window:
        """Collective: returns once every group member has registered."""
        members = tuple(sorted(set(group)))
        if self.r not in members:
            raise RmaStateError(f"caller rank {self.r} not in window group {members}")
        family = self._w.win_calls.get(self.r, 0)  # matched across ranks by call order
        self._w.win_calls[self.r] = family + 1
        fam = self._w.families.setdefault(family, {})
        if self.r in fam:
            raise RmaStateError("duplicate win_create registration")
        st = _WindowState(family, self.r, members, region, self.config.memory_model)
        st.create_vc = self.rank.world.vc_snapshot(self.r)
        st.create_time = self.rank._rt.clock
        fam[self.r] = st
        for n in range(self.rank.n_ranks):
            self.rank.world.wake(n)  # anyone blocked on this family rechecks
        self._log("win_create_enter", nbytes=region.nbytes)
        self.rank._rt.charge_op()

        def created() -> bool:
            for n in members:
                if n not in fam:
                    return False
                if self.r not in fam[n].group:
                    raise RmaStateError(
                        f"window group mismatch: rank {n} created family {family} "
                        f"with group {fam[n].group}, excluding rank {self.r}")
            return True

        self.rank._rt.block_until(created, f"win_create(family={family})")
        release = self.rank.world.config.latency.base_ns
        for n in members:
            if n != self.r:
                self.rank.world.vc_join(self.r, fam[n].create_vc)
            release = max(release, fam[n].create_time + self.rank.world.config.latency.base_ns)
        if release > self.rank._rt.clock:
            self.rank._rt.clock = release
        self._log("win_create_exit")
        return Window(family, self.r, members)

    # -- local access (engine-mediated so the ledger can see it) ---------------

    def private_array(self, win: Window) -> np.ndarray:
        """The owner-readable byte store of this rank's window memory."""
        return self._st(win).private

    def local_write(self, win: Window, offset: int, data: bytes | np.ndarray) -> None:
        st = self._st(win)
        buf = np.frombuffer(bytes(data), dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else data.view(np.uint8)
        lo, hi = offset, offset + buf.size
        if lo < 0 or hi > st.region.nbytes:
            raise RmaBoundsError(f"local_write [{lo},{hi}) outside region of {st.region.nbytes} bytes")
        self._w.note_write(st, lo, hi, self.r, self.rank.world.vc_snapshot(self.r), "store")
        st.private[lo:hi] = buf  # aliases the public copy under unified
        self._log("local_write", nbytes=hi - lo)

    def note_private_read(self, win: Window, offset: int, length: int) -> None:
        st = self._st(win)
        vc = self.rank.world.vc_snapshot(self.r)
        self._w.note_private_read(st, offset, offset + length, vc)

    def memory_model(self, win: Window) -> MemoryModel:
        return self.config.memory_model

    # -- RMA data movement -------------------------------------------------------

    def _epoch_mode(self, st: _WindowState, target: int) -> tuple[str, int]:
        if st.access_open:
            if target not in st.start_group:
                raise RmaStateError(f"RMA target {target} outside the start group {st.start_group}")
            return "pscw", st.access_seq - 1
        if st.locked:
            return "passive", 0
        if st.fence_open:
            return "fence", st.fence_seq
        raise RmaStateError("RMA operation outside access epoch")

    def _issue_common(self, win: Window, target: int, target_offset: int, length: int) -> tuple:
        st = self._st(win)
        if target not in st.group:
            raise RmaStateError(f"target {target} not in window group {st.group}")
        mode, seq = self._epoch_mode(st, target)
        tgt_region = self._w.state(win.family, target).region
        if target_offset < 0 or target_offset + length > tgt_region.nbytes:
            raise RmaBoundsError(
                f"RMA range [{target_offset},{target_offset + length}) outside "
                f"target region of {tgt_region.nbytes} bytes")
        st.sent_cum[target] = st.sent_cum.get(target, 0) + 1
        st.outstanding += 1
        if mode == "pscw":
            st.issued_access[target] = st.issued_access.get(target, 0) + 1
        return st, mode, seq

    def put(self, win: Window, target: int, target_offset: int,
            payload: bytes | np.ndarray) -> None:
        data = payload.tobytes() if isinstance(payload, np.ndarray) else bytes(payload)
        st, mode, seq = self._issue_common(win, target, target_offset, len(data))
        self.rank._rt.charge_op()
        vc = self.rank.world.vc_snapshot(self.r)
        self.rank.world._post_message(
            "rma_put", self.r, target, -3, data,
            {"f": win.family, "off": target_offset, "mode": mode, "seq": seq, "vc": vc})
        self._log("put_issue", target, len(data))

    def get(self, win: Window, target: int, target_offset: int, length: int,
            dest: np.ndarray) -> None:
        if dest.view(np.uint8).size != length:
            raise RmaBoundsError("get destination size does not match request length")
        st, mode, seq = self._issue_common(win, target, target_offset, length)
        self.rank._rt.charge_op()
        vc = self.rank.world.vc_snapshot(self.r)
        self.rank.world._post_message(
            "rma_get", self.r, target, -3, b"",
            {"f": win.family, "off": target_offset, "len": length, "mode": mode,
             "seq": seq, "vc": vc, "dest": dest})
        self._log("get_issue", target, length)

    # -- fence synchronization -----------------------------------------------------

    def fence(self, win: Window, asserts: Assertions = NO_ASSERTS) -> None:
        st = self._st(win)
        if st.access_open or st.exposure_open:
            raise RmaStateError("fence while a PSCW epoch is open")
        if st.locked:
            raise RmaStateError("fence while a passive epoch is open")
        rt = self.rank._rt
        rt.charge_op()
        self._w.merge_push(st)
        closing = st.fence_seq
        st.fence_seq += 1
        for seq in sorted(s for s in st.fence_deferred if s <= st.fence_seq):
            for msg in sorted(st.fence_deferred.pop(seq), key=lambda m: m.order_key()):
                _apply_rma(self._w, rt, msg)
        self._log("fence_enter", nbytes=closing)
        elide = self.config.honor_assertions and asserts.noprecede
        if not elide:
            others = [n for n in st.group if n != self.r]
            vc = self.rank.world.vc_snapshot(self.r)
            for n in others:
                self.rank.world._post_message(
                    "fence_enter", self.r, n, -4, b"",
                    {"f": win.family, "seq": closing, "vc": vc,
                     "cum": st.sent_cum.get(n, 0)})

            def drained() -> bool:
                if st.outstanding:
                    return False
                for n in others:
                    rec = st.fence_enters.get((n, closing))
                    if rec is None:
                        return False
                    if st.applied_cum_from.get(n, 0) < rec[1]:
                        return False
                return True

            rt.block_until(drained, f"fence(family={win.family}, seq={closing})")
            for n in others:
                self.rank.world.vc_join(self.r, st.fence_enters[(n, closing)][0])
            if st.apply_high_water > rt.clock:
                rt.clock = st.apply_high_water
        self._w.merge_pull(st)
        st.fence_open = True
        self._log("fence_exit", nbytes=closing)

    # -- PSCW synchronization ---------------------------------------------------------

    def post(self, win: Window, group: Iterable[int]) -> None:
        st = self._st(win)
        members = tuple(sorted(set(group)))
        if not set(members) <= set(st.group):
            raise RmaStateError("post group not contained in window group")
        rt = self.rank._rt
        rt.charge_op()
        seq = st.exposure_seq
        st.exposure_seq += 1
        st.exposure_open.append(seq)
        st.post_groups[seq] = members
        self._w.merge_push(st)
        vc = self.rank.world.vc_snapshot(self.r)
        for msg in sorted(st.deferred.pop(seq, []), key=lambda m: m.order_key()):
            _apply_rma(self._w, self.rank.world._runtimes[self.r], msg)
        for n in members:
            self.rank.world._post_message("pscw_post", self.r, n, -4, b"",
                                          {"f": win.family, "seq": seq, "vc": vc})
        self._log("post", nbytes=seq)

    def start(self, win: Window, group: Iterable[int]) -> None:
        st = self._st(win)
        members = tuple(sorted(set(group)))
        if not set(members) <= set(st.group):
            raise RmaStateError("start group not contained in window group")
        if st.access_open:
            raise RmaStateError("start while an access epoch is already open")
        rt = self.rank._rt
        rt.charge_op()
        seq = st.access_seq
        st.access_seq += 1
        st.access_open = True
        st.start_group = members
        st.issued_access = {}
        if self.config.start_blocks_for_post:
            rt.block_until(
                lambda: all((n, seq) in st.posts_seen for n in members),
                f"start(family={win.family}, seq={seq})")
            for n in members:
                self.rank.world.vc_join(self.r, st.posts_seen[(n, seq)])
        self._log("start", nbytes=seq)

    def complete(self, win: Window) -> None:
        st = self._st(win)
        if not st.access_open:
            raise RmaStateError("complete without a matching start")
        rt = self.rank._rt
        rt.charge_op()
        seq = st.access_seq - 1
        st.access_open = False
        vc = self.rank.world.vc_snapshot(self.r)
        for n in st.start_group:
            self.rank.world._post_message(
                "pscw_complete", self.r, n, -4, b"",
                {"f": win.family, "seq": seq, "vc": vc,
                 "count": st.issued_access.get(n, 0)})
        self._log("complete", nbytes=seq)

    def wait_exposure(self, win: Window) -> None:
        st = self._st(win)
        if not st.exposure_open:
            raise RmaStateError("wait_exposure without a matching post")
        rt = self.rank._rt
        rt.charge_op()
        seq = st.exposure_open[0]
        members = st.post_groups[seq]

        def arrived() -> bool:
            for n in members:
                rec = st.completes_seen.get((n, seq))
                if rec is None:
                    return False
                if st.exposure_applied.get((seq, n), 0) < rec[1]:
                    return False
            return True

        rt.block_until(arrived, f"wait_exposure(family={win.family}, seq={seq})")
        for n in members:
            self.rank.world.vc_join(self.r, st.completes_seen[(n, seq)][0])
        self._w.merge_pull(st)
        st.exposure_open.pop(0)
        self._log("wait_exposure", nbytes=seq)

    # -- passive target synchronization ---------------------------------------------

    def lock_all(self, win: Window, asserts: Assertions = NO_ASSERTS,
                 exclusive: bool = False) -> None:
        st = self._st(win)
        if st.locked:
            raise RmaStateError("lock_all while already locked")
        if st.access_open or st.exposure_open or st.fence_open:
            raise RmaStateError("lock_all while an active-target epoch is open")
        rt = self.rank._rt
        rt.charge_op()
        skip_check = self.config.honor_assertions and asserts.nocheck
        if not skip_check:
            st.lock_used_msgs = True
            st.grants = 0
            others = [n for n in st.group if n != self.r]
            rt.block_until(lambda: _try_lock(st, self.r, exclusive),
                           f"lock_all(self, family={win.family})")
            for n in others:
                self.rank.world._post_message("lock_req", self.r, n, -5, b"",
                                              {"f": win.family, "excl": exclusive})
            rt.block_until(lambda: st.grants >= len(others),
                           f"lock_all(family={win.family})")
        st.locked = True
        st.lock_excl = exclusive
        self._log("lock_all", nbytes=1 if exclusive else 0)

    def flush_all(self, win: Window) -> None:
        st = self._st(win)
        if not st.locked:
            raise RmaStateError("flush_all without holding the lock")
        rt = self.rank._rt
        rt.charge_op()
        rt.block_until(lambda: st.outstanding == 0, f"flush_all(family={win.family})")
        if st.apply_high_water > rt.clock:
            rt.clock = st.apply_high_water
        self._log("flush_all")

    def win_sync(self, win: Window) -> None:
        st = self._st(win)
        self.rank._rt.charge_op()
        self._w.merge_push(st)
        self._w.merge_pull(st)
        self._log("win_sync")

    def unlock_all(self, win: Window) -> None:
        st = self._st(win)
        if not st.locked:
            raise RmaStateError("unlock_all without holding the lock")
        rt = self.rank._rt
        rt.charge_op()
        rt.block_until(lambda: st.outstanding == 0, f"unlock_all(family={win.family})")
        if st.apply_high_water > rt.clock:
            rt.clock = st.apply_high_water
        if st.lock_used_msgs:
            _lock_release(self._w, st, self.r)
            for n in st.group:
                if n != self.r:
                    self.rank.world._post_message("lock_release", self.r, n, -5, b"",
                                                  {"f": win.family})
        st.locked = False
        st.lock_used_msgs = False
        self._log("unlock_all")


# -- message handlers (run on the target rank's worker) ----------------------------


def _shared(world: World) -> _RmaWorld:
    return world.shared["rma"]


def _h_put(world: World, rt: _RankRuntime, msg: _Message) -> None:
    shared = _shared(world)
    st = shared.state(msg.meta["f"], rt.rank)
    if msg.meta["mode"] == "pscw" and msg.meta["seq"] not in st.exposure_open:
        st.deferred.setdefault(msg.meta["seq"], []).append(msg)
        return
    if msg.meta["mode"] == "fence" and msg.meta["seq"] > st.fence_seq:
        # an op of a later epoch accesses this window only once the target
        # has made the matching fence call
        st.fence_deferred.setdefault(msg.meta["seq"], []).append(msg)
        return
    if st.holders and any(excl and origin != msg.src for origin, excl in st.holders):
        st.lock_queue.append(msg)
        return
    _apply_rma(shared, rt, msg)


def _h_get(world: World, rt: _RankRuntime, msg: _Message) -> None:
    _h_put(world, rt, msg)  # same deferral rules, dispatched on kind in _apply_rma


def _apply_rma(shared: _RmaWorld, rt: _RankRuntime, msg: _Message) -> None:
    world = shared.world
    meta = msg.meta
    st = shared.state(meta["f"], rt.rank)
    origin_st = shared.state(meta["f"], msg.src)
    if msg.kind == "rma_put":
        lo = meta["off"]
        hi = lo + len(msg.payload)
        shared.note_write(st, lo, hi, msg.src, meta["vc"], "put")
        st.public[lo:hi] = np.frombuffer(msg.payload, dtype=np.uint8)
        world.log.add(rt.clock, rt.rank, "put_apply", msg.src, hi - lo)
        shared.put_audit.append((msg.src, rt.rank, meta["f"], lo, hi - lo))
        _op_served(world, rt, st, origin_st, msg)
    else:  # rma_get
        lo = meta["off"]
        hi = lo + meta["len"]
        shared.note_public_read(st, lo, hi, msg.src, meta["vc"])
        data = st.public[lo:hi].tobytes()
        world.log.add(rt.clock, rt.rank, "get_serve", msg.src, hi - lo)
        world._post_message("rma_get_reply", rt.rank, msg.src, -3, data,
                            {"f": meta["f"], "dest": meta["dest"]})
        _op_served(world, rt, st, origin_st, msg, reply_pending=True)


def _op_served(world: World, rt: _RankRuntime, st: _WindowState,
               origin_st: _WindowState, msg: _Message, reply_pending: bool = False) -> None:
    st.applied_cum_from[msg.src] = st.applied_cum_from.get(msg.src, 0) + 1
    if msg.meta["mode"] == "pscw":
        key = (msg.meta["seq"], msg.src)
        st.exposure_applied[key] = st.exposure_applied.get(key, 0) + 1
    if not reply_pending:
        origin_st.outstanding -= 1
        if rt.clock > origin_st.apply_high_water:
            origin_st.apply_high_water = rt.clock
    world.wake(msg.src)


def _h_get_reply(world: World, rt: _RankRuntime, msg: _Message) -> None:
    shared = _shared(world)
    dest: np.ndarray = msg.meta["dest"]
    dest.view(np.uint8)[:] = np.frombuffer(msg.payload, dtype=np.uint8)
    st = shared.state(msg.meta["f"], rt.rank)
    st.outstanding -= 1
    if rt.clock > st.apply_high_water:
        st.apply_high_water = rt.clock
    world.log.add(rt.clock, rt.rank, "get_land", msg.src, len(msg.payload))


def _h_fence_enter(world: World, rt: _RankRuntime, msg: _Message) -> None:
    st = _shared(world).state(msg.meta["f"], rt.rank)
    st.fence_enters[(msg.src, msg.meta["seq"])] = (msg.meta["vc"], msg.meta["cum"])


def _h_post(world: World, rt: _RankRuntime, msg: _Message) -> None:
    st = _shared(world).state(msg.meta["f"], rt.rank)
    st.posts_seen[(msg.src, msg.meta["seq"])] = msg.meta["vc"]


def _h_complete(world: World, rt: _RankRuntime, msg: _Message) -> None:
    st = _shared(world).state(msg.meta["f"], rt.rank)
    st.completes_seen[(msg.src, msg.meta["seq"])] = (msg.meta["vc"], msg.meta["count"])


def _try_lock(st: _WindowState, origin: int, excl: bool) -> bool:
    """Acquire a lock entry unless it conflicts with a held one."""
    others = [(o, e) for o, e in st.holders if o != origin]
    if others and (excl or any(e for _, e in others)):
        return False
    st.holders.append((origin, excl))
    return True


def _h_lock_req(world: World, rt: _RankRuntime, msg: _Message) -> None:
    shared = _shared(world)
    st = shared.state(msg.meta["f"], rt.rank)
    if _try_lock(st, msg.src, msg.meta["excl"]):
        world._post_message("lock_grant", rt.rank, msg.src, -5, b"",
                            {"f": msg.meta["f"], "vc": world.vc_snapshot(rt.rank)})
    else:
        st.lock_queue.append(msg)


def _h_lock_grant(world: World, rt: _RankRuntime, msg: _Message) -> None:
    st = _shared(world).state(msg.meta["f"], rt.rank)
    st.grants += 1
    world.vc_join(rt.rank, msg.meta["vc"])


def _lock_release(shared: _RmaWorld, st: _WindowState, origin: int) -> None:
    st.holders = [(o, e) for o, e in st.holders if o != origin]
    pending, st.lock_queue = st.lock_queue, []
    for queued in pending:
        if queued.kind == "lock_req":
            _h_lock_req(shared.world, shared.world._runtimes[st.owner], queued)
        else:
            _h_put(shared.world, shared.world._runtimes[st.owner], queued)


def _h_lock_release(world: World, rt: _RankRuntime, msg: _Message) -> None:
    st = _shared(world).state(msg.meta["f"], rt.rank)
    _lock_release(_shared(world), st, msg.src)


def consistency_report(world: World | object) -> list[Violation]:
    """All ledger violations recorded in a finished world; empty means clean."""
    w = getattr(world, "world", world)
    shared = w.shared.get("rma")
    return list(shared.violations) if shared else []


def export_violations(violations: Sequence[Violation]) -> str:
    lines = ["rank,window,offset,len,read_seq,missing_sync"]
    lines.extend(v.line() for v in violations)
    return "\n".join(lines) + "\n"
