"""In-process simulated multi-rank world with deterministic scheduling.

Each rank runs an ordinary Python callable on its own cooperative worker
(greenlet when available, otherwise a thread), but exactly one worker is
ever active: all context switches happen at communication calls, so a run
is a single deterministic interleaving fully decided by (config, seed).

Time is simulated, in integer nanoseconds.  Every rank keeps its own clock;
message delivery time is ``send_clock + base_latency + bytes * per_byte``
plus seeded jitter, and a rank observes a delivery only once its own clock
has reached the delivery time (or it blocks, in which case its clock jumps
forward).  The "adversarial" schedule inflates delivery times of randomly
chosen messages to force reorderings that a quiet network never shows.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Sequence

try:
    import greenlet as _greenlet
except ImportError:  # pragma: no cover - exercised only where greenlet is absent
    _greenlet = None

ANY_SOURCE = -1

# default cost charged to the local clock by any engine call; keeps
# test()-polling loops moving through simulated time
OP_COST_NS = 50


class Schedule(str, Enum):
    FIFO = "fifo"
    RANDOM = "random"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class LatencyModel:
    base_ns: int = 2_000
    per_byte_ns: float = 0.25
    jitter_fraction: float = 0.0

    def validate(self) -> None:
        if self.base_ns < 1:
            raise ValueError("base_ns must be >= 1")
        if self.per_byte_ns < 0:
            raise ValueError("per_byte_ns must be >= 0")
        if not 0.0 <= self.jitter_fraction < 1.0:
            raise ValueError("jitter_fraction must be in [0, 1)")


@dataclass(frozen=True)
class TransportConfig:
    n_ranks: int
    seed: int = 0
    latency: LatencyModel = field(default_factory=LatencyModel)
    schedule: Schedule = Schedule.FIFO
    deadlock_timeout: int = 64  # adversarial delay bound, in base-latency units

    def validate(self) -> None:
        if self.n_ranks < 1:
            raise ValueError("n_ranks must be >= 1")
        self.latency.validate()
        if self.deadlock_timeout < 1:
            raise ValueError("deadlock_timeout must be >= 1")


class DeadlockError(RuntimeError):
    """All ranks blocked with an empty network."""

    def __init__(self, blocked: dict[int, str]):
        self.blocked = blocked
        detail = "; ".join(f"rank {r}: {why}" for r, why in sorted(blocked.items()))
        super().__init__(f"deadlock: all ranks blocked with no in-flight messages ({detail})")


class RankPanic(RuntimeError):
    """A rank program raised; carries the rank id and original exception."""

    def __init__(self, rank: int, original: BaseException):
        self.rank = rank
        self.original = original
        super().__init__(f"rank {rank} panicked: {original!r}")


class RequestError(RuntimeError):
    pass


class _WorldAbort(BaseException):
    # BaseException so user `except Exception` blocks cannot swallow an abort
    pass


@dataclass
class EventRecord:
    time: int
    rank: int
    kind: str
    peer: int
    nbytes: int
    seq: int

    def line(self) -> str:
        return f"{self.time},{self.rank},{self.kind},{self.peer},{self.nbytes},{self.seq}"


class EventLog:
    """Append-only world event log, exported in simulated-time order."""

    def __init__(self) -> None:
        self.records: list[EventRecord] = []

    def add(self, time: int, rank: int, kind: str, peer: int = -1, nbytes: int = 0) -> EventRecord:
        rec = EventRecord(time, rank, kind, peer, nbytes, len(self.records))
        self.records.append(rec)
        return rec

    def sorted_records(self) -> list[EventRecord]:
        return sorted(self.records, key=lambda r: (r.time, r.rank, r.seq))

    def export(self) -> str:
        lines = ["time,rank,kind,peer,bytes,seq"]
        lines.extend(r.line() for r in self.sorted_records())
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.export().encode()).hexdigest()

    def by_kind(self, *kinds: str) -> list[EventRecord]:
        want = set(kinds)
        return [r for r in self.sorted_records() if r.kind in want]


class RequestHandle:
    """Handle for a nonblocking operation; transitions pending -> complete."""

    __slots__ = ("kind", "rank", "src", "tag", "_payload", "_complete", "_time", "_vc", "consumed")

    def __init__(self, kind: str, rank: int, src: int = -1, tag: int = -1):
        self.kind = kind
        self.rank = rank
        self.src = src
        self.tag = tag
        self._payload: Optional[bytes] = None
        self._complete = False
        self._time = -1
        self._vc: Optional[list[int]] = None
        self.consumed = False

    @property
    def complete(self) -> bool:
        return self._complete

    @property
    def payload(self) -> bytes:
        if not self._complete:
            raise RequestError("payload of an incomplete request")
        return self._payload if self._payload is not None else b""

    @property
    def completion_time(self) -> int:
        return self._time

    def _finish(self, payload: Optional[bytes], time: int, src: int = -1) -> None:
        if self._complete:
            raise RequestError("request completed twice")
        self._complete = True
        self._payload = payload
        self._time = time
        if src >= 0:
            self.src = src

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        state = "complete" if self._complete else "pending"
        return f"<RequestHandle {self.kind} rank={self.rank} src={self.src} tag={self.tag} {state}>"


@dataclass
class Status:
    source: int
    tag: int
    nbytes: int
    payload: bytes


class _Message:
    __slots__ = ("kind", "src", "dst", "tag", "payload", "meta", "deliver_at", "seq", "sent_at")

    def __init__(self, kind: str, src: int, dst: int, tag: int, payload: bytes,
                 meta: Optional[dict] = None, deliver_at: int = 0, seq: int = 0, sent_at: int = 0):
        self.kind = kind
        self.src = src
        self.dst = dst
        self.tag = tag
        self.payload = payload
        self.meta = meta or {}
        self.deliver_at = deliver_at
        self.seq = seq
        self.sent_at = sent_at

    def order_key(self) -> tuple[int, int]:
        return (self.deliver_at, self.seq)

    def __lt__(self, other: "_Message") -> bool:
        return self.order_key() < other.order_key()


class _Fiber:
    """One cooperative worker; greenlet-backed when possible, else a thread."""

    def __init__(self, fn: Callable[[], None]):
        self._fn = fn
        if _greenlet is not None:
            self._gl = _greenlet.greenlet(fn)
            self._thread = None
        else:
            import threading

            self._gl = None
            self._go = threading.Event()
            self._back = threading.Event()
            self._dead = False

            def runner() -> None:
                self._go.wait()
                try:
                    fn()
                finally:
                    self._dead = True
                    self._back.set()

            self._thread = threading.Thread(target=runner, daemon=True)
            self._thread.start()
            self._pending_exc: Optional[BaseException] = None

    @property
    def dead(self) -> bool:
        if self._gl is not None:
            return self._gl.dead
        return self._dead

    def resume(self, exc: Optional[BaseException] = None) -> None:
        """Run the fiber until it yields back; optionally inject an exception."""
        if self._gl is not None:
            if exc is not None:
                self._gl.throw(exc)
            else:
                self._gl.switch()
        else:
            self._pending_exc = exc
            self._back.clear()
            self._go.set()
            self._back.wait()

    def yield_to_scheduler(self) -> None:
        if self._gl is not None:
            self._gl.parent.switch()
        else:
            self._go.clear()
            self._back.set()
            self._go.wait()
            if self._pending_exc is not None:
                exc, self._pending_exc = self._pending_exc, None
                raise exc


class Rank:
    """Per-rank communication API handed to rank programs.

    All methods run on the rank's own worker; blocking calls cooperatively
    hand control to the world scheduler until their condition holds.
    """

    def __init__(self, world: "World", rank: int):
        self.world = world
        self.rank = rank
        self._rt = world._runtimes[rank]

    @property
    def n_ranks(self) -> int:
        return self.world.config.n_ranks

    @property
    def now(self) -> int:
        return self._rt.clock

    def advance(self, ns: int) -> None:
        """Consume local compute time."""
        if ns < 0:
            raise ValueError("cannot advance time backwards")
        self._rt.clock += ns
        self._rt.apply_ready()

    # -- two-sided messaging ------------------------------------------------

    def isend(self, dst: int, tag: int, payload: bytes | bytearray | memoryview) -> RequestHandle:
        self.world._check_rank(dst)
        rt = self._rt
        rt.charge_op()
        data = bytes(payload)
        self.world._post_message("msg", self.rank, dst, tag, data,
                                 {"vc": self.world.vc_snapshot(self.rank)})
        handle = RequestHandle("send", self.rank, src=self.rank, tag=tag)
        handle._finish(None, rt.clock)  # transport accepts (snapshots) at issue
        self.world.log.add(rt.clock, self.rank, "send", dst, len(data))
        return handle

    def irecv(self, src: int, tag: int) -> RequestHandle:
        rt = self._rt
        rt.charge_op()
        handle = RequestHandle("recv", self.rank, src=src, tag=tag)
        rt.apply_ready()
        parked = rt.take_parked(src, tag)
        if parked is not None:
            rt.complete_recv(handle, parked)
        else:
            rt.post_recv(handle)
        return handle

    def _consume(self, handle: RequestHandle) -> None:
        rt = self._rt
        handle.consumed = True
        if handle.completion_time > rt.clock:
            rt.clock = handle.completion_time
        if handle._vc is not None:
            self.world.vc_join(self.rank, handle._vc)

    def wait(self, handle: RequestHandle) -> Status:
        if handle.consumed:
            raise RequestError("wait on a consumed request handle")
        if handle.rank != self.rank:
            raise RequestError(f"handle belongs to rank {handle.rank}, not {self.rank}")
        rt = self._rt
        rt.block_until(lambda: handle.complete, f"wait({handle.kind}, src={handle.src}, tag={handle.tag})")
        self._consume(handle)
        payload = handle._payload or b""
        return Status(handle.src, handle.tag, len(payload), payload)

    def wait_all(self, handles: Sequence[RequestHandle]) -> list[Status]:
        return [self.wait(h) for h in handles]

    def test(self, handle: RequestHandle) -> bool:
        rt = self._rt
        rt.charge_op()
        rt.apply_ready()
        rt.fiber.yield_to_scheduler()
        self.world._check_abort()
        return handle.complete

    def test_any(self, handles: Sequence[RequestHandle]) -> Optional[int]:
        """Return the index of some completed, unconsumed handle, else None."""
        rt = self._rt
        rt.charge_op()
        rt.apply_ready()
        for i, h in enumerate(handles):
            if h.complete and not h.consumed:
                self._consume(h)
                return i
        rt.fiber.yield_to_scheduler()
        self.world._check_abort()
        return None

    def wait_any(self, handles: Sequence[RequestHandle]) -> int:
        """Block until some handle completes; consume and return its index."""
        live = [h for h in handles if not h.consumed]
        if not live:
            raise RequestError("wait_any with no unconsumed handles")
        rt = self._rt
        rt.block_until(lambda: any(h.complete for h in live), "wait_any")
        for i, h in enumerate(handles):
            if h.complete and not h.consumed:
                self._consume(h)
                return i
        raise AssertionError("unreachable")

    # -- collectives ---------------------------------------------------------

    def ibarrier(self, group: Iterable[int]) -> RequestHandle:
        members = self.world._group(group)
        if self.rank not in members:
            raise ValueError(f"rank {self.rank} not in barrier group {members}")
        rt = self._rt
        rt.charge_op()
        instance = rt.next_barrier_instance(members)
        handle = RequestHandle("ibarrier", self.rank)
        self.world.log.add(rt.clock, self.rank, "barrier_enter", members[0], 0)
        self.world._barrier_enter(members, instance, self.rank, rt.clock, handle)
        return handle

    def barrier(self, group: Iterable[int]) -> None:
        self.finish_barrier(self.ibarrier(group))

    def finish_barrier(self, handle: RequestHandle) -> None:
        """Block on and consume an ibarrier handle, logging the exit."""
        rt = self._rt
        rt.block_until(lambda: handle.complete, "ibarrier wait")
        self._consume(handle)
        self.world.log.add(rt.clock, self.rank, "barrier_exit", -1, 0)


class _RankRuntime:
    """Scheduler-facing state of one rank."""

    def __init__(self, world: "World", rank: int):
        self.world = world
        self.rank = rank
        self.clock = 0
        self.state = "ready"  # ready | blocked | done | failed
        self.blocked_reason = ""
        self.woken = False
        self.pending: list[_Message] = []  # heap by (deliver_at, seq)
        self.parked: dict[tuple[int, int], list[_Message]] = {}
        self.recvs: dict[tuple[int, int], list[RequestHandle]] = {}
        self.any_recvs: dict[int, list[RequestHandle]] = {}
        self.result: Any = None
        self.error: Optional[BaseException] = None
        self.fiber: _Fiber = None  # type: ignore[assignment]
        seed = world.config.seed
        self.rng = random.Random(seed * 1_000_003 + rank * 2 + 1)
        self._chan_last: dict[tuple[int, int], int] = {}
        self._barrier_counts: dict[tuple[int, ...], int] = {}

    # -- clock & issue helpers ----------------------------------------------

    def charge_op(self) -> None:
        self.clock += OP_COST_NS

    def delivery_time(self, dst: int, tag: int, nbytes: int) -> int:
        cfg = self.world.config
        lat = cfg.latency
        raw = lat.base_ns + lat.per_byte_ns * nbytes
        if lat.jitter_fraction > 0.0:
            raw *= 1.0 + self.rng.uniform(-lat.jitter_fraction, lat.jitter_fraction)
        if cfg.schedule is Schedule.RANDOM:
            raw += self.rng.uniform(0.0, 2.0) * lat.base_ns
        elif cfg.schedule is Schedule.ADVERSARIAL:
            raw += self.rng.uniform(0.0, float(cfg.deadlock_timeout)) * lat.base_ns
        t = self.clock + max(1, int(raw))
        key = (dst, tag)
        floor = self._chan_last.get(key, -1) + 1
        if t < floor:
            t = floor  # per-(src,dst,tag) FIFO
        self._chan_last[key] = t
        return t

    def next_barrier_instance(self, members: tuple[int, ...]) -> int:
        n = self._barrier_counts.get(members, 0)
        self._barrier_counts[members] = n + 1
        return n

    # -- delivery ------------------------------------------------------------

    def enqueue(self, msg: _Message) -> None:
        heapq.heappush(self.pending, msg)
        self.woken = True

    def apply_ready(self) -> None:
        while self.pending and self.pending[0].deliver_at <= self.clock:
            self._apply(heapq.heappop(self.pending))

    def apply_next(self) -> None:
        self._apply(heapq.heappop(self.pending))

    def _apply(self, msg: _Message) -> None:
        if msg.deliver_at > self.clock:
            self.clock = msg.deliver_at
        self.world.log.add(self.clock, self.rank, "deliver_" + msg.kind, msg.src, len(msg.payload))
        if msg.kind == "msg":
            self._apply_user_message(msg)
        else:
            self.world._handlers[msg.kind](self.world, self, msg)

    def _apply_user_message(self, msg: _Message) -> None:
        key = (msg.src, msg.tag)
        queue = self.recvs.get(key)
        if queue:
            handle = queue.pop(0)
            self.complete_recv(handle, msg)
            return
        anyq = self.any_recvs.get(msg.tag)
        if anyq:
            handle = anyq.pop(0)
            self.complete_recv(handle, msg)
            return
        self.parked.setdefault(key, []).append(msg)

    def complete_recv(self, handle: RequestHandle, msg: _Message) -> None:
        handle._vc = msg.meta.get("vc")
        handle._finish(msg.payload, max(self.clock, msg.deliver_at), src=msg.src)
        self.world.log.add(max(self.clock, msg.deliver_at), self.rank, "recv_complete", msg.src, len(msg.payload))

    def take_parked(self, src: int, tag: int) -> Optional[_Message]:
        if src == ANY_SOURCE:
            best_key = None
            for (s, t), msgs in self.parked.items():
                if t == tag and msgs:
                    if best_key is None or msgs[0].order_key() < self.parked[best_key][0].order_key():
                        best_key = (s, t)
            if best_key is None:
                return None
            msgs = self.parked[best_key]
        else:
            msgs = self.parked.get((src, tag))
            if not msgs:
                return None
        msg = msgs.pop(0)
        return msg

    def post_recv(self, handle: RequestHandle) -> None:
        if handle.src == ANY_SOURCE:
            self.any_recvs.setdefault(handle.tag, []).append(handle)
        else:
            self.recvs.setdefault((handle.src, handle.tag), []).append(handle)

    # -- blocking -------------------------------------------------------------

    def block_until(self, pred: Callable[[], bool], reason: str) -> None:
        while True:
            if pred():
                return
            if self.pending:
                self.apply_next()
                continue
            self.state = "blocked"
            self.blocked_reason = reason
            self.woken = False
            self.fiber.yield_to_scheduler()
            self.world._check_abort()
            self.state = "ready"


class WorldResult:
    def __init__(self, results: list[Any], log: EventLog, world: "World"):
        self.results = results
        self.log = log
        self.world = world


class World:
    """Owns the ranks, the network, and the deterministic scheduler."""

    def __init__(self, config: TransportConfig):
        config.validate()
        self.config = config
        self.log = EventLog()
        self.shared: dict[str, Any] = {}  # cross-layer registries (RMA engine, etc.)
        self.vcs = [[0] * config.n_ranks for _ in range(config.n_ranks)]
        self.sync_msgs = 0   # zero-payload (control/notification) messages
        self.data_bytes = 0  # payload bytes carried by non-empty messages
        self._runtimes = [_RankRuntime(self, r) for r in range(config.n_ranks)]
        self._msg_seq = 0
        self._sched_rng = random.Random(config.seed * 1_000_003 + 999_331)
        self._handlers: dict[str, Callable[["World", _RankRuntime, _Message], None]] = {}
        self._barriers: dict[tuple[tuple[int, ...], int], dict[str, Any]] = {}
        self._aborting = False
        self._rr_next = 0

    # -- registration used by upper layers ------------------------------------

    def register_handler(self, kind: str, fn: Callable[["World", _RankRuntime, _Message], None]) -> None:
        self._handlers[kind] = fn

    def wake(self, rank: int) -> None:
        self._runtimes[rank].woken = True

    # -- happens-before bookkeeping (consumed by the consistency ledger) -------

    def vc_snapshot(self, rank: int) -> list[int]:
        vc = self.vcs[rank]
        vc[rank] += 1
        return vc.copy()

    def vc_join(self, rank: int, other: list[int]) -> None:
        vc = self.vcs[rank]
        for i, v in enumerate(other):
            if v > vc[i]:
                vc[i] = v
        vc[rank] += 1

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.config.n_ranks:
            raise ValueError(f"rank {rank} out of range [0, {self.config.n_ranks})")

    def _check_abort(self) -> None:
        if self._aborting:
            raise _WorldAbort()

    def _group(self, group: Iterable[int]) -> tuple[int, ...]:
        members = tuple(sorted(set(group)))
        for g in members:
            self._check_rank(g)
        if not members:
            raise ValueError("empty group")
        return members

    # -- network ---------------------------------------------------------------

    def _post_message(self, kind: str, src: int, dst: int, tag: int, payload: bytes,
                      meta: Optional[dict] = None) -> _Message:
        rt = self._runtimes[src]
        deliver = rt.delivery_time(dst, tag, len(payload))
        self._msg_seq += 1
        if payload:
            self.data_bytes += len(payload)
        else:
            self.sync_msgs += 1
        msg = _Message(kind, src, dst, tag, payload, meta, deliver, self._msg_seq, rt.clock)
        self._runtimes[dst].enqueue(msg)
        return msg

    # -- barrier via a coordinator --------------------------------------------

    def _barrier_enter(self, members: tuple[int, ...], instance: int, rank: int,
                       entry_clock: int, handle: RequestHandle) -> None:
        coord = members[0]
        key = (members, instance)
        st = self._barriers.setdefault(key, {"entered": 0, "handles": {}, "vc": None})
        st["handles"][rank] = handle
        entry_vc = self.vc_snapshot(rank)
        if rank == coord:
            self._barrier_join(st, entry_vc)
            self._barrier_account(key)
        else:
            self._post_message("barrier_enter", rank, coord, -2, b"", {"key": key, "vc": entry_vc})

    @staticmethod
    def _barrier_join(st: dict, vc: list[int]) -> None:
        if st["vc"] is None:
            st["vc"] = vc.copy()
        else:
            st["vc"] = [max(a, b) for a, b in zip(st["vc"], vc)]

    def _barrier_account(self, key: tuple) -> None:
        # Runs on the coordinator (its own entry, or while applying a remote
        # entry), so the coordinator clock is already >= every entry time seen.
        members = key[0]
        st = self._barriers[key]
        st["entered"] += 1
        if st["entered"] == len(members):
            coord = members[0]
            crt = self._runtimes[coord]
            for m in members:
                if m == coord:
                    st["handles"][m]._vc = st["vc"]
                    st["handles"][m]._finish(None, crt.clock)
                    self.wake(m)
                else:
                    self._post_message("barrier_release", coord, m, -2, b"",
                                       {"key": key, "vc": st["vc"]})

    # -- run --------------------------------------------------------------------

    def run(self, program: Callable[[Rank], Any]) -> WorldResult:
        self.register_handler("barrier_enter", _handle_barrier_enter)
        self.register_handler("barrier_release", _handle_barrier_release)

        def make_body(rank: int) -> Callable[[], None]:
            def body() -> None:
                rt = self._runtimes[rank]
                try:
                    rt.result = program(Rank(self, rank))
                    rt.state = "done"
                except _WorldAbort:
                    rt.state = "done"
                except BaseException as exc:  # noqa: BLE001 - rank panic propagates
                    rt.error = exc
                    rt.state = "failed"
            return body

        for rt in self._runtimes:
            rt.fiber = _Fiber(make_body(rt.rank))

        n = self.config.n_ranks
        use_rng = self.config.schedule in (Schedule.RANDOM, Schedule.ADVERSARIAL)
        while True:
            candidates = []
            alive = 0
            for rt in self._runtimes:
                if rt.state in ("done", "failed"):
                    continue
                alive += 1
                if rt.state == "ready" or rt.woken or rt.pending:
                    candidates.append(rt)
            if alive == 0:
                break
            if not candidates:
                # finished ranks still service engine traffic (lock requests,
                # releases) the way a real library progresses until finalize
                progressed = False
                for rt in self._runtimes:
                    if rt.state == "done" and rt.pending:
                        while rt.pending:
                            rt.apply_next()
                        progressed = True
                if progressed:
                    continue
                blocked = {rt.rank: rt.blocked_reason for rt in self._runtimes if rt.state == "blocked"}
                self._abort()
                raise DeadlockError(blocked)
            if use_rng:
                pick = candidates[self._sched_rng.randrange(len(candidates))]
            else:
                pick = None
                for off in range(n):
                    rt = self._runtimes[(self._rr_next + off) % n]
                    if rt in candidates:
                        pick = rt
                        self._rr_next = (rt.rank + 1) % n
                        break
                assert pick is not None
            pick.woken = False
            pick.fiber.resume()
            if pick.state == "failed":
                failed = pick
                self._abort()
                raise RankPanic(failed.rank, failed.error)

        return WorldResult([rt.result for rt in self._runtimes], self.log, self)

    def _abort(self) -> None:
        self._aborting = True
        for rt in self._runtimes:
            if rt.state == "blocked" and not rt.fiber.dead:
                try:
                    rt.fiber.resume(_WorldAbort())
                except _WorldAbort:
                    pass
                rt.state = "done"


def _handle_barrier_enter(world: World, rt: _RankRuntime, msg: _Message) -> None:
    key = msg.meta["key"]
    st = world._barriers.setdefault(key, {"entered": 0, "handles": {}, "vc": None})
    world._barrier_join(st, msg.meta["vc"])
    world._barrier_account(key)


def _handle_barrier_release(world: World, rt: _RankRuntime, msg: _Message) -> None:
    key = msg.meta["key"]
    handle = world._barriers[key]["handles"][rt.rank]
    handle._vc = msg.meta["vc"]
    handle._finish(None, max(rt.clock, msg.deliver_at))
    rt.woken = True


def spawn_world(config: TransportConfig, program: Callable[[Rank], Any]) -> WorldResult:
    """Run ``program`` once per rank to completion over a fresh world.

    Raises DeadlockError when every rank is blocked with nothing in flight,
    and RankPanic when a rank program raises.
    """
    return World(config).run(program)
