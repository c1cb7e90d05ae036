"""Single-process discrete-event model of an RDMA fabric.

Endpoints own a flat, bounds-checked byte array. Memory must be registered
before RDMA can touch it; registration hands out an ``lkey``/``rkey`` pair and
the remote side must present the ``rkey``. RDMA write and read are one-sided:
only the initiator gets a completion, the target's software is never involved.

Time model
----------
Every endpoint has its own CPU clock (``Endpoint.clock``). Local work such as
buffer copies, WR posting and memory registration advances that clock. The
fabric keeps a global event clock (``Fabric.now``) which only moves when
:meth:`Fabric.progress` delivers the next scheduled event.

A work request posted at CPU time ``t`` enters the link of its data direction
at ``max(t, link_free)``, occupies the link for ``bytes / net_byte_rate`` and
lands ``op_overhead`` later (plus ``read_extra_overhead`` for reads). The fixed
overhead is latency: several outstanding requests overlap it, only the byte
occupancy serializes. When an endpoint notices an inbound effect it pulls its
clock forward to the delivery time (:meth:`Endpoint.observe`).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum
from itertools import count
from typing import Callable, Iterable, Optional

from .config import as_bool, as_number, load_kv
from .errors import (
    ConfigError,
    FabricConnectionError,
    FabricError,
    RegistrationError,
    WorkRequestError,
)

PAGE_SIZE = 4096
TORN_TAIL_BYTES = 8

RAW_LATENCY_US = 5.9
DEFAULT_NET_RATE = 870.0
DEFAULT_COPY_RATE = 800.0
DEFAULT_POST_OVERHEAD = 0.3
# a 1-byte write ping-pong then costs exactly RAW_LATENCY_US per half round trip
DEFAULT_OP_OVERHEAD = RAW_LATENCY_US - DEFAULT_POST_OVERHEAD - 1.0 / DEFAULT_NET_RATE

DEFAULT_MEMORY_SIZE = 16 << 20

MODEL_KEYS = {
    "op_overhead_us": "op_overhead",
    "net_bytes_per_us": "net_byte_rate",
    "copy_bytes_per_us": "copy_byte_rate",
    "reg_base_us": "reg_base",
    "reg_per_page_us": "reg_per_page",
    "read_extra_us": "read_extra_overhead",
    "post_overhead_us": "post_overhead",
}


@dataclass(frozen=True)
class CostModel:
    """Cost parameters, times in microseconds and rates in bytes/µs.

    ``op_overhead`` is the fixed initiation-to-completion latency of one work
    request. ``post_overhead`` is the host CPU time the initiator spends
    posting it.
    """

    op_overhead: float = DEFAULT_OP_OVERHEAD
    net_byte_rate: float = DEFAULT_NET_RATE
    copy_byte_rate: float = DEFAULT_COPY_RATE
    reg_base: float = 10.0
    reg_per_page: float = 0.25
    read_extra_overhead: float = 1.5
    post_overhead: float = DEFAULT_POST_OVERHEAD

    def __post_init__(self):
        for name in ("net_byte_rate", "copy_byte_rate"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        for name in ("op_overhead", "reg_base", "reg_per_page",
                     "read_extra_overhead", "post_overhead"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be >= 0, got {v!r}")

    def write_time(self, nbytes: int) -> float:
        return self.op_overhead + nbytes / self.net_byte_rate

    def read_time(self, nbytes: int) -> float:
        return self.op_overhead + self.read_extra_overhead + nbytes / self.net_byte_rate

    def registration_time(self, length: int) -> float:
        return self.reg_base + self.reg_per_page * math.ceil(length / PAGE_SIZE)

    def raw_half_round_trip(self, nbytes: int = 1) -> float:
        return self.post_overhead + self.write_time(nbytes)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> tuple["CostModel", bool]:
        """Build a model from model-file keys; returns ``(model, torn_delivery)``.

        Unknown keys are ignored so one file can also carry ring and bench keys.
        """
        kwargs = {}
        for key, attr in MODEL_KEYS.items():
            if key in values:
                kwargs[attr] = as_number(values[key], key)
        torn = as_bool(values["torn_delivery"], "torn_delivery") if "torn_delivery" in values else False
        return cls(**kwargs), torn

    @classmethod
    def load(cls, path) -> tuple["CostModel", bool]:
        return cls.from_mapping(load_kv(path))


class Opcode(str, Enum):
    WRITE = "write"
    READ = "read"


class Status(str, Enum):
    OK = "ok"
    PROTECTION_ERROR = "protection_error"
    BOUNDS_ERROR = "bounds_error"


@dataclass(frozen=True)
class MemoryRegion:
    region_id: int
    base: int
    length: int
    lkey: int
    rkey: int
    endpoint_id: int

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass(frozen=True)
class WorkRequest:
    """An RDMA descriptor.

    ``segments`` are ``(region_id, offset, length)`` triples in the
    initiator's memory: the gather list for a write, the scatter list for a
    read. The remote side is one contiguous range.
    """

    wr_id: int
    kind: Opcode
    segments: tuple[tuple[int, int, int], ...]
    remote_addr: int
    rkey: int
    remote_length: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Opcode(self.kind))
        object.__setattr__(self, "segments", tuple(tuple(s) for s in self.segments))
        total = sum(s[2] for s in self.segments)
        if self.remote_length is None:
            object.__setattr__(self, "remote_length", total)
        elif self.remote_length != total:
            raise WorkRequestError(
                f"wr {self.wr_id}: segment lengths sum to {total}, remote_length is {self.remote_length}")
        if not 0 <= self.wr_id < 1 << 64:
            raise WorkRequestError(f"wr_id out of 64-bit range: {self.wr_id}")


@dataclass(frozen=True)
class Completion:
    wr_id: int
    status: Status
    timestamp: float
    kind: Opcode
    byte_len: int

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


COUNTER_FIELDS = ("rdma_writes", "rdma_reads", "registrations", "deregistrations",
                  "payload_bytes_copied", "wire_bytes", "sim_clock_us")


@dataclass(frozen=True)
class CounterSnapshot:
    rdma_writes: int = 0
    rdma_reads: int = 0
    registrations: int = 0
    deregistrations: int = 0
    payload_bytes_copied: int = 0
    wire_bytes: int = 0
    sim_clock_us: float = 0.0

    def __sub__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(*(getattr(self, f) - getattr(other, f) for f in COUNTER_FIELDS))

    def __add__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(*(getattr(self, f) + getattr(other, f) for f in COUNTER_FIELDS))

    @staticmethod
    def csv_header() -> str:
        return ",".join(COUNTER_FIELDS)

    def csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, f)) for f in COUNTER_FIELDS)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


@dataclass
class _Counters:
    rdma_writes: int = 0
    rdma_reads: int = 0
    registrations: int = 0
    deregistrations: int = 0
    payload_bytes_copied: int = 0
    wire_bytes: int = 0


@dataclass
class _Link:
    free_at: float = 0.0


@dataclass
class _Pending:
    """Bookkeeping for one posted work request."""

    ep: "Endpoint"
    conn: "Connection"
    wr: WorkRequest
    done_at: float
    data: bytes = b""
    status: Optional[Status] = None
    regions: tuple[int, ...] = ()


class Fabric:
    def __init__(self, model: CostModel | None = None, torn_delivery: bool = False,
                 record_events: bool = False):
        self.model = model if model is not None else CostModel()
        if not isinstance(self.model, CostModel):
            raise ConfigError("model must be a CostModel")
        self.torn_delivery = bool(torn_delivery)
        self.now = 0.0
        self.record_events = record_events
        self.events: list[tuple[float, int, str, object]] = []
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = count()
        self._key_seq = count(1)
        self._region_seq = count(1)
        self._ep_seq = count()
        self.endpoints: list[Endpoint] = []
        self._connections: dict[frozenset, Connection] = {}

    def endpoint(self, memory_size: int = DEFAULT_MEMORY_SIZE) -> "Endpoint":
        ep = Endpoint(self, next(self._ep_seq), memory_size)
        self.endpoints.append(ep)
        return ep

    def connect(self, a: "Endpoint", b: "Endpoint") -> "Connection":
        if a.fabric is not self or b.fabric is not self:
            raise FabricConnectionError("endpoints belong to a different fabric")
        if a is b:
            raise FabricConnectionError("cannot connect an endpoint to itself")
        key = frozenset((a.id, b.id))
        if key in self._connections:
            raise FabricConnectionError(f"endpoints {a.id} and {b.id} are already connected")
        conn = Connection(a, b)
        self._connections[key] = conn
        return conn

    def pending(self) -> int:
        return len(self._queue)

    def progress(self) -> int:
        """Deliver every event due at the next timestamp; 0 when idle."""
        if not self._queue:
            return 0
        t = self._queue[0][0]
        self.now = max(self.now, t)
        n = 0
        while self._queue and self._queue[0][0] == t:
            _, _, action = heapq.heappop(self._queue)
            action()
            n += 1
        return n

    def run_until_idle(self, limit: int = 10_000_000) -> int:
        total = 0
        while self._queue:
            total += self.progress()
            if total > limit:
                raise FabricError("event limit exceeded")
        return total

    def _schedule(self, t: float, action: Callable[[], None]) -> None:
        if t < self.now:
            raise FabricError(f"event scheduled in the past ({t} < {self.now})")
        heapq.heappush(self._queue, (t, next(self._seq), action))

    def _log(self, t: float, ep_id: int, kind: str, detail=None) -> None:
        if self.record_events:
            self.events.append((t, ep_id, kind, detail))

    def next_key(self) -> int:
        return next(self._key_seq) & 0xFFFFFFFF


def create_fabric(model: CostModel | None = None, torn_delivery: bool = False,
                  record_events: bool = False) -> Fabric:
    return Fabric(model, torn_delivery, record_events)


class Connection:
    """Reliable connection between two endpoints (one link per direction)."""

    def __init__(self, a: "Endpoint", b: "Endpoint"):
        self.a = a
        self.b = b
        self._links = {a.id: _Link(), b.id: _Link()}  # keyed by sending endpoint
        self._last_done = {a.id: 0.0, b.id: 0.0}  # keyed by initiator

    def peer(self, ep: "Endpoint") -> "Endpoint":
        if ep is self.a:
            return self.b
        if ep is self.b:
            return self.a
        raise FabricConnectionError(f"endpoint {ep.id} is not part of this connection")

    def __repr__(self):
        return f"Connection({self.a.id}<->{self.b.id})"


class Endpoint:
    def __init__(self, fabric: Fabric, ep_id: int, memory_size: int):
        if memory_size <= 0:
            raise ConfigError("memory_size must be positive")
        self.fabric = fabric
        self.id = ep_id
        self.memory = bytearray(memory_size)
        self.clock = 0.0
        self.regions: dict[int, MemoryRegion] = {}
        self._by_rkey: dict[int, MemoryRegion] = {}
        self._inflight: dict[int, int] = {}
        self._region_touched: dict[int, float] = {}
        self.cq: list[Completion] = []
        self._c = _Counters()
        self._wr_seq = count(1)
        self._brk = 0

    # -- local memory -----------------------------------------------------

    @property
    def memory_size(self) -> int:
        return len(self.memory)

    def alloc(self, nbytes: int, align: int = 64) -> int:
        """Bump-allocate ``nbytes`` of endpoint memory and return its address."""
        if nbytes <= 0:
            raise FabricError("allocation size must be positive")
        base = -(-self._brk // align) * align
        if base + nbytes > len(self.memory):
            raise FabricError(f"endpoint {self.id}: out of memory ({nbytes} bytes requested)")
        self._brk = base + nbytes
        return base

    def _check_range(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > len(self.memory):
            raise FabricError(f"endpoint {self.id}: range [{addr}, {addr + length}) out of bounds")

    def read(self, addr: int, length: int) -> bytes:
        self._check_range(addr, length)
        return bytes(self.memory[addr:addr + length])

    def write(self, addr: int, data) -> None:
        self._check_range(addr, len(data))
        self.memory[addr:addr + len(data)] = data

    def copy_local(self, dst: int, src: int, length: int, note=None) -> None:
        """CPU memcpy within this endpoint, charged as a payload copy."""
        self._check_range(src, length)
        self._check_range(dst, length)
        self.memory[dst:dst + length] = self.memory[src:src + length]
        self.charge_copy(length, note)

    def charge_copy(self, nbytes: int, note=None) -> None:
        self._c.payload_bytes_copied += nbytes
        self.clock += nbytes / self.fabric.model.copy_byte_rate
        self.fabric._log(self.clock, self.id, "copy_done", note)

    # -- clock ------------------------------------------------------------

    def sync(self, t: float) -> None:
        if t > self.clock:
            self.clock = t

    def observe(self, region: MemoryRegion) -> None:
        """Advance the CPU clock to the last inbound delivery into ``region``."""
        self.sync(self._region_touched.get(region.region_id, 0.0))

    def _post_time(self) -> float:
        self.clock = max(self.clock, self.fabric.now) + self.fabric.model.post_overhead
        return self.clock

    # -- registration -----------------------------------------------------

    def register(self, base: int, length: int) -> MemoryRegion:
        if length <= 0:
            raise RegistrationError("registration length must be > 0")
        if base < 0 or base + length > len(self.memory):
            raise RegistrationError(
                f"endpoint {self.id}: [{base}, {base + length}) outside memory of {len(self.memory)} bytes")
        fab = self.fabric
        region = MemoryRegion(next(fab._region_seq), base, length,
                              lkey=fab.next_key(), rkey=fab.next_key(), endpoint_id=self.id)
        self.regions[region.region_id] = region
        self._by_rkey[region.rkey] = region
        self._inflight[region.region_id] = 0
        self._c.registrations += 1
        self.clock += fab.model.registration_time(length)
        fab._log(self.clock, self.id, "register", (region.region_id, base, length))
        return region

    def deregister(self, region: MemoryRegion) -> None:
        live = self.regions.get(region.region_id)
        if live is None or live != region:
            raise RegistrationError(f"endpoint {self.id}: region {region.region_id} is not registered")
        if self._inflight[region.region_id]:
            raise RegistrationError(
                f"endpoint {self.id}: region {region.region_id} is referenced by in-flight work requests")
        del self.regions[region.region_id]
        del self._by_rkey[region.rkey]
        del self._inflight[region.region_id]
        self._region_touched.pop(region.region_id, None)
        self._c.deregistrations += 1
        self.fabric._log(self.clock, self.id, "deregister", region.region_id)

    def is_live(self, region: MemoryRegion) -> bool:
        return self.regions.get(region.region_id) == region

    # -- work requests ----------------------------------------------------

    def next_wr_id(self) -> int:
        return next(self._wr_seq)

    def _check_local(self, wr: WorkRequest) -> list[tuple[int, int]]:
        spans = []
        for region_id, offset, length in wr.segments:
            region = self.regions.get(region_id)
            if region is None:
                raise WorkRequestError(f"wr {wr.wr_id}: local region {region_id} not registered")
            if offset < 0 or length < 0 or offset + length > region.length:
                raise WorkRequestError(f"wr {wr.wr_id}: segment outside region {region_id}")
            spans.append((region.base + offset, length))
        return spans

    def _resolve_remote(self, target: "Endpoint", wr: WorkRequest) -> Status:
        region = target._by_rkey.get(wr.rkey)
        if region is None:
            return Status.PROTECTION_ERROR
        if wr.remote_addr < region.base or wr.remote_addr + wr.remote_length > region.end:
            return Status.BOUNDS_ERROR
        return Status.OK

    def _pin(self, wr: WorkRequest) -> tuple[int, ...]:
        ids = tuple(s[0] for s in wr.segments)
        for rid in ids:
            self._inflight[rid] += 1
        return ids

    def _unpin(self, ids: Iterable[int]) -> None:
        for rid in ids:
            if rid in self._inflight:
                self._inflight[rid] -= 1

    def post_rdma_write(self, conn: Connection, wr: WorkRequest) -> int:
        if wr.kind is not Opcode.WRITE:
            raise WorkRequestError("post_rdma_write needs a write work request")
        target = conn.peer(self)
        spans = self._check_local(wr)
        data = b"".join(self.memory[a:a + n] for a, n in spans)
        fab, model = self.fabric, self.fabric.model
        n = wr.remote_length
        t_post = self._post_time()
        link = conn._links[self.id]
        start = max(t_post, link.free_at)
        link.free_at = start + n / model.net_byte_rate
        done = max(start + model.write_time(n), conn._last_done[self.id])
        conn._last_done[self.id] = done
        p = _Pending(self, conn, wr, done, data, regions=self._pin(wr))
        self._c.rdma_writes += 1
        fab._log(t_post, self.id, "post_write", (wr.wr_id, n))
        if fab.torn_delivery and n > TORN_TAIL_BYTES:
            first = max(done - TORN_TAIL_BYTES / model.net_byte_rate, fab.now)
            fab._schedule(first, lambda: self._deliver_write(p, target, 0, n - TORN_TAIL_BYTES))
            fab._schedule(done, lambda: self._deliver_write(p, target, n - TORN_TAIL_BYTES, n, final=True))
        else:
            fab._schedule(done, lambda: self._deliver_write(p, target, 0, n, final=True))
        return wr.wr_id

    def _deliver_write(self, p: _Pending, target: "Endpoint", lo: int, hi: int,
                       final: bool = False) -> None:
        if p.status is None:
            p.status = self._resolve_remote(target, p.wr)
        if p.status is Status.OK and hi > lo:
            addr = p.wr.remote_addr + lo
            target.memory[addr:addr + hi - lo] = p.data[lo:hi]
            t = self.fabric.now
            region = target._by_rkey.get(p.wr.rkey)
            if region is not None:
                target._region_touched[region.region_id] = t
            self.fabric._log(t, target.id, "delivered", (p.wr.wr_id, lo, hi))
        if final:
            self._complete(p)

    def post_rdma_read(self, conn: Connection, wr: WorkRequest) -> int:
        if wr.kind is not Opcode.READ:
            raise WorkRequestError("post_rdma_read needs a read work request")
        target = conn.peer(self)
        self._check_local(wr)
        fab, model = self.fabric, self.fabric.model
        n = wr.remote_length
        t_post = self._post_time()
        link = conn._links[target.id]  # payload flows target -> initiator
        start = max(t_post, link.free_at)
        link.free_at = start + n / model.net_byte_rate
        done = max(start + model.read_time(n), conn._last_done[self.id])
        conn._last_done[self.id] = done
        p = _Pending(self, conn, wr, done, regions=self._pin(wr))
        self._c.rdma_reads += 1
        fab._log(t_post, self.id, "post_read", (wr.wr_id, n))
        fab._schedule(done, lambda: self._deliver_read(p, target))
        return wr.wr_id

    def _deliver_read(self, p: _Pending, target: "Endpoint") -> None:
        p.status = self._resolve_remote(target, p.wr)
        if p.status is Status.OK:
            a = p.wr.remote_addr
            data = target.memory[a:a + p.wr.remote_length]
            pos = 0
            for region_id, offset, length in p.wr.segments:
                dst = self.regions[region_id].base + offset
                self.memory[dst:dst + length] = data[pos:pos + length]
                pos += length
        self._complete(p)

    def _complete(self, p: _Pending) -> None:
        self._unpin(p.regions)
        if p.status is Status.OK:
            self._c.wire_bytes += p.wr.remote_length
        self.cq.append(Completion(p.wr.wr_id, p.status, p.done_at, p.wr.kind, p.wr.remote_length))
        self.fabric._log(p.done_at, self.id, "complete", (p.wr.wr_id, p.status.value))

    def poll_cq(self, max_entries: int = 16) -> list[Completion]:
        if max_entries < 1:
            raise FabricError("poll_cq needs max_entries >= 1")
        out = self.cq[:max_entries]
        del self.cq[:max_entries]
        if out:
            self.sync(out[-1].timestamp)
        return out

    def counters(self) -> CounterSnapshot:
        c = self._c
        return CounterSnapshot(c.rdma_writes, c.rdma_reads, c.registrations, c.deregistrations,
                               c.payload_bytes_copied, c.wire_bytes, self.clock)

    def __repr__(self):
        return f"Endpoint({self.id})"


def write_wr(wr_id: int, region: MemoryRegion, offset: int, length: int,
             remote_addr: int, rkey: int) -> WorkRequest:
    """Single-segment write descriptor."""
    return WorkRequest(wr_id, Opcode.WRITE, ((region.region_id, offset, length),), remote_addr, rkey)


def read_wr(wr_id: int, region: MemoryRegion, offset: int, length: int,
            remote_addr: int, rkey: int) -> WorkRequest:
    return WorkRequest(wr_id, Opcode.READ, ((region.region_id, offset, length),), remote_addr, rkey)
