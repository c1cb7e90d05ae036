"""Nonblocking put/get byte pipe over a :class:`~rdma_channel.ring.Ring` pair.

``put`` writes a prefix of the concatenated buffer list and returns its
length; ``get`` fills a prefix of its buffer list with the next bytes of the
pipe. Neither call ever waits: a short count means "retry later with the
rest", and the caller drives the fabric in between.

Variants
--------
``basic``      copy everything that fits into staging, then RDMA-write it;
               explicit head and tail pointer writes.
``piggyback``  same copy/write ordering, pointers ride inside frames and tail
               updates are batched.
``pipeline``   piggyback pointers, each chunk's write is posted right after
               that chunk's copy.
``zerocopy``   pipeline for small messages; buffers above the threshold are
               announced with an RTS frame, pulled by the receiver with one
               RDMA read and acknowledged with an ACK frame.
``ch3write``   pipeline for small messages; a receiver with a large buffer and
               an empty pipe advertises it, the sender RDMA-writes straight
               into it and sends a completion notice.
"""

from __future__ import annotations

import struct
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Callable, Optional, Sequence

from .errors import ChannelError, ConfigError
from .fabric import Completion, Connection, Endpoint, MemoryRegion, Opcode, WorkRequest
from .regcache import CacheConfig, RegistrationCache
from .ring import U32_MASK, Frame, PointerMode, Ring, RingConfig, init_ring, release_ring

BufferList = Sequence[tuple[int, int]]

PACKET = struct.Struct("<BQQI")


class Variant(str, Enum):
    BASIC = "basic"
    PIGGYBACK = "piggyback"
    PIPELINE = "pipeline"
    ZEROCOPY = "zerocopy"
    CH3WRITE = "ch3write"

    @property
    def pipelined(self) -> bool:
        return self not in (Variant.BASIC, Variant.PIGGYBACK)

    @property
    def rendezvous(self) -> bool:
        return self in (Variant.ZEROCOPY, Variant.CH3WRITE)


class PacketKind(IntEnum):
    RTS = 1
    ACK = 2
    ADV = 3
    DONE = 4


@dataclass(frozen=True)
class RendezvousPacket:
    kind: PacketKind
    addr: int
    size: int
    rkey: int

    def encode(self) -> bytes:
        return PACKET.pack(int(self.kind), self.addr, self.size, self.rkey)

    @classmethod
    def decode(cls, data: bytes) -> "RendezvousPacket":
        if len(data) != PACKET.size:
            raise ChannelError(f"control frame of {len(data)} bytes, expected {PACKET.size}")
        kind, addr, size, rkey = PACKET.unpack(data)
        try:
            return cls(PacketKind(kind), addr, size, rkey)
        except ValueError:
            raise ChannelError(f"unknown control packet kind {kind}") from None


@dataclass(frozen=True)
class ChannelConfig:
    variant: Variant = Variant.PIPELINE
    ring: RingConfig = field(default_factory=RingConfig)
    zerocopy_threshold: int = 32768
    cache: CacheConfig = field(default_factory=CacheConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        mode = PointerMode.BASIC if self.variant is Variant.BASIC else PointerMode.PIGGYBACK
        if self.ring.pointer_mode is not mode:
            object.__setattr__(self, "ring", replace(self.ring, pointer_mode=mode))
        if self.variant.rendezvous and self.zerocopy_threshold < self.ring.payload_capacity:
            raise ConfigError(
                f"zerocopy_threshold {self.zerocopy_threshold} is below one chunk payload "
                f"({self.ring.payload_capacity})")


def _normalize(bufs: BufferList) -> list[tuple[int, int]]:
    if len(bufs) == 1:
        addr, length = bufs[0]
        if addr < 0 or length < 0:
            raise ChannelError(f"bad buffer segment {bufs[0]!r}")
        return [(addr, length)] if length else []
    out = []
    for seg in bufs:
        addr, length = int(seg[0]), int(seg[1])
        if addr < 0 or length < 0:
            raise ChannelError(f"bad buffer segment {seg!r}")
        if length:
            out.append((addr, length))
    spans = sorted(out)
    for (a0, n0), (a1, _) in zip(spans, spans[1:]):
        if a0 + n0 > a1:
            raise ChannelError("buffer segments overlap")
    return out


def _starts_with(bufs: list[tuple[int, int]], addr: int, size: int) -> bool:
    """True if the first ``size`` bytes of ``bufs`` are the contiguous span at ``addr``."""
    pos = addr
    for a, n in _slice(bufs, 0, size):
        if a != pos:
            return False
        pos += n
    return pos == addr + size


def _slice(bufs: list[tuple[int, int]], start: int, length: int) -> list[tuple[int, int]]:
    """Pieces covering bytes ``[start, start+length)`` of the concatenated list."""
    pieces = []
    pos = 0
    end = start + length
    for addr, n in bufs:
        lo, hi = max(start, pos), min(end, pos + n)
        if lo < hi:
            pieces.append((addr + lo - pos, hi - lo))
        pos += n
        if pos >= end:
            break
    return pieces


@dataclass
class _ZcSend:
    addr: int
    size: int
    region: MemoryRegion
    acked: bool = False


@dataclass
class _ZcRecv:
    size: int
    dests: list[tuple[int, int]]
    regions: list[MemoryRegion]
    packet: RendezvousPacket
    done: bool = False


@dataclass
class _Ch3Send:
    addr: int
    size: int
    region: MemoryRegion
    written: int
    done: bool = False


@dataclass
class _Advert:
    addr: int
    size: int
    region: MemoryRegion
    cancelled: bool = False


class _Shared:
    def __init__(self, conn: Connection, rings: tuple[Ring, Ring]):
        self.conn = conn
        self.rings = rings
        self.closed = False
        self.own_caches = True
        self.ends: tuple[ChannelEndpoint, ...] = ()


class ChannelEndpoint:
    def __init__(self, shared: _Shared, ep: Endpoint, out_ring: Ring, in_ring: Ring,
                 cfg: ChannelConfig, cache: RegistrationCache):
        self._shared = shared
        self.ep = ep
        self.cfg = cfg
        self.variant = cfg.variant
        self.tx = out_ring.tx
        self.rx = in_ring.rx
        self.cache = cache
        self.stats: Counter = Counter()
        self._frame: Optional[Frame] = None
        self._frame_off = 0
        self._ctrl_out: deque[RendezvousPacket] = deque()
        self._handlers: dict[int, Callable[[Completion], None]] = {}
        self._zc_send: Optional[_ZcSend] = None
        self._zc_recv: Optional[_ZcRecv] = None
        self._ch3_send: Optional[_Ch3Send] = None
        self._adv_held: Optional[RendezvousPacket] = None
        self._advert: Optional[_Advert] = None

    @property
    def closed(self) -> bool:
        return self._shared.closed

    @property
    def busy(self) -> bool:
        """A large transfer or control exchange is still in flight on this side."""
        return bool(self._zc_send or self._zc_recv or self._ch3_send or self._advert
                    or self._adv_held or self._ctrl_out or self._handlers)

    def _check_open(self):
        if self._shared.closed:
            raise ChannelError("channel is closed")

    def _large(self, n: int) -> bool:
        return self.variant.rendezvous and n > self.cfg.zerocopy_threshold

    # -- progress ---------------------------------------------------------

    def advance(self) -> None:
        """Drain completions, send queued control frames, handle sender-side
        control frames waiting at the head of the incoming ring."""
        self._check_open()
        self._drain_cq()
        self._flush_ctrl()
        if self._frame is None:
            consumed = False
            while True:
                f = self.rx.poll()
                if f is None or not f.control:
                    break
                pkt = RendezvousPacket.decode(self.rx.payload(f, charge=False))
                if pkt.kind in (PacketKind.ACK, PacketKind.ADV):
                    self._on_sender_packet(f, pkt)
                elif pkt.kind is PacketKind.DONE and pkt.size == 0:
                    self._on_done(f, pkt)
                else:
                    break
                consumed = True
            if consumed:
                self._after_get()
            self._flush_ctrl()

    def _drain_cq(self) -> None:
        while True:
            batch = self.ep.poll_cq(64)
            if not batch:
                return
            for c in batch:
                if self.tx.handle_completion(c) or self.rx.handle_completion(c):
                    continue
                handler = self._handlers.pop(c.wr_id, None)
                if handler is None:
                    raise ChannelError(f"completion for unknown work request {c.wr_id}")
                handler(c)

    def _post_frame(self, staged) -> None:
        self.tx.post(staged, tail32=self.rx.take_tail32(), publish=True)

    def _flush_ctrl(self) -> bool:
        while self._ctrl_out:
            pkt = self._ctrl_out[0]
            staged = self.tx.stage_bytes(pkt.encode(), control=True)
            if staged is None:
                return False
            self._post_frame(staged)
            self._ctrl_out.popleft()
            self.stats[f"sent_{pkt.kind.name.lower()}"] += 1
        return True

    def _send_ctrl(self, pkt: RendezvousPacket) -> None:
        self._ctrl_out.append(pkt)
        self._flush_ctrl()

    def _consumed_frame(self) -> None:
        if self.rx.mode is PointerMode.PIGGYBACK:
            self.rx.maybe_send_tail_update()

    def _after_get(self) -> None:
        if self.rx.mode is PointerMode.BASIC:
            self.rx.maybe_send_tail_update()

    def _note_frame(self, f: Frame) -> None:
        if self.tx.mode is PointerMode.PIGGYBACK:
            self.tx.apply_tail32(f.tail32)

    def _take_control(self, f: Frame) -> None:
        """Consume a control frame; its packet is copied out exactly once."""
        self._note_frame(f)
        self.ep.charge_copy(f.length, note=("drain", f.frame_no))
        self.rx.consume(f)
        self._consumed_frame()

    def _on_sender_packet(self, f: Frame, pkt: RendezvousPacket) -> None:
        self._take_control(f)
        self.stats[f"recv_{pkt.kind.name.lower()}"] += 1
        if pkt.kind is PacketKind.ACK:
            st = self._zc_send
            if st is None or st.acked or (pkt.addr, pkt.size) != (st.addr, st.size):
                raise ChannelError("unexpected zero-copy acknowledgment")
            st.acked = True
            self.cache.release(st.region)
        else:
            # usable only if the receiver had drained every frame we posted
            fresh = f.tail32 == self.tx.head & U32_MASK and self._ch3_send is None
            if self._adv_held is not None or not fresh:
                self._send_ctrl(RendezvousPacket(PacketKind.DONE, pkt.addr, 0, pkt.rkey))
            else:
                self._adv_held = pkt

    # -- put --------------------------------------------------------------

    def put(self, bufs: BufferList) -> int:
        self._check_open()
        bufs = _normalize(bufs)
        self.advance()
        if not bufs:
            return 0
        if self._zc_send is not None:
            return self._put_zc_continue(bufs)
        if self._ch3_send is not None:
            return self._put_ch3_continue(bufs)
        if not self._flush_ctrl():
            return 0
        if self.variant is Variant.BASIC and not (self.tx.idle and self.rx.idle):
            # the serialized design issues nothing while an earlier write is outstanding
            return 0
        written = 0
        i = 0
        while i < len(bufs):
            addr, n = bufs[i]
            if self._large(n):
                if written:
                    return written
                return self._put_large(addr, n)
            j = i
            while j < len(bufs) and not self._large(bufs[j][1]):
                j += 1
            run = bufs[i:j]
            if self._adv_held is not None:
                held, self._adv_held = self._adv_held, None
                self._send_ctrl(RendezvousPacket(PacketKind.DONE, held.addr, 0, held.rkey))
                if not self._flush_ctrl():
                    return written
            k = self._put_ring(run)
            written += k
            if k < sum(n for _, n in run):
                return written
            i = j
        return written

    def _put_ring(self, run: list[tuple[int, int]]) -> int:
        cap = self.tx.payload_capacity
        total = sum(n for _, n in run)
        written = 0
        staged = []
        while written < total:
            n = min(cap, total - written)
            s = self.tx.stage(_slice(run, written, n), n)
            if s is None:
                break
            written += n
            if self.variant.pipelined:
                self._post_frame(s)
            else:
                staged.append(s)
        for idx, s in enumerate(staged):
            self.tx.post(s, tail32=self.rx.take_tail32(), publish=idx == len(staged) - 1)
        self.stats["data_frames_sent"] += len(staged) if staged else 0
        return written

    def _put_large(self, addr: int, n: int) -> int:
        if self.variant is Variant.ZEROCOPY:
            if self.tx.free_chunks() <= 0:
                return 0
            region = self.cache.acquire(addr, n)
            self._zc_send = _ZcSend(addr, n, region)
            self._send_ctrl(RendezvousPacket(PacketKind.RTS, addr, n, region.rkey))
            return 0
        held = self._adv_held
        if held is None:
            # no advertised buffer: send eagerly through the ring
            return self._put_ring([(addr, n)])
        self._adv_held = None
        m = min(n, held.size)
        region = self.cache.acquire(addr, n)
        wr_id = self.ep.next_wr_id()
        wr = WorkRequest(wr_id, Opcode.WRITE, ((region.region_id, 0, m),), held.addr, held.rkey)
        st = _Ch3Send(addr, n, region, m)
        self._handlers[wr_id] = lambda c: self._on_ch3_written(c, st, held)
        self.ep.post_rdma_write(self.tx.conn, wr)
        self._ch3_send = st
        self.stats["rdma_direct_writes"] += 1
        return 0

    def _on_ch3_written(self, c: Completion, st: _Ch3Send, held: RendezvousPacket) -> None:
        if not c.ok:
            raise ChannelError(f"direct write failed: {c.status.value}")
        self.cache.release(st.region)
        st.done = True
        self._send_ctrl(RendezvousPacket(PacketKind.DONE, held.addr, st.written, held.rkey))

    def _put_zc_continue(self, bufs) -> int:
        st = self._zc_send
        if not _starts_with(bufs, st.addr, st.size):
            raise ChannelError("put retried with a different buffer while a zero-copy send is in flight")
        if not st.acked:
            return 0
        self._zc_send = None
        return st.size

    def _put_ch3_continue(self, bufs) -> int:
        st = self._ch3_send
        if not _starts_with(bufs, st.addr, st.written):
            raise ChannelError("put retried with a different buffer while a direct write is in flight")
        if not st.done or self._ctrl_out:
            return 0
        self._ch3_send = None
        return st.written

    # -- get --------------------------------------------------------------

    def get(self, bufs: BufferList) -> int:
        self._check_open()
        bufs = _normalize(bufs)
        self.advance()
        if not bufs:
            return 0
        if self._zc_recv is not None:
            return self._get_zc_continue(bufs)
        adv = self._advert
        if adv is not None and not adv.cancelled and bufs[0][0] != adv.addr:
            raise ChannelError("get retried with a different buffer while a buffer advertisement is out")
        total = sum(n for _, n in bufs)
        out = 0
        while out < total:
            if self._frame is None:
                f = self.rx.poll()
                if f is None:
                    break
                if f.control:
                    pkt = RendezvousPacket.decode(self.rx.payload(f, charge=False))
                    if pkt.kind in (PacketKind.ACK, PacketKind.ADV):
                        self._on_sender_packet(f, pkt)
                        continue
                    if pkt.kind is PacketKind.RTS:
                        if out:
                            break
                        self._start_zc_read(f, pkt, bufs)
                        return 0
                    received = self._on_done(f, pkt)
                    if received:
                        self._after_get()
                        return received
                    continue
                self._note_frame(f)
                if self._advert is not None and not self._advert.cancelled:
                    # data overtook our advertisement: the peer is bound to decline it
                    self._advert.cancelled = True
                    self.cache.release(self._advert.region)
                self._frame, self._frame_off = f, 0
            f = self._frame
            take = min(f.length - self._frame_off, total - out)
            pos = self._frame_off
            for addr, n in _slice(bufs, out, take):
                self.rx.copy_out(f, pos, addr, n)
                pos += n
            self._frame_off += take
            out += take
            if self._frame_off == f.length:
                self.rx.consume(f)
                self._frame = None
                self.stats["data_frames_received"] += 1
                self._consumed_frame()
        self._after_get()
        if (out == 0 and self.variant is Variant.CH3WRITE and self._advert is None
                and self._frame is None and self._large(bufs[0][1]) and self.rx.poll() is None):
            self._advertise(*bufs[0])
        return out

    def _on_done(self, f: Frame, pkt: RendezvousPacket) -> int:
        self._take_control(f)
        self.stats["recv_done"] += 1
        adv = self._advert
        if adv is None or pkt.addr != adv.addr:
            raise ChannelError("completion notice without a matching advertisement")
        self._advert = None
        if pkt.size == 0:
            if not adv.cancelled:
                self.cache.release(adv.region)
            return 0
        if adv.cancelled or pkt.size > adv.size:
            raise ChannelError("peer wrote into a withdrawn advertisement")
        self.cache.release(adv.region)
        return pkt.size

    def _advertise(self, addr: int, n: int) -> None:
        if self.tx.free_chunks() <= 0:
            return
        region = self.cache.acquire(addr, n)
        self._advert = _Advert(addr, n, region)
        self._send_ctrl(RendezvousPacket(PacketKind.ADV, addr, n, region.rkey))

    def _start_zc_read(self, f: Frame, pkt: RendezvousPacket, bufs) -> None:
        if sum(n for _, n in bufs) < pkt.size:
            raise ChannelError(
                f"incoming {pkt.size}-byte message does not fit a {sum(n for _, n in bufs)}-byte buffer list")
        self._take_control(f)
        self._after_get()
        self.stats["recv_rts"] += 1
        dests = _slice(bufs, 0, pkt.size)
        regions = [self.cache.acquire(a, n) for a, n in dests]
        st = _ZcRecv(pkt.size, dests, regions, pkt)
        wr_id = self.ep.next_wr_id()
        wr = WorkRequest(wr_id, Opcode.READ, tuple((r.region_id, 0, n) for r, (_, n) in zip(regions, dests)),
                         pkt.addr, pkt.rkey)

        def on_read(c: Completion) -> None:
            if not c.ok:
                raise ChannelError(f"zero-copy read failed: {c.status.value}")
            st.done = True

        self._handlers[wr_id] = on_read
        self.ep.post_rdma_read(self.tx.conn, wr)
        self._zc_recv = st
        self.stats["rdma_reads"] += 1

    def _get_zc_continue(self, bufs) -> int:
        st = self._zc_recv
        if _slice(bufs, 0, st.size) != st.dests and not _starts_with(bufs, st.dests[0][0], st.size):
            raise ChannelError("get retried with a different buffer while a zero-copy read is in flight")
        if not st.done:
            return 0
        for r in st.regions:
            self.cache.release(r)
        self._zc_recv = None
        self._send_ctrl(RendezvousPacket(PacketKind.ACK, st.packet.addr, st.size, st.packet.rkey))
        return st.size

    def __repr__(self):
        return f"ChannelEndpoint(ep={self.ep.id}, variant={self.variant.value})"


def open_channel(conn: Connection, cfg: ChannelConfig | None = None,
                 caches: tuple[RegistrationCache, RegistrationCache] | None = None
                 ) -> tuple[ChannelEndpoint, ChannelEndpoint]:
    cfg = cfg or ChannelConfig()
    if getattr(conn, "_channel", None) is not None:
        raise ChannelError("connection already carries a channel")
    rings = init_ring(conn, cfg.ring)
    shared = _Shared(conn, rings)
    if caches is None:
        caches = (RegistrationCache(conn.a, cfg.cache), RegistrationCache(conn.b, cfg.cache))
    else:
        shared.own_caches = False
    a = ChannelEndpoint(shared, conn.a, rings[0], rings[1], cfg, caches[0])
    b = ChannelEndpoint(shared, conn.b, rings[1], rings[0], cfg, caches[1])
    shared.ends = (a, b)
    conn._channel = shared
    return a, b


def close_channel(ch: ChannelEndpoint) -> None:
    """Tear down both ends; every channel-owned registration is released."""
    shared = ch._shared
    if shared.closed:
        raise ChannelError("channel already closed")
    for end in shared.ends:
        end._drain_cq()
    for end in shared.ends:
        if end.busy or not end.tx.idle or not end.rx.idle:
            raise ChannelError("cannot close: transfer or RDMA operation still in flight")
    for ring in shared.rings:
        release_ring(ring)
    if shared.own_caches:
        for end in shared.ends:
            end.cache.flush()
    shared.closed = True
    shared.conn._channel = None
