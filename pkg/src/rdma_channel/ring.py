"""Chunked ring buffer carried over RDMA write.

One :class:`Ring` moves frames in one direction of a connection. The data
region lives in receiver memory; the sender keeps a same-sized registered
staging copy, builds each frame there and pushes it with one RDMA write.

Pointers count frames (lap-extended, never wrapped): ``head`` is the number of
frames posted, ``tail`` the number consumed. The master head lives at the
sender and the master tail at the receiver; each side keeps a replica of the
other's pointer, which may lag but never leads.

Frame layout inside a chunk of ``chunk_size`` bytes (little-endian). The frame
is bottom-filled so the trailing flag sits at a fixed offset and a short
message only puts its own bytes on the wire::

    start = chunk_size - 24 - pad8(len)
    start + 0    u32  leading flag
    start + 4    u32  piggybacked tail of the reverse ring (low 32 bits)
    start + 8    u64  head after this frame
    start + 16   len bytes of payload, zero padded to a multiple of 8
    size - 8     u32  trailing flag (same value as the leading flag)
    size - 4     u32  payload length, top bit set for control frames

A frame is complete when both flags equal the sequence tag expected for that
slot and lap. The receiver zeroes both flag words when it consumes a frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .errors import ConfigError, RingError
from .fabric import Completion, Connection, Endpoint, MemoryRegion, write_wr

HEADER = struct.Struct("<IIQ")
TRAILER = struct.Struct("<II")
U64 = struct.Struct("<Q")
FRAME_OVERHEAD = HEADER.size + TRAILER.size
CONTROL_BIT = 1 << 31
U32_MASK = 0xFFFFFFFF


class PointerMode(str, Enum):
    BASIC = "basic"
    PIGGYBACK = "piggyback"


def seq_flag(frame_no: int) -> int:
    """Nonzero 32-bit tag for frame ``frame_no``; consecutive laps of a slot differ."""
    return frame_no % U32_MASK + 1


def pad8(n: int) -> int:
    return (n + 7) & ~7


def frame_start(chunk_size: int, length: int) -> int:
    return chunk_size - FRAME_OVERHEAD - pad8(length)


def encode_frame(chunk_size: int, frame_no: int, payload: bytes, head: int,
                 tail32: int = 0, control: bool = False) -> tuple[int, bytes]:
    """Return ``(offset_in_chunk, wire_bytes)`` for one frame."""
    n = len(payload)
    if n > chunk_size - FRAME_OVERHEAD:
        raise RingError(f"payload of {n} bytes does not fit a {chunk_size}-byte chunk")
    flag = seq_flag(frame_no)
    body = payload + bytes(pad8(n) - n)
    trailer = TRAILER.pack(flag, n | (CONTROL_BIT if control else 0))
    return frame_start(chunk_size, n), HEADER.pack(flag, tail32 & U32_MASK, head) + body + trailer


@dataclass(frozen=True)
class RingConfig:
    num_chunks: int = 64
    chunk_size: int = 16384
    tail_update_threshold: float = 0.25
    pointer_mode: PointerMode = PointerMode.PIGGYBACK

    def __post_init__(self):
        object.__setattr__(self, "pointer_mode", PointerMode(self.pointer_mode))
        if self.chunk_size < 64 or self.chunk_size % 8:
            raise ConfigError(f"chunk_size must be >= 64 and a multiple of 8, got {self.chunk_size}")
        if self.num_chunks < 2:
            raise ConfigError(f"num_chunks must be >= 2, got {self.num_chunks}")
        if not 0 < self.tail_update_threshold < 1:
            raise ConfigError("tail_update_threshold must be in (0, 1)")

    @classmethod
    def for_payload(cls, payload_bytes: int, **kw) -> "RingConfig":
        """Config whose chunks carry exactly ``payload_bytes`` (rounded up to 8)."""
        return cls(chunk_size=pad8(payload_bytes) + FRAME_OVERHEAD, **kw)

    @property
    def payload_capacity(self) -> int:
        return self.chunk_size - FRAME_OVERHEAD

    @property
    def ring_bytes(self) -> int:
        return self.num_chunks * self.chunk_size

    @property
    def tail_batch(self) -> int:
        """Consumed-but-unreported frames that force an explicit tail write."""
        return max(1, math.ceil((1 - self.tail_update_threshold) * self.num_chunks - 1e-9))


@dataclass(frozen=True)
class RemoteBuffer:
    addr: int
    rkey: int


@dataclass(frozen=True)
class Frame:
    frame_no: int
    slot: int
    length: int
    control: bool
    head: int
    tail32: int
    payload_addr: int


@dataclass
class StagedFrame:
    frame_no: int
    length: int
    control: bool


class RingSender:
    """Sender half: staging buffer, master head, tail replica."""

    def __init__(self, ep: Endpoint, conn: Connection, cfg: RingConfig,
                 staging: MemoryRegion, head_src: MemoryRegion, tail_mbox: MemoryRegion,
                 remote_data: RemoteBuffer, remote_head_mbox: RemoteBuffer):
        self.ep, self.conn, self.cfg = ep, conn, cfg
        self.staging = staging
        self.head_src = head_src
        self.tail_mbox = tail_mbox
        self.remote_data = remote_data
        self.remote_head_mbox = remote_head_mbox
        self.head = 0
        self.tail_replica = 0
        self._next = 0  # staged frames not yet posted sit in [head, _next)
        self._publish_on: dict[int, int] = {}
        self._own: set[int] = set()
        self.head_writes = 0
        self.frames_posted = 0

    @property
    def mode(self) -> PointerMode:
        return self.cfg.pointer_mode

    @property
    def payload_capacity(self) -> int:
        return self.cfg.payload_capacity

    def refresh_tail(self) -> None:
        (value,) = U64.unpack_from(self.ep.memory, self.tail_mbox.base)
        if value > self.tail_replica:
            if value > self.head:
                raise RingError(f"tail update {value} beyond head {self.head}")
            self.tail_replica = value
            self.ep.observe(self.tail_mbox)

    def apply_tail32(self, tail32: int) -> None:
        """Fold a piggybacked low-32-bit tail into the replica."""
        cand = self.tail_replica + ((tail32 - self.tail_replica) & U32_MASK)
        if self.tail_replica < cand <= self.head:
            self.tail_replica = cand

    def free_chunks(self) -> int:
        self.refresh_tail()
        return self.cfg.num_chunks - (self._next - self.tail_replica)

    def stage(self, sources: Iterable[tuple[int, int]], length: int,
              control: bool = False) -> Optional[StagedFrame]:
        """Copy ``sources`` (address, length pairs in sender memory) into the next
        free staging chunk. Returns ``None`` when the ring is full."""
        if length > self.payload_capacity:
            raise RingError(f"payload of {length} bytes exceeds chunk capacity {self.payload_capacity}")
        if self.free_chunks() <= 0:
            return None
        frame_no = self._next
        dst = self._chunk_addr(frame_no) + frame_start(self.cfg.chunk_size, length) + HEADER.size
        pos = 0
        for addr, n in sources:
            self.ep.copy_local(dst + pos, addr, n, note=("stage", frame_no))
            pos += n
        if pos != length:
            raise RingError(f"sources hold {pos} bytes, frame length is {length}")
        self._next += 1
        return StagedFrame(frame_no, length, control)

    def stage_bytes(self, payload: bytes, control: bool = False) -> Optional[StagedFrame]:
        if len(payload) > self.payload_capacity:
            raise RingError(f"payload of {len(payload)} bytes exceeds chunk capacity {self.payload_capacity}")
        if self.free_chunks() <= 0:
            return None
        frame_no = self._next
        dst = self._chunk_addr(frame_no) + frame_start(self.cfg.chunk_size, len(payload)) + HEADER.size
        self.ep.write(dst, payload)
        self.ep.charge_copy(len(payload), note=("stage", frame_no))
        self._next += 1
        return StagedFrame(frame_no, len(payload), control)

    def post(self, staged: StagedFrame, tail32: int = 0, publish: bool = True) -> int:
        """RDMA-write a staged frame. In basic mode a ``publish`` frame triggers the
        head-pointer write once its data write has completed."""
        if staged.frame_no != self.head:
            raise RingError(f"frames must be posted in order (expected {self.head}, got {staged.frame_no})")
        cs = self.cfg.chunk_size
        n = staged.length
        start = frame_start(cs, n)
        chunk = self._chunk_addr(staged.frame_no)
        flag = seq_flag(staged.frame_no)
        mem = self.ep.memory
        HEADER.pack_into(mem, chunk + start, flag, tail32 & U32_MASK, staged.frame_no + 1)
        pad = pad8(n) - n
        if pad:
            mem[chunk + start + HEADER.size + n:chunk + start + HEADER.size + n + pad] = bytes(pad)
        TRAILER.pack_into(mem, chunk + cs - TRAILER.size, flag, n | (CONTROL_BIT if staged.control else 0))
        wr_id = self.ep.next_wr_id()
        slot = staged.frame_no % self.cfg.num_chunks
        wr = write_wr(wr_id, self.staging, slot * cs + start, cs - start,
                      self.remote_data.addr + slot * cs + start, self.remote_data.rkey)
        self.ep.post_rdma_write(self.conn, wr)
        self._own.add(wr_id)
        self.head += 1
        self.frames_posted += 1
        if self.mode is PointerMode.BASIC and publish:
            self._publish_on[wr_id] = self.head
        return wr_id

    def sender_post_frame(self, payload: bytes, tail32: int = 0) -> bool:
        staged = self.stage_bytes(payload)
        if staged is None:
            return False
        self.post(staged, tail32)
        return True

    def handle_completion(self, c: Completion) -> bool:
        if c.wr_id not in self._own:
            return False
        self._own.discard(c.wr_id)
        if not c.ok:
            raise RingError(f"ring write {c.wr_id} failed: {c.status.value}")
        value = self._publish_on.pop(c.wr_id, None)
        if value is not None:
            self._write_head(value)
        return True

    def _write_head(self, value: int) -> None:
        U64.pack_into(self.ep.memory, self.head_src.base, value)
        wr_id = self.ep.next_wr_id()
        self.ep.post_rdma_write(self.conn, write_wr(
            wr_id, self.head_src, 0, 8, self.remote_head_mbox.addr, self.remote_head_mbox.rkey))
        self._own.add(wr_id)
        self.head_writes += 1

    @property
    def idle(self) -> bool:
        return not self._own and self._next == self.head

    def _chunk_addr(self, frame_no: int) -> int:
        return self.staging.base + (frame_no % self.cfg.num_chunks) * self.cfg.chunk_size


class RingReceiver:
    """Receiver half: data region, master tail, head replica."""

    def __init__(self, ep: Endpoint, conn: Connection, cfg: RingConfig,
                 data: MemoryRegion, head_mbox: MemoryRegion, tail_src: MemoryRegion,
                 remote_tail_mbox: RemoteBuffer):
        self.ep, self.conn, self.cfg = ep, conn, cfg
        self.data = data
        self.head_mbox = head_mbox
        self.tail_src = tail_src
        self.remote_tail_mbox = remote_tail_mbox
        self.tail = 0
        self.head_replica = 0
        self.last_sent_tail = 0
        self._own: set[int] = set()
        self.tail_writes = 0
        self.frames_consumed = 0

    @property
    def mode(self) -> PointerMode:
        return self.cfg.pointer_mode

    @property
    def pending_tail(self) -> int:
        return self.tail - self.last_sent_tail

    def receiver_poll_frame(self) -> Optional[Frame]:
        """Next in-order complete frame, or ``None``. Does not advance the tail."""
        cs = self.cfg.chunk_size
        frame_no = self.tail
        if self.mode is PointerMode.BASIC:
            (head,) = U64.unpack_from(self.ep.memory, self.head_mbox.base)
            if head > self.head_replica:
                self.head_replica = head
                self.ep.observe(self.head_mbox)
            if frame_no >= self.head_replica:
                return None
        chunk = self.data.base + (frame_no % self.cfg.num_chunks) * cs
        mem = self.ep.memory
        flag = seq_flag(frame_no)
        trailing, len_word = TRAILER.unpack_from(mem, chunk + cs - TRAILER.size)
        if trailing != flag:
            return None
        length = len_word & ~CONTROL_BIT
        if length > self.cfg.payload_capacity:
            raise RingError(f"frame {frame_no}: corrupt length {length}")
        start = frame_start(cs, length)
        leading, tail32, head = HEADER.unpack_from(mem, chunk + start)
        if leading != flag:
            return None
        self.ep.observe(self.data)
        if self.mode is PointerMode.PIGGYBACK and head > self.head_replica:
            self.head_replica = head
        return Frame(frame_no, frame_no % self.cfg.num_chunks, length,
                     bool(len_word & CONTROL_BIT), head, tail32, chunk + start + HEADER.size)

    poll = receiver_poll_frame

    def payload(self, frame: Frame, charge: bool = True) -> bytes:
        data = self.ep.read(frame.payload_addr, frame.length)
        if charge:
            self.ep.charge_copy(frame.length, note=("drain", frame.frame_no))
        return data

    def copy_out(self, frame: Frame, offset: int, dst: int, length: int) -> None:
        if offset < 0 or offset + length > frame.length:
            raise RingError("copy_out outside frame payload")
        self.ep.copy_local(dst, frame.payload_addr + offset, length, note=("drain", frame.frame_no))

    def receiver_consume(self, frame: Frame) -> None:
        if frame.frame_no != self.tail:
            raise RingError(f"frame {frame.frame_no} already consumed or out of order (tail={self.tail})")
        cs = self.cfg.chunk_size
        chunk = self.data.base + frame.slot * cs
        mem = self.ep.memory
        start = chunk + frame_start(cs, frame.length)
        mem[start:start + 4] = bytes(4)
        end = chunk + cs - TRAILER.size
        mem[end:end + 4] = bytes(4)
        self.tail += 1
        self.frames_consumed += 1

    consume = receiver_consume

    def take_tail32(self) -> int:
        """Tail value to piggyback on a reverse-direction frame."""
        if self.mode is PointerMode.PIGGYBACK:
            self.last_sent_tail = self.tail
        return self.tail & U32_MASK

    def maybe_send_tail_update(self, outbound: bool = False) -> bool:
        """Post an explicit tail write if the pointer mode calls for one.

        ``outbound`` tells piggyback mode that a reverse frame is about to carry
        the tail anyway.
        """
        if self.mode is PointerMode.BASIC:
            due = self.tail > self.last_sent_tail
        else:
            due = not outbound and self.pending_tail >= self.cfg.tail_batch
        if not due:
            return False
        U64.pack_into(self.ep.memory, self.tail_src.base, self.tail)
        wr_id = self.ep.next_wr_id()
        self.ep.post_rdma_write(self.conn, write_wr(
            wr_id, self.tail_src, 0, 8, self.remote_tail_mbox.addr, self.remote_tail_mbox.rkey))
        self._own.add(wr_id)
        self.last_sent_tail = self.tail
        self.tail_writes += 1
        return True

    def handle_completion(self, c: Completion) -> bool:
        if c.wr_id not in self._own:
            return False
        self._own.discard(c.wr_id)
        if not c.ok:
            raise RingError(f"tail write {c.wr_id} failed: {c.status.value}")
        return True

    @property
    def idle(self) -> bool:
        return not self._own


@dataclass
class Ring:
    """Both halves of one direction."""

    cfg: RingConfig
    tx: RingSender
    rx: RingReceiver

    @property
    def regions(self) -> list[tuple[Endpoint, MemoryRegion]]:
        return [(self.tx.ep, self.tx.staging), (self.tx.ep, self.tx.head_src),
                (self.tx.ep, self.tx.tail_mbox), (self.rx.ep, self.rx.data),
                (self.rx.ep, self.rx.head_mbox), (self.rx.ep, self.rx.tail_src)]

    def free_chunks(self) -> int:
        return self.tx.free_chunks()

    def free_space(self) -> int:
        return self.free_chunks() * self.cfg.payload_capacity


def _zeroed(ep: Endpoint, nbytes: int) -> MemoryRegion:
    addr = ep.alloc(nbytes)
    ep.memory[addr:addr + nbytes] = bytes(nbytes)
    return ep.register(addr, nbytes)


def _one_direction(conn: Connection, sender: Endpoint, receiver: Endpoint, cfg: RingConfig) -> Ring:
    data = _zeroed(receiver, cfg.ring_bytes)
    head_mbox = _zeroed(receiver, 8)
    tail_src = _zeroed(receiver, 8)
    staging = _zeroed(sender, cfg.ring_bytes)
    head_src = _zeroed(sender, 8)
    tail_mbox = _zeroed(sender, 8)
    # out-of-band bootstrap exchange of addresses and rkeys
    tx = RingSender(sender, conn, cfg, staging, head_src, tail_mbox,
                    RemoteBuffer(data.base, data.rkey), RemoteBuffer(head_mbox.base, head_mbox.rkey))
    rx = RingReceiver(receiver, conn, cfg, data, head_mbox, tail_src,
                      RemoteBuffer(tail_mbox.base, tail_mbox.rkey))
    return Ring(cfg, tx, rx)


def init_ring(conn: Connection, cfg: RingConfig | None = None) -> tuple[Ring, Ring]:
    """Register and wire up both directions; returns ``(a_to_b, b_to_a)``."""
    cfg = cfg or RingConfig()
    return (_one_direction(conn, conn.a, conn.b, cfg),
            _one_direction(conn, conn.b, conn.a, cfg))


def release_ring(ring: Ring) -> None:
    for ep, region in ring.regions:
        if ep.is_live(region):
            ep.deregister(region)
