"""Randomized bidirectional stream check.

Both endpoints send a seeded sequence of messages to each other at the same
time, cutting every put and get into random buffer lists, and every received
byte is compared against what was sent.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .channel import ChannelConfig, ChannelEndpoint, close_channel, open_channel
from .errors import ChannelError
from .fabric import CostModel, Endpoint, create_fabric

MIB = 1 << 20


def mixed_sizes(rng: random.Random, count: int, max_size: int = 4 * MIB) -> list[int]:
    """Message sizes from 1 B to ``max_size``: log-uniform, with both ends forced in."""
    sizes = [max(1, min(max_size, int(2 ** rng.uniform(0, max_size.bit_length() - 1))))
             for _ in range(count)]
    if count >= 2:
        sizes[0], sizes[-1] = 1, max_size
    return sizes


def _split(rng: random.Random, base: int, length: int, max_pieces: int = 4) -> list[tuple[int, int]]:
    k = min(length, rng.randint(1, max_pieces))
    cuts = sorted(rng.sample(range(1, length), k - 1)) if k > 1 else []
    edges = [0, *cuts, length]
    return [(base + lo, hi - lo) for lo, hi in zip(edges, edges[1:])]


@dataclass
class _Direction:
    sender: ChannelEndpoint
    receiver: ChannelEndpoint
    sizes: list[int]
    src: int
    dst: int
    rng: random.Random
    pool: bytes
    sent_msgs: int = 0
    sent: int = 0
    recv_msgs: int = 0
    got: int = 0
    expected: list[bytes] = field(default_factory=list)
    mismatches: int = 0
    bytes_checked: int = 0
    _put_bufs: list | None = None
    _get_bufs: list | None = None

    @property
    def done(self) -> bool:
        return self.recv_msgs == self.sent_msgs == len(self.sizes)

    def step_send(self) -> bool:
        if self.sent_msgs == len(self.sizes):
            return False
        ep: Endpoint = self.sender.ep
        n = self.sizes[self.sent_msgs]
        if self.sent == 0 and len(self.expected) <= self.sent_msgs:
            off = self.rng.randrange(len(self.pool) - n + 1)
            data = self.pool[off:off + n]
            ep.write(self.src, data)
            self.expected.append(data)
        # a call that made no progress is retried with the same list
        if self._put_bufs is None:
            self._put_bufs = _split(self.rng, self.src + self.sent, n - self.sent)
        k = self.sender.put(self._put_bufs)
        if k:
            self._put_bufs = None
        self.sent += k
        if self.sent == n:
            self.sent_msgs, self.sent = self.sent_msgs + 1, 0
        return k > 0

    def step_recv(self, threshold: int | None) -> bool:
        if self.recv_msgs >= min(len(self.expected), len(self.sizes)):
            return False
        n = self.sizes[self.recv_msgs]
        left = n - self.got
        if self._get_bufs is None:
            cap = left
            if threshold is None or left <= threshold:
                cap = self.rng.randint(1, left)
            self._get_bufs = _split(self.rng, self.dst + self.got, cap)
        k = self.receiver.get(self._get_bufs)
        if k:
            self._get_bufs = None
        self.got += k
        if self.got == n:
            out = self.receiver.ep.read(self.dst, n)
            if out != self.expected[self.recv_msgs]:
                self.mismatches += 1
            self.expected[self.recv_msgs] = b""
            self.bytes_checked += n
            self.recv_msgs, self.got = self.recv_msgs + 1, 0
        return k > 0


@dataclass
class StreamResult:
    messages: int
    bytes_checked: int
    mismatches: int
    steps: int

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def run_stream(cfg: ChannelConfig, messages: int, seed: int = 0, torn: bool = False,
               model: CostModel | None = None, max_size: int = 4 * MIB) -> StreamResult:
    """Send ``messages`` messages each way and verify the received stream."""
    rng = random.Random(seed)
    fab = create_fabric(model, torn_delivery=torn)
    mem = 2 * cfg.ring.ring_bytes + 2 * max_size + MIB
    a, b = fab.endpoint(mem), fab.endpoint(mem)
    ca, cb = open_channel(fab.connect(a, b), cfg)
    pool = rng.randbytes(2 * max_size)
    per_dir = [messages // 2 + messages % 2, messages // 2]
    dirs = []
    for (s, r), count in zip(((ca, cb), (cb, ca)), per_dir):
        # messages are random windows into one random pool, so no two repeat
        dirs.append(_Direction(s, r, mixed_sizes(rng, count, max_size),
                               s.ep.alloc(max_size), r.ep.alloc(max_size),
                               random.Random(rng.getrandbits(64)), pool))
    threshold = cfg.zerocopy_threshold if cfg.variant.rendezvous else None
    steps = idle = 0
    while not all(d.done for d in dirs):
        steps += 1
        moved = False
        for d in dirs:
            moved |= d.step_send()
            moved |= d.step_recv(threshold)
        # put and get drive their own endpoint; finished sides still need progress
        for end, d_out, d_in in ((ca, dirs[0], dirs[1]), (cb, dirs[1], dirs[0])):
            if d_out.sent_msgs == len(d_out.sizes) and d_in.done:
                end.advance()
        events = fab.progress()
        if not moved:
            for _ in range(3):
                events += fab.progress()
        idle = 0 if (moved or events) else idle + 1
        if idle > 1000:
            raise ChannelError("stream stalled: no progress on either side")
    for _ in range(1000):
        ca.advance()
        cb.advance()
        if not fab.progress() and not (ca.busy or cb.busy):
            break
    close_channel(ca)
    return StreamResult(messages, sum(d.bytes_checked for d in dirs),
                        sum(d.mismatches for d in dirs), steps)
