"""Ping-pong latency, windowed bandwidth and chunk-size sweep on the simulator.

All timings come from simulated clocks, so results are exact functions of
the configuration. The seed only picks buffer contents.
"""

from __future__ import annotations

import csv
import io
import random
import sys
from dataclasses import dataclass, field, replace
from typing import Optional

from .channel import ChannelConfig, ChannelEndpoint, Variant, close_channel, open_channel
from .errors import ChannelError, ConfigError
from .fabric import MODEL_KEYS, CostModel, CounterSnapshot, Endpoint, Fabric, create_fabric
from .regcache import CacheConfig
from .ring import RingConfig

MIB = 1 << 20
SWEEP_CHUNKS = (1024, 2048, 4096, 8192, 16384, 32768)
CSV_HEADER = ("test,variant,size_bytes,chunk_bytes,window,metric_name,metric_value,rdma_writes,"
              "rdma_reads,registrations,deregistrations,payload_copy_bytes,wire_bytes")
ACK_BYTES = 1


@dataclass(frozen=True)
class BenchConfig:
    test: str = "latency"
    variant: Variant = Variant.PIPELINE
    sizes: tuple[int, ...] = (4,)
    window: int = 64
    iterations: int = 1000
    warmup: int = 100
    model: CostModel = field(default_factory=CostModel)
    torn_delivery: bool = False
    ring: RingConfig = field(default_factory=lambda: RingConfig.for_payload(16384))
    zerocopy_threshold: int = 32768
    cache: CacheConfig = field(default_factory=CacheConfig)
    sweep_chunks: tuple[int, ...] = SWEEP_CHUNKS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.test not in ("latency", "bandwidth", "sweep"):
            raise ConfigError(f"unknown test {self.test!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError("sizes must be non-empty and each >= 1")
        if self.test == "sweep" and self.variant is not Variant.PIPELINE:
            raise ConfigError("the chunk sweep runs the pipeline variant")

    def channel_config(self, ring: Optional[RingConfig] = None) -> ChannelConfig:
        return ChannelConfig(self.variant, ring or self.ring, self.zerocopy_threshold, self.cache)


@dataclass(frozen=True)
class BenchRow:
    test: str
    variant: str
    size_bytes: int
    chunk_bytes: int
    window: int
    metric_name: str
    metric_value: float
    counters_a: CounterSnapshot
    counters_b: CounterSnapshot

    @property
    def counters(self) -> CounterSnapshot:
        return self.counters_a + self.counters_b

    def csv_fields(self) -> list[str]:
        c = self.counters
        return [self.test, self.variant, str(self.size_bytes), str(self.chunk_bytes), str(self.window),
                self.metric_name, f"{self.metric_value:.6f}", str(c.rdma_writes), str(c.rdma_reads),
                str(c.registrations), str(c.deregistrations), str(c.payload_bytes_copied),
                str(c.wire_bytes)]


@dataclass
class BenchResult:
    config: BenchConfig
    rows: list[BenchRow] = field(default_factory=list)

    def metric(self, size: int | None = None, chunk: int | None = None) -> float:
        for r in self.rows:
            if (size is None or r.size_bytes == size) and (chunk is None or r.chunk_bytes == chunk):
                return r.metric_value
        raise KeyError((size, chunk))


class _Harness:
    """Two endpoints, one channel, and a progress loop that drives both."""

    def __init__(self, cfg: BenchConfig, ring: RingConfig, max_size: int):
        self.fab: Fabric = create_fabric(cfg.model, cfg.torn_delivery)
        mem = 2 * ring.ring_bytes + 2 * max_size + MIB
        self.a: Endpoint = self.fab.endpoint(mem)
        self.b: Endpoint = self.fab.endpoint(mem)
        self.ca, self.cb = open_channel(self.fab.connect(self.a, self.b), cfg.channel_config(ring))
        rng = random.Random(cfg.seed)
        self.buf = {}
        for ep in (self.a, self.b):
            src, dst = ep.alloc(max_size), ep.alloc(max_size)
            ep.write(src, rng.randbytes(max_size))
            self.buf[ep.id] = (src, dst)

    def move(self, tx: ChannelEndpoint, rx: ChannelEndpoint, size: int, count: int) -> None:
        """Send ``count`` messages of ``size`` bytes, put and get interleaved."""
        src = self.buf[tx.ep.id][0]
        dst = self.buf[rx.ep.id][1]
        sent = got = 0
        put_off = get_off = 0
        idle = 0
        while got < count or sent < count:
            moved = False
            if sent < count:
                k = tx.put([(src + put_off, size - put_off)])
                put_off += k
                if put_off == size:
                    sent, put_off = sent + 1, 0
                moved |= k > 0
            else:
                tx.advance()
            if got < count:
                k = rx.get([(dst + get_off, size - get_off)])
                get_off += k
                if get_off == size:
                    got, get_off = got + 1, 0
                moved |= k > 0
            else:
                rx.advance()
            # the fabric only moves when neither CPU has work, so no endpoint is
            # dragged forward to an event it never waited for
            if moved:
                idle = 0
                continue
            idle = 0 if self.fab.progress() else idle + 1
            if idle > 1000:
                raise ChannelError("benchmark stalled")

    def settle(self) -> None:
        """Let trailing pointer writes and completions land."""
        for _ in range(10_000):
            self.ca.advance()
            self.cb.advance()
            if not self.fab.progress():
                return

    def counters(self) -> tuple[CounterSnapshot, CounterSnapshot]:
        return self.a.counters(), self.b.counters()

    def close(self) -> None:
        self.settle()
        close_channel(self.ca)


def _delta(before, after) -> tuple[CounterSnapshot, CounterSnapshot]:
    return after[0] - before[0], after[1] - before[1]


def _latency_row(cfg: BenchConfig, size: int, ring: RingConfig) -> BenchRow:
    h = _Harness(cfg, ring, size)
    for _ in range(cfg.warmup):
        h.move(h.ca, h.cb, size, 1)
        h.move(h.cb, h.ca, size, 1)
    h.settle()
    before, t0 = h.counters(), h.a.clock
    for _ in range(cfg.iterations):
        h.move(h.ca, h.cb, size, 1)
        h.move(h.cb, h.ca, size, 1)
    elapsed = h.a.clock - t0
    h.settle()
    ca, cb = _delta(before, h.counters())
    h.close()
    return BenchRow("latency", cfg.variant.value, size, ring.payload_capacity, 1, "latency_us",
                    elapsed / cfg.iterations / 2, ca, cb)


def _bandwidth_row(cfg: BenchConfig, size: int, ring: RingConfig, test: str = "bandwidth") -> BenchRow:
    h = _Harness(cfg, ring, size)
    w = cfg.window

    def burst():
        h.move(h.ca, h.cb, size, w)
        h.move(h.cb, h.ca, ACK_BYTES, 1)

    for _ in range(-(-cfg.warmup // w)):
        burst()
    h.settle()
    bursts = max(1, cfg.iterations // w)
    before, t0 = h.counters(), max(h.a.clock, h.b.clock)
    for _ in range(bursts):
        burst()
    elapsed = h.a.clock - t0
    h.settle()
    ca, cb = _delta(before, h.counters())
    h.close()
    mbps = bursts * w * size / elapsed  # bytes per microsecond is MB/s
    return BenchRow(test, cfg.variant.value, size, ring.payload_capacity, w, "bandwidth_MBps",
                    mbps, ca, cb)


def run_latency(cfg: BenchConfig) -> BenchResult:
    return BenchResult(cfg, [_latency_row(cfg, s, cfg.ring) for s in cfg.sizes])


def run_bandwidth(cfg: BenchConfig) -> BenchResult:
    return BenchResult(cfg, [_bandwidth_row(cfg, s, cfg.ring) for s in cfg.sizes])


def sweep_ring(base: RingConfig, chunk: int, ring_payload_bytes: int) -> RingConfig:
    """Ring with ``chunk``-byte payload slots and a fixed total payload space."""
    return RingConfig.for_payload(chunk, num_chunks=max(2, ring_payload_bytes // chunk),
                                  tail_update_threshold=base.tail_update_threshold)


def run_chunk_sweep(cfg: BenchConfig) -> BenchResult:
    if cfg.variant is not Variant.PIPELINE:
        raise ConfigError("the chunk sweep runs the pipeline variant")
    space = cfg.ring.num_chunks * cfg.ring.payload_capacity
    result = BenchResult(cfg)
    for size in cfg.sizes:
        for chunk in cfg.sweep_chunks:
            result.rows.append(_bandwidth_row(cfg, size, sweep_ring(cfg.ring, chunk, space), "sweep"))
    return result


RUNNERS = {"latency": run_latency, "bandwidth": run_bandwidth, "sweep": run_chunk_sweep}


def run(cfg: BenchConfig) -> BenchResult:
    return RUNNERS[cfg.test](cfg)


def metadata_line(cfg: BenchConfig) -> str:
    m = cfg.model
    parts = [f"window={cfg.window}", f"iterations={cfg.iterations}", f"warmup={cfg.warmup}",
             f"seed={cfg.seed}", f"num_chunks={cfg.ring.num_chunks}",
             f"chunk_size_bytes={cfg.ring.chunk_size}",
             f"tail_update_threshold={cfg.ring.tail_update_threshold}",
             f"zerocopy_threshold={cfg.zerocopy_threshold}",
             f"regcache={'on' if cfg.cache.enabled else 'off'}",
             f"torn_delivery={int(cfg.torn_delivery)}",
             *(f"{key}={getattr(m, attr)!r}" for key, attr in MODEL_KEYS.items()),
             "ack=1-byte reverse message per burst"]
    return "# " + " ".join(parts)


def render(results: list[BenchResult]) -> str:
    rows = [r for res in results for r in res.rows]
    if not rows:
        raise ValueError("no results to report")
    buf = io.StringIO()
    buf.write(metadata_line(results[0].config) + "\n")
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow(r.csv_fields())
    return buf.getvalue()


def report(results: list[BenchResult] | BenchResult, path) -> None:
    """Write the CSV report; ``path`` of ``-`` or ``None`` means stdout."""
    if isinstance(results, BenchResult):
        results = [results]
    text = render(results)
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def with_chunk(cfg: BenchConfig, chunk_payload: int) -> BenchConfig:
    space = cfg.ring.num_chunks * cfg.ring.payload_capacity
    return replace(cfg, ring=RingConfig.for_payload(
        chunk_payload, num_chunks=max(2, space // chunk_payload),
        tail_update_threshold=cfg.ring.tail_update_threshold))
