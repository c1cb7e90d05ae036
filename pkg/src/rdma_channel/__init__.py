"""Simulated RDMA fabric and an MPI-style put/get channel on top of it."""

from .bench import BenchConfig, BenchResult, report, run_bandwidth, run_chunk_sweep, run_latency
from .channel import (
    BufferList,
    ChannelConfig,
    ChannelEndpoint,
    PacketKind,
    RendezvousPacket,
    Variant,
    close_channel,
    open_channel,
)
from .errors import (
    CacheError,
    ChannelError,
    ConfigError,
    FabricConnectionError,
    FabricError,
    RdmaChannelError,
    RegistrationError,
    RingError,
    WorkRequestError,
)
from .fabric import (
    Completion,
    Connection,
    CostModel,
    CounterSnapshot,
    Endpoint,
    Fabric,
    MemoryRegion,
    Opcode,
    Status,
    WorkRequest,
    create_fabric,
)
from .regcache import CacheConfig, CacheStats, RegistrationCache
from .ring import PointerMode, Ring, RingConfig, init_ring, release_ring

__all__ = [name for name in dir() if not name.startswith("_")]
