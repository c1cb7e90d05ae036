"""Pin-down cache: keep user-buffer registrations alive after release.

Lookups match on the exact ``(base, length)`` pair. Released entries stay
registered until capacity pressure evicts them, least recently used first.
Entries still referenced are never evicted. Endpoint memory is never unmapped
in the simulator, so no invalidation hook is needed.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .errors import CacheError
from .fabric import Endpoint, MemoryRegion

STATS_FIELDS = ("acquires", "hits", "misses", "evictions", "pinned_bytes")


@dataclass(frozen=True)
class CacheConfig:
    max_entries: int = 1024
    max_pinned_bytes: int = 256 << 20
    enabled: bool = True

    def __post_init__(self):
        if self.max_entries < 1:
            raise CacheError("max_entries must be >= 1")
        if self.max_pinned_bytes < 1:
            raise CacheError("max_pinned_bytes must be >= 1")


@dataclass
class CacheEntry:
    base: int
    length: int
    region: MemoryRegion
    refcount: int = 0
    last_use: int = 0


@dataclass(frozen=True)
class CacheStats:
    acquires: int
    hits: int
    misses: int
    evictions: int
    pinned_bytes: int

    @staticmethod
    def csv_header() -> str:
        return ",".join(STATS_FIELDS)

    def csv_row(self) -> str:
        return ",".join(str(getattr(self, f)) for f in STATS_FIELDS)


class RegistrationCache:
    def __init__(self, ep: Endpoint, config: CacheConfig | None = None):
        self.ep = ep
        self.config = config or CacheConfig()
        self._entries: "OrderedDict[tuple[int, int], CacheEntry]" = OrderedDict()
        self._by_region: dict[int, CacheEntry] = {}
        self._stamp = 0
        self.acquires = self.hits = self.misses = self.evictions = 0
        self.releases = 0
        self.pinned_bytes = 0

    def __len__(self) -> int:
        return len(self._entries)

    def acquire(self, base: int, length: int) -> MemoryRegion:
        self.acquires += 1
        self._stamp += 1
        key = (base, length)
        if not self.config.enabled:
            self.misses += 1
            region = self.ep.register(base, length)
            self._by_region[region.region_id] = CacheEntry(base, length, region, 1, self._stamp)
            self.pinned_bytes += length
            return region
        entry = self._entries.get(key)
        if entry is not None:
            self.hits += 1
            entry.refcount += 1
            entry.last_use = self._stamp
            self._entries.move_to_end(key)
            return entry.region
        self.misses += 1
        if length > self.config.max_pinned_bytes:
            raise CacheError(f"buffer of {length} bytes exceeds max_pinned_bytes")
        self.evict_to_fit(length)
        if (len(self._entries) >= self.config.max_entries
                or self.pinned_bytes + length > self.config.max_pinned_bytes):
            raise CacheError("registration cache full: every entry is in use")
        region = self.ep.register(base, length)
        entry = CacheEntry(base, length, region, 1, self._stamp)
        self._entries[key] = entry
        self._by_region[region.region_id] = entry
        self.pinned_bytes += length
        return region

    def release(self, region: MemoryRegion) -> None:
        entry = self._by_region.get(region.region_id)
        if entry is None or entry.region != region:
            raise CacheError(f"region {region.region_id} was not acquired from this cache")
        if entry.refcount <= 0:
            raise CacheError(f"region {region.region_id} released more often than acquired")
        entry.refcount -= 1
        self.releases += 1
        if not self.config.enabled:
            del self._by_region[region.region_id]
            self.pinned_bytes -= entry.length
            self.ep.deregister(region)

    def evict_to_fit(self, needed_bytes: int = 0) -> int:
        """Evict idle entries (LRU first) until one more entry of ``needed_bytes`` fits."""
        evicted = 0
        for key in list(self._entries):
            if (len(self._entries) < self.config.max_entries
                    and self.pinned_bytes + needed_bytes <= self.config.max_pinned_bytes):
                break
            entry = self._entries[key]
            if entry.refcount > 0:
                continue
            self._drop(key, entry)
            evicted += 1
        return evicted

    def flush(self) -> int:
        """Deregister every idle entry."""
        n = 0
        for key, entry in list(self._entries.items()):
            if entry.refcount == 0:
                self._drop(key, entry)
                n += 1
        return n

    def _drop(self, key, entry: CacheEntry) -> None:
        del self._entries[key]
        del self._by_region[entry.region.region_id]
        self.pinned_bytes -= entry.length
        self.evictions += 1
        self.ep.deregister(entry.region)

    def entries(self) -> list[CacheEntry]:
        return list(self._entries.values())

    @property
    def live_regions(self) -> int:
        return len(self._by_region)

    def stats(self) -> CacheStats:
        return CacheStats(self.acquires, self.hits, self.misses, self.evictions, self.pinned_bytes)
