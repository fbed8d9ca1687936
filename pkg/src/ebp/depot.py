"""In-process depot: allocation table, lease clock, admission, preemption.

The depot serves leased, size-bounded byte buffers named only by unforgeable
capabilities. Design points that matter for correctness:

* Admission is pure accounting. Hard allocations reserve physical capacity
  (``sum_hard <= total_capacity``); soft allocations reserve against an
  overbooked pool (``sum_hard + sum_soft <= overbook_factor * total_capacity``);
  best-effort allocations reserve nothing and are admitted only against bytes
  physically in use at the moment of the call. An admitted hard reservation
  that squeezes the overbooked pool evicts soft reservations (earliest expiry
  first) until the combined bound holds again, so both pool invariants hold at
  every instant.

* Physical bytes are committed lazily as stores extend an allocation's high
  watermark, never at admission time. Overbooked soft reservations therefore
  collide only when actually used, which is when ``preempt_for`` runs: victims
  are reclaimed strictly in tier order best-effort first, then soft, never
  hard; within a tier earliest expiry wins, ties broken by smallest alloc_id.

* Leases ride the server's monotonic clock. Expired allocations are reclaimed
  lazily by ``sweep_leases`` (periodic, plus opportunistically when admission
  fails); between expiry and sweep, operations fail ``Expired``.

* A store that faults mid-write leaves the buffer in an unknown state: the
  allocation is poisoned and subsequent loads carry ``unknown_state=True``
  until a full-capacity overwrite clears the flag.

Conflicting stores to one allocation serialize on a per-allocation lock;
operations on distinct allocations may proceed concurrently, and the lease
sweeper may run concurrently with request handlers.
"""

from __future__ import annotations

import hmac
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .capability import Capability, CapabilitySet, Hardness, Kind, new_key
from .errors import (
    AdmissionDenied,
    BadCapability,
    Expired,
    NoSuchAllocation,
    OutOfRange,
    ResourceExhausted,
    SizeLimitExceeded,
)

DEFAULT_MAX_ALLOC_SIZE = 16 * 1024 * 1024
DEFAULT_MAX_DURATION = 86400.0
DEFAULT_OVERBOOK_FACTOR = 1.5

# Stores are applied in slices so that injected faults and concurrent readers
# observe a bounded window, not the whole payload.
_STORE_SLICE = 256 * 1024

_CONFIG_FIELDS = {
    "max_alloc_size",
    "max_duration",
    "total_capacity",
    "overbook_factor",
    "listen_addr",
}


@dataclass
class DepotConfig:
    """Static limits of one depot.

    ``overbook_factor`` applies only to the soft admission pool; hard
    reservations are never overbooked.
    """

    total_capacity: int
    max_alloc_size: int = DEFAULT_MAX_ALLOC_SIZE
    max_duration: float = DEFAULT_MAX_DURATION
    overbook_factor: float = DEFAULT_OVERBOOK_FACTOR
    listen_addr: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.total_capacity < 1:
            raise ValueError("total_capacity must be >= 1")
        if self.max_alloc_size < 1:
            raise ValueError("max_alloc_size must be >= 1")
        if self.max_duration < 1:
            raise ValueError("max_duration must be >= 1")
        if self.overbook_factor < 1:
            raise ValueError("overbook_factor must be >= 1")

    @classmethod
    def from_json_file(cls, path: str) -> "DepotConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("depot config must be a JSON object")
        unknown = set(doc) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown depot config fields: {sorted(unknown)}")
        if "total_capacity" not in doc:
            raise ValueError("depot config requires total_capacity")
        return cls(**doc)


class DepotStats(NamedTuple):
    sum_hard: int
    sum_soft: int
    bytes_in_use: int
    live_allocations: int
    preemptions: dict  # Hardness -> victims reclaimed from that tier


class LoadResult(NamedTuple):
    data: bytes
    unknown_state: bool


class AllocationInfo(NamedTuple):
    capacity: int
    used: int
    expiry: float  # absolute, on the depot's clock
    hardness: Hardness


@dataclass
class _Allocation:
    alloc_id: int
    capacity: int
    hardness: Hardness
    expiry: float
    keys: dict  # Kind -> hex key
    used: int = 0
    data: bytearray = field(default_factory=bytearray)
    poisoned: bool = False
    dead: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock)

    @property
    def committed(self) -> int:
        return len(self.data)


class Depot:
    """One depot's allocation table and accounting, no networking attached."""

    def __init__(
        self,
        config: DepotConfig,
        *,
        addr: Optional[str] = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.addr = addr or config.listen_addr
        self._clock = clock
        self._lock = threading.RLock()
        self._table: dict[int, _Allocation] = {}
        self._next_id = 1
        self._sum_hard = 0
        self._sum_soft = 0
        self._bytes_in_use = 0
        self._preemptions = {tier: 0 for tier in Hardness}
        # Test/fault-injection hook: called as hook(alloc_id, bytes_written)
        # between store slices; raising poisons the allocation.
        self.store_fault_hook: Optional[Callable[[int, int], None]] = None

    # ------------------------------------------------------------------ admin

    def now(self) -> float:
        return self._clock()

    def stats(self) -> DepotStats:
        with self._lock:
            return DepotStats(
                sum_hard=self._sum_hard,
                sum_soft=self._sum_soft,
                bytes_in_use=self._bytes_in_use,
                live_allocations=len(self._table),
                preemptions=dict(self._preemptions),
            )

    # ------------------------------------------------------------- allocation

    def allocate(self, capacity: int, duration: float, hardness: Hardness) -> CapabilitySet:
        """Admit a new lease and mint its three capabilities.

        Admission: hard iff ``sum_hard + capacity <= total_capacity``;
        soft iff ``sum_hard + sum_soft + capacity <= overbook_factor *
        total_capacity``; best-effort iff ``bytes_in_use + capacity <=
        total_capacity`` right now, with no reservation held.
        """
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if duration < 1:
            raise ValueError("duration must be >= 1")
        if capacity > self.config.max_alloc_size:
            raise SizeLimitExceeded(
                f"capacity {capacity} exceeds max_alloc_size {self.config.max_alloc_size}"
            )
        with self._lock:
            now = self._clock()
            if not self._admits(capacity, hardness):
                # Expired-but-unswept allocations may be pinning the pools.
                self._sweep_locked(now)
                if not self._admits(capacity, hardness):
                    raise AdmissionDenied(
                        f"{hardness.value} allocation of {capacity} bytes denied"
                    )
            if hardness is Hardness.HARD:
                self._squeeze_soft_pool_locked(capacity)
            alloc_id = self._next_id
            self._next_id += 1
            keys = {kind: new_key() for kind in Kind}
            alloc = _Allocation(
                alloc_id=alloc_id,
                capacity=capacity,
                hardness=hardness,
                expiry=now + min(duration, self.config.max_duration),
                keys=keys,
            )
            self._table[alloc_id] = alloc
            if hardness is Hardness.HARD:
                self._sum_hard += capacity
            elif hardness is Hardness.SOFT:
                self._sum_soft += capacity
            return CapabilitySet(
                read=self._cap(alloc_id, Kind.READ, keys),
                write=self._cap(alloc_id, Kind.WRITE, keys),
                manage=self._cap(alloc_id, Kind.MANAGE, keys),
            )

    def _cap(self, alloc_id: int, kind: Kind, keys: dict) -> Capability:
        return Capability(depot_addr=self.addr, alloc_id=alloc_id, kind=kind, key=keys[kind])

    def _admits(self, capacity: int, hardness: Hardness) -> bool:
        cfg = self.config
        if hardness is Hardness.HARD:
            return self._sum_hard + capacity <= cfg.total_capacity
        if hardness is Hardness.SOFT:
            return self._sum_hard + self._sum_soft + capacity <= cfg.overbook_factor * cfg.total_capacity
        return self._bytes_in_use + capacity <= cfg.total_capacity

    def _squeeze_soft_pool_locked(self, incoming_hard: int) -> None:
        # A hard reservation dominates the overbooked pool: soft reservations
        # are evicted (earliest expiry, then smallest id) until
        # sum_hard + sum_soft stays within overbook_factor * total_capacity.
        # Eviction always suffices because sum_hard + incoming <= total.
        budget = self.config.overbook_factor * self.config.total_capacity
        while self._sum_hard + incoming_hard + self._sum_soft > budget:
            victims = [a for a in self._table.values() if a.hardness is Hardness.SOFT]
            victim = min(victims, key=lambda a: (a.expiry, a.alloc_id))
            self._preemptions[Hardness.SOFT] += 1
            self._reclaim_locked(victim)

    def probe(self, cap: Capability) -> AllocationInfo:
        with self._lock:
            alloc = self._authorize(cap, Kind.MANAGE)
            return AllocationInfo(alloc.capacity, alloc.used, alloc.expiry, alloc.hardness)

    def renew(self, cap: Capability, extension: float) -> float:
        """Extend a lease; the new expiry never drops below the old one."""
        if extension < 1:
            raise ValueError("extension must be >= 1")
        with self._lock:
            alloc = self._authorize(cap, Kind.MANAGE)
            now = self._clock()
            alloc.expiry = max(alloc.expiry, now + min(extension, self.config.max_duration))
            return alloc.expiry

    def release(self, cap: Capability) -> None:
        with self._lock:
            alloc = self._lookup(cap)
            self._check_key(cap, alloc, Kind.MANAGE)
            self._reclaim_locked(alloc)

    def is_unknown_state(self, cap: Capability) -> bool:
        """Poison flag, readable with any valid capability for the allocation."""
        with self._lock:
            alloc = self._lookup(cap)
            self._check_key(cap, alloc, cap.kind)
            return alloc.poisoned

    def mark_unknown(self, cap: Capability) -> None:
        """Flag the allocation poisoned (write or manage capability required).

        Used by the transport layer when a write was interrupted before the
        depot saw the full payload, and by the transform engine on faults.
        """
        with self._lock:
            alloc = self._table.get(cap.alloc_id)
            if alloc is None or alloc.dead:
                return
            if cap.kind not in (Kind.WRITE, Kind.MANAGE):
                raise BadCapability("write or manage capability required")
            self._check_key(cap, alloc, cap.kind)
            alloc.poisoned = True

    # ------------------------------------------------------------------ bytes

    def store(self, cap: Capability, offset: int, payload: bytes) -> int:
        """Write ``payload`` at ``offset``; returns bytes written.

        ``used`` advances to ``max(used, offset + len(payload))``. Growth of
        the physically committed region may preempt lower-tier victims; if the
        shortfall cannot be covered the store fails ``ResourceExhausted``
        before any byte is written. A fault raised mid-write poisons the
        allocation and propagates.
        """
        if offset < 0:
            raise OutOfRange("negative offset")
        with self._lock:
            alloc = self._authorize(cap, Kind.WRITE)
            if offset + len(payload) > alloc.capacity:
                raise OutOfRange(
                    f"store [{offset}, {offset + len(payload)}) exceeds capacity {alloc.capacity}"
                )
        # Lock order is always allocation lock first, table lock nested inside
        # (growth accounting); the table lock is never held while waiting on an
        # allocation lock.
        with alloc.lock:
            if alloc.dead:
                raise NoSuchAllocation("allocation reclaimed during store")
            new_used = max(alloc.used, offset + len(payload))
            self._commit_growth(alloc, new_used - alloc.committed)
            # Advance the watermark before writing: a fault mid-write leaves
            # the whole attempted range readable in unknown state.
            alloc.used = new_used
            self._write_slices(alloc, offset, payload)
            if alloc.poisoned and offset == 0 and len(payload) == alloc.capacity:
                alloc.poisoned = False  # whole-buffer overwrite re-defines the state
            if alloc.dead:
                raise NoSuchAllocation("allocation reclaimed during store")
            return len(payload)

    def _commit_growth(self, alloc: _Allocation, delta: int) -> None:
        # Caller holds alloc.lock; bytes_in_use and alloc.data length move
        # together under the table lock so reclamation accounting stays exact.
        if delta <= 0:
            return
        with self._lock:
            if alloc.dead:
                raise NoSuchAllocation("allocation reclaimed during store")
            free = self.config.total_capacity - self._bytes_in_use
            if free < delta:
                self._preempt_locked(delta - free, alloc.hardness, exclude=alloc.alloc_id)
            alloc.data.extend(bytes(delta))
            self._bytes_in_use += delta

    def _write_slices(self, alloc: _Allocation, offset: int, payload: bytes) -> None:
        view = memoryview(payload)
        pos = 0
        try:
            while pos < len(payload):
                n = min(_STORE_SLICE, len(payload) - pos)
                alloc.data[offset + pos : offset + pos + n] = view[pos : pos + n]
                pos += n
                if self.store_fault_hook is not None:
                    self.store_fault_hook(alloc.alloc_id, pos)
        except BaseException:
            alloc.poisoned = True
            raise

    def load(self, cap: Capability, offset: int, length: int) -> LoadResult:
        """Read ``length`` bytes from ``offset``; never past ``used``.

        Bytes below ``used`` that were never written read as zero.
        """
        if offset < 0 or length < 0:
            raise OutOfRange("negative offset or length")
        with self._lock:
            alloc = self._authorize(cap, Kind.READ)
        with alloc.lock:
            if alloc.dead:
                raise NoSuchAllocation("allocation reclaimed during load")
            if offset + length > alloc.used:
                raise OutOfRange(
                    f"load [{offset}, {offset + length}) exceeds used {alloc.used}"
                )
            return LoadResult(bytes(alloc.data[offset : offset + length]), alloc.poisoned)

    def transform_write(self, cap: Capability, result: bytes) -> int:
        """Whole-buffer write used by the transform engine.

        Unlike ``store``, the result *defines* the buffer: ``used`` is set to
        exactly ``len(result)`` (a transform may extend or shrink the defined
        region, up to capacity). The poison flag clears only when the result
        covers the full capacity.
        """
        with self._lock:
            alloc = self._authorize(cap, Kind.WRITE)
            if len(result) > alloc.capacity:
                raise OutOfRange(
                    f"transform result of {len(result)} bytes exceeds capacity {alloc.capacity}"
                )
        with alloc.lock:
            if alloc.dead:
                raise NoSuchAllocation("allocation reclaimed during transform")
            self._commit_growth(alloc, len(result) - alloc.committed)
            alloc.used = len(result)
            self._write_slices(alloc, 0, result)
            if len(result) == alloc.capacity:
                alloc.poisoned = False
            return len(result)

    def transfer_local(
        self, src: Capability, src_offset: int, dst: Capability, dst_offset: int, length: int
    ) -> int:
        """Copy between two allocations of this depot.

        Copies bytes only; the source's unknown-state flag is the reader's
        concern, not laundered and not propagated.
        """
        data, _unknown = self.load(src, src_offset, length)
        self.store(dst, dst_offset, data)
        return length

    # ----------------------------------------------------------------- leases

    def sweep_leases(self, now: Optional[float] = None) -> int:
        """Reclaim every allocation whose lease expired strictly before ``now``."""
        with self._lock:
            return self._sweep_locked(self._clock() if now is None else now)

    def _sweep_locked(self, now: float) -> int:
        expired = [a for a in self._table.values() if a.expiry < now]
        for alloc in sorted(expired, key=lambda a: a.alloc_id):
            self._reclaim_locked(alloc)
        return len(expired)

    def preempt_for(self, bytes_needed: int, requesting_tier: Hardness) -> list[int]:
        """Free physical bytes for a higher-tier demand; returns victim ids.

        Victims come only from tiers strictly below ``requesting_tier``,
        best-effort before soft; hard allocations are never preempted here
        (hard-vs-hard exhaustion surfaces as ResourceExhausted). If the
        eligible victims cannot cover the shortfall, nobody is reclaimed.
        """
        if bytes_needed < 0:
            raise ValueError("bytes_needed must be >= 0")
        with self._lock:
            free = self.config.total_capacity - self._bytes_in_use
            if free >= bytes_needed:
                return []
            return self._preempt_locked(bytes_needed - free, requesting_tier)

    def _preempt_locked(
        self, shortfall: int, requesting_tier: Hardness, exclude: Optional[int] = None
    ) -> list[int]:
        candidates = [
            a
            for a in self._table.values()
            if a.hardness.rank < requesting_tier.rank
            and a.committed > 0
            and a.alloc_id != exclude
        ]
        candidates.sort(key=lambda a: (a.hardness.rank, a.expiry, a.alloc_id))
        plan: list[_Allocation] = []
        freed = 0
        for victim in candidates:
            if freed >= shortfall:
                break
            plan.append(victim)
            freed += victim.committed
        if freed < shortfall:
            raise ResourceExhausted(
                f"need {shortfall} bytes; eligible victims hold only {freed}"
            )
        reclaimed = []
        for victim in plan:
            self._preemptions[victim.hardness] += 1
            self._reclaim_locked(victim)
            reclaimed.append(victim.alloc_id)
        return reclaimed

    def _reclaim_locked(self, alloc: _Allocation) -> None:
        del self._table[alloc.alloc_id]
        alloc.dead = True
        self._bytes_in_use -= alloc.committed
        if alloc.hardness is Hardness.HARD:
            self._sum_hard -= alloc.capacity
        elif alloc.hardness is Hardness.SOFT:
            self._sum_soft -= alloc.capacity

    # ------------------------------------------------------------ authorization

    def _lookup(self, cap: Capability) -> _Allocation:
        alloc = self._table.get(cap.alloc_id)
        if alloc is None or alloc.dead:
            raise NoSuchAllocation(f"allocation {cap.alloc_id} not found")
        return alloc

    @staticmethod
    def _check_key(cap: Capability, alloc: _Allocation, required: Kind) -> None:
        if cap.kind is not required:
            raise BadCapability(f"{required.value} capability required, got {cap.kind.value}")
        if not hmac.compare_digest(cap.key, alloc.keys[required]):
            raise BadCapability("key mismatch")

    def _authorize(self, cap: Capability, required: Kind) -> _Allocation:
        alloc = self._lookup(cap)
        self._check_key(cap, alloc, required)
        if alloc.expiry < self._clock():
            raise Expired(f"allocation {cap.alloc_id} lease expired")
        return alloc
