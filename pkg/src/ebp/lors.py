"""File-level runtime over exNodes: upload, download, repair.

Upload splits a byte sequence into fixed-size chunks and places each chunk on
``k`` distinct depots chosen round-robin (chunk ``i`` starts its candidate
list at depot index ``i mod len(depots)``), so placement is deterministic
given the same inputs. Download fetches extents in parallel, trying each
extent's replicas in list order and advancing on any error, including a
replica whose bytes carry the unknown-state flag: flagged bytes are treated
as a failed replica, never returned to the caller. Repair restores the
replica count by depot-to-depot transfer from a surviving replica, so payload
bytes never cross the repairing client's link.

The runtime is stateless: leases on uploaded chunks default to one hour and
keeping them alive is the policy daemon's job, not ours.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Union

from .capability import Hardness
from .client import DepotClient
from .errors import EbpError, ExtentUnavailable, InsufficientDepots
from .exnode import ExNode, Extent, Replica, make_exnode, validate

DEFAULT_LEASE_S = 3600
DEFAULT_PARALLELISM = 4


def upload(
    source: Union[bytes, str],
    depots: list,
    chunk_size: int,
    k: int,
    *,
    lease_s: int = DEFAULT_LEASE_S,
    hardness: Hardness = Hardness.SOFT,
    parallelism: int = DEFAULT_PARALLELISM,
    timeout_ms: int = 5000,
    metadata: Optional[dict] = None,
) -> ExNode:
    """Stripe ``source`` (bytes or a file path) across ``depots``.

    Each chunk lands on ``k`` distinct depots; a depot that refuses or cannot
    be reached is skipped and the round-robin continues, failing with
    InsufficientDepots only when a chunk cannot reach ``k`` replicas after
    trying every depot.
    """
    data = _read_source(source)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if k < 1 or k > len(depots):
        raise ValueError(f"replication k={k} must be between 1 and {len(depots)}")
    if not data:
        return make_exnode(0, [], metadata)
    chunks = [(i, data[off : off + chunk_size]) for i, off in enumerate(range(0, len(data), chunk_size))]
    dead: set = set()
    dead_lock = threading.Lock()

    def place(job) -> Extent:
        index, chunk = job
        candidates = [depots[(index + j) % len(depots)] for j in range(len(depots))]
        replicas = []
        last_error: Optional[EbpError] = None
        for addr in candidates:
            if len(replicas) >= k:
                break
            with dead_lock:
                if addr in dead:
                    continue
            try:
                with DepotClient(addr, timeout_ms=timeout_ms) as cli:
                    caps = cli.allocate(len(chunk), lease_s, hardness)
                    cli.store(caps.write, 0, chunk)
                replicas.append(
                    Replica(depot_addr=addr, read=caps.read, write=caps.write, manage=caps.manage)
                )
            except EbpError as exc:
                last_error = exc
                if exc.code in ("ConnectionLost", "Timeout"):
                    with dead_lock:
                        dead.add(addr)
        if len(replicas) < k:
            detail = f"; last error: {last_error.code}: {last_error.message}" if last_error else ""
            raise InsufficientDepots(
                f"chunk {index} reached {len(replicas)} of {k} replicas{detail}"
            )
        return Extent(offset=index * chunk_size, length=len(chunk), replicas=tuple(replicas))

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        extents = list(pool.map(place, chunks))
    return make_exnode(len(data), extents, metadata)


def download(
    exnode: ExNode,
    *,
    parallelism: int = DEFAULT_PARALLELISM,
    timeout_ms: int = 5000,
) -> bytes:
    """Reassemble the full file; exact bytes or ExtentUnavailable."""
    _check(exnode)
    if exnode.total_length == 0:
        return b""
    buffer = bytearray(exnode.total_length)

    def fetch(extent: Extent) -> None:
        failures = []
        for replica in extent.replicas:
            try:
                with DepotClient(replica.depot_addr, timeout_ms=timeout_ms) as cli:
                    result = cli.load(replica.read, replica.base, extent.length)
                if result.unknown_state:
                    failures.append(f"{replica.depot_addr}: unknown-state bytes")
                    continue
                buffer[extent.offset : extent.offset + extent.length] = result.data
                return
            except EbpError as exc:
                failures.append(f"{replica.depot_addr}: {exc.code}")
        raise ExtentUnavailable(
            f"logical range [{extent.offset}, {extent.offset + extent.length})"
            f" unavailable: {'; '.join(failures)}"
        )

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for maybe_error in pool.map(fetch, exnode.extents):
            _ = maybe_error  # exceptions re-raise from map
    return bytes(buffer)


def repair(
    exnode: ExNode,
    k: int,
    depots: list,
    *,
    lease_s: int = DEFAULT_LEASE_S,
    hardness: Hardness = Hardness.SOFT,
    timeout_ms: int = 5000,
) -> ExNode:
    """Bring every extent back to >= k live replicas; returns a new exNode.

    New replicas are filled by asking a surviving replica's depot to TRANSFER
    the extent directly to the new allocation. Extents already at ``k`` are
    returned untouched (dead replica entries and all); repaired extents keep
    only live replicas plus the new ones.
    """
    _check(exnode)
    new_extents = []
    for extent in exnode.extents:
        live = [r for r in extent.replicas if _alive(r, extent.length, timeout_ms)]
        if len(live) >= k:
            new_extents.append(extent)
            continue
        if not live:
            raise ExtentUnavailable(
                f"logical range [{extent.offset}, {extent.offset + extent.length})"
                " has no live replica to copy from"
            )
        hosting = {r.depot_addr for r in live}
        replicas = list(live)
        last_error: Optional[EbpError] = None
        for addr in depots:
            if len(replicas) >= k:
                break
            if addr in hosting:
                continue
            source = replicas[0]
            try:
                with DepotClient(addr, timeout_ms=timeout_ms) as dst_cli:
                    caps = dst_cli.allocate(extent.length, lease_s, hardness)
                with DepotClient(source.depot_addr, timeout_ms=timeout_ms) as src_cli:
                    src_cli.transfer(source.read, source.base, caps.write, 0, extent.length)
                replicas.append(
                    Replica(depot_addr=addr, read=caps.read, write=caps.write, manage=caps.manage)
                )
                hosting.add(addr)
            except EbpError as exc:
                last_error = exc
        if len(replicas) < k:
            if last_error is not None:
                raise last_error
            raise InsufficientDepots(
                f"extent at {extent.offset}: only {len(replicas)} of {k} replicas placeable"
            )
        new_extents.append(Extent(offset=extent.offset, length=extent.length, replicas=tuple(replicas), extra=extent.extra))
    rebuilt = ExNode(
        total_length=exnode.total_length,
        extents=tuple(new_extents),
        metadata=exnode.metadata,
        version=exnode.version,
        extra=exnode.extra,
    )
    return rebuilt


def release_all(exnode: ExNode, *, timeout_ms: int = 5000) -> int:
    """Best-effort release of every replica holding a manage capability."""
    released = 0
    for extent in exnode.extents:
        for replica in extent.replicas:
            if replica.manage is None:
                continue
            try:
                with DepotClient(replica.depot_addr, timeout_ms=timeout_ms) as cli:
                    cli.release(replica.manage)
                released += 1
            except EbpError:
                pass
    return released


def _alive(replica: Replica, length: int, timeout_ms: int) -> bool:
    """A replica counts as live when its bytes are reachable and trusted.

    Reading the extent's last byte proves the allocation still exists, the
    lease is current, the full range is present, and the flag is clean.
    """
    probe_offset = replica.base + max(0, length - 1)
    probe_len = 1 if length else 0
    try:
        with DepotClient(replica.depot_addr, timeout_ms=timeout_ms) as cli:
            result = cli.load(replica.read, probe_offset, probe_len)
        return not result.unknown_state
    except EbpError:
        return False


def _check(exnode: ExNode) -> None:
    problems = validate(exnode)
    if problems:
        from .errors import ValidationFailed

        raise ValidationFailed("; ".join(problems))


def _read_source(source: Union[bytes, str]) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    with open(source, "rb") as fh:
        return fh.read()
