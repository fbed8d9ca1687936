"""Typed client for the depot stream protocol.

A session is one TCP connection, one request at a time; callers needing
parallelism open more sessions. Payloads larger than one frame are split into
sequential 1 MiB pieces. There are no hidden retries: a timeout on a
side-effecting verb surfaces as ``Timeout`` and it is the caller's decision
what to do next (retry safety exists only in datagram mode, where the
receiver deduplicates).
"""

from __future__ import annotations

import socket
from typing import NamedTuple, Optional

from .capability import Capability, CapabilitySet, Hardness, parse_capability
from .depot import LoadResult
from .errors import ConnectionLost, MalformedFrame, Timeout, error_for_code
from .nfu import OutputsState, ResourceBudget, TransformResult, TransformStatus
from .wire import (
    AllocateRequest,
    LoadRequest,
    ProbeRequest,
    ReleaseRequest,
    RenewRequest,
    Request,
    StatsRequest,
    StoreRequest,
    TransferRequest,
    TransformRequest,
    encode_request,
    parse_response_header,
)

PIECE_SIZE = 1024 * 1024
DEFAULT_TIMEOUT_MS = 5000


class ProbeInfo(NamedTuple):
    capacity: int
    used: int
    expires_in_ms: int
    hardness: Hardness


class StatsInfo(NamedTuple):
    sum_hard: int
    sum_soft: int
    bytes_in_use: int
    live_allocations: int
    preemptions: tuple  # (best_effort, soft, hard)


class DepotClient:
    """One stream session against one depot."""

    def __init__(self, addr: str, timeout_ms: int = DEFAULT_TIMEOUT_MS):
        self.addr = addr
        host, port_text = addr.rsplit(":", 1)
        try:
            self._sock = socket.create_connection((host, int(port_text)), timeout=timeout_ms / 1000)
        except socket.timeout as exc:
            raise Timeout(f"connect to {addr} timed out") from exc
        except OSError as exc:
            raise ConnectionLost(f"cannot connect to {addr}: {exc}") from exc
        self._sock.settimeout(timeout_ms / 1000)
        self._buf = bytearray()

    # ----------------------------------------------------------------- verbs

    def allocate(self, capacity: int, duration: int, hardness: Hardness) -> CapabilitySet:
        tokens, _ = self._request(AllocateRequest(capacity, duration, hardness), 3)
        read, write, manage = (parse_capability(t) for t in tokens)
        return CapabilitySet(read=read, write=write, manage=manage)

    def store(self, cap: Capability, offset: int, data: bytes) -> int:
        """Write ``data`` at ``offset``, split into sequential 1 MiB frames."""
        if not data:
            tokens, _ = self._request(StoreRequest(cap, offset, b""), 1)
            return int(tokens[0])
        written = 0
        while written < len(data):
            piece = data[written : written + PIECE_SIZE]
            tokens, _ = self._request(StoreRequest(cap, offset + written, piece), 1)
            written += int(tokens[0])
        return written

    def load(self, cap: Capability, offset: int, length: int) -> LoadResult:
        """Read ``length`` bytes from ``offset`` in 1 MiB pieces."""
        parts = []
        unknown = False
        fetched = 0
        while True:
            n = min(PIECE_SIZE, length - fetched)
            tokens, payload = self._request(
                LoadRequest(cap, offset + fetched, n), 2, payload_expected=True
            )
            if len(payload) != int(tokens[0]):
                raise MalformedFrame("response payload length mismatch")
            unknown = unknown or tokens[1] == "1"
            parts.append(payload)
            fetched += n
            if fetched >= length:
                return LoadResult(b"".join(parts), unknown)

    def probe(self, cap: Capability) -> ProbeInfo:
        tokens, _ = self._request(ProbeRequest(cap), 4)
        return ProbeInfo(
            capacity=int(tokens[0]),
            used=int(tokens[1]),
            expires_in_ms=int(tokens[2]),
            hardness=Hardness(tokens[3]),
        )

    def renew(self, cap: Capability, extension: int) -> int:
        """Returns the renewed lease's remaining lifetime in milliseconds."""
        tokens, _ = self._request(RenewRequest(cap, extension), 1)
        return int(tokens[0])

    def release(self, cap: Capability) -> None:
        self._request(ReleaseRequest(cap), 0)

    def transfer(
        self, src: Capability, src_offset: int, dst: Capability, dst_offset: int, length: int
    ) -> int:
        """Ask the *source* depot (this session's depot) to push a range."""
        tokens, _ = self._request(TransferRequest(src, src_offset, dst, dst_offset, length), 1)
        return int(tokens[0])

    def transform(
        self,
        op_name: str,
        inputs,
        outputs,
        budget: ResourceBudget,
        params: Optional[dict] = None,
    ) -> TransformResult:
        req = TransformRequest(
            op_name=op_name,
            inputs=tuple(inputs),
            outputs=tuple(outputs),
            max_wall_ms=budget.max_wall_ms,
            max_scratch_bytes=budget.max_scratch_bytes,
            max_io_bytes=budget.max_io_bytes,
            params=tuple((params or {}).items()),
        )
        tokens, _ = self._request(req, 4)
        return TransformResult(
            status=TransformStatus(tokens[0]),
            io_bytes_used=int(tokens[1]),
            wall_ms_used=int(tokens[2]),
            outputs_state=OutputsState(tokens[3]),
        )

    def stats(self) -> StatsInfo:
        tokens, _ = self._request(StatsRequest(), 7)
        numbers = [int(t) for t in tokens]
        return StatsInfo(*numbers[:4], preemptions=tuple(numbers[4:]))

    # ------------------------------------------------------------- transport

    def _request(self, req: Request, n_tokens: int, payload_expected: bool = False):
        try:
            self._sock.sendall(encode_request(req))
            line = self._readline()
        except socket.timeout as exc:
            raise Timeout(f"{req.verb} against {self.addr} timed out") from exc
        except OSError as exc:
            raise ConnectionLost(f"{req.verb} against {self.addr}: {exc}") from exc
        kind, parsed = parse_response_header(line)
        if kind == "ERR":
            code, message = parsed
            raise error_for_code(code, message)
        if len(parsed) != n_tokens:
            raise MalformedFrame(
                f"{req.verb} response carries {len(parsed)} tokens, expected {n_tokens}"
            )
        payload = b""
        if payload_expected:
            try:
                payload = self._read_exact(int(parsed[0]))
            except socket.timeout as exc:
                raise Timeout(f"{req.verb} payload from {self.addr} timed out") from exc
            except OSError as exc:
                raise ConnectionLost(f"{req.verb} payload from {self.addr}: {exc}") from exc
        return parsed, payload

    def _readline(self) -> bytes:
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[: nl + 1])
                del self._buf[: nl + 1]
                return line
            if len(self._buf) > 4096:
                raise MalformedFrame("response header too long")
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionLost(f"server {self.addr} closed the connection")
            self._buf += chunk

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self._sock.recv(min(65536, n - len(self._buf)))
            if not chunk:
                raise ConnectionLost(f"server {self.addr} closed mid-payload")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    # --------------------------------------------------------------- plumbing

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "DepotClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
