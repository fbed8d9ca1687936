"""Resource-budgeted transforms executed next to the data they touch.

A transform applies one named operation from a static registry to buffers that
all live on the executing depot; it never opens a network connection. Every
run carries a budget over three dimensions -- wall-clock milliseconds, peak
scratch bytes, and I/O bytes (input reads plus output writes) -- enforced
*during* execution, not merely checked up front.

Failure semantics are deliberately blunt: when a run ends in anything other
than ``OK``, every output allocation is poisoned and reads of it report
unknown state until a full-capacity overwrite. Callers detect and recover;
the depot promises nothing.

Operations are pure functions of their inputs and params. The shipped
registry holds exactly: ``checksum-crc32``, ``checksum-sha256``, ``xor``,
``copy-range``, ``fill``, ``rle-compress``, ``rle-decompress``. There is no
code upload; extra operations can only be registered in-process, which keeps
the execution surface auditable.
"""

from __future__ import annotations

import enum
import hashlib
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from .capability import Kind
from .depot import Depot
from .errors import (
    BadCapability,
    DuplicateName,
    EbpError,
    NotLocal,
    OutOfRange,
    UnknownOperation,
)

_CHUNK = 64 * 1024

BUILTIN_OPS = (
    "checksum-crc32",
    "checksum-sha256",
    "xor",
    "copy-range",
    "fill",
    "rle-compress",
    "rle-decompress",
)


@dataclass(frozen=True)
class ResourceBudget:
    max_wall_ms: int
    max_scratch_bytes: int
    max_io_bytes: int

    def __post_init__(self):
        if min(self.max_wall_ms, self.max_scratch_bytes, self.max_io_bytes) <= 0:
            raise ValueError("budget dimensions must be strictly positive")


@dataclass(frozen=True)
class TransformSpec:
    op_name: str
    inputs: tuple
    outputs: tuple
    params: dict
    budget: ResourceBudget


class TransformStatus(enum.Enum):
    OK = "ok"
    BUDGET_EXCEEDED = "budget_exceeded"
    OP_FAULT = "op_fault"


class OutputsState(enum.Enum):
    DEFINED = "defined"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class TransformResult:
    status: TransformStatus
    io_bytes_used: int
    wall_ms_used: int
    outputs_state: OutputsState


class _BudgetStop(Exception):
    pass


class _OpFault(Exception):
    pass


class OpContext:
    """Execution context handed to operations; all I/O and scratch flows
    through it so the budget meter sees every byte."""

    def __init__(self, depot: Depot, spec: TransformSpec):
        self._depot = depot
        self._spec = spec
        self.params = spec.params
        self._budget = spec.budget
        self._io_used = 0
        self._scratch_now = 0
        self._scratch_peak = 0
        self._t0 = time.perf_counter()

    # ---- metering

    @property
    def io_bytes_used(self) -> int:
        return self._io_used

    def wall_ms_used(self) -> int:
        return int((time.perf_counter() - self._t0) * 1000)

    def _charge_io(self, n: int) -> None:
        if self._io_used + n > self._budget.max_io_bytes:
            raise _BudgetStop("io budget")
        self._io_used += n

    def check_wall(self) -> None:
        if self.wall_ms_used() > self._budget.max_wall_ms:
            raise _BudgetStop("wall budget")

    def charge_scratch(self, n: int) -> None:
        self._scratch_now += n
        self._scratch_peak = max(self._scratch_peak, self._scratch_now)
        if self._scratch_peak > self._budget.max_scratch_bytes:
            raise _BudgetStop("scratch budget")

    def release_scratch(self, n: int) -> None:
        self._scratch_now -= n

    # ---- data plane

    @property
    def input_count(self) -> int:
        return len(self._spec.inputs)

    def input_size(self, i: int) -> int:
        cap = self._spec.inputs[i]
        with self._depot._lock:
            return self._depot._authorize(cap, Kind.READ).used

    def read(self, i: int, offset: int, length: int) -> bytes:
        """Read one bounded chunk from an input; charged to the io budget."""
        self.check_wall()
        self._charge_io(length)
        return self._depot.load(self._spec.inputs[i], offset, length).data

    def read_all(self, i: int):
        """Iterate an input front to back in budget-metered chunks."""
        size = self.input_size(i)
        for off in range(0, size, _CHUNK):
            yield self.read(i, off, min(_CHUNK, size - off))
        if size == 0:
            yield b""

    def emit(self, i: int, result: bytes) -> None:
        """Define output ``i`` as exactly ``result``; charged to the io budget."""
        self.check_wall()
        self._charge_io(len(result))
        try:
            self._depot.transform_write(self._spec.outputs[i], bytes(result))
        except OutOfRange as exc:
            raise _OpFault(str(exc)) from exc

    def fault(self, message: str):
        raise _OpFault(message)


OpFn = Callable[[OpContext], None]


@dataclass
class Registry:
    """Named operations; registration is append-only."""

    _ops: dict = field(default_factory=dict)

    def register(self, op_name: str, fn: OpFn) -> None:
        if op_name in self._ops:
            raise DuplicateName(f"operation {op_name!r} already registered")
        self._ops[op_name] = fn

    def resolve(self, op_name: str) -> OpFn:
        try:
            return self._ops[op_name]
        except KeyError:
            raise UnknownOperation(f"no operation named {op_name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._ops)


class NfuEngine:
    """Executes transforms against one depot's allocations."""

    def __init__(self, depot: Depot, registry: Optional[Registry] = None):
        self.depot = depot
        self.registry = registry if registry is not None else builtin_registry()
        self._serial_lock = threading.Lock()
        self._output_locks: dict[int, threading.Lock] = {}

    def register_builtin(self, op_name: str, fn: OpFn) -> None:
        self.registry.register(op_name, fn)

    def execute(self, spec: TransformSpec) -> TransformResult:
        fn = self.registry.resolve(spec.op_name)
        self._validate_caps(spec)
        with self._locks_for(spec.outputs):
            ctx = OpContext(self.depot, spec)
            try:
                fn(ctx)
                ctx.check_wall()
            except _BudgetStop:
                self._poison_outputs(spec)
                return TransformResult(
                    TransformStatus.BUDGET_EXCEEDED,
                    ctx.io_bytes_used,
                    ctx.wall_ms_used(),
                    OutputsState.UNKNOWN,
                )
            except _OpFault:
                self._poison_outputs(spec)
                return TransformResult(
                    TransformStatus.OP_FAULT,
                    ctx.io_bytes_used,
                    ctx.wall_ms_used(),
                    OutputsState.UNKNOWN,
                )
            except EbpError:
                # Lease or admission trouble mid-run: same unknown-state rule.
                self._poison_outputs(spec)
                raise
            return TransformResult(
                TransformStatus.OK,
                ctx.io_bytes_used,
                ctx.wall_ms_used(),
                OutputsState.DEFINED,
            )

    def _validate_caps(self, spec: TransformSpec) -> None:
        for cap in (*spec.inputs, *spec.outputs):
            if cap.depot_addr != self.depot.addr:
                raise NotLocal(f"capability names depot {cap.depot_addr}, not {self.depot.addr}")
        for cap, kind in [(c, Kind.READ) for c in spec.inputs] + [
            (c, Kind.WRITE) for c in spec.outputs
        ]:
            if cap.kind is not kind:
                raise BadCapability(f"{kind.value} capability required")
            with self.depot._lock:
                self.depot._authorize(cap, kind)

    def _locks_for(self, outputs: tuple):
        # Overlapping output sets serialize; disjoint sets run concurrently.
        with self._serial_lock:
            locks = [
                self._output_locks.setdefault(cap.alloc_id, threading.Lock())
                for cap in sorted(set(outputs), key=lambda c: c.alloc_id)
            ]
        return _MultiLock(locks)

    def _poison_outputs(self, spec: TransformSpec) -> None:
        for cap in spec.outputs:
            try:
                self.depot.mark_unknown(cap)
            except EbpError:
                pass  # already reclaimed; nothing left to poison


class _MultiLock:
    def __init__(self, locks):
        self._locks = locks

    def __enter__(self):
        for lock in self._locks:
            lock.acquire()

    def __exit__(self, *exc):
        for lock in reversed(self._locks):
            lock.release()
        return False


# --------------------------------------------------------------- built-ins


def _int_param(ctx: OpContext, name: str, default: Optional[int] = None) -> int:
    raw = ctx.params.get(name)
    if raw is None:
        if default is None:
            ctx.fault(f"missing required param {name!r}")
        return default
    try:
        value = int(raw)
    except ValueError:
        ctx.fault(f"param {name!r} must be an integer, got {raw!r}")
    if value < 0:
        ctx.fault(f"param {name!r} must be >= 0")
    return value


def _op_checksum_crc32(ctx: OpContext) -> None:
    crc = 0
    for chunk in ctx.read_all(0):
        crc = zlib.crc32(chunk, crc)
    ctx.emit(0, crc.to_bytes(4, "big"))


def _op_checksum_sha256(ctx: OpContext) -> None:
    digest = hashlib.sha256()
    for chunk in ctx.read_all(0):
        digest.update(chunk)
    ctx.emit(0, digest.digest())


def _op_xor(ctx: OpContext) -> None:
    if ctx.input_count != 2:
        ctx.fault("xor takes exactly two inputs")
    a_size, b_size = ctx.input_size(0), ctx.input_size(1)
    if a_size != b_size:
        ctx.fault(f"xor inputs differ in length: {a_size} vs {b_size}")
    out = bytearray()
    ctx.charge_scratch(a_size)
    for off in range(0, a_size, _CHUNK):
        n = min(_CHUNK, a_size - off)
        a = ctx.read(0, off, n)
        b = ctx.read(1, off, n)
        out += (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")
    ctx.emit(0, bytes(out))
    ctx.release_scratch(a_size)


def _op_copy_range(ctx: OpContext) -> None:
    src_offset = _int_param(ctx, "src_offset", 0)
    length = _int_param(ctx, "length")
    if src_offset + length > ctx.input_size(0):
        ctx.fault("copy-range source range exceeds input")
    out = bytearray()
    ctx.charge_scratch(length)
    for off in range(src_offset, src_offset + length, _CHUNK):
        out += ctx.read(0, off, min(_CHUNK, src_offset + length - off))
    ctx.emit(0, bytes(out))
    ctx.release_scratch(length)


def _op_fill(ctx: OpContext) -> None:
    value = _int_param(ctx, "value")
    length = _int_param(ctx, "length")
    if value > 255:
        ctx.fault("fill value must be a single byte (0-255)")
    ctx.charge_scratch(length)
    ctx.check_wall()
    ctx.emit(0, bytes([value]) * length)
    ctx.release_scratch(length)


def _op_rle_compress(ctx: OpContext) -> None:
    """Run-length encode input 0 as (count 1-255, value) byte pairs."""
    out = bytearray()
    charged = 0
    run_value = -1
    run_len = 0
    for chunk in ctx.read_all(0):
        for byte in chunk:
            if byte == run_value and run_len < 255:
                run_len += 1
            else:
                if run_len:
                    out += bytes((run_len, run_value))
                run_value = byte
                run_len = 1
        ctx.charge_scratch(len(out) - charged)
        charged = len(out)
        ctx.check_wall()
    if run_len:
        out += bytes((run_len, run_value))
        ctx.charge_scratch(len(out) - charged)
        charged = len(out)
    ctx.emit(0, bytes(out))
    ctx.release_scratch(charged)


def _op_rle_decompress(ctx: OpContext) -> None:
    out = bytearray()
    charged = 0
    pending = b""
    for chunk in ctx.read_all(0):
        data = pending + chunk
        pending = b""
        if len(data) % 2:
            data, pending = data[:-1], data[-1:]
        for i in range(0, len(data), 2):
            count, value = data[i], data[i + 1]
            if count == 0:
                ctx.fault("rle run of length zero")
            out += bytes([value]) * count
        ctx.charge_scratch(len(out) - charged)
        charged = len(out)
        ctx.check_wall()
    if pending:
        ctx.fault("rle stream has odd length")
    ctx.emit(0, bytes(out))
    ctx.release_scratch(charged)


def builtin_registry() -> Registry:
    reg = Registry()
    reg.register("checksum-crc32", _op_checksum_crc32)
    reg.register("checksum-sha256", _op_checksum_sha256)
    reg.register("xor", _op_xor)
    reg.register("copy-range", _op_copy_range)
    reg.register("fill", _op_fill)
    reg.register("rle-compress", _op_rle_compress)
    reg.register("rle-decompress", _op_rle_decompress)
    return reg
