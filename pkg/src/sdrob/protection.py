"""Protection backends: key-tagged regions and per-thread access policies.

Three interchangeable backends enforce (or record) the same model:

* ``hardware``: userspace protection keys (pkey_alloc / pkey_mprotect /
  pkey_set). Per-thread policy switches are a few register writes; loads
  and stores are routed through the kernel's usercopy path, which honors
  the calling thread's key rights. Only available when CPU and kernel
  support it.
* ``paging``: plain mprotect. Page permissions are process-global, so
  this backend refuses to have more than one thread inside nested
  domains at a time; accesses re-apply the calling thread's policy when
  another thread switched last. Transfers use process_vm_readv/writev
  (single copy, checks VMA permissions) with a pipe fallback.
* ``audit``: no OS enforcement. Policies are recorded per thread and
  every access is checked at the API boundary; violations are recorded
  and surfaced exactly like faults. Deterministic, cheap, and portable,
  meant for unit tests.

Key 0 is permanently the root domain's; key 1 tags the monitor's own
data region and is never readable or writable from any policy applied on
behalf of sandboxed code.
"""

import ctypes
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import IntEnum

from . import mem
from .errors import BackendUnavailable, DomainError, Err, KeyExhausted, MemoryFault
from .faults import FaultCause, FaultInfo

ROOT_KEY = 0
MONITOR_KEY = 1
RESERVED_KEYS = (ROOT_KEY, MONITOR_KEY)

HARDWARE_KEY_BUDGET = 16   # one 4-bit key space; root + monitor reserved
SOFTWARE_KEY_BUDGET = 256  # paging/audit: no hardware scarcity to mimic


class AccessLevel(IntEnum):
    NO_ACCESS = 0
    READ_ONLY = 1
    READ_WRITE = 2


class PolicyVector:
    """Mapping from protection key to AccessLevel, defaulting to NO_ACCESS."""

    __slots__ = ("_levels",)

    def __init__(self, levels: dict[int, AccessLevel] | None = None):
        self._levels = dict(levels or {})

    def get(self, key: int) -> AccessLevel:
        return self._levels.get(key, AccessLevel.NO_ACCESS)

    def items(self):
        return self._levels.items()

    def with_grant(self, key: int, level: AccessLevel) -> "PolicyVector":
        merged = dict(self._levels)
        merged[key] = level
        return PolicyVector(merged)

    def __eq__(self, other):
        if not isinstance(other, PolicyVector):
            return NotImplemented
        keys = set(self._levels) | set(other._levels)
        return all(self.get(k) == other.get(k) for k in keys)

    def __repr__(self):
        body = ", ".join(f"{k}:{v.name}" for k, v in sorted(self._levels.items())
                         if v != AccessLevel.NO_ACCESS)
        return f"PolicyVector({body})"


@dataclass
class Violation:
    """Audit-backend record of a checked-and-denied access."""

    thread: int
    addr: int
    kind: str  # "read" | "write"
    key: int
    level: AccessLevel


def _prot_for(level: AccessLevel) -> int:
    if level == AccessLevel.READ_WRITE:
        return mem.PROT_RW
    if level == AccessLevel.READ_ONLY:
        return mem.PROT_READ
    return mem.PROT_NONE


class Backend:
    """Shared key bookkeeping and access-plane scaffolding."""

    name = "abstract"
    key_budget = SOFTWARE_KEY_BUDGET
    supports_concurrent_nesting = True

    def __init__(self, memory: mem.MemorySystem):
        self.memory = memory
        self._lock = threading.RLock()
        self._allocated: set[int] = set(RESERVED_KEYS)
        self._policies: dict[int, PolicyVector] = {}
        # Raised instead of returning when an access is denied; the
        # runtime replaces it with the fault orchestrator.
        self.fault_sink = _default_sink

    # -- key management ----------------------------------------------------

    def key_allocate(self) -> int:
        with self._lock:
            for key in range(2, self.key_budget):
                if key not in self._allocated:
                    self._allocated.add(key)
                    self._on_key_allocated(key)
                    return key
        raise KeyExhausted(f"all {self.key_budget} keys in use")

    def key_release(self, key: int) -> None:
        with self._lock:
            if key in RESERVED_KEYS:
                raise DomainError(Err.RESERVED_KEY, f"key {key} is reserved")
            if key not in self._allocated:
                raise DomainError(Err.NOT_ALLOCATED, f"key {key} not allocated")
            self._allocated.discard(key)
            self._on_key_released(key)

    def keys_in_use(self) -> int:
        with self._lock:
            return len(self._allocated)

    def _on_key_allocated(self, key: int) -> None:
        pass

    def _on_key_released(self, key: int) -> None:
        pass

    # -- tagging and policy ------------------------------------------------

    def tag_region(self, region: mem.Region, key: int) -> None:
        if not mem.is_page_aligned(region.base) or not mem.is_page_aligned(region.length):
            raise DomainError(Err.UNALIGNED, "region must be page aligned")
        if region.length <= 0:
            raise DomainError(Err.UNALIGNED, "empty region")
        with self._lock:
            if key not in self._allocated:
                raise DomainError(Err.NOT_ALLOCATED, f"key {key} not allocated")
            region.key = key
            self._retag(region)

    def _retag(self, region: mem.Region) -> None:
        pass

    def apply_policy(self, thread: int, policy: PolicyVector) -> None:
        if policy.get(MONITOR_KEY) != AccessLevel.NO_ACCESS:
            raise AssertionError("policies must never expose the monitor key")
        with self._lock:
            self._policies[thread] = policy
            self._apply(thread, policy)

    def policy_for(self, thread: int) -> PolicyVector:
        with self._lock:
            return self._policies.get(thread, PolicyVector({ROOT_KEY: AccessLevel.READ_WRITE}))

    def _apply(self, thread: int, policy: PolicyVector) -> None:
        raise NotImplementedError

    # -- user access plane ---------------------------------------------------

    def load(self, thread: int, addr: int, n: int) -> bytes:
        raise NotImplementedError

    def store(self, thread: int, addr: int, data: bytes) -> None:
        raise NotImplementedError

    def access_allowed(self, addr: int, kind: str, thread: int) -> bool:
        """Oracle: would the thread's recorded policy admit this access?"""
        region = self.memory.registry.find(addr)
        if region is None:
            key = ROOT_KEY
        else:
            if addr < region.usable_base:
                return False  # guard page
            key = region.key
        level = self.policy_for(thread).get(key)
        need = AccessLevel.READ_ONLY if kind == "read" else AccessLevel.READ_WRITE
        return level >= need

    # -- shared fault helpers ------------------------------------------------

    def _fault(self, thread: int, addr: int, kind: str) -> None:
        region = self.memory.registry.find(addr)
        if region is None or addr < region.usable_base:
            cause = FaultCause.PAGE_VIOLATION
        else:
            level = self.policy_for(thread).get(region.key)
            need = AccessLevel.READ_ONLY if kind == "read" else AccessLevel.READ_WRITE
            cause = FaultCause.KEY_VIOLATION if level < need else FaultCause.OTHER
        self.fault_sink(FaultInfo(addr=addr, cause=cause, thread=thread, kind=kind))
        raise AssertionError("fault sink returned")

    def _range_region(self, thread: int, addr: int, kind: str) -> mem.Region:
        region = self.memory.registry.find(addr)
        if region is None:
            self.fault_sink(FaultInfo(addr=addr, cause=FaultCause.PAGE_VIOLATION,
                                      thread=thread, kind=kind))
            raise AssertionError("fault sink returned")
        return region

    # -- privileged windows ----------------------------------------------------

    @contextmanager
    def privileged(self, regions: list[mem.Region]):
        """Monitor-only: make the given regions directly accessible.

        Runtime internals (allocator headers, scrubbing, the monitor's
        own data) use direct views; on enforcing backends the pages may
        be inaccessible under the active policy, so they are opened for
        the duration and re-protected on exit.
        """
        yield

    def close(self) -> None:
        pass


def _default_sink(info: FaultInfo) -> None:
    raise MemoryFault(info)


class AuditBackend(Backend):
    """Records policies; checks every access at the API boundary."""

    name = "audit"
    key_budget = SOFTWARE_KEY_BUDGET

    def __init__(self, memory: mem.MemorySystem):
        super().__init__(memory)
        self.violations: list[Violation] = []

    def _apply(self, thread: int, policy: PolicyVector) -> None:
        pass  # recorded in _policies; nothing to enforce

    def _check(self, thread: int, region: mem.Region, addr: int, n: int, kind: str) -> None:
        if addr < region.usable_base:
            self._record_and_fault(thread, addr, kind, region)
        level = self.policy_for(thread).get(region.key)
        need = AccessLevel.READ_ONLY if kind == "read" else AccessLevel.READ_WRITE
        if level < need:
            self._record_and_fault(thread, addr, kind, region)

    def _record_and_fault(self, thread: int, addr: int, kind: str, region: mem.Region) -> None:
        level = self.policy_for(thread).get(region.key)
        self.violations.append(Violation(thread=thread, addr=addr, kind=kind,
                                         key=region.key, level=level))
        self._fault(thread, addr, kind)

    def load(self, thread: int, addr: int, n: int) -> bytes:
        if n == 0:
            return b""
        region = self._range_region(thread, addr, "read")
        self._check(thread, region, addr, n, "read")
        end = addr + n
        if end > region.end:
            self._fault(thread, region.end, "read")
        off = region.offset(addr)
        return bytes(region.view[off:off + n])

    def store(self, thread: int, addr: int, data: bytes) -> None:
        n = len(data)
        if n == 0:
            return
        region = self._range_region(thread, addr, "write")
        self._check(thread, region, addr, n, "write")
        off = region.offset(addr)
        n_in = min(n, region.length - off)
        region.view[off:off + n_in] = data[:n_in]
        if n_in < n:
            self._fault(thread, region.end, "write")


class PagingBackend(Backend):
    """Enforces policies with process-global page permissions."""

    name = "paging"
    key_budget = SOFTWARE_KEY_BUDGET
    supports_concurrent_nesting = False

    def __init__(self, memory: mem.MemorySystem):
        super().__init__(memory)
        self._owner: int | None = None
        self._applied: PolicyVector | None = None
        self._access_lock = threading.RLock()
        # permitted transfers can copy directly: current_prot mirrors the
        # protections this backend installed, so the outcome is already
        # known; denied or boundary cases take the kernel path to get
        # authentic fault semantics. Disabled when the pipe engine was
        # forced so tests exercise the kernel path end to end.
        self._fast_copy = not isinstance(memory.engine, mem.PipeEngine)

    def _retag(self, region: mem.Region) -> None:
        if self._applied is not None:
            self._protect_region(region, self._applied)

    def _protect_region(self, region: mem.Region, policy: PolicyVector) -> None:
        target = _prot_for(policy.get(region.key))
        if region.current_prot == target:
            return
        guard = region.guard_pages * mem.PAGE
        if guard:
            self.memory.mprotect(region, 0, guard, mem.PROT_NONE)
        if region.length > guard:
            self.memory.mprotect(region, guard, region.length - guard, target)
        region.current_prot = target

    def _apply(self, thread: int, policy: PolicyVector) -> None:
        with self._access_lock:
            if self._owner == thread and self._applied is policy:
                return
            for region in self.memory.registry.all():
                self._protect_region(region, policy)
            self._owner = thread
            self._applied = policy

    def _ensure_owner(self, thread: int) -> None:
        if self._owner != thread:
            policy = self.policy_for(thread)
            for region in self.memory.registry.all():
                self._protect_region(region, policy)
            self._owner = thread
            self._applied = policy

    def load(self, thread: int, addr: int, n: int) -> bytes:
        if n == 0:
            return b""
        region = self._range_region(thread, addr, "read")
        end_in = min(addr + n, region.end)
        with self._access_lock:
            self._ensure_owner(thread)
            if (self._fast_copy and region.current_prot & mem.PROT_READ
                    and addr >= region.usable_base and end_in == addr + n):
                off = region.offset(addr)
                return bytes(region.view[off:off + n])
            try:
                data = self._engine_read(region, addr, end_in - addr)
            except mem.TransferStopped as stop:
                self._fault(thread, addr + stop.done, "read")
        if end_in < addr + n:
            self._fault(thread, region.end, "read")
        return data

    def store(self, thread: int, addr: int, data: bytes) -> None:
        n = len(data)
        if n == 0:
            return
        region = self._range_region(thread, addr, "write")
        n_in = min(n, region.end - addr)
        with self._access_lock:
            self._ensure_owner(thread)
            if (self._fast_copy and region.current_prot & mem.PROT_WRITE
                    and addr >= region.usable_base and n_in == n):
                off = region.offset(addr)
                region.view[off:off + n] = data
                return
            try:
                self._engine_write(region, addr, data[:n_in])
            except mem.TransferStopped as stop:
                self._fault(thread, addr + stop.done, "write")
        if n_in < n:
            self._fault(thread, region.end, "write")

    def _engine_read(self, region: mem.Region, addr: int, n: int) -> bytes:
        engine = self.memory.engine
        if isinstance(engine, mem.ProcessVmEngine):
            return engine.read(addr, n)
        off = region.offset(addr)
        return engine.read_view(region.view[off:off + n], n)

    def _engine_write(self, region: mem.Region, addr: int, data: bytes) -> None:
        engine = self.memory.engine
        if isinstance(engine, mem.ProcessVmEngine):
            engine.write(addr, data)
        else:
            off = region.offset(addr)
            engine.write_view(region.view[off:off + len(data)], data)

    @contextmanager
    def privileged(self, regions: list[mem.Region]):
        with self._access_lock:
            saved = [(r, r.current_prot) for r in regions]
            for region in regions:
                if region.current_prot != mem.PROT_RW:
                    guard = region.guard_pages * mem.PAGE
                    self.memory.mprotect(region, guard, region.length - guard,
                                         mem.PROT_RW)
                    region.current_prot = mem.PROT_RW
            try:
                yield
            finally:
                policy = self._applied
                for region, _ in saved:
                    if policy is not None:
                        self._protect_region(region, policy)


# x86_64 syscall numbers
_SYS_PKEY_MPROTECT = 329
_SYS_PKEY_ALLOC = 330
_SYS_PKEY_FREE = 331

_PKEY_DISABLE_ACCESS = 0x1
_PKEY_DISABLE_WRITE = 0x2


class HardwareKeysBackend(Backend):
    """Userspace protection keys; per-thread policy registers.

    The key budget matches the 4-bit key space: 16 keys, of which the
    root and monitor keys are reserved, leaving 14 user domains.
    Transfers go through the pipe engine because the kernel's usercopy
    path honors the calling thread's key rights while process_vm copies
    do not.
    """

    name = "hardware"
    key_budget = HARDWARE_KEY_BUDGET
    supports_concurrent_nesting = True

    def __init__(self, memory: mem.MemorySystem):
        if not self.available():
            raise BackendUnavailable("userspace protection keys not supported here")
        super().__init__(memory)
        self._libc = ctypes.CDLL(None, use_errno=True)
        self._pkeys: dict[int, int] = {ROOT_KEY: 0}
        self._engine = mem.PipeEngine()
        monitor_pkey = self._pkey_alloc()
        self._pkeys[MONITOR_KEY] = monitor_pkey

    @staticmethod
    def available() -> bool:
        libc = ctypes.CDLL(None, use_errno=True)
        libc.syscall.restype = ctypes.c_long
        ctypes.set_errno(0)
        rc = libc.syscall(_SYS_PKEY_ALLOC, 0, 0)
        if rc < 0:
            return False
        libc.syscall(_SYS_PKEY_FREE, int(rc))
        return hasattr(libc, "pkey_set")

    def _pkey_alloc(self) -> int:
        ctypes.set_errno(0)
        rc = self._libc.syscall(_SYS_PKEY_ALLOC, 0, 0)
        if rc < 0:
            raise KeyExhausted("pkey_alloc failed")
        return int(rc)

    def _on_key_allocated(self, key: int) -> None:
        self._pkeys[key] = self._pkey_alloc()

    def _on_key_released(self, key: int) -> None:
        pkey = self._pkeys.pop(key, None)
        if pkey is not None:
            self._libc.syscall(_SYS_PKEY_FREE, pkey)

    def _retag(self, region: mem.Region) -> None:
        pkey = self._pkeys[region.key]
        rc = self._libc.syscall(
            _SYS_PKEY_MPROTECT, ctypes.c_void_p(region.base),
            ctypes.c_size_t(region.length), ctypes.c_int(mem.PROT_RW),
            ctypes.c_int(pkey))
        if rc != 0:
            raise DomainError(Err.BACKEND_FAILURE, "pkey_mprotect failed")
        guard = region.guard_pages * mem.PAGE
        if guard:
            self.memory.mprotect(region, 0, guard, mem.PROT_NONE)

    def _apply(self, thread: int, policy: PolicyVector) -> None:
        # Affects only the calling thread's rights register.
        for key, pkey in self._pkeys.items():
            level = policy.get(key)
            if level == AccessLevel.READ_WRITE:
                rights = 0
            elif level == AccessLevel.READ_ONLY:
                rights = _PKEY_DISABLE_WRITE
            else:
                rights = _PKEY_DISABLE_ACCESS
            self._libc.pkey_set(ctypes.c_int(pkey), ctypes.c_uint(rights))

    def load(self, thread: int, addr: int, n: int) -> bytes:
        if n == 0:
            return b""
        region = self._range_region(thread, addr, "read")
        end_in = min(addr + n, region.end)
        off = region.offset(addr)
        try:
            data = self._engine.read_view(region.view[off:off + (end_in - addr)],
                                          end_in - addr)
        except mem.TransferStopped as stop:
            self._fault(thread, addr + stop.done, "read")
        if end_in < addr + n:
            self._fault(thread, region.end, "read")
        return data

    def store(self, thread: int, addr: int, data: bytes) -> None:
        n = len(data)
        if n == 0:
            return
        region = self._range_region(thread, addr, "write")
        n_in = min(n, region.end - addr)
        off = region.offset(addr)
        try:
            self._engine.write_view(region.view[off:off + n_in], data[:n_in])
        except mem.TransferStopped as stop:
            self._fault(thread, addr + stop.done, "write")
        if n_in < n:
            self._fault(thread, region.end, "write")

    @contextmanager
    def privileged(self, regions: list[mem.Region]):
        keys = {region.key for region in regions}
        for key in keys:
            self._libc.pkey_set(ctypes.c_int(self._pkeys[key]), ctypes.c_uint(0))
        try:
            yield
        finally:
            thread = threading.get_ident()
            policy = self.policy_for(thread)
            self._apply(thread, policy)


def make_backend(name: str, memory: mem.MemorySystem) -> Backend:
    """Build the named backend; empty name picks hardware, then paging."""
    if name == "hardware":
        return HardwareKeysBackend(memory)
    if name == "paging":
        return PagingBackend(memory)
    if name == "audit":
        return AuditBackend(memory)
    if name == "":
        if HardwareKeysBackend.available():
            return HardwareKeysBackend(memory)
        return PagingBackend(memory)
    raise ValueError(f"unknown backend {name!r}")
