"""Result codes and exception types shared across the runtime.

Domain-level failures are *defined results*: they carry a negative code
from `Err`, disjoint from valid user domain indexes (which start at 2),
so result values can double as integers the way the C-style API returns
them. Memory faults and rollback transfers are a separate channel and
derive from BaseException so ordinary ``except Exception`` blocks in
sandboxed code do not swallow them.
"""

from enum import IntEnum


class Err(IntEnum):
    """Negative error codes; disjoint from user domain indexes (>= 2)."""

    OK = 0
    ALREADY_INITIALIZED = -2
    KEY_EXHAUSTED = -3
    RESERVED_UDI = -4
    TO_PARENT_WITHOUT_DESTINATION = -5
    MALLOC_FAILED = -6
    NOT_A_CHILD_DOMAIN = -7
    TARGET_NOT_DATA_DOMAIN = -8
    INACCESSIBLE_DOMAIN = -9
    OUT_OF_MEMORY = -10
    MERGE_ON_INACCESSIBLE = -11
    DOMAIN_ENTERED = -12
    NOT_INITIALIZED = -13
    EXIT_FROM_ROOT = -14
    UNKNOWN_UDI = -15
    RESERVED_KEY = -16
    NOT_ALLOCATED = -17
    SIZE_OUT_OF_RANGE = -18
    UNALIGNED = -19
    BACKEND_FAILURE = -20
    OS_OUT_OF_MEMORY = -21
    NOT_EXECUTABLE = -22
    CONCURRENT_NESTING_UNSUPPORTED = -23
    HAS_LIVE_CHILDREN = -24
    DOUBLE_FREE = -25
    FOREIGN_ADDRESS = -26
    INVALID_OPTIONS = -27


class SdrobError(Exception):
    """Base class for all defined runtime errors."""


class DomainError(SdrobError):
    """A defined, recoverable error from a runtime operation."""

    def __init__(self, code: Err, message: str = ""):
        super().__init__(f"{code.name}{': ' + message if message else ''}")
        self.code = code


class KeyExhausted(DomainError):
    def __init__(self, message: str = ""):
        super().__init__(Err.KEY_EXHAUSTED, message)


class BackendUnavailable(SdrobError):
    """Requested protection backend cannot run on this host."""


class HeapError(DomainError):
    """Allocator-level defined error (bad free, size out of range, OOM)."""


class MemoryFault(BaseException):
    """A memory access violated the active policy or left mapped memory.

    Raised by the access plane. The fault orchestrator converts it into
    either a rollback transfer or an unrecoverable failure; it should
    never be caught by sandboxed code.
    """

    def __init__(self, info):
        super().__init__(str(info))
        self.info = info


class DomainRollback(BaseException):
    """Non-local transfer to a saved recovery point after a domain fault.

    Carries the token of the destination recovery point and the index of
    the domain that failed. Recovery scopes absorb the instance targeted
    at them; anything else must let it propagate.
    """

    def __init__(self, token: int, failing_udi: int):
        super().__init__(f"rollback(failing_udi={failing_udi})")
        self.token = token
        self.failing_udi = failing_udi


class UnrecoverableFault(BaseException):
    """A fault that cannot be rolled back; the process must terminate."""

    def __init__(self, message: str, info=None):
        super().__init__(message)
        self.info = info
