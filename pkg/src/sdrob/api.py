"""Developer-facing API: lifecycle calls, the call() wrapper, recovery scopes.

Result conventions mirror a one-word return value: 0 means success
(first initialization / normal completion), values >= 2 name the domain
whose failure was routed to this point, and small negative values are
error codes. Lifecycle delegates (malloc, free, enter, ...) raise
`DomainError` for defined errors; `init` and `call` fold errors into
their result values because their return channel is also the rollback
landing site.

The second return of the initialization site is rendered with a recovery
scope::

    with rt.api.recover(UDI, EXECUTION_DOMAIN | ACCESSIBLE_DOMAIN | RETURN_HERE) as rp:
        if rp.ok:
            rt.api.enter(UDI)
            ...
            rt.api.exit()
            rt.api.destroy(UDI)
    if rp.rolled_back:
        handle(rp.failing_udi)

A fault inside the scope tears the failing domain down and lands here,
with ``rp.result`` carrying the failing domain's index. Domains must be
destroyed or deinitialized before their scope closes; a scope that
closes with a still-armed recovery point invalidates it (the destination
would dangle), leaving the domain deinitialized.
"""

import struct
import threading
from dataclasses import dataclass
from enum import IntFlag

from .errors import DomainError, DomainRollback, Err
from .monitor import DomainKind, ReturnTarget
from .protection import AccessLevel


class InitOptions(IntFlag):
    EXECUTION_DOMAIN = 1
    DATA_DOMAIN = 2
    ACCESSIBLE_DOMAIN = 4
    INACCESSIBLE_DOMAIN = 8
    RETURN_HERE = 16
    RETURN_TO_CURRENT = 32
    RETURN_TO_PARENT = 64


NO_HEAP_MERGE = 0
HEAP_MERGE = 1

_KIND_GROUP = InitOptions.EXECUTION_DOMAIN | InitOptions.DATA_DOMAIN
_ACCESS_GROUP = InitOptions.ACCESSIBLE_DOMAIN | InitOptions.INACCESSIBLE_DOMAIN
_RETURN_GROUP = (InitOptions.RETURN_HERE | InitOptions.RETURN_TO_CURRENT
                 | InitOptions.RETURN_TO_PARENT)

_RETURN_MAP = {
    InitOptions.RETURN_HERE: ReturnTarget.HERE,
    InitOptions.RETURN_TO_CURRENT: ReturnTarget.TO_CURRENT,
    InitOptions.RETURN_TO_PARENT: ReturnTarget.TO_PARENT,
}


def _parse_options(options: InitOptions) -> tuple[DomainKind, ReturnTarget]:
    options = InitOptions(options)
    kind_bits = options & _KIND_GROUP
    if kind_bits == InitOptions.DATA_DOMAIN:
        return DomainKind.DATA, ReturnTarget.HERE
    if kind_bits != InitOptions.EXECUTION_DOMAIN:
        raise DomainError(Err.INVALID_OPTIONS, "pick execution or data")
    access_bits = options & _ACCESS_GROUP
    if access_bits == InitOptions.ACCESSIBLE_DOMAIN:
        kind = DomainKind.EXECUTION_ACCESSIBLE
    elif access_bits == InitOptions.INACCESSIBLE_DOMAIN:
        kind = DomainKind.EXECUTION_INACCESSIBLE
    else:
        raise DomainError(Err.INVALID_OPTIONS, "pick accessible or inaccessible")
    return_bits = options & _RETURN_GROUP
    target = _RETURN_MAP.get(return_bits)
    if target is None:
        raise DomainError(Err.INVALID_OPTIONS, "pick exactly one return target")
    return kind, target


@dataclass(frozen=True)
class InitResult:
    """Outcome of an initialization site (first pass or rollback landing)."""

    value: int

    @property
    def ok(self) -> bool:
        return self.value == 0

    @property
    def resumed(self) -> bool:
        return self.value >= 2

    @property
    def failing_udi(self) -> int | None:
        return self.value if self.value >= 2 else None

    @property
    def error(self) -> Err | None:
        return Err(self.value) if self.value < 0 else None

    def __repr__(self):
        if self.ok:
            return "InitResult(OK)"
        if self.resumed:
            return f"InitResult(Resumed({self.value}))"
        return f"InitResult({Err(self.value).name})"


@dataclass(frozen=True)
class CallResult:
    value: int

    @property
    def ok(self) -> bool:
        return self.value == 0

    @property
    def failed_udi(self) -> int | None:
        return self.value if self.value >= 2 else None

    @property
    def error(self) -> Err | None:
        return Err(self.value) if self.value < 0 else None

    def __repr__(self):
        if self.ok:
            return "CallResult(OK)"
        if self.value >= 2:
            return f"CallResult(Failed({self.value}))"
        return f"CallResult({Err(self.value).name})"


class RecoveryPoint:
    """Handle yielded by `Api.recover`; updated if a rollback lands here."""

    def __init__(self):
        self.result = InitResult(Err.NOT_INITIALIZED.value)

    @property
    def ok(self) -> bool:
        return self.result.ok

    @property
    def rolled_back(self) -> bool:
        return self.result.resumed

    @property
    def failing_udi(self) -> int | None:
        return self.result.failing_udi


class _RecoverScope:
    def __init__(self, api: "Api", udi: int, options: InitOptions, kwargs: dict):
        self._api = api
        self._udi = udi
        self._options = options
        self._kwargs = kwargs
        self._token = None
        self._desc = None
        self.point = RecoveryPoint()

    def __enter__(self) -> RecoveryPoint:
        result, desc, token = self._api._init_ex(self._udi, self._options,
                                                 self._kwargs)
        self.point.result = result
        self._desc = desc
        self._token = token
        return self.point

    def __exit__(self, exc_type, exc, tb) -> bool:
        if isinstance(exc, DomainRollback) and exc.token == self._token:
            self.point.result = InitResult(exc.failing_udi)
            return True
        # leaving the scope abandons the capture point; a still-armed
        # context would dangle, so it is invalidated now
        if self._desc is not None and self._token is not None:
            snap = self._desc.saved_context
            if snap is not None and snap.token == self._token:
                self._api._monitor.drop_capture(self._desc)
        return False


class Api:
    """Bound API surface for one runtime instance."""

    def __init__(self, runtime):
        self._rt = runtime
        self._monitor = runtime.monitor
        self._backend = runtime.backend

    # -- lifecycle ------------------------------------------------------------

    def _init_ex(self, udi: int, options: InitOptions, kwargs: dict):
        try:
            kind, target = _parse_options(options)
            desc = self._monitor.register_domain(udi, kind, target, **kwargs)
        except DomainError as exc:
            return InitResult(exc.code.value), None, None
        token = None
        if kind.is_execution and target is not ReturnTarget.TO_PARENT:
            tds = self._monitor.thread_state()
            snapshot = self._monitor.attach_capture(desc, tds)
            token = snapshot.token
        return InitResult(0), desc, token

    def init(self, udi: int, options: InitOptions, **kwargs) -> InitResult:
        """Register a domain and arm its recovery point.

        Prefer `recover` for execution domains: it scopes the capture and
        is where a later rollback lands.
        """
        result, _, _ = self._init_ex(udi, options, kwargs)
        return result

    def recover(self, udi: int, options: InitOptions, **kwargs) -> _RecoverScope:
        return _RecoverScope(self, udi, options, kwargs)

    def malloc(self, udi: int, size: int, align: int = 16) -> int:
        return self._monitor.domain_malloc(udi, size, align)

    def free(self, udi: int, addr: int) -> None:
        self._monitor.domain_free(udi, addr)

    def dprotect(self, udi: int, tddi: int, prot: AccessLevel) -> None:
        self._monitor.set_grant(udi, tddi, prot)

    def enter(self, udi: int) -> None:
        self._monitor.enter_domain(udi)

    def exit(self) -> None:
        self._monitor.exit_domain()

    def destroy(self, udi: int, option: int = NO_HEAP_MERGE) -> None:
        self._monitor.destroy_domain(udi, heap_merge=(option == HEAP_MERGE))

    def deinit(self, udi: int) -> None:
        self._monitor.deinit_domain(udi)

    # -- memory access (the model's load/store instructions) ----------------------

    def load(self, addr: int, n: int) -> bytes:
        return self._backend.load(threading.get_ident(), addr, n)

    def store(self, addr: int, data: bytes) -> None:
        self._backend.store(threading.get_ident(), addr, data)

    def load_u64(self, addr: int) -> int:
        return struct.unpack("<Q", self.load(addr, 8))[0]

    def store_u64(self, addr: int, value: int) -> None:
        self.store(addr, struct.pack("<Q", value & (2**64 - 1)))

    # -- stack frames ---------------------------------------------------------------

    def stack_alloc(self, size: int) -> int:
        return self._monitor.stack_alloc(size)

    def stack_mark(self) -> int:
        return self._monitor.stack_mark()

    def stack_release(self, mark: int) -> None:
        self._monitor.stack_release(mark)

    def frame_open(self, size: int):
        """Stack frame with a canary word above the payload."""
        from .context import CANARY
        base = self._monitor.stack_alloc(size + 16)
        canary_addr = base + size
        self.store_u64(canary_addr, CANARY)
        return base, canary_addr

    def frame_close(self, canary_addr: int) -> None:
        from .context import CANARY
        if self.load_u64(canary_addr) != CANARY:
            self._rt.faults.stack_guard_failed()

    # -- convenience wrapper -----------------------------------------------------------

    def call(self, udi: int, fun, arg: int = 0, size: int = 0,
             ret: int | None = None) -> CallResult:
        """Run ``fun`` on a copy of ``size`` bytes at ``arg`` in a fresh
        accessible child domain; the word it returns is stored at ``ret``.

        On a fault inside the child, the parent's memory is untouched and
        the result reports the failing domain.
        """
        opts = (InitOptions.EXECUTION_DOMAIN | InitOptions.ACCESSIBLE_DOMAIN
                | InitOptions.RETURN_HERE)
        scope = self.recover(udi, opts)
        with scope as rp:
            if not rp.ok:
                return CallResult(rp.result.value)
            try:
                adr = self.malloc(udi, size) if size > 0 else 0
            except DomainError:
                self.destroy(udi, NO_HEAP_MERGE)
                return CallResult(Err.MALLOC_FAILED.value)
            if size > 0:
                self.store(adr, self.load(arg, size))
            self.enter(udi)
            r = fun(adr)
            self.exit()
            if ret is not None:
                self.store_u64(ret, int(r))
            if size > 0:
                self.free(udi, adr)
            self.destroy(udi, NO_HEAP_MERGE)
            return CallResult(0)
        return CallResult(rp.result.value)
