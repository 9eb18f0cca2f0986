"""Fault detection, attribution, and abnormal-exit orchestration.

The access plane reports a denied or unmapped access as a `FaultInfo`.
The orchestrator decides between rolling the faulting thread back to a
saved recovery point and terminating: faults in the root domain, faults
raised while monitor code is running, unclassifiable causes, and faults
raised while already handling a fault all terminate.

Handlers always run on the faulting thread. Teardown happens before the
non-local transfer is raised, so by the time any cleanup code in user
frames runs, the failing domain's key has been revoked and its memory
detached.
"""

import faulthandler
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .errors import UnrecoverableFault


class FaultCause(Enum):
    KEY_VIOLATION = "key-violation"
    PAGE_VIOLATION = "page-violation"
    STACK_GUARD = "stack-guard"
    OTHER = "other"


@dataclass
class FaultInfo:
    """Attribution record for one memory fault."""

    addr: int | None  # absent for stack-guard reports
    cause: FaultCause
    thread: int
    kind: str = ""  # "read" | "write" | ""
    active_udi_at_fault: int | None = None

    def __str__(self):
        where = hex(self.addr) if self.addr is not None else "-"
        return (f"fault cause={self.cause.value} addr={where} kind={self.kind} "
                f"udi={self.active_udi_at_fault}")


class Decision(Enum):
    ROLLBACK = "rollback"
    TERMINATE = "terminate"


@dataclass
class FaultEvent:
    """Timestamped record of a handled fault, for benchmarking hooks."""

    info: FaultInfo
    decision: Decision
    t_detected_ns: int = field(default_factory=time.perf_counter_ns)


class FaultManager:
    """Routes faults to rollback or termination. One per runtime."""

    def __init__(self, monitor, scrub_on_destroy: bool):
        self._monitor = monitor
        self.scrub_on_destroy = scrub_on_destroy
        self._tls = threading.local()
        self.events: list[FaultEvent] = []
        self.listeners: list = []  # callables taking a FaultEvent
        self._installed = False

    def install_handlers(self) -> None:
        """Arm fault routing. Must run before any domain is used."""
        if self._installed:
            return
        if not faulthandler.is_enabled():
            faulthandler.enable()
        self._installed = True

    # -- entry points ---------------------------------------------------------

    def deliver(self, info: FaultInfo):
        """Access-plane sink; runs on the faulting thread. Never returns."""
        if getattr(self._tls, "handling", False):
            raise UnrecoverableFault("fault while handling a fault", info)
        self._tls.handling = True
        try:
            info.active_udi_at_fault = self._monitor.active_udi(info.thread)
            decision = self.on_fault(info)
            self._emit(FaultEvent(info=info, decision=decision))
            if decision == Decision.TERMINATE:
                raise UnrecoverableFault(f"unrecoverable: {info}", info)
            self._monitor.abnormal_exit(info.active_udi_at_fault, info.thread)
            raise AssertionError("abnormal exit returned")
        finally:
            self._tls.handling = False

    def stack_guard_failed(self) -> None:
        """Hook for in-domain canary checks; replaces the abort-on-smash path."""
        thread = threading.get_ident()
        self.deliver(FaultInfo(addr=None, cause=FaultCause.STACK_GUARD,
                               thread=thread, kind="write"))

    # -- decision --------------------------------------------------------------

    def on_fault(self, info: FaultInfo) -> Decision:
        if self._monitor.in_monitor(info.thread):
            return Decision.TERMINATE
        if info.active_udi_at_fault in (None, 0):
            return Decision.TERMINATE
        if info.cause == FaultCause.OTHER:
            return Decision.TERMINATE
        if not self._monitor.can_rollback(info.thread):
            return Decision.TERMINATE
        return Decision.ROLLBACK

    def _emit(self, event: FaultEvent) -> None:
        self.events.append(event)
        if len(self.events) > 4096:
            del self.events[:2048]
        for listener in self.listeners:
            listener(event)


def scrub(backend, regions) -> None:
    """Zero every byte of the given regions before they are recycled."""
    with backend.privileged(list(regions)):
        for region in regions:
            start = region.guard_pages * 4096
            region.view[start:] = bytes(region.length - start)
