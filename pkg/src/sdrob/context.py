"""Execution contexts and per-domain stack management.

Every execution domain gets a disjoint stack region with one permanently
inaccessible guard page at the low end. Stacks are never returned to the
OS: recycling retags them to the monitor's quarantine key and parks them
in a size-bucketed LIFO pool for the next domain.

An ExecutionContext is the saved destination of a rollback: the identity
of the capture point, the entry-chain prefix that was live, every live
domain's stack position, and the thread's blocked-signal mask. Restoring
one rewinds the monitor's notion of the thread to the capture point; the
non-local transfer itself is an exception aimed at the recovery scope
that owns the capture token. Callee-preserved values need no machine
shim here: whatever the capturing frame holds stays alive with it.
"""

import itertools
import signal
import threading
from dataclasses import dataclass, field

from . import mem
from .config import MIN_STACK_SIZE
from .errors import DomainError, Err

_token_counter = itertools.count(1)

GUARD_PAGES = 1
STACK_ALIGN = 16
CANARY = 0x5D0B5D0B5D0B5D0B  # 64-bit frame canary word


@dataclass
class StackHandle:
    """A domain's stack region; grows downward from ``top``."""

    region: mem.Region

    @property
    def top(self) -> int:
        return self.region.end

    @property
    def limit(self) -> int:
        return self.region.usable_base

    @property
    def size(self) -> int:
        return self.region.length


@dataclass
class ExecutionContext:
    """Snapshot a rollback can land on. Valid while its scope is open."""

    token: int
    thread: int
    domain_udi: int
    chain_ids: tuple[int, ...]          # instance ids, bottom (root) first
    positions: tuple[tuple[int, int], ...]  # (instance id, stack position)
    sigmask: frozenset
    captured_in: int                    # instance id active at capture time
    valid: bool = True


def capture_context(thread_state, domain_udi: int) -> ExecutionContext:
    """Record the calling thread's current state as a rollback destination."""
    chain = thread_state.chain
    positions = tuple((entry.desc.instance_id, entry.desc.stack_pos)
                      for entry in chain)
    mask = signal.pthread_sigmask(signal.SIG_BLOCK, [])
    return ExecutionContext(
        token=next(_token_counter),
        thread=thread_state.thread,
        domain_udi=domain_udi,
        chain_ids=tuple(entry.desc.instance_id for entry in chain),
        positions=positions,
        sigmask=frozenset(mask),
        captured_in=chain[-1].desc.instance_id,
    )


def restore_context(thread_state, ctx: ExecutionContext) -> None:
    """Rewind chain and stack positions to the snapshot; restore the mask.

    The caller (monitor rollback path) has already torn down everything
    above the snapshot prefix.
    """
    depth = len(ctx.chain_ids)
    assert len(thread_state.chain) == depth, "chain not unwound to snapshot"
    for entry, expect in zip(thread_state.chain, ctx.chain_ids):
        assert entry.desc.instance_id == expect, "chain diverged from snapshot"
    by_instance = dict(ctx.positions)
    for entry in thread_state.chain:
        entry.desc.stack_pos = by_instance[entry.desc.instance_id]
    signal.pthread_sigmask(signal.SIG_SETMASK, set(ctx.sigmask))


class StackPool:
    """Process-wide LIFO pool of recycled stacks, bucketed by size."""

    def __init__(self, memory: mem.MemorySystem, quarantine):
        self._memory = memory
        self._quarantine = quarantine  # callable(region): retag to monitor key
        self._lock = threading.Lock()
        self._buckets: dict[int, list[StackHandle]] = {}

    def acquire(self, size: int) -> StackHandle:
        if size < MIN_STACK_SIZE:
            raise DomainError(Err.SIZE_OUT_OF_RANGE,
                              f"stack must be >= {MIN_STACK_SIZE} bytes")
        length = mem.page_round_up(size) + GUARD_PAGES * mem.PAGE
        with self._lock:
            bucket = self._buckets.get(length)
            if bucket:
                return bucket.pop()
        try:
            region = self._memory.reserve(length, kind="stack",
                                          guard_pages=GUARD_PAGES)
        except MemoryError:
            raise DomainError(Err.OS_OUT_OF_MEMORY, "stack reservation failed") from None
        # the guard page is torn off once and never reopened
        self._memory.mprotect(region, 0, GUARD_PAGES * mem.PAGE, mem.PROT_NONE)
        return StackHandle(region=region)

    def recycle(self, handle: StackHandle) -> None:
        self._quarantine(handle.region)
        with self._lock:
            self._buckets.setdefault(handle.region.length, []).append(handle)

    def pooled_count(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._buckets.values())
