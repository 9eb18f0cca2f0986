"""Trusted reference monitor: domain control data and lifecycle mediation.

All control data lives on the monitor side and is reachable only through
the operations here; sandboxed code addresses memory through the access
plane and can never reach descriptors, contexts, or allocator controls.
A small key-1 region carries an integrity canary the monitor re-checks
on lifecycle operations, and every policy it computes maps that key to
no-access.

Execution-domain descriptors are per thread. Data domains are process
global: the first registration creates them, later registrations from
other threads attach.
"""

import itertools
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

from . import context as ctx_mod
from . import heap as heap_mod
from . import mem
from .config import Config
from .errors import DomainError, DomainRollback, Err, HeapError, UnrecoverableFault
from .protection import (AccessLevel, Backend, MONITOR_KEY, PolicyVector,
                         ROOT_KEY)

ROOT_UDI = 0
MONITOR_UDI = 1
MIN_UDI = 2
MAX_UDI = 1023

_MONITOR_CANARY = struct.pack("<QQ", 0xC0_FFEE_0DDC0FFEE0 & (2**64 - 1), 0x1BADB002DEADBEA7)


class DomainKind(Enum):
    EXECUTION_ACCESSIBLE = "execution-accessible"
    EXECUTION_INACCESSIBLE = "execution-inaccessible"
    DATA = "data"

    @property
    def is_execution(self) -> bool:
        return self is not DomainKind.DATA

    @property
    def is_accessible(self) -> bool:
        return self is DomainKind.EXECUTION_ACCESSIBLE


class ReturnTarget(Enum):
    HERE = "here"
    TO_CURRENT = "to-current"  # behaves as HERE; both mean "this init site"
    TO_PARENT = "to-parent"


class DomainState(Enum):
    INITIALIZED = "initialized"
    ENTERED = "entered"
    DEINITIALIZED = "deinitialized"


@dataclass
class HeapHandle:
    """Lazy per-domain allocator handle."""

    default_pool_size: int
    growth_enabled: bool = True
    control: heap_mod.Tlsf | None = None


@dataclass
class DomainDescriptor:
    udi: int
    kind: DomainKind
    state: DomainState
    parent_udi: int
    parent_instance: int
    key: int
    return_target: ReturnTarget
    heap: HeapHandle
    thread: int | None  # None for process-global data domains
    instance_id: int
    stack: ctx_mod.StackHandle | None = None
    stack_pos: int = 0
    saved_context: ctx_mod.ExecutionContext | None = None
    grants: dict[int, AccessLevel] = field(default_factory=dict)
    creator_udi: int = ROOT_UDI
    registered_threads: set = field(default_factory=set)


@dataclass
class ChainEntry:
    desc: DomainDescriptor
    parent_stack_pos: int


class ThreadDomainState:
    """Per-thread view: entry chain (root at the bottom) plus descriptors."""

    def __init__(self, thread: int, root_desc: DomainDescriptor):
        self.thread = thread
        self.chain: list[ChainEntry] = [ChainEntry(root_desc, 0)]
        self.descriptors: dict[int, DomainDescriptor] = {}
        self.root = root_desc

    @property
    def active(self) -> DomainDescriptor:
        return self.chain[-1].desc

    @property
    def active_udi(self) -> int:
        return self.chain[-1].desc.udi


class Monitor:
    def __init__(self, backend: Backend, memory: mem.MemorySystem, config: Config):
        self.backend = backend
        self.memory = memory
        self.config = config
        self._lock = threading.RLock()
        self._tls = threading.local()
        self._instances = itertools.count(1)
        self._data_domains: dict[int, DomainDescriptor] = {}
        self._version = 0
        self._policy_cache: dict[tuple, PolicyVector] = {}
        self._off_root: set[int] = set()
        self._pool_recycle: dict[int, list[mem.Region]] = {}
        self.stack_pool = ctx_mod.StackPool(memory, self._quarantine_region)
        self.trace_hook = None  # optional callable(op, udi) for differential tests
        # key-1 monitor area with an integrity canary
        self.monitor_region = memory.reserve(mem.PAGE, kind="monitor", key=MONITOR_KEY)
        with backend.privileged([self.monitor_region]):
            self.monitor_region.view[:len(_MONITOR_CANARY)] = _MONITOR_CANARY

    # -- plumbing ---------------------------------------------------------------

    def _quarantine_region(self, region: mem.Region) -> None:
        self.backend.tag_region(region, MONITOR_KEY)

    def in_monitor(self, thread: int) -> bool:
        return getattr(self._tls, "depth", 0) > 0

    @contextmanager
    def _op(self, trace=None):
        self._tls.depth = getattr(self._tls, "depth", 0) + 1
        self._lock.acquire()
        try:
            if trace and self.trace_hook:
                self.trace_hook(*trace)
            yield
        finally:
            self._lock.release()
            self._tls.depth -= 1

    def _check_canary(self) -> None:
        with self.backend.privileged([self.monitor_region]):
            blob = bytes(self.monitor_region.view[:len(_MONITOR_CANARY)])
        if blob != _MONITOR_CANARY:
            raise UnrecoverableFault("monitor data corrupted")

    def _bump(self) -> None:
        self._version += 1
        self._policy_cache.clear()

    def thread_state(self) -> ThreadDomainState:
        tds = getattr(self._tls, "tds", None)
        if tds is None:
            tds = self._make_thread_state()
        return tds

    def _make_thread_state(self) -> ThreadDomainState:
        thread = threading.get_ident()
        with self._lock:
            stack = self.stack_pool.acquire(self.config.stack_size)
            self.backend.tag_region(stack.region, ROOT_KEY)
            root = DomainDescriptor(
                udi=ROOT_UDI, kind=DomainKind.EXECUTION_ACCESSIBLE,
                state=DomainState.ENTERED, parent_udi=ROOT_UDI,
                parent_instance=0, key=ROOT_KEY,
                return_target=ReturnTarget.HERE,
                heap=HeapHandle(default_pool_size=self.config.heap_size),
                thread=thread, instance_id=next(self._instances),
                stack=stack, stack_pos=stack.top)
            tds = ThreadDomainState(thread, root)
            self._tls.tds = tds
            self.backend.apply_policy(thread, self._policy_for(tds))
        return tds

    # -- policy ----------------------------------------------------------------------

    def _policy_for(self, tds: ThreadDomainState) -> PolicyVector:
        active = tds.active
        cache_key = (self._version, active.instance_id)
        cached = self._policy_cache.get(cache_key)
        if cached is not None:
            return cached
        levels: dict[int, AccessLevel] = {}
        levels[ROOT_KEY] = (AccessLevel.READ_WRITE if active.udi == ROOT_UDI
                            else AccessLevel.READ_ONLY)
        levels[active.key] = AccessLevel.READ_WRITE
        # accessible children of the active instance stay writable so the
        # parent can fill and drain their buffers around entries
        for desc in tds.descriptors.values():
            if (desc.kind is DomainKind.EXECUTION_ACCESSIBLE
                    and desc.parent_instance == active.instance_id
                    and desc.state is not DomainState.ENTERED):
                levels[desc.key] = AccessLevel.READ_WRITE
        for data in self._data_domains.values():
            if data.creator_udi == active.udi:
                levels[data.key] = AccessLevel.READ_WRITE
        for tddi, level in active.grants.items():
            data = self._data_domains.get(tddi)
            if data is not None:
                levels[data.key] = level
        levels[MONITOR_KEY] = AccessLevel.NO_ACCESS
        policy = PolicyVector(levels)
        self._policy_cache[cache_key] = policy
        return policy

    def compute_policy(self, thread: int | None = None) -> PolicyVector:
        with self._op():
            return self._policy_for(self.thread_state())

    def _apply_active_policy(self, tds: ThreadDomainState) -> None:
        self.backend.apply_policy(tds.thread, self._policy_for(tds))

    # -- registration -------------------------------------------------------------------

    def register_domain(self, udi: int, kind: DomainKind, target: ReturnTarget,
                        heap_size: int | None = None, growth: bool = True,
                        stack_size: int | None = None) -> DomainDescriptor:
        with self._op(trace=("init", udi)):
            if not MIN_UDI <= udi <= MAX_UDI:
                raise DomainError(Err.RESERVED_UDI, f"udi {udi} out of range")
            tds = self.thread_state()
            if kind is DomainKind.DATA:
                return self._register_data(udi, tds, heap_size)
            if target is ReturnTarget.TO_PARENT and tds.active.saved_context is None:
                raise DomainError(Err.TO_PARENT_WITHOUT_DESTINATION,
                                  "initializing domain has no rollback destination")
            existing = tds.descriptors.get(udi)
            if existing is not None:
                if existing.state is not DomainState.DEINITIALIZED:
                    raise DomainError(Err.ALREADY_INITIALIZED, f"udi {udi}")
                # revive: memory is kept, lifecycle fields are refreshed
                reparented = (existing.parent_instance != tds.active.instance_id
                              or existing.kind is not kind)
                existing.kind = kind
                existing.return_target = target
                existing.state = DomainState.INITIALIZED
                existing.parent_udi = tds.active_udi
                existing.parent_instance = tds.active.instance_id
                existing.saved_context = None
                if reparented:
                    self._bump()
                return existing
            key = self.backend.key_allocate()
            try:
                stack = self.stack_pool.acquire(stack_size or self.config.stack_size)
            except DomainError:
                self.backend.key_release(key)
                raise
            self.backend.tag_region(stack.region, key)
            desc = DomainDescriptor(
                udi=udi, kind=kind, state=DomainState.INITIALIZED,
                parent_udi=tds.active_udi, parent_instance=tds.active.instance_id,
                key=key, return_target=target,
                heap=HeapHandle(default_pool_size=heap_size or self.config.heap_size,
                                growth_enabled=growth),
                thread=tds.thread, instance_id=next(self._instances),
                stack=stack, stack_pos=stack.top)
            tds.descriptors[udi] = desc
            self._bump()
            self._apply_active_policy(tds)
            return desc

    def _register_data(self, udi: int, tds: ThreadDomainState,
                       heap_size: int | None) -> DomainDescriptor:
        existing = self._data_domains.get(udi)
        if existing is not None:
            if tds.thread in existing.registered_threads:
                raise DomainError(Err.ALREADY_INITIALIZED, f"data udi {udi}")
            existing.registered_threads.add(tds.thread)
            return existing
        key = self.backend.key_allocate()
        desc = DomainDescriptor(
            udi=udi, kind=DomainKind.DATA, state=DomainState.INITIALIZED,
            parent_udi=tds.active_udi, parent_instance=tds.active.instance_id,
            key=key, return_target=ReturnTarget.HERE,
            heap=HeapHandle(default_pool_size=heap_size or self.config.heap_size),
            thread=None, instance_id=next(self._instances),
            creator_udi=tds.active_udi)
        desc.registered_threads.add(tds.thread)
        self._data_domains[udi] = desc
        self._bump()
        self._apply_active_policy(tds)
        return desc

    def attach_capture(self, desc: DomainDescriptor,
                       tds: ThreadDomainState) -> ctx_mod.ExecutionContext:
        snapshot = ctx_mod.capture_context(tds, desc.udi)
        desc.saved_context = snapshot
        return snapshot

    # -- grants ------------------------------------------------------------------------

    def set_grant(self, udi: int, tddi: int, prot: AccessLevel) -> None:
        with self._op(trace=("dprotect", udi)):
            tds = self.thread_state()
            desc = tds.descriptors.get(udi)
            if desc is None or desc.parent_instance != tds.active.instance_id:
                raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"udi {udi}")
            if desc.state is DomainState.ENTERED:
                raise DomainError(Err.DOMAIN_ENTERED, f"udi {udi}")
            data = self._data_domains.get(tddi)
            if data is None:
                raise DomainError(Err.TARGET_NOT_DATA_DOMAIN, f"tddi {tddi}")
            if desc.grants.get(tddi) != prot:
                desc.grants[tddi] = prot
                self._bump()

    # -- memory management ---------------------------------------------------------------

    def _malloc_target(self, udi: int, tds: ThreadDomainState,
                       for_write: bool = True) -> DomainDescriptor:
        active = tds.active
        if udi == active.udi:
            return active
        desc = tds.descriptors.get(udi)
        if desc is not None and desc.parent_instance == active.instance_id:
            if not desc.kind.is_accessible:
                raise DomainError(Err.INACCESSIBLE_DOMAIN, f"udi {udi}")
            return desc
        data = self._data_domains.get(udi)
        if data is not None:
            if data.creator_udi == active.udi:
                return data
            if active.grants.get(udi) == AccessLevel.READ_WRITE:
                return data
            raise DomainError(Err.INACCESSIBLE_DOMAIN, f"data udi {udi} not writable")
        if desc is None:
            raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"udi {udi}")
        raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"udi {udi}")

    def _ensure_heap(self, desc: DomainDescriptor) -> heap_mod.Tlsf:
        handle = desc.heap
        if handle.control is None:
            control = heap_mod.Tlsf(
                grow_fn=self._make_grow_fn(desc),
                default_pool_size=handle.default_pool_size,
                growth_enabled=True)
            control.grow(0)  # reserve the initial pool
            control.growth_enabled = handle.growth_enabled
            handle.control = control
        return handle.control

    def _make_grow_fn(self, desc: DomainDescriptor):
        def grow(min_bytes: int) -> mem.Region:
            want = mem.page_round_up(max(min_bytes, desc.heap.default_pool_size))
            region = self._recycled_pool(want)
            if region is None:
                region = self.memory.reserve(want, kind="heap-pool")
            self.backend.tag_region(region, desc.key)
            return region
        return grow

    def _recycled_pool(self, want: int) -> mem.Region | None:
        bucket = self._pool_recycle.get(want)
        if bucket:
            return bucket.pop()
        return None

    def domain_malloc(self, udi: int, size: int, align: int = heap_mod.ALIGN) -> int:
        with self._op(trace=("malloc", udi)):
            tds = self.thread_state()
            if size == 0:
                self._malloc_target(udi, tds)
                return 0
            if size < 0:
                raise HeapError(Err.SIZE_OUT_OF_RANGE, str(size))
            desc = self._malloc_target(udi, tds)
            control = self._ensure_heap(desc)
            try:
                addr = control.allocate(size, align)
            except HeapError as exc:
                if exc.code in (Err.OUT_OF_MEMORY, Err.OS_OUT_OF_MEMORY):
                    raise DomainError(Err.OUT_OF_MEMORY, f"udi {udi}") from None
                raise
            self._apply_active_policy(tds)  # fresh pools must be visible
            return addr

    def domain_free(self, udi: int, addr: int) -> None:
        with self._op(trace=("free", udi)):
            tds = self.thread_state()
            desc = self._malloc_target(udi, tds)
            control = desc.heap.control
            if control is None:
                raise HeapError(Err.FOREIGN_ADDRESS, hex(addr))
            control.free(addr)

    # -- transitions --------------------------------------------------------------------

    def enter_domain(self, udi: int) -> None:
        with self._op(trace=("enter", udi)):
            tds = self.thread_state()
            desc = tds.descriptors.get(udi)
            if desc is None:
                if udi in self._data_domains:
                    raise DomainError(Err.NOT_EXECUTABLE, f"data udi {udi}")
                raise DomainError(Err.UNKNOWN_UDI, f"udi {udi}")
            if desc.parent_instance != tds.active.instance_id:
                raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"udi {udi}")
            if desc.state is DomainState.ENTERED:
                raise DomainError(Err.DOMAIN_ENTERED, f"udi {udi}")
            if desc.state is DomainState.DEINITIALIZED:
                raise DomainError(Err.NOT_INITIALIZED, f"udi {udi}")
            if (not self.backend.supports_concurrent_nesting
                    and self._off_root and tds.thread not in self._off_root):
                raise DomainError(Err.CONCURRENT_NESTING_UNSUPPORTED,
                                  "another thread is inside a nested domain")
            parent_pos = tds.active.stack_pos
            desc.state = DomainState.ENTERED
            desc.stack_pos = desc.stack.top
            tds.chain.append(ChainEntry(desc, parent_pos))
            self._off_root.add(tds.thread)
            self._apply_active_policy(tds)

    def exit_domain(self) -> None:
        with self._op(trace=("exit", None)):
            tds = self.thread_state()
            if len(tds.chain) == 1:
                raise DomainError(Err.EXIT_FROM_ROOT)
            entry = tds.chain.pop()
            entry.desc.state = DomainState.INITIALIZED
            tds.active.stack_pos = entry.parent_stack_pos
            if len(tds.chain) == 1:
                self._off_root.discard(tds.thread)
            self._apply_active_policy(tds)

    # -- stack frames ---------------------------------------------------------------------

    def stack_alloc(self, size: int) -> int:
        """Carve ``size`` bytes from the active domain's stack (grows down)."""
        with self._op():
            tds = self.thread_state()
            desc = tds.active
            size = (size + ctx_mod.STACK_ALIGN - 1) & ~(ctx_mod.STACK_ALIGN - 1)
            desc.stack_pos -= size
            return desc.stack_pos

    def stack_mark(self) -> int:
        with self._op():
            return self.thread_state().active.stack_pos

    def stack_release(self, mark: int) -> None:
        with self._op():
            self.thread_state().active.stack_pos = mark

    # -- teardown ----------------------------------------------------------------------------

    def deinit_domain(self, udi: int) -> None:
        with self._op(trace=("deinit", udi)):
            tds = self.thread_state()
            desc = tds.descriptors.get(udi)
            if desc is None:
                data = self._data_domains.get(udi)
                if data is not None:
                    data.state = DomainState.DEINITIALIZED
                    return
                raise DomainError(Err.NOT_INITIALIZED, f"udi {udi}")
            if desc.state is DomainState.ENTERED:
                raise DomainError(Err.DOMAIN_ENTERED, f"udi {udi}")
            if desc.state is DomainState.DEINITIALIZED:
                raise DomainError(Err.NOT_INITIALIZED, f"udi {udi}")
            desc.saved_context = None
            desc.state = DomainState.DEINITIALIZED

    def drop_capture(self, desc: DomainDescriptor) -> None:
        """Invalidate a leaked capture when its recovery scope closes."""
        with self._op():
            if desc.saved_context is not None:
                desc.saved_context = None
                if desc.state is DomainState.INITIALIZED:
                    desc.state = DomainState.DEINITIALIZED

    def destroy_domain(self, udi: int, heap_merge: bool) -> None:
        with self._op(trace=("destroy", udi)):
            self._check_canary()
            tds = self.thread_state()
            desc = tds.descriptors.get(udi)
            if desc is None:
                data = self._data_domains.get(udi)
                if data is not None:
                    return self._destroy_data(data, tds, heap_merge)
                raise DomainError(Err.UNKNOWN_UDI, f"udi {udi}")
            if desc.parent_instance != tds.active.instance_id:
                raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"udi {udi}")
            if desc.state is DomainState.ENTERED:
                raise DomainError(Err.DOMAIN_ENTERED, f"udi {udi}")
            for other in tds.descriptors.values():
                if other is not desc and other.parent_instance == desc.instance_id \
                        and other.state is not DomainState.DEINITIALIZED:
                    raise DomainError(Err.HAS_LIVE_CHILDREN, f"udi {udi}")
            if heap_merge:
                if not desc.kind.is_accessible:
                    raise DomainError(Err.MERGE_ON_INACCESSIBLE, f"udi {udi}")
                self._merge_heap(tds.active, desc)
            self._destroy_instance(tds, desc, tds.active, merge_done=heap_merge)
            self._apply_active_policy(tds)

    def _destroy_data(self, data: DomainDescriptor, tds: ThreadDomainState,
                      heap_merge: bool) -> None:
        if heap_merge:
            raise DomainError(Err.MERGE_ON_INACCESSIBLE, f"data udi {data.udi}")
        if data.creator_udi != tds.active.udi:
            raise DomainError(Err.NOT_A_CHILD_DOMAIN, f"data udi {data.udi}")
        self._discard_heap(data)
        self.backend.key_release(data.key)
        del self._data_domains[data.udi]
        self._bump()
        self._apply_active_policy(tds)

    def _merge_heap(self, parent: DomainDescriptor, child: DomainDescriptor) -> None:
        child_control = child.heap.control
        if child_control is None:
            return
        for pool in child_control.pools:
            self.backend.tag_region(pool.region, parent.key)
        parent_control = self._parent_control_for_merge(parent)
        parent_control.merge_from(child_control)
        child.heap.control = None

    def _parent_control_for_merge(self, parent: DomainDescriptor) -> heap_mod.Tlsf:
        handle = parent.heap
        if handle.control is None:
            control = heap_mod.Tlsf(
                grow_fn=self._make_grow_fn(parent),
                default_pool_size=handle.default_pool_size,
                growth_enabled=handle.growth_enabled)
            handle.control = control  # no initial pool; merged pools arrive now
        return handle.control

    def _discard_heap(self, desc: DomainDescriptor) -> None:
        control = desc.heap.control
        if control is None:
            return
        regions = control.discard()
        desc.heap.control = None
        if self.config.scrub_on_destroy and regions:
            from .faults import scrub
            scrub(self.backend, regions)
        for region in regions:
            self.backend.tag_region(region, MONITOR_KEY)
            self._pool_recycle.setdefault(region.length, []).append(region)

    def _destroy_instance(self, tds: ThreadDomainState, desc: DomainDescriptor,
                          new_parent: DomainDescriptor,
                          merge_done: bool = False) -> None:
        if not merge_done:
            self._discard_heap(desc)
        if desc.stack is not None:
            if self.config.scrub_on_destroy:
                from .faults import scrub
                scrub(self.backend, [desc.stack.region])
            self.stack_pool.recycle(desc.stack)
        self.backend.key_release(desc.key)
        desc.saved_context = None
        desc.state = DomainState.DEINITIALIZED
        tds.descriptors.pop(desc.udi, None)
        self._orphan_survivors(tds, desc.instance_id, new_parent)
        self._bump()

    def _orphan_survivors(self, tds: ThreadDomainState, instance_id: int,
                          new_parent: DomainDescriptor) -> None:
        """Handle domains that outlive a destroyed instance.

        Contexts captured while it was active lived on its stack and are
        dropped; children it registered are handed to the domain that
        observes the teardown, deinitialized, so it can destroy or
        re-initialize them.
        """
        for other in tds.descriptors.values():
            snap = other.saved_context
            if snap is not None and snap.captured_in == instance_id:
                snap.valid = False
                other.saved_context = None
                if other.state is DomainState.INITIALIZED:
                    other.state = DomainState.DEINITIALIZED
            if other.parent_instance == instance_id:
                other.parent_instance = new_parent.instance_id
                other.parent_udi = new_parent.udi
                other.saved_context = None
                if other.state is DomainState.INITIALIZED:
                    other.state = DomainState.DEINITIALIZED

    # -- rollback ----------------------------------------------------------------------------

    def active_udi(self, thread: int) -> int | None:
        tds = getattr(self._tls, "tds", None)
        if tds is None:
            return None
        return tds.active_udi

    def _rollback_plan(self, tds: ThreadDomainState):
        failing = tds.active
        if failing.udi == ROOT_UDI:
            return None
        if failing.return_target is ReturnTarget.TO_PARENT:
            if len(tds.chain) < 3:
                return None  # parent is root; no destination
            parent = tds.chain[-2].desc
            snapshot = parent.saved_context
            if snapshot is None or not snapshot.valid:
                return None
            return (snapshot, [failing, parent])
        snapshot = failing.saved_context
        if snapshot is None or not snapshot.valid:
            return None
        return (snapshot, [failing])

    def can_rollback(self, thread: int) -> bool:
        with self._lock:
            tds = getattr(self._tls, "tds", None)
            if tds is None:
                return False
            return self._rollback_plan(tds) is not None

    def abnormal_exit(self, failing_udi: int, thread: int):
        """Teardown cascade and transfer; never returns."""
        with self._op(trace=("rollback", failing_udi)):
            self._check_canary()
            tds = self.thread_state()
            plan = self._rollback_plan(tds)
            if plan is None:
                raise UnrecoverableFault(f"no rollback destination for udi {failing_udi}")
            snapshot, doomed = plan
            depth = len(snapshot.chain_ids)
            destination = tds.chain[depth - 1].desc
            while len(tds.chain) > depth:
                entry = tds.chain.pop()
                assert entry.desc in doomed, "teardown diverged from plan"
                self._destroy_instance(tds, entry.desc, destination)
            if len(tds.chain) == 1:
                self._off_root.discard(tds.thread)
            ctx_mod.restore_context(tds, snapshot)
            self._apply_active_policy(tds)
        raise DomainRollback(snapshot.token, failing_udi)

    # -- lookups -------------------------------------------------------------------------------

    def child_of(self, udi: int) -> int:
        with self._op():
            tds = self.thread_state()
            desc = tds.descriptors.get(udi) or self._data_domains.get(udi)
            if desc is None:
                raise DomainError(Err.UNKNOWN_UDI, f"udi {udi}")
            return desc.parent_udi

    def is_entered(self, udi: int) -> bool:
        with self._op():
            tds = self.thread_state()
            if udi == ROOT_UDI:
                return True
            desc = tds.descriptors.get(udi)
            if desc is None:
                raise DomainError(Err.UNKNOWN_UDI, f"udi {udi}")
            return desc.state is DomainState.ENTERED

    def descriptor_for(self, udi: int) -> DomainDescriptor:
        with self._op():
            tds = self.thread_state()
            if udi == ROOT_UDI:
                return tds.root
            desc = tds.descriptors.get(udi) or self._data_domains.get(udi)
            if desc is None:
                raise DomainError(Err.UNKNOWN_UDI, f"udi {udi}")
            return desc

    def data_domain(self, udi: int) -> DomainDescriptor | None:
        with self._lock:
            return self._data_domains.get(udi)
