"""Runtime assembly: process and thread initialization.

A `Runtime` owns one backend, one monitor, one fault orchestrator, and a
page-aligned root-owned global-data area. Tests build private instances;
applications normally use the module-level `process_init()` singleton.
"""

import threading

from .api import Api
from .config import Config
from .errors import DomainError, Err
from .faults import FaultManager
from .mem import PAGE, MemorySystem
from .monitor import Monitor
from .protection import ROOT_KEY, make_backend

_GLOBALS_PAGES = 4


class Runtime:
    def __init__(self, config: Config | None = None):
        self.config = config if config is not None else Config.from_env()
        self.memory = MemorySystem(force_pipe_engine=self.config.force_pipe_engine)
        self.backend = make_backend(self.config.backend, self.memory)
        self.monitor = Monitor(self.backend, self.memory, self.config)
        self.faults = FaultManager(self.monitor, self.config.scrub_on_destroy)
        self.backend.fault_sink = self.faults.deliver
        self.faults.install_handlers()
        # page-aligned global-data area, root-owned: readable from nested
        # domains, writable only from the root domain
        self.globals_region = self.memory.reserve(_GLOBALS_PAGES * PAGE,
                                                  kind="globals", key=ROOT_KEY)
        self._globals_cursor = 0
        self._globals_lock = threading.Lock()
        self.api = Api(self)
        self.monitor.thread_state()  # the creating thread becomes a root thread

    def thread_init(self) -> None:
        """Prepare the calling thread: fresh per-thread state, root active."""
        self.monitor.thread_state()

    def alloc_global(self, size: int, init: bytes = b"") -> int:
        """Reserve root-owned global bytes (16-byte aligned)."""
        size = max(size, len(init))
        with self._globals_lock:
            aligned = (size + 15) & ~15
            if self._globals_cursor + aligned > self.globals_region.length:
                raise DomainError(Err.OUT_OF_MEMORY, "global data area exhausted")
            addr = self.globals_region.base + self._globals_cursor
            self._globals_cursor += aligned
        if init:
            self.globals_region.view[addr - self.globals_region.base:
                                     addr - self.globals_region.base + len(init)] = init
        return addr

    @property
    def backend_name(self) -> str:
        return self.backend.name

    def close(self) -> None:
        """Tear down all regions (tests and short-lived tools only)."""
        self.memory.close()


_default_runtime: Runtime | None = None
_default_lock = threading.Lock()


def process_init(config: Config | None = None) -> Runtime:
    """Create (once) and return the process-wide runtime. Idempotent."""
    global _default_runtime
    with _default_lock:
        if _default_runtime is None:
            _default_runtime = Runtime(config)
        return _default_runtime


def get_runtime() -> Runtime:
    return process_init()
