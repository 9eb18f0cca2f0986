"""In-process isolation domains with secure rollback.

The runtime compartmentalizes an application into key-tagged memory
domains with disjoint stacks and heaps. A memory-safety violation inside
a nested domain is caught, the domain is torn down, and execution
resumes at a saved recovery point in an ancestor domain, so services
survive attacks that would otherwise kill the process.
"""

from .api import (Api, CallResult, InitOptions, InitResult, HEAP_MERGE,
                  NO_HEAP_MERGE)
from .config import Config
from .errors import (DomainError, DomainRollback, Err, KeyExhausted,
                     MemoryFault, SdrobError, UnrecoverableFault)
from .protection import AccessLevel
from .runtime import Runtime, get_runtime, process_init

__version__ = "0.1.0"

__all__ = [
    "AccessLevel",
    "Api",
    "CallResult",
    "Config",
    "DomainError",
    "DomainRollback",
    "Err",
    "HEAP_MERGE",
    "InitOptions",
    "InitResult",
    "KeyExhausted",
    "MemoryFault",
    "NO_HEAP_MERGE",
    "Runtime",
    "SdrobError",
    "UnrecoverableFault",
    "process_init",
    "get_runtime",
    "__version__",
]
