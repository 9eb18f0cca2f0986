"""Environment-driven runtime configuration.

Recognized variables:

    SDROB_BACKEND          hardware | paging | audit  (default: hardware
                           when the host supports userspace protection
                           keys, otherwise paging)
    SDROB_STACK_SIZE       per-domain stack bytes (default 4 MiB)
    SDROB_HEAP_SIZE        default initial heap pool bytes (default 16 MiB)
    SDROB_SCRUB_ON_DESTROY 0 | 1 (default 0): zero domain memory before
                           recycling it
"""

import os
from dataclasses import dataclass, field

DEFAULT_STACK_SIZE = 4 * 1024 * 1024
DEFAULT_HEAP_SIZE = 16 * 1024 * 1024
MIN_STACK_SIZE = 64 * 1024

BACKEND_CHOICES = ("hardware", "paging", "audit")


def _int_env(env, name, default):
    raw = env.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer byte count, got {raw!r}")
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


@dataclass
class Config:
    backend: str = ""  # "" means: hardware if available, else paging
    stack_size: int = DEFAULT_STACK_SIZE
    heap_size: int = DEFAULT_HEAP_SIZE
    scrub_on_destroy: bool = False
    # Test/bench knobs, not part of the environment surface.
    force_pipe_engine: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.backend and self.backend not in BACKEND_CHOICES:
            raise ValueError(
                f"backend must be one of {BACKEND_CHOICES}, got {self.backend!r}"
            )
        if self.stack_size < MIN_STACK_SIZE:
            raise ValueError(f"stack_size must be >= {MIN_STACK_SIZE}")

    @classmethod
    def from_env(cls, env=None) -> "Config":
        env = os.environ if env is None else env
        return cls(
            backend=env.get("SDROB_BACKEND", "").strip(),
            stack_size=_int_env(env, "SDROB_STACK_SIZE", DEFAULT_STACK_SIZE),
            heap_size=_int_env(env, "SDROB_HEAP_SIZE", DEFAULT_HEAP_SIZE),
            scrub_on_destroy=env.get("SDROB_SCRUB_ON_DESTROY", "0").strip() == "1",
        )
