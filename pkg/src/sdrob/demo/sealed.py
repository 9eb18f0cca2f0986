"""Sealed keyed-MAC library: secret state in an inaccessible domain.

The "library" is a 32-byte-rate sponge MAC. Its contexts (key, state,
partial block) live in the heap of a persistent, parent-inaccessible
execution domain: callers hold context handles but can never read the
bytes. Three wrapper variants move buffers across the boundary:

  1. the sealed code reads caller input directly (callers run in the
     root domain, readable by default) and writes output through the
     argument data domain;
  2. input and output both bounce through the argument data domain;
  3. the caller provisions a shared data domain both sides can touch,
     so no copies are needed.

`nested_session` builds the deeply nested arrangement: a caller domain
with its own recovery point re-initializes the sealed domain to roll
back *through* it, so a fault in the sealed library tears down both and
lands at the caller domain's initialization site.
"""

import struct
from contextlib import contextmanager

from ..api import InitOptions, NO_HEAP_MERGE
from ..errors import DomainError
from ..protection import AccessLevel
from ..runtime import Runtime

SEALED_UDI = 30
ARG_UDI = 31
SHARED_UDI = 32
NESTED_UDI = 33
PRIV_UDI = 34

KEY_LEN = 32
TAG_LEN = 16
RATE = 32

_CTX_KEY = 0
_CTX_STATE = 32
_CTX_BUF = 64
_CTX_BUFLEN = 96
_CTX_TOTAL = 104
CTX_SIZE = 112

_M = (1 << 64) - 1

_INACC_HERE = (InitOptions.EXECUTION_DOMAIN | InitOptions.INACCESSIBLE_DOMAIN
               | InitOptions.RETURN_HERE)
_INACC_TO_PARENT = (InitOptions.EXECUTION_DOMAIN | InitOptions.INACCESSIBLE_DOMAIN
                    | InitOptions.RETURN_TO_PARENT)
_ACC_TO_CURRENT = (InitOptions.EXECUTION_DOMAIN | InitOptions.ACCESSIBLE_DOMAIN
                   | InitOptions.RETURN_TO_CURRENT)


def _rotl(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _M


def _permute(lanes: list[int]) -> list[int]:
    l0, l1, l2, l3 = lanes
    for r in range(6):
        l0 = (l0 + l1) & _M
        l3 = _rotl(l3 ^ l0, 32)
        l2 = (l2 + l3) & _M
        l1 = _rotl(l1 ^ l2, 25)
        l0 = (l0 + l1) & _M
        l3 = _rotl(l3 ^ l0, 16)
        l2 = (l2 + l3) & _M
        l1 = _rotl(l1 ^ l2, 11)
        l0 = (l0 + 0x9E3779B97F4A7C15 + r) & _M
    return [l0, l1, l2, l3]


def _absorb(state: list[int], block: bytes) -> list[int]:
    lanes = struct.unpack("<4Q", block)
    return _permute([s ^ b for s, b in zip(state, lanes)])


# The following helpers run inside the sealed domain: every load/store
# targets the domain's own heap (or a granted data domain).

def _ctx_init(api, ctx: int, key_src: int) -> None:
    key = api.load(key_src, KEY_LEN)
    api.store(ctx + _CTX_KEY, key)
    state = _absorb([0x6D61632D73706F6E, 0x6765000000000001, 0, 0], key)
    api.store(ctx + _CTX_STATE, struct.pack("<4Q", *state))
    api.store_u64(ctx + _CTX_BUFLEN, 0)
    api.store_u64(ctx + _CTX_TOTAL, 0)


def _ctx_update(api, ctx: int, src: int, length: int) -> None:
    state = list(struct.unpack("<4Q", api.load(ctx + _CTX_STATE, 32)))
    buflen = api.load_u64(ctx + _CTX_BUFLEN)
    data = (api.load(ctx + _CTX_BUF, buflen) if buflen else b"")
    data += api.load(src, length) if length else b""
    pos = 0
    while len(data) - pos >= RATE:
        state = _absorb(state, data[pos:pos + RATE])
        pos += RATE
    rest = data[pos:]
    if rest:
        api.store(ctx + _CTX_BUF, rest)
    api.store_u64(ctx + _CTX_BUFLEN, len(rest))
    api.store_u64(ctx + _CTX_TOTAL, api.load_u64(ctx + _CTX_TOTAL) + length)
    api.store(ctx + _CTX_STATE, struct.pack("<4Q", *state))


def _ctx_final(api, ctx: int, out: int) -> None:
    state = list(struct.unpack("<4Q", api.load(ctx + _CTX_STATE, 32)))
    buflen = api.load_u64(ctx + _CTX_BUFLEN)
    total = api.load_u64(ctx + _CTX_TOTAL)
    block = (api.load(ctx + _CTX_BUF, buflen) if buflen else b"") + b"\x80"
    block += b"\x00" * (RATE - 8 - len(block) % RATE if len(block) % RATE <= RATE - 8
                        else 2 * RATE - 8 - len(block) % RATE)
    block += struct.pack("<Q", total)
    for pos in range(0, len(block), RATE):
        state = _absorb(state, block[pos:pos + RATE])
    state = _permute(state)
    api.store(out, struct.pack("<2Q", state[0], state[1])[:TAG_LEN])


def reference_mac(key: bytes, chunks: list[bytes]) -> bytes:
    """Pure-python oracle computing the same MAC without any domains."""
    state = _absorb([0x6D61632D73706F6E, 0x6765000000000001, 0, 0],
                    key.ljust(KEY_LEN, b"\x00")[:KEY_LEN])
    buf = b""
    total = 0
    for chunk in chunks:
        buf += chunk
        total += len(chunk)
        while len(buf) >= RATE:
            state = _absorb(state, buf[:RATE])
            buf = buf[RATE:]
    block = buf + b"\x80"
    block += b"\x00" * (RATE - 8 - len(block) % RATE if len(block) % RATE <= RATE - 8
                        else 2 * RATE - 8 - len(block) % RATE)
    block += struct.pack("<Q", total)
    for pos in range(0, len(block), RATE):
        state = _absorb(state, block[pos:pos + RATE])
    state = _permute(state)
    return struct.pack("<2Q", state[0], state[1])[:TAG_LEN]


class SealedSession:
    """One initialized sealed-library session (domain + data domains)."""

    def __init__(self, rt: Runtime, variant: int):
        if variant not in (1, 2, 3):
            raise ValueError("variant must be 1, 2, or 3")
        self.rt = rt
        self.api = rt.api
        self.variant = variant
        self._scratch_root = 0
        self._scratch_arg = 0
        self._scratch_shared = 0
        self._scratch_cap = 0
        self.out_addr = 0

    def open(self) -> None:
        api = self.api
        api.init(ARG_UDI, InitOptions.DATA_DOMAIN, heap_size=512 * 1024)
        if self.variant == 3:
            api.init(SHARED_UDI, InitOptions.DATA_DOMAIN, heap_size=512 * 1024)
        res = api.init(SEALED_UDI, _INACC_HERE)
        if not res.ok:
            raise DomainError(res.error, "sealed domain init failed")
        api.dprotect(SEALED_UDI, ARG_UDI, AccessLevel.READ_WRITE)
        if self.variant == 3:
            api.dprotect(SEALED_UDI, SHARED_UDI, AccessLevel.READ_WRITE)
        self.out_addr = api.malloc(ARG_UDI if self.variant != 3 else SHARED_UDI,
                                   TAG_LEN)

    def close(self) -> None:
        api = self.api
        for udi in (SEALED_UDI, ARG_UDI, SHARED_UDI):
            try:
                api.destroy(udi, NO_HEAP_MERGE)
            except DomainError:
                pass

    def _stage_input(self, data: bytes) -> int:
        """Place update input where the active variant expects it."""
        api = self.api
        if len(data) > self._scratch_cap or not self._scratch_cap:
            cap = max(len(data), 4096)
            self._scratch_root = api.malloc(0, cap)
            self._scratch_arg = api.malloc(ARG_UDI, cap)
            if self.variant == 3:
                self._scratch_shared = api.malloc(SHARED_UDI, cap)
            self._scratch_cap = cap
        if self.variant == 1:
            addr = self._scratch_root      # read directly out of the caller
        elif self.variant == 2:
            addr = self._scratch_arg       # bounced through the data domain
        else:
            addr = self._scratch_shared    # caller-provisioned shared area
        if data:
            api.store(addr, data)
        return addr

    def new_context(self, key: bytes) -> int:
        api = self.api
        key_addr = api.malloc(ARG_UDI, KEY_LEN)
        api.store(key_addr, key.ljust(KEY_LEN, b"\x00")[:KEY_LEN])
        api.enter(SEALED_UDI)
        ctx = api.malloc(SEALED_UDI, CTX_SIZE)  # allocated from inside
        _ctx_init(api, ctx, key_addr)
        api.exit()
        api.free(ARG_UDI, key_addr)
        return ctx

    def update(self, ctx: int, data: bytes) -> None:
        api = self.api
        src = self._stage_input(data)
        api.enter(SEALED_UDI)
        _ctx_update(api, ctx, src, len(data))
        api.exit()

    def final(self, ctx: int) -> bytes:
        api = self.api
        api.enter(SEALED_UDI)
        _ctx_final(api, ctx, self.out_addr)
        api.exit()
        return api.load(self.out_addr, TAG_LEN)

    def mac(self, key: bytes, chunks: list[bytes]) -> bytes:
        ctx = self.new_context(key)
        for chunk in chunks:
            self.update(ctx, chunk)
        return self.final(ctx)


@contextmanager
def sealed_session(rt: Runtime, variant: int):
    sess = SealedSession(rt, variant)
    sess.open()
    try:
        yield sess
    finally:
        sess.close()


def nested_session(rt: Runtime, inject: str | None = None) -> dict:
    """Deeply nested arrangement: caller domain around the sealed library.

    ``inject`` is None, "nested" (fault in the caller domain), or
    "sealed" (fault inside the sealed library, which rolls back through
    the caller domain's recovery point).

    Returns a report with the landing result and per-domain survival.
    """
    api = rt.api
    report: dict = {"result": None, "tag": None}
    g_probe = rt.alloc_global(8, b"constant")

    res = api.init(SEALED_UDI, _INACC_HERE)
    assert res.ok, res
    api.deinit(SEALED_UDI)  # its real recovery point is established later
    api.init(PRIV_UDI, InitOptions.DATA_DOMAIN, heap_size=65536)
    api.init(SHARED_UDI, InitOptions.DATA_DOMAIN, heap_size=65536)

    key_addr = api.malloc(PRIV_UDI, KEY_LEN)
    api.store(key_addr, b"K" * KEY_LEN)
    plain_addr = api.malloc(SHARED_UDI, 64)
    api.store(plain_addr, b"p" * 64)
    tag_addr = api.malloc(SHARED_UDI, TAG_LEN)

    def seal_and_mac() -> int:
        """Runs inside the caller (nested) domain."""
        res = api.init(SEALED_UDI, _INACC_TO_PARENT)
        if not res.ok:
            return -1
        api.dprotect(SEALED_UDI, PRIV_UDI, AccessLevel.READ_WRITE)
        api.dprotect(SEALED_UDI, SHARED_UDI, AccessLevel.READ_WRITE)
        if inject == "nested":
            api.store(g_probe, b"write to a root global from nested code")
        api.enter(SEALED_UDI)
        ctx = api.malloc(SEALED_UDI, CTX_SIZE)
        _ctx_init(api, ctx, key_addr)
        if inject == "sealed":
            api.store(g_probe, b"write to a root global from sealed code")
        _ctx_update(api, ctx, plain_addr, 64)
        _ctx_final(api, ctx, tag_addr)
        api.exit()
        api.deinit(SEALED_UDI)
        return 0

    with api.recover(NESTED_UDI, _ACC_TO_CURRENT) as rp:
        if rp.ok:
            api.dprotect(NESTED_UDI, SHARED_UDI, AccessLevel.READ_WRITE)
            api.enter(NESTED_UDI)
            rc = seal_and_mac()
            api.exit()
            if rc == 0:
                report["tag"] = api.load(tag_addr, TAG_LEN)
            api.destroy(NESTED_UDI, NO_HEAP_MERGE)
    report["result"] = rp.result

    def _state(udi: int) -> str:
        try:
            desc = rt.monitor.descriptor_for(udi)
        except DomainError:
            return "absent"
        return desc.state.value

    report["sealed_state"] = _state(SEALED_UDI)
    report["nested_state"] = _state(NESTED_UDI)
    report["data_intact"] = (api.load(key_addr, KEY_LEN) == b"K" * KEY_LEN
                             and api.load(plain_addr, 64) == b"p" * 64)

    # sealed domain must refuse entry until re-initialized
    try:
        api.enter(SEALED_UDI)
        api.exit()
        report["sealed_enterable"] = True
    except DomainError:
        report["sealed_enterable"] = False

    for udi in (SEALED_UDI, NESTED_UDI, PRIV_UDI, SHARED_UDI):
        try:
            api.destroy(udi, NO_HEAP_MERGE)
        except DomainError:
            pass
    return report
