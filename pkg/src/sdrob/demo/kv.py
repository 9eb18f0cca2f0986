"""Resilient TCP key-value cache.

Request handling follows the per-event sandbox pattern: each worker
thread keeps one nested accessible domain; every event re-arms a
recovery point, deep-copies the pending connection bytes into the
domain, enters it, parses and executes commands on the copies, and only
after a normal exit commits staged writes to the shared store and syncs
the original buffer. A fault anywhere in handling rolls the thread back,
closes the offending connection, and the server keeps serving.

Wire protocol (lines end with \\n; values are raw bytes):

    SET <key> <len>\\n<len bytes>\\n      -> OK
    GET <key>\\n                          -> VALUE <len>\\n<bytes>\\n | NOT_FOUND
    PING / QUIT / STATS / SNAP
    CRASH <mode> [<key> <len>\\n<bytes>]\\n   (test hook; mode selects the
        injected fault: heap-overflow, stack-smash, root-write,
        guard-overrun; the optional item is staged before the fault and
        must never become visible)

SNAP is a test hook returning checksums of the root global area, the
store and mutex data-domain pools, and the logical item set.
"""

import selectors
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

from ..api import InitOptions, NO_HEAP_MERGE
from ..errors import DomainError, UnrecoverableFault
from ..protection import AccessLevel
from ..runtime import Runtime

HANDLER_UDI = 10
STORE_UDI = 900
MUTEX_UDI = 901

MAX_VALUE = 128 * 1024
CONN_CAP = 384 * 1024
RECV_CHUNK = 128 * 1024
DEFAULT_HANDLER_HEAP = 1024 * 1024

_EXEC_OPTS = (InitOptions.EXECUTION_DOMAIN | InitOptions.ACCESSIBLE_DOMAIN
              | InitOptions.RETURN_HERE)

CRASH_MODES = ("heap-overflow", "stack-smash", "root-write", "guard-overrun")


@dataclass
class Command:
    op: str
    key: bytes = b""
    value: bytes = b""
    crash_mode: str = ""


def parse_commands(buf: bytes) -> tuple[list[Command], int, str | None]:
    """Split complete commands off the front of ``buf``.

    Returns (commands, bytes consumed, protocol error or None). Shared
    by the sandboxed build and the baseline so both parse identically.
    """
    cmds: list[Command] = []
    pos = 0
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            break
        line = buf[pos:nl]
        parts = line.split()
        if not parts:
            pos = nl + 1
            continue
        op = parts[0].upper()
        if op == b"SET" or (op == b"CRASH" and len(parts) >= 4):
            if op == b"SET" and len(parts) != 3:
                return cmds, pos, "bad SET"
            key, length_s = parts[-2], parts[-1]
            try:
                length = int(length_s)
            except ValueError:
                return cmds, pos, "bad length"
            if not 0 <= length <= MAX_VALUE:
                return cmds, pos, "length out of bounds"
            body_start = nl + 1
            body_end = body_start + length
            if len(buf) < body_end + 1:
                break  # wait for the full body plus trailing newline
            value = buf[body_start:body_end]
            if buf[body_end:body_end + 1] != b"\n":
                return cmds, pos, "unterminated value"
            if op == b"SET":
                cmds.append(Command("SET", key=key, value=value))
            else:
                mode = parts[1].decode("ascii", "replace")
                cmds.append(Command("CRASH", key=key, value=value, crash_mode=mode))
            pos = body_end + 1
        elif op == b"GET":
            if len(parts) != 2:
                return cmds, pos, "bad GET"
            cmds.append(Command("GET", key=parts[1]))
            pos = nl + 1
        elif op == b"CRASH":
            if len(parts) != 2:
                return cmds, pos, "bad CRASH"
            cmds.append(Command("CRASH", crash_mode=parts[1].decode("ascii", "replace")))
            pos = nl + 1
        elif op in (b"PING", b"QUIT", b"STATS", b"SNAP"):
            cmds.append(Command(op.decode()))
            pos = nl + 1
        else:
            return cmds, pos, f"unknown command {op[:16]!r}"
    return cmds, pos, None


@dataclass
class Conn:
    sock: socket.socket
    pending: bytes = b""
    buf_addr: int = 0  # root-domain copy of the last synced buffer
    close_after: bool = False
    rollback_t0: int = 0  # fault timestamp, for recovery-latency samples


@dataclass
class _WorkerState:
    """Per-thread sandbox state: reused domain and its scratch buffers."""

    registered: bool = False
    copy_addr: int = 0
    copy_cap: int = 0


class KvStore:
    """Hash index over records stored in a process-global data domain.

    Record layout: u16 key length, u32 value length, key bytes, value
    bytes. The index maps key -> record address and is only mutated
    under the shared commit lock; readers inside handler domains hold a
    read grant on the store key.
    """

    def __init__(self, rt: Runtime):
        self.rt = rt
        rt.api.init(STORE_UDI, InitOptions.DATA_DOMAIN)
        rt.api.init(MUTEX_UDI, InitOptions.DATA_DOMAIN, heap_size=65536)
        self.index: dict[bytes, tuple[int, int, int]] = {}
        self._pylock = threading.Lock()
        self.lock_state_addr = rt.api.malloc(MUTEX_UDI, 16)

    def acquire(self):
        # the lock word itself lives in a shared data domain
        self._pylock.acquire()
        self.rt.api.store_u64(self.lock_state_addr, threading.get_ident())

    def release(self):
        self.rt.api.store_u64(self.lock_state_addr, 0)
        self._pylock.release()

    def lookup(self, key: bytes) -> tuple[int, int] | None:
        rec = self.index.get(key)
        if rec is None:
            return None
        addr, klen, vlen = rec
        return addr + 6 + klen, vlen

    def commit(self, key: bytes, value: bytes) -> None:
        """Publish one staged item; caller serializes via acquire/release."""
        api = self.rt.api
        record = struct.pack("<HI", len(key), len(value)) + key + value
        addr = api.malloc(STORE_UDI, len(record))
        api.store(addr, record)
        old = self.index.get(key)
        self.index[key] = (addr, len(key), len(value))
        if old is not None:
            api.free(STORE_UDI, old[0])

    def items_crc(self) -> int:
        crc = 0
        api = self.rt.api
        for key in sorted(self.index):
            addr, klen, vlen = self.index[key]
            crc = zlib.crc32(api.load(addr, 6 + klen + vlen), crc)
        return crc


class KvServer:
    def __init__(self, rt: Runtime | None, host: str = "127.0.0.1", port: int = 0,
                 workers: int = 1, no_domains: bool = False,
                 handler_heap: int = DEFAULT_HANDLER_HEAP):
        self.no_domains = no_domains
        self.rt = rt
        self.workers_n = max(1, workers)
        self.handler_heap = handler_heap
        self.stats = {"requests": 0, "rollbacks": 0, "commits": 0,
                      "conns": 0, "proto_errors": 0}
        self._stats_lock = threading.Lock()
        self.rollback_latencies_ns: list[int] = []
        self._fault_tls = threading.local()
        if not no_domains:
            assert rt is not None
            self.store = KvStore(rt)
            # root-owned globals: a config word nested code must never write
            self.g_config_addr = rt.alloc_global(16, b"cfg-immutable-00")
            self.g_requests_addr = rt.alloc_global(8, b"\0" * 8)
            self.g_commits_addr = rt.alloc_global(8, b"\0" * 8)
            # serialize sandbox occupancy when page permissions are global
            self._occupancy = (threading.Lock()
                               if not rt.backend.supports_concurrent_nesting
                               else None)
            rt.faults.listeners.append(self._on_fault_event)
        else:
            self.plain_store: dict[bytes, bytes] = {}
            self._plain_lock = threading.Lock()
            self._occupancy = None
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind((host, port))
        self._listen.listen(256)
        self.host, self.port = self._listen.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._worker_sel: list[selectors.DefaultSelector] = []
        self._worker_queues: list[list[socket.socket]] = []
        self._worker_wakes: list[tuple[int, int]] = []

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        for i in range(self.workers_n):
            sel = selectors.DefaultSelector()
            r, w = socket.socketpair()
            r.setblocking(False)
            sel.register(r, selectors.EVENT_READ, ("wake", None))
            self._worker_sel.append(sel)
            self._worker_queues.append([])
            self._worker_wakes.append((r, w))
            t = threading.Thread(target=self._worker_main, args=(i,),
                                 name=f"kv-worker-{i}", daemon=True)
            self._threads.append(t)
            t.start()
        acceptor = threading.Thread(target=self._accept_main, name="kv-accept",
                                    daemon=True)
        self._threads.append(acceptor)
        acceptor.start()

    def stop(self):
        self._stop.set()
        try:
            self._listen.close()
        except OSError:
            pass
        for _, w in self._worker_wakes:
            try:
                w.send(b"x")
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=5)

    def _accept_main(self):
        i = 0
        while not self._stop.is_set():
            try:
                sock, _ = self._listen.accept()
            except OSError:
                break
            with self._stats_lock:
                self.stats["conns"] += 1
            q = self._worker_queues[i % self.workers_n]
            q.append(sock)
            try:
                self._worker_wakes[i % self.workers_n][1].send(b"x")
            except OSError:
                pass
            i += 1

    # -- worker loop ----------------------------------------------------------

    def _worker_main(self, idx: int):
        if not self.no_domains:
            self.rt.thread_init()
        sel = self._worker_sel[idx]
        queue = self._worker_queues[idx]
        state = _WorkerState()
        conns: dict[socket.socket, Conn] = {}
        while not self._stop.is_set():
            events = sel.select(timeout=0.5)
            for key, _ in events:
                tag, conn = key.data
                if tag == "wake":
                    try:
                        key.fileobj.recv(4096)
                    except OSError:
                        pass
                    while queue:
                        sock = queue.pop()
                        sock.setblocking(False)
                        c = Conn(sock=sock)
                        conns[sock] = c
                        sel.register(sock, selectors.EVENT_READ, ("conn", c))
                    continue
                try:
                    self._on_readable(idx, sel, conns, state, conn)
                except UnrecoverableFault:
                    raise
                except OSError:
                    self._drop(sel, conns, conn)
        for c in list(conns.values()):
            self._drop(sel, conns, c)

    def _drop(self, sel, conns, conn: Conn):
        try:
            sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conns.pop(conn.sock, None)
        try:
            conn.sock.close()
        except OSError:
            pass
        if conn.buf_addr and not self.no_domains:
            try:
                self.rt.api.free(0, conn.buf_addr)
            except DomainError:
                pass
            conn.buf_addr = 0

    def _on_readable(self, idx, sel, conns, state, conn: Conn):
        data = conn.sock.recv(RECV_CHUNK)
        if not data:
            self._drop(sel, conns, conn)
            return
        conn.pending += data
        if len(conn.pending) > CONN_CAP:
            self._drop(sel, conns, conn)
            return
        if self.no_domains:
            ok = self._handle_event_plain(conn)
        else:
            if self._occupancy is not None:
                with self._occupancy:
                    ok = self._handle_event(state, conn)
            else:
                ok = self._handle_event(state, conn)
        if not ok or conn.close_after:
            self._drop(sel, conns, conn)
            if conn.rollback_t0:
                # recovery latency: fault detection through closing the
                # offending connection, service ready for the next event
                self.rollback_latencies_ns.append(time.perf_counter_ns()
                                                  - conn.rollback_t0)
                conn.rollback_t0 = 0

    # -- sandboxed event handling ------------------------------------------------

    def _handle_event(self, state: _WorkerState, conn: Conn) -> bool:
        """One event: copy in, enter, execute, commit, sync. False closes."""
        api = self.rt.api
        with api.recover(HANDLER_UDI, _EXEC_OPTS,
                         heap_size=self.handler_heap, growth=False) as rp:
            if rp.ok:
                api.dprotect(HANDLER_UDI, STORE_UDI, AccessLevel.READ_ONLY)
                api.dprotect(HANDLER_UDI, MUTEX_UDI, AccessLevel.READ_ONLY)
                if not state.registered or state.copy_cap < CONN_CAP:
                    state.copy_addr = api.malloc(HANDLER_UDI, CONN_CAP)
                    state.copy_cap = CONN_CAP
                    state.registered = True
                # deep copy of the connection buffer into the domain
                api.store(state.copy_addr, conn.pending)
                api.enter(HANDLER_UDI)
                try:
                    outcome = self._drive(state, len(conn.pending))
                except Exception:
                    # defensive: a bug in handler code must not wedge the
                    # thread inside the sandbox
                    api.exit()
                    api.destroy(HANDLER_UDI, NO_HEAP_MERGE)
                    state.registered = False
                    raise
                api.exit()
                consumed, responses, staged, error, close, data_ops = outcome
                if staged:
                    self.store.acquire()
                    try:
                        for key, item_addr, vlen in staged:
                            value = api.load(item_addr, vlen) if vlen else b""
                            self.store.commit(key, value)
                    finally:
                        self.store.release()
                    for _, item_addr, _ in staged:
                        if item_addr:
                            api.free(HANDLER_UDI, item_addr)
                    with self._stats_lock:
                        self.stats["commits"] += len(staged)
                    api.store_u64(self.g_commits_addr,
                                  api.load_u64(self.g_commits_addr) + len(staged))
                for addr, length in responses:
                    if addr:
                        conn.sock.sendall(api.load(addr, length))
                        api.free(HANDLER_UDI, addr)
                conn.pending = conn.pending[consumed:]
                # sync the parent-side buffer with the surviving tail
                if conn.buf_addr == 0:
                    conn.buf_addr = api.malloc(0, CONN_CAP)
                api.store(conn.buf_addr, conn.pending or b"\0")
                with self._stats_lock:
                    self.stats["requests"] += 1
                if data_ops:
                    api.store_u64(self.g_requests_addr,
                                  api.load_u64(self.g_requests_addr) + data_ops)
                api.deinit(HANDLER_UDI)
                conn.close_after = conn.close_after or close
                if error:
                    conn.sock.sendall(f"ERROR {error}\n".encode())
                    with self._stats_lock:
                        self.stats["proto_errors"] += 1
                    return False
                return True
        # rollback landed: the offending event is abandoned wholesale
        with self._stats_lock:
            self.stats["rollbacks"] += 1
        state.registered = False
        conn.rollback_t0 = getattr(self._fault_tls, "t", 0)
        self._fault_tls.t = 0
        return False

    def _on_fault_event(self, event):
        self._fault_tls.t = event.t_detected_ns

    def _drive(self, state: _WorkerState, pending_len: int):
        """Runs inside the handler domain, on the deep copy.

        Returns (consumed, [(resp_addr, len)], staged, error, close,
        data_ops). Only data commands advance the request counter so
        control commands (SNAP, PING) leave model memory untouched.
        Staged items are built in the domain heap and published only
        after a normal exit.
        """
        api = self.rt.api
        buf = api.load(state.copy_addr, pending_len) if pending_len else b""
        cmds, consumed, error = parse_commands(buf)
        responses: list[tuple[int, int]] = []
        staged: list[tuple[bytes, int, int]] = []
        close = False
        data_ops = 0

        def respond(payload: bytes):
            addr = api.malloc(HANDLER_UDI, len(payload))
            api.store(addr, payload)
            responses.append((addr, len(payload)))

        for cmd in cmds:
            if cmd.op == "SET":
                item = api.malloc(HANDLER_UDI, max(len(cmd.value), 1))
                if cmd.value:
                    api.store(item, cmd.value)
                staged.append((cmd.key, item, len(cmd.value)))
                data_ops += 1
                respond(b"OK\n")
            elif cmd.op == "GET":
                data_ops += 1
                hit = self.store.lookup(cmd.key)
                if hit is None:
                    respond(b"NOT_FOUND\n")
                else:
                    addr, vlen = hit
                    value = api.load(addr, vlen)  # read grant on the store
                    respond(b"VALUE %d\n" % vlen + value + b"\n")
            elif cmd.op == "PING":
                respond(b"PONG\n")
            elif cmd.op == "QUIT":
                respond(b"BYE\n")
                close = True
            elif cmd.op == "STATS":
                with self._stats_lock:
                    blob = " ".join(f"{k}={v}" for k, v in sorted(self.stats.items()))
                respond(f"STATS {blob}\n".encode())
            elif cmd.op == "SNAP":
                respond(self._snapshot_line())
            elif cmd.op == "CRASH":
                if cmd.key:
                    item = api.malloc(HANDLER_UDI, max(len(cmd.value), 1))
                    api.store(item, cmd.value)
                    staged.append((cmd.key, item, len(cmd.value)))
                self._inject(cmd.crash_mode)
                respond(b"ERROR crash mode did not fault\n")
        return consumed, responses, staged, error, close, data_ops

    def _inject(self, mode: str) -> None:
        """Trigger the selected memory-safety violation inside the domain."""
        api = self.rt.api
        if mode == "heap-overflow":
            victim = api.malloc(HANDLER_UDI, 32)
            api.store(victim, b"\xa5" * (self.handler_heap + 2 * 4096))
        elif mode == "stack-smash":
            api.stack_alloc(256)  # stand-in for caller frames above the victim
            base, canary = api.frame_open(64)
            api.store(base, b"A" * 88)  # runs over the canary word
            api.frame_close(canary)
        elif mode == "root-write":
            api.store(self.g_config_addr, b"pwned!")
        elif mode == "guard-overrun":
            desc = self.rt.monitor.descriptor_for(HANDLER_UDI)
            api.store(desc.stack.limit - 64, b"\xee" * 128)
        # unknown modes fall through and answer in-band

    def _snapshot_line(self) -> bytes:
        rt = self.rt
        g = zlib.crc32(rt.api.load(rt.globals_region.base, rt.globals_region.length))
        crcs = []
        for udi in (STORE_UDI, MUTEX_UDI):
            desc = rt.monitor.data_domain(udi)
            crc = 0
            control = desc.heap.control if desc else None
            if control is not None:
                for pool in control.pools:
                    crc = zlib.crc32(rt.api.load(pool.region.base,
                                                 pool.region.length), crc)
            crcs.append(crc)
        items = self.store.items_crc()
        return f"SNAPSHOT {g} {crcs[0]} {crcs[1]} {items}\n".encode()

    # -- baseline (no sandboxing) ------------------------------------------------

    def _handle_event_plain(self, conn: Conn) -> bool:
        cmds, consumed, error = parse_commands(conn.pending)
        out = bytearray()
        for cmd in cmds:
            if cmd.op == "SET":
                with self._plain_lock:
                    self.plain_store[cmd.key] = cmd.value
                out += b"OK\n"
            elif cmd.op == "GET":
                with self._plain_lock:
                    value = self.plain_store.get(cmd.key)
                out += (b"NOT_FOUND\n" if value is None
                        else b"VALUE %d\n" % len(value) + value + b"\n")
            elif cmd.op == "PING":
                out += b"PONG\n"
            elif cmd.op == "QUIT":
                out += b"BYE\n"
                conn.close_after = True
            elif cmd.op == "STATS":
                with self._stats_lock:
                    blob = " ".join(f"{k}={v}" for k, v in sorted(self.stats.items()))
                out += f"STATS {blob}\n".encode()
            elif cmd.op == "SNAP":
                with self._plain_lock:
                    crc = 0
                    for key in sorted(self.plain_store):
                        crc = zlib.crc32(key + self.plain_store[key], crc)
                out += f"SNAPSHOT 0 0 0 {crc}\n".encode()
            elif cmd.op == "CRASH":
                # the baseline has no sandbox: a crash request kills the
                # process, which is exactly the behavior being compared
                raise SystemExit(f"baseline crashed by request ({cmd.crash_mode})")
        conn.pending = conn.pending[consumed:]
        with self._stats_lock:
            self.stats["requests"] += 1
        if out:
            conn.sock.sendall(bytes(out))
        if error:
            conn.sock.sendall(f"ERROR {error}\n".encode())
            return False
        return True


class KvClient:
    """Small blocking client used by tests and the benchmark harness."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._buf = b""

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def _read_line(self) -> bytes:
        while b"\n" not in self._buf:
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("closed")
            self._buf += data
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("closed")
            self._buf += data
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def set(self, key: bytes, value: bytes) -> bytes:
        self.sock.sendall(b"SET %s %d\n" % (key, len(value)) + value + b"\n")
        return self._read_line()

    def get(self, key: bytes) -> bytes | None:
        self.sock.sendall(b"GET %s\n" % key)
        line = self._read_line()
        if line.startswith(b"VALUE "):
            n = int(line.split()[1])
            value = self._read_exact(n)
            self._read_exact(1)  # trailing newline
            return value
        return None

    def ping(self) -> bool:
        self.sock.sendall(b"PING\n")
        return self._read_line() == b"PONG"

    def snap(self) -> tuple[int, ...]:
        self.sock.sendall(b"SNAP\n")
        line = self._read_line()
        return tuple(int(x) for x in line.split()[1:])

    def stats(self) -> dict:
        self.sock.sendall(b"STATS\n")
        line = self._read_line().decode()
        return dict(kv.split("=") for kv in line.split()[1:])

    def crash(self, mode: str, key: bytes = b"", value: bytes = b"") -> None:
        """Send a crash request; the server closes this connection."""
        if key:
            self.sock.sendall(b"CRASH %s %s %d\n" % (mode.encode(), key, len(value))
                              + value + b"\n")
        else:
            self.sock.sendall(b"CRASH %s\n" % mode.encode())

    def expect_close(self, timeout: float = 5.0) -> bool:
        self.sock.settimeout(timeout)
        try:
            while True:
                data = self.sock.recv(65536)
                if not data:
                    return True
        except (ConnectionError, OSError):
            return True
