"""Line-protocol parsing service with a sandboxed, persistent parser domain.

Each request is parsed in phases (request line, then headers) inside one
accessible nested domain that persists across requests; the recovery
point is re-armed at the first entry of every request, so a memory
violation in any phase rolls the whole request back and the connection
is closed while the service keeps accepting.

The header parser deliberately contains an unchecked backwards-copy
path: a header ``X-Fold: <n>`` copies the previous header value ``n``
bytes *before* the cursor. A large ``n`` walks below the request buffer
and out of the domain entirely, which is the underflow the resilience
tests exercise.
"""

import socket
import struct
import threading

from ..api import InitOptions
from ..errors import UnrecoverableFault
from ..runtime import Runtime

PARSER_UDI = 20

REQUEST_CAP = 64 * 1024
FIELDS_CAP = 4 * 1024

_EXEC_OPTS = (InitOptions.EXECUTION_DOMAIN | InitOptions.ACCESSIBLE_DOMAIN
              | InitOptions.RETURN_HERE)


class ParserWorkspace:
    """Buffers in the parser domain, reused across requests."""

    def __init__(self, api):
        self.req_addr = api.malloc(PARSER_UDI, REQUEST_CAP)
        self.fields_addr = api.malloc(PARSER_UDI, FIELDS_CAP)


def _parse_request_line(api, ws: ParserWorkspace, length: int) -> int:
    """Phase one (in-domain): method and path into the fields buffer.

    Returns the cursor position after the request line.
    """
    raw = api.load(ws.req_addr, min(length, 4096))
    nl = raw.find(b"\r\n")
    if nl < 0:
        raise ValueError("missing request line")
    parts = raw[:nl].split(b" ")
    if len(parts) != 3:
        raise ValueError("malformed request line")
    method, path, version = parts
    blob = struct.pack("<HH", len(method), len(path)) + method + path
    if len(blob) > FIELDS_CAP:
        raise ValueError("oversized request line")
    api.store(ws.fields_addr, blob)
    return nl + 2


def _parse_headers(api, ws: ParserWorkspace, cursor: int, length: int) -> int:
    """Phase two (in-domain): count headers, handle folding.

    The X-Fold handler trusts the declared length and copies backwards
    from the cursor; that is the intentional memory-safety defect.
    """
    count = 0
    prev_value = b""
    while cursor < length:
        chunk = api.load(ws.req_addr + cursor, min(4096, length - cursor))
        nl = chunk.find(b"\r\n")
        if nl < 0:
            raise ValueError("unterminated header")
        line = chunk[:nl]
        if line == b"":
            break
        name, _, value = line.partition(b":")
        value = value.strip()
        if name.lower() == b"x-fold":
            fold_back = int(value or b"0")
            # unchecked: a large fold walks below the request buffer
            api.store(ws.req_addr + cursor - fold_back,
                      prev_value or b"\x00")
        prev_value = value
        count += 1
        cursor += nl + 2
    return count


class ParserServer:
    def __init__(self, rt: Runtime, host: str = "127.0.0.1", port: int = 0):
        self.rt = rt
        self.stats = {"requests": 0, "rollbacks": 0, "conns": 0}
        self._stats_lock = threading.Lock()
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind((host, port))
        self._listen.listen(128)
        self.host, self.port = self._listen.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._occupancy = (threading.Lock()
                           if not rt.backend.supports_concurrent_nesting else None)

    def start(self):
        t = threading.Thread(target=self._accept_main, name="parser-accept",
                             daemon=True)
        self._threads.append(t)
        t.start()

    def stop(self):
        self._stop.set()
        try:
            self._listen.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=5)

    def _accept_main(self):
        self.rt.thread_init()
        ws: ParserWorkspace | None = None
        while not self._stop.is_set():
            try:
                sock, _ = self._listen.accept()
            except OSError:
                break
            with self._stats_lock:
                self.stats["conns"] += 1
            try:
                ws = self._serve_conn(sock, ws)
            except UnrecoverableFault:
                raise
            finally:
                try:
                    sock.close()
                except OSError:
                    pass

    def _serve_conn(self, sock: socket.socket,
                    ws: ParserWorkspace | None) -> ParserWorkspace | None:
        sock.settimeout(5)
        buf = b""
        while not self._stop.is_set():
            end = buf.find(b"\r\n\r\n")
            if end < 0:
                try:
                    data = sock.recv(65536)
                except (TimeoutError, OSError):
                    return ws
                if not data:
                    return ws
                buf += data
                if len(buf) > REQUEST_CAP:
                    return ws
                continue
            request, buf = buf[:end + 4], buf[end + 4:]
            ws, ok = self._handle_request(sock, request, ws)
            if not ok:
                return ws

    def _handle_request(self, sock, request: bytes,
                        ws: ParserWorkspace | None):
        api = self.rt.api
        if self._occupancy is not None:
            self._occupancy.acquire()
        try:
            with api.recover(PARSER_UDI, _EXEC_OPTS) as rp:
                if rp.ok:
                    if ws is None:
                        ws = ParserWorkspace(api)
                    api.store(ws.req_addr, request)
                    # phase one: request line
                    api.enter(PARSER_UDI)
                    try:
                        cursor = _parse_request_line(api, ws, len(request))
                    except ValueError as exc:
                        api.exit()
                        api.deinit(PARSER_UDI)
                        sock.sendall(b"HTTP/1.0 400 Bad Request\r\n\r\n"
                                     + str(exc).encode() + b"\n")
                        with self._stats_lock:
                            self.stats["requests"] += 1
                        return ws, True
                    api.exit()
                    # phase two: headers, separate transition
                    api.enter(PARSER_UDI)
                    try:
                        n_headers = _parse_headers(api, ws, cursor, len(request))
                    except ValueError as exc:
                        api.exit()
                        api.deinit(PARSER_UDI)
                        sock.sendall(b"HTTP/1.0 400 Bad Request\r\n\r\n"
                                     + str(exc).encode() + b"\n")
                        with self._stats_lock:
                            self.stats["requests"] += 1
                        return ws, True
                    api.exit()
                    # copy results back out of the domain
                    mlen, plen = struct.unpack("<HH", api.load(ws.fields_addr, 4))
                    blob = api.load(ws.fields_addr + 4, mlen + plen)
                    method, path = blob[:mlen], blob[mlen:]
                    api.deinit(PARSER_UDI)
                    body = (b"method=" + method + b" path=" + path
                            + b" headers=%d\n" % n_headers)
                    sock.sendall(b"HTTP/1.0 200 OK\r\nContent-Length: %d\r\n\r\n"
                                 % len(body) + body)
                    with self._stats_lock:
                        self.stats["requests"] += 1
                    return ws, True
            # rollback landed: drop the connection, keep serving
            with self._stats_lock:
                self.stats["rollbacks"] += 1
            return None, False
        finally:
            if self._occupancy is not None:
                self._occupancy.release()


def simple_request(host: str, port: int, path: bytes = b"/",
                   headers: list[bytes] = (), timeout: float = 5.0) -> bytes:
    """One-shot client returning the raw response (empty if dropped)."""
    req = b"GET " + path + b" HTTP/1.0\r\n"
    for h in headers:
        req += h + b"\r\n"
    req += b"\r\n"
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(req)
        out = b""
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                out += data
        except (TimeoutError, OSError):
            pass
        return out
