"""Page-granular memory regions and kernel-mediated copy engines.

Every byte the runtime hands to sandboxed code lives in an anonymous
mmap registered here. Loads and stores on behalf of domains go through
a *user plane* owned by the protection backend; this module supplies the
raw material: region bookkeeping, direct (privileged) views for runtime
internals, and two engines that route copies through the kernel so that
a page-permission violation surfaces as a catchable EFAULT instead of a
process-killing signal:

* ``ProcessVmEngine``: single-copy transfers via process_vm_readv /
  process_vm_writev on the calling process. The kernel checks VMA
  permissions, so it enforces exactly what mprotect installed. It does
  NOT consult per-thread protection keys, so it must not be used by the
  hardware-keys backend.
* ``PipeEngine``: bounces bytes off a per-thread pipe with read/write,
  whose usercopy path honors both page permissions and protection keys.

Both report the offset at which a transfer stopped, which is how fault
addresses are attributed.
"""

import ctypes
import errno
import mmap
import os
import threading
from bisect import bisect_right
from dataclasses import dataclass, field

PAGE = mmap.PAGESIZE

PROT_NONE = 0
PROT_READ = 1
PROT_WRITE = 2
PROT_RW = PROT_READ | PROT_WRITE

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mprotect.restype = ctypes.c_int
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]


def page_round_up(n: int) -> int:
    return (n + PAGE - 1) & ~(PAGE - 1)


def is_page_aligned(n: int) -> bool:
    return (n & (PAGE - 1)) == 0


@dataclass
class Region:
    """A page-aligned, runtime-owned span of address space.

    ``key`` is the protection key currently tagging the region's pages;
    ``guard_pages`` counts permanently inaccessible pages at the low end.
    """

    base: int
    length: int
    kind: str
    key: int = 0
    guard_pages: int = 0
    mm: mmap.mmap = field(default=None, repr=False)
    view: memoryview = field(default=None, repr=False)
    v64: memoryview = field(default=None, repr=False)
    # paging backend: protection currently installed per page-span; the
    # backend diffs against this to avoid redundant mprotect calls.
    current_prot: int = field(default=PROT_RW, repr=False)

    @property
    def end(self) -> int:
        return self.base + self.length

    @property
    def usable_base(self) -> int:
        return self.base + self.guard_pages * PAGE

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def offset(self, addr: int) -> int:
        return addr - self.base


class RegionRegistry:
    """Sorted, lock-protected index of live regions by base address."""

    def __init__(self):
        self._lock = threading.Lock()
        self._bases: list[int] = []
        self._regions: list[Region] = []

    def add(self, region: Region) -> None:
        with self._lock:
            i = bisect_right(self._bases, region.base)
            if i > 0 and self._regions[i - 1].end > region.base:
                raise RuntimeError("region overlap")
            if i < len(self._bases) and region.end > self._bases[i]:
                raise RuntimeError("region overlap")
            self._bases.insert(i, region.base)
            self._regions.insert(i, region)

    def remove(self, region: Region) -> None:
        with self._lock:
            i = bisect_right(self._bases, region.base) - 1
            if i < 0 or self._regions[i] is not region:
                raise RuntimeError("region not registered")
            del self._bases[i]
            del self._regions[i]

    def find(self, addr: int) -> Region | None:
        with self._lock:
            i = bisect_right(self._bases, addr) - 1
            if i < 0:
                return None
            region = self._regions[i]
        return region if region.contains(addr) else None

    def all(self) -> list[Region]:
        with self._lock:
            return list(self._regions)


class MemorySystem:
    """Reserves regions from the OS and owns the copy engines."""

    def __init__(self, force_pipe_engine: bool = False):
        self.registry = RegionRegistry()
        self._open_maps: list[mmap.mmap] = []
        if not force_pipe_engine and ProcessVmEngine.probe():
            self.engine = ProcessVmEngine()
        else:
            self.engine = PipeEngine()

    def reserve(self, length: int, kind: str, key: int = 0,
                guard_pages: int = 0) -> Region:
        """Map a fresh anonymous region and register it."""
        length = page_round_up(length)
        try:
            mm = mmap.mmap(-1, length)
        except (OSError, ValueError) as exc:
            raise MemoryError(f"cannot reserve {length} bytes: {exc}") from None
        base = ctypes.addressof(ctypes.c_char.from_buffer(mm))
        view = memoryview(mm)
        region = Region(base=base, length=length, kind=kind, key=key,
                        guard_pages=guard_pages, mm=mm, view=view,
                        v64=view.cast("Q"))
        self.registry.add(region)
        self._open_maps.append(mm)
        return region

    def mprotect(self, region: Region, offset: int, length: int, prot: int) -> None:
        rc = _libc.mprotect(ctypes.c_void_p(region.base + offset),
                            ctypes.c_size_t(length), ctypes.c_int(prot))
        if rc != 0:
            err = ctypes.get_errno()
            raise OSError(err, f"mprotect failed: {os.strerror(err)}")

    def close(self) -> None:
        """Tear everything down (test helper; a live process never unmaps)."""
        for region in self.registry.all():
            # Restore access so views and maps can be released cleanly.
            try:
                self.mprotect(region, 0, region.length, PROT_RW)
            except OSError:
                pass
            region.v64.release()
            region.view.release()
            self.registry.remove(region)
        for mm in self._open_maps:
            try:
                mm.close()
            except (BufferError, ValueError):
                pass
        self._open_maps.clear()


class TransferStopped(Exception):
    """A kernel-mediated copy hit an inaccessible page.

    ``done`` bytes at the start of the range were transferred before the
    stop; the faulting byte is at range start + done.
    """

    def __init__(self, done: int):
        super().__init__(f"transfer stopped after {done} bytes")
        self.done = done


class _Iovec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


class ProcessVmEngine:
    """Self-directed process_vm_readv/writev transfers."""

    def __init__(self):
        self._pid = os.getpid()
        self._readv = _libc.process_vm_readv
        self._writev = _libc.process_vm_writev
        for fn in (self._readv, self._writev):
            fn.restype = ctypes.c_ssize_t
            fn.argtypes = [ctypes.c_int, ctypes.POINTER(_Iovec), ctypes.c_ulong,
                           ctypes.POINTER(_Iovec), ctypes.c_ulong, ctypes.c_ulong]
        self._local = threading.local()

    @staticmethod
    def probe() -> bool:
        try:
            engine = ProcessVmEngine()
        except AttributeError:
            return False
        mm = mmap.mmap(-1, PAGE)
        try:
            base = ctypes.addressof(ctypes.c_char.from_buffer(mm))
            mm[:4] = b"ping"
            try:
                if engine.read(base, 4) != b"ping":
                    return False
            except (OSError, TransferStopped):
                return False
            rc = _libc.mprotect(ctypes.c_void_p(base), PAGE, PROT_NONE)
            if rc != 0:
                return False
            try:
                engine.read(base, 4)
            except TransferStopped:
                return True
            except OSError:
                return False
            return False
        finally:
            _libc.mprotect(ctypes.c_void_p(base), PAGE, PROT_RW)
            mm.close()

    def _scratch(self, n: int) -> ctypes.Array:
        buf = getattr(self._local, "buf", None)
        if buf is None or len(buf) < n:
            buf = ctypes.create_string_buffer(max(n, 1 << 16))
            self._local.buf = buf
        return buf

    def read(self, addr: int, n: int) -> bytes:
        if n == 0:
            return b""
        buf = self._scratch(n)
        local = _Iovec(ctypes.addressof(buf), n)
        remote = _Iovec(addr, n)
        ctypes.set_errno(0)
        r = self._readv(self._pid, ctypes.byref(local), 1,
                        ctypes.byref(remote), 1, 0)
        if r < 0:
            err = ctypes.get_errno()
            if err == errno.EFAULT:
                raise TransferStopped(0)
            raise OSError(err, os.strerror(err))
        if r < n:
            raise TransferStopped(r)
        return buf.raw[:n]

    def write(self, addr: int, data: bytes) -> None:
        n = len(data)
        if n == 0:
            return
        src = self._scratch(n)
        src[:n] = data
        local = _Iovec(ctypes.addressof(src), n)
        remote = _Iovec(addr, n)
        ctypes.set_errno(0)
        r = self._writev(self._pid, ctypes.byref(local), 1,
                         ctypes.byref(remote), 1, 0)
        if r < 0:
            err = ctypes.get_errno()
            if err == errno.EFAULT:
                raise TransferStopped(0)
            raise OSError(err, os.strerror(err))
        if r < n:
            raise TransferStopped(r)


class PipeEngine:
    """Bounce transfers off a per-thread pipe.

    read(): write() the source range into the pipe (kernel reads the
    protected pages), then drain the pipe. write(): fill the pipe with
    the payload, then readv() into the destination range (kernel writes
    the protected pages). Chunked to stay under the pipe capacity.
    """

    CHUNK = 32 * 1024

    def __init__(self):
        self._local = threading.local()

    @staticmethod
    def probe() -> bool:
        return True

    def _pipe(self):
        pair = getattr(self._local, "pipe", None)
        if pair is None:
            pair = os.pipe()
            self._local.pipe = pair
        return pair

    def read(self, addr: int, n: int) -> bytes:
        # The caller resolves addr to a region view; this engine works on
        # views to avoid duplicating that lookup.
        raise NotImplementedError("use read_view")

    def read_view(self, view: memoryview, n: int) -> bytes:
        if n == 0:
            return b""
        r_fd, w_fd = self._pipe()
        out = bytearray()
        done = 0
        while done < n:
            want = min(self.CHUNK, n - done)
            try:
                wrote = os.write(w_fd, view[done:done + want])
            except OSError as exc:
                if exc.errno == errno.EFAULT:
                    raise TransferStopped(done) from None
                raise
            out += os.read(r_fd, wrote)
            done += wrote
            if wrote < want:
                raise TransferStopped(done)
        return bytes(out)

    def write_view(self, view: memoryview, data: bytes) -> None:
        n = len(data)
        if n == 0:
            return
        r_fd, w_fd = self._pipe()
        done = 0
        while done < n:
            want = min(self.CHUNK, n - done)
            os.write(w_fd, data[done:done + want])
            try:
                got = os.readv(r_fd, [view[done:done + want]])
            except OSError as exc:
                if exc.errno == errno.EFAULT:
                    os.read(r_fd, want)  # drain what readv left behind
                    raise TransferStopped(done) from None
                raise
            if got < want:
                os.read(r_fd, want - got)
                raise TransferStopped(done + got)
            done += got
