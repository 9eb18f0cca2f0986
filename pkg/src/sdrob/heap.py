"""Two-level segregated-fit allocator with per-domain controls.

Each domain owns an independent control structure and one or more pools
(page-aligned regions tagged with the domain's key). Block headers live
physically in pool memory so a destroyed domain's pools can be walked
and absorbed into a parent control structure in place: live allocations
keep their addresses and become freeable through the parent.

Layout (little-endian, per 16-byte header):

    offset 0   u64  address of physically previous block header (0 at pool start)
    offset 8   u64  payload size | flags (bit 0: free, bit 1: previous block free)

Free blocks keep list links in the first 16 payload bytes. Payload sizes
are multiples of 16 and at least 16, so per-block overhead is 16 bytes.
A used zero-size sentinel header terminates each pool walk.

Class mapping: first level is floor(log2(size)); the second level splits
each power of two into 32 ranges via (size >> (fl - 5)) - 32. Sizes in
[16, 32) share one class, which only ever holds 16-byte blocks because
sizes are 16-aligned.
"""

from bisect import bisect_right, insort
from . import mem
from .errors import Err, HeapError

ALIGN = 16
MIN_BLOCK = 16
HEADER = 16
SL_LOG2 = 5
SL_COUNT = 1 << SL_LOG2
FL_MIN = 4                      # log2(MIN_BLOCK)
FL_MAX = 31
FL_ROWS = FL_MAX - FL_MIN + 1
SMALL_THRESHOLD = 1 << SL_LOG2  # below this, one linear class
MAX_BLOCK = (1 << 32) - ALIGN
MAX_POOL_BYTES = (1 << 32) - mem.PAGE  # pool payload capacity < 4 GiB

FREE_BIT = 1
PREV_FREE_BIT = 2
SIZE_MASK = ~0xF

# fixed probe budget per operation: bitmap words examined plus list links
# touched; measured once against the randomized suite and pinned
PROBE_BOUND = 16


def _round_up(n: int, a: int) -> int:
    return (n + a - 1) & ~(a - 1)


def _ffs(word: int) -> int:
    return (word & -word).bit_length() - 1


def mapping_insert(size: int) -> tuple[int, int]:
    """Class whose range contains ``size``; ranges partition the size space."""
    if size < MIN_BLOCK or size > MAX_BLOCK:
        raise HeapError(Err.SIZE_OUT_OF_RANGE, f"size {size}")
    if size < SMALL_THRESHOLD:
        return (FL_MIN, 0)
    fl = size.bit_length() - 1
    sl = (size >> (fl - SL_LOG2)) - SL_COUNT
    return (fl, sl)


def mapping_search(size: int) -> tuple[int, int]:
    """Class to start an allocation scan from: every block in it fits ``size``."""
    if size < MIN_BLOCK or size > MAX_BLOCK:
        raise HeapError(Err.SIZE_OUT_OF_RANGE, f"size {size}")
    if size <= MIN_BLOCK:
        return (FL_MIN, 0)
    if size < SMALL_THRESHOLD:
        # Only 16-byte blocks live in the small class; anything larger
        # must scan from the next class up.
        size = SMALL_THRESHOLD
    fl = size.bit_length() - 1
    rounded = size + (1 << (fl - SL_LOG2)) - 1
    return mapping_insert(min(rounded, MAX_BLOCK))


class Pool:
    """One contiguous region managed by a control structure."""

    __slots__ = ("region", "owner", "base", "capacity", "sentinel", "v64")

    def __init__(self, region: mem.Region, owner: "Tlsf" = None):
        self.region = region
        self.owner = owner
        self.base = region.base
        self.capacity = (region.length - 2 * HEADER) & SIZE_MASK
        self.sentinel = self.base + HEADER + self.capacity
        self.v64 = region.v64

    def __repr__(self):
        return f"Pool(base={self.base:#x}, capacity={self.capacity})"


class Tlsf:
    """One domain's allocator state."""

    def __init__(self, grow_fn=None, default_pool_size: int = 0,
                 growth_enabled: bool = True):
        self.fl_bitmap = 0
        self.sl_bitmaps = [0] * FL_ROWS
        self.heads = [[0] * SL_COUNT for _ in range(FL_ROWS)]
        self.pools: list[Pool] = []      # sorted by base address
        self._bases: list[int] = []
        self.grow_fn = grow_fn
        self.default_pool_size = default_pool_size
        self.growth_enabled = growth_enabled
        self.last_probes = 0
        self.max_probes = 0
        self._pool_cache: Pool | None = None

    # -- header access -------------------------------------------------------

    def _pool_of(self, addr: int) -> Pool | None:
        cached = self._pool_cache
        if cached is not None and cached.base <= addr < cached.sentinel + HEADER:
            return cached
        i = bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        pool = self.pools[i]
        if pool.base <= addr < pool.sentinel + HEADER:
            self._pool_cache = pool
            return pool
        return None

    def _adopt_pool(self, pool: Pool) -> None:
        i = bisect_right(self._bases, pool.base)
        self._bases.insert(i, pool.base)
        self.pools.insert(i, pool)

    @staticmethod
    def _words(pool: Pool, addr: int):
        return pool.v64, (addr - pool.base) >> 3

    def _read(self, pool: Pool, addr: int) -> tuple[int, int]:
        v, i = self._words(pool, addr)
        return v[i], v[i + 1]

    def _write(self, pool: Pool, addr: int, prev_phys: int, size_flags: int) -> None:
        v, i = self._words(pool, addr)
        v[i] = prev_phys
        v[i + 1] = size_flags

    # -- free lists ------------------------------------------------------------

    def _insert_free(self, pool: Pool, block: int, size: int, prev_phys: int,
                     prev_free: bool) -> None:
        if size < SMALL_THRESHOLD:
            row, sl = 0, 0
        else:
            fl = size.bit_length() - 1
            row = fl - FL_MIN
            sl = (size >> (fl - SL_LOG2)) - SL_COUNT
        heads_row = self.heads[row]
        head = heads_row[sl]
        self.last_probes += 2
        v = pool.v64
        i = (block - pool.base) >> 3
        v[i] = prev_phys
        v[i + 1] = size | FREE_BIT | (PREV_FREE_BIT if prev_free else 0)
        v[i + 2] = head  # next_free
        v[i + 3] = 0     # prev_free link (head)
        if head:
            hp = self._pool_of(head)
            hp.v64[((head - hp.base) >> 3) + 3] = block
        heads_row[sl] = block
        self.sl_bitmaps[row] |= 1 << sl
        self.fl_bitmap |= 1 << row
        # physical successor learns its predecessor is free
        ni = i + ((HEADER + size) >> 3)
        v[ni] = block
        v[ni + 1] |= PREV_FREE_BIT

    def _remove_free(self, pool: Pool, block: int, size: int) -> None:
        v = pool.v64
        i = (block - pool.base) >> 3
        nxt_link, prv_link = v[i + 2], v[i + 3]
        self.last_probes += 2
        if prv_link:
            pp = self._pool_of(prv_link)
            pp.v64[((prv_link - pp.base) >> 3) + 2] = nxt_link
        else:
            if size < SMALL_THRESHOLD:
                row, sl = 0, 0
            else:
                fl = size.bit_length() - 1
                row = fl - FL_MIN
                sl = (size >> (fl - SL_LOG2)) - SL_COUNT
            self.heads[row][sl] = nxt_link
            if not nxt_link:
                self.sl_bitmaps[row] &= ~(1 << sl)
                if not self.sl_bitmaps[row]:
                    self.fl_bitmap &= ~(1 << row)
        if nxt_link:
            np_ = self._pool_of(nxt_link)
            np_.v64[((nxt_link - np_.base) >> 3) + 3] = prv_link

    def _search_block(self, size: int) -> int:
        fl, sl = mapping_search(size)
        row = fl - FL_MIN
        self.last_probes += 1
        sl_map = self.sl_bitmaps[row] & ~((1 << sl) - 1)
        if not sl_map:
            self.last_probes += 1
            fl_map = self.fl_bitmap & ~((1 << (row + 1)) - 1)
            if not fl_map:
                return 0
            row = _ffs(fl_map)
            sl_map = self.sl_bitmaps[row]
        sl = _ffs(sl_map)
        self.last_probes += 1
        return self.heads[row][sl]

    # -- pools --------------------------------------------------------------------

    def add_pool(self, region: mem.Region) -> Pool:
        if region.length > MAX_POOL_BYTES:
            raise HeapError(Err.SIZE_OUT_OF_RANGE, "pool exceeds 4 GiB cap")
        pool = Pool(region=region, owner=self)
        capacity = pool.capacity
        if capacity < MIN_BLOCK:
            raise HeapError(Err.SIZE_OUT_OF_RANGE, "pool too small")
        # sentinel: used, zero payload, terminates physical walks
        self._write(pool, pool.sentinel, 0, 0)
        self._adopt_pool(pool)
        self._insert_free(pool, pool.base, capacity, 0, False)
        return pool

    def grow(self, min_extra: int) -> list[Pool]:
        """Reserve additional pools totalling at least ``min_extra`` payload."""
        if self.grow_fn is None or not self.growth_enabled:
            raise HeapError(Err.OUT_OF_MEMORY, "growth disabled")
        want = max(min_extra + 2 * HEADER, self.default_pool_size)
        added = []
        while want > 0:
            chunk = min(want, MAX_POOL_BYTES)
            try:
                region = self.grow_fn(chunk)
            except MemoryError:
                raise HeapError(Err.OS_OUT_OF_MEMORY, "pool reservation failed") from None
            added.append(self.add_pool(region))
            want -= chunk
        return added

    # -- allocation -------------------------------------------------------------------

    def allocate(self, size: int, align: int = ALIGN) -> int:
        """Return a payload address of at least ``size`` bytes, ``align``-aligned."""
        if size <= 0 or size > MAX_BLOCK:
            raise HeapError(Err.SIZE_OUT_OF_RANGE, f"size {size}")
        if align < ALIGN or align & (align - 1):
            raise HeapError(Err.SIZE_OUT_OF_RANGE, f"bad alignment {align}")
        self.last_probes = 0
        adjusted = _round_up(max(size, MIN_BLOCK), ALIGN)
        need = adjusted if align == ALIGN else adjusted + align + HEADER + MIN_BLOCK
        block = self._search_block(need)
        if not block:
            if self.grow_fn is not None and self.growth_enabled:
                self.grow(need)
                block = self._search_block(need)
            if not block:
                raise HeapError(Err.OUT_OF_MEMORY, f"no block for {size}")
        pool = self._pool_of(block)
        prev_phys, size_flags = self._read(pool, block)
        bsize = size_flags & SIZE_MASK
        if bsize < adjusted:
            # only possible in the topmost class
            raise HeapError(Err.OUT_OF_MEMORY, f"no block for {size}")
        self._remove_free(pool, block, bsize)
        prev_free = bool(size_flags & PREV_FREE_BIT)
        if align != ALIGN:
            block, bsize, prev_phys, prev_free = self._carve_aligned(
                pool, block, bsize, prev_phys, prev_free, align)
        bsize = self._trim_back(pool, block, bsize, adjusted)
        self._write(pool, block, prev_phys,
                    bsize | (PREV_FREE_BIT if prev_free else 0))
        nxt = block + HEADER + bsize
        nv, ni = self._words(pool, nxt)
        nv[ni] = block
        nv[ni + 1] &= ~PREV_FREE_BIT
        self.max_probes = max(self.max_probes, self.last_probes)
        return block + HEADER

    def _carve_aligned(self, pool, block, bsize, prev_phys, prev_free, align):
        payload = block + HEADER
        aligned = _round_up(payload, align)
        gap = aligned - payload
        while 0 < gap < HEADER + MIN_BLOCK:
            aligned += align
            gap += align
        if gap == 0:
            return block, bsize, prev_phys, prev_free
        front_size = gap - HEADER
        self._insert_free(pool, block, front_size, prev_phys, prev_free)
        new_block = aligned - HEADER
        return new_block, bsize - gap, block, True

    def _trim_back(self, pool, block, bsize, adjusted):
        if bsize - adjusted >= HEADER + MIN_BLOCK:
            rem = block + HEADER + adjusted
            rem_size = bsize - adjusted - HEADER
            self._insert_free(pool, rem, rem_size, block, False)
            return adjusted
        return bsize

    def free(self, payload: int) -> None:
        self.last_probes = 0
        block = payload - HEADER
        pool = self._pool_of(block)
        if pool is None or block < pool.base or block >= pool.sentinel:
            raise HeapError(Err.FOREIGN_ADDRESS, hex(payload))
        v = pool.v64
        i = (block - pool.base) >> 3
        prev_phys = v[i]
        size_flags = v[i + 1]
        if size_flags & FREE_BIT:
            raise HeapError(Err.DOUBLE_FREE, hex(payload))
        size = size_flags & SIZE_MASK
        if size < MIN_BLOCK or block + HEADER + size > pool.sentinel:
            raise HeapError(Err.FOREIGN_ADDRESS, hex(payload))
        prev_free = size_flags & PREV_FREE_BIT
        # coalesce with physical successor
        ni = i + ((HEADER + size) >> 3)
        nxt_flags = v[ni + 1]
        if nxt_flags & FREE_BIT:
            nxt_size = nxt_flags & SIZE_MASK
            self._remove_free(pool, block + HEADER + size, nxt_size)
            size += HEADER + nxt_size
        # coalesce with physical predecessor
        if prev_free:
            pi = (prev_phys - pool.base) >> 3
            p_flags = v[pi + 1]
            p_size = p_flags & SIZE_MASK
            self._remove_free(pool, prev_phys, p_size)
            size += HEADER + p_size
            block = prev_phys
            prev_phys = v[pi]
            prev_free = p_flags & PREV_FREE_BIT
        self._insert_free(pool, block, size, prev_phys, bool(prev_free))
        if self.last_probes > self.max_probes:
            self.max_probes = self.last_probes

    # -- merging and teardown ---------------------------------------------------------

    def merge_from(self, child: "Tlsf") -> None:
        """Absorb every pool of ``child``; the child control is emptied.

        Caller must have retagged the child's pools already. Used blocks
        keep their addresses; free blocks are linked into this control's
        lists and the bitmaps updated.
        """
        if child is self:
            raise HeapError(Err.FOREIGN_ADDRESS, "cannot merge a control into itself")
        for pool in child.pools:
            pool.owner = self
            self._adopt_pool(pool)
            v = pool.v64
            base = pool.base
            block = base
            sentinel = pool.sentinel
            while block < sentinel:
                i = (block - base) >> 3
                size_flags = v[i + 1]
                size = size_flags & SIZE_MASK
                if size_flags & FREE_BIT:
                    self._insert_free(pool, block, size, v[i],
                                      bool(size_flags & PREV_FREE_BIT))
                block += HEADER + size
        child.fl_bitmap = 0
        child.sl_bitmaps = [0] * FL_ROWS
        child.heads = [[0] * SL_COUNT for _ in range(FL_ROWS)]
        child.pools = []
        child._bases = []
        child._pool_cache = None

    def discard(self) -> list[mem.Region]:
        """Detach all pools for recycling; the control becomes empty."""
        regions = [pool.region for pool in self.pools]
        self.fl_bitmap = 0
        self.sl_bitmaps = [0] * FL_ROWS
        self.heads = [[0] * SL_COUNT for _ in range(FL_ROWS)]
        self.pools = []
        self._bases = []
        self._pool_cache = None
        return regions

    # -- introspection ------------------------------------------------------------------

    def blocks(self):
        """Physical walk over all pools: yields (payload, size, is_free)."""
        for pool in self.pools:
            block = pool.base
            while block < pool.sentinel:
                _, size_flags = self._read(pool, block)
                size = size_flags & SIZE_MASK
                yield block + HEADER, size, bool(size_flags & FREE_BIT)
                block += HEADER + size

    def live_bytes(self) -> int:
        return sum(size for _, size, is_free in self.blocks() if not is_free)

    def verify(self) -> None:
        """Debug walk: physical chain, coalescing, list and bitmap consistency."""
        listed = set()
        for row in range(FL_ROWS):
            row_bits = 0
            for sl in range(SL_COUNT):
                head = self.heads[row][sl]
                assert bool(self.sl_bitmaps[row] & (1 << sl)) == bool(head), \
                    f"sl bitmap mismatch at ({row + FL_MIN},{sl})"
                prev = 0
                node = head
                while node:
                    pool = self._pool_of(node)
                    assert pool is not None, f"listed block {node:x} in no pool"
                    _, flags = self._read(pool, node)
                    assert flags & FREE_BIT, f"listed block {node:x} not free"
                    size = flags & SIZE_MASK
                    assert mapping_insert(size) == (row + FL_MIN, sl), \
                        f"block {node:x} size {size} in wrong class"
                    v, i = self._words(pool, node)
                    assert v[i + 3] == prev, f"prev link broken at {node:x}"
                    listed.add(node)
                    prev = node
                    node = v[i + 2]
                if head:
                    row_bits |= 1 << sl
            assert bool(self.fl_bitmap & (1 << row)) == bool(row_bits), \
                f"fl bitmap mismatch at row {row + FL_MIN}"
        for pool in self.pools:
            block = pool.base
            prev = 0
            prev_was_free = False
            total = 0
            while block < pool.sentinel:
                prev_phys, flags = self._read(pool, block)
                size = flags & SIZE_MASK
                assert size >= MIN_BLOCK, f"runt block at {block:x}"
                assert prev_phys == prev, f"physical chain broken at {block:x}"
                assert bool(flags & PREV_FREE_BIT) == prev_was_free, \
                    f"prev-free flag wrong at {block:x}"
                is_free = bool(flags & FREE_BIT)
                assert not (is_free and prev_was_free), \
                    f"adjacent free blocks at {block:x}"
                if is_free:
                    assert block in listed, f"free block {block:x} not listed"
                    listed.discard(block)
                total += HEADER + size
                prev = block
                prev_was_free = is_free
                block += HEADER + size
            assert block == pool.sentinel, f"walk overran pool at {block:x}"
            s_prev, s_flags = self._read(pool, pool.sentinel)
            assert s_flags & SIZE_MASK == 0 and not (s_flags & FREE_BIT), "sentinel damaged"
            assert s_prev == prev and bool(s_flags & PREV_FREE_BIT) == prev_was_free, \
                "sentinel back-link damaged"
            assert total == pool.capacity + HEADER, "capacity mismatch"
        assert not listed, f"stale free-list entries: {[hex(b) for b in listed]}"
