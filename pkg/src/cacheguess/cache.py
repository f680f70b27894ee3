"""Seedable simulator of a small set-associative cache.

Addresses are small non-negative integers at cache-line granularity. The
cache keeps one record per (set, way) slot and supports LRU, tree-PLRU,
2-bit SRRIP and random replacement, PL-cache line locking, flushes, a
next-line or stream prefetcher and a periodically re-keyed address mapping.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional


class Domain(IntEnum):
    ATTACKER = 0
    VICTIM = 1


class Latency(IntEnum):
    HIT = 0
    MISS = 1
    NA = 2


class Conflict(IntEnum):
    # value doubles as the event-train bit
    V_EVICTS_A = 0
    A_EVICTS_V = 1


REP_ALGS = ("lru", "plru", "rrip", "random")
PREFETCHERS = ("none", "nextline", "stream")
VALID_WAYS = (1, 2, 4, 8, 12, 16)

RRPV_INSERT = 2
RRPV_MAX = 3


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    num_ways: int = 4
    num_sets: int = 1
    rep_alg: str = "lru"
    prefetcher: str = "none"
    pl_cache: bool = False
    remap_interval: Optional[int] = None
    rng_seed: int = 0
    num_addresses: int = 16  # address universe is range(num_addresses)

    def __post_init__(self):
        if self.num_ways not in VALID_WAYS:
            raise CacheError(f"num_ways must be one of {VALID_WAYS}, got {self.num_ways}")
        n = self.num_sets
        if n < 1 or n & (n - 1):
            raise CacheError(f"num_sets must be a power of two, got {n}")
        if self.rep_alg not in REP_ALGS:
            raise CacheError(f"unknown rep_alg {self.rep_alg!r}")
        if self.prefetcher not in PREFETCHERS:
            raise CacheError(f"unknown prefetcher {self.prefetcher!r}")
        if self.rep_alg == "plru" and self.num_ways & (self.num_ways - 1):
            raise CacheError("plru needs a power-of-two number of ways")
        if self.remap_interval is not None and self.remap_interval < 1:
            raise CacheError("remap_interval must be positive")
        if self.num_addresses < 1:
            raise CacheError("empty address universe")

    @property
    def num_blocks(self):
        return self.num_ways * self.num_sets


class CacheLine(NamedTuple):
    valid: bool
    tag: int
    domain: Domain
    locked: bool
    age: int
    rrpv: int


class AccessResult(NamedTuple):
    latency: Latency
    evicted_tag: Optional[int] = None
    conflict_event: Optional[Conflict] = None
    caused_by_prefetch: bool = False
    addr: int = -1
    domain: Domain = Domain.ATTACKER
    line: int = -1          # slot id (set * ways + way) that was hit or filled, -1 if none
    filled: bool = False
    evicted_domain: Optional[Domain] = None
    prefetches: tuple = ()  # AccessResults of prefetch fills triggered by this access
    remapped: bool = False  # a remap happened right after this access


class Cache:
    """Mutable cache state.

    Per-slot state lives in flat lists indexed by ``set * ways + way``.
    """

    def __init__(self, config: CacheConfig):
        self.config = config
        self.ways = config.num_ways
        self.sets = config.num_sets
        self.rep = config.rep_alg
        self.rng = random.Random(config.rng_seed)
        # separate stream for mapping so that replacement draws don't shift it
        self.map_rng = random.Random(config.rng_seed * 7919 + 17)
        n = config.num_addresses
        if config.remap_interval is not None:
            self.mapping = self._fresh_mapping()
        else:
            self.mapping = list(range(n))
        self.demand_accesses = 0
        self.fill_log = None  # set to a list to record (access_no, line, domain)
        self.reset()

    # -- state management -------------------------------------------------
    def reset(self):
        """Invalidate every line and clear metadata. Mapping, RNG state and the
        remap counter persist (they belong to the hardware, not the episode)."""
        nslots = self.ways * self.sets
        self.tag = [-1] * nslots
        self.dom = [0] * nslots
        self.locked = [False] * nslots
        self.age = [0] * nslots
        self.rrpv = [RRPV_MAX] * nslots
        self.plru = [[0] * max(self.ways - 1, 0) for _ in range(self.sets)]
        self.where = {}  # addr -> slot
        self.stream_last = None
        self.stream_stride = None

    def clone(self) -> "Cache":
        c = Cache.__new__(Cache)
        c.config = self.config
        c.ways, c.sets, c.rep = self.ways, self.sets, self.rep
        c.rng = random.Random()
        c.rng.setstate(self.rng.getstate())
        c.map_rng = random.Random()
        c.map_rng.setstate(self.map_rng.getstate())
        c.mapping = self.mapping  # replaced, never mutated in place
        c.demand_accesses = self.demand_accesses
        c.fill_log = None if self.fill_log is None else list(self.fill_log)
        c.tag = self.tag[:]
        c.dom = self.dom[:]
        c.locked = self.locked[:]
        c.age = self.age[:]
        c.rrpv = self.rrpv[:]
        c.plru = [b[:] for b in self.plru]
        c.where = dict(self.where)
        c.stream_last = self.stream_last
        c.stream_stride = self.stream_stride
        return c

    def state_key(self) -> tuple:
        """Hashable snapshot of the replacement-relevant state (not the RNG)."""
        return (tuple(self.tag), tuple(self.locked), tuple(self.age), tuple(self.rrpv),
                tuple(tuple(b) for b in self.plru), tuple(self.mapping), self.demand_accesses,
                self.stream_last, self.stream_stride)

    def set_of(self, addr: int) -> int:
        return self.mapping[addr] % self.sets

    def contains(self, addr: int) -> bool:
        return addr in self.where

    def lines(self, s: int):
        """Snapshot of the lines of set ``s`` as CacheLine tuples."""
        out = []
        for w in range(self.ways):
            i = s * self.ways + w
            valid = self.tag[i] >= 0
            out.append(CacheLine(valid, self.tag[i], Domain(self.dom[i]),
                                 self.locked[i], self.age[i], self.rrpv[i]))
        return out

    def _check(self, addr):
        if not (0 <= addr < self.config.num_addresses):
            raise CacheError(f"address {addr} outside universe 0..{self.config.num_addresses - 1}")

    # -- replacement metadata ---------------------------------------------
    def _touch(self, s, w):
        i = s * self.ways + w
        rep = self.rep
        if rep == "lru":
            base = s * self.ways
            old = self.age[i]
            tag, age = self.tag, self.age
            for j in range(base, base + self.ways):
                if tag[j] >= 0 and age[j] < old:
                    age[j] += 1
            age[i] = 0
        elif rep == "plru":
            bits = self.plru[s]
            node = w + self.ways - 1
            while node > 0:
                parent = (node - 1) >> 1
                # point away from the touched child: 1 means "LRU side is right"
                bits[parent] = 1 if node == 2 * parent + 1 else 0
                node = parent
        elif rep == "rrip":
            self.rrpv[i] = 0

    def _on_fill(self, s, w):
        i = s * self.ways + w
        rep = self.rep
        if rep == "lru":
            base = s * self.ways
            tag, age = self.tag, self.age
            for j in range(base, base + self.ways):
                if j != i and tag[j] >= 0:
                    age[j] += 1
            age[i] = 0
        elif rep == "plru":
            self._touch(s, w)
        elif rep == "rrip":
            self.rrpv[i] = RRPV_INSERT

    def select_victim(self, s: int) -> Optional[int]:
        """Way to evict from a full set, or None when no candidate is evictable."""
        base = s * self.ways
        locked = self.locked
        rep = self.rep
        if rep == "lru":
            best, best_age = None, -1
            for w in range(self.ways):
                if not locked[base + w] and self.age[base + w] > best_age:
                    best, best_age = w, self.age[base + w]
            return best
        if rep == "plru":
            bits = self.plru[s]
            node = 0
            while node < self.ways - 1:
                node = 2 * node + 1 + bits[node]
            w = node - (self.ways - 1)
            return None if locked[base + w] else w
        if rep == "rrip":
            cand = [w for w in range(self.ways) if not locked[base + w]]
            if not cand:
                return None
            rr = self.rrpv
            for _ in range(RRPV_MAX + 1):
                for w in cand:
                    if rr[base + w] >= RRPV_MAX:
                        return w
                for w in cand:
                    rr[base + w] += 1
            raise AssertionError("rrip victim search did not terminate")
        cand = [w for w in range(self.ways) if not locked[base + w]]
        if not cand:
            return None
        return cand[self.rng.randrange(len(cand))]

    # -- core operations --------------------------------------------------
    def _lookup_fill(self, addr, domain, prefetch=False):
        s = self.mapping[addr] % self.sets
        base = s * self.ways
        slot = self.where.get(addr)
        if slot is not None:
            self._touch(s, slot - base)
            return AccessResult(Latency.HIT, None, None, prefetch, addr, domain, slot, False)
        way = None
        tag = self.tag
        for w in range(self.ways):
            if tag[base + w] < 0:
                way = w
                break
        evicted = evicted_dom = conflict = None
        if way is None:
            way = self.select_victim(s)
            if way is None:
                # PL cache: the request is served uncached
                return AccessResult(Latency.MISS, None, None, prefetch, addr, domain, -1, False)
            i = base + way
            evicted = tag[i]
            evicted_dom = Domain(self.dom[i])
            del self.where[evicted]
            if evicted_dom != domain:
                conflict = Conflict.A_EVICTS_V if domain == Domain.ATTACKER else Conflict.V_EVICTS_A
        i = base + way
        tag[i] = addr
        self.dom[i] = int(domain)
        self.locked[i] = False
        self.where[addr] = i
        self._on_fill(s, way)
        if self.fill_log is not None:
            self.fill_log.append((self.demand_accesses, i, int(domain)))
        return AccessResult(Latency.MISS, evicted, conflict, prefetch, addr, domain, i, True, evicted_dom)

    def access(self, addr: int, domain: Domain = Domain.ATTACKER) -> AccessResult:
        self._check(addr)
        res = self._lookup_fill(addr, domain)
        pf = self._prefetch(addr, domain)
        self.demand_accesses += 1
        remapped = False
        ri = self.config.remap_interval
        if ri is not None and self.demand_accesses % ri == 0:
            self.remap()
            remapped = True
        if pf or remapped:
            res = res._replace(prefetches=pf, remapped=remapped)
        return res

    def _prefetch(self, addr, domain):
        kind = self.config.prefetcher
        if kind == "none":
            return ()
        target = None
        if kind == "nextline":
            target = addr + 1
        else:
            if self.stream_last is not None:
                stride = addr - self.stream_last
                if stride in (1, -1) and stride == self.stream_stride:
                    target = addr + stride
                self.stream_stride = stride
            self.stream_last = addr
        if target is None or not (0 <= target < self.config.num_addresses):
            return ()
        if target in self.where:
            return ()
        return (self._lookup_fill(target, domain, prefetch=True),)

    def flush(self, addr: int) -> bool:
        """Invalidate ``addr`` if cached. Returns whether a line was removed."""
        self._check(addr)
        slot = self.where.pop(addr, None)
        if slot is None:
            return False
        self.tag[slot] = -1
        self.locked[slot] = False
        self.age[slot] = 0
        self.rrpv[slot] = RRPV_MAX
        return True

    def pl_lock(self, addr: int, domain: Domain = Domain.VICTIM):
        if not self.config.pl_cache:
            raise CacheError("pl_lock requires pl_cache")
        slot = self.where.get(addr)
        if slot is None:
            raise CacheError(f"cannot lock absent line {addr}")
        self.locked[slot] = True
        self.dom[slot] = int(domain)

    def pl_unlock(self, addr: int):
        slot = self.where.get(addr)
        if slot is None:
            raise CacheError(f"cannot unlock absent line {addr}")
        self.locked[slot] = False

    def is_locked(self, addr: int) -> bool:
        slot = self.where.get(addr)
        return slot is not None and self.locked[slot]

    def _fresh_mapping(self):
        perm = list(range(self.config.num_addresses))
        self.map_rng.shuffle(perm)
        return perm

    def remap(self):
        self.mapping = self._fresh_mapping()
        n = self.ways * self.sets
        self.tag = [-1] * n
        self.locked = [False] * n
        self.age = [0] * n
        self.rrpv = [RRPV_MAX] * n
        self.plru = [[0] * max(self.ways - 1, 0) for _ in range(self.sets)]
        self.where = {}


# -- trace line format ---------------------------------------------------------
# A <addr> <hit|miss> | F <addr> | V <hit|miss|na> | P <addr> | R
_LAT_WORD = {Latency.HIT: "hit", Latency.MISS: "miss", Latency.NA: "na"}
_WORD_LAT = {v: k for k, v in _LAT_WORD.items()}


class TraceEvent(NamedTuple):
    kind: str               # 'A', 'F', 'V', 'P', 'R'
    addr: Optional[int] = None
    latency: Optional[Latency] = None


def render_event(ev: TraceEvent) -> str:
    k = ev.kind
    if k == "A":
        return f"A {ev.addr} {_LAT_WORD[ev.latency]}"
    if k in ("F", "P"):
        return f"{k} {ev.addr}"
    if k == "V":
        return f"V {_LAT_WORD[ev.latency]}"
    if k == "R":
        return "R"
    raise CacheError(f"unknown trace event kind {k!r}")


def parse_event(line: str, lineno: int = 0) -> TraceEvent:
    parts = line.split()
    try:
        k = parts[0]
        if k == "A" and len(parts) == 3 and parts[2] in ("hit", "miss"):
            return TraceEvent("A", int(parts[1]), _WORD_LAT[parts[2]])
        if k in ("F", "P") and len(parts) == 2:
            return TraceEvent(k, int(parts[1]))
        if k == "V" and len(parts) == 2 and parts[1] in _WORD_LAT:
            return TraceEvent("V", None, _WORD_LAT[parts[1]])
        if k == "R" and len(parts) == 1:
            return TraceEvent("R")
    except (IndexError, ValueError):
        pass
    raise CacheError(f"line {lineno}: bad trace line {line!r}")


def events_from_result(res: AccessResult, victim: bool = False):
    """Trace events produced by one demand access (plus its prefetches)."""
    if victim:
        out = [TraceEvent("V", None, res.latency)]
    else:
        out = [TraceEvent("A", res.addr, res.latency)]
    for p in res.prefetches:
        out.append(TraceEvent("P", p.addr))
    if res.remapped:
        out.append(TraceEvent("R"))
    return out
