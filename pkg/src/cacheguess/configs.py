"""Named experiment configurations and the reference attack sequences that
go with them.

Sequences are written with the action labels used by the env: ``4`` accesses
address 4, ``f0`` flushes 0, ``v`` triggers the victim, ``g2``/``gE`` guess.
A flat sequence without a guess gets its final guess chosen from the
observations (see ``analysis.tree_from_sequence``).
"""
from __future__ import annotations

from .cache import CacheConfig
from .env import NOACCESS, EnvConfig, RewardConfig


def _cfg(ways, sets, att, vic, flush=False, noacc=False, rep="lru", prefetcher="none",
         warmup=(), window=None, **kw):
    blocks = ways * sets
    return EnvConfig(
        attacker_addr_s=att[0], attacker_addr_e=att[1],
        victim_addr_s=vic[0], victim_addr_e=vic[1],
        flush_enable=flush, victim_no_access_enable=noacc,
        window_size=window or 4 * blocks,
        cache=CacheConfig(num_ways=ways, num_sets=sets, rep_alg=rep, prefetcher=prefetcher),
        warmup=tuple(warmup), **kw)


def golden_config(n: int) -> EnvConfig:
    """Configurations 1-14 of the reference attack table (LRU unless noted)."""
    table = {
        1: lambda: _cfg(1, 4, (4, 7), (0, 3)),
        2: lambda: _cfg(1, 4, (4, 7), (0, 3), prefetcher="nextline"),
        3: lambda: _cfg(1, 4, (0, 3), (0, 3), flush=True),
        4: lambda: _cfg(1, 4, (0, 7), (0, 3)),
        5: lambda: _cfg(4, 1, (4, 7), (0, 0), noacc=True),
        # the victim's line is resident at the start, as in a shared-library setting
        6: lambda: _cfg(4, 1, (0, 3), (0, 0), flush=True, noacc=True, warmup=(0,)),
        7: lambda: _cfg(4, 1, (0, 7), (0, 0), noacc=True),
        8: lambda: _cfg(4, 1, (0, 3), (0, 3), flush=True),
        9: lambda: _cfg(4, 1, (0, 7), (0, 3), flush=True),
        10: lambda: _cfg(1, 8, (0, 7), (0, 7), flush=True),
        11: lambda: _cfg(8, 1, (0, 7), (0, 0), flush=True, noacc=True, warmup=(0,)),
        12: lambda: _cfg(8, 1, (0, 15), (0, 0), noacc=True),
        13: lambda: _cfg(8, 1, (0, 15), (0, 0), noacc=True, prefetcher="nextline"),
        14: lambda: _cfg(8, 1, (0, 15), (0, 0), noacc=True, prefetcher="stream"),
    }
    if n not in table:
        raise KeyError(f"no golden config {n}")
    return table[n]()


GOLDEN_SEQUENCES = {
    1: "5 4 7 v 5 7 4",
    2: "6 4 v 4 5",
    3: "f1 v 1 f0 v f2 v 2 f3 0",
    4: "3 7 4 6 v 3 0 6 4",
    5: "4 6 7 v 5 4",
    6: "0 3 1 2 f0 2 v 3 0",
    7: "v 4 1 6 7 v 1 v 5 6",
    8: "f3 f2 v 2 3 f0 v 0",
    9: "f0 f2 f1 v 2 1 0",
    10: "f2 v 2 f4 f0 v 0 4 f3 f7 v 3 v 7 f1 f6 v 6 1",
    11: "f0 v 0",
    12: "7 11 10 5 4 2 3 1 v 0",
    13: "4 9 15 2 v 0",
    14: "15 9 8 7 11 6 12 14 v 0",
}

# category column of the reference table
GOLDEN_CATEGORIES = {
    1: {"PRIME_PROBE"}, 2: {"PRIME_PROBE"}, 3: {"FLUSH_RELOAD"}, 4: {"MIXED"},
    5: {"LRU_STATE"}, 6: {"FLUSH_RELOAD"}, 7: {"LRU_STATE"}, 8: {"FLUSH_RELOAD"},
    9: {"FLUSH_RELOAD"}, 10: {"FLUSH_RELOAD"}, 11: {"FLUSH_RELOAD"},
    12: {"EVICT_RELOAD"}, 13: {"EVICT_RELOAD"}, 14: {"EVICT_RELOAD"},
}

# Config 2's printed sequence probes only sets 0 and 1, and the next-line
# prefetch of 5 during the probe refills set 1, so secrets 2 and 3 (and 1)
# produce identical observations under any next-line model we tried.
INCOMPATIBLE_GOLDEN = {2}


def case_study_config(rep_alg: str = "lru", **kw) -> EnvConfig:
    """4-way single-set cache warmed by victim accesses to 0 and 1; attacker
    0-4, victim 0 or no access."""
    window = kw.pop("window", 16)
    return _cfg(4, 1, (0, 4), (0, 0), noacc=True, rep=rep_alg, warmup=(0, 1), window=window, **kw)


CASE_STUDY_SEQUENCES = {
    "lru": "v 4 3 2 0",
    "plru": "1 v 1 4 v 3 2 1",
    # two secret-dependent continuations
    "rrip": {0: "3 2 3 1 v 4 2 g0", NOACCESS: "3 2 3 1 v 4 2 0 gE"},
}


def pl_config(**kw) -> EnvConfig:
    """PL cache: 4-way PLRU, victim line 0 installed and locked."""
    c = _cfg(4, 1, (1, 5), (0, 0), noacc=True, rep="plru", warmup=(0,), window=kw.pop("window", 16), **kw)
    return c.replace(pl_cache=True, lock=(0,))


PL_SEQUENCE = "1 v 3 3 2 5 5"


def toy_config(**kw) -> EnvConfig:
    """One-block cache, lines 0 and 1, block initially holding 0."""
    return _cfg(1, 1, (0, 1), (0, 1), warmup=(0,), window=kw.pop("window", 4), **kw)


TOY_SEQUENCE = "v 1"


def detection_config(budget: int = 160, **kw) -> EnvConfig:
    """Multi-round 4-set direct-mapped setup used for detector experiments
    (victim 0-3, attacker 4-7)."""
    window = kw.pop("window", 16)
    return _cfg(1, 4, (4, 7), (0, 3), window=window, multi_round_budget=budget, **kw)


def remap_config(interval=None, **kw) -> EnvConfig:
    """4-set 2-way cache over addresses 0-11 with a keyed random mapping."""
    c = _cfg(2, 4, (1, 11), (0, 0), noacc=True, window=kw.pop("window", 16), **kw)
    return c.replace(remap_interval=interval or 2_000_000)


def streamline_config(ways: int = 4, rep_alg: str = "lru", **kw) -> EnvConfig:
    """Single set of ``ways`` ways; four shared victim lines 0-3, attacker
    lines 0..(2*ways-4+3) and the miss-based detector enabled."""
    att_hi = 3 + (ways - 4) + (ways - 3)
    window = kw.pop("window", 8 * ways)
    return _cfg(ways, 1, (0, att_hi), (0, 3), rep=rep_alg, window=window, detection_enable=True, **kw)


SMALL_REWARDS = RewardConfig(correct_guess_reward=1.0, wrong_guess_reward=-1.0, step_reward=-0.01,
                             length_violation_reward=-1.0, detection_reward=-1.0)
