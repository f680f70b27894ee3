"""Brute-force attack search and its cost model.

A candidate is a sequence of non-guess actions. It is an attack when every
secret produces a different latency signature, in which case the final guess
is read off the signature. The search replays all secrets side by side on
cloned caches, so each prefix is simulated once per secret.
"""
from __future__ import annotations

import math
import random

from ..cache import Domain, Latency
from ..env import NOACCESS, ActionKind, CacheGuessingGameEnv, ConfigError

SEARCH_LIMIT = 10 ** 7


class SearchRefused(ValueError):
    pass


def expected_sequences_count(n: int) -> float:
    """Expected number of sequences a naive search tries for an N-way set."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return 2 * (n + 1) ** (2 * n + 1) / math.factorial(n) ** 2


def search_space_size(num_moves: int, max_len: int) -> int:
    # the guess slot is fixed by replay, so only max_len - 1 positions vary
    return sum(num_moves ** k for k in range(1, max_len))


class _Branch:
    __slots__ = ("secret", "cache", "triggered", "sig")

    def __init__(self, secret, cache, triggered=False, sig=()):
        self.secret = secret
        self.cache = cache
        self.triggered = triggered
        self.sig = sig

    def clone(self):
        return _Branch(self.secret, self.cache.clone(), self.triggered, self.sig)


def _start_branches(env):
    out = []
    for s in env.secrets:
        env.reset(secret=s)
        out.append(_Branch(s, env.cache.clone()))
    return out


def _apply(env, br, action):
    """Advance one branch; return False when the step would be detected."""
    kind, addr = env._kinds[action], env._addrs[action]
    lat = Latency.NA
    if kind == ActionKind.ACCESS:
        lat = br.cache.access(addr, Domain.ATTACKER).latency
    elif kind == ActionKind.FLUSH:
        br.cache.flush(addr)
    elif kind == ActionKind.TRIGGER:
        br.triggered = True
        if br.secret != NOACCESS:
            res = br.cache.access(br.secret, Domain.VICTIM)
            if res.latency == Latency.MISS and env.cfg.detection_enable:
                return False
    br.sig = br.sig + (int(lat),)
    return True


def _partition(branches):
    groups = {}
    for i, b in enumerate(branches):
        groups.setdefault(b.sig, []).append(i)
    return tuple(sorted(tuple(g) for g in groups.values()))


def _state(branches):
    return (_partition(branches),) + tuple((b.triggered, b.cache.state_key()) for b in branches)


def _distinct(branches):
    return len({b.sig for b in branches}) == len(branches)


def _to_traces(env, seq):
    from ..analysis import tree_from_sequence
    labels = " ".join(env.actions[a].label() for a in seq)
    ts = tree_from_sequence(env.cfg, labels)
    ts.verified_accuracy = 1.0
    return ts


def _check_env(env):
    if env.cfg.cache.rep_alg == "random":
        raise ConfigError("exhaustive search needs a deterministic replacement policy")


def exhaustive_search(env: CacheGuessingGameEnv, max_len: int, limit=None, check_guard=True, dedupe=True):
    """Minimal distinguishing sequences of at most ``max_len`` actions (the
    final guess counts as one action).

    A sequence is minimal when none of its proper prefixes already tells the
    secrets apart. With ``dedupe`` a prefix is dropped when an earlier prefix
    of the same or shorter length reached the same joint state (caches,
    trigger flags and the partition of secrets), so each distinct attack is
    reported through one representative. Results come back shortest first as
    AttackTraceSets.
    """
    _check_env(env)
    moves = [a.index for a in env.actions if a.kind not in (ActionKind.GUESS, ActionKind.GUESS_NOACCESS)]
    size = search_space_size(len(moves), max_len)
    if check_guard and size > SEARCH_LIMIT:
        n = env.cfg.cache.num_ways
        raise SearchRefused(
            f"search space {size:.3g} exceeds {SEARCH_LIMIT:.0e} sequences; "
            f"a naive search of a {n}-way set expects M({n}) = {expected_sequences_count(n):.3g} tries")
    found = []
    best_depth = {}

    def dfs(branches, seq):
        if limit is not None and len(found) >= limit:
            return
        for a in moves:
            nxt = []
            for b in branches:
                c = b.clone()
                if not _apply(env, c, a):
                    break
                nxt.append(c)
            else:
                path = seq + [a]
                if all(b.triggered for b in nxt) and _distinct(nxt):
                    found.append(path)
                elif len(path) < max_len - 1:
                    if dedupe:
                        key = _state(nxt)
                        if best_depth.get(key, max_len) <= len(path):
                            continue
                        best_depth[key] = len(path)
                    dfs(nxt, path)

    if max_len >= 2:
        dfs(_start_branches(env), [])
    found.sort(key=lambda p: (len(p), p))
    return [_to_traces(env, p) for p in found]


def random_search(env: CacheGuessingGameEnv, max_len: int, n_samples: int = 10000, seed: int = 0):
    """Sample random action sequences; return the distinguishing ones (deduplicated)."""
    _check_env(env)
    rng = random.Random(seed)
    moves = [a.index for a in env.actions if a.kind not in (ActionKind.GUESS, ActionKind.GUESS_NOACCESS)]
    start = _start_branches(env)
    seen, found = set(), []
    for _ in range(n_samples):
        branches = [b.clone() for b in start]
        seq = []
        for _ in range(max_len - 1):
            a = rng.choice(moves)
            seq.append(a)
            if not all(_apply(env, b, a) for b in branches):
                break
            if all(b.triggered for b in branches) and _distinct(branches):
                t = tuple(seq)
                if t not in seen:
                    seen.add(t)
                    found.append(seq[:])
                break
    found.sort(key=lambda p: (len(p), p))
    return [_to_traces(env, p) for p in found]
