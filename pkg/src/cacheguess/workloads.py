"""Synthetic benign access streams for training the cycle classifier.

Each stream has a dominant domain that runs a uniform, strided or zipfian
pattern over its own lines, and a second domain that shows up in short
bursts. Both domains share the cache, so benign streams also produce some
cross-domain cycles, just fewer and less regular than an attack.
"""
from __future__ import annotations

import numpy as np

from .cache import Cache, CacheConfig, Domain

KINDS = ("uniform", "strided", "zipfian")


def _pattern(kind, lines, n, rng):
    lines = list(lines)
    if kind == "uniform":
        return [lines[i] for i in rng.integers(len(lines), size=n)]
    if kind == "strided":
        stride = int(rng.integers(1, len(lines))) if len(lines) > 1 else 1
        start = int(rng.integers(len(lines)))
        return [lines[(start + i * stride) % len(lines)] for i in range(n)]
    if kind == "zipfian":
        ranks = np.arange(1, len(lines) + 1, dtype=float)
        p = 1.0 / ranks ** 1.2
        p /= p.sum()
        order = rng.permutation(len(lines))
        return [lines[order[i]] for i in rng.choice(len(lines), size=n, p=p)]
    raise ValueError(f"unknown workload kind {kind!r}; expected one of {KINDS}")


def benign_stream(kind, own_lines, other_lines, n_accesses=160, burst_rate=(0.02, 0.12),
                  max_burst=3, rng=None, dominant=Domain.ATTACKER):
    """List of (addr, domain). ``burst_rate`` bounds the fraction of accesses
    issued by the non-dominant domain (drawn per stream)."""
    rng = rng if rng is not None else np.random.default_rng()
    rate = float(rng.uniform(*burst_rate))
    main = _pattern(kind, own_lines, n_accesses, rng)
    other = Domain.VICTIM if dominant == Domain.ATTACKER else Domain.ATTACKER
    other_lines = list(other_lines)
    out = []
    i = 0
    while len(out) < n_accesses:
        if rng.random() < rate / ((1 + max_burst) / 2):
            for _ in range(int(rng.integers(1, max_burst + 1))):
                out.append((other_lines[int(rng.integers(len(other_lines)))], other))
        else:
            out.append((main[i % len(main)], dominant))
            i += 1
    return out[:n_accesses]


def run_stream(cache_cfg: CacheConfig, stream):
    """Replay a stream on a fresh cache and return its fill log."""
    cache = Cache(cache_cfg)
    cache.fill_log = []
    for addr, dom in stream:
        cache.access(addr, dom)
    return cache.fill_log


def benign_corpus(cache_cfg: CacheConfig, attacker_lines, victim_lines, n=200, n_accesses=160, seed=0, **kw):
    """``n`` fill logs cycling through the workload kinds and both choices of
    dominant domain."""
    rng = np.random.default_rng(seed)
    logs = []
    for i in range(n):
        kind = KINDS[i % len(KINDS)]
        if (i // len(KINDS)) % 2 == 0:
            s = benign_stream(kind, attacker_lines, victim_lines, n_accesses, rng=rng, **kw)
        else:
            s = benign_stream(kind, victim_lines, attacker_lines, n_accesses, rng=rng,
                              dominant=Domain.VICTIM, **kw)
        logs.append(run_stream(cache_cfg, s))
    return logs


def attack_features(env, policy, n=200, num_lines=None, **kw):
    """Cycle features of ``n`` episodes of ``policy`` on ``env``."""
    from .agents.policy import run_episode
    from .detectors import cyclone_features
    num_lines = num_lines or env.cfg.cache.num_blocks
    old = env.track_fills
    env.track_fills = True
    try:
        out = []
        for _ in range(n):
            run_episode(policy, env)
            out.append(cyclone_features(env.cache.fill_log, num_lines, start=env.fill_base, **kw))
    finally:
        env.track_fills = old
    return out


def train_cyclone(cfg, n=200, seed=0):
    """Cyclone detector for a multi-round config: benign corpus against
    textbook prime+probe episodes. Returns (detector, benign, malicious)."""
    from .analysis import textbook_policy
    from .detectors import Cyclone, cyclone_features, train_classifier
    from .env import CacheGuessingGameEnv
    env = CacheGuessingGameEnv(cfg, seed=seed)
    lines = cfg.cache.num_blocks
    mal = attack_features(env, textbook_policy(env), n, lines)
    n_acc = cfg.multi_round_budget or 160
    ben = [cyclone_features(log, lines) for log in
           benign_corpus(env.cache.config, cfg.attacker_addrs, cfg.victim_addrs, n=n, n_accesses=n_acc, seed=seed)]
    return Cyclone(train_classifier(ben, mal, seed=seed), lines), ben, mal
