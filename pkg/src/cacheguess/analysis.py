"""Attack traces: extraction from policies, replay verification, category
heuristics, scripted reference attacks and a text export format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .cache import Cache, CacheError, Domain, Latency
from .env import (NOACCESS, ActionKind, CacheGuessingGameEnv, ConfigError, EnvConfig, parse_config,
                  render_config)

CATEGORIES = ("PRIME_PROBE", "FLUSH_RELOAD", "EVICT_RELOAD", "LRU_STATE", "MIXED", "UNKNOWN")


class TraceError(ValueError):
    pass


class ConfigMismatch(TraceError):
    pass


class NotDistinguishing(TraceError):
    pass


def secret_label(s) -> str:
    return "E" if s == NOACCESS else str(s)


def parse_secret(tok: str) -> int:
    return NOACCESS if tok == "E" else int(tok)


def _lat_obs(label, lat):
    # only attacker accesses are observable
    return lat if _is_access(label) else Latency.NA


def _is_access(label):
    return label[0].isdigit()


def _is_guess(label):
    return label[0] == "g"


@dataclass
class AttackTraceSet:
    """One or more (secret, path) pairs. A path is a list of (label, latency)
    where latency is the attacker's observation for accesses and the
    victim's own latency for ``v`` (hidden from the attacker)."""

    config: EnvConfig
    paths: list = field(default_factory=list)
    verified_accuracy: Optional[float] = None
    victim_miss_count: int = 0
    category: str = "UNKNOWN"

    @property
    def per_secret(self):
        out = {}
        for s, p in self.paths:
            out.setdefault(s, p)
        return out

    def tree(self):
        """prefix of (label, observation) pairs -> next label"""
        t = {}
        for s, path in self.paths:
            prefix = ()
            for label, lat in path:
                prev = t.get(prefix)
                if prev is not None and prev != label:
                    raise TraceError(f"paths disagree after {prefix}: {prev} vs {label}")
                t[prefix] = label
                prefix = prefix + ((label, _lat_obs(label, lat)),)
        return t

    def labels(self, secret):
        return [l for l, _ in self.per_secret[secret]]


# -- replay helpers -------------------------------------------------------------
def _label_map(env):
    return {a.label(): a.index for a in env.actions}


def _index_path(env, labels):
    m = _label_map(env)
    out = []
    for l in labels:
        if l not in m:
            raise ConfigMismatch(f"action {l!r} is not available in this config")
        out.append(m[l])
    return out


def replay_path(env: CacheGuessingGameEnv, secret, labels):
    """Run ``labels`` with a fixed secret; return the (label, latency) path."""
    idx = _index_path(env, labels)
    env.reset(secret=secret)
    path = []
    for k, (lab, a) in enumerate(zip(labels, idx)):
        misses = env.victim_misses
        obs, _, done, out = env.step(a)
        lat = Latency(obs.records[-1].latency)
        if lab == "v":
            if secret == NOACCESS:
                lat = Latency.NA
            else:
                lat = Latency.MISS if env.victim_misses > misses else Latency.HIT
        path.append((lab, lat))
        if done and k + 1 < len(labels):
            raise TraceError(f"episode ended early at step {k + 1} ({out.terminal_reason.value})")
    return path


def _split(seq):
    return seq.split() if isinstance(seq, str) else list(seq)


def tree_from_sequence(cfg: EnvConfig, seq) -> AttackTraceSet:
    """Build a trace set from a reference sequence.

    ``seq`` is either one flat action string (the final guess is chosen from
    the observations, which must tell all secrets apart) or a dict mapping
    each secret to its full action string including the guess.
    """
    env = CacheGuessingGameEnv(cfg.replace(multi_round_budget=None))
    paths = []
    if isinstance(seq, dict):
        for s in cfg.secrets:
            paths.append((s, replay_path(env, s, _split(seq[s]))))
    else:
        labels = _split(seq)
        obs_of = {}
        for s in cfg.secrets:
            p = replay_path(env, s, labels)
            sig = tuple(_lat_obs(l, lat) for l, lat in p)
            if sig in obs_of:
                raise NotDistinguishing(
                    f"secrets {secret_label(obs_of[sig])} and {secret_label(s)} give identical observations")
            obs_of[sig] = s
            guess = "gE" if s == NOACCESS else f"g{s}"
            paths.append((s, p + [(guess, Latency.NA)]))
    ts = AttackTraceSet(cfg, paths)
    ts.tree()  # consistency check
    ts.victim_miss_count = sum(1 for _, p in ts.paths for l, lat in p if l == "v" and lat == Latency.MISS)
    return ts


def verify(traces: AttackTraceSet, env: CacheGuessingGameEnv = None, n_trials: int = 1000, seed: int = 0) -> float:
    """Replay the trace tree against freshly sampled secrets; return the
    fraction of correct guesses. Unseen branches count as wrong."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if env is None:
        env = CacheGuessingGameEnv(traces.config.replace(multi_round_budget=None), seed=seed)
    tree = traces.tree()
    m = _label_map(env)
    for lab in set(tree.values()):
        if lab not in m:
            raise ConfigMismatch(f"trace uses action {lab!r}, not available in this config")
    correct = 0
    for _ in range(n_trials):
        env.reset()
        prefix = ()
        while True:
            lab = tree.get(prefix)
            if lab is None:
                break
            obs, _, done, out = env.step(m[lab])
            prefix = prefix + ((lab, _lat_obs(lab, Latency(obs.records[-1].latency))),)
            if done:
                correct += out.terminal_reason.value == "correct"
                break
    acc = correct / n_trials
    traces.verified_accuracy = acc
    return acc


def extract_traces(policy, env: CacheGuessingGameEnv, min_accuracy=0.95, samples_per_secret=None,
                   accuracy=None) -> AttackTraceSet:
    """Deterministic replay of ``policy`` once per secret (many times for a
    random-replacement cache, merging the branches into one tree)."""
    from .agents.policy import Mode, evaluate, exact_accuracy, cache_is_deterministic
    cfg = env.cfg
    det = cache_is_deterministic(cfg)
    if accuracy is None:
        accuracy = exact_accuracy(policy, env) if det else evaluate(policy, env, 2000).accuracy
    if accuracy < min_accuracy:
        raise TraceError(f"policy accuracy {accuracy:.3f} below {min_accuracy}; refusing to extract")
    if samples_per_secret is None:
        samples_per_secret = 1 if det else 200
    old = policy.mode
    policy.mode = Mode.DETERMINISTIC
    paths = []
    seen = set()
    try:
        for s in cfg.secrets:
            for _ in range(samples_per_secret):
                obs = env.reset(secret=s)
                policy.reset()
                path = []
                done = False
                while not done:
                    a = policy.act(obs)
                    lab = env.actions[a].label()
                    misses = env.victim_misses
                    obs, _, done, out = env.step(a)
                    lat = Latency(obs.records[-1].latency)
                    if lab == "v":
                        lat = Latency.NA if s == NOACCESS else (
                            Latency.MISS if env.victim_misses > misses else Latency.HIT)
                    path.append((lab, lat))
                key = (s, tuple(path))
                if key not in seen:
                    seen.add(key)
                    paths.append((s, path))
    finally:
        policy.mode = old
    ts = AttackTraceSet(cfg, paths)
    ts.tree()
    ts.victim_miss_count = sum(1 for _, p in ts.paths for l, lat in p if l == "v" and lat == Latency.MISS)
    return ts


# -- classification -----------------------------------------------------------------
def _instrumented(cfg: EnvConfig, secret, labels):
    """Per step, the status of the accessed address just before the access:
    ('present', who_filled) or ('absent', why), plus flush history."""
    cache = Cache(dataclasses.replace(cfg.cache, rng_seed=cfg.rng_seed))
    fill_src, gone = {}, {}
    for a in cfg.warmup:
        r = cache.access(a, Domain.VICTIM)
        _track(r, fill_src, gone, warm=True)
    for a in cfg.lock:
        cache.pl_lock(a, Domain.VICTIM)
    flushed = set()
    out = []
    for lab in labels:
        status = None
        if _is_access(lab):
            x = int(lab)
            if cache.contains(x):
                status = ("present", fill_src.get(x, "warm"), x in flushed)
            else:
                status = ("absent", gone.get(x, "never"), x in flushed)
            r = cache.access(x, Domain.ATTACKER)
            _track(r, fill_src, gone)
        elif lab[0] == "f":
            x = int(lab[1:])
            if cache.flush(x):
                gone[x] = "flush"
            flushed.add(x)
        elif lab == "v":
            if secret != NOACCESS:
                r = cache.access(secret, Domain.VICTIM)
                _track(r, fill_src, gone)
        out.append(status)
    return out


def _track(r, fill_src, gone, warm=False):
    for res in (r,) + tuple(r.prefetches):
        if res.evicted_tag is not None:
            gone[res.evicted_tag] = "evict_V" if res.domain == Domain.VICTIM else "evict_A"
        if res.filled:
            fill_src[res.addr] = "warm" if warm else ("victim" if res.domain == Domain.VICTIM else "attacker")
            gone.pop(res.addr, None)
        elif res.latency == Latency.MISS and not res.caused_by_prefetch:
            gone[res.addr] = "nofill"


def signal_mechanisms(traces: AttackTraceSet):
    """Mechanism behind every observation that differs between two secrets
    sharing the same action prefix."""
    cfg = traces.config
    info = []
    for s, path in traces.paths:
        labels = [l for l, _ in path]
        info.append((s, labels, [_lat_obs(l, lat) for l, lat in path], _instrumented(cfg, s, labels)))
    mech = set()
    for i in range(len(info)):
        for j in range(i + 1, len(info)):
            si, li, oi, ti = info[i]
            sj, lj, oj, tj = info[j]
            if si == sj:
                continue
            for k in range(min(len(li), len(lj))):
                if li[k] != lj[k]:
                    break
                if _is_access(li[k]) and oi[k] != oj[k]:
                    hit_st, miss_st = (ti[k], tj[k]) if oi[k] == Latency.HIT else (tj[k], ti[k])
                    if hit_st[0] == "present" and hit_st[1] == "victim":
                        mech.add("FLUSH_RELOAD" if hit_st[2] else "EVICT_RELOAD")
                    elif miss_st[0] == "absent" and miss_st[1] == "evict_V":
                        mech.add("PRIME_PROBE")
                    else:
                        mech.add("LRU_STATE")
                    break
                if oi[k] != oj[k]:
                    break
    return mech


def classify(traces: AttackTraceSet, cfg: EnvConfig = None) -> str:
    if cfg is not None and cfg is not traces.config:
        traces = AttackTraceSet(cfg, traces.paths)
    mech = signal_mechanisms(traces)
    if not mech:
        cat = "UNKNOWN"
    elif len(mech) == 1:
        cat = next(iter(mech))
    else:
        cat = "MIXED"
    traces.category = cat
    return cat


# -- scripted attacks -----------------------------------------------------------------
def textbook_prime_probe(cfg: EnvConfig) -> AttackTraceSet:
    """Prime every attacker line, trigger, probe them all in ascending order;
    guess from the set whose probe missed."""
    att = set(cfg.attacker_addrs)
    if att & set(cfg.victim_addrs):
        raise ConfigError("textbook prime+probe needs disjoint attacker and victim ranges")
    cache = Cache(cfg.cache)
    att_sets = {cache.set_of(a) for a in att}
    for v in cfg.victim_addrs:
        if cache.set_of(v) not in att_sets:
            raise ConfigError(f"no attacker line maps to the set of victim address {v}")
    order = sorted(att)
    seq = [str(a) for a in order] + ["v"] + [str(a) for a in order]
    return tree_from_sequence(cfg, seq)


def early_exit_probe(cfg: EnvConfig) -> AttackTraceSet:
    """Prime+probe that stops probing at the first miss.

    After the prime, a round is: trigger, probe the attacker lines in order
    until one misses, then touch the last attacker line and guess the victim
    address of the missing set. When every probe but the last hits, the
    victim must have used the last set. Rounds therefore vary in length and
    the last set is refreshed off-beat, which breaks up the regular
    eviction pattern that the textbook attack leaves behind. Meant to be
    played with the prime as a prologue (``skip=len(prime)``).
    """
    ts = textbook_prime_probe(cfg)
    order = sorted(cfg.attacker_addrs)
    cache = Cache(cfg.cache)
    by_set = {cache.set_of(v): v for v in cfg.victim_addrs}
    prime = [(str(a), Latency.MISS) for a in order]
    paths = []
    for i, a in enumerate(order[:-1]):
        s = by_set[cache.set_of(a)]
        probe = [(str(b), Latency.HIT) for b in order[:i]] + [(str(a), Latency.MISS)]
        for last in (Latency.HIT, Latency.MISS):
            paths.append((s, prime + [("v", Latency.MISS)] + probe + [(str(order[-1]), last), (f"g{s}", Latency.NA)]))
    s = by_set[cache.set_of(order[-1])]
    paths.append((s, prime + [("v", Latency.MISS)] + [(str(b), Latency.HIT) for b in order[:-1]]
                  + [(f"g{s}", Latency.NA)]))
    out = AttackTraceSet(ts.config, paths)
    out.tree()
    return out


def tree_policy(traces: AttackTraceSet, env: CacheGuessingGameEnv, skip: int = 0, prologue=(),
                mask_pretrigger=False):
    """A TreePolicy over ``env``'s action indices that plays ``traces`` round
    after round. The first ``skip`` steps of every path are dropped from the
    tree (pass them as ``prologue`` to run them once per episode).

    ``mask_pretrigger`` ignores observations made before the victim runs,
    so rounds after the first follow the tree even though their setup
    accesses now hit lines left over from the previous round.
    """
    from .agents.policy import TreePolicy, guess_indices
    m = _label_map(env)
    tree = {}
    for prefix, lab in traces.tree().items():
        if len(prefix) < skip:
            continue
        key, seen_v = [], False
        for l, o in prefix[skip:]:
            seen_v = seen_v or l == "v"
            key.append((m[l], int(o) if seen_v or not mask_pretrigger else -1))
        key = tuple(key)
        if tree.get(key, m[lab]) != m[lab]:
            raise TraceError("trace branches on an observation made before the victim runs")
        tree[key] = m[lab]
    return TreePolicy(env.num_actions, tree, guess_indices(env), [m[l] for l in prologue],
                      trigger=env.trigger_index if mask_pretrigger else None)


def textbook_policy(env: CacheGuessingGameEnv):
    """Prime+probe for multi-round play: prime once, then every round is
    trigger, probe all attacker lines (which re-primes them) and guess."""
    ts = textbook_prime_probe(env.cfg)
    prime = [str(a) for a in sorted(env.cfg.attacker_addrs)]
    return tree_policy(ts, env, skip=len(prime), prologue=prime)


def streamline_sequence(ways: int):
    """One round of the multi-bit LRU-state attack for a ``ways``-way set.

    Lines 0-3 are shared with the victim. The round re-touches ``ways-4``
    padding lines and then 0..3 so the shared lines are the most recent, lets
    the victim hit one of them, then misses on ``ways-3`` fresh lines which
    push out the padding plus the oldest untouched shared line. Probing
    0, 1, 2 in turn gives four distinct hit/miss patterns while every victim
    access stays a hit.
    """
    if ways not in (4, 8, 12):
        raise ConfigError(f"stealthy_streamline supports 4, 8 or 12 ways, not {ways}")
    pads = list(range(4, 4 + ways - 4))
    fresh = list(range(4 + ways - 4, 4 + ways - 4 + ways - 3))
    labels = [str(a) for a in pads] + ["0", "1", "2", "3", "v"] + [str(a) for a in fresh] + ["0", "1", "2"]
    return labels


def stealthy_streamline(ways: int = 4, rep_alg: str = "lru") -> AttackTraceSet:
    from .configs import streamline_config
    if ways not in (4, 8, 12):
        raise ConfigError(f"stealthy_streamline supports 4, 8 or 12 ways, not {ways}")
    if rep_alg == "plru":
        # exhaustive search up to 10 moves finds no miss-free 4-secret schedule on a 4-way tree PLRU set
        raise ConfigError("stealthy_streamline has no known PLRU schedule; use an LRU cache")
    if rep_alg != "lru":
        raise ConfigError("stealthy_streamline needs an LRU cache")
    cfg = streamline_config(ways, rep_alg)
    ts = tree_from_sequence(cfg, streamline_sequence(ways))
    if ts.victim_miss_count:
        raise TraceError("constructed sequence causes victim misses")
    return ts


# -- text format -----------------------------------------------------------------------
_LAT = {Latency.HIT: "hit", Latency.MISS: "miss", Latency.NA: "na"}
_LAT_R = {v: k for k, v in _LAT.items()}


def _render_step(label, lat):
    if _is_access(label):
        return f"A {label} {_LAT[lat]}"
    if label[0] == "f":
        return f"F {label[1:]}"
    if label == "v":
        return f"V {_LAT[lat]}"
    if label == "gE":
        return "G E"
    return f"G {label[1:]}"


def _parse_step(line, lineno):
    p = line.split()
    try:
        if p[0] == "A" and len(p) == 3:
            return str(int(p[1])), _LAT_R[p[2]]
        if p[0] == "F" and len(p) == 2:
            return f"f{int(p[1])}", Latency.NA
        if p[0] == "V" and len(p) == 2:
            return "v", _LAT_R[p[1]]
        if p[0] == "G" and len(p) == 2:
            return ("gE" if p[1] == "E" else f"g{int(p[1])}"), Latency.NA
    except (KeyError, ValueError, IndexError):
        pass
    raise TraceError(f"line {lineno}: cannot parse {line!r}")


def render_traces(ts: AttackTraceSet) -> str:
    out = ["# cacheguess attack traces v1",
           f"# category: {ts.category}",
           f"# accuracy: {'none' if ts.verified_accuracy is None else repr(ts.verified_accuracy)}",
           f"# victim_misses: {ts.victim_miss_count}"]
    out += ["# config " + ln for ln in render_config(ts.config).splitlines()]
    for s, path in ts.paths:
        out.append(f"path {secret_label(s)}")
        out += [_render_step(l, lat) for l, lat in path]
        out.append("end")
    return "\n".join(out) + "\n"


def parse_traces(text: str) -> AttackTraceSet:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# cacheguess attack traces"):
        raise TraceError("line 1: missing trace header")
    meta, cfg_lines, paths = {}, [], []
    cur = None
    for n, raw in enumerate(lines[1:], 2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("# config "):
            cfg_lines.append(line[len("# config "):])
        elif line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif line.startswith("path "):
            if cur is not None:
                raise TraceError(f"line {n}: nested path")
            try:
                cur = (parse_secret(line.split()[1]), [])
            except (ValueError, IndexError):
                raise TraceError(f"line {n}: bad path header {line!r}") from None
        elif line == "end":
            if cur is None:
                raise TraceError(f"line {n}: 'end' outside a path")
            paths.append(cur)
            cur = None
        else:
            if cur is None:
                raise TraceError(f"line {n}: step outside a path")
            cur[1].append(_parse_step(line, n))
    if cur is not None:
        raise TraceError("unterminated path at end of file")
    try:
        cfg = parse_config("\n".join(cfg_lines))
    except ConfigError as e:
        raise TraceError(f"config block: {e}") from None
    acc = meta.get("accuracy", "none")
    return AttackTraceSet(cfg, paths, None if acc == "none" else float(acc),
                          int(meta.get("victim_misses", 0)), meta.get("category", "UNKNOWN"))
