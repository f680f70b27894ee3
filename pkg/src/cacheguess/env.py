"""The cache guessing game.

Each episode samples a secret victim address (or "no access"), lets the agent
access/flush attacker lines, trigger the victim and finally guess the secret.
"""
from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import NamedTuple, Optional

import numpy as np

from .cache import Cache, CacheConfig, CacheError, Conflict, Domain, Latency, TraceEvent, events_from_result

NOACCESS = -1  # secret value for "victim made no access"


class ConfigError(ValueError):
    pass


class ActionKind(IntEnum):
    ACCESS = 0
    FLUSH = 1
    TRIGGER = 2
    GUESS = 3
    GUESS_NOACCESS = 4


class Action(NamedTuple):
    kind: ActionKind
    addr: Optional[int]
    index: int

    def label(self):
        k = self.kind
        if k == ActionKind.ACCESS:
            return str(self.addr)
        if k == ActionKind.FLUSH:
            return f"f{self.addr}"
        if k == ActionKind.TRIGGER:
            return "v"
        if k == ActionKind.GUESS:
            return f"g{self.addr}"
        return "gE"


class StepRecord(NamedTuple):
    latency: int       # Latency value
    action_index: int
    step_number: int
    victim_triggered: bool


class Terminal(Enum):
    CORRECT_GUESS = "correct"
    WRONG_GUESS = "wrong"
    LENGTH_VIOLATION = "length_violation"
    DETECTED = "detected"
    BUDGET_EXHAUSTED = "budget_exhausted"  # multi-round episodes only


@dataclass(frozen=True)
class RewardConfig:
    correct_guess_reward: float = 200.0
    wrong_guess_reward: float = -10000.0
    step_reward: float = -10.0
    length_violation_reward: float = -10000.0
    detection_reward: float = -5000.0
    autocorr_penalty_scale: float = 0.0
    autocorr_max_lag: int = 20

    def __post_init__(self):
        if not self.correct_guess_reward > 0:
            raise ConfigError("correct_guess_reward must be > 0")
        for name in ("wrong_guess_reward", "step_reward", "length_violation_reward",
                     "detection_reward", "autocorr_penalty_scale"):
            if getattr(self, name) > 0:
                raise ConfigError(f"{name} must be <= 0")
        if self.autocorr_max_lag < 1:
            raise ConfigError("autocorr_max_lag must be positive")

    def scaled(self, c: float) -> "RewardConfig":
        return dataclasses.replace(
            self,
            correct_guess_reward=self.correct_guess_reward * c,
            wrong_guess_reward=self.wrong_guess_reward * c,
            step_reward=self.step_reward * c,
            length_violation_reward=self.length_violation_reward * c,
            detection_reward=self.detection_reward * c,
        )


@dataclass(frozen=True)
class EnvConfig:
    attacker_addr_s: int = 0
    attacker_addr_e: int = 3
    victim_addr_s: int = 0
    victim_addr_e: int = 0
    flush_enable: bool = False
    victim_no_access_enable: bool = False
    detection_enable: bool = False
    window_size: int = 16
    cache: CacheConfig = field(default_factory=CacheConfig)
    warmup: tuple = ()
    lock: tuple = ()             # lines locked (victim domain) after warmup; PL cache only
    multi_round_budget: Optional[int] = None
    rewards: RewardConfig = field(default_factory=RewardConfig)
    rng_seed: int = 0

    def __post_init__(self):
        if self.attacker_addr_e < self.attacker_addr_s or self.attacker_addr_s < 0:
            raise ConfigError("bad attacker address range")
        if self.victim_addr_e < self.victim_addr_s or self.victim_addr_s < 0:
            raise ConfigError("bad victim address range")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.multi_round_budget is not None and self.multi_round_budget < 1:
            raise ConfigError("multi_round_budget must be positive")
        if self.lock and not self.cache.pl_cache:
            raise ConfigError("lock requires pl_cache")
        object.__setattr__(self, "warmup", tuple(self.warmup))
        object.__setattr__(self, "lock", tuple(self.lock))
        hi = max(self.attacker_addr_e, self.victim_addr_e, *self.warmup, *self.lock)
        if self.cache.prefetcher != "none":
            hi += 1
        if self.cache.num_addresses != hi + 1:
            object.__setattr__(self, "cache", dataclasses.replace(self.cache, num_addresses=hi + 1))

    @property
    def attacker_addrs(self):
        return list(range(self.attacker_addr_s, self.attacker_addr_e + 1))

    @property
    def victim_addrs(self):
        return list(range(self.victim_addr_s, self.victim_addr_e + 1))

    @property
    def secrets(self):
        s = self.victim_addrs
        if self.victim_no_access_enable:
            s = s + [NOACCESS]
        return s

    def replace(self, **kw) -> "EnvConfig":
        cache_kw = {k: kw.pop(k) for k in list(kw) if k in _CACHE_FIELDS}
        rew_kw = {k: kw.pop(k) for k in list(kw) if k in _REWARD_FIELDS}
        cfg = self
        if cache_kw:
            kw["cache"] = dataclasses.replace(self.cache, **cache_kw)
        if rew_kw:
            kw["rewards"] = dataclasses.replace(self.rewards, **rew_kw)
        return dataclasses.replace(cfg, **kw)


_CACHE_FIELDS = {f.name for f in dataclasses.fields(CacheConfig)}
_REWARD_FIELDS = {f.name for f in dataclasses.fields(RewardConfig)}


def build_actions(cfg: EnvConfig):
    acts = []
    for a in cfg.attacker_addrs:
        acts.append(Action(ActionKind.ACCESS, a, len(acts)))
    if cfg.flush_enable:
        for a in cfg.attacker_addrs:
            acts.append(Action(ActionKind.FLUSH, a, len(acts)))
    acts.append(Action(ActionKind.TRIGGER, None, len(acts)))
    for a in cfg.victim_addrs:
        acts.append(Action(ActionKind.GUESS, a, len(acts)))
    if cfg.victim_no_access_enable:
        acts.append(Action(ActionKind.GUESS_NOACCESS, None, len(acts)))
    return acts


class Observation:
    """Window of the last W step records (newest last). Missing records at
    the front are padding."""

    __slots__ = ("records", "size")

    def __init__(self, records, size):
        self.records = records
        self.size = size

    @property
    def window(self):
        return [None] * (self.size - len(self.records)) + list(self.records)

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Observation) and self.records == other.records and self.size == other.size

    def __hash__(self):
        return hash((self.records, self.size))

    def __repr__(self):
        return f"Observation({list(self.records)!r}, W={self.size})"


@dataclass
class EpisodeOutcome:
    terminal_reason: Terminal
    total_reward: float
    num_steps: int
    secret: int
    event_train: list
    guesses: int = 0
    correct: int = 0
    guess: Optional[int] = None        # last guessed value (NOACCESS for gE)
    victim_misses: int = 0
    detected: bool = False
    autocorr_penalty: float = 0.0


class CacheGuessingGameEnv:
    def __init__(self, cfg: EnvConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.rng_seed if seed is None else seed
        self.actions = build_actions(cfg)
        self.num_actions = len(self.actions)
        self._kinds = [int(a.kind) for a in self.actions]
        self._addrs = [a.addr for a in self.actions]
        self.trigger_index = next(a.index for a in self.actions if a.kind == ActionKind.TRIGGER)
        self.secrets = cfg.secrets
        self.rng = random.Random(self.seed)
        self.cache = Cache(dataclasses.replace(cfg.cache, rng_seed=self.seed))
        self.window = cfg.window_size
        self.rewards = cfg.rewards
        self.record_trace = False
        self.track_fills = False
        # optional callable(env) -> bool evaluated once when an episode ends
        self.episode_detector = None
        self.done = True
        self.history = []
        self.trace = []
        self.event_train = []

    # ------------------------------------------------------------------
    def action_for(self, label: str) -> int:
        for a in self.actions:
            if a.label() == label:
                return a.index
        raise ConfigError(f"no action {label!r} in this config")

    def _sample_secret(self):
        return self.secrets[self.rng.randrange(len(self.secrets))]

    def reset(self, secret: Optional[int] = None) -> Observation:
        self.cache.reset()
        if self.track_fills:
            self.cache.fill_log = []
        self.trace = []
        self.event_train = []
        for a in self.cfg.warmup:
            self.cache.access(a, Domain.VICTIM)
        for a in self.cfg.lock:
            self.cache.pl_lock(a, Domain.VICTIM)
        # warmup activity is not part of the episode's event train or fill log
        if self.track_fills:
            self.cache.fill_log = []
        self.fill_base = self.cache.demand_accesses
        if secret is None:
            secret = self._sample_secret()
        elif secret not in self.secrets:
            raise ConfigError(f"secret {secret} not in secret space")
        self.secret = secret
        self.triggered = False
        self.steps = 0
        self.round_step = 0
        self.total_reward = 0.0
        self.guesses = 0
        self.correct = 0
        self.victim_misses = 0
        self.last_guess = None
        self.history = []
        self.done = False
        return Observation((), self.window)

    def observation(self) -> Observation:
        return Observation(tuple(self.history[-self.window:]), self.window)

    def _note(self, res, victim=False):
        if res.conflict_event is not None:
            self.event_train.append(int(res.conflict_event))
        for p in res.prefetches:
            if p.conflict_event is not None:
                self.event_train.append(int(p.conflict_event))
        if self.record_trace:
            self.trace.extend(events_from_result(res, victim))

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if not (0 <= action < self.num_actions) or isinstance(action, bool):
            raise ConfigError(f"action index {action} out of range 0..{self.num_actions - 1}")
        kind = self._kinds[action]
        addr = self._addrs[action]
        R = self.rewards
        multi = self.cfg.multi_round_budget
        self.steps += 1
        self.round_step += 1
        latency = Latency.NA
        reward = R.step_reward
        terminal = None
        guessed = False
        if kind == ActionKind.ACCESS:
            res = self.cache.access(addr, Domain.ATTACKER)
            latency = res.latency
            self._note(res)
        elif kind == ActionKind.FLUSH:
            self.cache.flush(addr)
            if self.record_trace:
                self.trace.append(TraceEvent("F", addr))
        elif kind == ActionKind.TRIGGER:
            self.triggered = True
            if self.secret != NOACCESS:
                res = self.cache.access(self.secret, Domain.VICTIM)
                self._note(res, victim=True)
                if res.latency == Latency.MISS:
                    self.victim_misses += 1
                    if self.cfg.detection_enable:
                        reward = R.detection_reward
                        terminal = Terminal.DETECTED
            elif self.record_trace:
                self.trace.append(TraceEvent("V", None, Latency.NA))
        else:
            guessed = True
            guess = addr if kind == ActionKind.GUESS else NOACCESS
            self.guesses += 1
            self.last_guess = guess
            ok = self.triggered and guess == self.secret
            if ok:
                self.correct += 1
                reward = R.correct_guess_reward
            else:
                reward = R.wrong_guess_reward
            if multi is None:
                terminal = Terminal.CORRECT_GUESS if ok else Terminal.WRONG_GUESS

        self.history.append(StepRecord(int(latency), action, self.round_step, self.triggered))

        if multi is None:
            if terminal is None and self.steps >= self.window:
                terminal = Terminal.LENGTH_VIOLATION
                reward = R.length_violation_reward
        else:
            if guessed:
                self.secret = self._sample_secret()
                self.triggered = False
                self.round_step = 0
            if terminal is None and self.steps >= multi:
                terminal = Terminal.BUDGET_EXHAUSTED

        outcome = None
        if terminal is not None:
            self.done = True
            pen = 0.0
            if multi is not None and R.autocorr_penalty_scale != 0.0:
                from .detectors import autocorr_penalty
                pen = autocorr_penalty(self.event_train, R.autocorr_penalty_scale, R.autocorr_max_lag)
                reward += pen
            detected = terminal == Terminal.DETECTED
            if self.episode_detector is not None and not detected and self.episode_detector(self):
                detected = True
                reward += R.detection_reward
            self.total_reward += reward
            outcome = EpisodeOutcome(terminal, self.total_reward, self.steps, self.secret,
                                     list(self.event_train), self.guesses, self.correct,
                                     self.last_guess, self.victim_misses, detected, pen)
        else:
            self.total_reward += reward
        return self.observation(), reward, self.done, outcome


# -- observation encoding ----------------------------------------------------
def record_width(num_actions: int, window: int) -> int:
    return 3 + (num_actions + 1) + (window + 1) + 2


def encode_indices(obs: Observation, num_actions: int):
    """Positions of the ones in ``encode(obs)``."""
    W = obs.size
    rw = record_width(num_actions, W)
    pad = W - len(obs.records)
    out = []
    a_off = 3
    s_off = 3 + num_actions + 1
    t_off = s_off + W + 1
    for i in range(pad):
        out.append(i * rw + a_off + num_actions)
    for j, r in enumerate(obs.records):
        base = (pad + j) * rw
        out.append(base + r.latency)
        out.append(base + a_off + r.action_index)
        out.append(base + s_off + min(r.step_number, W))
        out.append(base + t_off + int(r.victim_triggered))
    return out


def encode(obs: Observation, num_actions: int) -> np.ndarray:
    vec = np.zeros(record_width(num_actions, obs.size) * obs.size)
    vec[encode_indices(obs, num_actions)] = 1.0
    return vec


# -- config file -----------------------------------------------------------------
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _as_bool(v):
    if v.lower() not in _BOOL:
        raise ValueError(v)
    return _BOOL[v.lower()]


def _as_list(v):
    v = v.strip().strip("[]")
    return tuple(int(x) for x in v.replace(",", " ").split()) if v else ()


def _as_opt_int(v):
    return None if v.lower() in ("none", "") else int(v)


_ENV_KEYS = {
    "attacker_addr_s": int, "attacker_addr_e": int,
    "victim_addr_s": int, "victim_addr_e": int,
    "flush_enable": _as_bool, "victim_no_access_enable": _as_bool,
    "detection_enable": _as_bool, "window_size": int,
    "warmup": _as_list, "lock": _as_list,
    "multi_round_budget": _as_opt_int,
}
_CACHE_KEYS = {
    "num_ways": int, "num_sets": int, "num_blocks": int,
    "rep_alg": lambda v: v.lower(), "prefetcher": lambda v: v.lower(),
    "pl_cache": _as_bool, "remap_interval": _as_opt_int,
}
_REWARD_KEYS = {
    "correct_guess_reward": float, "wrong_guess_reward": float, "step_reward": float,
    "length_violation_reward": float, "detection_reward": float,
    "autocorr_penalty_scale": float, "autocorr_max_lag": int,
}
_SEED_KEYS = ("seeds", "seed", "rng_seed")
CONFIG_KEYS = sorted(set(_ENV_KEYS) | set(_CACHE_KEYS) | set(_REWARD_KEYS) | set(_SEED_KEYS))


def parse_config(text: str) -> EnvConfig:
    """Parse a flat ``key: value`` experiment file."""
    env_kw, cache_kw, rew_kw = {}, {}, {}
    seed = 0
    blocks = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, val = (s.strip() for s in line.split(":", 1))
        try:
            if key in _ENV_KEYS:
                env_kw[key] = _ENV_KEYS[key](val)
            elif key in _CACHE_KEYS:
                if key == "num_blocks":
                    blocks = int(val)
                else:
                    cache_kw[key] = _CACHE_KEYS[key](val)
            elif key in _REWARD_KEYS:
                rew_kw[key] = _REWARD_KEYS[key](val)
            elif key in _SEED_KEYS:
                seed = int(val)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value {val!r} for key {key!r}") from None
    if blocks is not None:
        ways = cache_kw.get("num_ways", blocks)
        if blocks % ways:
            raise ConfigError(f"num_blocks {blocks} not divisible by num_ways {ways}")
        cache_kw.setdefault("num_ways", ways)
        cache_kw.setdefault("num_sets", blocks // ways)
    try:
        cache = CacheConfig(**cache_kw)
        return EnvConfig(cache=cache, rewards=RewardConfig(**rew_kw), rng_seed=seed, **env_kw)
    except CacheError as e:
        raise ConfigError(str(e)) from None


def render_config(cfg: EnvConfig) -> str:
    c, r = cfg.cache, cfg.rewards
    fmt_list = lambda xs: ", ".join(str(x) for x in xs)
    fmt_bool = lambda b: "true" if b else "false"
    lines = [
        f"num_ways: {c.num_ways}",
        f"num_sets: {c.num_sets}",
        f"rep_alg: {c.rep_alg}",
        f"prefetcher: {c.prefetcher}",
        f"pl_cache: {fmt_bool(c.pl_cache)}",
        f"remap_interval: {c.remap_interval if c.remap_interval is not None else 'none'}",
        f"attacker_addr_s: {cfg.attacker_addr_s}",
        f"attacker_addr_e: {cfg.attacker_addr_e}",
        f"victim_addr_s: {cfg.victim_addr_s}",
        f"victim_addr_e: {cfg.victim_addr_e}",
        f"flush_enable: {fmt_bool(cfg.flush_enable)}",
        f"victim_no_access_enable: {fmt_bool(cfg.victim_no_access_enable)}",
        f"detection_enable: {fmt_bool(cfg.detection_enable)}",
        f"window_size: {cfg.window_size}",
        f"warmup: {fmt_list(cfg.warmup)}",
        f"lock: {fmt_list(cfg.lock)}",
        f"multi_round_budget: {cfg.multi_round_budget if cfg.multi_round_budget is not None else 'none'}",
    ]
    for f in dataclasses.fields(RewardConfig):
        lines.append(f"{f.name}: {getattr(r, f.name)!r}")
    lines.append(f"seeds: {cfg.rng_seed}")
    return "\n".join(lines) + "\n"


def load_config(path) -> EnvConfig:
    with open(path) as fh:
        return parse_config(fh.read())
