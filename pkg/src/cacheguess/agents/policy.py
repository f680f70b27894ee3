"""Policies (tabular, linear softmax, scripted) plus evaluation and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..env import ActionKind, CacheGuessingGameEnv, Observation, StepRecord, encode_indices, record_width

CHECKPOINT_VERSION = 1


class Mode(Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"


def argmax_low(values) -> int:
    """argmax with lowest-index tie break (np.argmax already does this)."""
    return int(np.argmax(values))


def history_key(obs: Observation, round_local: bool = False, guess_indices=(), key_window=None):
    recs = obs.records
    if round_local and guess_indices:
        # drop everything up to and including the last guess
        for i in range(len(recs) - 1, -1, -1):
            if recs[i].action_index in guess_indices:
                recs = recs[i + 1:]
                break
    if key_window is not None and len(recs) > key_window:
        recs = recs[-key_window:]
    return recs


def key_to_str(key) -> str:
    if not key:
        return "-"
    return "|".join(f"{r.latency}.{r.action_index}.{r.step_number}.{int(r.victim_triggered)}" for r in key)


def str_to_key(s: str):
    if s == "-":
        return ()
    out = []
    for part in s.split("|"):
        lat, act, step, trig = part.split(".")
        out.append(StepRecord(int(lat), int(act), int(step), bool(int(trig))))
    return tuple(out)


class Policy:
    kind = "base"

    def __init__(self, num_actions: int):
        self.num_actions = num_actions
        self.mode = Mode.DETERMINISTIC

    def reset(self):
        pass

    def act(self, obs: Observation, rng=None) -> int:
        raise NotImplementedError


class TabularPolicy(Policy):
    kind = "TABULAR"

    def __init__(self, num_actions, round_local=False, guess_indices=(), eval_epsilon=0.05, key_window=None):
        super().__init__(num_actions)
        self.table = {}
        self.round_local = round_local
        self.guess_indices = frozenset(guess_indices)
        self.eval_epsilon = eval_epsilon
        self.key_window = key_window

    def key(self, obs):
        return history_key(obs, self.round_local, self.guess_indices, self.key_window)

    def values(self, key):
        q = self.table.get(key)
        if q is None:
            q = np.zeros(self.num_actions)
            self.table[key] = q
        return q

    def act(self, obs, rng=None):
        q = self.table.get(self.key(obs))
        if self.mode == Mode.STOCHASTIC and rng is not None and rng.random() < self.eval_epsilon:
            return int(rng.integers(self.num_actions))
        if q is None:
            return 0
        return argmax_low(q)


def pair_indices(obs: Observation, num_actions: int, depth: int, offset: int = 0):
    """One-hot (action, latency) pairs indexed by distance from the newest
    record, plus a trailing "victim triggered this round" bit."""
    recs = obs.records
    n = len(recs)
    out = []
    for j in range(min(depth, n)):
        r = recs[n - 1 - j]
        out.append(offset + (j * num_actions + r.action_index) * 3 + r.latency)
    if n and recs[-1].victim_triggered:
        out.append(offset + depth * num_actions * 3)
    return out


class LinearSoftmaxPolicy(Policy):
    """Softmax over a linear function of sparse binary features.

    The base features are ``encode(obs)``. With ``pair_depth`` > 0 the most
    recent records also contribute joint (action, latency) indicators, which
    lets a linear policy react to "which access just hit" directly.
    """

    kind = "LINEAR_SOFTMAX"

    def __init__(self, num_actions, window, init_scale=0.0, rng=None, pair_depth=0):
        super().__init__(num_actions)
        self.window = window
        self.pair_depth = pair_depth
        self.base_dim = record_width(num_actions, window) * window
        self.feat_dim = self.base_dim + (pair_depth * num_actions * 3 + 1 if pair_depth else 0)
        self.theta = np.zeros((self.feat_dim, num_actions))
        if init_scale and rng is not None:
            self.theta += init_scale * rng.standard_normal(self.theta.shape)
        self.value = np.zeros(self.feat_dim)
        self.value_bias = 0.0

    def features(self, obs):
        idx = encode_indices(obs, self.num_actions)
        if self.pair_depth:
            idx = idx + pair_indices(obs, self.num_actions, self.pair_depth, self.base_dim)
        return np.asarray(idx, dtype=np.intp)

    def logits(self, idx):
        return self.theta[idx].sum(axis=0)

    def probs(self, idx):
        z = self.logits(idx)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def act(self, obs, rng=None):
        idx = self.features(obs)
        if self.mode == Mode.DETERMINISTIC or rng is None:
            return argmax_low(self.logits(idx))
        p = self.probs(idx)
        return int(rng.choice(self.num_actions, p=p))


class TreePolicy(Policy):
    """Follows an attack trace tree: the next action depends on the
    (action, latency) pairs seen since the last guess.

    ``prologue`` actions run once at the start of each episode, before the
    first round, and are not part of any round's path. With ``trigger`` set,
    latencies seen before that action in a round are stored as -1, which
    lets a tree recorded on a cold cache replay on a warm one.
    """

    kind = "TREE"

    def __init__(self, num_actions, tree, guess_indices, prologue=(), trigger=None):
        super().__init__(num_actions)
        self.trigger = trigger
        self.tree = tree  # dict: tuple of (action, latency) -> next action
        self.guess_indices = frozenset(guess_indices)
        self.prologue = tuple(prologue)
        self.reset()

    def reset(self):
        self.path = ()
        self.done_prologue = 0

    def act(self, obs, rng=None):
        recs = obs.records
        if self.done_prologue < len(self.prologue):
            a = self.prologue[self.done_prologue]
            self.done_prologue += 1
            self._skip = True
            return a
        if recs and not getattr(self, "_skip", False):
            last = recs[-1]
            if last.action_index in self.guess_indices:
                self.path = ()
            else:
                lat = last.latency
                if self.trigger is not None and all(a != self.trigger for a, _ in self.path) \
                        and last.action_index != self.trigger:
                    lat = -1
                self.path = self.path + ((last.action_index, lat),)
        self._skip = False
        a = self.tree.get(self.path)
        if a is None:
            # unseen branch: fall back to the first guess
            return min(self.guess_indices)
        return a


# -- evaluation ------------------------------------------------------------------
@dataclass
class EvalResult:
    accuracy: float
    mean_len: float
    bit_rate: float
    detection_rate: float
    episodes: int
    guesses: int
    correct: int
    victim_misses: int = 0


def run_episode(policy, env: CacheGuessingGameEnv, rng=None, secret=None):
    obs = env.reset(secret=secret)
    policy.reset()
    while True:
        a = policy.act(obs, rng)
        obs, _, done, out = env.step(a)
        if done:
            return out


def evaluate(policy, env: CacheGuessingGameEnv, n_episodes=2000, stochastic=False, rng=None, detector=None) -> EvalResult:
    """Run ``n_episodes`` and aggregate accuracy, episode length, guesses per
    step and detection rate.

    ``detector`` is an optional callable(env, outcome) -> bool; without it an
    episode counts as detected when the env itself flagged it.
    """
    old = policy.mode
    policy.mode = Mode.STOCHASTIC if stochastic else Mode.DETERMINISTIC
    if stochastic and rng is None:
        rng = np.random.default_rng(0)
    steps = guesses = correct = detected = vm = 0
    try:
        for _ in range(n_episodes):
            out = run_episode(policy, env, rng)
            steps += out.num_steps
            guesses += out.guesses
            correct += out.correct
            vm += out.victim_misses
            fired = detector(env, out) if detector is not None else out.detected
            detected += bool(fired)
    finally:
        policy.mode = old
    if env.cfg.multi_round_budget is None:
        acc = correct / n_episodes
    else:
        acc = correct / guesses if guesses else 0.0
    return EvalResult(acc, steps / n_episodes, guesses / steps if steps else 0.0,
                      detected / n_episodes, n_episodes, guesses, correct, vm)


def cache_is_deterministic(cfg) -> bool:
    return cfg.cache.rep_alg != "random"


def exact_accuracy(policy, env) -> float:
    """Accuracy for a deterministic policy on a deterministic cache: one
    episode per secret, weighted uniformly (the secret prior is uniform)."""
    old = policy.mode
    policy.mode = Mode.DETERMINISTIC
    try:
        hits = 0
        for s in env.secrets:
            out = run_episode(policy, env, secret=s)
            hits += out.correct
    finally:
        policy.mode = old
    return hits / len(env.secrets)


# -- checkpoint format ----------------------------------------------------------------
def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def save_policy(policy, path):
    with open(path, "w") as fh:
        fh.write(render_policy(policy))


def render_policy(policy) -> str:
    lines = [f"cacheguess-policy v{CHECKPOINT_VERSION}", f"kind {policy.kind}", f"num_actions {policy.num_actions}"]
    if isinstance(policy, TabularPolicy):
        lines.append(f"round_local {int(policy.round_local)}")
        lines.append("guess_indices " + " ".join(str(g) for g in sorted(policy.guess_indices)))
        lines.append(f"eval_epsilon {_fmt17(policy.eval_epsilon)}")
        lines.append(f"key_window {policy.key_window if policy.key_window is not None else 'none'}")
        lines.append(f"entries {len(policy.table)}")
        for k in sorted(policy.table, key=key_to_str):
            q = policy.table[k]
            lines.append(key_to_str(k) + "\t" + " ".join(_fmt17(v) for v in q))
    elif isinstance(policy, LinearSoftmaxPolicy):
        lines.append(f"window {policy.window}")
        lines.append(f"pair_depth {policy.pair_depth}")
        lines.append(f"feat_dim {policy.feat_dim}")
        lines.append(f"value_bias {_fmt17(policy.value_bias)}")
        lines.append("value " + " ".join(_fmt17(v) for v in policy.value))
        for row in policy.theta:
            lines.append("theta " + " ".join(_fmt17(v) for v in row))
    else:
        raise TypeError(f"cannot checkpoint {type(policy).__name__}")
    return "\n".join(lines) + "\n"


class CheckpointError(ValueError):
    pass


def parse_policy(text: str):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("cacheguess-policy v"):
        raise CheckpointError("line 1: missing policy header")
    version = int(lines[0].split("v")[-1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = lines[1].split()[1]
    nA = int(lines[2].split()[1])
    if kind == "TABULAR":
        round_local = bool(int(lines[3].split()[1]))
        gi = tuple(int(x) for x in lines[4].split()[1:])
        eps = float(lines[5].split()[1])
        kw = lines[6].split()[1]
        n = int(lines[7].split()[1])
        pol = TabularPolicy(nA, round_local, gi, eps, None if kw == "none" else int(kw))
        for ln in lines[8:8 + n]:
            k, vals = ln.split("\t")
            pol.table[str_to_key(k)] = np.array([float(v) for v in vals.split()])
        return pol
    if kind == "LINEAR_SOFTMAX":
        window = int(lines[3].split()[1])
        pol = LinearSoftmaxPolicy(nA, window, pair_depth=int(lines[4].split()[1]))
        dim = int(lines[5].split()[1])
        if dim != pol.feat_dim:
            raise CheckpointError("feature dimension mismatch")
        pol.value_bias = float(lines[6].split()[1])
        pol.value = np.array([float(v) for v in lines[7].split()[1:]])
        rows = [np.array([float(v) for v in ln.split()[1:]]) for ln in lines[8:8 + dim]]
        pol.theta = np.vstack(rows)
        return pol
    raise CheckpointError(f"unknown policy kind {kind!r}")


def load_policy(path):
    with open(path) as fh:
        return parse_policy(fh.read())


def guess_indices(env) -> tuple:
    return tuple(a.index for a in env.actions if a.kind in (ActionKind.GUESS, ActionKind.GUESS_NOACCESS))
