"""Epsilon-greedy Q-learning over observation-history keys."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .policy import (Mode, TabularPolicy, cache_is_deterministic, evaluate, exact_accuracy,
                     guess_indices)


@dataclass
class Hyperparams:
    gamma: float = 0.99
    lr: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5      # fraction of max_steps over which epsilon decays
    max_steps: int = 2_000_000
    eval_every: int = 20_000
    eval_episodes: int = 200
    final_eval_episodes: int = 2000
    target_accuracy: float = 0.95
    stop_on_converge: bool = True
    seed: int = 0
    round_local: bool = False        # tabular: key on records since the last guess
    key_window: Optional[int] = None  # tabular: key on the last K records only
    update: str = "q"                # tabular: "q" (one-step max backup) or "mc" (discounted return)
    keep_best: bool = False          # restore the best snapshot (accuracy - detection rate) at the end
    q_init: float = 0.0              # tabular: value of unseen state-actions
    lr_floor: Optional[float] = None  # tabular: if set, step size max(lr_floor, 1/visits) instead of lr
    # policy gradient
    batch_size: int = 32
    entropy_bonus: float = 0.01
    clip: Optional[float] = None     # e.g. 0.2 enables the clipped surrogate
    pg_epochs: int = 4
    value_lr: float = 0.05
    pg_lr: float = 0.01
    pair_depth: int = 0              # policy gradient: joint (action, latency) features over the last K records

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.update not in ("q", "mc"):
            raise ValueError(f"unknown update rule {self.update!r}")


@dataclass
class TrainReport:
    steps_taken: int
    episodes: int
    final_accuracy: float
    mean_episode_length: float
    reward_curve: list = field(default_factory=list)   # (step, mean_reward, accuracy, episode_len)
    wall_time_s: float = 0.0
    converged: bool = False
    converged_at: Optional[int] = None
    bit_rate: float = 0.0
    detection_rate: float = 0.0


def epsilon_at(step, hp: Hyperparams):
    horizon = max(1, int(hp.max_steps * hp.eps_decay_frac))
    if step >= horizon:
        return hp.eps_end
    return hp.eps_start + (hp.eps_end - hp.eps_start) * step / horizon


def _quick_eval(policy, env, hp):
    """(accuracy, detection rate) for the periodic evaluation."""
    if cache_is_deterministic(env.cfg) and env.cfg.multi_round_budget is None and env.episode_detector is None:
        return exact_accuracy(policy, env), 0.0
    res = evaluate(policy, env, hp.eval_episodes)
    return res.accuracy, res.detection_rate


def train_tabular(env, hp: Hyperparams = None, policy: TabularPolicy = None, eps_offset=0):
    """Q-learning with backward (end-of-episode) updates.

    Unseen state-action values start at 0, which is optimistic relative to the
    negative step and wrong-guess rewards, so untried actions get explored.
    ``policy`` continues training an existing table; ``eps_offset`` shifts the
    exploration schedule (useful when resuming).
    """
    hp = hp or Hyperparams()
    t0 = time.time()
    rnd = random.Random(hp.seed)
    nA = env.num_actions
    if policy is None:
        policy = TabularPolicy(nA, hp.round_local, guess_indices(env), key_window=hp.key_window)
    table = policy.table
    gamma, alpha = hp.gamma, hp.lr
    key_of = policy.key
    steps = episodes = 0
    curve = []
    recent_r, recent_len = [], []
    acc = 0.0
    converged_at = None
    next_eval = hp.eval_every
    zeros = np.zeros
    mc = hp.update == "mc"
    counts = {} if hp.lr_floor is not None else None
    best, best_acc = None, -1.0

    while steps < hp.max_steps:
        obs = env.reset()
        key = key_of(obs)
        traj = []
        done = False
        ep_r = 0.0
        while not done:
            q = table.get(key)
            if q is None:
                q = zeros(nA) + hp.q_init
                table[key] = q
            eps = epsilon_at(steps + eps_offset, hp)
            if rnd.random() < eps:
                a = rnd.randrange(nA)
            else:
                a = int(q.argmax())
            obs, r, done, _ = env.step(a)
            steps += 1
            ep_r += r
            nkey = key_of(obs)
            traj.append((q, a, r, nkey, key))
            key = nkey
        # backward sweep so that the terminal reward reaches early steps at once
        ret = 0.0
        for i in range(len(traj) - 1, -1, -1):
            q, a, r, nkey, k = traj[i]
            ret = r + gamma * ret
            if mc or i == len(traj) - 1:
                target = ret
            else:
                nq = table.get(nkey)
                target = r + gamma * (nq.max() if nq is not None else hp.q_init)
            if counts is not None:
                c = counts.get(k)
                if c is None:
                    c = counts[k] = zeros(nA)
                c[a] += 1
                alpha = max(hp.lr_floor, 1.0 / c[a])
            q[a] += alpha * (target - q[a])
        episodes += 1
        recent_r.append(ep_r)
        recent_len.append(len(traj))
        if steps >= next_eval:
            next_eval += hp.eval_every
            acc, det = _quick_eval(policy, env, hp)
            curve.append((steps, float(np.mean(recent_r)), acc, float(np.mean(recent_len))))
            recent_r, recent_len = [], []
            # snapshots are ranked by accuracy minus detection rate
            if hp.keep_best and acc - det > best_acc:
                best_acc = acc - det
                best = {k: v.copy() for k, v in table.items()}
            if acc >= hp.target_accuracy and converged_at is None:
                converged_at = steps
                if hp.stop_on_converge:
                    break

    if best is not None:
        # keep the live dict object (key_of closes over the policy, not the table)
        table.clear()
        table.update(best)
    final = evaluate(policy, env, hp.final_eval_episodes)
    if recent_r:
        curve.append((steps, float(np.mean(recent_r)), final.accuracy, float(np.mean(recent_len))))
    report = TrainReport(steps, episodes, final.accuracy, final.mean_len, curve, time.time() - t0,
                         final.accuracy >= hp.target_accuracy, converged_at, final.bit_rate,
                         final.detection_rate)
    return policy, report
