"""REINFORCE with a learned baseline on a linear softmax policy.

Returns are standardized with running statistics before the baseline sees
them, and advantages are normalized per batch, so multiplying every reward
by a positive constant leaves the updates unchanged.
"""
from __future__ import annotations

import time

import numpy as np

from .policy import LinearSoftmaxPolicy, Mode, cache_is_deterministic, evaluate, exact_accuracy
from .tabular import Hyperparams, TrainReport


class _RunningStats:
    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, xs):
        for x in xs:
            self.n += 1
            d = x - self.mean
            self.mean += d / self.n
            self.m2 += d * (x - self.mean)

    @property
    def std(self):
        if self.n < 2:
            return 1.0
        sd = (self.m2 / (self.n - 1)) ** 0.5
        return sd if sd > 1e-12 else 1.0


def _rollout(policy, env, rng):
    obs = env.reset()
    feats, acts, rews, probs = [], [], [], []
    done = False
    while not done:
        idx = policy.features(obs)
        p = policy.probs(idx)
        a = int(rng.choice(policy.num_actions, p=p))
        obs, r, done, out = env.step(a)
        feats.append(idx)
        acts.append(a)
        rews.append(r)
        probs.append(p[a])
    return feats, acts, rews, probs, out


def _returns(rews, gamma):
    g = 0.0
    out = [0.0] * len(rews)
    for t in range(len(rews) - 1, -1, -1):
        g = rews[t] + gamma * g
        out[t] = g
    return out


def _adam_step(policy, grad, lr, b1=0.9, b2=0.999, eps=1e-8):
    st = getattr(policy, "_adam", None)
    if st is None or st[0].shape != grad.shape:
        st = [np.zeros_like(grad), np.zeros_like(grad), 0]
        policy._adam = st
    m, v, t = st
    t += 1
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    st[2] = t
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    policy.theta += lr * mhat / (np.sqrt(vhat) + eps)


def pg_update(policy: LinearSoftmaxPolicy, batch, hp: Hyperparams, stats: _RunningStats = None):
    """One learner step on a batch of (features, actions, rewards, old_probs)
    episodes. Returns the per-step advantages used (after normalization)."""
    if stats is None:
        stats = _RunningStats()
    steps = []
    all_g = []
    for feats, acts, rews, oldp in batch:
        gs = _returns(rews, hp.gamma)
        all_g.extend(gs)
        steps.extend(zip(feats, acts, gs, oldp))
    stats.update(all_g)
    mu, sd = stats.mean, stats.std
    z = np.array([(g - mu) / sd for g in all_g])
    base = np.array([policy.value[f].sum() + policy.value_bias for f, _, _, _ in steps])
    adv = z - base
    adv = (adv - adv.mean()) / (adv.std() + 1e-8) if len(adv) > 1 else adv
    epochs = hp.pg_epochs if hp.clip is not None else 1
    for _ in range(epochs):
        grad = np.zeros_like(policy.theta)
        for (f, a, _, old), A in zip(steps, adv):
            p = policy.probs(f)
            g = -p
            g[a] += 1.0
            if hp.clip is not None:
                ratio = p[a] / max(old, 1e-12)
                if (A > 0 and ratio > 1 + hp.clip) or (A < 0 and ratio < 1 - hp.clip):
                    g = np.zeros_like(p)
                else:
                    g = g * ratio
            g = A * g
            if hp.entropy_bonus:
                logp = np.log(p + 1e-12)
                H = -(p * logp).sum()
                g = g - hp.entropy_bonus * p * (logp + H)
            grad[f] += g
        _adam_step(policy, grad / len(steps), hp.pg_lr)
    # baseline regression toward the standardized return
    for (f, _, _, _), zt in zip(steps, z):
        err = zt - (policy.value[f].sum() + policy.value_bias)
        step = hp.value_lr * err / (len(f) + 1)
        policy.value[f] += step
        policy.value_bias += step
    return adv


def train_pg(env, hp: Hyperparams = None, policy: LinearSoftmaxPolicy = None):
    hp = hp or Hyperparams()
    t0 = time.time()
    rng = np.random.default_rng(hp.seed)
    if policy is None:
        policy = LinearSoftmaxPolicy(env.num_actions, env.window, pair_depth=hp.pair_depth)
    stats = _RunningStats()
    steps = episodes = 0
    curve = []
    recent_r, recent_len = [], []
    converged_at = None
    next_eval = hp.eval_every
    exact = cache_is_deterministic(env.cfg) and env.cfg.multi_round_budget is None
    while steps < hp.max_steps:
        batch = []
        for _ in range(hp.batch_size):
            feats, acts, rews, probs, _ = _rollout(policy, env, rng)
            batch.append((feats, acts, rews, probs))
            steps += len(acts)
            episodes += 1
            recent_r.append(sum(rews))
            recent_len.append(len(acts))
        pg_update(policy, batch, hp, stats)
        if steps >= next_eval:
            next_eval = steps + hp.eval_every
            acc = exact_accuracy(policy, env) if exact else evaluate(policy, env, hp.eval_episodes).accuracy
            curve.append((steps, float(np.mean(recent_r)), acc, float(np.mean(recent_len))))
            recent_r, recent_len = [], []
            if acc >= hp.target_accuracy and converged_at is None:
                converged_at = steps
                if hp.stop_on_converge:
                    break
    policy.mode = Mode.DETERMINISTIC
    final = evaluate(policy, env, hp.final_eval_episodes)
    if recent_r:
        curve.append((steps, float(np.mean(recent_r)), final.accuracy, float(np.mean(recent_len))))
    report = TrainReport(steps, episodes, final.accuracy, final.mean_len, curve, time.time() - t0,
                         final.accuracy >= hp.target_accuracy, converged_at, final.bit_rate,
                         final.detection_rate)
    return policy, report
