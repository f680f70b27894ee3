import copy

import numpy as np
import pytest

from cacheguess.agents import (Hyperparams, LinearSoftmaxPolicy, Mode, TabularPolicy, evaluate, exact_accuracy,
                               pg_update, train_pg, train_tabular)
from cacheguess.agents.pg import _RunningStats, _rollout
from cacheguess.agents.policy import CheckpointError, parse_policy, render_policy, run_episode
from cacheguess.analysis import extract_traces, verify
from cacheguess.configs import _cfg, case_study_config, golden_config, toy_config
from cacheguess.env import CacheGuessingGameEnv


def no_channel_config():
    # victim lines 2-3 live in sets the attacker (lines 0-1) never touches
    return _cfg(1, 4, (0, 1), (2, 3))


def test_tabular_toy_fast():
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    pol, rep = train_tabular(env, Hyperparams(max_steps=50_000, eval_every=2000, seed=0))
    assert rep.final_accuracy == 1.0
    assert rep.converged and rep.converged_at <= 50_000
    ts = extract_traces(pol, env)
    assert all("v" in ts.labels(s) for s in ts.per_secret)
    assert verify(ts, n_trials=200) == 1.0


def test_tabular_lru_case_study():
    env = CacheGuessingGameEnv(case_study_config("lru"), seed=1)
    pol, rep = train_tabular(env, Hyperparams(eval_every=10_000, seed=1))
    assert rep.final_accuracy == 1.0
    assert rep.mean_episode_length <= 8


def test_q_values_bounded():
    cfg = golden_config(1)
    env = CacheGuessingGameEnv(cfg, seed=0)
    hp = Hyperparams(max_steps=30_000, stop_on_converge=False, seed=0)
    pol, _ = train_tabular(env, hp)
    r = cfg.rewards
    lo = min(r.wrong_guess_reward, r.length_violation_reward, r.step_reward) / (1 - hp.gamma)
    hi = r.correct_guess_reward / (1 - hp.gamma)
    vals = np.concatenate(list(pol.table.values()))
    assert vals.min() >= lo and vals.max() <= hi


def test_deterministic_replay_is_pure():
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    pol, _ = train_tabular(env, Hyperparams(max_steps=20_000, seed=0))
    runs = []
    for _ in range(2):
        e = CacheGuessingGameEnv(toy_config(), seed=11)
        runs.append([(o.secret, o.num_steps, o.guess) for o in (run_episode(pol, e) for _ in range(30))])
    assert runs[0] == runs[1]


def test_tabular_checkpoint_roundtrip():
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    pol, _ = train_tabular(env, Hyperparams(max_steps=20_000, seed=0))
    text = render_policy(pol)
    back = parse_policy(text)
    assert isinstance(back, TabularPolicy)
    assert render_policy(back) == text
    assert set(back.table) == set(pol.table)
    for k in pol.table:
        assert (back.table[k] == pol.table[k]).all()


def test_linear_checkpoint_roundtrip():
    pol = LinearSoftmaxPolicy(5, 4, init_scale=0.3, rng=np.random.default_rng(0), pair_depth=2)
    back = parse_policy(render_policy(pol))
    assert (back.theta == pol.theta).all()
    assert back.pair_depth == 2


def test_bad_checkpoint():
    with pytest.raises(CheckpointError):
        parse_policy("not a checkpoint\n")


def test_pg_toy():
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    pol, rep = train_pg(env, Hyperparams(max_steps=100_000, eval_every=5000, seed=0))
    assert rep.final_accuracy == 1.0


def test_pg_zero_information():
    env = CacheGuessingGameEnv(no_channel_config(), seed=0)
    pol, rep = train_pg(env, Hyperparams(max_steps=40_000, eval_every=10_000, seed=0,
                                         final_eval_episodes=4000))
    n = 4000
    ci = 3 * (0.25 / n) ** 0.5
    assert rep.final_accuracy <= 0.5 + ci


def test_pg_scale_invariance():
    env = CacheGuessingGameEnv(golden_config(1), seed=0)
    base = LinearSoftmaxPolicy(env.num_actions, env.window, init_scale=0.1, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = [_rollout(base, env, rng)[:4] for _ in range(16)]
    hp = Hyperparams(seed=0)
    out = []
    for c in (1.0, 0.1, 7.0):
        p = copy.deepcopy(base)
        scaled = [(f, a, [c * r for r in rw], pr) for f, a, rw, pr in batch]
        pg_update(p, scaled, hp, _RunningStats())
        out.append(p)
    feats = [f for f, *_ in batch for f in f]
    for p in out[1:]:
        assert np.allclose(p.theta, out[0].theta)
        for f in feats:
            assert int(np.argmax(p.logits(f))) == int(np.argmax(out[0].logits(f)))


def test_deterministic_mode_tie_break():
    pol = TabularPolicy(4)
    pol.mode = Mode.DETERMINISTIC
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    obs = env.reset()
    pol.table[pol.key(obs)] = np.array([1.0, 3.0, 3.0, 0.0])
    assert pol.act(obs) == 1


def test_evaluate_random_guess_policy():
    class Guesser:
        mode = Mode.DETERMINISTIC

        def __init__(self, env):
            self.env, self.rng = env, np.random.default_rng(0)

        def reset(self):
            self.trig = False

        def act(self, obs, rng=None):
            if not obs.records:
                return self.env.trigger_index
            return self.env.trigger_index + 1 + int(self.rng.integers(4))

    env = CacheGuessingGameEnv(golden_config(1), seed=0)
    res = evaluate(Guesser(env), env, 4000)
    assert abs(res.accuracy - 0.25) < 3 * (0.25 * 0.75 / 4000) ** 0.5
    assert res.bit_rate == pytest.approx(0.5)


def test_exact_accuracy_matches_evaluate():
    env = CacheGuessingGameEnv(toy_config(), seed=0)
    pol, _ = train_tabular(env, Hyperparams(max_steps=3000, stop_on_converge=False, seed=1))
    assert exact_accuracy(pol, env) == pytest.approx(evaluate(pol, env, 2000).accuracy)


def test_hyperparams_checks():
    with pytest.raises(ValueError):
        Hyperparams(gamma=1.0)
    with pytest.raises(ValueError):
        Hyperparams(update="sarsa")
