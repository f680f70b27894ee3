import math
from fractions import Fraction

import pytest

from cacheguess.agents import SearchRefused, exhaustive_search, expected_sequences_count, random_search
from cacheguess.agents.search import SEARCH_LIMIT, search_space_size
from cacheguess.analysis import classify, verify
from cacheguess.configs import _cfg, case_study_config, golden_config, toy_config
from cacheguess.env import CacheGuessingGameEnv, ConfigError


def seqs(found):
    return [" ".join(l for l, _ in ts.paths[0][1]) for ts in found]


def test_formula_values():
    assert expected_sequences_count(8) == pytest.approx(2.05e7, rel=0.01)
    # 2 * 9**17 / (8!)**2, evaluated exactly
    assert expected_sequences_count(8) == pytest.approx(float(Fraction(2 * 9 ** 17, 40320 ** 2)), rel=1e-12)
    assert expected_sequences_count(1) == 16
    with pytest.raises(ValueError):
        expected_sequences_count(0)


def test_formula_growth():
    for n in range(2, 13):
        assert expected_sequences_count(n + 1) / expected_sequences_count(n) >= math.e


def test_toy_search():
    env = CacheGuessingGameEnv(toy_config())
    found = exhaustive_search(env, 3)
    assert "v 1 g1" in seqs(found) or "v 1 g0" in seqs(found)
    assert seqs(found)[0] == "v 0 g0"
    for ts in found:
        assert verify(ts, n_trials=1000) == 1.0


def test_config1_prime_probe():
    env = CacheGuessingGameEnv(golden_config(1))
    found = exhaustive_search(env, 8)
    assert len(found) == 12
    assert seqs(found)[0] == "4 5 6 v 4 5 6 g0"
    ts = found[0]
    assert verify(ts, n_trials=1000) == 1.0
    assert classify(ts) == "PRIME_PROBE"


def test_config11_flush_reload():
    env = CacheGuessingGameEnv(golden_config(11))
    found = exhaustive_search(env, 4)
    assert seqs(found)[0] == "f0 v 0 g0"


def test_guard_refuses_eight_way():
    env = CacheGuessingGameEnv(golden_config(12))
    with pytest.raises(SearchRefused, match=r"M\(8\) = 2\.05e\+07"):
        exhaustive_search(env, 17)
    assert search_space_size(17, 17) > SEARCH_LIMIT


def test_max_len_small_is_empty():
    env = CacheGuessingGameEnv(toy_config())
    assert exhaustive_search(env, 0) == []
    assert exhaustive_search(env, 1) == []


def test_no_channel_empty():
    env = CacheGuessingGameEnv(_cfg(1, 4, (0, 1), (2, 3)))
    assert exhaustive_search(env, 5) == []


def test_random_replacement_rejected():
    env = CacheGuessingGameEnv(case_study_config("random"))
    with pytest.raises(ConfigError):
        exhaustive_search(env, 4)


def test_random_search_subset():
    env = CacheGuessingGameEnv(toy_config())
    found = set(seqs(random_search(env, 3, n_samples=500, seed=0)))
    assert found and found <= set(seqs(exhaustive_search(env, 3)))


def test_dedupe_keeps_shortest():
    env = CacheGuessingGameEnv(toy_config())
    a = seqs(exhaustive_search(env, 4, dedupe=True))
    b = seqs(exhaustive_search(env, 4, dedupe=False))
    assert set(a) <= set(b)
    assert min(map(len, a)) == min(map(len, b))
