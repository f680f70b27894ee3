import pytest

from cacheguess.agents import Hyperparams, TabularPolicy, train_tabular
from cacheguess.analysis import (ConfigMismatch, NotDistinguishing, TraceError, classify, extract_traces,
                                 parse_traces, render_traces, stealthy_streamline, textbook_prime_probe,
                                 tree_from_sequence, verify)
from cacheguess.cache import Latency
from cacheguess.configs import (CASE_STUDY_SEQUENCES, GOLDEN_CATEGORIES, GOLDEN_SEQUENCES, INCOMPATIBLE_GOLDEN,
                                PL_SEQUENCE, TOY_SEQUENCE, case_study_config, detection_config, golden_config,
                                pl_config, toy_config)
from cacheguess.env import NOACCESS, CacheGuessingGameEnv, ConfigError

GOLDEN = [n for n in range(1, 15) if n not in INCOMPATIBLE_GOLDEN]


@pytest.mark.parametrize("n", GOLDEN)
def test_golden_table_replay(n):
    ts = tree_from_sequence(golden_config(n), GOLDEN_SEQUENCES[n])
    assert verify(ts, n_trials=1000) == 1.0
    assert classify(ts) in GOLDEN_CATEGORIES[n]


def test_config2_incompatible():
    with pytest.raises(NotDistinguishing):
        tree_from_sequence(golden_config(2), GOLDEN_SEQUENCES[2])


@pytest.mark.parametrize("rep", ["lru", "plru", "rrip"])
def test_case_study_replay(rep):
    ts = tree_from_sequence(case_study_config(rep), CASE_STUDY_SEQUENCES[rep])
    assert verify(ts, n_trials=1000) == 1.0


def test_lru_case_study_category():
    ts = tree_from_sequence(case_study_config("lru"), CASE_STUDY_SEQUENCES["lru"])
    assert classify(ts) == "LRU_STATE"


def test_pl_cache_sequence():
    ts = tree_from_sequence(pl_config(), PL_SEQUENCE)
    assert verify(ts, n_trials=1000) == 1.0
    assert classify(ts) == "LRU_STATE"
    obs = {s: tuple(lat for _, lat in p) for s, p in ts.paths}
    assert obs[0] != obs[NOACCESS]


def test_toy_traces():
    ts = tree_from_sequence(toy_config(), TOY_SEQUENCE)
    paths = dict(ts.paths)
    assert paths[1] == [("v", Latency.MISS), ("1", Latency.HIT), ("g1", Latency.NA)]
    assert paths[0] == [("v", Latency.HIT), ("1", Latency.MISS), ("g0", Latency.NA)]
    assert verify(ts, n_trials=1000) == 1.0


def test_common_prefix_until_divergence():
    ts = tree_from_sequence(golden_config(1), GOLDEN_SEQUENCES[1])
    ts.tree()  # raises if two paths disagree after an identical prefix
    assert all(p[-1][0].startswith("g") for _, p in ts.paths)


def test_trace_roundtrip():
    ts = tree_from_sequence(case_study_config("rrip"), CASE_STUDY_SEQUENCES["rrip"])
    verify(ts, n_trials=10)
    ts.category = classify(ts)
    back = parse_traces(render_traces(ts))
    assert back.paths == ts.paths
    assert back.config == ts.config
    assert back.category == ts.category and back.verified_accuracy == ts.verified_accuracy
    assert render_traces(back) == render_traces(ts)


def test_parse_error_has_line_number():
    ts = tree_from_sequence(toy_config(), TOY_SEQUENCE)
    lines = render_traces(ts).splitlines()
    i = next(k for k, l in enumerate(lines) if l.startswith("A "))
    lines[i] = "A 1 sometimes"
    with pytest.raises(TraceError, match=f"line {i + 1}"):
        parse_traces("\n".join(lines))


def test_verify_config_mismatch():
    ts = tree_from_sequence(golden_config(11), GOLDEN_SEQUENCES[11])
    env = CacheGuessingGameEnv(golden_config(12))   # no flush actions
    with pytest.raises(ConfigMismatch):
        verify(ts, env, 10)


def test_extract_refuses_weak_policy():
    env = CacheGuessingGameEnv(golden_config(1))
    with pytest.raises(TraceError):
        extract_traces(TabularPolicy(env.num_actions), env)


def test_textbook_prime_probe():
    ts = textbook_prime_probe(detection_config())
    assert ts.labels(0)[:9] == ["4", "5", "6", "7", "v", "4", "5", "6", "7"]
    assert verify(ts, n_trials=1000) == 1.0
    assert classify(ts) == "PRIME_PROBE"


def test_textbook_noaccess_guess():
    cfg = golden_config(1).replace(victim_no_access_enable=True)
    ts = textbook_prime_probe(cfg)
    path = ts.per_secret[NOACCESS]
    assert all(lat == Latency.HIT for l, lat in path[5:9])
    assert path[-1][0] == "gE"


def test_textbook_needs_disjoint_ranges():
    with pytest.raises(ConfigError):
        textbook_prime_probe(golden_config(4))


@pytest.mark.parametrize("ways", [4, 8, 12])
def test_stealthy_streamline(ways):
    ts = stealthy_streamline(ways)
    assert verify(ts, n_trials=1000) == 1.0
    assert ts.victim_miss_count == 0
    sigs = {tuple(lat for l, lat in p if not l.startswith("g")) for _, p in ts.paths}
    assert len(sigs) == 4


def test_stealthy_streamline_rejects():
    with pytest.raises(ConfigError):
        stealthy_streamline(6)
    with pytest.raises(ConfigError):
        stealthy_streamline(4, "plru")


def test_extracted_traces_from_learned_policy():
    env = CacheGuessingGameEnv(case_study_config("lru"), seed=1)
    pol, rep = train_tabular(env, Hyperparams(eval_every=10_000, seed=1))
    ts = extract_traces(pol, env)
    assert verify(ts, n_trials=1000) == 1.0
    assert all("v" in ts.labels(s) for s in ts.per_secret)
    assert classify(ts) in {"LRU_STATE", "MIXED", "EVICT_RELOAD", "PRIME_PROBE", "FLUSH_RELOAD", "UNKNOWN"}
