import os

import pytest

from cacheguess.analysis import (early_exit_probe, render_traces, stealthy_streamline, textbook_prime_probe,
                                 tree_from_sequence)
from cacheguess.cli import blob_hash, main, parse_grid, read_curve
from cacheguess.configs import CASE_STUDY_SEQUENCES, case_study_config, detection_config
from cacheguess.env import render_config


def report(d):
    out = {}
    with open(os.path.join(d, "report.txt")) as fh:
        for line in fh:
            k, _, v = line.partition(": ")
            out[k] = v.strip()
    return out


def write(path, text):
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


def test_train_writes_outputs(tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--config", "builtin:toy", "--out", str(out), "--steps", "20000",
                 "--eval-every", "2000"]) == 0
    for f in ("manifest.txt", "policy.ckpt", "curve.csv", "report.txt", "traces.txt", "config.txt"):
        assert (out / f).exists()
    assert float(report(out)["final_accuracy"]) == 1.0
    curve = read_curve(out / "curve.csv")
    assert curve and all(len(r) == 4 for r in curve)
    man = (out / "manifest.txt").read_text()
    assert "command: train" in man and "seed: 0" in man


def test_train_config5_tabular(tmp_path):
    out = tmp_path / "c5"
    assert main(["train", "--config", "builtin:golden-5", "--out", str(out), "--seed", "1",
                 "--eval-every", "10000"]) == 0
    assert float(report(out)["final_accuracy"]) >= 0.95


def test_train_same_seed_same_curve(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        main(["train", "--config", "builtin:golden-1", "--out", str(d), "--steps", "20000",
              "--eval-every", "5000", "--seed", "3"])
        outs.append((d / "curve.csv").read_text())
    assert outs[0] == outs[1]


def test_malformed_config_names_key(tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", "num_ways: 1\nwindow_sz: 4\n")
    rc = main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc != 0
    assert "window_sz" in capsys.readouterr().err


def test_config_file_accepted(tmp_path):
    cfg = write(tmp_path / "c.cfg", render_config(case_study_config("lru")))
    assert main(["search", "--config", cfg, "--max-len", "6", "--out", str(tmp_path / "s")]) == 0
    assert int(report(tmp_path / "s")["found"]) >= 1


def test_search_toy(tmp_path):
    out = tmp_path / "s"
    assert main(["search", "--config", "builtin:toy", "--max-len", "3", "--out", str(out)]) == 0
    lines = (out / "sequences.txt").read_text().splitlines()
    assert len(lines) >= 1
    assert (out / "attack_0.txt").exists()


def test_search_refusal(tmp_path, capsys):
    rc = main(["search", "--config", "builtin:golden-12", "--max-len", "17", "--out", str(tmp_path / "s")])
    assert rc != 0
    assert "2.05e+07" in capsys.readouterr().err


def test_search_max_len_zero(tmp_path):
    out = tmp_path / "s"
    assert main(["search", "--config", "builtin:toy", "--max-len", "0", "--out", str(out)]) == 0
    assert (out / "sequences.txt").read_text() == ""


def test_replay_lru_case_study(tmp_path):
    ts = tree_from_sequence(case_study_config("lru"), CASE_STUDY_SEQUENCES["lru"])
    tf = write(tmp_path / "lru.txt", render_traces(ts))
    assert main(["replay", "--config", "builtin:case-lru", "--traces", tf, "--out", str(tmp_path / "r")]) == 0
    assert float(report(tmp_path / "r")["accuracy"]) == 1.0


def test_replay_streamline(tmp_path):
    tf = write(tmp_path / "ss.txt", render_traces(stealthy_streamline(4)))
    assert main(["replay", "--config", "builtin:streamline-4", "--traces", tf, "--out", str(tmp_path / "r")]) == 0
    r = report(tmp_path / "r")
    assert float(r["accuracy"]) == 1.0 and r["victim_misses"] == "0"


def test_replay_corrupted_trace(tmp_path, capsys):
    text = render_traces(textbook_prime_probe(detection_config())).replace("A 5 miss", "A 5 mis", 1)
    tf = write(tmp_path / "bad.txt", text)
    rc = main(["replay", "--config", "builtin:detection", "--traces", tf, "--out", str(tmp_path / "r")])
    err = capsys.readouterr().err
    assert rc != 0 and "line " in err


def test_detect_textbook(tmp_path):
    tf = write(tmp_path / "tb.txt", render_traces(textbook_prime_probe(detection_config())))
    assert main(["detect", "--config", "builtin:detection", "--traces", tf, "--prologue", "4",
                 "--out", str(tmp_path / "d")]) == 0
    r = report(tmp_path / "d")
    assert r["verdict"] == "DETECTED"
    assert float(r["max_autocorrelation"]) == pytest.approx(0.96, abs=0.02)
    # re-priming every round shortens the train but stays detected
    assert main(["detect", "--config", "builtin:detection", "--traces", tf, "--out", str(tmp_path / "e")]) == 0
    assert report(tmp_path / "e")["verdict"] == "DETECTED"


def test_detect_early_exit_not_detected(tmp_path):
    tf = write(tmp_path / "ee.txt", render_traces(early_exit_probe(detection_config())))
    assert main(["detect", "--config", "builtin:detection", "--traces", tf, "--prologue", "4",
                 "--out", str(tmp_path / "d")]) == 0
    assert report(tmp_path / "d")["verdict"] == "NOT DETECTED"


def test_detect_cyclone_and_vmiss(tmp_path):
    tf = write(tmp_path / "tb.txt", render_traces(textbook_prime_probe(detection_config())))
    for det in ("cyclone", "vmiss"):
        d = tmp_path / det
        assert main(["detect", "--config", "builtin:detection", "--traces", tf, "--prologue", "4",
                     "--detector", det, "--out", str(d)]) == 0
        assert report(d)["verdict"] == "DETECTED"
    assert (tmp_path / "cyclone" / "features.csv").read_text().startswith("line_id,interval,count")


def test_detect_empty_trace(tmp_path):
    ts = textbook_prime_probe(detection_config())
    ts.paths = []
    tf = write(tmp_path / "empty.txt", render_traces(ts))
    assert main(["detect", "--config", "builtin:detection", "--traces", tf, "--out", str(tmp_path / "d")]) == 0
    r = report(tmp_path / "d")
    assert r["verdict"] == "NOT DETECTED" and float(r["max_autocorrelation"]) == 0.0


def test_sweep_single_point(tmp_path):
    out = tmp_path / "w"
    assert main(["sweep", "--config", "builtin:toy", "--grid", "step_reward=-10", "--steps", "20000",
                 "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("step_reward,final_accuracy") and len(rows) == 2


def test_sweep_reward_scale(tmp_path):
    out = tmp_path / "w"
    assert main(["sweep", "--config", "builtin:golden-1", "--grid", "reward_scale=0.1,1", "--steps", "300000",
                 "--eval-every", "10000", "--seed", "1", "--out", str(out)]) == 0
    rows = [r.split(",") for r in (out / "sweep.csv").read_text().splitlines()[1:]]
    assert len(rows) == 2 and all(float(r[1]) >= 0.95 for r in rows)


def test_parse_grid():
    g = parse_grid(["a=1,2", "b=3"])
    assert g == [{"a": 1.0, "b": 3.0}, {"a": 2.0, "b": 3.0}]
    assert parse_grid(None) == [{}]


def test_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_unknown_builtin(tmp_path, capsys):
    assert main(["train", "--config", "builtin:nope", "--out", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err
