"""Batch front-end: ``cacheguess train|search|replay|detect|sweep``.

Every command writes a manifest.txt into its output directory next to its
results, so a rerun with the same manifest can be checked for identical
outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import os
import sys
from multiprocessing import Pool

from . import configs
from .env import CacheGuessingGameEnv, ConfigError, load_config, render_config
from .agents import Hyperparams, SearchRefused, exhaustive_search, save_policy, train_pg, train_tabular
from .agents.policy import run_episode
from .analysis import (TraceError, classify, extract_traces, parse_traces, render_traces, tree_policy,
                       verify)
from .detectors import CCHunter, VictimMissDetector, autocorrelogram, features_csv, max_autocorrelation

BUILTINS = {
    "toy": configs.toy_config,
    "detection": configs.detection_config,
    "remap": configs.remap_config,
    "pl": configs.pl_config,
}
CURVE_HEADER = ["step", "reward", "accuracy", "episode_len"]


class CliError(Exception):
    pass


def builtin_config(name):
    """Named configs: toy, detection, remap, pl, golden-N, case-<rep>, streamline-<ways>."""
    if name in BUILTINS:
        return BUILTINS[name]()
    kind, _, arg = name.partition("-")
    if kind == "golden" and arg.isdigit():
        return configs.golden_config(int(arg))
    if kind == "case" and arg:
        return configs.case_study_config(arg)
    if kind == "streamline" and arg.isdigit():
        return configs.streamline_config(int(arg))
    raise CliError(f"unknown config {name!r}")


def resolve_config(spec):
    if spec is None:
        raise CliError("--config is required")
    if os.path.exists(spec):
        return load_config(spec)
    if spec.startswith("builtin:"):
        return builtin_config(spec[len("builtin:"):])
    raise CliError(f"config file {spec!r} not found (use builtin:<name> for a named config)")


def blob_hash(text: str) -> str:
    """Content hash in the same form git uses for blobs."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out, command, args, cfg):
    os.makedirs(out, exist_ok=True)
    rows = [("command", command), ("config", args.config), ("seed", args.seed), ("out", out),
            ("config_hash", blob_hash(render_config(cfg))), ("workers", args.workers)]
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        for k, v in rows:
            fh.write(f"{k}: {v}\n")
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(render_config(cfg))


def write_report(path, rows):
    with open(path, "w") as fh:
        for k, v in rows:
            fh.write(f"{k}: {v}\n")


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for step, reward, acc, ln in curve:
            w.writerow([step, repr(float(reward)), repr(float(acc)), repr(float(ln))])


def read_curve(path):
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CURVE_HEADER:
            raise CliError(f"{path}: unexpected header {header}")
        return [(int(a), float(b), float(c), float(d)) for a, b, c, d in r]


def hyperparams(args, **over):
    kw = dict(max_steps=args.steps, seed=args.seed, round_local=args.round_local,
              key_window=args.key_window, update=args.update, eval_every=args.eval_every)
    if args.lr_floor is not None:
        kw["lr_floor"] = args.lr_floor
    kw.update(over)
    return Hyperparams(**kw)


def train_one(cfg, agent, hp):
    env = CacheGuessingGameEnv(cfg, seed=hp.seed)
    if agent == "pg":
        return (env,) + train_pg(env, hp)
    return (env,) + train_tabular(env, hp)


# -- commands ----------------------------------------------------------------------
def cmd_train(args, cfg):
    hp = hyperparams(args)
    env, policy, rep = train_one(cfg, args.agent, hp)
    out = args.out
    save_policy(policy, os.path.join(out, "policy.ckpt"))
    write_curve(os.path.join(out, "curve.csv"), rep.reward_curve)
    rows = [("agent", args.agent), ("steps_taken", rep.steps_taken), ("episodes", rep.episodes),
            ("final_accuracy", rep.final_accuracy), ("mean_episode_length", rep.mean_episode_length),
            ("converged", rep.converged), ("converged_at", rep.converged_at),
            ("bit_rate", rep.bit_rate), ("detection_rate", rep.detection_rate)]
    if cfg.multi_round_budget is None:
        try:
            ts = extract_traces(policy, env, accuracy=rep.final_accuracy)
            ts.category = classify(ts)
            verify(ts, n_trials=args.trials, seed=args.seed)
            with open(os.path.join(out, "traces.txt"), "w") as fh:
                fh.write(render_traces(ts))
            rows.append(("category", ts.category))
        except TraceError as e:
            rows.append(("traces", f"not extracted ({e})"))
    write_report(os.path.join(out, "report.txt"), rows)
    print(f"final_accuracy {rep.final_accuracy:.4f} after {rep.steps_taken} steps")
    return 0


def cmd_search(args, cfg):
    env = CacheGuessingGameEnv(cfg, seed=args.seed)
    try:
        found = exhaustive_search(env, args.max_len)
    except SearchRefused as e:
        print(f"search refused: {e}", file=sys.stderr)
        write_report(os.path.join(args.out, "report.txt"), [("refused", e)])
        return 3
    with open(os.path.join(args.out, "sequences.txt"), "w") as fh:
        for i, ts in enumerate(found):
            ts.category = classify(ts)
            seq = " ".join(lab for lab, _ in ts.paths[0][1])
            fh.write(f"{i} {ts.category} {seq}\n")
            with open(os.path.join(args.out, f"attack_{i}.txt"), "w") as tf:
                tf.write(render_traces(ts))
    write_report(os.path.join(args.out, "report.txt"), [("max_len", args.max_len), ("found", len(found))])
    print(f"{len(found)} sequences")
    return 0


def _load_traces(path):
    with open(path) as fh:
        return parse_traces(fh.read())


def cmd_replay(args, cfg):
    ts = _load_traces(args.traces)
    env = CacheGuessingGameEnv(cfg.replace(multi_round_budget=None), seed=args.seed)
    acc = verify(ts, env, args.trials, seed=args.seed)
    rows = [("trials", args.trials), ("accuracy", acc), ("victim_misses", ts.victim_miss_count),
            ("category", classify(ts, cfg))]
    write_report(os.path.join(args.out, "report.txt"), rows)
    print(f"accuracy {acc:.4f} victim_misses {ts.victim_miss_count}")
    return 0


def detect_traces(ts, cfg, detector="cchunter", budget=160, seed=0, cyclone=None, prologue=0):
    """Play ``ts`` round after round for ``budget`` steps and run a detector
    on the episode. The first ``prologue`` steps of the trace (e.g. a
    prime) run once per episode instead of once per round. Returns
    (detected, metrics dict)."""
    metrics = {"max_autocorrelation": 0.0, "victim_misses": 0, "score": 0.0, "steps": 0}
    if not ts.paths:
        return False, metrics
    mcfg = cfg.replace(multi_round_budget=cfg.multi_round_budget or budget)
    env = CacheGuessingGameEnv(mcfg, seed=seed)
    env.track_fills = True
    head = [lab for lab, _ in ts.paths[0][1][:prologue]]
    if any([lab for lab, _ in p[:prologue]] != head for _, p in ts.paths):
        raise CliError(f"the first {prologue} steps differ between paths; they cannot form a prologue")
    policy = tree_policy(ts, env, skip=prologue, prologue=head, mask_pretrigger=True)
    out = run_episode(policy, env)
    metrics["steps"] = out.num_steps
    metrics["max_autocorrelation"] = max_autocorrelation(out.event_train)
    metrics["autocorrelogram"] = autocorrelogram(out.event_train)
    metrics["victim_misses"] = out.victim_misses
    if detector == "cchunter":
        fired = CCHunter()(env, out)
        metrics["score"] = metrics["max_autocorrelation"]
    elif detector == "vmiss":
        fired = VictimMissDetector()(env, out)
        metrics["score"] = float(out.victim_misses)
    elif detector == "cyclone":
        if cyclone is None:
            from .workloads import train_cyclone
            cyclone = train_cyclone(mcfg, seed=seed)[0]
        feats = cyclone.features(env)
        metrics["features"] = feats
        metrics["score"] = cyclone.model.decision(feats)
        fired = cyclone(env, out)
    else:
        raise CliError(f"unknown detector {detector!r}")
    return bool(fired), metrics


def cmd_detect(args, cfg):
    ts = _load_traces(args.traces)
    fired, m = detect_traces(ts, cfg, args.detector, args.budget, args.seed, prologue=args.prologue)
    verdict = "DETECTED" if fired else "NOT DETECTED"
    rows = [("detector", args.detector), ("verdict", verdict), ("steps", m["steps"]),
            ("max_autocorrelation", m["max_autocorrelation"]), ("victim_misses", m["victim_misses"]),
            ("score", m["score"])]
    write_report(os.path.join(args.out, "report.txt"), rows)
    if "features" in m:
        with open(os.path.join(args.out, "features.csv"), "w") as fh:
            fh.write(features_csv(m["features"]))
    print(f"{verdict} max_C {m['max_autocorrelation']:.4f} score {m['score']:.4f}")
    return 0


def parse_grid(items):
    """``name=v1,v2`` strings -> list of dicts (cartesian product)."""
    axes = []
    for item in items or []:
        name, eq, vals = item.partition("=")
        if not eq or not vals:
            raise CliError(f"bad grid entry {item!r}; expected name=v1,v2")
        axes.append([(name.strip(), float(v)) for v in vals.split(",")])
    return [dict(p) for p in itertools.product(*axes)] if axes else [{}]


SWEEP_FIELDS = ["final_accuracy", "mean_episode_length", "steps_taken", "converged"]


def _apply_point(cfg, point):
    point = dict(point)
    scale = point.pop("reward_scale", None)
    if scale is not None:
        cfg = cfg.replace(rewards=cfg.rewards.scaled(scale))
    try:
        return cfg.replace(**point) if point else cfg
    except TypeError as e:
        raise CliError(f"bad sweep parameter: {e}") from None


def _sweep_job(job):
    cfg, agent, hp = job
    _, _, rep = train_one(cfg, agent, hp)
    return rep


def cmd_sweep(args, cfg):
    grid = parse_grid(args.grid)
    jobs = [(_apply_point(cfg, p), args.agent, hyperparams(args)) for p in grid]
    if args.workers > 1:
        with Pool(args.workers) as pool:
            reps = pool.map(_sweep_job, jobs)
    else:
        reps = [_sweep_job(j) for j in jobs]
    names = sorted({k for p in grid for k in p})
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + SWEEP_FIELDS)
        for p, rep in zip(grid, reps):
            w.writerow([p[n] for n in names] + [getattr(rep, f) for f in SWEEP_FIELDS])
            print(" ".join(f"{n}={p[n]}" for n in names), f"acc={rep.final_accuracy:.4f}",
                  f"len={rep.mean_episode_length:.2f}")
    return 0


COMMANDS = {"train": cmd_train, "search": cmd_search, "replay": cmd_replay, "detect": cmd_detect,
            "sweep": cmd_sweep}


def build_parser():
    p = argparse.ArgumentParser(prog="cacheguess", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="config file, or builtin:<name>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--agent", choices=["tabular", "pg"], default="tabular")
    p.add_argument("--detector", choices=["cchunter", "cyclone", "vmiss"], default="cchunter")
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--traces", help="trace file for replay/detect")
    p.add_argument("--budget", type=int, default=160, help="detect: steps per episode")
    p.add_argument("--prologue", type=int, default=0, help="detect: leading trace steps run once per episode")
    p.add_argument("--steps", type=int, default=2_000_000, help="training step limit")
    p.add_argument("--eval-every", type=int, default=20_000)
    p.add_argument("--round-local", action="store_true")
    p.add_argument("--key-window", type=int)
    p.add_argument("--update", choices=["q", "mc"], default="q")
    p.add_argument("--lr-floor", type=float)
    p.add_argument("--grid", action="append", help="sweep axis name=v1,v2 (repeatable)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config)
        if args.command in ("replay", "detect") and not args.traces:
            raise CliError("--traces is required")
        if args.max_len < 0:
            raise CliError("--max-len must be >= 0")
        write_manifest(args.out, args.command, args, cfg)
        return COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, TraceError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
