"""Command-line entry point.

Subcommands: gen-env (write environment + episode suites), train,
eval (greedy rollouts + metrics table), dump-attention (per-step
attention CSVs and the progress statistic).

Exit codes: 0 success, 2 configuration error, 3 numeric fault, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import training as tr
from .agent import make_agent
from .autodiff import ContractError, NumericFault
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    load_run_config,
    model_config_for_suite,
    resolve_seed,
    train_config,
    write_resolved,
)
from .envsim import GenerationError, load_suite, make_suite, save_suite
from .model import ModelParams
from .training import Trainer, format_float, greedy_traces, random_walk_success_rate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navformer",
                                description="Instruction-guided graph navigation "
                                            "with a recurrent transformer agent.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-env", help="generate an environment + episode suites")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--nodes", type=int, default=20)
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--val-episodes", type=int, default=50)
    g.add_argument("--mode", choices=["r2r", "reverie"], default="r2r")
    g.add_argument("--out", required=True)
    g.add_argument("--degree", type=float, default=4.0)
    g.add_argument("--extent", type=float, default=20.0)
    g.add_argument("--landmarks", type=int, default=29)
    g.add_argument("--objects-per-node", type=int, default=0)
    g.add_argument("--feat-dim", type=int, default=32)
    g.add_argument("--rep-factor", type=int, default=4)
    g.add_argument("--min-hops", type=int, default=2)
    g.add_argument("--max-hops", type=int, default=4)
    g.add_argument("--min-dist", type=float, default=5.0)
    g.add_argument("--baseline-trials", type=int, default=5)
    g.add_argument("--max-steps", type=int, default=10)

    t = sub.add_parser("train", help="train on a generated suite")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--threads", type=int, default=1,
                   help="upper bound on rollout workers (rollouts are serialized)")

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=["greedy"], default="greedy")
    e.add_argument("--max-steps", type=int, default=10)

    d = sub.add_parser("dump-attention", help="per-step attention CSVs")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--suite", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--max-steps", type=int, default=10)
    d.add_argument("--limit", type=int, default=None,
                   help="dump at most this many episodes")
    return p


# ---------------------------------------------------------------------------


def cmd_gen_env(args) -> int:
    seed = resolve_seed(args.seed, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = make_suite(seed, n_nodes=args.nodes, n_episodes=args.episodes,
                       mode=args.mode, avg_degree=args.degree, extent_m=args.extent,
                       n_landmarks=args.landmarks,
                       objects_per_node=args.objects_per_node,
                       feat_dim=args.feat_dim, rep_factor=args.rep_factor,
                       min_hops=args.min_hops, max_hops=args.max_hops,
                       min_dist=args.min_dist)
    suite.baseline_sr = random_walk_success_rate(
        suite, args.max_steps, args.baseline_trials, seed)
    save_suite(suite, out / "suite_train.json")
    paths = {"train": str(out / "suite_train.json")}
    if args.val_episodes > 0:
        val = make_suite(seed, n_nodes=args.nodes, n_episodes=args.val_episodes,
                         mode=args.mode, avg_degree=args.degree,
                         extent_m=args.extent, n_landmarks=args.landmarks,
                         objects_per_node=args.objects_per_node,
                         feat_dim=args.feat_dim, rep_factor=args.rep_factor,
                         episode_seed=seed + 1, min_hops=args.min_hops,
                         max_hops=args.max_hops, min_dist=args.min_dist)
        val.baseline_sr = random_walk_success_rate(
            val, args.max_steps, args.baseline_trials, seed + 1)
        save_suite(val, out / "suite_val.json")
        paths["val"] = str(out / "suite_val.json")

    mean_len = float(np.mean([suite.env.geodesic(e.start, e.goal)
                              for e in suite.episodes]))
    write_resolved(out, {"command": "gen-env", "seed": seed,
                         "args": {k: v for k, v in vars(args).items()
                                  if k != "command"},
                         "outputs": paths})
    print(f"nodes: {suite.env.n_nodes}")
    print(f"episodes: {len(suite.episodes)} (mode {suite.mode})")
    print(f"mean start-goal geodesic: {mean_len:.2f} m")
    print(f"random-walk baseline SR: {suite.baseline_sr:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    out = Path(args.out)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")

    train_suite = load_suite(cfg["train_suite"])
    if not train_suite.episodes:
        raise ConfigError("training suite has no episodes")
    val_suite = load_suite(cfg["val_suite"]) if cfg.get("val_suite") else None

    tcfg = train_config(cfg.get("train", {}))
    if args.iterations is not None:
        tcfg.iterations = args.iterations
    model_cfg = model_config_for_suite(train_suite, cfg.get("model", {}))

    params = ModelParams(model_cfg, seed=seed)
    trainer = Trainer(params, train_suite, val_suite, tcfg, seed=seed, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, {"command": "train", "seed": seed,
                         "model": model_cfg.to_dict(), "train": tcfg.to_dict(),
                         "train_suite": cfg["train_suite"],
                         "val_suite": cfg.get("val_suite")})

    def writer(p, path):
        save_checkpoint(p, path, extra_meta={"seed": seed, "mode": train_suite.mode})

    summary = tr.train_loop(trainer, out, checkpoint_writer=writer, log=print)
    print(f"best val SPL {summary['best_val_spl']:.4f} "
          f"at iteration {summary['best_iteration']}")
    print(f"final train SR {summary['final_eval']['train_SR']:.4f}")
    return EXIT_OK


def _load_for_eval(args):
    params, extra = load_checkpoint(args.checkpoint)
    suite = load_suite(args.suite)
    if not suite.episodes:
        raise ConfigError(f"suite {args.suite} has no episodes")
    cfg = params.config
    if len(suite.vocab) != cfg.vocab_size or suite.env.feat_dim != cfg.scene_feat_dim \
            or suite.env.dir_dim != cfg.dir_dim:
        raise ConfigError("checkpoint dimensions do not match the suite")
    task = "reverie" if suite.reverie else "r2r"
    if cfg.task != task:
        raise ConfigError(f"checkpoint task {cfg.task!r} vs suite mode {task!r}")
    return params, suite, extra


def cmd_eval(args) -> int:
    params, suite, _ = _load_for_eval(args)
    out = Path(args.out)
    tcfg = tr.TrainConfig(max_steps=args.max_steps)
    agent = make_agent(params)
    traces = greedy_traces(agent, suite, tcfg, collect_attention=True)
    results = [mt.evaluate_trajectory(suite, t) for t in traces]
    agg = mt.aggregate(results, reverie=suite.reverie)

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(mt.table_csv(agg), encoding="utf-8")
    (out / "metrics.txt").write_text(mt.table_text(agg), encoding="utf-8")
    with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
        for trace, result in zip(traces, results):
            fh.write(json.dumps(_trace_record(trace, result), sort_keys=True) + "\n")
    write_resolved(out, {"command": "eval", "checkpoint": args.checkpoint,
                         "suite": args.suite, "mode": args.mode,
                         "max_steps": args.max_steps})
    print(mt.table_text(agg), end="")
    return EXIT_OK


def _trace_record(trace: tr.EpisodeTrace, result: mt.EvalResult) -> dict:
    steps = []
    for i, rec in enumerate(trace.records, start=1):
        steps.append({
            "t": i,
            "candidate_nodes": rec.candidate_nodes,
            "p_a": [round(float(x), 10) for x in rec.p_a_data],
            "action": rec.action,
            "teacher_action": rec.teacher,
            "state_checksum": round(rec.state_checksum, 10),
            "lang_weights": [round(float(x), 10) for x in rec.lang_weights],
            "scene_weights": [round(float(x), 10) for x in rec.scene_weights],
            "obj_weights": ([round(float(x), 10) for x in rec.obj_weights]
                            if rec.obj_weights is not None else None),
        })
    return {"episode_id": trace.episode_id, "trajectory": trace.trajectory,
            "stopped": trace.stopped, "grounded_object": trace.grounded_object,
            "success": result.success, "spl": round(result.spl, 10),
            "steps": steps}


ATTN_COLUMNS = ["step", "token_role", "token_index", "mean_score", "mean_weight"]


def _write_attention_csv(path, trace: tr.EpisodeTrace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTN_COLUMNS)
        for t, rec in enumerate(trace.records, start=1):
            blocks = [("language", rec.lang_scores, rec.lang_weights),
                      ("scene", rec.scene_scores, rec.scene_weights),
                      ("object", rec.obj_scores, rec.obj_weights)]
            for role, scores, weights in blocks:
                if weights is None:
                    continue
                for i, w in enumerate(weights):
                    s = scores[i] if scores is not None else float("nan")
                    writer.writerow([t, role, i, format_float(float(s)),
                                     format_float(float(w))])
            if rec.sel_lang_weights is not None:
                for i, w in enumerate(rec.sel_lang_weights):
                    writer.writerow([t, "sel_language", i, "nan",
                                     format_float(float(w))])


def cmd_dump_attention(args) -> int:
    params, suite, _ = _load_for_eval(args)
    out = Path(args.out)
    tcfg = tr.TrainConfig(max_steps=args.max_steps)
    agent = make_agent(params)
    episodes = suite.episodes[:args.limit] if args.limit else suite.episodes
    traces = greedy_traces(agent, suite, tcfg, collect_attention=True,
                           episodes=episodes)

    out.mkdir(parents=True, exist_ok=True)
    rows_centroid = []
    rows_summary = []
    rhos = []
    for trace in traces:
        _write_attention_csv(out / f"attention_ep{trace.episode_id:04d}.csv", trace)
        stat = mt.attention_progress_stat(trace)
        for i, c in enumerate(stat.centroids, start=1):
            sel = (stat.selected_centroids[i - 1]
                   if i - 1 < len(stat.selected_centroids) else float("nan"))
            rows_centroid.append([trace.episode_id, i, format_float(c),
                                  format_float(sel)])
        rows_summary.append([trace.episode_id,
                             format_float(stat.rho if stat.rho is not None
                                          else float("nan")),
                             format_float(stat.selected_rho
                                          if stat.selected_rho is not None
                                          else float("nan")),
                             len(stat.centroids)])
        if stat.rho is not None:
            rhos.append(stat.rho)

    with open(out / "progress_centroid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "step", "centroid", "selected_centroid"])
        writer.writerows(rows_centroid)
    with open(out / "progress_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "rho", "selected_rho", "n_steps"])
        writer.writerows(rows_summary)
    write_resolved(out, {"command": "dump-attention", "checkpoint": args.checkpoint,
                         "suite": args.suite, "max_steps": args.max_steps,
                         "limit": args.limit})
    mean_rho = float(np.mean(rhos)) if rhos else float("nan")
    print(f"episodes dumped: {len(traces)}")
    print(f"mean progress rank correlation: {mean_rho:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"gen-env": cmd_gen_env, "train": cmd_train, "eval": cmd_eval,
                "dump-attention": cmd_dump_attention}
    try:
        return handlers[args.command](args)
    except (ConfigError, GenerationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())
