"""Command line interface: gen-data, train, eval, serve, bench."""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time

import numpy as np


def _load_config_file(path: str):
    from .net import ModelConfig
    from .train import TrainConfig
    with open(path) as f:
        raw = json.load(f)
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    return model_cfg, train_cfg


def cmd_gen_data(args):
    from .mazeworld import generate_dataset
    manifest = generate_dataset(args.out, seed=args.seed, num_mazes=args.mazes,
                                traj_len=args.traj_len, maze_size=args.maze_size,
                                style=args.style)
    print(f"wrote {manifest['num_trajectories']} train trajectories of "
          f"length {manifest['traj_len']} to {args.out}")


def cmd_train(args):
    from . import report
    from .mazeworld import load_dataset
    from .net import Model
    from .train import fit

    model_cfg, train_cfg = _load_config_file(args.config)
    model = Model(model_cfg, seed=train_cfg.seed)
    dataset = load_dataset(args.data, "train")
    print(f"model: {model.describe()['total_params']:,} params; "
          f"dataset: {len(dataset)} trajectories of length {dataset.traj_len}")
    t0 = time.perf_counter()
    paths = fit(model, dataset, train_cfg, args.out, resume=args.resume)
    dt = time.perf_counter() - t0
    metrics = os.path.join(args.out, "metrics.jsonl")
    if os.path.exists(metrics):
        report.plot_loss_curve(metrics, os.path.join(args.out, "loss_curve.png"))
    print(f"finished in {dt / 60:.1f} min; final checkpoint: {paths[-1]}")


def cmd_eval(args):
    from . import report
    from .evaluate import evaluate_reasoning, evaluate_retrieval
    from .serialize import load_model

    model, _ = load_model(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    if args.task == "retrieval":
        res = evaluate_retrieval(model, episodes=args.episodes,
                                 episode_len=args.episode_len,
                                 sample_steps=args.sample_steps, seed=args.seed,
                                 maze_size=args.maze_size)
        report.write_csv(os.path.join(args.out, "per_distance_psnr.csv"),
                         ["distance_frames", "psnr_db"], res["per_distance_psnr"])
        report.plot_psnr_vs_distance({"model": res["per_distance_psnr"]},
                                     os.path.join(args.out, "psnr_vs_distance.png"),
                                     window_k=model.cfg.window)
    else:
        res = evaluate_reasoning(model, episodes=args.episodes, ctx_len=args.ctx_len,
                                 task_len=args.task_len,
                                 sample_steps=args.sample_steps, seed=args.seed,
                                 maze_size=args.maze_size)
    path = report.save_json(os.path.join(args.out, "metrics.json"), res)
    print(json.dumps({k: v for k, v in res.items() if k != "per_distance_psnr"},
                     indent=2))
    print(f"report written to {path}")


def cmd_serve(args):
    from .engine import EngineServer
    from .serialize import load_model

    model, _ = load_model(args.ckpt)
    host, _, port = args.addr.rpartition(":")
    server = EngineServer(model, host=host or "127.0.0.1", port=int(port),
                          transport=args.transport, sample_steps=args.sample_steps,
                          maze_size=args.maze_size)
    server.start()
    print(f"serving {args.ckpt} on {server.addr[0]}:{server.addr[1]} "
          f"({args.transport}); ctrl-c to stop")
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    while not stop:
        time.sleep(0.2)
    server.stop()
    print("stopped")


def cmd_bench(args):
    from . import report
    from .engine import bench
    from .serialize import load_model

    model, _ = load_model(args.ckpt)
    res = bench(model, t_frames=args.frames, baseline=args.baseline,
                sample_steps=args.sample_steps)
    os.makedirs(args.out, exist_ok=True)
    rows = [[i + 1, v] for i, v in enumerate(res["ours_per_frame_latency"])]
    report.write_csv(os.path.join(args.out, "ours_latency.csv"),
                     ["frame", "seconds"], rows)
    if "baseline_per_frame_latency" in res:
        rows = [[i + 1, v] for i, v in enumerate(res["baseline_per_frame_latency"])]
        report.write_csv(os.path.join(args.out, "baseline_latency.csv"),
                         ["frame", "seconds"], rows)
    report.plot_bench(res, os.path.join(args.out, "bench.png"))
    slim = {k: v for k, v in res.items()
            if k not in ("ours_per_frame_latency", "baseline_per_frame_latency")}
    path = report.save_json(os.path.join(args.out, "bench.json"), res)
    print(json.dumps(slim, indent=2, default=str))
    print(f"report written to {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scanworld",
                                description="Long-memory video world model at toy scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate maze trajectory datasets")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mazes", type=int, default=64, metavar="N")
    g.add_argument("--traj-len", type=int, default=128, metavar="L")
    g.add_argument("--out", required=True)
    g.add_argument("--maze-size", type=int, default=9)
    g.add_argument("--style", choices=["mixed", "walk"], default="mixed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, metavar="CKPT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval / reasoning evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=["retrieval", "reasoning"], required=True)
    e.add_argument("--episodes", type=int, default=100, metavar="N")
    e.add_argument("--out", default="eval_out")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sample-steps", type=int, default=10)
    e.add_argument("--episode-len", type=int, default=64)
    e.add_argument("--ctx-len", type=int, default=32)
    e.add_argument("--task-len", type=int, default=32)
    e.add_argument("--maze-size", type=int, default=9)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the interactive socket service")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--addr", default="127.0.0.1:8765")
    s.add_argument("--transport", choices=["tcp", "ws"], default="tcp")
    s.add_argument("--sample-steps", type=int, default=None)
    s.add_argument("--maze-size", type=int, default=9)
    s.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="latency/memory benchmark vs causal baseline")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--frames", type=int, default=500, metavar="T")
    b.add_argument("--baseline", choices=["causal", "none"], default="causal")
    b.add_argument("--out", default="bench_out")
    b.add_argument("--sample-steps", type=int, default=2)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # fail fast with context, no tracebacks for users
        if os.environ.get("SCANWORLD_DEBUG"):
            raise
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
