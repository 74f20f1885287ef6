"""Spatial retrieval / reasoning evaluation of a trained model.

Retrieval: prime with a random walk, generate the exact backtrack, score
against the environment's reversed frames. A probe frame j revisits the
pose last seen 2j+2 frames earlier, so the per-distance PSNR curve probes
memory far beyond the attention window.

Reasoning: prime with a coverage-biased walk, continue with fresh random
actions, score against renders of the true maze.
"""

from __future__ import annotations

import numpy as np

from . import engine, mazeworld
from .net import Model


def _generate_probe(model: Model, episode, sample_steps: int, seed: int) -> np.ndarray:
    state = engine.prime(model, mazeworld.u8_to_model(episode.context.frames),
                         episode.context.actions, seed=seed)
    frames = [engine.generate_step(model, state, int(a), sample_steps=sample_steps)
              for a in episode.probe.actions]
    return mazeworld.model_to_unit(np.stack(frames))


def probe_distance(j: int) -> int:
    """Frames since probe frame j's pose was last observed in the context."""
    return 2 * j + 2


def evaluate_retrieval(model: Model, episodes: int, episode_len: int,
                       sample_steps: int = 10, seed: int = 0,
                       maze_size: int = 9) -> dict:
    k = model.cfg.window
    rng = np.random.default_rng(seed)
    per_frame_psnr, per_frame_dist = [], []
    psnrs, ssims, beyond = [], [], []
    for ei in range(episodes):
        maze = mazeworld.generate_maze(seed * 7919 + ei, maze_size)
        ep = mazeworld.make_retrieval_episode(maze, episode_len, rng)
        gen = _generate_probe(model, ep, sample_steps, seed * 1009 + ei)
        gt = mazeworld.u8_to_unit(ep.probe.frames)
        fp = mazeworld.psnr_per_frame(gt, gen)
        dist = np.array([probe_distance(j) for j in range(len(fp))])
        per_frame_psnr.extend(fp.tolist())
        per_frame_dist.extend(dist.tolist())
        psnrs.append(mazeworld.psnr(gt, gen))
        ssims.append(mazeworld.ssim(gt, gen))
        far = dist > k
        if far.any():
            beyond.append(float(fp[far].mean()))

    per_frame_dist = np.array(per_frame_dist)
    per_frame_psnr = np.array(per_frame_psnr)
    curve = []
    for d in np.unique(per_frame_dist):
        curve.append([int(d), float(per_frame_psnr[per_frame_dist == d].mean())])
    near = [p for d, p in curve if d <= max(k, 2)]
    psnr_near = float(np.mean(near)) if near else float("nan")
    psnr_max = curve[-1][1] if curve else float("nan")
    return {
        "task": "retrieval",
        "episodes": episodes,
        "episode_len": episode_len,
        "window_k": k,
        "mean_psnr": float(np.mean(psnrs)),
        "p10_psnr": float(np.percentile(psnrs, 10)),
        "mean_ssim": float(np.mean(ssims)),
        "mean_psnr_beyond_k": float(np.mean(beyond)),
        "psnr_at_short_range": psnr_near,
        "psnr_at_max_distance": psnr_max,
        "relative_degradation": float(1.0 - psnr_max / psnr_near) if psnr_near else None,
        "per_distance_psnr": curve,
    }


def evaluate_reasoning(model: Model, episodes: int, ctx_len: int, task_len: int,
                       sample_steps: int = 10, seed: int = 0,
                       maze_size: int = 9) -> dict:
    rng = np.random.default_rng(seed)
    psnrs, ssims = [], []
    for ei in range(episodes):
        maze = mazeworld.generate_maze(seed * 104729 + ei, maze_size)
        ep = mazeworld.make_reasoning_episode(maze, ctx_len, task_len, rng)
        gen = _generate_probe(model, ep, sample_steps, seed * 2003 + ei)
        gt = mazeworld.u8_to_unit(ep.probe.frames)
        psnrs.append(mazeworld.psnr(gt, gen))
        ssims.append(mazeworld.ssim(gt, gen))
    return {
        "task": "reasoning",
        "episodes": episodes,
        "ctx_len": ctx_len,
        "task_len": task_len,
        "mean_psnr": float(np.mean(psnrs)),
        "p10_psnr": float(np.percentile(psnrs, 10)),
        "mean_ssim": float(np.mean(ssims)),
    }
