"""Synthetic maze environment: worlds, rendering, episodes, metrics, data.

Grid mazes are DFS-carved with colored floor cells so that places look
distinct. The agent has four actions (forward, back, turn-left, turn-right);
blocked moves are recorded no-ops. Observations are 16x16 RGB egocentric
crops: a 5x5 cell window centered on the agent, rotated so the agent faces
up, 3x3 pixels per cell. Revisiting a pose reproduces the observation
pixel-for-pixel, which is what makes retrieval tasks well-posed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

FORWARD, BACK, TURN_LEFT, TURN_RIGHT = 0, 1, 2, 3
ACTION_NAMES = ["forward", "back", "turn_left", "turn_right"]
INVERSE_ACTION = {FORWARD: BACK, BACK: FORWARD, TURN_LEFT: TURN_RIGHT, TURN_RIGHT: TURN_LEFT}

# heading 0=N 1=E 2=S 3=W; grid x grows east, y grows south
_DX = [0, 1, 0, -1]
_DY = [-1, 0, 1, 0]

WALL_COLOR = np.array([0.15, 0.15, 0.18], np.float32)
BORDER_COLOR = np.array([0.0, 0.0, 0.0], np.float32)
FLOOR_PALETTE = np.array([
    [0.90, 0.23, 0.21],
    [0.23, 0.85, 0.27],
    [0.25, 0.38, 0.95],
    [0.95, 0.83, 0.20],
    [0.85, 0.30, 0.90],
    [0.30, 0.90, 0.88],
], np.float32)

FRAME_SIZE = 16
VIEW_CELLS = 5
CELL_PX = 3


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int


@dataclass
class Maze:
    cells: np.ndarray   # [size, size] uint8, 1 = floor
    colors: np.ndarray  # [size, size] uint8 palette index (floor cells)
    seed: int

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def is_floor(self, x: int, y: int) -> bool:
        return (0 <= x < self.size and 0 <= y < self.size
                and bool(self.cells[y, x]))

    def floor_cells(self):
        ys, xs = np.nonzero(self.cells)
        return list(zip(xs.tolist(), ys.tolist()))


def generate_maze(seed: int, size: int = 9) -> Maze:
    """Randomized DFS carving over the odd-coordinate room lattice."""
    if size < 5 or size % 2 == 0:
        raise ContractError(f"maze size must be odd and >= 5, got {size}")
    rng = np.random.default_rng(seed)
    cells = np.zeros((size, size), np.uint8)
    rooms = (size - 1) // 2
    start = (int(rng.integers(rooms)), int(rng.integers(rooms)))
    stack = [start]
    visited = {start}
    cells[1 + 2 * start[1], 1 + 2 * start[0]] = 1
    while stack:
        cx, cy = stack[-1]
        options = [(cx + dx, cy + dy, dx, dy)
                   for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0))
                   if 0 <= cx + dx < rooms and 0 <= cy + dy < rooms
                   and (cx + dx, cy + dy) not in visited]
        if not options:
            stack.pop()
            continue
        nx, ny, dx, dy = options[rng.integers(len(options))]
        cells[1 + 2 * cy + dy, 1 + 2 * cx + dx] = 1  # carve the wall between
        cells[1 + 2 * ny, 1 + 2 * nx] = 1
        visited.add((nx, ny))
        stack.append((nx, ny))
    colors = rng.integers(0, len(FLOOR_PALETTE), size=(size, size)).astype(np.uint8)
    return Maze(cells=cells, colors=colors, seed=seed)


def transition(maze: Maze, pose: Pose, action: int) -> Pose:
    """Deterministic dynamics; blocked forward/back moves are no-ops."""
    if action == TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading + 3) % 4)
    if action == TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 4)
    sign = 1 if action == FORWARD else -1
    nx = pose.x + sign * _DX[pose.heading]
    ny = pose.y + sign * _DY[pose.heading]
    if maze.is_floor(nx, ny):
        return Pose(nx, ny, pose.heading)
    return pose


def render(maze: Maze, pose: Pose) -> np.ndarray:
    """16x16 RGB view in [0, 1]; pure function of (maze, pose)."""
    if not maze.is_floor(pose.x, pose.y):
        raise ContractError(f"pose ({pose.x}, {pose.y}) is inside a wall")
    half = VIEW_CELLS // 2
    window = np.empty((VIEW_CELLS, VIEW_CELLS, 3), np.float32)
    for r in range(VIEW_CELLS):
        for c in range(VIEW_CELLS):
            x, y = pose.x - half + c, pose.y - half + r
            if maze.is_floor(x, y):
                window[r, c] = FLOOR_PALETTE[maze.colors[y, x]]
            else:
                window[r, c] = WALL_COLOR
    window = np.rot90(window, k=pose.heading).copy()
    frame = np.empty((FRAME_SIZE, FRAME_SIZE, 3), np.float32)
    frame[:] = BORDER_COLOR
    body = np.repeat(np.repeat(window, CELL_PX, 0), CELL_PX, 1)
    frame[1:1 + VIEW_CELLS * CELL_PX, 1:1 + VIEW_CELLS * CELL_PX] = body
    return frame


@dataclass
class Trajectory:
    start: Pose
    actions: np.ndarray          # [L] uint8
    poses: list                  # [L] Pose after each action
    frames: np.ndarray           # [L, 16, 16, 3] uint8

    def __len__(self):
        return len(self.actions)


def unit_to_u8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def u8_to_unit(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, np.float32) / 255.0


def u8_to_model(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, np.float32) / 127.5 - 1.0


def model_to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, np.float32) + 1.0) / 2.0, 0.0, 1.0)


def rollout(maze: Maze, start: Pose, actions) -> Trajectory:
    actions = np.asarray(actions, np.uint8)
    poses, frames = [], []
    pose = start
    for a in actions:
        pose = transition(maze, pose, int(a))
        poses.append(pose)
        frames.append(render(maze, pose))
    frames = unit_to_u8(np.stack(frames)) if frames else np.zeros((0, 16, 16, 3), np.uint8)
    return Trajectory(start=start, actions=actions, poses=poses, frames=frames)


def random_floor_pose(maze: Maze, rng: np.random.Generator) -> Pose:
    cells = maze.floor_cells()
    x, y = cells[rng.integers(len(cells))]
    return Pose(int(x), int(y), int(rng.integers(4)))


def legal_actions(maze: Maze, pose: Pose):
    """Actions that change the pose (turns always; moves only when free)."""
    acts = [TURN_LEFT, TURN_RIGHT]
    if maze.is_floor(pose.x + _DX[pose.heading], pose.y + _DY[pose.heading]):
        acts.append(FORWARD)
    if maze.is_floor(pose.x - _DX[pose.heading], pose.y - _DY[pose.heading]):
        acts.append(BACK)
    return acts


def random_legal_walk(maze: Maze, start: Pose, length: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Effective-move random walk (no no-ops), biased toward going forward."""
    weights = {FORWARD: 0.55, BACK: 0.05, TURN_LEFT: 0.2, TURN_RIGHT: 0.2}
    pose = start
    actions = np.empty(length, np.uint8)
    for i in range(length):
        acts = legal_actions(maze, pose)
        w = np.array([weights[a] for a in acts])
        a = acts[rng.choice(len(acts), p=w / w.sum())]
        actions[i] = a
        pose = transition(maze, pose, a)
    return actions


def invert_actions(actions) -> np.ndarray:
    """forward<->back, left<->right, reversed order."""
    return np.array([INVERSE_ACTION[int(a)] for a in reversed(actions)], np.uint8)


@dataclass
class Episode:
    maze: Maze
    context: Trajectory
    probe: Trajectory


def make_retrieval_episode(maze: Maze, length: int, rng: np.random.Generator) -> Episode:
    """Context walk of length/2 plus its exact inverse as the probe.

    Context walks take only effective moves, so replaying the inverted
    actions retraces every pose and the probe's ground-truth frames are the
    reversed context frames.
    """
    if length % 2:
        raise ContractError(f"episode length must be even, got {length}")
    start = random_floor_pose(maze, rng)
    ctx_actions = random_legal_walk(maze, start, length // 2, rng)
    context = rollout(maze, start, ctx_actions)
    probe_start = context.poses[-1] if len(context) else start
    probe = rollout(maze, probe_start, invert_actions(ctx_actions))
    return Episode(maze=maze, context=context, probe=probe)


def coverage_walk(maze: Maze, start: Pose, length: int,
                  rng: np.random.Generator, epsilon: float = 0.15) -> np.ndarray:
    """Walk biased toward the least-visited reachable neighbor cell."""
    visits = np.zeros_like(maze.cells, np.int64)
    visits[start.y, start.x] = 1
    pose = start
    actions = np.empty(length, np.uint8)
    for i in range(length):
        acts = legal_actions(maze, pose)
        if rng.uniform() < epsilon:
            a = acts[rng.integers(len(acts))]
        else:
            neighbors = [(d, (pose.x + _DX[d], pose.y + _DY[d])) for d in range(4)
                         if maze.is_floor(pose.x + _DX[d], pose.y + _DY[d])]
            counts = np.array([visits[ny, nx] for _, (nx, ny) in neighbors])
            d_target = neighbors[int(rng.choice(np.flatnonzero(counts == counts.min())))][0]
            if d_target == pose.heading:
                a = FORWARD
            elif d_target == (pose.heading + 2) % 4:
                a = BACK
            elif d_target == (pose.heading + 3) % 4:
                a = TURN_LEFT
            else:
                a = TURN_RIGHT
        actions[i] = a
        pose = transition(maze, pose, int(a))
        visits[pose.y, pose.x] += 1
    return actions


def make_reasoning_episode(maze: Maze, ctx_len: int, task_len: int,
                           rng: np.random.Generator) -> Episode:
    """Coverage-biased context; probe continues with fresh random actions.

    Probe ground truth is a pure environment render, independent of any
    model. ctx_len of about 4x the floor-cell count gives near-full
    coverage.
    """
    start = random_floor_pose(maze, rng)
    ctx_actions = coverage_walk(maze, start, ctx_len, rng)
    context = rollout(maze, start, ctx_actions)
    probe_start = context.poses[-1] if len(context) else start
    probe_actions = random_legal_walk(maze, probe_start, task_len, rng)
    probe = rollout(maze, probe_start, probe_actions)
    return Episode(maze=maze, context=context, probe=probe)


# --- similarity metrics ---

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) over the whole sequence; exact match capped at 99 dB."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(-10.0 * np.log10(mse), PSNR_CAP))


def psnr_per_frame(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([psnr(a[i], b[i]) for i in range(a.shape[0])])


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Mean SSIM over non-overlapping windows, C1=(0.01)^2 C2=(0.03)^2."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    t, h, w, c = a.shape
    hw, ww = h // window, w // window
    ax = a[:, :hw * window, :ww * window].reshape(t, hw, window, ww, window, c)
    bx = b[:, :hw * window, :ww * window].reshape(t, hw, window, ww, window, c)
    axes = (2, 4)
    mu_a = ax.mean(axis=axes)
    mu_b = bx.mean(axis=axes)
    var_a = ax.var(axis=axes)
    var_b = bx.var(axis=axes)
    cov = (ax * bx).mean(axis=axes) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# --- dataset files ---


def write_dataset(out_dir: str, split: str, trajectories: list[Trajectory],
                  extra_meta: dict | None = None):
    """One binary record per trajectory (u8 pixels then u8 action ids)."""
    split_dir = os.path.join(out_dir, split)
    os.makedirs(split_dir, exist_ok=True)
    length = len(trajectories[0]) if trajectories else 0
    for traj in trajectories:
        if len(traj) != length:
            raise ContractError("all trajectories in a split must share a length")
    for i, traj in enumerate(trajectories):
        with open(os.path.join(split_dir, f"traj_{i:05d}.bin"), "wb") as f:
            f.write(traj.frames.tobytes())
            f.write(traj.actions.astype(np.uint8).tobytes())
    manifest = {
        "num_trajectories": len(trajectories),
        "traj_len": int(length),
        "frame_size": FRAME_SIZE,
        "channels": 3,
        "actions": ACTION_NAMES,
        "pixel_format": "u8",
    }
    if extra_meta:
        manifest.update(extra_meta)
    with open(os.path.join(split_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


class Dataset:
    """In-memory view of one split directory."""

    def __init__(self, frames: np.ndarray, actions: np.ndarray, manifest: dict):
        self.frames = frames      # [N, L, 16, 16, 3] u8
        self.actions = actions    # [N, L] u8
        self.manifest = manifest

    def __len__(self):
        return self.frames.shape[0]

    @property
    def traj_len(self):
        return self.frames.shape[1]

    def sample_batch(self, rng: np.random.Generator, batch: int, t_frames: int):
        """(frames in [-1, 1] [B, T, 16, 16, 3], action ids [B, T])."""
        if t_frames > self.traj_len:
            raise ContractError(
                f"requested T={t_frames} from trajectories of length {self.traj_len}")
        rows = rng.integers(0, len(self), size=batch)
        offs = rng.integers(0, self.traj_len - t_frames + 1, size=batch)
        fr = np.stack([self.frames[r, o:o + t_frames] for r, o in zip(rows, offs)])
        ac = np.stack([self.actions[r, o:o + t_frames] for r, o in zip(rows, offs)])
        return u8_to_model(fr), ac.astype(np.int64)


def load_dataset(data_dir: str, split: str = "train") -> Dataset:
    split_dir = os.path.join(data_dir, split)
    manifest_path = os.path.join(split_dir, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read dataset manifest {manifest_path}: {e}") from e
    n, length = manifest["num_trajectories"], manifest["traj_len"]
    fs, ch = manifest["frame_size"], manifest["channels"]
    frame_bytes = length * fs * fs * ch
    frames = np.empty((n, length, fs, fs, ch), np.uint8)
    actions = np.empty((n, length), np.uint8)
    for i in range(n):
        path = os.path.join(split_dir, f"traj_{i:05d}.bin")
        raw = np.fromfile(path, np.uint8)
        if raw.size != frame_bytes + length:
            raise ValueError(f"{path}: expected {frame_bytes + length} bytes, got {raw.size}")
        frames[i] = raw[:frame_bytes].reshape(length, fs, fs, ch)
        actions[i] = raw[frame_bytes:]
    return Dataset(frames=frames, actions=actions, manifest=manifest)


def generate_dataset(out_dir: str, seed: int, num_mazes: int, traj_len: int,
                     maze_size: int = 9, val_fraction: float = 0.1,
                     style: str = "mixed") -> dict:
    """Write train/ and val/ splits of maze trajectories.

    style "mixed": half plain random walks, half walk-then-backtrack pairs
    (the backtrack halves make revisits frequent, which is what long-memory
    training feeds on). "walk": plain walks only.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    for mi in range(num_mazes):
        maze = generate_maze(seed * 100_003 + mi, maze_size)
        start = random_floor_pose(maze, rng)
        if style == "mixed" and mi % 2 == 0:
            half = traj_len // 2
            walk = random_legal_walk(maze, start, traj_len - half, rng)
            actions = np.concatenate([walk, invert_actions(walk)[:half]])
        else:
            actions = random_legal_walk(maze, start, traj_len, rng)
        trajs.append(rollout(maze, start, actions))
    n_val = max(1, int(len(trajs) * val_fraction)) if len(trajs) > 1 else 0
    meta = {"maze_size": maze_size, "seed": seed, "style": style}
    manifest = write_dataset(out_dir, "train", trajs[n_val:], meta)
    if n_val:
        write_dataset(out_dir, "val", trajs[:n_val], meta)
    return manifest
