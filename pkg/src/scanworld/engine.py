"""Streaming autoregressive inference with fixed-length state, plus a
socket service for interactive steering and a latency/memory bench.

InferenceState is the model's entire memory: per-layer per-block SSM states,
per-layer rolling KV caches, the frame counter, and the sampler RNG. Its
serialized byte size is a pure function of the model config. Generating a
frame runs the DDIM sampler against the frozen state (no writes), then
commits the finished clean frame into SSM states and KV caches at t=0.

Wire protocol (TCP): every message is
    uint32 total_len | uint32 json_len | json | raw payload
with frame payloads as raw RGB bytes (width/height/frame index in the JSON
header). The same messages travel over a minimal built-in WebSocket
transport for browser clients (binary frames, inner layout identical minus
the outer length).
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import socketserver
import struct
import threading
import time
import uuid

import numpy as np

from . import diffusion, mazeworld, serialize
from .attn import KVCache, cache_capacity
from .net import Model
from .tensor import ContractError


class EngineError(RuntimeError):
    pass


class InferenceState:
    """Fixed-size streaming memory for one generation session."""

    def __init__(self, model: Model, seed: int = 0):
        self.ssm_states, self.kv_caches = model.new_stream_state()
        self.frame_count = 0
        self.rng = np.random.default_rng(seed)
        self.failed = False

    # --- serialization (constant byte size for bounded cache modes) ---

    def to_arrays(self):
        arrays = {"frame_count": np.array([self.frame_count], np.int64),
                  "kv_seen": np.array([c.frames_seen for c in self.kv_caches], np.int64)}
        for i, h in enumerate(self.ssm_states):
            arrays[f"ssm/{i}"] = h
        for i, c in enumerate(self.kv_caches):
            for k, v in c.state_arrays().items():
                arrays[f"kv/{i}/{k}"] = v
        return arrays

    def rng_meta(self) -> dict:
        st = self.rng.bit_generator.state
        # fixed-width fields keep the snapshot byte size frame-independent
        return {"state": format(st["state"]["state"], "032x"),
                "inc": format(st["state"]["inc"], "032x"),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": format(int(st["uinteger"]), "010d")}

    def to_bytes(self) -> bytes:
        meta = {"kind": "session", "failed": int(self.failed), "rng": self.rng_meta()}
        return serialize.blob_bytes(self.to_arrays(), meta)

    @classmethod
    def from_bytes(cls, raw: bytes, model: Model) -> "InferenceState":
        arrays, meta = serialize.blob_from_bytes(raw)
        if meta.get("kind") != "session":
            raise EngineError(f"not a session blob (kind={meta.get('kind')!r})")
        state = cls(model, seed=0)
        state.frame_count = int(arrays["frame_count"][0])
        state.failed = bool(meta.get("failed", 0))
        seen = arrays["kv_seen"]
        for i in range(len(state.ssm_states)):
            state.ssm_states[i][...] = arrays[f"ssm/{i}"]
        for i, cache in enumerate(state.kv_caches):
            cache.load_state_arrays(
                {"k": arrays[f"kv/{i}/k"], "v": arrays[f"kv/{i}/v"]}, int(seen[i]))
        rng_meta = meta["rng"]
        bg = np.random.PCG64()
        bg.state = {"bit_generator": "PCG64",
                    "state": {"state": int(rng_meta["state"], 16),
                              "inc": int(rng_meta["inc"], 16)},
                    "has_uint32": int(rng_meta["has_uint32"]),
                    "uinteger": int(rng_meta["uinteger"])}
        state.rng = np.random.Generator(bg)
        return state


def prime(model: Model, context_frames: np.ndarray, context_actions,
          seed: int = 0) -> InferenceState:
    """Feed clean context through the network in streaming mode.

    context_frames: [Tc, hp, wp, C] in model space [-1, 1]; actions: [Tc].
    Leaves SSM states and KV caches warm; no denoising happens.
    """
    if len(context_frames) < 1:
        raise ContractError("prime needs at least one context frame")
    state = InferenceState(model, seed=seed)
    for i in range(len(context_frames)):
        model.forward_frame(context_frames[i], 0.0, _as_action(model, context_actions[i]),
                            state.frame_count, state.ssm_states, state.kv_caches,
                            commit=True)
        state.frame_count += 1
    return state


def _as_action(model: Model, action):
    if model.cfg.action_kind == "discrete":
        return int(action)
    return np.asarray(action, np.float32)


def generate_step(model: Model, state: InferenceState, action,
                  sample_steps: int | None = None) -> np.ndarray:
    """Denoise one new frame against the cached state and commit it.

    Returns the clean frame in model space [-1, 1]. O(1) in frame count.
    """
    if state.failed:
        raise EngineError("session state is poisoned (earlier NaN); restore a snapshot")
    steps = sample_steps or model.cfg.sample_steps
    i = state.frame_count
    act = _as_action(model, action)
    cfg = model.cfg
    shape = (cfg.frame_size, cfg.frame_size, cfg.channels)

    def denoise(x_t, t):
        return model.forward_frame(x_t, t, act, i, state.ssm_states, state.kv_caches,
                                   commit=False)

    frame = diffusion.ddim_sample(denoise, shape, steps, state.rng)
    if not np.all(np.isfinite(frame)):
        state.failed = True
        raise EngineError(f"non-finite frame at index {i}; session marked failed")
    model.forward_frame(frame, 0.0, act, i, state.ssm_states, state.kv_caches, commit=True)
    state.frame_count += 1
    return frame


# --- sessions and the socket service ---


class Session:
    def __init__(self, model: Model, seed: int):
        self.id = uuid.uuid4().hex[:12]
        self.model = model
        self.state: InferenceState | None = None
        self.seed = seed
        self.last_frame: np.ndarray | None = None
        self.lock = threading.Lock()


def encode_message(obj: dict, payload: bytes = b"") -> bytes:
    body = json.dumps(obj).encode("utf-8")
    inner = struct.pack("<I", len(body)) + body + payload
    return struct.pack("<I", len(inner)) + inner


def decode_inner(inner: bytes):
    (jlen,) = struct.unpack_from("<I", inner, 0)
    obj = json.loads(inner[4:4 + jlen].decode("utf-8"))
    return obj, inner[4 + jlen:]


def read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return buf


def read_message(sock: socket.socket):
    (total,) = struct.unpack("<I", read_exact(sock, 4))
    return decode_inner(read_exact(sock, total))


def frame_to_rgb_bytes(frame_model: np.ndarray) -> bytes:
    unit = mazeworld.model_to_unit(frame_model)
    return mazeworld.unit_to_u8(unit).tobytes()


class EngineServer:
    """Thread-per-connection server; sessions serialize their own requests."""

    def __init__(self, model: Model, host: str = "127.0.0.1", port: int = 0,
                 transport: str = "tcp", sample_steps: int | None = None,
                 maze_size: int = 9):
        if transport not in ("tcp", "ws"):
            raise ValueError(f"unknown transport {transport!r}")
        self.model = model
        self.transport = transport
        self.sample_steps = sample_steps or model.cfg.sample_steps
        self.maze_size = maze_size
        self.sessions: dict[str, Session] = {}
        self._sessions_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.addr = self._sock.getsockname()

    def start(self):
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    # --- message handling (transport-independent) ---

    def handle(self, obj: dict, payload: bytes):
        try:
            kind = obj.get("type")
            if kind == "new_session":
                return self._new_session(obj)
            sid = obj.get("session_id")
            with self._sessions_lock:
                session = self.sessions.get(sid)
            if session is None:
                return {"type": "error", "code": "unknown_session",
                        "message": f"unknown session {sid!r}"}, b""
            with session.lock:
                if kind == "prime":
                    return self._prime(session, obj, payload)
                if kind == "prime_env":
                    return self._prime_env(session, obj)
                if kind == "act":
                    return self._act(session, obj)
                if kind == "snapshot":
                    return {"type": "snapshot_data",
                            "session_id": session.id}, session.state.to_bytes()
                if kind == "restore":
                    session.state = InferenceState.from_bytes(payload, session.model)
                    return {"type": "ok", "frame_count": session.state.frame_count}, b""
                if kind == "stats":
                    return self._stats(session)
                if kind == "close":
                    with self._sessions_lock:
                        self.sessions.pop(session.id, None)
                    return {"type": "ok"}, b""
            return {"type": "error", "code": "bad_message",
                    "message": f"unknown message type {kind!r}"}, b""
        except (EngineError, ContractError, KeyError, ValueError) as e:
            return {"type": "error", "code": "protocol",
                    "message": f"{type(e).__name__}: {e}"}, b""

    def _new_session(self, obj):
        session = Session(self.model, seed=int(obj.get("seed", 0)))
        with self._sessions_lock:
            self.sessions[session.id] = session
        cfg = self.model.cfg
        return {"type": "session", "session_id": session.id,
                "frame_size": cfg.frame_size, "channels": cfg.channels,
                "actions": mazeworld.ACTION_NAMES[:cfg.num_actions],
                "sample_steps": self.sample_steps}, b""

    def _prime(self, session, obj, payload):
        cfg = self.model.cfg
        n = int(obj["num_frames"])
        w, h = int(obj.get("width", cfg.frame_size)), int(obj.get("height", cfg.frame_size))
        if w != cfg.frame_size or h != cfg.frame_size:
            raise EngineError(f"frame size {w}x{h} does not match model {cfg.frame_size}")
        need = n * w * h * cfg.channels
        if len(payload) != need:
            raise EngineError(f"prime payload has {len(payload)} bytes, expected {need}")
        frames_u8 = np.frombuffer(payload, np.uint8).reshape(n, h, w, cfg.channels)
        actions = obj["actions"]
        if len(actions) != n:
            raise EngineError(f"{len(actions)} actions for {n} frames")
        session.state = prime(self.model, mazeworld.u8_to_model(frames_u8), actions,
                              seed=session.seed)
        session.last_frame = mazeworld.u8_to_model(frames_u8[-1])
        return self._frame_reply(session, primed=True)

    def _prime_env(self, session, obj):
        maze = mazeworld.generate_maze(int(obj.get("maze_seed", 0)), self.maze_size)
        steps = int(obj.get("steps", 16))
        rng = np.random.default_rng(int(obj.get("maze_seed", 0)) + 1)
        start = mazeworld.random_floor_pose(maze, rng)
        actions = mazeworld.random_legal_walk(maze, start, steps, rng)
        traj = mazeworld.rollout(maze, start, actions)
        session.state = prime(self.model, mazeworld.u8_to_model(traj.frames),
                              traj.actions, seed=session.seed)
        session.last_frame = mazeworld.u8_to_model(traj.frames[-1])
        return self._frame_reply(session, primed=True)

    def _act(self, session, obj):
        if session.state is None:
            raise EngineError("session is not primed")
        action = obj["action"]
        if isinstance(action, str):
            action = mazeworld.ACTION_NAMES.index(action)
        t0 = time.perf_counter()
        frame = generate_step(session.model, session.state, action,
                              sample_steps=self.sample_steps)
        session.last_frame = frame
        return self._frame_reply(session, latency=time.perf_counter() - t0)

    def _frame_reply(self, session, primed=False, latency=None):
        cfg = self.model.cfg
        obj = {"type": "frame", "session_id": session.id,
               "width": cfg.frame_size, "height": cfg.frame_size,
               "frame_index": session.state.frame_count - 1,
               "primed": primed}
        if latency is not None:
            obj["latency_ms"] = round(latency * 1e3, 3)
        return obj, frame_to_rgb_bytes(session.last_frame)

    def _stats(self, session):
        state_bytes = len(session.state.to_bytes()) if session.state else 0
        return {"type": "stats", "session_id": session.id,
                "frame_count": session.state.frame_count if session.state else 0,
                "state_bytes": state_bytes}, b""

    # --- transports ---

    def _serve_conn(self, conn: socket.socket):
        try:
            if self.transport == "ws":
                self._serve_ws(conn)
            else:
                while not self._stop.is_set():
                    obj, payload = read_message(conn)
                    reply, out_payload = self.handle(obj, payload)
                    conn.sendall(encode_message(reply, out_payload))
        except (ConnectionError, OSError, struct.error):
            pass
        finally:
            conn.close()

    def _serve_ws(self, conn: socket.socket):
        if not _ws_handshake(conn):
            return
        while not self._stop.is_set():
            msg = _ws_read_message(conn)
            if msg is None:
                return
            obj, payload = decode_inner(msg)
            reply, out_payload = self.handle(obj, payload)
            body = json.dumps(reply).encode("utf-8")
            _ws_send_binary(conn, struct.pack("<I", len(body)) + body + out_payload)


# --- minimal RFC6455 server side ---

_WS_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def _ws_handshake(conn: socket.socket) -> bool:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            return False
        data += chunk
    key = None
    for line in data.split(b"\r\n"):
        if line.lower().startswith(b"sec-websocket-key:"):
            key = line.split(b":", 1)[1].strip()
    if key is None:
        conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        return False
    accept = base64.b64encode(hashlib.sha1(key + _WS_GUID).digest())
    conn.sendall(b"HTTP/1.1 101 Switching Protocols\r\n"
                 b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                 b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n")
    return True


def _ws_read_frame(conn: socket.socket):
    head = read_exact(conn, 2)
    fin = bool(head[0] & 0x80)
    opcode = head[0] & 0x0F
    masked = bool(head[1] & 0x80)
    length = head[1] & 0x7F
    if length == 126:
        (length,) = struct.unpack(">H", read_exact(conn, 2))
    elif length == 127:
        (length,) = struct.unpack(">Q", read_exact(conn, 8))
    mask = read_exact(conn, 4) if masked else b"\x00" * 4
    body = bytearray(read_exact(conn, length))
    if masked:
        for i in range(length):
            body[i] ^= mask[i % 4]
    return fin, opcode, bytes(body)


def _ws_read_message(conn: socket.socket):
    """Reassembled binary/text message, or None on close."""
    buf = b""
    while True:
        try:
            fin, opcode, body = _ws_read_frame(conn)
        except (ConnectionError, OSError):
            return None
        if opcode == 8:            # close
            try:
                conn.sendall(b"\x88\x00")
            except OSError:
                pass
            return None
        if opcode == 9:            # ping -> pong
            conn.sendall(_ws_frame(10, body))
            continue
        if opcode in (1, 2, 0):
            buf += body
            if fin:
                return buf


def _ws_frame(opcode: int, body: bytes) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(body)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + body


def _ws_send_binary(conn: socket.socket, body: bytes):
    conn.sendall(_ws_frame(2, body))


# --- bench ---


def kv_bytes(state: InferenceState) -> int:
    return sum(v.nbytes for i, c in enumerate(state.kv_caches)
               for v in c.state_arrays().values())


def run_rollout_bench(model: Model, t_frames: int, sample_steps: int,
                      checkpoints, seed: int = 0):
    """Latency and state-size trace for a T-frame streaming rollout."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    ctx = rng.uniform(-1, 1, (1, cfg.frame_size, cfg.frame_size, cfg.channels)) \
        .astype(np.float32)
    state = prime(model, ctx, [0], seed=seed)
    latencies = []
    sizes, kv_sizes, latency_at = {}, {}, {}
    for i in range(t_frames):
        action = int(rng.integers(cfg.num_actions))
        t0 = time.perf_counter()
        generate_step(model, state, action, sample_steps=sample_steps)
        latencies.append(time.perf_counter() - t0)
        frame_no = i + 1
        if frame_no in checkpoints:
            sizes[frame_no] = len(state.to_bytes())
            kv_sizes[frame_no] = kv_bytes(state)
            window = latencies[max(0, len(latencies) - 8):]
            latency_at[frame_no] = float(np.mean(window))
    return {"per_frame_latency": latencies, "state_bytes": sizes,
            "kv_bytes": kv_sizes, "latency_at": latency_at}


def latency_slope_fraction(latencies, start_index: int) -> float:
    """|linear-fit drift across the measured range| relative to the mean."""
    y = np.asarray(latencies[start_index:], np.float64)
    x = np.arange(y.size, dtype=np.float64)
    slope = np.polyfit(x, y, 1)[0]
    return float(abs(slope) * y.size / y.mean())


def bench(model: Model, t_frames: int, baseline: str = "causal",
          sample_steps: int = 2, seed: int = 0) -> dict:
    """Constant-footprint evidence: ours vs a growing-cache causal baseline."""
    cfg = model.cfg
    k = cfg.window
    if t_frames < 2 * k:
        raise ContractError(f"bench needs T >= 2k = {2 * k}, got {t_frames}")
    checkpoints = sorted({k, t_frames // 4, t_frames // 2, t_frames})
    ours = run_rollout_bench(model, t_frames, sample_steps, checkpoints, seed)
    report = {
        "frames": t_frames,
        "sample_steps": sample_steps,
        "checkpoints": checkpoints,
        "ours": {
            "state_bytes": ours["state_bytes"],
            "kv_bytes": ours["kv_bytes"],
            "latency_at": ours["latency_at"],
            "mean_latency": float(np.mean(ours["per_frame_latency"])),
            "latency_slope_fraction": latency_slope_fraction(
                ours["per_frame_latency"], start_index=k),
        },
        "ours_per_frame_latency": ours["per_frame_latency"],
    }
    if baseline == "causal":
        base_cfg_dict = json.loads(model.cfg.to_json())
        base_cfg_dict["mask_mode"] = "full"
        from .net import ModelConfig
        base_model = Model(ModelConfig.from_dict(base_cfg_dict), seed=seed)
        base = run_rollout_bench(base_model, t_frames, sample_steps, checkpoints, seed)
        report["baseline"] = {
            "state_bytes": base["state_bytes"],
            "kv_bytes": base["kv_bytes"],
            "latency_at": base["latency_at"],
            "mean_latency": float(np.mean(base["per_frame_latency"])),
        }
        report["baseline_per_frame_latency"] = base["per_frame_latency"]
    return report
