"""Agent kinematics and environment wrappers.

The agent only ever sees uint8 rgb frames. Semantic masks and depth stay
behind :meth:`SceneEnv.annotate`, which only the labeling code calls.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from typing import BinaryIO, Sequence

import numpy as np

from .geometry import segment_segment_distance
from .render import Observation, Pose, heading_vector, render
from .scene import AGENT_RADIUS, CELL, SceneSpec

FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
NUM_ACTIONS = 3
STEP_SIZE = 0.25
TURN_DEGREES = 30
NO_ACTION = 255


def step(scene: SceneSpec, pose: Pose, action: int) -> Pose:
    """Apply one discrete action; a blocked forward move leaves the pose unchanged."""
    if action == TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading + TURN_DEGREES) % 360)
    if action == TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading - TURN_DEGREES) % 360)
    if action != FORWARD:
        raise ValueError(f"unknown action {action}")
    fx, fy = heading_vector(pose.heading)
    nx, ny = pose.x + STEP_SIZE * fx, pose.y + STEP_SIZE * fy
    segs = scene.obstacle_segments
    if len(segs) and segment_segment_distance((pose.x, pose.y), (nx, ny), segs).min() < AGENT_RADIUS:
        return pose
    return Pose(nx, ny, pose.heading)


def sample_spawn(scene: SceneSpec, rng: np.random.Generator) -> Pose:
    cells = scene.spawn_array
    i, j = cells[int(rng.integers(len(cells)))]
    heading = TURN_DEGREES * int(rng.integers(360 // TURN_DEGREES))
    return Pose((i + 0.5) * CELL, (j + 0.5) * CELL, heading)


class EnvFault(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        self.index = index
        super().__init__(f"environment {index} failed: {cause!r}")


class TrajectoryLog:
    """Binary pose/action stream: ``b"ALPT" u32 version`` then 15-byte records.

    Record: ``u32 scene_id, f32 x, f32 y, u16 heading, u8 action``. An action of
    255 closes an episode (the final pose, from which no action was taken).
    """

    MAGIC = b"ALPT"
    RECORD = struct.Struct("<IffHB")

    def __init__(self, fh: BinaryIO):
        self.fh = fh
        fh.write(self.MAGIC + struct.pack("<I", 1))

    def write(self, scene_id: int, pose: Pose, action: int) -> None:
        self.fh.write(self.RECORD.pack(scene_id, pose.x, pose.y, pose.heading, action))

    @classmethod
    def read(cls, data: bytes) -> list[tuple[int, float, float, int, int]]:
        if data[:4] != cls.MAGIC:
            raise ValueError("not a trajectory log")
        body = data[8:]
        n = len(body) // cls.RECORD.size
        return [cls.RECORD.unpack_from(body, k * cls.RECORD.size) for k in range(n)]


class SceneEnv:
    """One agent in one scene at a time; a new scene is drawn at every reset."""

    def __init__(self, scenes: Sequence[SceneSpec], seed: int, max_steps: int = 512,
                 image_size: int = 64, log: TrajectoryLog | None = None):
        self.scenes = list(scenes)
        self.rng = np.random.default_rng(seed)
        self.max_steps = max_steps
        self.image_size = image_size
        self.log = log
        self.scene: SceneSpec | None = None
        self.pose: Pose | None = None
        self.t = 0
        self._obs: Observation | None = None

    def reset(self) -> np.ndarray:
        self.scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        self.pose = sample_spawn(self.scene, self.rng)
        self.t = 0
        return self._render()

    def _render(self) -> np.ndarray:
        self._obs = render(self.scene, self.pose, self.image_size, self.image_size, self.t)
        return self._obs.rgb_u8

    def step(self, action: int) -> tuple[np.ndarray, bool]:
        """Returns ``(frame, done)``; after ``done`` the frame opens a fresh episode."""
        if self.log is not None:
            self.log.write(self.scene.seed, self.pose, action)
        self.pose = step(self.scene, self.pose, action)
        self.t += 1
        if self.t >= self.max_steps:
            if self.log is not None:
                self.log.write(self.scene.seed, self.pose, NO_ACTION)
            return self.reset(), True
        return self._render(), False

    def annotate(self) -> Observation:
        """Simulator-private labels for the current frame."""
        return self._obs


class VecEnv:
    """Parallel environments stepped in lockstep, optionally on worker threads."""

    def __init__(self, envs: Sequence[SceneEnv], workers: int = 1):
        self.envs = list(envs)
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def __len__(self) -> int:
        return len(self.envs)

    def _map(self, fn, items):
        def guarded(k):
            try:
                return fn(k, items[k])
            except EnvFault:
                raise
            except Exception as exc:
                raise EnvFault(k, exc) from exc

        idx = range(len(items))
        if self._pool is None:
            return [guarded(k) for k in idx]
        return list(self._pool.map(guarded, idx))

    def reset(self) -> np.ndarray:
        return np.stack(self._map(lambda k, env: env.reset(), self.envs))

    def step(self, actions) -> tuple[np.ndarray, np.ndarray]:
        results = self._map(lambda k, env: env.step(int(actions[k])), self.envs)
        frames = np.stack([r[0] for r in results])
        dones = np.array([r[1] for r in results], dtype=bool)
        return frames, dones

    def scene_ids(self) -> np.ndarray:
        return np.array([env.scene.seed for env in self.envs], dtype=np.int64)

    def poses(self) -> list[Pose]:
        return [env.pose for env in self.envs]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
