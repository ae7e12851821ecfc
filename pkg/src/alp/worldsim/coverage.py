"""0.25 m visitation grids and PGM export."""
from __future__ import annotations

import math

import numpy as np

from .render import Pose
from .scene import CELL, SceneSpec


def cell_of(x: float, y: float) -> tuple[int, int]:
    return int(math.floor(x / CELL)), int(math.floor(y / CELL))


class CoverageGrid:
    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.counts = np.zeros(scene.grid_shape, dtype=np.int64)
        self.path_length = 0.0
        self._last: Pose | None = None

    def visit(self, pose: Pose, new_episode: bool = False) -> None:
        i, j = cell_of(pose.x, pose.y)
        nx, ny = self.counts.shape
        self.counts[min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)] += 1
        if self._last is not None and not new_episode:
            self.path_length += math.hypot(pose.x - self._last.x, pose.y - self._last.y)
        self._last = pose

    def end_episode(self) -> None:
        self._last = None

    @property
    def unique_cells(self) -> int:
        return int(np.count_nonzero(self.counts))

    def to_pgm(self) -> bytes:
        """Binary P5 image, one byte per cell, row 0 at the top (max y)."""
        free = self.scene.free_mask
        img = np.where(free, 64, 0).astype(np.float64)
        visited = self.counts > 0
        if visited.any():
            scale = math.log1p(self.counts.max())
            img[visited] = 128 + 127 * np.log1p(self.counts[visited]) / scale
        img = np.rint(img).astype(np.uint8).T[::-1]
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def coverage_from_log(records, scene: SceneSpec) -> CoverageGrid:
    """Replay trajectory-log records that belong to ``scene``."""
    grid = CoverageGrid(scene)
    new_episode = True
    matched = 0
    for scene_id, x, y, heading, action in records:
        if scene_id != scene.seed:
            new_episode = True
            continue
        matched += 1
        grid.visit(Pose(x, y, heading), new_episode=new_episode)
        new_episode = action == 255
    if matched == 0:
        raise ValueError(f"trajectory log has no records for scene {scene.seed}")
    return grid


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
