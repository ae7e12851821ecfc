"""Procedural multi-room floor plans.

A scene is a rectangle subdivided into rooms by interior walls with door gaps,
furnished with one object of every category plus a few extras. Everything is a
pure function of the integer seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .geometry import point_segment_distance, points_in_rects, rect_segments, segment_segment_distance

CELL = 0.25
AGENT_RADIUS = 0.15
WALL_HEIGHT = 2.5
NUM_CATEGORIES = 6
BACKGROUND = 255
TEST_SEED_OFFSET = 1_000_000

CATEGORY_NAMES = ("chair", "couch", "bed", "toilet", "tv", "plant")

# (min_w, max_w, min_d, max_d, height, albedo)
_CATEGORY_SHAPES = (
    (0.5, 0.7, 0.5, 0.7, 0.9, (0.85, 0.22, 0.18)),
    (1.6, 2.0, 0.8, 0.9, 0.8, (0.18, 0.32, 0.85)),
    (1.8, 2.0, 1.4, 1.6, 0.6, (0.95, 0.82, 0.25)),
    (0.4, 0.5, 0.6, 0.7, 0.75, (0.97, 0.97, 0.97)),
    (1.0, 1.3, 0.3, 0.4, 1.5, (0.12, 0.12, 0.15)),
    (0.4, 0.6, 0.4, 0.6, 1.1, (0.15, 0.70, 0.22)),
)

WALL_CLEARANCE = 0.35
OBJECT_GAP = 0.6
DOOR_WIDTH = 1.0
DOOR_CLEARANCE = 0.9
MIN_REACHABLE = 0.8
_LAYOUT_ATTEMPTS = 20
_PLACEMENT_TRIES = 200


def _palette(n: int, sat: float, lo: float, hi: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    hues = (np.arange(n) / n + rng.uniform(0, 1.0 / n, n)) % 1.0
    vals = rng.uniform(lo, hi, n)
    out = []
    for h, v in zip(hues, vals):
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        p, q, t = v * (1 - sat), v * (1 - sat * f), v * (1 - sat * (1 - f))
        out.append([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])
    return np.array(out, dtype=np.float64)


WALL_PALETTE = _palette(16, 0.35, 0.55, 0.8, 7)
FLOOR_PALETTE = _palette(8, 0.3, 0.3, 0.5, 11)


class SceneGenerationError(RuntimeError):
    def __init__(self, seed: int, reason: str):
        self.seed = seed
        super().__init__(f"scene generation failed for seed {seed}: {reason}")


@dataclass(frozen=True)
class Wall:
    x0: float
    y0: float
    x1: float
    y1: float
    texture: int


@dataclass(frozen=True)
class SceneObject:
    category: int
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    @property
    def albedo(self) -> tuple:
        return _CATEGORY_SHAPES[self.category][5]

    @property
    def footprint(self) -> np.ndarray:
        return np.array([[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]])


@dataclass(frozen=True)
class SceneProfile:
    min_size: float = 6.0
    max_size: float = 9.0
    max_splits: int = 2
    max_extra_objects: int = 2
    n_train: int = 25
    n_test: int = 5
    seed_base: int = 0

    def train_seeds(self) -> list[int]:
        return [self.seed_base + i for i in range(self.n_train)]

    def test_seeds(self) -> list[int]:
        return [self.seed_base + TEST_SEED_OFFSET + i for i in range(self.n_test)]

    def split_of(self, seed: int) -> str:
        if seed in self.train_seeds():
            return "train"
        if seed in self.test_seeds():
            return "test"
        raise KeyError(f"scene {seed} is not in profile {self}")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: float
    height: float
    walls: tuple
    objects: tuple
    spawn_cells: tuple
    floor_texture: int = 0
    doors: tuple = field(default=())

    @property
    def scene_id(self) -> int:
        return self.seed

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(round(self.width / CELL)), int(round(self.height / CELL))

    @cached_property
    def wall_segments(self) -> np.ndarray:
        return np.array([[w.x0, w.y0, w.x1, w.y1] for w in self.walls], dtype=np.float64).reshape(-1, 4)

    @cached_property
    def object_rects(self) -> np.ndarray:
        return np.array([[o.x0, o.y0, o.x1, o.y1] for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @cached_property
    def obstacle_segments(self) -> np.ndarray:
        parts = [self.wall_segments] + [rect_segments(*r) for r in self.object_rects]
        return np.concatenate(parts, axis=0)

    @cached_property
    def free_mask(self) -> np.ndarray:
        return free_cells(self.width, self.height, self.wall_segments, self.object_rects)

    @cached_property
    def spawn_array(self) -> np.ndarray:
        return np.array(self.spawn_cells, dtype=np.int64).reshape(-1, 2)

    def dump(self) -> str:
        """Human-readable listing, one record per line."""
        lines = [f"seed {self.seed}", f"extents {self.width:.2f} {self.height:.2f}",
                 f"floor_texture {self.floor_texture}"]
        for w in self.walls:
            lines.append(f"wall {w.x0:.3f} {w.y0:.3f} {w.x1:.3f} {w.y1:.3f} texture={w.texture}")
        for o in self.objects:
            r, g, b = o.albedo
            lines.append(f"object {CATEGORY_NAMES[o.category]} category={o.category} "
                         f"rect={o.x0:.3f},{o.y0:.3f},{o.x1:.3f},{o.y1:.3f} height={o.height:.2f} "
                         f"albedo={r:.2f},{g:.2f},{b:.2f}")
        lines.append(f"spawn_cells {len(self.spawn_cells)}")
        return "\n".join(lines) + "\n"


def cell_centers(nx: int, ny: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return np.stack([(i + 0.5) * CELL, (j + 0.5) * CELL], axis=-1).reshape(-1, 2)


def free_cells(width, height, wall_segs, object_rects) -> np.ndarray:
    """Boolean (nx, ny) grid of 0.25 m cells whose center can hold the agent."""
    nx, ny = int(round(width / CELL)), int(round(height / CELL))
    pts = cell_centers(nx, ny)
    ok = np.ones(len(pts), dtype=bool)
    segs = [wall_segs] + [rect_segments(*r) for r in object_rects]
    segs = np.concatenate(segs, axis=0)
    if len(segs):
        ok &= point_segment_distance(pts, segs).min(axis=1) >= AGENT_RADIUS
    if len(object_rects):
        ok &= ~points_in_rects(pts, object_rects).any(axis=1)
    return ok.reshape(nx, ny)


def _rect_distance(a, b) -> float:
    dx = max(0.0, a[0] - b[2], b[0] - a[2])
    dy = max(0.0, a[1] - b[3], b[1] - a[3])
    return math.hypot(dx, dy)


def _snap(v: float) -> float:
    return round(v / CELL) * CELL


def _split_rooms(rng, width, height, max_splits, inner_tex):
    rooms = [(0.0, 0.0, width, height)]
    walls, doors = [], []
    for _ in range(int(rng.integers(1, max_splits + 1))):
        rooms.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        x0, y0, x1, y1 = rooms[0]
        vertical = (x1 - x0) >= (y1 - y0)
        span = (x1 - x0) if vertical else (y1 - y0)
        if span < 4.0:
            break
        rooms.pop(0)
        cut = _snap((x0 if vertical else y0) + span * rng.uniform(0.4, 0.6))
        length = (y1 - y0) if vertical else (x1 - x0)
        door_c = _snap(rng.uniform(0.75 + DOOR_WIDTH / 2, length - 0.75 - DOOR_WIDTH / 2))
        lo, hi = door_c - DOOR_WIDTH / 2, door_c + DOOR_WIDTH / 2
        if vertical:
            walls.append(Wall(cut, y0, cut, y0 + lo, inner_tex))
            walls.append(Wall(cut, y0 + hi, cut, y1, inner_tex))
            doors.append((cut, y0 + door_c))
            rooms += [(x0, y0, cut, y1), (cut, y0, x1, y1)]
        else:
            walls.append(Wall(x0, cut, x0 + lo, cut, inner_tex))
            walls.append(Wall(x0 + hi, cut, x1, cut, inner_tex))
            doors.append((x0 + door_c, cut))
            rooms += [(x0, y0, x1, cut), (x0, cut, x1, y1)]
    return rooms, walls, doors


def _place_object(rng, category, rooms, wall_segs, placed, doors):
    w_lo, w_hi, d_lo, d_hi, height, _ = _CATEGORY_SHAPES[category]
    areas = np.array([(r[2] - r[0]) * (r[3] - r[1]) for r in rooms])
    for _ in range(_PLACEMENT_TRIES):
        w, d = rng.uniform(w_lo, w_hi), rng.uniform(d_lo, d_hi)
        if rng.random() < 0.5:
            w, d = d, w
        rx0, ry0, rx1, ry1 = rooms[int(rng.choice(len(rooms), p=areas / areas.sum()))]
        if rx1 - rx0 < w + 2 * WALL_CLEARANCE or ry1 - ry0 < d + 2 * WALL_CLEARANCE:
            continue
        x0 = rng.uniform(rx0 + WALL_CLEARANCE, rx1 - WALL_CLEARANCE - w)
        y0 = rng.uniform(ry0 + WALL_CLEARANCE, ry1 - WALL_CLEARANCE - d)
        rect = (x0, y0, x0 + w, y0 + d)
        edges = rect_segments(*rect)
        if min(segment_segment_distance(e[:2], e[2:], wall_segs).min() for e in edges) < WALL_CLEARANCE:
            continue
        if any(_rect_distance(rect, p) < OBJECT_GAP for p in placed):
            continue
        if any(_rect_distance(rect, (dx, dy, dx, dy)) < DOOR_CLEARANCE for dx, dy in doors):
            continue
        return SceneObject(category, *rect, height)
    return None


def _try_layout(rng, seed, profile: SceneProfile):
    width = _snap(rng.uniform(profile.min_size, profile.max_size))
    height = _snap(rng.uniform(profile.min_size, profile.max_size))
    outer_tex, inner_tex = (int(t) for t in rng.choice(len(WALL_PALETTE), size=2, replace=False))
    floor_tex = int(rng.integers(len(FLOOR_PALETTE)))
    walls = [
        Wall(0.0, 0.0, width, 0.0, outer_tex),
        Wall(width, 0.0, width, height, outer_tex),
        Wall(width, height, 0.0, height, outer_tex),
        Wall(0.0, height, 0.0, 0.0, outer_tex),
    ]
    rooms, inner, doors = _split_rooms(rng, width, height, profile.max_splits, inner_tex)
    walls += inner
    wall_segs = np.array([[w.x0, w.y0, w.x1, w.y1] for w in walls], dtype=np.float64)

    categories = list(range(NUM_CATEGORIES))
    extras = int(rng.integers(0, profile.max_extra_objects + 1))
    categories += [int(c) for c in rng.integers(0, NUM_CATEGORIES, extras)]
    objects, placed = [], []
    for idx, cat in enumerate(categories):
        obj = _place_object(rng, cat, rooms, wall_segs, placed, doors)
        if obj is None:
            if idx < NUM_CATEGORIES:
                return None
            continue
        objects.append(obj)
        placed.append((obj.x0, obj.y0, obj.x1, obj.y1))

    free = free_cells(width, height, wall_segs, np.array(placed).reshape(-1, 4))
    labels, n = ndimage.label(free)
    if n == 0:
        return None
    sizes = ndimage.sum(free, labels, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < MIN_REACHABLE * free.sum() or sizes[best - 1] < 2:
        return None
    spawn = tuple((int(i), int(j)) for i, j in np.argwhere(labels == best))
    return SceneSpec(seed=seed, width=width, height=height, walls=tuple(walls), objects=tuple(objects),
                     spawn_cells=spawn, floor_texture=floor_tex, doors=tuple(doors))


def generate_scene(seed: int, profile: SceneProfile | None = None) -> SceneSpec:
    profile = profile or SceneProfile()
    rng = np.random.default_rng(seed)
    for _ in range(_LAYOUT_ATTEMPTS):
        scene = _try_layout(rng, seed, profile)
        if scene is not None:
            return scene
    raise SceneGenerationError(seed, f"no valid layout after {_LAYOUT_ATTEMPTS} attempts")


def generate_split(profile: SceneProfile, split: str) -> list[SceneSpec]:
    seeds = profile.train_seeds() if split == "train" else profile.test_seeds()
    return [generate_scene(s, profile) for s in seeds]
