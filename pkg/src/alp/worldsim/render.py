"""Column raycaster producing rgb, semantic and depth images.

One ray per image column over a 90 degree field of view. Ray directions are
``forward + right * xcam`` with ``xcam`` in [-1, 1], so the ray parameter at a
hit is already the perpendicular (fisheye-free) distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ray_segment, rect_segments
from .scene import BACKGROUND, FLOOR_PALETTE, WALL_HEIGHT, WALL_PALETTE, SceneSpec

MAX_RANGE = 10.0
CAMERA_HEIGHT = 1.25
_CEILING = np.array([0.82, 0.82, 0.80])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int  # degrees, multiple of 30 in [0, 360)


@dataclass
class Observation:
    rgb_u8: np.ndarray  # (H, W, 3) uint8
    semantic: np.ndarray  # (H, W) uint8, category id or 255
    depth: np.ndarray  # (H, W) float32 in [0, 1]
    scene_id: int
    step: int = 0

    @property
    def rgb(self) -> np.ndarray:
        return self.rgb_u8.astype(np.float32) / 255.0


_COS = {}
_SIN = {}
for _deg in range(0, 360, 30):
    _COS[_deg] = round(math.cos(math.radians(_deg)), 15)
    _SIN[_deg] = round(math.sin(math.radians(_deg)), 15)


def heading_vector(heading: int) -> tuple[float, float]:
    """Unit vector for a heading; exact for the axis-aligned multiples of 90."""
    heading %= 360
    if heading in _COS:
        return _COS[heading], _SIN[heading]
    rad = math.radians(heading)
    return math.cos(rad), math.sin(rad)


def ray_directions(pose: Pose, width: int) -> np.ndarray:
    fx, fy = heading_vector(pose.heading)
    rx, ry = fy, -fx  # right-hand side of the heading
    xcam = 2.0 * (np.arange(width) + 0.5) / width - 1.0
    return np.stack([fx + rx * xcam, fy + ry * xcam], axis=-1)


class _SceneGeometry:
    """Per-scene arrays cached for the raycaster."""

    def __init__(self, scene: SceneSpec):
        self.walls = scene.wall_segments
        self.wall_len = np.hypot(self.walls[:, 2] - self.walls[:, 0], self.walls[:, 3] - self.walls[:, 1])
        self.wall_color = WALL_PALETTE[[w.texture for w in scene.walls]]
        # walls running along y are darker, the usual cue for surface orientation
        self.wall_side = np.where(np.abs(self.walls[:, 2] - self.walls[:, 0]) < 1e-9, 0.8, 1.0)
        objs = scene.objects
        self.n_obj = len(objs)
        self.obj_segs = np.concatenate([rect_segments(o.x0, o.y0, o.x1, o.y1) for o in objs]) if objs else np.zeros((0, 4))
        self.obj_height = np.array([o.height for o in objs])
        self.obj_category = np.array([o.category for o in objs], dtype=np.uint8)
        self.obj_color = np.array([o.albedo for o in objs]).reshape(-1, 3)
        self.floor = FLOOR_PALETTE[scene.floor_texture]


def _geometry(scene: SceneSpec) -> _SceneGeometry:
    geo = scene.__dict__.get("_render_geometry")
    if geo is None:
        geo = _SceneGeometry(scene)
        scene.__dict__["_render_geometry"] = geo
    return geo


def _shade(d):
    return 1.0 / (1.0 + 0.12 * d)


def render(scene: SceneSpec, pose: Pose, width: int = 64, height: int = 64, step: int = 0) -> Observation:
    geo = _geometry(scene)
    origin = (pose.x, pose.y)
    dirs = ray_directions(pose, width)
    focal = width / 2.0
    rows = (np.arange(height) + 0.5 - height / 2.0) / focal  # tan of the downward angle

    # nearest wall per column
    if len(geo.walls):
        s, u = ray_segment(origin, dirs, geo.walls)
        wi = np.argmin(s, axis=1)
        cols = np.arange(width)
        wall_d = s[cols, wi]
        wall_u = u[cols, wi] * geo.wall_len[wi]
    else:
        wi = np.zeros(width, dtype=np.int64)
        wall_d = np.full(width, np.inf)
        wall_u = np.zeros(width)

    # candidate surfaces: index 0 is the wall, 1.. are objects
    n_cand = 1 + geo.n_obj
    cand = np.full((n_cand, height, width), np.inf)
    z = CAMERA_HEIGHT - rows[:, None] * np.where(np.isfinite(wall_d), wall_d, 0.0)[None, :]
    cand[0] = np.where(np.isfinite(wall_d)[None, :] & (z >= 0) & (z <= WALL_HEIGHT), wall_d[None, :], np.inf)
    obj_u = np.zeros((geo.n_obj, width))
    obj_lid = np.zeros((geo.n_obj, height, width), dtype=bool)
    if geo.n_obj:
        so, uo = ray_segment(origin, dirs, geo.obj_segs)
        so = so.reshape(width, geo.n_obj, 4)
        uo = uo.reshape(width, geo.n_obj, 4)
        face = np.argmin(so, axis=2)
        obj_d = np.take_along_axis(so, face[..., None], axis=2)[..., 0].T  # (O, W) entry distance
        obj_u = np.take_along_axis(uo, face[..., None], axis=2)[..., 0].T
        exit_d = np.where(np.isfinite(so), so, -np.inf).max(axis=2).T
        seen = np.isfinite(obj_d)[:, None, :]
        hgt = geo.obj_height[:, None, None]
        dz = np.where(np.isfinite(obj_d), obj_d, 0.0)
        zo = CAMERA_HEIGHT - rows[None, :, None] * dz[:, None, :]
        front = seen & (zo >= 0) & (zo <= hgt)
        # rays passing over the front edge but dropping below the top before the exit face hit the lid
        ez = CAMERA_HEIGHT - rows[None, :, None] * np.where(seen, exit_d[:, None, :], 0.0)
        lid = seen & ~front & (zo > hgt) & (ez <= hgt) & (rows[None, :, None] > 0)
        lid_d = (CAMERA_HEIGHT - hgt) / np.where(rows > 0, rows, 1.0)[None, :, None]
        cand[1:] = np.where(front, obj_d[:, None, :], np.where(lid, lid_d, np.inf))
        obj_lid = lid

    which = np.argmin(cand, axis=0)
    dist = np.take_along_axis(cand, which[None], axis=0)[0]
    hit = np.isfinite(dist)

    semantic = np.full((height, width), BACKGROUND, dtype=np.uint8)
    depth = np.ones((height, width), dtype=np.float32)
    depth[hit] = np.minimum(dist[hit] / MAX_RANGE, 1.0)

    rgb = np.empty((height, width, 3))
    # floor and ceiling
    below = rows > 0
    floor_d = np.where(below, CAMERA_HEIGHT / np.where(below, rows, 1.0), np.inf)
    fx = pose.x + floor_d[:, None] * dirs[None, :, 0]
    fy = pose.y + floor_d[:, None] * dirs[None, :, 1]
    with np.errstate(invalid="ignore"):
        checker = (np.floor(fx / 0.5) + np.floor(fy / 0.5)) % 2
    floor_rgb = geo.floor[None, None, :] * (0.8 + 0.2 * np.nan_to_num(checker))[..., None]
    floor_rgb *= _shade(np.nan_to_num(floor_d, posinf=MAX_RANGE))[:, None, None]
    rgb[:] = np.where(below[:, None, None], floor_rgb, _CEILING[None, None, :])

    wall_px = hit & (which == 0)
    if wall_px.any():
        stripe = 0.85 + 0.15 * (np.floor(wall_u / 0.5) % 2)
        col = geo.wall_color[wi] * (geo.wall_side[wi] * stripe * _shade(np.nan_to_num(wall_d, posinf=MAX_RANGE)))[:, None]
        rgb[wall_px] = np.broadcast_to(col[None], (height, width, 3))[wall_px]
    for j in range(geo.n_obj):
        px = hit & (which == j + 1)
        if not px.any():
            continue
        semantic[px] = geo.obj_category[j]
        band = 0.8 + 0.2 * (np.floor(obj_u[j] / 0.2) % 2)
        col = geo.obj_color[j][None, :] * (band * _shade(np.nan_to_num(obj_d[j], posinf=MAX_RANGE)))[:, None]
        face_px = px & ~obj_lid[j]
        rgb[face_px] = np.broadcast_to(col[None], (height, width, 3))[face_px]
        lid_px = px & obj_lid[j]
        if lid_px.any():
            rgb[lid_px] = np.minimum(geo.obj_color[j] * 1.15, 1.0)[None, :] * _shade(dist[lid_px])[:, None]

    rgb_u8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Observation(rgb_u8=rgb_u8, semantic=semantic, depth=depth, scene_id=scene.seed, step=step)
