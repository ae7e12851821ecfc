"""Procedural 2.5D indoor world: scenes, kinematics, raycast rendering, coverage."""
from .coverage import CoverageGrid, cell_of, coverage_from_log, read_pgm
from .env import (
    FORWARD, NO_ACTION, NUM_ACTIONS, STEP_SIZE, TURN_DEGREES, TURN_LEFT, TURN_RIGHT,
    EnvFault, SceneEnv, TrajectoryLog, VecEnv, sample_spawn, step,
)
from .render import CAMERA_HEIGHT, MAX_RANGE, Observation, Pose, ray_directions, render
from .scene import (
    AGENT_RADIUS, BACKGROUND, CATEGORY_NAMES, CELL, NUM_CATEGORIES, TEST_SEED_OFFSET, WALL_HEIGHT,
    SceneGenerationError, SceneObject, SceneProfile, SceneSpec, Wall, generate_scene, generate_split,
)
