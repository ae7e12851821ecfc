"""Rollout windows: collection, intrinsic relabeling, reward normalization, GAE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from .policy import NO_PREV_ACTION
from .worldsim import VecEnv

EPS_NORM = 1e-8


class RunningStd:
    """Streaming mean/variance (Welford, with Chan's merge for batches)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values) -> None:
        x = np.asarray(values, dtype=np.float64).ravel()
        if x.size == 0:
            return
        other = RunningStd()
        other.count = x.size
        other.mean = float(x.mean())
        other.m2 = float(((x - other.mean) ** 2).sum())
        self.merge(other)

    def merge(self, other: "RunningStd") -> "RunningStd":
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        return self

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 0.0))


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float
    done: bool
    hidden0: np.ndarray


@dataclass
class RolloutBatch:
    """Time-major arrays of shape (L, N, ...) for one collection window."""

    obs: np.ndarray
    actions: np.ndarray
    prev_actions: np.ndarray
    starts: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    hidden0: np.ndarray
    scene_ids: np.ndarray
    poses: np.ndarray
    bootstrap: np.ndarray
    rewards: np.ndarray | None = None
    norm_rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def num_envs(self) -> int:
        return self.actions.shape[1]

    def transitions(self, env: int) -> Iterator[Transition]:
        for t in range(self.length):
            yield Transition(
                self.obs[t, env], int(self.actions[t, env]), float(self.log_probs[t, env]),
                float(self.values[t, env]),
                float(self.rewards[t, env]) if self.rewards is not None else float("nan"),
                bool(self.dones[t, env]), self.hidden0[env])


class Collector:
    """Carries frames, previous actions and recurrent state across windows."""

    def __init__(self, envs: VecEnv, policy, rng: np.random.Generator, deterministic_actions: bool = False):
        self.envs = envs
        self.policy = policy
        self.rng = rng
        self.greedy = deterministic_actions
        n = len(envs)
        self.frames = envs.reset()
        self.prev = np.full(n, NO_PREV_ACTION, dtype=np.int64)
        self.starts = np.ones(n, dtype=bool)
        self.hidden = policy.initial_hidden(n)
        self.frames_done = 0

    def collect(self, length: int) -> RolloutBatch:
        n = len(self.envs)
        h, w = self.frames.shape[1:3]
        obs = np.empty((length, n, h, w, 3), dtype=np.uint8)
        actions = np.empty((length, n), dtype=np.int64)
        prev = np.empty((length, n), dtype=np.int64)
        starts = np.empty((length, n), dtype=bool)
        dones = np.empty((length, n), dtype=bool)
        logp = np.empty((length, n), dtype=np.float32)
        values = np.empty((length, n), dtype=np.float32)
        scene_ids = np.empty((length, n), dtype=np.int64)
        poses = np.empty((length, n, 3), dtype=np.float32)
        hidden0 = self.hidden.numpy().copy()
        for t in range(length):
            obs[t] = self.frames
            prev[t] = self.prev
            starts[t] = self.starts
            scene_ids[t] = self.envs.scene_ids()
            poses[t] = [(p.x, p.y, p.heading) for p in self.envs.poses()]
            out = self.policy.act(self.frames, self.prev, self.hidden, self.starts,
                                  rng=None if self.greedy else self.rng)
            actions[t] = out.actions
            logp[t] = out.log_probs
            values[t] = out.values
            self.frames, done = self.envs.step(out.actions)
            dones[t] = done
            self.hidden = out.hidden
            self.prev = np.where(done, NO_PREV_ACTION, out.actions)
            self.starts = done.copy()
        bootstrap = self.policy.value_of(self.frames, self.prev, self.hidden, self.starts)
        self.frames_done += length * n
        return RolloutBatch(obs=obs, actions=actions, prev_actions=prev, starts=starts, dones=dones,
                            log_probs=logp, values=values, hidden0=hidden0, scene_ids=scene_ids,
                            poses=poses, bootstrap=np.asarray(bootstrap, dtype=np.float32))


def collect_window(policy, collector: Collector, length: int) -> RolloutBatch:
    collector.policy = policy
    return collector.collect(length)


def relabel_intrinsic(batch: RolloutBatch, reward_fn: Callable[[np.ndarray], np.ndarray],
                      chunk: int = 1024) -> RolloutBatch:
    """Fill ``batch.rewards`` with ``reward_fn(o_t)`` for every stored observation."""
    flat = batch.obs.reshape(-1, *batch.obs.shape[2:])
    out = np.empty(len(flat), dtype=np.float64)
    with torch.no_grad():
        for s in range(0, len(flat), chunk):
            out[s:s + chunk] = np.asarray(reward_fn(flat[s:s + chunk]), dtype=np.float64)
    batch.rewards = out.reshape(batch.length, batch.num_envs).astype(np.float32)
    return batch


def normalize_rewards(batch: RolloutBatch, stat: RunningStd) -> RolloutBatch:
    """Divide raw rewards by the running std (mean is kept); stat absorbs the batch first."""
    stat.update(batch.rewards)
    batch.norm_rewards = (batch.rewards.astype(np.float64) / max(stat.std, EPS_NORM)).astype(np.float32)
    return batch


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimates over (L, N) arrays; returns ``(advantages, returns)``."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    next_v = np.asarray(bootstrap, dtype=np.float64)
    for t in range(r.shape[0] - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    rewards = batch.norm_rewards if batch.norm_rewards is not None else batch.rewards
    adv, ret = gae(rewards, batch.values, batch.dones, batch.bootstrap, gamma, lam)
    batch.advantages = adv.astype(np.float32)
    batch.returns = ret.astype(np.float32)
    return batch
