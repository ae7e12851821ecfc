"""Stage-1 exploration loop, coverage measurement and Stage-2 transfer runs."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ndmath as nd
from .actionrep import IDMHeads, idm_loss_value, window_starts
from .config import RunConfig, config_hash, serialize_config
from .downstream import DatasetWriter, build_model, evaluate, finetune, label_schedule, sample_labeled
from .intrinsic import (
    ContrastHeads, CRLState, FrozenEncoder, MomentumEncoder, RNDState, contrastive_repr_loss, crl_reward,
    crl_update, rnd_reward, rnd_update,
)
from .policy import NO_PREV_ACTION, Backbone, ModelBundle, ActOutput, ppo_update
from .rollout import Collector, RunningStd, compute_gae, normalize_rewards, relabel_intrinsic
from .worldsim import NUM_ACTIONS, CoverageGrid, SceneEnv, TrajectoryLog, VecEnv, generate_split

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"non-finite value at step {step}: {cause}")


def configure_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)


@dataclass
class ExploreResult:
    bundle: ModelBundle
    samples: list
    metrics: list
    scenes: list
    config_hash: str
    out_dir: Path | None = None
    extras: dict = field(default_factory=dict)


class Explorer:
    """Runs the Stage-1 loop one collection window at a time.

    Per window: collect, relabel with the intrinsic reward, normalise, GAE,
    representation update (IDM and/or contrastive), PPO update, reward-network
    update, momentum-encoder update, then labeled sampling when scheduled.
    """

    def __init__(self, cfg: RunConfig, out_dir: str | os.PathLike | None = None, deterministic: bool = False,
                 workers: int = 1, scenes=None):
        self.cfg = cfg
        self.hp = cfg.hyperparams()
        self.hash = config_hash(cfg)
        self.deterministic = deterministic
        self.out_dir = Path(out_dir) if out_dir is not None else None
        configure_determinism(cfg.seed, deterministic)
        self.scenes = list(scenes) if scenes is not None else generate_split(cfg.profile(), "train")
        self.scene_by_id = {s.seed: s for s in self.scenes}
        objectives = set(cfg.objectives)

        self.bundle = ModelBundle(cfg.image_size, cfg.channels, cfg.feature_dim, cfg.hidden_dim,
                                  shared="pg" in objectives)
        if "idm" in objectives:
            self.bundle.idm["heads"] = IDMHeads(cfg.idm_steps, cfg.feature_dim)
        self.contrast_modes = [m for m in ("simclr", "cpc") if m in objectives]
        if self.contrast_modes:
            self.bundle.idm["contrast"] = ContrastHeads(cfg.feature_dim)
        if cfg.rnd_encoder == "momentum":
            encoder = MomentumEncoder(self.bundle.backbone, cfg.momentum)
        else:
            encoder = FrozenEncoder(Backbone(cfg.image_size, cfg.channels, cfg.feature_dim))
        if cfg.reward_mode == "rnd":
            self.reward_state = RNDState(encoder, cfg.feature_dim)
            reward_params = self.reward_state.predictor_params()
        else:
            self.reward_state = CRLState(encoder, cfg.feature_dim, temperature=cfg.contrast_temperature)
            reward_params = self.reward_state.proj_params()
        self.bundle.reward[cfg.reward_mode] = self.reward_state

        self.ppo_opt = nd.Adam(self.bundle.policy_params(), lr=cfg.lr)
        repr_params = self.bundle.group_params("backbone", "idm") if (
            "idm" in objectives or self.contrast_modes) else {}
        self.repr_opt = nd.Adam(repr_params, lr=cfg.idm_lr) if repr_params else None
        self.reward_opt = nd.Adam(reward_params, lr=cfg.reward_lr)

        self.rng_ppo = np.random.default_rng([cfg.seed, 3])
        self.rng_label = np.random.default_rng([cfg.seed, 4])
        self.rng_aug = np.random.default_rng([cfg.seed, 5])
        self.reward_stat = RunningStd()

        self._log_files = []
        logs = [None] * cfg.num_envs
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(serialize_config(cfg))
            if cfg.log_trajectories:
                tdir = self.out_dir / "trajectories"
                tdir.mkdir(exist_ok=True)
                for k in range(cfg.num_envs):
                    fh = open(tdir / f"env_{k:02d}.alpt", "wb")
                    self._log_files.append(fh)
                    logs[k] = TrajectoryLog(fh)
        envs = [SceneEnv(self.scenes, [cfg.seed, 1, k], cfg.max_episode_steps, cfg.image_size, logs[k])
                for k in range(cfg.num_envs)]
        self.envs = VecEnv(envs, workers=1 if deterministic else workers)
        self.collector = Collector(self.envs, self.bundle, np.random.default_rng([cfg.seed, 2]))

        self.n_windows = max(1, cfg.total_frames // (cfg.window * cfg.num_envs))
        self.schedule = set(label_schedule(self.n_windows, cfg.label_events))
        self.window_index = 0
        self.samples = []
        self.metrics = []
        self.writer = DatasetWriter(self.out_dir / "dataset.alpd") if self.out_dir is not None else None
        self._t0 = time.perf_counter()

    # ------------------------------------------------------------ pieces

    def reward_fn(self, frames):
        if self.cfg.reward_mode == "rnd":
            return rnd_reward(frames, self.reward_state)
        return crl_reward(frames, self.reward_state, self.rng_aug)

    def representation_update(self, batch) -> dict:
        if self.repr_opt is None:
            return {}
        heads = self.bundle.idm["heads"] if "heads" in self.bundle.idm else None
        starts = window_starts(batch.dones, heads.k) if heads is not None else None
        if heads is not None and len(starts) == 0:
            log.warning("no inverse-dynamics windows of length %d in batch", heads.k)
        out = {}
        for _ in range(self.cfg.idm_epochs):
            total = None
            if heads is not None and len(starts):
                loss = idm_loss_value(batch, heads, self.bundle.backbone, starts)
                out["idm_loss"] = float(loss.detach())
                total = loss
            for mode in self.contrast_modes:
                loss = contrastive_repr_loss(batch, self.bundle.backbone, self.bundle.idm["contrast"], mode,
                                             self.rng_aug, self.cfg.contrast_temperature)
                out[f"{mode}_loss"] = float(loss.detach())
                total = loss if total is None else total + loss
            if total is None:
                break
            nd.check_finite("representation_loss", total)
            self.repr_opt.zero_grad()
            nd.backprop(total, self.repr_opt.params)
            self.repr_opt.step()
        return out

    def reward_update(self, batch) -> float:
        flat = batch.obs.reshape(-1, *batch.obs.shape[2:])
        value = float("nan")
        feats = self.reward_state.features(flat) if self.cfg.reward_mode == "rnd" else None
        for _ in range(self.cfg.reward_epochs):
            if self.cfg.reward_mode == "rnd":
                value = rnd_update(flat, self.reward_state, self.reward_opt, feats)
            else:
                value = crl_update(flat, self.reward_state, self.reward_opt, self.rng_aug)
        return value

    # ------------------------------------------------------------ loop

    def step_window(self) -> dict:
        cfg, hp = self.cfg, self.hp
        frames_before = self.collector.frames_done
        try:
            batch = self.collector.collect(cfg.window)
            if cfg.reward_mode == "rnd":
                self.reward_state.observe(batch.obs)
            relabel_intrinsic(batch, self.reward_fn)
            nd.check_finite("intrinsic_reward", torch.as_tensor(batch.rewards))
            normalize_rewards(batch, self.reward_stat)
            compute_gae(batch, hp.gamma, hp.gae_lambda)
            rep = self.representation_update(batch)
            self.ppo_opt.lr = hp.lr_at(frames_before)
            clip = hp.clip_at(frames_before)
            ppo = ppo_update(batch, self.bundle, hp, self.ppo_opt, clip, self.rng_ppo)
            reward_loss = self.reward_update(batch)
            self.reward_state.encoder.update(self.bundle.backbone)
        except nd.NumericError as exc:
            raise TrainingDiverged(self.collector.frames_done, exc) from exc

        labeled = 0
        if self.window_index in self.schedule:
            new = sample_labeled(batch, cfg.label_budget, self.rng_label, self.scene_by_id, frames_before)
            self.samples.extend(new)
            if self.writer is not None:
                self.writer.append(new)
            labeled = len(new)

        step = self.collector.frames_done
        record = {
            "step": step,
            "window": self.window_index,
            "wall_time": None if self.deterministic else round(time.perf_counter() - self._t0, 3),
            "config_hash": self.hash,
            "policy_loss": ppo.policy_loss,
            "value_loss": ppo.value_loss,
            "entropy": ppo.entropy,
            "clip_fraction": ppo.clip_fraction,
            "grad_norm": ppo.grad_norm,
            "lr": self.ppo_opt.lr,
            "clip_eps": clip,
            "reward_mean": float(batch.rewards.mean()),
            "reward_running_std": self.reward_stat.std,
            "reward_loss": reward_loss,
            "episodes_ended": int(batch.dones.sum()),
            "forward_fraction": float((batch.actions == 0).mean()),
            "labeled": labeled,
        }
        record.update(rep)
        self.metrics.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if self.deterministic:
                with open(self.out_dir / "timing.jsonl", "a") as fh:
                    fh.write(json.dumps({"step": step, "wall_time": round(time.perf_counter() - self._t0, 3)}) + "\n")
            every = cfg.checkpoint_every
            if every > 0 and step // every > frames_before // every:
                self.save_checkpoint(self.out_dir / "checkpoints" / f"step_{step:09d}.alpw")
        self.window_index += 1
        return record

    def save_checkpoint(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        nd.checkpoint.save(path, nd.checkpoint.state_entries(self.bundle))

    def run(self, progress=None) -> ExploreResult:
        try:
            while self.window_index < self.n_windows:
                record = self.step_window()
                if progress is not None:
                    progress(record)
            if self.out_dir is not None:
                self.save_checkpoint(self.out_dir / "final.alpw")
        finally:
            self.close()
        return ExploreResult(self.bundle, self.samples, self.metrics, self.scenes, self.hash, self.out_dir)

    def close(self) -> None:
        self.envs.close()
        for fh in self._log_files:
            if not fh.closed:
                fh.close()


def explore(cfg: RunConfig, out_dir=None, deterministic: bool = False, workers: int = 1, scenes=None,
            progress=None) -> ExploreResult:
    return Explorer(cfg, out_dir, deterministic, workers, scenes).run(progress)


# ---------------------------------------------------------------- coverage

class UniformPolicy:
    """Uniform-random actions with the same interface as ModelBundle.act."""

    def initial_hidden(self, n: int) -> torch.Tensor:
        return torch.zeros(n, 1)

    def act(self, frames, prev_action, hidden, starts, rng=None) -> ActOutput:
        n = len(frames)
        rng = rng if rng is not None else np.random.default_rng(0)
        actions = rng.integers(NUM_ACTIONS, size=n).astype(np.int64)
        return ActOutput(actions, np.full(n, -np.log(NUM_ACTIONS), np.float32), np.zeros(n, np.float32),
                         hidden, torch.zeros(n, NUM_ACTIONS))

    def value_of(self, frames, prev_action, hidden, starts) -> np.ndarray:
        return np.zeros(len(frames), np.float32)


def measure_coverage(policy, scenes, steps: int, num_envs: int, episode_steps: int, seed: int,
                     image_size: int = 64) -> dict:
    """Roll a policy for ``steps`` total agent steps; count unique cells per episode.

    Returns the sum and mean over episodes of per-episode unique 0.25 m cells,
    plus the total path length.
    """
    envs = VecEnv([SceneEnv(scenes, [seed, 7, k], episode_steps, image_size) for k in range(num_envs)])
    rng = np.random.default_rng([seed, 8])
    frames = envs.reset()
    grids = [CoverageGrid(env.scene) for env in envs.envs]
    for g, env in zip(grids, envs.envs):
        g.visit(env.pose)
    prev = np.full(num_envs, NO_PREV_ACTION, np.int64)
    starts = np.ones(num_envs, bool)
    hidden = policy.initial_hidden(num_envs)
    finished = []
    per_env = -(-steps // num_envs)
    for _ in range(per_env):
        out = policy.act(frames, prev, hidden, starts, rng=rng)
        frames, dones = envs.step(out.actions)
        hidden, starts = out.hidden, dones.copy()
        prev = np.where(dones, NO_PREV_ACTION, out.actions)
        for k, env in enumerate(envs.envs):
            if dones[k]:
                finished.append(grids[k])
                grids[k] = CoverageGrid(env.scene)
            grids[k].visit(env.pose)
    envs.close()
    episodes = finished + grids
    cells = [g.unique_cells for g in episodes]
    return {"unique_cells": int(sum(cells)), "episodes": len(episodes), "mean_unique_cells": float(np.mean(cells)),
            "path_length": float(sum(g.path_length for g in episodes)), "steps": per_env * num_envs}


# ---------------------------------------------------------------- transfer

def transfer(cfg: RunConfig, init: dict | None, samples, seed: int, train_scenes, test_scenes,
             task: str | None = None) -> tuple:
    """Finetune from ``init`` (ALPW entries or None for random) and evaluate both splits."""
    task = task or cfg.finetune_task
    model = build_model(task, init, seed, cfg.image_size, cfg.channels, cfg.feature_dim)
    finetune(model, samples, cfg.finetune_epochs, cfg.finetune_lr, cfg.finetune_batch, seed)
    h = config_hash(cfg)
    reports = []
    for split, scenes, n in (("train", train_scenes, cfg.eval_train_frames), ("test", test_scenes, cfg.eval_test_frames)):
        rep = evaluate(model, scenes, split, n, seed=cfg.seed, profile=cfg.profile())
        rep.config_hash = h
        reports.append(rep)
    return model, reports[0], reports[1]
