"""Labeled-data sampling, perception heads, finetuning and split evaluation."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import ndmath as nd
from ..policy import Backbone, to_input
from ..worldsim import NUM_CATEGORIES, TEST_SEED_OFFSET, Pose, SceneProfile, SceneSpec, render, sample_spawn
from .dataset import LabeledSample
from .metrics import (
    NUM_CLASSES, EvalReport, confusion_matrix, iou_per_class, pixel_accuracy, rmse, to_class_ids,
)

log = logging.getLogger(__name__)

TASKS = ("segmentation", "depth", "presence")


# ---------------------------------------------------------------- sampling

def label_schedule(n_windows: int, events: int) -> list[int]:
    """Window indices of ``events`` sampling events spread evenly over training."""
    events = min(events, n_windows)
    return sorted({int(math.ceil((i + 1) * n_windows / events)) - 1 for i in range(events)})


def sample_labeled(batch, budget: int, rng: np.random.Generator, scenes: dict[int, SceneSpec],
                   global_step: int = 0) -> list[LabeledSample]:
    """Pick up to ``budget`` frames per scene present in the window and attach simulator labels."""
    L, N = batch.scene_ids.shape
    flat_ids = batch.scene_ids.reshape(-1)
    out = []
    for sid in np.unique(flat_ids):
        idx = np.flatnonzero(flat_ids == sid)
        if budget > len(idx):
            log.warning("scene %d: budget %d exceeds %d available frames, taking all", sid, budget, len(idx))
        pick = np.sort(rng.choice(idx, size=min(budget, len(idx)), replace=False))
        scene = scenes[int(sid)]
        h = batch.obs.shape[2]
        for k in pick:
            t, n = divmod(int(k), N)
            x, y, heading = batch.poses[t, n]
            obs = render(scene, Pose(float(x), float(y), int(heading)), h, h)
            out.append(LabeledSample(batch.obs[t, n].copy(), obs.semantic, obs.depth, int(sid),
                                     global_step + t * N + n))
    return out


# ---------------------------------------------------------------- models

class PerceptionModel(nn.Module):
    """Backbone plus one task head.

    Dense heads start from the conv feature map concatenated with the backbone
    feature vector reshaped onto the same grid, then upsample with two
    transposed convolutions.
    """

    def __init__(self, task: str, image_size: int = 64, channels=(8, 16, 32), feature_dim: int = 128):
        super().__init__()
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.image_size = image_size
        self.backbone = Backbone(image_size, channels, feature_dim)
        c, side, _ = self.backbone.map_shape
        self.side = side
        self.vec_channels = feature_dim // (side * side)
        if task == "presence":
            self.head = nn.ModuleDict({"out": nn.Linear(c + feature_dim, NUM_CATEGORIES)})
            return
        up = image_size // side
        stride = int(round(math.sqrt(up)))
        if stride * stride != up:
            raise ValueError(f"upsampling factor {up} is not a square")
        out_ch = NUM_CLASSES if task == "segmentation" else 1
        self.head = nn.ModuleDict({
            "up1": nn.ConvTranspose2d(c + self.vec_channels, 32, stride, stride=stride),
            "up2": nn.ConvTranspose2d(32, out_ch, stride, stride=stride),
        })

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        fmap = self.backbone.feature_map(x)
        vec = self.backbone.head(fmap)
        if self.task == "presence":
            pooled = fmap.mean(dim=(2, 3))
            out = self.head["out"]
            return nd.affine(nd.concat([pooled, vec], dim=-1), out.weight, out.bias)
        grid = vec[:, : self.vec_channels * self.side * self.side].reshape(-1, self.vec_channels, self.side, self.side)
        h = nd.relu(self.head["up1"](nd.concat([fmap, grid], dim=1)))
        out = self.head["up2"](h)
        return out[:, 0] if self.task == "depth" else out


class CheckpointMismatch(ValueError):
    pass


def build_model(task: str, init: dict | None, seed: int, image_size: int = 64, channels=(8, 16, 32),
                feature_dim: int = 128) -> PerceptionModel:
    """Seeded model; ``init`` (ALPW entries) replaces the backbone weights when given."""
    torch.manual_seed(seed)
    model = PerceptionModel(task, image_size, channels, feature_dim)
    if init is not None:
        load_backbone(model.backbone, init)
    return model


def load_backbone(backbone: Backbone, entries: dict) -> None:
    own = backbone.state_dict()
    picked = {k[len("backbone."):]: v for k, v in entries.items() if k.startswith("backbone.")}
    missing = sorted(set(own) - set(picked))
    bad = sorted(k for k in own if k in picked and tuple(picked[k].shape) != tuple(own[k].shape))
    if missing or bad:
        raise CheckpointMismatch(f"backbone checkpoint mismatch: missing={missing} shape={bad}")
    backbone.load_state_dict({k: torch.as_tensor(np.array(picked[k])) for k in own})


def _targets(task: str, samples) -> torch.Tensor:
    if task == "segmentation":
        return torch.as_tensor(np.stack([to_class_ids(s.semantic) for s in samples]))
    if task == "depth":
        return torch.as_tensor(np.stack([s.depth for s in samples]))
    present = np.stack([[np.any(s.semantic == c) for c in range(NUM_CATEGORIES)] for s in samples])
    return torch.as_tensor(present, dtype=torch.float32)


def task_loss(task: str, out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if task == "segmentation":
        return F.cross_entropy(out, target)
    if task == "depth":
        return nd.mse(out, target)
    return F.binary_cross_entropy_with_logits(out, target)


def finetune(model: PerceptionModel, samples, epochs: int = 20, lr: float = 1e-3, batch_size: int = 16,
             seed: int = 0) -> list[float]:
    """End-to-end supervised training of backbone and head; returns mean loss per epoch."""
    if not samples:
        raise ValueError("finetune needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    x_all = to_input(np.stack([s.rgb for s in samples]))
    y_all = _targets(model.task, samples)
    opt = nd.Adam({k: p for k, p in model.named_parameters()}, lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[s:s + batch_size])
            loss = task_loss(model.task, model(x_all[idx]), y_all[idx])
            nd.check_finite("finetune_loss", loss)
            opt.zero_grad()
            nd.backprop(loss, opt.params)
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(samples))
    return history


# ---------------------------------------------------------------- evaluation

def eval_frames(scenes, n_frames: int, seed: int, image_size: int = 64):
    """Fresh frames from seeded random poses: (rgb u8, semantic, depth) stacks."""
    rgb, sem, dep = [], [], []
    for scene in scenes:
        rng = np.random.default_rng([seed, scene.seed])
        for _ in range(n_frames):
            obs = render(scene, sample_spawn(scene, rng), image_size, image_size)
            rgb.append(obs.rgb_u8)
            sem.append(obs.semantic)
            dep.append(obs.depth)
    return np.stack(rgb), np.stack(sem), np.stack(dep)


def check_split(scenes, split: str, profile: SceneProfile | None = None) -> None:
    seeds = [s.seed for s in scenes]
    if split == "test":
        allowed = set(profile.test_seeds()) if profile else None
        for sd in seeds:
            if sd < TEST_SEED_OFFSET or (allowed is not None and sd not in allowed):
                raise AssertionError(f"scene {sd} is not a test-split scene")
    elif split == "train":
        for sd in seeds:
            if sd >= TEST_SEED_OFFSET:
                raise AssertionError(f"scene {sd} is not a train-split scene")


@torch.no_grad()
def predict(model: PerceptionModel, rgb: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = []
    for s in range(0, len(rgb), chunk):
        out = model(to_input(rgb[s:s + chunk]))
        if model.task == "segmentation":
            out = torch.argmax(out, dim=1)
        elif model.task == "presence":
            out = out > 0
        outs.append(out.numpy())
    return np.concatenate(outs)


def report_from_predictions(task: str, split: str, semantic: np.ndarray, depth: np.ndarray,
                            pred: np.ndarray) -> EvalReport:
    rep = EvalReport(split=split, task=task, n_frames=len(semantic))
    truth_present = np.stack([[np.any(s == c) for c in range(NUM_CATEGORIES)] for s in semantic])
    if task == "segmentation":
        conf = confusion_matrix(pred, to_class_ids(semantic))
        iou = iou_per_class(conf)[:NUM_CATEGORIES]
        rep.category_iou = [float(v) for v in iou]
        rep.mean_iou = float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0
        rep.pixel_accuracy = pixel_accuracy(conf)
        pred_present = np.stack([[np.any(p == c) for c in range(NUM_CATEGORIES)] for p in pred])
        rep.presence_accuracy = [float(v) for v in (pred_present == truth_present).mean(0)]
    elif task == "depth":
        rep.depth_rmse = rmse(pred, depth)
        rep.depth_baseline_rmse = float(np.std(depth.astype(np.float64)))
    else:
        rep.presence_accuracy = [float(v) for v in (pred == truth_present).mean(0)]
    return rep


def evaluate(model: PerceptionModel, scenes, split: str, n_frames: int, seed: int = 0,
             profile: SceneProfile | None = None) -> EvalReport:
    check_split(scenes, split, profile)
    rgb, sem, dep = eval_frames(scenes, n_frames, seed, model.image_size)
    return report_from_predictions(model.task, split, sem, dep, predict(model, rgb))
