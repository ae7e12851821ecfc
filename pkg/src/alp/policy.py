"""Recurrent actor-critic over the shared visual backbone, and the PPO update."""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from . import ndmath as nd
from .worldsim import NUM_ACTIONS

GROUPS = ("backbone", "recurrent", "actor", "value", "idm", "reward")
NO_PREV_ACTION = NUM_ACTIONS  # index of the learned "episode start" embedding


@dataclass
class HyperParams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    ppo_epochs: int = 4
    ppo_minibatches: int = 2
    lr: float = 2.5e-4
    idm_lr: float = 2.5e-4
    reward_lr: float = 1e-4
    idm_steps: int = 8
    idm_epochs: int = 4
    window: int = 64
    num_envs: int = 8
    total_frames: int = 200_000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"hyperparameter {f.name} must be positive")

    def _remaining(self, frames_done: int) -> float:
        return max(0.0, 1.0 - frames_done / self.total_frames)

    def clip_at(self, frames_done: int) -> float:
        return self.clip_eps * self._remaining(frames_done)

    def lr_at(self, frames_done: int) -> float:
        return self.lr * self._remaining(frames_done)


def he_init_(module: nn.Module) -> nn.Module:
    """Fan-in He initialisation for ReLU conv/linear layers, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return module


def to_input(frames) -> torch.Tensor:
    """uint8 (..., H, W, 3) frames -> float (B, 3, H, W) centred on zero."""
    t = torch.as_tensor(np.asarray(frames))
    t = t.reshape(-1, *t.shape[-3:]).permute(0, 3, 1, 2)
    return t.float().div_(255.0).sub_(0.5)


class Backbone(nn.Module):
    """2x2 average pool, three stride-2 3x3 convs, flatten, affine to the feature vector."""

    def __init__(self, image_size: int = 64, channels=(8, 16, 32), feature_dim: int = 128):
        super().__init__()
        chans = (3,) + tuple(channels)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        side = image_size // 2
        for _ in channels:
            side = (side + 1) // 2
        self.map_shape = (chans[-1], side, side)
        self.fc = nn.Linear(chans[-1] * side * side, feature_dim)
        self.feature_dim = feature_dim
        he_init_(self)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        x = nd.avg_pool2(x)
        for conv in self.convs:
            x = nd.relu(nd.conv2d(x, conv.weight, conv.bias, stride=2, padding=1))
        return x

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return nd.relu(nd.affine(fmap.flatten(1), self.fc.weight, self.fc.bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.feature_map(x))


class MLP(nn.Module):
    def __init__(self, sizes):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        for layer in self.layers[:-1]:
            he_init_(layer)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = nd.affine(x, layer.weight, layer.bias)
            if i < len(self.layers) - 1:
                x = nd.relu(x)
        return x


class RecurrentCore(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int, embed_dim: int = 32):
        super().__init__()
        self.action_embed = nn.Embedding(NUM_ACTIONS + 1, embed_dim)
        self.gru = nn.GRUCell(feature_dim + embed_dim, hidden_dim)
        self.encoder: Backbone | None = None

    def forward(self, feat, prev_action, h, starts):
        h = h * (~starts).float().unsqueeze(-1)
        x = nd.concat([feat, self.action_embed(prev_action)], dim=-1)
        g = self.gru
        return nd.gru_cell(x, h, g.weight_ih, g.weight_hh, g.bias_ih, g.bias_hh)


@dataclass
class ActOutput:
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    hidden: torch.Tensor
    logits: torch.Tensor


def sample_actions(logits: torch.Tensor, rng: np.random.Generator | None) -> np.ndarray:
    """Inverse-CDF sampling from softmax(logits); ``rng=None`` means argmax (ties -> lowest index)."""
    if rng is None:
        return torch.argmax(logits, dim=-1).numpy().astype(np.int64)
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(len(probs))[:, None]
    return np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1).astype(np.int64)


def categorical_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = nd.log_softmax(logits)
    return -(logp.exp() * logp).sum(-1)


class ModelBundle(nn.Module):
    """Every trainable network of a run, in one registry keyed by group.

    ``shared=False`` gives the policy its own encoder (inside the recurrent
    group) so policy gradients stop reaching the representation backbone.
    """

    def __init__(self, image_size: int = 64, channels=(8, 16, 32), feature_dim: int = 128,
                 hidden_dim: int = 128, shared: bool = True):
        super().__init__()
        self.backbone = Backbone(image_size, channels, feature_dim)
        self.recurrent = RecurrentCore(feature_dim, hidden_dim)
        if not shared:
            self.recurrent.encoder = Backbone(image_size, channels, feature_dim)
        self.actor = nn.Linear(hidden_dim, NUM_ACTIONS)
        self.value = nn.Linear(hidden_dim, 1)
        self.idm = nn.ModuleDict()
        self.reward = nn.ModuleDict()
        self.hidden_dim = hidden_dim
        self.shared = shared

    @property
    def policy_encoder(self) -> Backbone:
        return self.backbone if self.recurrent.encoder is None else self.recurrent.encoder

    def group_params(self, *groups: str) -> dict[str, nn.Parameter]:
        out = {}
        for g in groups:
            if g not in GROUPS:
                raise KeyError(g)
            for name, p in getattr(self, g).named_parameters():
                if p.requires_grad:
                    out[f"{g}.{name}"] = p
        return out

    def policy_params(self) -> dict[str, nn.Parameter]:
        groups = ("backbone",) if self.shared else ()
        return self.group_params(*groups, "recurrent", "actor", "value")

    def initial_hidden(self, n: int) -> torch.Tensor:
        return torch.zeros(n, self.hidden_dim)

    def heads(self, h: torch.Tensor):
        logits = nd.affine(h, self.actor.weight, self.actor.bias)
        value = nd.affine(h, self.value.weight, self.value.bias).squeeze(-1)
        return logits, value

    @torch.no_grad()
    def act(self, frames, prev_action, hidden, starts, rng: np.random.Generator | None = None) -> ActOutput:
        feat = self.policy_encoder(to_input(frames))
        prev = torch.as_tensor(np.asarray(prev_action), dtype=torch.long)
        st = torch.as_tensor(np.asarray(starts), dtype=torch.bool)
        h = self.recurrent(feat, prev, hidden, st)
        logits, value = self.heads(h)
        actions = sample_actions(logits, rng)
        logp = nd.log_softmax(logits).gather(1, torch.as_tensor(actions)[:, None])[:, 0]
        return ActOutput(actions, logp.numpy(), value.numpy(), h, logits)

    @torch.no_grad()
    def value_of(self, frames, prev_action, hidden, starts) -> np.ndarray:
        return self.act(frames, prev_action, hidden, starts, rng=None).values

    def evaluate_sequence(self, obs, prev_actions, starts, h0):
        """Re-run the policy over (L, n) sequences; returns logits (L,n,A) and values (L,n)."""
        L, n = obs.shape[:2]
        feat = self.policy_encoder(to_input(obs)).reshape(L, n, -1)
        prev = torch.as_tensor(prev_actions, dtype=torch.long)
        st = torch.as_tensor(starts, dtype=torch.bool)
        h = h0
        outs = []
        for t in range(L):
            h = self.recurrent(feat[t], prev[t], h, st[t])
            outs.append(h)
        logits, values = self.heads(torch.stack(outs))
        return logits, values

    def snapshot(self) -> "ModelBundle":
        return copy.deepcopy(self)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-element ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``."""
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class PPOReport:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float


def ppo_update(batch, bundle: ModelBundle, hp: HyperParams, optimizer: nd.Adam,
               clip_eps: float, rng: np.random.Generator) -> PPOReport:
    """Clipped-surrogate PPO epochs over env-axis minibatches of whole sequences."""
    n_envs = batch.actions.shape[1]
    adv_all = torch.as_tensor(batch.advantages, dtype=torch.float32)
    ret_all = torch.as_tensor(batch.returns, dtype=torch.float32)
    old_all = torch.as_tensor(batch.log_probs, dtype=torch.float32)
    act_all = torch.as_tensor(batch.actions, dtype=torch.long)
    h0_all = torch.as_tensor(batch.hidden0, dtype=torch.float32)
    stats = np.zeros(5)
    count = 0
    for _ in range(hp.ppo_epochs):
        order = rng.permutation(n_envs)
        for idx in np.array_split(order, min(hp.ppo_minibatches, n_envs)):
            idx = np.sort(idx)
            logits, values = bundle.evaluate_sequence(
                batch.obs[:, idx], batch.prev_actions[:, idx], batch.starts[:, idx], h0_all[idx])
            logp_all = nd.log_softmax(logits)
            logp = logp_all.gather(-1, act_all[:, idx].unsqueeze(-1)).squeeze(-1)
            ratio = torch.exp(logp - old_all[:, idx])
            adv = adv_all[:, idx]
            policy_loss = -clipped_surrogate(ratio, adv, clip_eps).mean()
            value_loss = nd.mse(values, ret_all[:, idx])
            entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
            loss = policy_loss + hp.value_coef * value_loss - hp.entropy_coef * entropy
            nd.check_finite("ppo_loss", loss)
            optimizer.zero_grad()
            nd.backprop(loss, optimizer.params)
            norm = optimizer.step(max_grad_norm=hp.max_grad_norm)
            clip_frac = float(((ratio - 1.0).abs() > clip_eps).float().mean())
            stats += [float(policy_loss.detach()), float(value_loss.detach()), float(entropy.detach()), clip_frac, norm]
            count += 1
    return PPOReport(*(float(v) for v in stats / max(count, 1)))
