"""Novelty rewards (RND, CRL) and contrastive representation losses."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ndmath as nd
from .policy import MLP, Backbone, to_input


class MomentumEncoder(nn.Module):
    """Exponential moving average of a backbone; never receives gradients."""

    def __init__(self, live: Backbone, rho: float = 0.99):
        super().__init__()
        self.shadow = copy.deepcopy(live)
        for p in self.shadow.parameters():
            p.requires_grad_(False)
        self.rho = rho

    @torch.no_grad()
    def update(self, live: Backbone) -> None:
        momentum_update(self.shadow, live, self.rho)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.shadow(x)


@torch.no_grad()
def momentum_update(shadow: nn.Module, live: nn.Module, rho: float) -> nn.Module:
    for ps, pl in zip(shadow.parameters(), live.parameters()):
        if ps.shape != pl.shape:
            raise nd.ShapeError("momentum_update", ps.shape, pl.shape)
        ps.mul_(rho).add_(pl.detach(), alpha=1.0 - rho)
    return shadow


class FrozenEncoder(nn.Module):
    """A randomly initialised backbone kept fixed (the frozen-random option for f)."""

    def __init__(self, backbone: Backbone):
        super().__init__()
        self.shadow = backbone
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    def update(self, live) -> None:
        pass

    @torch.no_grad()
    def forward(self, x):
        return self.shadow(x)


# ---------------------------------------------------------------- augmentations

@dataclass
class AugmentationFamily:
    flip_p: float = 0.5
    scale: tuple = (0.6, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    saturation: tuple = (0.7, 1.3)

    def sample(self, rng: np.random.Generator, n: int) -> dict:
        area = rng.uniform(*self.scale, n)
        log_r = rng.uniform(np.log(self.ratio[0]), np.log(self.ratio[1]), n)
        r = np.exp(log_r)
        cw = np.minimum(np.sqrt(area * r), 1.0)
        ch = np.minimum(np.sqrt(area / r), 1.0)
        return {
            "flip": rng.random(n) < self.flip_p,
            "w": cw,
            "h": ch,
            "cx": rng.uniform(-1.0, 1.0, n) * (1.0 - cw),
            "cy": rng.uniform(-1.0, 1.0, n) * (1.0 - ch),
            "sat": rng.uniform(*self.saturation, n),
        }

    @staticmethod
    def identity(n: int) -> dict:
        return {"flip": np.zeros(n, bool), "w": np.ones(n), "h": np.ones(n),
                "cx": np.zeros(n), "cy": np.zeros(n), "sat": np.ones(n)}


def hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=[-1])


def augment(x: torch.Tensor, params: dict) -> torch.Tensor:
    """Apply flip / resized crop / saturation to images (B, 3, H, W) in [0, 1]."""
    flip = torch.as_tensor(params["flip"])
    x = torch.where(flip[:, None, None, None], hflip(x), x)
    full = np.isclose(params["w"], 1.0) & np.isclose(params["h"], 1.0)
    if not full.all():
        theta = torch.zeros(len(x), 2, 3)
        theta[:, 0, 0] = torch.as_tensor(params["w"], dtype=torch.float32)
        theta[:, 0, 2] = torch.as_tensor(params["cx"], dtype=torch.float32)
        theta[:, 1, 1] = torch.as_tensor(params["h"], dtype=torch.float32)
        theta[:, 1, 2] = torch.as_tensor(params["cy"], dtype=torch.float32)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        cropped = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
        x = torch.where(torch.as_tensor(full)[:, None, None, None], x, cropped)
    sat = torch.as_tensor(params["sat"], dtype=torch.float32)[:, None, None, None]
    gray = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
    return torch.clamp(gray + sat * (x - gray), 0.0, 1.0)


def _unit(frames) -> torch.Tensor:
    return to_input(frames) + 0.5


# ---------------------------------------------------------------- contrastive

def info_nce(anchors: torch.Tensor, positives: torch.Tensor, temperature: float = 1.0,
             normalize: bool = True) -> torch.Tensor:
    """InfoNCE with in-batch negatives: row i's positive is ``positives[i]``."""
    if anchors.shape != positives.shape:
        raise nd.ShapeError("info_nce", anchors.shape, positives.shape)
    if normalize:
        anchors = F.normalize(anchors, dim=-1)
        positives = F.normalize(positives, dim=-1)
    logits = anchors @ positives.T / temperature
    return nd.cross_entropy(logits, torch.arange(len(anchors)))


class ContrastHeads(nn.Module):
    """Projection head h_con and a forward-prediction MLP used by the CPC variant."""

    def __init__(self, feature_dim: int = 128, hidden: int = 256, out: int = 128):
        super().__init__()
        self.proj = MLP((feature_dim, hidden, out))
        self.predict = MLP((out, hidden, out))


def cpc_pairs(starts: np.ndarray, dones: np.ndarray, rng: np.random.Generator, groups: int,
              horizon: int = 4) -> list[list[tuple[int, int, int]]]:
    """Sample ``groups`` sets of (env, t, t+j) anchor/positive pairs, one per env.

    Positives lie 1..horizon steps ahead inside the same episode, so in-batch
    negatives always come from other environments.
    """
    L, N = dones.shape
    choices = [[(t, t + j) for t in range(L - 1) for j in range(1, horizon + 1)
                if t + j < L and not dones[t:t + j, n].any()] for n in range(N)]
    out = []
    for _ in range(groups):
        pairs = []
        for n in range(N):
            if choices[n]:
                t, tp = choices[n][int(rng.integers(len(choices[n])))]
                pairs.append((n, t, tp))
        out.append(pairs)
    return out


def contrastive_repr_loss(batch, backbone: Backbone, heads: ContrastHeads, mode: str,
                          rng: np.random.Generator, temperature: float = 0.07,
                          aug: AugmentationFamily | None = None, groups: int = 8,
                          max_frames: int = 256) -> torch.Tensor:
    """InfoNCE on M_repr features, either SimCLR (two views) or CPC (temporal positives)."""
    if mode == "simclr":
        flat = batch.obs.reshape(-1, *batch.obs.shape[2:])
        idx = np.sort(rng.choice(len(flat), size=min(max_frames, len(flat)), replace=False))
        x = _unit(flat[idx])
        aug = aug or AugmentationFamily()
        v1 = augment(x, aug.sample(rng, len(x))) - 0.5
        v2 = augment(x, aug.sample(rng, len(x))) - 0.5
        z1 = heads.proj(backbone(v1))
        z2 = heads.proj(backbone(v2))
        return info_nce(z1, z2, temperature)
    if mode != "cpc":
        raise ValueError(f"unknown contrastive mode {mode!r}")
    pair_sets = cpc_pairs(batch.starts, batch.dones, rng, groups)
    if any(len(p) < 2 for p in pair_sets):
        raise nd.ContractError("cpc needs positives from at least 2 distinct environments")
    L, N = batch.actions.shape
    feats = backbone(to_input(batch.obs)).reshape(L, N, -1)
    z = heads.proj(feats)
    losses = []
    for pairs in pair_sets:
        n = torch.as_tensor([p[0] for p in pairs])
        t = torch.as_tensor([p[1] for p in pairs])
        tp = torch.as_tensor([p[2] for p in pairs])
        losses.append(info_nce(heads.predict(z[t, n]), z[tp, n], temperature))
    return torch.stack(losses).mean()


# ---------------------------------------------------------------- RND

class RNDState(nn.Module):
    """Frozen random target and trained predictor, both 2-layer heads over features of f."""

    def __init__(self, encoder: nn.Module, feature_dim: int = 128, hidden: int = 512, out: int = 64):
        super().__init__()
        self.encoder = encoder
        self.target = MLP((feature_dim, hidden, out))
        self.predictor = MLP((feature_dim, hidden, out))
        for p in self.target.parameters():
            p.requires_grad_(False)

        # running per-dimension moments of f(o), used to whiten the heads' input
        self.register_buffer("feat_count", torch.zeros((), dtype=torch.float64))
        self.register_buffer("feat_mean", torch.zeros(feature_dim, dtype=torch.float64))
        self.register_buffer("feat_m2", torch.zeros(feature_dim, dtype=torch.float64))

    def predictor_params(self) -> dict:
        return {f"predictor.{k}": p for k, p in self.predictor.named_parameters()}

    @torch.no_grad()
    def observe(self, frames, chunk: int = 1024) -> None:
        """Fold encoder features of ``frames`` into the whitening statistics (Chan merge)."""
        flat = np.asarray(frames).reshape(-1, *np.asarray(frames).shape[-3:])
        for s in range(0, len(flat), chunk):
            f = self.encoder(to_input(flat[s:s + chunk])).double()
            n_b = float(len(f))
            mean_b = f.mean(0)
            m2_b = ((f - mean_b) ** 2).sum(0)
            n = self.feat_count + n_b
            delta = mean_b - self.feat_mean
            self.feat_mean += delta * n_b / n
            self.feat_m2 += m2_b + delta ** 2 * self.feat_count * n_b / n
            self.feat_count.fill_(n)

    def whiten(self, feats: torch.Tensor) -> torch.Tensor:
        if self.feat_count < 2:
            return feats
        std = torch.sqrt(self.feat_m2 / self.feat_count).clamp_min(1e-6)
        return ((feats.double() - self.feat_mean) / std).clamp(-5.0, 5.0).float()

    @torch.no_grad()
    def features(self, frames) -> torch.Tensor:
        return self.whiten(self.encoder(to_input(frames)))

    def residual(self, feats: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            tgt = self.target(feats)
        return self.predictor(feats) - tgt


@torch.no_grad()
def rnd_reward(frames, state: RNDState) -> np.ndarray:
    """Squared L2 error between predictor and frozen target on f(o)."""
    r = state.residual(state.features(frames))
    return (r.double() ** 2).sum(-1).numpy()


def rnd_update(frames, state: RNDState, optimizer: nd.Adam, feats: torch.Tensor | None = None) -> float:
    """One predictor step on ``frames`` (or on precomputed encoder features)."""
    feats = state.features(frames) if feats is None else feats
    loss = (state.residual(feats) ** 2).mean()
    nd.check_finite("rnd_loss", loss)
    optimizer.zero_grad()
    nd.backprop(loss, optimizer.params)
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------- CRL

class CRLState(nn.Module):
    def __init__(self, encoder: nn.Module, feature_dim: int = 128, hidden: int = 128, out: int = 128,
                 temperature: float = 0.07):
        super().__init__()
        self.encoder = encoder
        self.proj = MLP((feature_dim, hidden, out))
        self.aug = AugmentationFamily()
        self.temperature = temperature

    def proj_params(self) -> dict:
        return {f"proj.{k}": p for k, p in self.proj.named_parameters()}

    def views(self, frames, rng: np.random.Generator, params1=None, params2=None):
        x = _unit(frames)
        p1 = params1 if params1 is not None else self.aug.sample(rng, len(x))
        p2 = params2 if params2 is not None else self.aug.sample(rng, len(x))
        with torch.no_grad():
            f1 = self.encoder(augment(x, p1) - 0.5)
            f2 = self.encoder(augment(x, p2) - 0.5)
        return f1, f2


@torch.no_grad()
def crl_reward(frames, state: CRLState, rng: np.random.Generator, params1=None, params2=None) -> np.ndarray:
    """``1 - <z1, z2>`` for unit-normalised projections of two augmented views."""
    f1, f2 = state.views(frames, rng, params1, params2)
    z1 = F.normalize(state.proj(f1), dim=-1)
    z2 = F.normalize(state.proj(f2), dim=-1)
    return (1.0 - (z1.double() * z2.double()).sum(-1)).numpy()


def crl_update(frames, state: CRLState, optimizer: nd.Adam, rng: np.random.Generator) -> float:
    f1, f2 = state.views(frames, rng)
    loss = info_nce(state.proj(f1), state.proj(f2), state.temperature)
    optimizer.zero_grad()
    nd.backprop(loss, optimizer.params)
    optimizer.step()
    return float(loss.detach())
