"""k-step inverse dynamics: predict the k actions between k+1 consecutive frames."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import ndmath as nd
from .policy import MLP, Backbone, to_input
from .worldsim import NUM_ACTIONS

log = logging.getLogger(__name__)


class IDMHeads(nn.Module):
    def __init__(self, k: int = 8, feature_dim: int = 128, proj_dim: int = 128, hidden: int = 128):
        super().__init__()
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.proj = MLP((feature_dim, proj_dim, proj_dim))
        self.predict = MLP((proj_dim * (k + 1), hidden, hidden, NUM_ACTIONS * k))


@dataclass
class ActionWindow:
    env: int
    start: int
    frames: np.ndarray  # (k+1, H, W, 3)
    actions: np.ndarray  # (k,)


def window_starts(dones: np.ndarray, k: int) -> np.ndarray:
    """(t, env) pairs whose frames t..t+k stay inside one episode of the stored window.

    ``dones[t, n]`` marks that frame t+1 begins a new episode.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    L, N = dones.shape
    if L <= k:
        return np.zeros((0, 2), dtype=np.int64)
    d = dones.astype(np.int64)
    csum = np.concatenate([np.zeros((1, N), np.int64), np.cumsum(d, axis=0)])
    crossing = csum[k:L] - csum[0:L - k]  # dones in t..t+k-1 for t in [0, L-k)
    t, n = np.nonzero(crossing == 0)
    return np.stack([t, n], axis=1).astype(np.int64)


def extract_windows(batch, k: int) -> list[ActionWindow]:
    starts = window_starts(batch.dones, k)
    return [ActionWindow(int(n), int(t), batch.obs[t:t + k + 1, n], batch.actions[t:t + k, n])
            for t, n in starts]


def _encode(batch_obs: np.ndarray, backbone: Backbone, chunk: int = 2048) -> torch.Tensor:
    L, N = batch_obs.shape[:2]
    flat = batch_obs.reshape(L * N, *batch_obs.shape[2:])
    feats = [backbone(to_input(flat[s:s + chunk])) for s in range(0, len(flat), chunk)]
    return torch.cat(feats).reshape(L, N, -1)


def idm_logits(features: torch.Tensor, starts: np.ndarray, heads: IDMHeads) -> torch.Tensor:
    """Logits (W, k, |A|) for windows starting at ``starts`` over features (L, N, F)."""
    k = heads.k
    z = heads.proj(features)
    t = torch.as_tensor(starts[:, 0])
    n = torch.as_tensor(starts[:, 1])
    zs = [z[t + i, n] for i in range(k + 1)]
    out = heads.predict(nd.concat(zs, dim=-1))
    return out.reshape(len(starts), k, NUM_ACTIONS)


def window_targets(actions: np.ndarray, starts: np.ndarray, k: int) -> torch.Tensor:
    idx = starts[:, 0:1] + np.arange(k)[None, :]
    return torch.as_tensor(actions[idx, starts[:, 1:2]], dtype=torch.long)


def idm_predict(frames: np.ndarray, heads: IDMHeads, backbone: Backbone) -> torch.Tensor:
    """Action distributions (k, |A|) for a single window of k+1 frames."""
    with torch.no_grad():
        feats = backbone(to_input(frames))[:, None, :]
        logits = idm_logits(feats, np.array([[0, 0]]), heads)[0]
    return nd.softmax(logits)


def idm_loss_value(batch, heads: IDMHeads, backbone: Backbone, starts=None) -> torch.Tensor | None:
    """Mean over windows of the k-step averaged cross-entropy (differentiable)."""
    starts = window_starts(batch.dones, heads.k) if starts is None else starts
    if len(starts) == 0:
        return None
    logits = idm_logits(_encode(batch.obs, backbone), starts, heads)
    target = window_targets(batch.actions, starts, heads.k)
    return nd.cross_entropy(logits.reshape(-1, NUM_ACTIONS), target.reshape(-1))


def idm_loss(batch, heads: IDMHeads, backbone: Backbone, optimizer: nd.Adam, epochs: int = 4) -> float | None:
    """Full-window gradient steps on {backbone, h_proj, g_IDM}; returns the last loss."""
    starts = window_starts(batch.dones, heads.k)
    if len(starts) == 0:
        log.warning("no inverse-dynamics windows of length %d in batch; skipping update", heads.k)
        return None
    value = None
    for _ in range(epochs):
        loss = idm_loss_value(batch, heads, backbone, starts)
        optimizer.zero_grad()
        nd.backprop(loss, optimizer.params)
        optimizer.step()
        value = float(loss.detach())
    return value


@torch.no_grad()
def idm_accuracy(batch, heads: IDMHeads, backbone: Backbone) -> float:
    starts = window_starts(batch.dones, heads.k)
    if len(starts) == 0:
        raise ValueError("idm_accuracy is undefined without any windows")
    logits = idm_logits(_encode(batch.obs, backbone), starts, heads)
    target = window_targets(batch.actions, starts, heads.k)
    return float((torch.argmax(logits, dim=-1) == target).double().mean())


def idm_fit(batches, heads: IDMHeads, backbone: Backbone, optimizer: nd.Adam, steps: int,
            rng: np.random.Generator, windows_per_step: int = 64) -> list[float]:
    """Minibatch training over a pool of stored windows; returns the loss of every step."""
    pools = [(b, window_starts(b.dones, heads.k)) for b in batches]
    pools = [(b, s) for b, s in pools if len(s)]
    if not pools:
        raise ValueError("idm_fit needs at least one window")
    history = []
    for _ in range(steps):
        b, starts = pools[int(rng.integers(len(pools)))]
        pick = starts[np.sort(rng.choice(len(starts), min(windows_per_step, len(starts)), replace=False))]
        loss = idm_loss_value(b, heads, backbone, pick)
        optimizer.zero_grad()
        nd.backprop(loss, optimizer.params)
        optimizer.step()
        history.append(float(loss.detach()))
    return history
