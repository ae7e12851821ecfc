from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .ops import ContractError, NumericError, ShapeError


def backprop(loss: torch.Tensor, params: Mapping[str, torch.Tensor],
             accumulate: bool = True) -> dict[str, torch.Tensor]:
    """Reverse-mode pass from a scalar ``loss`` into every named parameter.

    Returns a gradient per parameter (zeros for parameters the loss does not
    reach). With ``accumulate`` the gradients are also added into ``.grad``.
    """
    if loss.numel() != 1:
        raise ContractError(f"backprop needs a scalar loss, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NumericError("loss", f"non-finite loss {float(loss)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"grad:{name}")
        out[name] = g
        if accumulate:
            p.grad = g.detach().clone() if p.grad is None else p.grad + g
    return out


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(torch.sum(g.detach().double() ** 2))
    return math.sqrt(total)


def _scale_toward_zero(g: torch.Tensor, scale: float) -> torch.Tensor:
    """``g * scale`` rounded toward zero, so the clipped norm cannot overshoot."""
    exact = g.detach().double() * scale
    out = exact.to(g.dtype)
    over = out.double().abs() > exact.abs()
    if bool(over.any()):
        out = torch.where(over, torch.nextafter(out, torch.zeros_like(out)), out)
    return out


def clip_global_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float):
    """Scale every gradient by ``max_norm / norm`` when the global L2 norm exceeds it.

    Returns ``(clipped, norm_before)``; inputs are not modified.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads.values())
    if norm <= max_norm:
        return {k: g.clone() for k, g in grads.items()}, norm
    scale = max_norm / norm
    return {k: _scale_toward_zero(g, scale) for k, g in grads.items()}, norm


def clip_grads_(params, max_norm: float) -> float:
    """In-place variant over ``.grad`` of an iterable of parameters."""
    params = [p for p in params if p.grad is not None]
    norm = global_norm(p.grad for p in params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad.copy_(_scale_toward_zero(p.grad, scale))
    return norm


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


class Adam:
    """Adam over a fixed set of named parameters, reading gradients from ``.grad``."""

    def __init__(self, named_params: Mapping[str, torch.Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, max_grad_norm: float | None = None) -> float:
        params = {k: p for k, p in self.params.items() if p.grad is not None}
        norm = global_norm(p.grad for p in params.values())
        if not math.isfinite(norm):
            raise NumericError("grad-norm", f"non-finite gradient norm {norm}")
        if max_grad_norm is not None:
            clip_grads_(params.values(), max_grad_norm)
        adam_step(params, {k: p.grad for k, p in params.items()}, self.state)
        return norm
