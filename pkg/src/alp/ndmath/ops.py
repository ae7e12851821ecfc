"""Checked tensor operations.

Every op validates input shapes, runs the forward computation on torch
tensors (torch.autograd records the tape), and rejects non-finite outputs.
Nothing here broadcasts implicitly except the bias term of ``affine`` and
``conv2d``.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import torch
import torch.nn.functional as F

_node_ids = itertools.count()


class ShapeError(ValueError):
    def __init__(self, op: str, left, right):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class NumericError(FloatingPointError):
    def __init__(self, node: str, detail: str = "non-finite value"):
        self.node = node
        super().__init__(f"{detail} at node {node}")


class ContractError(ValueError):
    pass


def _finite(op: str, out: torch.Tensor) -> torch.Tensor:
    node = f"{op}#{next(_node_ids)}"
    if not bool(torch.isfinite(out).all()):
        raise NumericError(node)
    return out


def check_finite(name: str, t: torch.Tensor) -> torch.Tensor:
    """Raise NumericError if ``t`` holds NaN/Inf; otherwise return it."""
    return _finite(name, t)


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("affine", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("affine", weight.shape, bias.shape)
    return _finite("affine", F.linear(x, weight, bias))


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if x.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    return _finite("conv2d", F.conv2d(x, weight, bias, stride=stride, padding=padding))


def avg_pool2(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError("avg_pool2", x.shape, (2, 2))
    return _finite("avg_pool2", F.avg_pool2d(x, 2))


def relu(x: torch.Tensor) -> torch.Tensor:
    return _finite("relu", torch.relu(x))


def tanh(x: torch.Tensor) -> torch.Tensor:
    return _finite("tanh", torch.tanh(x))


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _finite("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _finite("mul", a * b)


def concat(xs: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref):
            raise ShapeError("concat", ref, other)
        d = dim % len(ref)
        if other[:d] + other[d + 1:] != ref[:d] + ref[d + 1:]:
            raise ShapeError("concat", ref, other)
    return _finite("concat", torch.cat(list(xs), dim=dim))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return _finite("softmax", torch.softmax(x, dim=dim))


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return _finite("log_softmax", torch.log_softmax(x, dim=dim))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    return _finite("cross_entropy", F.cross_entropy(logits, labels.long()))


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    return _finite("mse", ((pred - target) ** 2).mean())


def l2norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return _finite("l2norm", torch.linalg.vector_norm(x, dim=dim))


def gru_cell(x: torch.Tensor, h: torch.Tensor, w_ih: torch.Tensor, w_hh: torch.Tensor,
             b_ih: torch.Tensor, b_hh: torch.Tensor) -> torch.Tensor:
    """One gated recurrent update (reset/update gates, torch gate ordering r|z|n)."""
    hidden = h.shape[-1]
    if w_ih.shape != (3 * hidden, x.shape[-1]):
        raise ShapeError("gru_cell", x.shape, w_ih.shape)
    if w_hh.shape != (3 * hidden, hidden):
        raise ShapeError("gru_cell", h.shape, w_hh.shape)
    return _finite("gru_cell", torch.gru_cell(x, h, w_ih, w_hh, b_ih, b_hh))
