"""Dense tensors with reverse-mode gradients, plus a finite-difference checker.

Tensors and the gradient tape are torch's; this module pins down the small
primitive surface the denoiser is written against, with shape errors that
name the primitive, and provides :func:`grad_check`, whose central-difference
side never touches autograd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DEFAULT_LN_EPS = 1e-5


class ShapeError(ValueError):
    def __init__(self, primitive: str, *shapes):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {dims}")
        self.primitive = primitive


def tensor(data, dtype=torch.float64, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def _trailing_ok(a: Tensor, b: Tensor) -> bool:
    # equal shapes, or b matches a's trailing axes (leading-batch expansion)
    return a.shape == b.shape or (b.dim() <= a.dim() and a.shape[a.dim() - b.dim():] == b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not (_trailing_ok(a, b) or _trailing_ok(b, a)):
        raise ShapeError("add", a.shape, b.shape)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not (_trailing_ok(a, b) or _trailing_ok(b, a)):
        raise ShapeError("mul", a.shape, b.shape)
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * float(c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = parts[0]
    ax = axis % ref.dim()
    for p in parts[1:]:
        if p.dim() != ref.dim() or any(p.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax):
            raise ShapeError("concat", *(q.shape for q in parts))
    return torch.cat(list(parts), dim=axis)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError("slice", a.shape, (start, stop))
    return a.narrow(axis, start, stop - start)


def transpose(a: Tensor, axis0: int = -2, axis1: int = -1) -> Tensor:
    if a.dim() < 2:
        raise ShapeError("transpose", a.shape)
    return a.transpose(axis0, axis1)


def gather(table: Tensor, index: Tensor) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``index``."""
    if table.dim() != 2:
        raise ShapeError("gather", table.shape, index.shape)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ShapeError("gather", table.shape, index.shape)
    return F.embedding(index, table)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(a, dim=axis)


def sigmoid(a: Tensor) -> Tensor:
    return torch.sigmoid(a)


def tanh(a: Tensor) -> Tensor:
    return torch.tanh(a)


def layer_norm(a: Tensor, axis: int = -1, eps: float = DEFAULT_LN_EPS) -> Tensor:
    mean = a.mean(dim=axis, keepdim=True)
    var = ((a - mean) ** 2).mean(dim=axis, keepdim=True)
    return (a - mean) / torch.sqrt(var + eps)


def backward(loss: Tensor, leaves: Sequence[Tensor]) -> dict[int, Tensor]:
    """Gradients of scalar ``loss`` for each leaf, keyed by position.

    Leaves not connected to the loss get zeros of their own shape.
    """
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape)
    leaves = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return {i: (torch.zeros_like(leaf) if g is None else g) for i, (leaf, g) in enumerate(zip(leaves, grads))}


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    worst: str = ""


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Tensor, h: float = 1e-5,
               tol: float = 1e-4, max_per_tensor: int | None = None, seed: int = 0,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare autograd against central differences, element by element.

    ``f`` is re-evaluated after each in-place perturbation of a parameter, so
    it must read the current values of ``params``.  The relative error of an
    element is ``|a - n| / max(|a|, |n|, floor)``.  With ``max_per_tensor``,
    a seeded random subset of each tensor's elements is probed.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("grad_check requires float64 tensors")
    loss = f()
    analytic = backward(loss, params)
    gen = torch.Generator().manual_seed(seed)
    worst, where, checked = 0.0, "", 0
    with torch.no_grad():
        for pi, p in enumerate(params):
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_per_tensor]
            ga = analytic[pi].reshape(-1)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = ga[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                checked += 1
                if err > worst:
                    worst, where = err, f"param {pi} element {i}: analytic {a:.6g} numeric {num:.6g}"
    return GradCheckReport(worst, worst < tol, tol, checked, where)
