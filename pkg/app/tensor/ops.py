"""
Differentiable array operations used by the U-Net and the trainer.

Thin, validated layer over torch autograd: every op checks its geometry,
raises ShapeError with both shapes on mismatch, and records a graph edge
whenever an input requires grad.
"""
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from app.core.errors import ShapeError

Tensor = torch.Tensor

_BINARY: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "maximum": torch.maximum,
}

_UNARY: Dict[str, Callable[[Tensor], Tensor]] = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "sqrt": torch.sqrt,
    "square": torch.square,
    "abs": torch.abs,
    "sigmoid": torch.sigmoid,
    "silu": F.silu,
    "tanh": torch.tanh,
}


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> Tuple[int, ...]:
    """Trailing-dimension broadcast of two shapes."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcastable")
        out.append(max(da, db))
    return tuple(reversed(out))


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """
    Apply a unary or binary elementwise op.

    Args:
        op_kind: one of the keys of _BINARY (needs b) or _UNARY
        a: first operand
        b: second operand for binary ops

    Returns:
        Tensor of the broadcast shape
    """
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        broadcast_shape(a.shape, b.shape)
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} takes a single operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"Unknown elementwise op: {op_kind}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..,m,k] x [..,k,n] -> [..,m,n]."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    return torch.matmul(a, b)


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, NCHW input and OIkk weights."""
    if input.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(input.shape)} and {tuple(weight.shape)}")
    n, c, h, w = input.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {tuple(input.shape)}, weight {tuple(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d invalid stride={stride} padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} does not match {o} outputs")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def group_norm(
    x: Tensor,
    groups: int,
    eps: float = 1e-5,
    scale: Optional[Tensor] = None,
    shift: Optional[Tensor] = None,
) -> Tensor:
    """
    Group normalization over (C/groups, H, W) per sample.

    Statistics are accumulated in float64 and the result is cast back to
    the input dtype.
    """
    if x.ndim < 2:
        raise ShapeError(f"group_norm expects [N, C, ...], got {tuple(x.shape)}")
    n, c = x.shape[0], x.shape[1]
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")

    xg = x.reshape(n, groups, -1).to(torch.float64)
    mean = xg.mean(dim=-1, keepdim=True)
    var = ((xg - mean) ** 2).mean(dim=-1, keepdim=True)
    out = ((xg - mean) / torch.sqrt(var + eps)).reshape(x.shape).to(x.dtype)

    affine_shape = (1, c) + (1,) * (x.ndim - 2)
    if scale is not None:
        out = out * scale.reshape(affine_shape)
    if shift is not None:
        out = out + shift.reshape(affine_shape)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along axis with max subtraction."""
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def resample(x: Tensor, direction: str) -> Tensor:
    """
    Halve ("down", stride-2 average pool) or double ("up", nearest neighbour)
    the spatial extents of an NCHW tensor.
    """
    if x.ndim != 4:
        raise ShapeError(f"resample expects [N, C, H, W], got {tuple(x.shape)}")
    if direction == "down":
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"resample down needs even extents, got {tuple(x.shape[2:])}")
        return F.avg_pool2d(x, kernel_size=2, stride=2)
    if direction == "up":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    raise ValueError(f"Unknown resample direction: {direction}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad ancestor."""
    if loss.numel() != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
