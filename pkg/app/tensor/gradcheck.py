"""
Central finite-difference oracle for checking backward gradients.
"""
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


def numerical_gradient(
    fn: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-3,
    indices: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Estimate d fn() / d x by central differences, perturbing x in place.

    fn must read x on every call and return a scalar. When indices (flat
    positions) are given only those entries are estimated; the rest stay 0.
    """
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    positions = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn())
            flat[i] = orig - h
            f_minus = float(fn())
            flat[i] = orig
            grad.view(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise."""
    a = analytic.detach().to(torch.float64)
    n = numeric.to(torch.float64)
    denom = torch.clamp(a.abs() + n.abs(), min=floor)
    return float(((a - n).abs() / denom).max())


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> List[float]:
    """
    Compare autograd against finite differences for each input.

    Args:
        fn: scalar-valued closure over the inputs
        inputs: leaf tensors with requires_grad
        h: finite-difference step
        max_entries: check at most this many randomly chosen entries per input
        seed: selects the entries

    Returns:
        Max relative error per input
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    loss.backward()
    analytic = [torch.zeros_like(x) if x.grad is None else x.grad.detach().clone() for x in inputs]

    picker = np.random.default_rng(seed)
    errors = []
    for g, x in zip(analytic, inputs):
        if max_entries is not None and x.numel() > max_entries:
            idx = sorted(picker.choice(x.numel(), size=max_entries, replace=False).tolist())
        else:
            idx = list(range(x.numel()))
        numeric = numerical_gradient(fn, x, h, idx)
        errors.append(relative_error(g.reshape(-1)[idx], numeric.reshape(-1)[idx]))
    return errors
