"""Central finite-difference gradient checking.

Max pooling, clamping and leaky-ReLU make the networks here piecewise smooth,
so a fixed step can straddle a kink and produce a meaningless difference
quotient. :func:`numerical_gradient` therefore shrinks the step per coordinate
until two successive estimates agree, which is exact away from kinks and
recovers a one-sided-consistent value near them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max norms."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


@torch.no_grad()
def numerical_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-3,
                       min_h: float = 1e-8, agree: float = 1e-7) -> torch.Tensor:
    """d fn() / d tensor by adaptive central differences (tensor is perturbed in place)."""
    flat = tensor.data.view(-1)
    grad = torch.zeros_like(flat)

    def central(i: int, step: float) -> float:
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        return (hi - lo) / (2 * step)

    for i in range(flat.numel()):
        step = h
        est = central(i, step)
        while step > min_h:
            finer = central(i, step / 10)
            if abs(finer - est) <= agree * max(1.0, abs(est)):
                est = finer
                break
            step /= 10
            est = finer
        grad[i] = est
    return grad.view_as(tensor)


def check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                    h: float = 1e-3) -> dict[int, float]:
    """Compare autograd against finite differences for every tensor; returns errors by position."""
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    errors = {}
    for i, (t, g) in enumerate(zip(tensors, analytic)):
        if g is None:
            g = torch.zeros_like(t)
        errors[i] = relative_error(g, numerical_gradient(loss_fn, t, h=h))
    return errors


def max_relative_error(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                       h: float = 1e-3) -> float:
    errs = check_gradients(loss_fn, tensors, h=h)
    return max(errs.values()) if errs else 0.0
