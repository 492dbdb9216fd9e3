"""Float64 numerics shared by the model, the subsampler and the training loss.

Tensors, graphs and reverse-mode differentiation come from torch; this module
pins the dtype, implements the handful of ops whose exact semantics matter
(strided convolution, layer norm, label-smoothed cross-entropy) and provides an
independent central-difference gradient checker.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

CONV_KERNEL = 5
CONV_STRIDE = 2
CONV_PADDING = CONV_KERNEL // 2


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def conv_output_length(length: int, layers: int = 1) -> int:
    """Sequence length after ``layers`` stride-2, padding-2, kernel-5 convolutions."""
    for _ in range(layers):
        if length < 1:
            raise ValueError("empty sequence")
        length = (length + 2 * CONV_PADDING - CONV_KERNEL) // CONV_STRIDE + 1
    return length


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Strided 1-D convolution over time.

    ``x`` is ``(L, C_in)`` or ``(B, L, C_in)``; ``weight`` is ``(C_out, C_in, 5)``.
    Returns ``(L', C_out)`` (or batched) with ``L' = floor((L - 1) / 2) + 1``.
    """
    if x.shape[-2] == 0:
        raise ValueError("empty sequence")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    y = F.conv1d(x.transpose(1, 2), weight, bias, stride=CONV_STRIDE, padding=CONV_PADDING)
    y = y.transpose(1, 2)
    return y.squeeze(0) if squeeze else y


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None, bias: torch.Tensor | None,
               eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def label_smoothed_nll(logits: torch.Tensor, target: torch.Tensor, epsilon: float,
                       pad_id: int | None = 0) -> tuple[torch.Tensor, int]:
    """Summed label-smoothed cross-entropy and the number of scored tokens.

    The smoothed target is ``(1 - eps) * onehot + eps / V``; positions whose
    target is ``pad_id`` contribute nothing.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    vocab = logits.shape[-1]
    if target.numel() and int(target.max()) >= vocab:
        raise ValueError("target id out of range")
    lprobs = torch.log_softmax(logits, dim=-1)
    nll = -lprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    smooth = -lprobs.mean(dim=-1)
    loss = (1.0 - epsilon) * nll + epsilon * smooth
    if pad_id is not None:
        keep = target != pad_id
        loss = loss * keep
        ntokens = int(keep.sum())
    else:
        ntokens = target.numel()
    return loss.sum(), ntokens


def cross_entropy_label_smoothed(logits: torch.Tensor, target: torch.Tensor, epsilon: float = 0.2,
                                 pad_id: int | None = 0) -> torch.Tensor:
    """Per-token mean of the label-smoothed loss over non-pad positions."""
    total, ntokens = label_smoothed_nll(logits, target, epsilon, pad_id)
    return total / max(ntokens, 1)


def numerical_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                   h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences.

    The error of each tensor is ``|g - n| / max(|g|, |n|, floor * max(1, |f|))``
    in the 2-norm.  Central differences cannot resolve gradients much below
    ``eps * |f| / h``, so the floor keeps gradients that are zero in theory
    (a key bias under softmax, say) from turning roundoff into a 100% error.
    """
    for t in tensors:
        t.grad = None
    value = fn()
    value.backward()
    floor = floor * max(1.0, abs(value.detach().item()))
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        numeric = numerical_gradient(fn, t, h)
        scale = max(float(analytic.norm()), float(numeric.norm()), floor)
        worst = max(worst, float((analytic - numeric).norm()) / scale)
    return worst
