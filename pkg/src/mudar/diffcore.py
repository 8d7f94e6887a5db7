"""Double-precision array primitives with exact gradients.

Every primitive is a thin composition of torch float64 operations, so any
scalar loss assembled from them can be differentiated with :func:`grad`.
:func:`finite_difference_grad` is the independent check: it only evaluates
the loss forward and never touches the autograd graph.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ContractError, NumericDomainError

DTYPE = torch.float64
PROB_FLOOR = 1e-12


def as_array(values) -> torch.Tensor:
    """Convert nested lists / numpy arrays to a float64 tensor."""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def _finite(*arrays: torch.Tensor) -> None:
    for a in arrays:
        if not bool(torch.isfinite(a).all()):
            raise NumericDomainError(f"non-finite value in input of shape {tuple(a.shape)}")


def _shape_error(op: str, a: torch.Tensor, b: torch.Tensor) -> ContractError:
    return ContractError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    _finite(a, b)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_or_broadcast("add", a, b)
    return a + b


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_or_broadcast("sub", a, b)
    return a - b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_or_broadcast("mul", a, b)
    return a * b


def _same_or_broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error(op, a, b) from None
    _finite(a, b)


def sum_(a: torch.Tensor, dim=None) -> torch.Tensor:
    return a.sum() if dim is None else a.sum(dim=dim)


def mean(a: torch.Tensor, dim=None) -> torch.Tensor:
    return a.mean() if dim is None else a.mean(dim=dim)


def relu(a: torch.Tensor) -> torch.Tensor:
    return torch.clamp(a, min=0.0)


def exp(a: torch.Tensor) -> torch.Tensor:
    _finite(a)
    return torch.exp(a)


def log(a: torch.Tensor) -> torch.Tensor:
    """Natural log of probabilities, clamped to [1e-12, 1] first."""
    _finite(a)
    return torch.log(torch.clamp(a, PROB_FLOOR, 1.0))


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    _finite(logits)
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Log-sum-exp stabilised softmax along ``dim``."""
    return torch.exp(log_softmax(as_array(logits), dim=dim))


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is (B, C_in, L) and ``weight`` (C_out, C_in, K); a bare 1-D signal
    and 1-D kernel are also accepted and give a 1-D result.
    """
    x, weight = as_array(x), as_array(weight)
    squeeze = x.ndim == 1 and weight.ndim == 1
    if squeeze:
        x = x[None, None, :]
        weight = weight[None, None, :]
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv1d", x, weight)
    k = weight.shape[2]
    if x.shape[2] < k:
        raise _shape_error("conv1d", x, weight)
    _finite(x, weight)
    # (B, C_in, L_out, K) windows contracted against (C_out, C_in, K)
    patches = x.unfold(2, k, 1)
    out = torch.einsum("bclk,ock->bol", patches, weight)
    if bias is not None:
        out = out + bias[None, :, None]
    if squeeze:
        return out[0, 0]
    return out


def maxpool1d(x: torch.Tensor, size: int = 2) -> torch.Tensor:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    if x.shape[-1] < size:
        raise ContractError(f"maxpool1d: length {x.shape[-1]} shorter than pool size {size}")
    n = x.shape[-1] // size
    return x[..., : n * size].reshape(*x.shape[:-1], n, size).max(dim=-1).values


def batchnorm(
    x: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-feature batch normalisation for (B, F) or (B, F, L) inputs.

    Returns ``(y, new_running_mean, new_running_var)``. In training mode the
    batch statistics normalise ``x`` and the running statistics are blended
    with momentum; in eval mode the running statistics are used unchanged.
    """
    if x.ndim not in (2, 3) or x.shape[1] != scale.shape[0]:
        raise _shape_error("batchnorm", x, scale)
    dims = (0,) if x.ndim == 2 else (0, 2)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if training:
        count = x.numel() // x.shape[1]
        if count < 2:
            raise ContractError("batchnorm: training mode needs at least 2 values per feature")
        mu = x.mean(dim=dims)
        var = ((x - mu.view(view)) ** 2).mean(dim=dims)
        with torch.no_grad():
            new_mean = (1 - momentum) * running_mean + momentum * mu
            new_var = (1 - momentum) * running_var + momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    x_hat = (x - mu.view(view)) / torch.sqrt(var.view(view) + eps)
    return scale.view(view) * x_hat + shift.view(view), new_mean, new_var


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between rows of ``a`` (n, d) and ``b`` (m, d)."""
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _shape_error("pairwise_sq_dists", a, b)
    _finite(a, b)
    # explicit differences keep the diagonal exactly zero and the gradient finite there
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(dim=-1)


def grad(loss: torch.Tensor, parameters: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """d(loss)/d(parameter) for every named parameter, shaped like the parameter."""
    if loss.numel() != 1:
        raise ContractError(f"grad: loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(parameters)
    tensors = [parameters[k] for k in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        k: (torch.zeros_like(t) if g is None else g.detach())
        for k, t, g in zip(names, tensors, grads)
    }


def finite_difference_grad(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], float],
    parameters: Mapping[str, torch.Tensor],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` with respect to each entry.

    ``loss_fn`` receives a dict of detached float64 tensors and must return
    a Python float; it is evaluated 2 * (number of entries) times.
    """
    base = {k: v.detach().clone() for k, v in parameters.items()}
    out: dict[str, np.ndarray] = {}
    for name, value in base.items():
        flat = value.reshape(-1)
        g = np.zeros(flat.numel())
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(loss_fn(base))
            flat[i] = orig - h
            f_minus = float(loss_fn(base))
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * h)
        out[name] = g.reshape(tuple(value.shape))
    return out


def max_relative_error(analytic: Mapping[str, torch.Tensor], numeric: Mapping[str, np.ndarray]) -> float:
    """Largest elementwise |a - n| / (|a| + 1e-8) over all parameters."""
    worst = 0.0
    for k, a in analytic.items():
        a = a.detach().numpy()
        err = np.abs(a - numeric[k]) / (np.abs(a) + 1e-8)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
