"""Differentiable building blocks shared by the attention module, CtxtNet and the toy backbone.

Everything operates on torch tensors and relies on autograd for the backward pass;
``grad_check`` verifies those gradients against central finite differences.
Feature maps use the layout ``(..., T, C, H, W)`` with optional leading batch axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit

from .errors import ConfigError

POOL_MODES = ("avg", "max")


def _check_mode(mode):
    if mode not in POOL_MODES:
        raise ConfigError(f"pool mode must be one of {POOL_MODES}, got {mode!r}")


def _check_feature_map(x, min_dims=4):
    if x.dim() < min_dims:
        raise ConfigError(f"expected a tensor with at least {min_dims} dims, got shape {tuple(x.shape)}")
    if any(s < 1 for s in x.shape):
        raise ConfigError(f"empty axis in shape {tuple(x.shape)}")


class _FirstMax(torch.autograd.Function):
    """Max over ``dim`` (kept) whose gradient goes only to the first maximal element."""

    @staticmethod
    def forward(ctx, x, dim):
        m = x.amax(dim=dim, keepdim=True)
        ctx.save_for_backward(x, m)
        ctx.dim = dim
        return m

    @staticmethod
    def backward(ctx, grad):
        x, m = ctx.saved_tensors
        hit = x == m
        first = hit & (hit.cumsum(ctx.dim) == 1)
        return first * grad, None


def _max_first(x, dim):
    return _FirstMax.apply(x, dim)


def spatial_pool(x: torch.Tensor, mode: str = "avg") -> torch.Tensor:
    """Squeeze the H, W axes of ``(..., C, H, W)`` into a ``(..., C)`` channel descriptor."""
    _check_mode(mode)
    _check_feature_map(x, 3)
    flat = x.flatten(-2)
    if mode == "avg":
        return flat.mean(dim=-1)
    return _max_first(flat, -1).squeeze(-1)


def channel_pool(x: torch.Tensor, mode: str = "avg") -> torch.Tensor:
    """Reduce ``(..., C, H, W)`` along C, keeping a singleton channel axis."""
    _check_mode(mode)
    _check_feature_map(x, 3)
    if mode == "avg":
        return x.mean(dim=-3, keepdim=True)
    return _max_first(x, -3)


_CONV = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}


def conv_nd(x: torch.Tensor, kernel: torch.Tensor, dims: int, bias: torch.Tensor | None = None,
            groups: int = 1) -> torch.Tensor:
    """Zero-padded "same" cross-correlation in 1, 2 or 3 dimensions.

    ``x`` may be unbatched single-channel (``dims`` axes), unbatched multi-channel
    (``dims + 1``) or batched (``dims + 2``). ``kernel`` is either a bare ``dims``-axis
    kernel or a full ``(C_out, C_in / groups, *k)`` weight.
    """
    if dims not in _CONV:
        raise ConfigError(f"dims must be 1, 2 or 3, got {dims}")
    ksize = tuple(kernel.shape[-dims:])
    if any(k % 2 == 0 for k in ksize):
        raise ConfigError(f"kernel size must be odd along every convolved axis, got {ksize}")

    extra = x.dim() - dims
    if extra not in (0, 1, 2):
        raise ConfigError(f"input with {x.dim()} dims is not valid for a {dims}D convolution")
    if extra == 0:
        x = x[None, None]
    elif extra == 1:
        x = x[None]
    weight = kernel
    if weight.dim() == dims:
        weight = weight[None, None]
    elif weight.dim() != dims + 2:
        raise ConfigError(f"kernel with {weight.dim()} dims is not valid for a {dims}D convolution")

    out = _CONV[dims](x, weight, bias=bias, padding=tuple(k // 2 for k in ksize), groups=groups)
    if extra == 0:
        return out[0, 0] if out.shape[1] == 1 else out[0]
    if extra == 1:
        return out[0]
    return out


# elementwise kernels run a SIMD body and a scalar tail whose exp() can round differently;
# padding to a whole number of chunks sends every element through the SIMD body
_SIMD_CHUNK = 64


def sigmoid(x):
    """Logistic function whose value for an element does not depend on its position.

    This keeps per-frame masks bit-identical when frames are reordered.
    """
    if isinstance(x, torch.Tensor):
        flat = x.reshape(-1)
        pad = (-flat.numel()) % _SIMD_CHUNK
        if pad:
            flat = F.pad(flat, (0, pad))
        return torch.sigmoid(flat)[:x.numel()].reshape(x.shape)
    return expit(x)


def softmax(x, axis: int = -1):
    """Numerically stable softmax for numpy arrays or torch tensors."""
    if isinstance(x, torch.Tensor):
        return torch.softmax(x, dim=axis)
    x = np.asarray(x, dtype=float)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def temporal_shift(x: torch.Tensor, fraction: float = 0.25) -> torch.Tensor:
    """Shift part of the channels of ``(..., T, C, H, W)`` by one frame along T.

    ``fold = floor(fraction * C) // 2`` channels move forward in time
    (``out[t] = x[t - 1]``), the next ``fold`` move backward (``out[t] = x[t + 1]``),
    vacated frames are zero-filled and the remaining channels are untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"shift fraction must lie in [0, 1], got {fraction}")
    _check_feature_map(x, 4)
    C = x.shape[-3]
    fold = int(math.floor(fraction * C)) // 2
    if fold == 0:
        return x
    fwd = F.pad(x[..., :-1, :fold, :, :], (0, 0, 0, 0, 0, 0, 1, 0))
    bwd = F.pad(x[..., 1:, fold:2 * fold, :, :], (0, 0, 0, 0, 0, 0, 0, 1))
    return torch.cat([fwd, bwd, x[..., 2 * fold:, :, :]], dim=-3)


class TemporalShift(nn.Module):
    def __init__(self, fraction=0.25):
        super().__init__()
        self.fraction = fraction

    def forward(self, x):
        return temporal_shift(x, self.fraction)


@dataclass
class LayerSpec:
    """One MLP layer: linear projection followed by optional batch norm, activation and dropout."""

    in_features: int
    out_features: int
    bias: bool = True
    batch_norm: bool = False
    activation: str = "linear"  # linear | relu | prelu | sigmoid
    dropout: float = 0.0


_ACTIVATIONS = ("linear", "relu", "prelu", "sigmoid")


class MLP(nn.Module):
    """A stack of :class:`LayerSpec` layers applied to the last axis."""

    def __init__(self, layers: Sequence[LayerSpec]):
        super().__init__()
        if not layers:
            raise ConfigError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ConfigError(
                    f"layer widths do not chain: {prev.out_features} -> {nxt.in_features}")
        self.specs = list(layers)
        self.layers = nn.ModuleList()
        for spec in self.specs:
            if spec.activation not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {spec.activation!r}")
            if spec.in_features < 1 or spec.out_features < 1:
                raise ConfigError(f"layer widths must be positive, got {spec}")
            mods = [nn.Linear(spec.in_features, spec.out_features, bias=spec.bias)]
            if spec.batch_norm:
                mods.append(nn.BatchNorm1d(spec.out_features, momentum=0.1))
            if spec.activation == "relu":
                mods.append(nn.ReLU())
            elif spec.activation == "prelu":
                mods.append(nn.PReLU())
            elif spec.activation == "sigmoid":
                mods.append(nn.Sigmoid())
            if spec.dropout > 0:
                mods.append(nn.Dropout(spec.dropout))
            self.layers.append(nn.Sequential(*mods))

    @property
    def in_features(self):
        return self.specs[0].in_features

    @property
    def out_features(self):
        return self.specs[-1].out_features

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ConfigError(f"MLP expects {self.in_features} input features, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])
        for layer in self.layers:
            h = layer(h)
        return h.reshape(*lead, h.shape[-1])


def mlp_forward(x: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(x)


def kaiming_uniform_(module: nn.Module, generator: torch.Generator | None = None,
                     gain: float = math.sqrt(2.0)) -> nn.Module:
    """Seeded fan-in uniform init, bound ``gain * sqrt(3 / fan_in)``, for every conv/linear weight.

    The default gain suits ReLU trunks; ``gain=1/sqrt(3)`` gives the ``1/sqrt(fan_in)``
    bound used for sigmoid-gated attention heads. Biases are zeroed.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            fan_in = m.weight[0].numel()
            bound = gain * math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
    return module


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"[{status}] max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}) {parts}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               params: Sequence[tuple[str, torch.Tensor]] = (), epsilon: float = 1e-4,
               tolerance: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``fn(*inputs)`` against central finite differences.

    A non-scalar output is reduced with a fixed random projection so every output
    element contributes. Every element of every input and every named parameter is
    perturbed; the report carries the maximum relative error per tensor.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    targets = [(f"input{i}", t) for i, t in enumerate(inputs)] + list(params)
    with torch.no_grad():
        out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar():
        return (fn(*inputs) * proj).sum()

    for _, t in targets:
        t.grad = None
    scalar().backward()
    analytic = {name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
                for name, t in targets}

    errors = {}
    with torch.no_grad():
        for name, t in targets:
            flat = t.view(-1)
            numeric = np.empty(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                plus = scalar().item()
                flat[i] = orig - epsilon
                minus = scalar().item()
                flat[i] = orig
                numeric[i] = (plus - minus) / (2 * epsilon)
            rel = relative_error(analytic[name].reshape(-1).numpy(), numeric)
            errors[name] = float(rel.max()) if rel.size else 0.0
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(worst, tolerance, errors)
