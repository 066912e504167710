"""Finite-difference gradient checks for every differentiable operation.

Each check builds small double-precision inputs (T <= 3, C <= 6, H = W <= 4) from a
seed and returns a :class:`~w3kit.primitives.GradCheckReport`. Used by the
``gradcheck`` command and the test suite.
"""
from __future__ import annotations

import torch

from .ctxtnet import CtxtNet, VocabConfig, action_loss
from .primitives import (MLP, LayerSpec, channel_pool, conv_nd, grad_check, sigmoid, softmax, spatial_pool,
                         temporal_shift)
from .w3 import W3Attention


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _pool(pool, mode):
    def check(eps, tol, seed):
        x = _randn(_gen(seed), 3, 5, 4, 4)
        return grad_check(lambda t: pool(t, mode), [x], epsilon=eps, tolerance=tol, seed=seed)
    return check


def _conv(dims):
    def check(eps, tol, seed):
        gen = _gen(seed)
        shape = {1: (6,), 2: (4, 4), 3: (3, 4, 4)}[dims]
        x, k = _randn(gen, *shape), _randn(gen, *(3,) * dims)
        return grad_check(lambda a, b: conv_nd(a, b, dims), [x, k], epsilon=eps, tolerance=tol, seed=seed)
    return check


def check_conv2d_multichannel(eps, tol, seed):
    gen = _gen(seed)
    x, w, b = _randn(gen, 2, 4, 4), _randn(gen, 1, 2, 7, 7), _randn(gen, 1)
    return grad_check(lambda a, k, c: conv_nd(a, k, 2, bias=c), [x, w, b], epsilon=eps, tolerance=tol, seed=seed)


def check_sigmoid(eps, tol, seed):
    return grad_check(sigmoid, [_randn(_gen(seed), 3, 6)], epsilon=eps, tolerance=tol, seed=seed)


def check_softmax(eps, tol, seed):
    return grad_check(lambda t: softmax(t, -1), [_randn(_gen(seed), 3, 6)], epsilon=eps, tolerance=tol, seed=seed)


def check_temporal_shift(eps, tol, seed):
    x = _randn(_gen(seed), 3, 6, 2, 2)
    return grad_check(lambda t: temporal_shift(t, 0.5), [x], epsilon=eps, tolerance=tol, seed=seed)


def check_mlp(eps, tol, seed):
    torch.manual_seed(seed)
    mlp = MLP([LayerSpec(6, 4, activation="prelu"), LayerSpec(4, 3, activation="relu"),
               LayerSpec(3, 2, activation="sigmoid")]).double()
    x = _randn(_gen(seed), 3, 6)
    return grad_check(mlp, [x], params=list(mlp.named_parameters()), epsilon=eps, tolerance=tol, seed=seed)


def check_mlp_batchnorm(eps, tol, seed):
    torch.manual_seed(seed)
    mlp = MLP([LayerSpec(6, 4, batch_norm=True, activation="prelu"), LayerSpec(4, 3, batch_norm=True)]).double()
    mlp.train()  # batch statistics are part of the differentiated function
    x = _randn(_gen(seed), 5, 6)
    return grad_check(mlp, [x], params=list(mlp.named_parameters()), epsilon=eps, tolerance=tol, seed=seed)


def _w3(temporal):
    def check(eps, tol, seed):
        m = W3Attention(4, reduction=2, temporal=temporal, seed=seed).double()
        x = _randn(_gen(seed), 3, 4, 4, 4)
        return grad_check(m, [x], params=list(m.named_parameters()), epsilon=eps, tolerance=tol, seed=seed)
    return check


def _w3_part(part):
    def check(eps, tol, seed):
        m = W3Attention(4, reduction=2, seed=seed).double()
        gen = _gen(seed)
        if part == "channel_video":
            x = torch.rand(3, 4, generator=gen, dtype=torch.float64)
        elif part == "spatial_video":
            x = torch.rand(3, 1, 4, 4, generator=gen, dtype=torch.float64)
        else:
            x = _randn(gen, 3, 4, 4, 4)
        fn = getattr(m, f"{part}_attention")
        return grad_check(fn, [x], params=list(m.named_parameters()), epsilon=eps, tolerance=tol, seed=seed)
    return check


def check_ctxtnet(eps, tol, seed):
    cfg = VocabConfig(V=4, N=6, R=2, T_ctx=3)
    m = CtxtNet(cfg, hidden=(5, 5), seed=seed).double().eval()
    gen = _gen(seed)
    v, n = _randn(gen, 2, 3, 4), _randn(gen, 2, 3, 6)
    return grad_check(m, [v, n], params=list(m.named_parameters()), epsilon=eps, tolerance=tol, seed=seed)


def check_ctxtnet_loss(eps, tol, seed):
    cfg = VocabConfig(V=4, N=6, R=2, T_ctx=3)
    m = CtxtNet(cfg, hidden=(5, 5), dropout=0.0, seed=seed).double().train()
    gen = _gen(seed)
    v, n = _randn(gen, 4, 3, 4), _randn(gen, 4, 3, 6)
    verbs, nouns = torch.tensor([0, 1, 3, 2]), torch.tensor([5, 0, 2, 2])
    return grad_check(lambda a, b: action_loss(m(a, b), verbs, nouns), [v, n], params=list(m.named_parameters()),
                      epsilon=eps, tolerance=tol, seed=seed)


def all_checks():
    checks = []
    for mode in ("avg", "max"):
        checks.append((f"spatial_pool[{mode}]", _pool(spatial_pool, mode)))
        checks.append((f"channel_pool[{mode}]", _pool(channel_pool, mode)))
    for dims in (1, 2, 3):
        checks.append((f"conv{dims}d", _conv(dims)))
    checks += [("conv2d_multichannel", check_conv2d_multichannel), ("sigmoid", check_sigmoid),
               ("softmax", check_softmax), ("temporal_shift", check_temporal_shift), ("mlp", check_mlp),
               ("mlp_batchnorm", check_mlp_batchnorm)]
    for part in ("channel_frame", "channel_video", "spatial_frame", "spatial_video"):
        checks.append((f"w3.{part}", _w3_part(part)))
    checks += [("apply_w3", _w3(True)), ("apply_w2", _w3(False)), ("ctxtnet_forward", check_ctxtnet),
               ("ctxtnet_action_loss", check_ctxtnet_loss)]
    return checks
