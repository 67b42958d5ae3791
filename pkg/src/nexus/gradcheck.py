"""Central finite-difference checks of the analytic adjoints.

Each check reduces the output with a fixed random projection, runs backward,
and compares against ``(f(x + h) - f(x - h)) / 2h``. The error reported is
``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over the checked
entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adapter import Adapter, AdapterConfig, CrossAttentionBridge, PrimeBlock, SlimBlock
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
CONV_COMBOS = ((3, 1, 1), (1, 1, 1), (3, 2, 1), (3, 1, 2), (3, 1, 4), (3, 1, 8))


@dataclass
class GradResult:
    name: str
    rel_err: float
    tol: float
    checked: int

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < self.tol)


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _entries(size: int, limit: int | None, rng) -> np.ndarray:
    if limit is None or limit >= size:
        return np.arange(size)
    return rng.choice(size, limit, replace=False)


def check(name: str, fn: Callable, arrays: list[np.ndarray], tol: float = PRIMITIVE_TOL,
          params: list[Tensor] = (), h: float = 1e-5, limit: int | None = None,
          seed: int = 0) -> GradResult:
    """Check d/d(arrays and params) of ``sum(fn(*tensors) * R)``."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def value() -> float:
        with T.no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    for p in params:
        p.grad = None
    with T.Tape():
        out = fn(*leaves)
        loss = T.tensor_sum(out * Tensor(proj))
        loss.backward()
    analytic, numeric = [], []
    targets = [(a, leaf.grad) for a, leaf in zip(arrays, leaves)] + [(p.data, p.grad) for p in params]
    for arr, grad in targets:
        grad = np.zeros_like(arr) if grad is None else grad
        flat = arr.reshape(-1)
        for i in _entries(flat.size, limit, rng):
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(grad.reshape(-1)[i])
    return GradResult(name, rel_error(np.array(analytic), np.array(numeric)), tol, len(numeric))


def _away_from_zero(a: np.ndarray, eps: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(a) < eps, np.sign(a + 1e-30) * eps, a)


def primitive_checks(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2, 2, shape)

    res = [
        check("add", T.add, [u(3, 4), u(3, 4)]),
        check("add/bias", T.add, [u(2, 3, 2, 2), u(1, 3, 1, 1)]),
        check("add/scalar", T.add, [u(3, 4), u(1)]),
        check("sub", T.sub, [u(3, 4), u(3, 4)]),
        check("mul", T.mul, [u(3, 4), u(3, 4)]),
        check("mul/bias", T.mul, [u(2, 3, 2, 2), u(1, 3, 1, 1)]),
        check("scale", lambda x: T.scale(x, -1.7), [u(3, 4)]),
        check("relu", T.relu, [_away_from_zero(u(4, 5))]),
        check("silu", T.silu, [u(4, 5)]),
        check("matmul", T.matmul, [u(3, 4), u(4, 2)]),
        check("matmul/batched", T.matmul, [u(2, 3, 4), u(2, 4, 5)]),
        check("matmul/shared", T.matmul, [u(2, 3, 4), u(4, 5)]),
        check("softmax_rows", T.softmax_rows, [u(3, 5)]),
        check("reshape", lambda x: T.reshape(x, (3, 4)), [u(2, 6)]),
        check("transpose", lambda x: T.transpose(x, (2, 0, 1)), [u(2, 3, 4)]),
        check("sum", lambda x: T.tensor_sum(x, axis=1), [u(3, 4)]),
        check("mean", lambda x: T.mean(x), [u(3, 4)]),
        check("concat", lambda a, b: T.concat([a, b], axis=1), [u(2, 3, 2), u(2, 1, 2)]),
        check("pixel_unshuffle", lambda x: T.pixel_unshuffle(x, 2), [u(1, 2, 4, 4)]),
        check("pixel_shuffle", lambda x: T.pixel_shuffle(x, 2), [u(1, 8, 2, 2)]),
        check("upsample_nearest", lambda x: T.upsample_nearest(x, 2), [u(1, 2, 3, 3)]),
        check("group_norm", lambda x, g, b: T.group_norm(x, g, b, 2), [u(2, 4, 3, 3), u(4), u(4)]),
    ]
    for k, s, g in CONV_COMBOS:
        cin = 8 if g > 1 else 3
        res.append(check(f"conv2d/k{k}s{s}g{g}",
                         lambda x, w, b, s=s, g=g, k=k: T.conv2d(x, w, b, s, k // 2, g),
                         [u(2, cin, 4, 4), u(4 if g < 8 else 8, cin // g, k, k), u(4 if g < 8 else 8)]))
    return res


def _module_check(name, module: Module, fn, arrays, tol, limit, seed) -> GradResult:
    return check(name, fn, arrays, tol, params=module.parameters(), limit=limit, seed=seed)


def block_checks(seed: int = 0, limit: int = 40) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    text = rng.standard_normal((1, 3, 6))
    x = rng.standard_normal((1, 4, 4, 4))
    out = []
    bridge = CrossAttentionBridge(8, 6, zero_init_out=False, rng=rng)
    out.append(_module_check("bridge", bridge, lambda f, t: bridge(f, t),
                             [rng.standard_normal((1, 8, 3, 3)), text], PRIMITIVE_TOL, limit, seed))
    bridge_q = CrossAttentionBridge(8, 6, attn_dim=4, heads=2, query_proj=True, zero_init_out=False, rng=rng)
    out.append(_module_check("bridge/query+heads", bridge_q, lambda f, t: bridge_q(f, t),
                             [rng.standard_normal((1, 8, 3, 3)), text], PRIMITIVE_TOL, limit, seed))
    prime = PrimeBlock(4, 8, 6, zero_init_attn_out=False, rng=rng)
    out.append(_module_check("prime_block", prime, lambda a, t: prime(a, t), [x, text],
                             PRIMITIVE_TOL, limit, seed))
    slim = SlimBlock(4, 8, 6, groups=2, zero_init_attn_out=False, rng=rng)
    out.append(_module_check("slim_block", slim, lambda a, t: slim(a, t), [x, text],
                             PRIMITIVE_TOL, limit, seed))
    lin = Linear(5, 3, rng=rng)
    out.append(_module_check("linear", lin, lambda a: lin(a), [rng.standard_normal((2, 4, 5))],
                             PRIMITIVE_TOL, limit, seed))
    gn = GroupNorm(8, 4)
    out.append(_module_check("group_norm_layer", gn, lambda a: gn(a), [rng.standard_normal((2, 8, 3, 3))],
                             PRIMITIVE_TOL, limit, seed))
    conv = Conv2d(4, 4, 3, stride=2, groups=4, rng=rng)
    out.append(_module_check("downsample_conv", conv, lambda a: conv(a), [x], PRIMITIVE_TOL, limit, seed))
    return out


def end_to_end_checks(seed: int = 0, n_params: int = 24) -> list[GradResult]:
    """Scalar loss through the adapter and a small UNet with fusion; random adapter entries."""
    from .unet import UNet, UNetConfig

    rng = np.random.default_rng(seed)
    out = []
    for variant in ("prime", "slim"):
        cfg = AdapterConfig(variant=variant, stages=4, channels=[4, 8, 16, 16], unshuffle=2,
                            groups=2, text_dim=6, zero_init_attn_out=False)
        adapter = Adapter(cfg, rng=seed)
        unet = UNet(UNetConfig(base=4, mults=[1, 2, 4, 4], res_blocks=1, attn_scales=[4],
                               time_dim=8, image_size=16, patch=2, text_dim=6), seed=seed).freeze()
        for m in unet.modules():  # make zero-initialised output paths live
            if isinstance(m, (Conv2d, Linear)) and not np.any(m.weight.data):
                m.weight.data = rng.standard_normal(m.weight.shape) * 0.1
        cond = rng.standard_normal((1, 3, 16, 16))
        x_t = rng.standard_normal((1, 3, 16, 16))
        text = rng.standard_normal((1, 3, 6))
        target = rng.standard_normal((1, 3, 16, 16))
        params = adapter.parameters()
        sizes = np.array([p.size for p in params], dtype=float)
        picks = rng.choice(len(params), n_params, p=sizes / sizes.sum())

        def loss(c, a=adapter, u=unet):
            diff = u(Tensor(x_t), [7], Tensor(text), E=a(c, Tensor(text))) - Tensor(target)
            return T.mean(diff * diff)

        cond_t = Tensor(cond)
        for p in params:
            p.grad = None
        with T.Tape():
            l = loss(cond_t)
            l.backward()
        analytic, numeric = [], []
        h = 1e-5
        for j in picks:
            p = params[j]
            i = int(rng.integers(p.size))
            flat = p.data.reshape(-1)
            old = flat[i]
            with T.no_grad():
                flat[i] = old + h
                up = loss(cond_t).item()
                flat[i] = old - h
                down = loss(cond_t).item()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(p.grad.reshape(-1)[i])
        out.append(GradResult(f"end2end/{variant}", rel_error(np.array(analytic), np.array(numeric)),
                              END_TO_END_TOL, len(numeric)))
    return out


SCOPES = {"primitives": primitive_checks, "blocks": block_checks, "end2end": end_to_end_checks}


def run(scopes=("primitives", "blocks", "end2end"), seed: int = 0) -> list[GradResult]:
    prev_dtype, prev_backend = T.get_default_dtype(), T.get_conv_backend()
    T.set_default_dtype(np.float64)
    T.set_conv_backend("numpy")
    try:
        results = []
        for s in scopes:
            results.extend(SCOPES[s](seed=seed))
        return results
    finally:
        T.set_default_dtype(prev_dtype)
        T.set_conv_backend(prev_backend)


def format_table(results: list[GradResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  {'rel_err':>10}  {'tol':>7}  {'n':>5}  status"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {r.rel_err:10.2e}  {r.tol:7.0e}  {r.checked:5d}  "
                     f"{'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
