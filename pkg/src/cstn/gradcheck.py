"""Central finite-difference checks for every differentiable op and the toy network.

Analytic gradients come from the float32 tape. The numerical side re-runs
the same function in float64 with ``eps = 1e-3`` so that the oracle itself
is not limited by single precision. Each check reduces the op output with a
fixed random projection, ``sum(out * R)``, so every output element matters.

Relative error is ``max|a - n| / max(max|a|, max|n|, floor)`` per input
tensor, and a check reports the worst input. ``floor`` is 1e-6 times the
largest gradient seen in the whole check: some gradients are exactly zero by
construction (a key bias shifts every score of a softmax row equally), and
without the floor float32 round-off there would be divided by itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-3
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    entries: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<28} max_rel_err={self.max_rel_err:.3e}  entries={self.entries:<5d} {status}"


FLOOR = 1e-6


def rel_err(a, n, floor: float = 0.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check(name: str, fn: Callable, inputs, seed: int = 0, eps: float = EPS,
          max_entries: int | None = None, wrt=None) -> CheckResult:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``inputs`` are numpy arrays; ``wrt`` picks which of them to differentiate
    (all by default). ``max_entries`` samples that many coordinates per input
    instead of perturbing every one.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    leaves = [Tensor(a.astype(np.float32), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    proj = rng.uniform(-1, 1, size=out.shape)
    T.backward(T.tsum(out * Tensor(proj.astype(np.float32))), [leaves[i] for i in wrt])

    def objective(values) -> float:
        with T.default_dtype(np.float64), T.no_grad():
            res = fn(*[Tensor(v, dtype=np.float64) for v in values])
            return float(np.sum(res.data.astype(np.float64) * proj))

    pairs = []
    for i in wrt:
        base = arrays[i]
        flat = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        num = np.empty(len(flat))
        for j, k in enumerate(flat):
            values = list(arrays)
            pert = base.copy().reshape(-1)
            pert[k] = base.reshape(-1)[k] + eps
            values[i] = pert.reshape(base.shape)
            fp = objective(values)
            pert[k] = base.reshape(-1)[k] - eps
            values[i] = pert.reshape(base.shape)
            fm = objective(values)
            num[j] = (fp - fm) / (2 * eps)
        pairs.append((leaves[i].grad.reshape(-1)[flat], num))
    top = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    worst = max(rel_err(a, n, FLOOR * top) for a, n in pairs)
    count = sum(len(n) for _, n in pairs)
    return CheckResult(name, worst, count, time.perf_counter() - t0)


# ---------------------------------------------------------------- the suite

def _u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _op_cases(rng):
    from .model import normalize_pairs
    from .swin import (RSTBConfig, init_rstb, relative_position_bias, rstb_forward, shift_attention_mask,
                       swin_layer, window_attention, window_partition, window_reverse)
    from .train import loss

    cases = [
        ("add", T.add, [_u(rng, 3, 4), _u(rng, 4)]),
        ("sub", T.sub, [_u(rng, 3, 4), _u(rng, 3, 1)]),
        ("mul", T.mul, [_u(rng, 3, 4), _u(rng, 3, 4)]),
        ("div", T.div, [_u(rng, 3, 4), _u(rng, 3, 4, lo=0.5, hi=1.5)]),
        ("abs", T.tabs, [_u(rng, 4, 5)]),
        ("sqrt", T.tsqrt, [_u(rng, 4, 5, lo=0.5, hi=1.5)]),
        ("exp", T.texp, [_u(rng, 4, 5)]),
        ("gelu", T.gelu, [_u(rng, 4, 6, lo=-3, hi=3)]),
        ("sum", lambda x: T.tsum(x, axis=1, keepdims=True), [_u(rng, 3, 4, 2)]),
        ("mean", lambda x: T.tmean(x, axis=(0, 2)), [_u(rng, 3, 4, 2)]),
        ("matmul", T.matmul, [_u(rng, 4, 5), _u(rng, 5, 3)]),
        ("matmul_batched", T.matmul, [_u(rng, 2, 3, 4, 5), _u(rng, 5, 3)]),
        ("linear", T.linear, [_u(rng, 3, 5), _u(rng, 5, 4), _u(rng, 4)]),
        ("dense", T.dense, [_u(rng, 2, 3, 5), _u(rng, 5, 4), _u(rng, 4)]),
        ("conv2d", T.conv2d, [_u(rng, 1, 2, 6, 6), _u(rng, 3, 2, 3, 3), _u(rng, 3)]),
        ("conv2d_reflect", lambda x, w, b: T.conv2d(x, w, b, padding_mode="reflect"),
         [_u(rng, 2, 2, 5, 6), _u(rng, 3, 2, 3, 5), _u(rng, 3)]),
        ("conv2d_valid", lambda x, w: T.conv2d(x, w, padding="valid"), [_u(rng, 1, 2, 6, 7), _u(rng, 2, 2, 3, 3)]),
        ("conv2d_nhwc", T.conv2d_nhwc, [_u(rng, 2, 5, 6, 3), _u(rng, 4, 3, 3, 3), _u(rng, 4)]),
        ("layer_norm", T.layer_norm, [_u(rng, 2, 4, 8), _u(rng, 8), _u(rng, 8)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [_u(rng, 3, 5)]),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0), [_u(rng, 4, 3)]),
        ("reshape", lambda x: T.reshape(x, (4, 6)) * T.reshape(x, (4, 6)), [_u(rng, 2, 3, 4)]),
        ("permute", lambda x: T.permute(x, (2, 0, 1)), [_u(rng, 2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [_u(rng, 2, 3), _u(rng, 2, 4)]),
        ("slice", lambda x: x[1:, ::2] * x[:-1, 1::2], [_u(rng, 4, 6)]),
        ("gather", lambda x: x[np.array([0, 2, 2, 3])], [_u(rng, 4, 3)]),
        ("roll", lambda x: T.roll(x, (2, -1), (1, 2)), [_u(rng, 1, 5, 4)]),
        ("pad_constant", lambda x: T.pad(x, ((1, 2), (0, 3))), [_u(rng, 3, 4)]),
        ("pad_reflect", lambda x: T.pad(x, ((0, 0), (2, 1), (1, 3)), mode="reflect"), [_u(rng, 2, 4, 5)]),
        ("take", lambda t: T.take(t, np.array([3, 0, 0, 2, 1, 3])), [_u(rng, 4, 2)]),
        ("conv_ln_softmax", lambda x, w: T.softmax(T.layer_norm(
            T.conv2d(x, w).permute(0, 2, 3, 1), T.ones(3), T.zeros(3)), axis=-1),
         [_u(rng, 1, 2, 5, 5), _u(rng, 3, 2, 3, 3)]),
    ]

    # attention kernel with relative bias and a shift mask
    heads, w = 2, 4
    mask = shift_attention_mask(8, 8, w, 2)
    cases.append(("attention_core", lambda qkv, b: T.attention_core(qkv, heads, b, mask),
                  [_u(rng, 4, w * w, 3 * 8), _u(rng, heads, w * w, w * w, lo=-0.5, hi=0.5)]))
    cases.append(("attention_core_nomask", lambda qkv: T.attention_core(qkv, heads),
                  [_u(rng, 3, 6, 3 * 4)]))

    table = _u(rng, (2 * w - 1) ** 2, heads)
    cases.append(("relative_position_bias", lambda t: relative_position_bias(t, w), [table]))
    cases.append(("window_partition", lambda x: window_reverse(window_partition(x, 4) * 2.0, 4, 8, 4),
                  [_u(rng, 1, 8, 4, 3)]))

    cfg = RSTBConfig(depth=2, num_heads=2, embed_dim=8, mlp_ratio=2.0, window_size=4)
    names, arrays = _param_arrays(init_rstb(cfg, rng), rng)
    layer_names = [n for n in names if n.startswith("layer1.")]
    layer_arrays = [arrays[names.index(n)] for n in layer_names]

    def attn(x, *ps):
        params = {n[len("layer1."):]: p for n, p in zip(layer_names, ps)}
        bias = relative_position_bias(params["attn.rel_table"], 4)
        return window_attention(x, params, 2, bias, mask)

    cases.append(("window_attention", attn, [_u(rng, 4, 16, 8)] + layer_arrays))

    def layer(x, *ps):
        params = {n[len("layer1."):]: p for n, p in zip(layer_names, ps)}
        return swin_layer(x, (8, 8), cfg, params, shift=2)

    cases.append(("swin_layer_shifted", layer, [_u(rng, 1, 64, 8)] + layer_arrays))

    def layer_padded(x, *ps):
        params = {n[len("layer1."):]: p for n, p in zip(layer_names, ps)}
        return swin_layer(x, (6, 7), cfg, params, shift=2)

    cases.append(("swin_layer_padded", layer_padded, [_u(rng, 1, 42, 8)] + layer_arrays))

    def rstb(x, *ps):
        return rstb_forward(x, cfg, dict(zip(names, ps)))

    cases.append(("rstb", rstb, [_u(rng, 1, 8, 8, 8)] + arrays))

    cases.append(("normalize_pairs", normalize_pairs, [_u(rng, 1, 4, 3, 3, lo=0.2, hi=1.0)]))
    gt = (_u(rng, 1, 2, 4, 4).astype(np.float32), _u(rng, 1, 4, 4, 4).astype(np.float32))
    cases.append(("l1_loss", lambda m, c: loss(m, c, gt, 1.0, 0.5), [_u(rng, 1, 2, 4, 4), _u(rng, 1, 4, 4, 4)]))
    return cases


def _param_arrays(params: dict, rng) -> tuple:
    """Names and float64 copies of ``params`` with the constant tensors randomised.

    Zero-initialised residual branches would make most gradients vanish, so
    zero tensors get init-scale random values (1/sqrt(fan_in) for kernels)
    and unit gains a +-0.2 jitter. Random tensors are kept as initialised.
    """
    names = list(params)
    arrays = []
    for n in names:
        a = np.asarray(params[n].data if isinstance(params[n], Tensor) else params[n], dtype=np.float64)
        if not a.any():
            bound = 1.0 / np.sqrt(np.prod(a.shape[1:])) if a.ndim > 1 else 0.1
            a = rng.uniform(-bound, bound, size=a.shape)
        elif np.all(a == 1):
            a = a + rng.uniform(-0.2, 0.2, size=a.shape)
        arrays.append(a)
    return names, arrays


def toy_config():
    from .model import CSTNConfig
    from .swin import RSTBConfig
    return CSTNConfig(num_rstb=2, rstb=RSTBConfig(depth=2, num_heads=2, embed_dim=16, mlp_ratio=2.0, window_size=8),
                      in_echoes=2, target_size=(32, 32), shallow_channels=8, head_channels=8)


def check_network(seed: int = 0, entries_per_tensor: int = 4) -> CheckResult:
    """Whole network at 32x32 with embed 16 and 2 residual Swin blocks.

    Every weight tensor and both inputs are checked on a few sampled
    coordinates.
    """
    from .model import forward, init_weights

    cfg = toy_config()
    rng = np.random.default_rng(seed)
    names, arrays = _param_arrays(init_weights(cfg, seed), rng)
    e = cfg.in_echoes
    mag = rng.uniform(0, 1, size=(1, e, 32, 32))
    ph = rng.uniform(-1, 1, size=(1, 2 * e, 32, 32))

    def net(m, p, *ws):
        hm, hp = forward(m, p, cfg, dict(zip(names, ws)))
        return T.concat([hm, hp], axis=1)

    return check("cstn_toy_32x32", net, [mag, ph] + arrays, seed=seed, max_entries=entries_per_tensor)


def run_suite(seed: int = 0, network: bool = True, progress: Callable | None = None) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for i, (name, fn, inputs) in enumerate(_op_cases(rng)):
        r = check(name, fn, inputs, seed=seed + i, max_entries=48)
        results.append(r)
        if progress:
            progress(r)
    if network:
        r = check_network(seed)
        results.append(r)
        if progress:
            progress(r)
    return results
