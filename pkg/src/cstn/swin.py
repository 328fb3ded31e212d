"""Window attention, shifted-window Swin layers and the residual Swin block.

Parameters are plain ``{name: Tensor}`` dicts. A Swin layer reads::

    norm1.g norm1.b attn.qkv.w attn.qkv.b attn.proj.w attn.proj.b
    attn.rel_table norm2.g norm2.b mlp.fc1.w mlp.fc1.b mlp.fc2.w mlp.fc2.b

and a residual block reads ``layer{i}.<...>`` for each layer plus
``conv.w``/``conv.b``. Linear weights are stored as [in, out].
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    window_size: int
    shift: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError(f"window_size must be positive, got {self.window_size}")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift must lie in [0, {self.window_size}), got {self.shift}")


@dataclass(frozen=True)
class RSTBConfig:
    # defaults: not from paper
    depth: int = 2
    num_heads: int = 4
    embed_dim: int = 48
    mlp_ratio: float = 2.0
    window_size: int = 8

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 2 or self.depth % 2:
            raise ValueError(f"depth must be a positive even number, got {self.depth}")
        if self.window_size < 1:
            raise ValueError("window_size must be positive")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def sub_params(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def window_partition(x, w: int):
    """[N, H, W, C] -> [N * (H/w) * (W/w), w, w, C]; works on Tensors and arrays."""
    n, h, wd, c = x.shape
    if h % w or wd % w:
        raise ShapeError(f"window_partition: {h}x{wd} is not divisible by window {w}")
    if isinstance(x, Tensor):
        y = x.reshape(n, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
        return y.reshape(-1, w, w, c)
    y = np.asarray(x).reshape(n, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(-1, w, w, c)


def window_reverse(windows, w: int, h: int, wd: int):
    """Inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    n = windows.shape[0] // ((h // w) * (wd // w))
    if isinstance(windows, Tensor):
        y = windows.reshape(n, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
        return y.reshape(n, h, wd, c)
    y = np.asarray(windows).reshape(n, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h, wd, c)


@lru_cache(maxsize=None)
def relative_position_index(w: int) -> np.ndarray:
    """[w*w, w*w] map from token pair to row of the (2w-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.setflags(write=False)
    return idx


def relative_position_bias(table: Tensor, w: int) -> Tensor:
    """Look up the learnable table [(2w-1)^2, heads] into a [heads, w*w, w*w] bias."""
    rows = (2 * w - 1) ** 2
    if table.shape[0] != rows:
        raise ShapeError(f"bias table has {table.shape[0]} rows, window {w} needs {rows}")
    heads = table.shape[1]
    idx = relative_position_index(w)
    bias = T.take(table, idx.reshape(-1)).reshape(w * w, w * w, heads)
    return bias.permute(2, 0, 1)


@lru_cache(maxsize=64)
def shift_attention_mask(h: int, wd: int, w: int, shift: int) -> np.ndarray:
    """Additive mask [num_windows, w*w, w*w] for a feature map rolled by -shift.

    Tokens that come from different regions before the roll get MASK_VALUE.
    """
    label = np.zeros((1, h, wd, 1), dtype=np.float32)
    cuts = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            label[:, hs, ws, :] = cnt
            cnt += 1
    lw = window_partition(label, w).reshape(-1, w * w)
    mask = np.where(lw[:, None, :] != lw[:, :, None], MASK_VALUE, 0.0).astype(np.float32)
    mask.setflags(write=False)
    return mask


def window_attention(x: Tensor, params: dict, num_heads: int, bias: Tensor | None = None,
                     mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``x`` is [B, L, C] with B = images * windows. Per head the weights are
    softmax(q k^T / sqrt(d) + bias + mask); heads are concatenated and
    projected.
    """
    qkv = T.dense(x, params["attn.qkv.w"], params["attn.qkv.b"])
    out = T.attention_core(qkv, num_heads, bias, mask)
    return T.dense(out, params["attn.proj.w"], params["attn.proj.b"])


def swin_layer(x: Tensor, hw: tuple, cfg: RSTBConfig, params: dict, shift: int = 0) -> Tensor:
    """LN -> (shifted) window attention -> residual -> LN -> MLP -> residual.

    ``x`` is [N, H*W, C]. Maps that do not tile into windows are reflect
    padded at the bottom/right and cropped back.
    """
    n, l, c = x.shape
    h, wd = hw
    if h * wd != l:
        raise ShapeError(f"swin_layer: {l} tokens do not form a {h}x{wd} map")
    w = cfg.window_size
    WindowConfig(w, shift)
    y = T.layer_norm(x, params["norm1.g"], params["norm1.b"]).reshape(n, h, wd, c)
    ph, pw = (-h) % w, (-wd) % w
    if ph or pw:
        y = T.pad(y, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
    hp, wp = h + ph, wd + pw
    if shift:
        y = T.roll(y, (-shift, -shift), (1, 2))
    windows = window_partition(y, w).reshape(-1, w * w, c)
    bias = relative_position_bias(params["attn.rel_table"], w)
    mask = shift_attention_mask(hp, wp, w, shift) if shift else None
    a = window_attention(windows, params, cfg.num_heads, bias, mask)
    y = window_reverse(a.reshape(-1, w, w, c), w, hp, wp)
    if shift:
        y = T.roll(y, (shift, shift), (1, 2))
    if ph or pw:
        y = y[:, :h, :wd, :]
    x = x + y.reshape(n, l, c)
    z = T.layer_norm(x, params["norm2.g"], params["norm2.b"])
    z = T.gelu(T.dense(z, params["mlp.fc1.w"], params["mlp.fc1.b"]))
    z = T.dense(z, params["mlp.fc2.w"], params["mlp.fc2.b"])
    return x + z


def rstb_forward_nhwc(x: Tensor, cfg: RSTBConfig, params: dict) -> Tensor:
    """Channels-last residual Swin block: [N, H, W, C] in and out."""
    n, h, wd, c = x.shape
    t = x.reshape(n, h * wd, c)
    for i in range(cfg.depth):
        shift = 0 if i % 2 == 0 else cfg.window_size // 2
        t = swin_layer(t, (h, wd), cfg, sub_params(params, f"layer{i}."), shift)
    f = t.reshape(n, h, wd, c)
    return x + T.conv2d_nhwc(f, params["conv.w"], params["conv.b"])


def rstb_forward(x: Tensor, cfg: RSTBConfig, params: dict) -> Tensor:
    """Residual Swin block on a [N, C, H, W] map: Swin layers, 3x3 conv, skip."""
    y = rstb_forward_nhwc(x.permute(0, 2, 3, 1), cfg, params)
    return y.permute(0, 3, 1, 2)


# ---------------------------------------------------------------- init

def trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Conv init U(-1/sqrt(fan_in), 1/sqrt(fan_in)), i.e. Kaiming-uniform with a = sqrt(5)."""
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_swin_layer(cfg: RSTBConfig, rng: np.random.Generator) -> dict:
    c, hid, w = cfg.embed_dim, cfg.hidden_dim, cfg.window_size
    z = lambda *s: np.zeros(s, dtype=np.float32)  # noqa: E731
    return {
        "norm1.g": np.ones(c, dtype=np.float32), "norm1.b": z(c),
        "attn.qkv.w": trunc_normal(rng, (c, 3 * c)), "attn.qkv.b": z(3 * c),
        "attn.proj.w": trunc_normal(rng, (c, c)), "attn.proj.b": z(c),
        "attn.rel_table": trunc_normal(rng, ((2 * w - 1) ** 2, cfg.num_heads)),
        "norm2.g": np.ones(c, dtype=np.float32), "norm2.b": z(c),
        "mlp.fc1.w": trunc_normal(rng, (c, hid)), "mlp.fc1.b": z(hid),
        "mlp.fc2.w": trunc_normal(rng, (hid, c)), "mlp.fc2.b": z(c),
    }


def init_rstb(cfg: RSTBConfig, rng: np.random.Generator) -> dict:
    """Fresh numpy parameters of one residual Swin block."""
    params = {}
    for i in range(cfg.depth):
        for k, v in init_swin_layer(cfg, rng).items():
            params[f"layer{i}.{k}"] = v
    c = cfg.embed_dim
    params["conv.w"] = kaiming_uniform(rng, (c, c, 3, 3))
    params["conv.b"] = np.zeros(c, dtype=np.float32)
    return params
