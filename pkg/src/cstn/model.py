"""Complex Swin Transformer Network: dual-branch magnitude/phase super-resolution.

Data flow::

    mag_in  [1, E, H, W] --conv--\\
                                  concat -> fusion conv -> F0
    phase_in[1, 2E, H, W] --conv--/
    F0 -> RSTB x num_rstb -> body conv -> + F0 -> D
    D -> mag head   (conv, gelu, conv) -> + mag_in   -> hq_mag
    D -> phase head (conv, gelu, conv) -> + phase_in -> unit (cos, sin) pairs -> hq_phase

Low-resolution echoes are bicubically resampled onto the target grid first,
so one network serves any input size. Phase travels as (cos, sin) channel
pairs ``[cos e0, sin e0, cos e1, sin e1, ...]``. The last conv of both heads
and the body conv start at zero, making a fresh network the identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import cst
from . import tensor as T
from .mri import MultiEchoVolume, wrap_phase
from .swin import RSTBConfig, init_rstb, kaiming_uniform, rstb_forward_nhwc, sub_params
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"CSTK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected configuration."""


@dataclass(frozen=True)
class CSTNConfig:
    num_rstb: int = 6
    rstb: RSTBConfig = field(default_factory=RSTBConfig)
    in_echoes: int = 3
    target_size: tuple = (384, 384)
    # layer widths below: not from paper
    shallow_channels: int = 24
    head_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(int(v) for v in self.target_size))
        if self.num_rstb < 1 or self.in_echoes < 1:
            raise ValueError("num_rstb and in_echoes must be positive")
        if self.shallow_channels < 1 or self.head_channels < 1:
            raise ValueError("channel counts must be positive")

    def to_items(self) -> list:
        r = self.rstb
        return [
            ("model.num_rstb", str(self.num_rstb)),
            ("model.depth", str(r.depth)),
            ("model.num_heads", str(r.num_heads)),
            ("model.embed_dim", str(r.embed_dim)),
            ("model.mlp_ratio", repr(float(r.mlp_ratio))),
            ("model.window_size", str(r.window_size)),
            ("model.in_echoes", str(self.in_echoes)),
            ("model.target_size", f"{self.target_size[0]}x{self.target_size[1]}"),
            ("model.shallow_channels", str(self.shallow_channels)),
            ("model.head_channels", str(self.head_channels)),
        ]

    @classmethod
    def from_items(cls, items: dict) -> "CSTNConfig":
        base = cls()
        get = lambda k, d: items.get(f"model.{k}", d)  # noqa: E731
        rstb = RSTBConfig(
            depth=int(get("depth", base.rstb.depth)),
            num_heads=int(get("num_heads", base.rstb.num_heads)),
            embed_dim=int(get("embed_dim", base.rstb.embed_dim)),
            mlp_ratio=float(get("mlp_ratio", base.rstb.mlp_ratio)),
            window_size=int(get("window_size", base.rstb.window_size)),
        )
        size = get("target_size", None)
        target = base.target_size if size is None else parse_size(size)
        return cls(
            num_rstb=int(get("num_rstb", base.num_rstb)),
            rstb=rstb,
            in_echoes=int(get("in_echoes", base.in_echoes)),
            target_size=target,
            shallow_channels=int(get("shallow_channels", base.shallow_channels)),
            head_channels=int(get("head_channels", base.head_channels)),
        )

    def with_(self, **kw) -> "CSTNConfig":
        return replace(self, **kw)


def parse_size(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    parts = str(text).lower().replace(",", "x").split("x")
    if len(parts) == 1:
        return (int(parts[0]), int(parts[0]))
    return (int(parts[0]), int(parts[1]))


# ---------------------------------------------------------------- weights

def weight_shapes(cfg: CSTNConfig) -> dict:
    """Ordered name -> shape map of every learnable tensor."""
    e, s, d, hc = cfg.in_echoes, cfg.shallow_channels, cfg.rstb.embed_dim, cfg.head_channels
    hid, w = cfg.rstb.hidden_dim, cfg.rstb.window_size
    shapes = {
        "mag_shallow.w": (s, e, 3, 3), "mag_shallow.b": (s,),
        "phase_shallow.w": (s, 2 * e, 3, 3), "phase_shallow.b": (s,),
        "fusion.w": (d, 2 * s, 3, 3), "fusion.b": (d,),
    }
    layer = {
        "norm1.g": (d,), "norm1.b": (d,),
        "attn.qkv.w": (d, 3 * d), "attn.qkv.b": (3 * d,),
        "attn.proj.w": (d, d), "attn.proj.b": (d,),
        "attn.rel_table": ((2 * w - 1) ** 2, cfg.rstb.num_heads),
        "norm2.g": (d,), "norm2.b": (d,),
        "mlp.fc1.w": (d, hid), "mlp.fc1.b": (hid,),
        "mlp.fc2.w": (hid, d), "mlp.fc2.b": (d,),
    }
    for i in range(cfg.num_rstb):
        for j in range(cfg.rstb.depth):
            for k, v in layer.items():
                shapes[f"rstb{i}.layer{j}.{k}"] = v
        shapes[f"rstb{i}.conv.w"] = (d, d, 3, 3)
        shapes[f"rstb{i}.conv.b"] = (d,)
    shapes["body.w"] = (d, d, 3, 3)
    shapes["body.b"] = (d,)
    for head, out in (("mag_head", e), ("phase_head", 2 * e)):
        shapes[f"{head}.conv1.w"] = (hc, d, 3, 3)
        shapes[f"{head}.conv1.b"] = (hc,)
        shapes[f"{head}.conv2.w"] = (out, hc, 3, 3)
        shapes[f"{head}.conv2.b"] = (out,)
    return shapes


ZERO_INIT = ("body.w", "body.b", "mag_head.conv2.w", "mag_head.conv2.b",
             "phase_head.conv2.w", "phase_head.conv2.b")


def init_weights(cfg: CSTNConfig, seed: int = 0) -> dict:
    """Seeded initialization: truncated normal (0.02) for attention/MLP,
    Kaiming-uniform for convs, zeros for the body conv and last head convs."""
    rng = np.random.default_rng(seed)
    shapes = weight_shapes(cfg)
    arrays = {}
    for name in ("mag_shallow", "phase_shallow", "fusion"):
        arrays[f"{name}.w"] = kaiming_uniform(rng, shapes[f"{name}.w"])
        arrays[f"{name}.b"] = np.zeros(shapes[f"{name}.b"], dtype=np.float32)
    for i in range(cfg.num_rstb):
        for k, v in init_rstb(cfg.rstb, rng).items():
            arrays[f"rstb{i}.{k}"] = v
    for head in ("mag_head", "phase_head"):
        arrays[f"{head}.conv1.w"] = kaiming_uniform(rng, shapes[f"{head}.conv1.w"])
        arrays[f"{head}.conv1.b"] = np.zeros(shapes[f"{head}.conv1.b"], dtype=np.float32)
    for name in ZERO_INIT:
        arrays[name] = np.zeros(shapes[name], dtype=np.float32)
    return {name: Tensor(arrays[name]) for name in shapes}


def check_weights(cfg: CSTNConfig, weights: dict):
    shapes = weight_shapes(cfg)
    missing = [k for k in shapes if k not in weights]
    extra = [k for k in weights if k not in shapes]
    if missing or extra:
        raise CheckpointError(f"weights do not match config: missing {missing[:3]}, unexpected {extra[:3]}"
                              f" ({len(missing)} missing, {len(extra)} unexpected)")
    for k, shp in shapes.items():
        if tuple(weights[k].shape) != tuple(shp):
            raise CheckpointError(f"{k}: shape {tuple(weights[k].shape)} but config implies {shp}")
        if not np.isfinite(weights[k].data).all():
            raise CheckpointError(f"{k}: non-finite values")


# ---------------------------------------------------------------- resampling

def _keys_cubic(t, a=-0.5):
    t = np.abs(t)
    return np.where(t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
                    np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


def cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] periodic Keys-cubic resampling matrix.

    Output sample i sits at input coordinate i * n_in / n_out, which is the
    grid that centered k-space truncation produces.
    """
    m = np.zeros((n_out, n_in))
    src = np.arange(n_out) * (n_in / n_out)
    base = np.floor(src).astype(int)
    frac = src - base
    for off in (-1, 0, 1, 2):
        np.add.at(m, (np.arange(n_out), (base + off) % n_in), _keys_cubic(frac - off))
    return m


def resize_bicubic(img, size) -> np.ndarray:
    """Bicubic resampling of the last two axes to ``size`` (identity at equal size)."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return img.astype(np.float32, copy=True)
    out = cubic_matrix(h, th) @ img.astype(np.float64) @ cubic_matrix(w, tw).T
    return out.astype(np.float32)


# ---------------------------------------------------------------- pipeline

def preprocess(lr: MultiEchoVolume, target_size) -> tuple:
    """Resample echoes onto the target grid and encode phase as unit (cos, sin) pairs."""
    if lr is None or lr.num_echoes == 0:
        raise ValueError("empty volume")
    h, w = lr.shape
    th, tw = parse_size(target_size)
    if th < h or tw < w:
        raise ValueError(f"target {th}x{tw} is smaller than input {h}x{w}")
    mag = resize_bicubic(lr.magnitude_stack(), (th, tw))
    ph = lr.phase_stack().astype(np.float64)
    c = resize_bicubic(np.cos(ph), (th, tw)).astype(np.float64)
    s = resize_bicubic(np.sin(ph), (th, tw)).astype(np.float64)
    r = np.maximum(np.sqrt(c * c + s * s), 1e-12)
    pairs = np.stack([c / r, s / r], axis=1).reshape(2 * lr.num_echoes, th, tw)
    return Tensor(mag[None].astype(np.float32)), Tensor(pairs[None].astype(np.float32))


def normalize_pairs(x: Tensor) -> Tensor:
    """Scale each (cos, sin) channel pair of [N, 2E, H, W] to unit length."""
    n, c2, h, w = x.shape
    p = x.reshape(n, c2 // 2, 2, h, w)
    r = T.tsqrt(T.tsum(p * p, axis=2, keepdims=True) + 1e-12)
    return (p / r).reshape(n, c2, h, w)


def _conv(x, weights, name):
    # x is channels-last inside the network
    return T.conv2d_nhwc(x, weights[name + ".w"], weights[name + ".b"])


def forward(mag_in: Tensor, phase_in: Tensor, cfg: CSTNConfig, weights: dict) -> tuple:
    """Run the network; returns (hq_mag [N,E,H,W], hq_phase [N,2E,H,W])."""
    e = cfg.in_echoes
    if mag_in.ndim != 4 or phase_in.ndim != 4:
        raise ShapeError(f"inputs must be 4-D, got {mag_in.shape} and {phase_in.shape}")
    if mag_in.shape[1] != e or phase_in.shape[1] != 2 * e:
        raise ShapeError(f"network expects {e} echoes ({e} magnitude / {2 * e} phase channels), "
                         f"got {mag_in.shape[1]} / {phase_in.shape[1]}")
    if mag_in.shape[2:] != phase_in.shape[2:] or mag_in.shape[0] != phase_in.shape[0]:
        raise ShapeError(f"branch shapes differ: {mag_in.shape} vs {phase_in.shape}")
    fm = _conv(mag_in.permute(0, 2, 3, 1), weights, "mag_shallow")
    fp = _conv(phase_in.permute(0, 2, 3, 1), weights, "phase_shallow")
    f0 = _conv(T.concat([fm, fp], axis=3), weights, "fusion")
    x = f0
    for i in range(cfg.num_rstb):
        x = rstb_forward_nhwc(x, cfg.rstb, sub_params(weights, f"rstb{i}."))
    deep = _conv(x, weights, "body") + f0
    hm = _conv(T.gelu(_conv(deep, weights, "mag_head.conv1")), weights, "mag_head.conv2")
    hp = _conv(T.gelu(_conv(deep, weights, "phase_head.conv1")), weights, "phase_head.conv2")
    hm, hp = hm.permute(0, 3, 1, 2), hp.permute(0, 3, 1, 2)
    return mag_in + hm, normalize_pairs(phase_in + hp)


def skip_network(mag_in: Tensor, phase_in: Tensor) -> tuple:
    """The bicubic baseline: network outputs with every learned residual at zero."""
    return mag_in, normalize_pairs(phase_in)


def postprocess(hq_mag, hq_phase, echo_times_ms) -> MultiEchoVolume:
    """Clamp magnitudes at zero and decode phases with atan2(sin, cos)."""
    mag = np.asarray(hq_mag.data if isinstance(hq_mag, Tensor) else hq_mag)[0]
    pairs = np.asarray(hq_phase.data if isinstance(hq_phase, Tensor) else hq_phase)[0]
    e = mag.shape[0]
    if pairs.shape[0] != 2 * e:
        raise ShapeError(f"{e} magnitude channels need {2 * e} phase channels, got {pairs.shape[0]}")
    mag = np.maximum(mag, 0).astype(np.float32)
    phase = wrap_phase(np.arctan2(pairs[1::2].astype(np.float64), pairs[0::2].astype(np.float64)))
    return MultiEchoVolume.from_stacks(mag, phase, echo_times_ms)


def enhance(lr: MultiEchoVolume, cfg: CSTNConfig, weights: dict) -> MultiEchoVolume:
    """preprocess -> forward -> postprocess, without recording gradients."""
    if lr.num_echoes != cfg.in_echoes:
        raise ShapeError(f"volume has {lr.num_echoes} echoes, network expects {cfg.in_echoes}")
    with T.no_grad():
        mag_in, phase_in = preprocess(lr, cfg.target_size)
        hq_mag, hq_phase = forward(mag_in, phase_in, cfg, weights)
    return postprocess(hq_mag, hq_phase, lr.echo_times_ms)


def bicubic_baseline(lr: MultiEchoVolume, target_size) -> MultiEchoVolume:
    with T.no_grad():
        mag_in, phase_in = preprocess(lr, target_size)
        m, p = skip_network(mag_in, phase_in)
    return postprocess(m, p, lr.echo_times_ms)


# ---------------------------------------------------------------- checkpoints

def config_text(items) -> str:
    return "".join(f"{k}={v}\n" for k, v in items)


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def encode_checkpoint(cfg: CSTNConfig, weights: dict) -> bytes:
    check_weights(cfg, weights)
    text = config_text(cfg.to_items()).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             struct.pack("<I", len(text)), text, struct.pack("<I", len(weights))]
    for name in weight_shapes(cfg):
        raw = name.encode("utf-8")
        blob = cst.encode(weights[name].data)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected: CSTNConfig | None = None) -> tuple:
    def need(pos, n, what):
        if len(blob) - pos < n:
            raise CheckpointError(f"checkpoint truncated while reading {what}")

    need(0, 6, "header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    need(pos, 4, "config length")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need(pos, n, "config")
    cfg = CSTNConfig.from_items(parse_config_text(blob[pos:pos + n].decode("utf-8")))
    pos += n
    if expected is not None and expected != cfg:
        diff = [k for (k, a), (_, b) in zip(expected.to_items(), cfg.to_items()) if a != b]
        raise CheckpointError(f"config mismatch on {diff}")
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    weights = {}
    for _ in range(count):
        need(pos, 2, "name length")
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, ln, "name")
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        need(pos, 4, f"{name} length")
        (lb,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(pos, lb, name)
        try:
            arr, end = cst.decode(blob[pos:pos + lb])
        except cst.FormatError as exc:
            raise CheckpointError(f"{name}: {exc}") from None
        if end != lb:
            raise CheckpointError(f"{name}: {lb - end} stray bytes")
        weights[name] = Tensor(arr)
        pos += lb
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    check_weights(cfg, weights)
    return cfg, weights


def save_checkpoint(path, cfg: CSTNConfig, weights: dict):
    data = encode_checkpoint(cfg, weights)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, expected: CSTNConfig | None = None) -> tuple:
    """Returns (config, weights); validates shapes against the embedded config."""
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected)
