"""Multi-echo complex images, k-space conversion and truncation, phantoms.

Conventions:

* k-space is the orthonormal 2-D DFT with both the image center and the DC
  bin at index ``(H // 2, W // 2)``.
* Truncation keeps the centered ``th x tw`` block and rescales it by
  ``sqrt(th * tw / (H * W))`` so a constant image keeps its value at every
  resolution.
* Phases are float32 in (-pi, pi]; because float32(pi) > pi, the largest
  representable value below pi stands in for pi.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cst
from .fft import fft2c, ifft2c

PI32 = np.nextafter(np.float32(np.pi), np.float32(0))


def wrap_phase(phase) -> np.ndarray:
    """Wrap angles into (-pi, pi] and return float32."""
    p = np.asarray(phase, dtype=np.float64)
    p = np.pi - np.mod(np.pi - p, 2 * np.pi)
    p = p.astype(np.float32)
    p[p > PI32] = PI32
    p[p < -PI32] = PI32
    return p


@dataclass
class ComplexImage:
    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float32)
        self.phase = np.asarray(self.phase, dtype=np.float32)
        if self.magnitude.ndim != 2 or self.magnitude.shape != self.phase.shape:
            raise ValueError(f"magnitude {self.magnitude.shape} and phase {self.phase.shape} must be equal 2-D shapes")
        if (self.magnitude < 0).any():
            raise ValueError("magnitude must be nonnegative")

    @classmethod
    def from_complex(cls, z) -> "ComplexImage":
        z = np.asarray(z)
        return cls(np.abs(z).astype(np.float32), wrap_phase(np.angle(z)))

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]

    @property
    def shape(self):
        return self.magnitude.shape

    def to_complex(self) -> np.ndarray:
        return self.magnitude.astype(np.float64) * np.exp(1j * self.phase.astype(np.float64))


@dataclass
class MultiEchoVolume:
    echoes: list
    echo_times_ms: tuple = field(default=())

    def __post_init__(self):
        self.echoes = list(self.echoes)
        self.echo_times_ms = tuple(float(t) for t in self.echo_times_ms)
        if not self.echoes:
            raise ValueError("a volume needs at least one echo")
        if len(self.echoes) != len(self.echo_times_ms):
            raise ValueError(f"{len(self.echoes)} echoes but {len(self.echo_times_ms)} echo times")
        if any(t <= 0 for t in self.echo_times_ms):
            raise ValueError("echo times must be positive")
        if any(b <= a for a, b in zip(self.echo_times_ms, self.echo_times_ms[1:])):
            raise ValueError(f"echo times must be strictly increasing, got {self.echo_times_ms}")
        shapes = {e.shape for e in self.echoes}
        if len(shapes) != 1:
            raise ValueError(f"echoes differ in size: {sorted(shapes)}")

    @classmethod
    def from_stacks(cls, magnitude, phase, echo_times_ms) -> "MultiEchoVolume":
        return cls([ComplexImage(m, p) for m, p in zip(magnitude, phase)], echo_times_ms)

    @property
    def shape(self):
        return self.echoes[0].shape

    @property
    def num_echoes(self) -> int:
        return len(self.echoes)

    def magnitude_stack(self) -> np.ndarray:
        return np.stack([e.magnitude for e in self.echoes])

    def phase_stack(self) -> np.ndarray:
        return np.stack([e.phase for e in self.echoes])


@dataclass
class KSpace:
    data: np.ndarray  # complex128, DC at (H // 2, W // 2)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def real(self) -> np.ndarray:
        return self.data.real

    @property
    def imag(self) -> np.ndarray:
        return self.data.imag


def to_kspace(img: ComplexImage) -> KSpace:
    return KSpace(fft2c(img.to_complex()))


def from_kspace(k: KSpace) -> ComplexImage:
    return ComplexImage.from_complex(ifft2c(k.data))


def truncate_kspace(k: KSpace, th: int, tw: int) -> KSpace:
    """Keep the centered th x tw block around DC, rescaled to preserve mean intensity."""
    h, w = k.data.shape
    if th > h or tw > w or th < 1 or tw < 1:
        raise ValueError(f"cannot truncate {h}x{w} k-space to {th}x{tw}")
    r0 = h // 2 - th // 2
    c0 = w // 2 - tw // 2
    block = k.data[r0:r0 + th, c0:c0 + tw]
    if (th, tw) == (h, w):
        return KSpace(block.copy())
    return KSpace(block * np.sqrt((th * tw) / (h * w)))


def simulate_lowres(volume: MultiEchoVolume, th: int, tw: int) -> MultiEchoVolume:
    """Per echo: to k-space, keep the central th x tw block, back to image space."""
    echoes = [from_kspace(truncate_kspace(to_kspace(e), th, tw)) for e in volume.echoes]
    return MultiEchoVolume(echoes, volume.echo_times_ms)


# ---------------------------------------------------------------- phantom

def signal_model(m0, r2s, df, phi0, te_ms) -> np.ndarray:
    """S(TE) = M0 exp(-TE R2*) exp(i (phi0 + 2 pi df TE)); R2* in 1/ms, df in kHz."""
    return m0 * np.exp(-te_ms * r2s) * np.exp(1j * (phi0 + 2 * np.pi * df * te_ms))


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_phantom(seed: int, height: int, width: int,
                     echo_times_ms: Sequence[float] = (14.0, 27.0, 40.0),
                     noise_std: float = 0.0, df_scale: float = 1.0):
    """Seeded head-like multi-echo phantom.

    Sharp-edged ellipses (skull, brain, ventricles) carry M0, R2* and a smooth
    background field; two small midbrain inclusions with raised R2* and
    positive off-resonance mimic iron-rich nigral tissue, and a few small
    vessel-like dots add more paramagnetic structure. ``df_scale`` scales
    every off-resonance term (0 gives echo-independent phase).

    Returns the volume and a dict of float32 ground-truth maps
    (``m0``, ``r2s`` in 1/ms, ``df`` in kHz, ``phi0``, ``inclusions``).
    """
    if height < 32 or width < 32:
        raise ValueError(f"phantom needs at least 32x32 pixels, got {height}x{width}")
    if len(echo_times_ms) < 1:
        raise ValueError("need at least one echo time")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")

    def jit(scale):
        return rng.uniform(-scale, scale)

    m0 = np.zeros((height, width))
    r2s = np.zeros((height, width))
    df = np.zeros((height, width))

    cy, cx = jit(0.03), jit(0.03)
    head_ry, head_rx = 0.90 * (1 + jit(0.04)), 0.72 * (1 + jit(0.04))
    head = _ellipse(yy, xx, cy, cx, head_ry, head_rx)
    m0[head] = 0.55 + jit(0.05)
    r2s[head] = 0.030 + jit(0.005)
    brain = _ellipse(yy, xx, cy, cx, head_ry - 0.07, head_rx - 0.07)
    m0[brain] = 0.80 + jit(0.05)
    r2s[brain] = 0.022 + jit(0.003)

    # smooth gray/white texture inside the brain
    for _ in range(4):
        by, bx = cy + jit(0.5), cx + jit(0.4)
        width_b = rng.uniform(0.15, 0.35)
        bump = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * width_b ** 2))
        m0 += brain * jit(0.12) * bump

    tilt = jit(0.15)
    for side in (-1, 1):
        vent = _ellipse(yy, xx, cy - 0.25 + jit(0.03), cx + side * (0.12 + jit(0.02)),
                        0.22 * (1 + jit(0.1)), 0.07 * (1 + jit(0.1)), side * (0.3 + tilt))
        m0[vent] = 1.0
        r2s[vent] = 0.008

    inclusions = np.zeros((height, width), dtype=bool)
    for side in (-1, 1):
        nig = _ellipse(yy, xx, cy + 0.18 + jit(0.03), cx + side * (0.13 + jit(0.02)),
                       0.035 * (1 + jit(0.15)), 0.075 * (1 + jit(0.15)), side * (0.5 + jit(0.2)))
        inclusions |= nig
        m0[nig] = 0.65 + jit(0.05)
        r2s[nig] = 0.055 + jit(0.01)
        df[nig] = 0.0065 + jit(0.0015)
    for _ in range(int(rng.integers(3, 7))):
        vy, vx = cy + jit(0.6), cx + jit(0.45)
        dot = _ellipse(yy, xx, vy, vx, 0.02, 0.02) & brain
        inclusions |= dot
        r2s[dot] = 0.045 + jit(0.01)
        df[dot] = 0.005 + jit(0.001)

    df += (jit(0.002) * yy + jit(0.002) * xx + jit(0.001) * (xx * yy)) * 1.0
    df *= df_scale
    phi0 = jit(np.pi / 2) + jit(0.4) * xx + jit(0.4) * yy

    m0 = np.clip(m0, 0.0, None)
    m0 /= m0.max()
    echoes = []
    for te in echo_times_ms:
        z = signal_model(m0, r2s, df, phi0, te)
        if noise_std > 0:
            z = z + noise_std * (rng.standard_normal(z.shape) + 1j * rng.standard_normal(z.shape))
        echoes.append(ComplexImage.from_complex(z))
    maps = {
        "m0": m0.astype(np.float32),
        "r2s": r2s.astype(np.float32),
        "df": df.astype(np.float32),
        "phi0": phi0.astype(np.float32),
        "inclusions": inclusions.astype(np.float32),
    }
    return MultiEchoVolume(echoes, tuple(echo_times_ms)), maps


# ---------------------------------------------------------------- files

def _stem(path) -> str:
    s = os.fspath(path)
    for suffix in (".mag.cst", ".phase.cst", ".hdr"):
        if s.endswith(suffix):
            return s[: -len(suffix)]
    return s


def save_volume(path, volume: MultiEchoVolume):
    """Write ``<stem>.mag.cst``, ``<stem>.phase.cst`` and the ``<stem>.hdr`` sidecar."""
    stem = _stem(path)
    cst.save(stem + ".mag.cst", volume.magnitude_stack())
    cst.save(stem + ".phase.cst", volume.phase_stack())
    h, w = volume.shape
    text = (f"echoes={volume.num_echoes}\n"
            f"echo_times_ms={','.join(repr(t) for t in volume.echo_times_ms)}\n"
            f"height={h}\nwidth={w}\n")
    with open(stem + ".hdr", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_volume(path) -> MultiEchoVolume:
    stem = _stem(path)
    header = {}
    with open(stem + ".hdr", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
    if "echo_times_ms" not in header:
        raise cst.FormatError(f"{stem}.hdr: missing echo_times_ms")
    tes = tuple(float(v) for v in header["echo_times_ms"].split(","))
    mag = cst.load(stem + ".mag.cst")
    phase = cst.load(stem + ".phase.cst")
    if mag.ndim != 3 or mag.shape != phase.shape or mag.shape[0] != len(tes):
        raise cst.FormatError(f"{stem}: stacks {mag.shape}/{phase.shape} do not match {len(tes)} echo times")
    return MultiEchoVolume.from_stacks(mag, phase, tes)


def volume_stems(directory) -> list:
    """Sorted stems of every volume (``*.hdr``) in a directory."""
    return sorted(str(p)[:-4] for p in Path(directory).glob("*.hdr"))


def export_png(image, path):
    """8-bit grayscale PNG with min-max windowing; writes ``<path>.window.txt``.

    Pixel value = round(255 * (x - min) / (max - min)); a flat image maps to 0.
    """
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PNG export needs a 2-D image, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    u8 = np.round(scaled * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(os.fspath(path), format="PNG")
    with open(os.fspath(path) + ".window.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"min={lo!r}\nmax={hi!r}\n")
    return lo, hi
