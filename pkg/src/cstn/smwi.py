"""Susceptibility map-weighted image from a multi-echo complex volume.

This is a simplified phase-mask pipeline, not QSM:

1. homodyne high-pass per echo: phase of z / lowpass(z), with a separable
   Hann low-pass and mirrored borders;
2. linear paramagnetic mask: 1 for non-positive filtered phase, falling to
   0 at ``cutoff`` radians;
3. per-echo masks averaged, raised to ``power`` and applied to the combined
   echo magnitude.

Positive filtered phase counts as paramagnetic; ``sign=-1`` flips that.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import convolve1d

from .mri import ComplexImage, MultiEchoVolume, wrap_phase


@dataclass(frozen=True)
class SMWIParams:
    # defaults: not from paper
    kernel: int = 33
    cutoff: float = np.pi / 2
    power: int = 4
    combine: str = "average"
    sign: int = 1

    def __post_init__(self):
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 3, got {self.kernel}")
        if not 0 < self.cutoff <= np.pi:
            raise ValueError(f"cutoff must lie in (0, pi], got {self.cutoff}")
        if int(self.power) != self.power or self.power < 1:
            raise ValueError(f"power must be a positive integer, got {self.power}")
        if self.combine not in ("average", "rss"):
            raise ValueError(f"combine must be 'average' or 'rss', got {self.combine!r}")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    def to_items(self):
        return [("smwi.kernel", str(self.kernel)), ("smwi.cutoff", repr(float(self.cutoff))),
                ("smwi.power", str(self.power)), ("smwi.combine", self.combine),
                ("smwi.sign", str(self.sign))]

    @classmethod
    def from_items(cls, items: dict) -> "SMWIParams":
        base = cls()
        return cls(kernel=int(items.get("smwi.kernel", base.kernel)),
                   cutoff=float(items.get("smwi.cutoff", base.cutoff)),
                   power=int(items.get("smwi.power", base.power)),
                   combine=items.get("smwi.combine", base.combine),
                   sign=int(items.get("smwi.sign", base.sign)))


@dataclass
class SMWIImage:
    data: np.ndarray
    params: SMWIParams

    @property
    def provenance(self) -> dict:
        return asdict(self.params)


def hann_window(size: int) -> np.ndarray:
    """Hann taps of odd ``size`` without the zero end points, summing to 1."""
    taps = np.hanning(size + 2)[1:-1]
    return taps / taps.sum()


def lowpass(z: np.ndarray, kernel: int) -> np.ndarray:
    taps = hann_window(kernel)
    out = []
    for part in (z.real, z.imag):
        part = convolve1d(part, taps, axis=0, mode="reflect")
        out.append(convolve1d(part, taps, axis=1, mode="reflect"))
    return out[0] + 1j * out[1]


def highpass_phase(img: ComplexImage, kernel: int = 33) -> np.ndarray:
    """arg(z / lowpass(z)) wrapped to (-pi, pi]; 0 wherever z or its low-pass vanish."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    z = img.to_complex()
    lp = lowpass(z, kernel)
    valid = (np.abs(z) > 0) & (np.abs(lp) > 1e-12)
    ratio = np.where(valid, z * np.conj(lp), 1.0)
    phase = np.where(valid, np.angle(ratio), 0.0)
    return wrap_phase(phase)


def compute_mask(phase_hp, cutoff: float = np.pi / 2, sign: int = 1) -> np.ndarray:
    """clamp(1 - phase / cutoff, 0, 1) for positive phase, 1 elsewhere."""
    p = sign * np.asarray(phase_hp, dtype=np.float64)
    m = np.where(p > 0, np.clip(1.0 - p / cutoff, 0.0, 1.0), 1.0)
    return m.astype(np.float32)


def combine_echoes(volume: MultiEchoVolume, mode: str = "average") -> np.ndarray:
    mags = volume.magnitude_stack().astype(np.float64)
    if mode == "average":
        out = mags.mean(axis=0)
    elif mode == "rss":
        out = np.sqrt((mags * mags).mean(axis=0))
    else:
        raise ValueError(f"unknown combine mode {mode!r}")
    if volume.num_echoes == 1:
        return volume.echoes[0].magnitude.copy()
    return out.astype(np.float32)


def reconstruct_smwi(volume: MultiEchoVolume, params: SMWIParams = SMWIParams()) -> SMWIImage:
    masks = [compute_mask(highpass_phase(e, params.kernel), params.cutoff, params.sign)
             for e in volume.echoes]
    m = np.mean(np.stack(masks).astype(np.float64), axis=0)
    weight = m ** params.power
    combined = combine_echoes(volume, params.combine)
    out = np.where(weight == 1.0, combined, combined * weight).astype(np.float32)
    return SMWIImage(out, params)
