"""MSE, MAE, SSIM and mean +- sample-std aggregation with CSV/text reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, taps):
    n = len(taps)
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    h = n // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b, dynamic_range: float | None = None) -> float:
    """Mean SSIM over all window positions that fit inside the image.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.
    ``dynamic_range`` defaults to max(a) - min(a), with ``a`` the reference.
    """
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if dynamic_range is None:
        dynamic_range = float(a.max() - a.min())
    if not dynamic_range > 0:
        if np.array_equal(a, b):
            return 1.0
        raise ValueError("dynamic_range must be positive")
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-scan values plus mean and sample standard deviation (n - 1)."""

    name: str
    values: list
    ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(np.std(self.values, ddof=1))

    def format(self, scale: float = 1.0, digits: int = 2) -> str:
        return f"{self.mean * scale:.{digits}f} ± {self.std * scale:.{digits}f}"


def aggregate(values, name: str = "", ids=None, **meta) -> MetricReport:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("cannot aggregate an empty list")
    if any(math.isnan(v) for v in values):
        raise ValueError(f"{name or 'metric'}: NaN among values")
    return MetricReport(name, values, list(ids) if ids is not None else [], meta)


# reporting scales: SSIM is shown x100 as in the published tables
DISPLAY = {"ssim": (100.0, 2), "mse": (1.0, 4), "mae": (1.0, 4)}


def _display(name):
    return DISPLAY.get(name.split("/")[-1], (1.0, 4))


def reports_csv(reports: list) -> str:
    """One row per scan, then a ``mean±std`` footer row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scan"] + [r.name for r in reports])
    ids = reports[0].ids or [str(i) for i in range(len(reports[0].values))]
    for i, sid in enumerate(ids):
        writer.writerow([sid] + [repr(r.values[i]) for r in reports])
    writer.writerow(["mean±std"] + [r.format(*_display(r.name)) for r in reports])
    return buf.getvalue()


def reports_table(rows: dict) -> str:
    """Aligned text table; ``rows`` maps a row label to a list of reports."""
    labels = list(rows)
    names = [r.name for r in rows[labels[0]]]
    cells = [[label] + [r.format(*_display(r.name)) for r in rows[label]] for label in labels]
    header = ["setting"] + names
    widths = [max(len(str(c[i])) for c in [header] + cells) for i in range(len(header))]
    line = lambda row: "  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip()  # noqa: E731
    out = [line(header), line(["-" * w for w in widths])] + [line(c) for c in cells]
    return "\n".join(out) + "\n"
