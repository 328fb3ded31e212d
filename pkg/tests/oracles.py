"""Brute-force reference implementations used only by the tests."""

import numpy as np


def naive_dft2_centered(img):
    """Orthonormal 2-D DFT with DC moved to (H // 2, W // 2), by direct summation.

    X[u, v] = 1/sqrt(HW) * sum_{y,x} img[y, x] * exp(-2 pi i (u' y / H + v' x / W)),
    where u' = u - H // 2 labels the shifted output row; the input is indexed
    the same way, centred at (H // 2, W // 2).
    """
    img = np.asarray(img, dtype=np.complex128)
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.complex128)
    ys = np.arange(h) - h // 2
    xs = np.arange(w) - w // 2
    for u in range(h):
        for v in range(w):
            acc = 0j
            for yi, y in enumerate(ys):
                for xi, x in enumerate(xs):
                    acc += img[yi, xi] * np.exp(-2j * np.pi * ((u - h // 2) * y / h + (v - w // 2) * x / w))
            out[u, v] = acc / np.sqrt(h * w)
    return out


def ssim_per_window(a, b, dynamic_range, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM from its definition, window by window, with explicit loops."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            mu_a = np.sum(win * pa)
            mu_b = np.sum(win * pb)
            var_a = np.sum(win * (pa - mu_a) ** 2)
            var_b = np.sum(win * (pb - mu_b) ** 2)
            cov = np.sum(win * (pa - mu_a) * (pb - mu_b))
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))
