"""Mixed-radix FFT for arbitrary lengths, plus centered 2-D helpers.

Lengths are split recursively by their smallest prime factor
(decimation in time). Small prime lengths use a direct DFT matrix, larger
primes go through Bluestein's chirp-z convolution on a power-of-two grid.
All arithmetic is complex128.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_DIRECT_MAX = 32


def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * ((np.outer(k, k)) % n) / n)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int, sign: int) -> np.ndarray:
    j = np.arange(p)[:, None]
    k = np.arange(m)[None, :]
    return np.exp(sign * 2j * np.pi * ((j * k) % (p * m)) / (p * m))


@lru_cache(maxsize=None)
def _chirp(n: int, sign: int) -> np.ndarray:
    k = np.arange(n, dtype=np.int64)
    return np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << (2 * n - 2).bit_length()
    w = _chirp(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * w
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(w)
    b[m - n + 1:] = np.conj(w[1:][::-1])
    fa = _fft_last(a, -1)
    fb = _fft_last(b, -1)
    conv = _fft_last(fa * fb, +1) / m
    return conv[..., :n] * w


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(complex, copy=True)
    p = _smallest_factor(n)
    if p == n:
        if n <= _DIRECT_MAX:
            return x @ _dft_matrix(n, sign).T
        return _bluestein(x, sign)
    m = n // p
    # sub[..., j, r] = x[..., r*p + j]
    sub = np.swapaxes(x.reshape(x.shape[:-1] + (m, p)), -1, -2)
    y = _fft_last(sub, sign) * _twiddles(p, m, sign)
    # out[..., q, k] = sum_j W_p^{jq} y[..., j, k]; flat index q*m + k
    out = _dft_matrix(p, sign) @ y
    return out.reshape(x.shape)


def fft(x, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unnormalized DFT along ``axis`` (inverse uses +i and no 1/n factor)."""
    x = np.moveaxis(np.asarray(x, dtype=complex), axis, -1)
    y = _fft_last(x, +1 if inverse else -1)
    return np.moveaxis(y, -1, axis)


def fft2(x, inverse: bool = False, norm: str = "ortho") -> np.ndarray:
    """2-D DFT over the last two axes. ``norm="ortho"`` scales by 1/sqrt(HW)."""
    y = fft(fft(x, -1, inverse), -2, inverse)
    if norm == "ortho":
        h, w = y.shape[-2:]
        y = y / np.sqrt(h * w)
    elif norm != "backward":
        raise ValueError(f"unknown norm {norm!r}")
    elif inverse:
        h, w = y.shape[-2:]
        y = y / (h * w)
    return y


def fftshift(x, axes=(-2, -1)) -> np.ndarray:
    """Move index 0 to floor(n/2) on each axis."""
    x = np.asarray(x)
    return np.roll(x, [x.shape[a] // 2 for a in axes], axes)


def ifftshift(x, axes=(-2, -1)) -> np.ndarray:
    x = np.asarray(x)
    return np.roll(x, [-(x.shape[a] // 2) for a in axes], axes)


def fft2c(img) -> np.ndarray:
    """Centered orthonormal forward transform: image center and DC both at (H//2, W//2)."""
    return fftshift(fft2(ifftshift(img)))


def ifft2c(k) -> np.ndarray:
    return fftshift(fft2(ifftshift(k), inverse=True))
