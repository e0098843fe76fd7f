import math

import numpy as np

from .utils import AppConstants

"""
特殊関数モジュール。
第1種・第2種ベッセル関数 J0, J1, Y0, Y1 と第1種ハンケル関数 H0, H1 を実装する。
x ≤ 12 ではべき級数、それより大きい x ではハンケルの漸近展開を使う。
"""

EULER_GAMMA = 0.57721566490153286061


def _as_positive(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("Bessel functions of the second kind require finite x > 0")
    return arr


def _series_terms():
    """(k, 1/(k!)^2, 1/(k!(k+1)!), H_k) を級数の項数分だけ返す。"""
    inv_sq = 1.0
    inv_shift = 1.0
    harmonic = 0.0
    for k in range(AppConstants.BESSEL_SERIES_TERMS):
        if k > 0:
            inv_sq /= k * k
            inv_shift /= k * (k + 1)
            harmonic += 1.0 / k
        yield k, inv_sq, inv_shift, harmonic


def _series(x: np.ndarray):
    """べき級数で (J0, J1, Y0, Y1) を同時に評価する。"""
    q = -0.25 * x * x
    j0 = np.zeros_like(x)
    j1 = np.zeros_like(x)
    y0_tail = np.zeros_like(x)
    y1_tail = np.zeros_like(x)
    power = np.ones_like(x)
    for k, inv_sq, inv_shift, harmonic in _series_terms():
        j0 += power * inv_sq
        j1 += power * inv_shift
        if k > 0:
            y0_tail += harmonic * power * inv_sq
        # ψ(k+1) + ψ(k+2) = −2γ + H_k + H_{k+1}
        y1_tail += (2.0 * harmonic + 1.0 / (k + 1) - 2.0 * EULER_GAMMA) * power * inv_shift
        power = power * q
    half = 0.5 * x
    j1 = half * j1
    log_half = np.log(half)
    y0 = (2.0 / np.pi) * ((log_half + EULER_GAMMA) * j0 - y0_tail)
    y1 = -2.0 / (np.pi * x) + (2.0 / np.pi) * log_half * j1 - half * y1_tail / np.pi
    return j0, j1, y0, y1


def _asymptotic(x: np.ndarray, order: int):
    """ハンケルの漸近展開で (J_n, Y_n) を評価する（n = 0, 1）。

    発散級数なので、項の絶対値が増え始めた所で打ち切る。
    """
    mu = 4.0 * order * order
    p = np.ones_like(x)
    q = np.zeros_like(x)
    term = np.ones_like(x)
    active = np.ones(x.shape, dtype=bool)
    prev = np.full(x.shape, np.inf)
    for k in range(1, 2 * AppConstants.BESSEL_ASYMPTOTIC_TERMS):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        size = np.abs(term)
        active &= size < prev
        prev = np.where(active, size, prev)
        contribution = np.where(active, term, 0.0)
        # a_k / x^k: 偶数 k は P、奇数 k は Q に符号 (−1)^{⌊k/2⌋} で入る
        sign = -1.0 if (k // 2) % 2 else 1.0
        if k % 2 == 0:
            p += sign * contribution
        else:
            q += sign * contribution
        if not np.any(active):
            break
    chi = x - (0.5 * order + 0.25) * np.pi
    amp = np.sqrt(2.0 / (np.pi * x))
    j = amp * (p * np.cos(chi) - q * np.sin(chi))
    y = amp * (p * np.sin(chi) + q * np.cos(chi))
    return j, y


def _evaluate(x, which: str):
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    small = arr <= AppConstants.BESSEL_SERIES_LIMIT
    if np.any(small):
        j0, j1, y0, y1 = _series(arr[small])
        out[small] = {"j0": j0, "j1": j1, "y0": y0, "y1": y1}[which]
    if np.any(~small):
        order = int(which[1])
        j, y = _asymptotic(arr[~small], order)
        out[~small] = j if which[0] == "j" else y
    return float(out[0]) if scalar else out


def bessel_j0(x):
    """J0(x)。x = 0 付近も級数で評価できるが、他の関数と揃えて x > 0 を要求する。"""
    return _evaluate(_as_positive(x), "j0")


def bessel_j1(x):
    return _evaluate(_as_positive(x), "j1")


def bessel_y0(x):
    return _evaluate(_as_positive(x), "y0")


def bessel_y1(x):
    return _evaluate(_as_positive(x), "y1")


def hankel_h0(x):
    """第1種ハンケル関数 H0(x) = J0(x) + i Y0(x)"""
    x = _as_positive(x)
    return bessel_j0(x) + 1j * bessel_y0(x)


def hankel_h1(x):
    """第1種ハンケル関数 H1(x) = J1(x) + i Y1(x)"""
    x = _as_positive(x)
    return bessel_j1(x) + 1j * bessel_y1(x)


def hankel_h0_remainder_limit(k: float) -> complex:
    """r → 0 での −(i/4)H0(kr) − (1/2π) ln r の極限値"""
    return complex(-0.25j + (math.log(0.5 * k) + EULER_GAMMA) / (2.0 * np.pi))
