import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .special import hankel_h0, hankel_h1
from .utils import BinetError

"""
基本解モジュール。
- `PdeKind` : 対象とする偏微分方程式とそのパラメータ
- `greens` : 基本解 G(x, y)
- `greens_dn` : ∂G/∂n_y（2次元 Laplace / Helmholtz のみ）

ソルバーが演算子を組み立てるのは 2 次元 Laplace / Helmholtz だけで、
それ以外の核は評価と検証のために提供する。
"""

LAPLACE_2D = "laplace2d"
HELMHOLTZ_2D = "helmholtz2d"
LAPLACE_3D = "laplace3d"
HELMHOLTZ_3D = "helmholtz3d"
NAVIER_2D = "navier2d"
NAVIER_3D = "navier3d"
STOKES_2D = "stokes2d"
STOKES_3D = "stokes3d"
BIHARMONIC_2D = "biharmonic2d"

PDE_NAMES = (LAPLACE_2D, HELMHOLTZ_2D, LAPLACE_3D, HELMHOLTZ_3D,
             NAVIER_2D, NAVIER_3D, STOKES_2D, STOKES_3D, BIHARMONIC_2D)

_DIMENSION = {
    LAPLACE_2D: 2, HELMHOLTZ_2D: 2, NAVIER_2D: 2, STOKES_2D: 2, BIHARMONIC_2D: 2,
    LAPLACE_3D: 3, HELMHOLTZ_3D: 3, NAVIER_3D: 3, STOKES_3D: 3,
}


class KernelDomainError(BinetError, ValueError):
    """特異点 x = y での評価、または未対応の方程式"""


@dataclass(frozen=True)
class PdeKind:
    """方程式の種類と定数（波数 k、Lamé 定数 λ, μ、粘性 μ）"""
    name: str
    k: Optional[float] = None
    lam: Optional[float] = None
    mu: Optional[float] = None

    def __post_init__(self):
        if self.name not in PDE_NAMES:
            raise KernelDomainError(f"unknown PDE '{self.name}'")
        if self.name in (HELMHOLTZ_2D, HELMHOLTZ_3D):
            _require_positive(self.name, "k", self.k)
        if self.name in (NAVIER_2D, NAVIER_3D):
            _require_positive(self.name, "lam", self.lam)
            _require_positive(self.name, "mu", self.mu)
        if self.name in (STOKES_2D, STOKES_3D):
            _require_positive(self.name, "mu", self.mu)

    @property
    def dim(self) -> int:
        return _DIMENSION[self.name]

    @property
    def is_complex(self) -> bool:
        return self.name in (HELMHOLTZ_2D, HELMHOLTZ_3D)

    @property
    def supports_layer_operators(self) -> bool:
        return self.name in (LAPLACE_2D, HELMHOLTZ_2D)

    @classmethod
    def laplace(cls) -> "PdeKind":
        return cls(LAPLACE_2D)

    @classmethod
    def helmholtz(cls, k: float) -> "PdeKind":
        return cls(HELMHOLTZ_2D, k=float(k))


@dataclass(frozen=True, eq=False)
class KernelValue:
    """核の値。スカラー核は (...) 形状、行列核は (..., d, d) 形状。

    Stokes では `pressure` に q^k（(..., d) 形状、成分 k ごと）が入る。
    """
    value: np.ndarray
    pressure: Optional[np.ndarray] = None


def _require_positive(name: str, field: str, value) -> None:
    if value is None or not value > 0:
        raise KernelDomainError(f"{name}: parameter {field} must be positive, got {value}")


def unit_sphere_measure(n: int) -> float:
    """ℝ^n の単位球面の測度 w_n = 2π^{n/2}/Γ(n/2)"""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def _differences(pde: PdeKind, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != pde.dim or y.shape[-1] != pde.dim:
        raise KernelDomainError(f"{pde.name} expects points in R^{pde.dim}")
    diff = x - y
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    return diff, r


def _check_separated(pde: PdeKind, r: np.ndarray) -> None:
    if np.any(r == 0.0):
        raise KernelDomainError(f"{pde.name} kernel is singular at x = y; use the corrected quadrature")


def greens(pde: PdeKind, x, y) -> KernelValue:
    """基本解 G(x, y) を評価する。x, y は (..., d) 形状で放送される。

    Raises:
        KernelDomainError: 特異核で x = y
    """
    diff, r = _differences(pde, x, y)

    if pde.name == BIHARMONIC_2D:
        # r → 0 の極限 r² ln r → 0
        safe = np.where(r > 0.0, r, 1.0)
        return KernelValue(np.where(r > 0.0, r * r * np.log(safe) / (8.0 * np.pi), 0.0))

    _check_separated(pde, r)
    dim = pde.dim

    if pde.name == LAPLACE_2D:
        return KernelValue(-np.log(r) / (2.0 * np.pi))
    if pde.name == HELMHOLTZ_2D:
        return KernelValue(0.25j * hankel_h0(pde.k * r))
    if pde.name == LAPLACE_3D:
        return KernelValue(1.0 / ((dim - 2) * unit_sphere_measure(dim) * r ** (dim - 2)))
    if pde.name == HELMHOLTZ_3D:
        return KernelValue(np.exp(1j * pde.k * r) / ((dim - 2) * unit_sphere_measure(dim) * r ** (dim - 2)))

    eye = np.eye(dim)
    outer = diff[..., :, None] * diff[..., None, :]

    if pde.name in (NAVIER_2D, NAVIER_3D):
        lam, mu = pde.lam, pde.mu
        ratio = (lam + mu) / (lam + 3.0 * mu)
        if dim == 2:
            scale = (lam + 3.0 * mu) / (4.0 * np.pi * mu * (lam + 2.0 * mu))
            value = scale * (-np.log(r)[..., None, None] * eye + ratio * outer / (r * r)[..., None, None])
        else:
            scale = (lam + 3.0 * mu) / (8.0 * np.pi * mu * (lam + 2.0 * mu))
            value = scale * (eye / r[..., None, None] + ratio * outer / (r ** 3)[..., None, None])
        return KernelValue(value)

    # Stokes: 行 k が v^k の成分
    mu = pde.mu
    if dim == 2:
        value = (-np.log(r)[..., None, None] * eye + outer / (r * r)[..., None, None]) / (4.0 * np.pi * mu)
        pressure = diff / (2.0 * np.pi * (r * r)[..., None])
    else:
        value = (eye / r[..., None, None] + outer / (r ** 3)[..., None, None]) / (8.0 * np.pi * mu)
        pressure = diff / (4.0 * np.pi * (r ** 3)[..., None])
    return KernelValue(value, pressure=pressure)


def greens_dn(pde: PdeKind, x, y, n_y) -> np.ndarray:
    """法線微分 ∂G/∂n_y(x, y) を評価する。

    Laplace: −(1/2π) n_y·(y−x)/|x−y|²
    Helmholtz: −(ik/4) H1(k|x−y|) n_y·(y−x)/|x−y|

    Raises:
        KernelDomainError: 2 次元 Laplace / Helmholtz 以外、または x = y
    """
    if not pde.supports_layer_operators:
        raise KernelDomainError(f"normal derivative kernel is not available for {pde.name}")
    diff, r = _differences(pde, x, y)
    _check_separated(pde, r)
    n_dot = -np.sum(np.asarray(n_y, dtype=float) * diff, axis=-1)  # n_y·(y − x)
    if pde.name == LAPLACE_2D:
        return -n_dot / (2.0 * np.pi * r * r)
    return -0.25j * pde.k * hankel_h1(pde.k * r) * n_dot / r
