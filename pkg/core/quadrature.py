import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.special import xlogy

from .geometry import QuadratureGrid
from .kernels import HELMHOLTZ_2D, LAPLACE_2D, PdeKind, greens, greens_dn
from .special import hankel_h0_remainder_limit
from .utils import AppConstants, QuadratureError

"""
求積モジュール。
層ポテンシャル
    S[h](x) = −∫ G(x,y) h(y) ds_y,    D[h](x) = −∫ ∂G/∂n_y(x,y) h(y) ds_y
を離散化した密行列 `OperatorMatrix` を組み立てる。

- 滑らかな曲線: 周期台形則。対数特異性は Kapur–Rokhlin 補正、
  Laplace の二重層の対角は曲率による極限値 κ w/(4π)。
- 多角形: 中点則の小区間。Laplace は小区間ごとの厳密積分、二重層の同一辺成分は 0。

行列ベクトル積は格納された行優先レイアウトの numpy matmul で行い、和の順序は固定。
"""

logger = logging.getLogger(__name__)

SLP = "slp"
DLP = "dlp"
INTERIOR = "interior"
EXTERIOR = "exterior"
OFF_BOUNDARY = "off_boundary"

POTENTIALS = (SLP, DLP)
SIDES = (INTERIOR, EXTERIOR)

# 周期台形則の対数特異性補正係数 γ_1..γ_m（次数 2, 6, 10）
KR_COEFFICIENTS = {
    2: (1.825748064736159, -1.325748064736159),
    6: (4.967362978287758, -16.20501504859126, 25.85153761832639,
        -22.22599466791883, 9.930104998037539, -1.817995878141594),
    10: (7.832432020568779, -45.65161670374749, 145.2168846354677,
         -290.1348302886379, 387.0862162579900, -352.3821383570681,
         217.2421547519342, -87.07796087382991, 20.53584266072635,
         -2.166984103403823),
}


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """離散層ポテンシャル作用素。行が評価点、列が節点。

    複素数の作用素は (Re h, Im h) を縦に並べたベクトルに作用する
    2×2 実ブロック [[Re, −Im], [Im, Re]] として使う。
    """
    entries: np.ndarray
    potential: str
    trace_side: str
    jump_included: bool
    near_flags: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.entries.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.entries)

    @property
    def channels(self) -> int:
        return 2 if self.is_complex else 1

    @cached_property
    def block(self) -> np.ndarray:
        if not self.is_complex:
            return self.entries
        re, im = self.entries.real, self.entries.imag
        return np.block([[re, -im], [im, re]])

    def apply(self, h: np.ndarray) -> np.ndarray:
        """チャネル形式の密度 h（(n, c) 形状）に作用させ、(m, c) 形状で返す。"""
        h = np.asarray(h, dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        if h.shape != (self.shape[1], self.channels):
            raise ValueError(f"density shape {h.shape} does not match operator "
                             f"({self.shape[1]} nodes, {self.channels} channels)")
        out = self.block @ h.T.reshape(-1)
        return out.reshape(self.channels, self.shape[0]).T

    def apply_transpose(self, r: np.ndarray) -> np.ndarray:
        """ブロック行列の転置を (m, c) 形状の残差に作用させる。"""
        r = np.asarray(r, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        out = self.block.T @ r.T.reshape(-1)
        return out.reshape(self.channels, self.shape[1]).T

    def apply_complex(self, h: np.ndarray) -> np.ndarray:
        return self.entries @ h


def kapur_rokhlin_weights(n: int, order: int = AppConstants.DEFAULT_KR_ORDER) -> np.ndarray:
    """補正付き周期台形則の重み倍率を返す。

    要素 j はずれ j (mod n) の節点に掛ける倍率で、特異点自身 (j = 0) は 0。
    ∫ f ≈ h Σ_j w[j] f(t_j)。

    Raises:
        QuadratureError: 未対応の次数、または n ≤ 2·order
    """
    if order not in KR_COEFFICIENTS:
        raise QuadratureError(f"unsupported Kapur-Rokhlin order {order} (expected 2, 6 or 10)")
    if n <= 2 * order:
        raise QuadratureError(f"Kapur-Rokhlin order {order} needs more than {2 * order} nodes, got {n}")
    w = np.ones(n)
    w[0] = 0.0
    for offset, gamma in enumerate(KR_COEFFICIENTS[order], start=1):
        w[offset] += gamma
        w[-offset] += gamma
    return w


def _circulant(stencil: np.ndarray) -> np.ndarray:
    n = len(stencil)
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    return stencil[idx]


def segment_log_integral(p0, p1, x):
    """線分 p0–p1 上の ∫ ln|x − y| ds_y を閉じた原始関数で厳密に計算する。

    放送可能な (..., 2) 配列を受け付ける。x は線分上にあってもよい。

    Raises:
        QuadratureError: 長さゼロの線分
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    x = np.asarray(x, dtype=float)
    d = p1 - p0
    length = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(length <= 0.0):
        raise QuadratureError("segment_log_integral: degenerate segment")
    u = d / length[..., None]
    rel = p0 - x
    s0 = np.sum(rel * u, axis=-1)
    s1 = s0 + length
    dist = np.abs(u[..., 0] * rel[..., 1] - u[..., 1] * rel[..., 0])

    def antiderivative(s):
        return 0.5 * xlogy(s, s * s + dist * dist) - s + dist * np.arctan2(s, dist)

    return antiderivative(s1) - antiderivative(s0)


def _subtended_angle(p0: np.ndarray, p1: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x から見た線分 p0→p1 の符号付き見込み角"""
    a = p0 - x
    b = p1 - x
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def _check_pde(pde: PdeKind) -> None:
    if not pde.supports_layer_operators:
        raise QuadratureError(f"layer operators are only assembled for {LAPLACE_2D} and {HELMHOLTZ_2D}, "
                              f"got {pde.name}")


def _check_grid(grid: QuadratureGrid) -> None:
    if grid.is_smooth and (grid.curvature is None or grid.params is None):
        raise QuadratureError("smooth-curve quadrature requires curvature and parameter nodes")
    if not grid.is_smooth and grid.panel_ends is None:
        raise QuadratureError("polygon quadrature requires panel end points")


def _pair_arrays(targets: np.ndarray, grid: QuadratureGrid):
    m, n = len(targets), grid.n
    x = np.broadcast_to(targets[:, None, :], (m, n, 2))
    y = np.broadcast_to(grid.points[None, :, :], (m, n, 2))
    ny = np.broadcast_to(grid.normals[None, :, :], (m, n, 2))
    return x, y, ny


def _layer_kernel(pde: PdeKind, potential: str, x, y, ny, mask=None) -> np.ndarray:
    """層ポテンシャルの核 −G または −∂G/∂n_y を mask の位置で評価する（他は 0）。"""
    dtype = complex if pde.is_complex else float
    out = np.zeros(x.shape[:2], dtype=dtype)
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    if potential == SLP:
        out[mask] = -greens(pde, x[mask], y[mask]).value
    else:
        out[mask] = -greens_dn(pde, x[mask], y[mask], ny[mask])
    return out


def _smooth_boundary(pde: PdeKind, grid: QuadratureGrid, potential: str, kr_order: int) -> np.ndarray:
    n = grid.n
    x, y, ny = _pair_arrays(grid.points, grid)
    off = ~np.eye(n, dtype=bool)
    correction = _circulant(kapur_rokhlin_weights(n, kr_order))
    w = grid.weights[None, :]

    if potential == SLP:
        kern = _layer_kernel(pde, SLP, x, y, ny, off)
        return kern * w * correction

    laplace = _layer_kernel(PdeKind.laplace(), DLP, x, y, ny, off)
    laplace[np.diag_indices(n)] = grid.curvature / (4.0 * np.pi)
    entries = laplace * w
    if pde.name == HELMHOLTZ_2D:
        # Helmholtz と Laplace の差は対数特異で対角 0
        difference = _layer_kernel(pde, DLP, x, y, ny, off) - laplace * off
        entries = entries + difference * w * correction
    return entries


def _polygon_block(pde: PdeKind, grid: QuadratureGrid, potential: str, targets: np.ndarray,
                   same_edge: Optional[np.ndarray]) -> np.ndarray:
    """多角形の作用素ブロック。same_edge は境界上の評価で同一辺の組を示す。"""
    p0 = grid.panel_ends[None, :, 0, :]
    p1 = grid.panel_ends[None, :, 1, :]
    xt = targets[:, None, :]
    w = grid.weights[None, :]
    x, y, ny = _pair_arrays(targets, grid)

    if potential == SLP:
        exact_log = segment_log_integral(p0, p1, xt) / (2.0 * np.pi)
        if pde.name == LAPLACE_2D:
            return exact_log
        # −(i/4)H0(kr) = (1/2π) ln r + 連続な剰余
        r = np.linalg.norm(x - y, axis=-1)
        coincide = r == 0.0
        kern = _layer_kernel(pde, SLP, x, y, ny, ~coincide)
        remainder = kern - np.log(np.where(coincide, 1.0, r)) / (2.0 * np.pi)
        remainder[coincide] = hankel_h0_remainder_limit(pde.k)
        return exact_log + remainder * w

    if pde.name == LAPLACE_2D:
        entries = _subtended_angle(p0, p1, xt) / (2.0 * np.pi)
    else:
        mask = None if same_edge is None else ~same_edge
        entries = _layer_kernel(pde, DLP, x, y, ny, mask) * w
    if same_edge is not None:
        entries[same_edge] = 0.0
    return entries


def assemble_boundary_operator(pde: PdeKind, grid: QuadratureGrid, potential: str, side: str,
                               kr_order: int = AppConstants.DEFAULT_KR_ORDER) -> OperatorMatrix:
    """節点上（Nyström 選点）の境界作用素を組み立てる。二重層には ±I/2 を加える。

    Args:
        pde: 2 次元 Laplace または Helmholtz
        grid: 境界の離散化
        potential: "slp" または "dlp"
        side: "interior"（+I/2）または "exterior"（−I/2）
        kr_order: 滑らかな曲線の対数特異性補正の次数

    Returns:
        ジャンプ項込みの作用素行列

    Raises:
        QuadratureError: 未対応の方程式・ポテンシャル・側、または格子の種類と経路の不一致
    """
    _check_pde(pde)
    _check_grid(grid)
    if potential not in POTENTIALS:
        raise QuadratureError(f"unknown potential '{potential}'")
    if side not in SIDES:
        raise QuadratureError(f"unknown side '{side}'")

    if grid.is_smooth:
        entries = _smooth_boundary(pde, grid, potential, kr_order)
    else:
        same_edge = grid.panel_id[:, None] == grid.panel_id[None, :]
        entries = _polygon_block(pde, grid, potential, grid.points, same_edge)
    if potential == DLP:
        sign = 0.5 if side == INTERIOR else -0.5
        entries = entries + sign * np.eye(grid.n)
    logger.debug("assembled %s %s operator (%s side) on %d nodes", pde.name, potential, side, grid.n)
    return OperatorMatrix(entries=entries, potential=potential, trace_side=side, jump_included=True)


def assemble_eval_operator(pde: PdeKind, grid: QuadratureGrid, targets, potential: str) -> OperatorMatrix:
    """境界外の評価点での作用素を平滑な求積で組み立てる（補正・ジャンプ項なし）。

    境界から δ_near = 3 × 最大節点間隔 以内の評価点は `near_flags` で印を付ける。

    Raises:
        QuadratureError: 評価点が境界上にある、または未対応の方程式・ポテンシャル
    """
    _check_pde(pde)
    _check_grid(grid)
    if potential not in POTENTIALS:
        raise QuadratureError(f"unknown potential '{potential}'")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    dist = grid.boundary_distance(targets)
    if np.any(dist <= AppConstants.ON_BOUNDARY_TOLERANCE):
        raise QuadratureError("evaluation target lies on the boundary; use the boundary operator")
    near = dist < AppConstants.NEAR_BAND_FACTOR * grid.max_spacing
    if np.any(near):
        logger.warning("%d of %d evaluation targets lie inside the near-boundary band", int(near.sum()), len(targets))

    if grid.is_smooth:
        x, y, ny = _pair_arrays(targets, grid)
        entries = _layer_kernel(pde, potential, x, y, ny) * grid.weights[None, :]
    else:
        entries = _polygon_block(pde, grid, potential, targets, None)
    return OperatorMatrix(entries=entries, potential=potential, trace_side=OFF_BOUNDARY,
                          jump_included=False, near_flags=near)
