import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from core.special import hankel_h0
from core.utils import BinetError, ConfigError

"""
参照解モジュール。
- `exact_solution` : 実験で使う厳密解
- `fd_reference_laplace` : 正方形 [−1,1]² 上の Laplace 方程式の 5 点差分解
"""

logger = logging.getLogger(__name__)

SOLUTION_NAMES = ("exp_sin", "plane_wave", "hankel", "dipole", "triangle_bc", "zero")

_SINGULAR_TOLERANCE = 1e-12


def _points(points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != 2:
        raise ValueError(f"expected 2D points, got shape {pts.shape}")
    return pts


def exact_solution(name: str, params: Optional[Mapping[str, float]], points) -> np.ndarray:
    """閉じた形の厳密解を評価する。

    - exp_sin: e^{ax} sin(ay)（a）
    - plane_wave: e^{i(k cos φ x + k sin φ y)}（k, angle。angle の既定は π/7）
    - hankel: H0(k |x − c|)（k, cx, cy）
    - dipole: x / (x² + y²)
    - triangle_bc: (x−xc)(y−yc) + (x−xc) + (y−yc) + 1（xc, yc は三角形の重心）
    - zero: 0

    Raises:
        ValueError: 特異点（原点・波源）での評価
        ConfigError: 未知の名前
    """
    params = dict(params or {})
    pts = _points(points)
    x, y = pts[:, 0], pts[:, 1]

    if name == "exp_sin":
        a = float(params.get("a", 4.0))
        return np.exp(a * x) * np.sin(a * y)
    if name == "plane_wave":
        k = float(params["k"])
        angle = float(params.get("angle", np.pi / 7.0))
        return np.exp(1j * k * (np.cos(angle) * x + np.sin(angle) * y))
    if name == "hankel":
        k = float(params["k"])
        r = np.hypot(x - float(params.get("cx", 0.0)), y - float(params.get("cy", 0.0)))
        if np.any(r <= _SINGULAR_TOLERANCE):
            raise ValueError("hankel solution evaluated at its source point")
        return hankel_h0(k * r)
    if name == "dipole":
        r2 = x * x + y * y
        if np.any(r2 <= _SINGULAR_TOLERANCE ** 2):
            raise ValueError("dipole solution evaluated at the origin")
        return x / r2
    if name == "triangle_bc":
        dx = x - float(params["xc"])
        dy = y - float(params["yc"])
        return dx * dy + dx + dy + 1.0
    if name == "zero":
        return np.zeros(len(pts))
    raise ConfigError(f"unknown exact solution '{name}'")


def nonsmooth_boundary(points) -> np.ndarray:
    """角を持つ境界条件 2 − |x| − |y|"""
    pts = _points(points)
    return 2.0 - np.abs(pts[:, 0]) - np.abs(pts[:, 1])


BOUNDARY_FUNCTIONS = {"nonsmooth": nonsmooth_boundary}


@dataclass(frozen=True, eq=False)
class FdSolution:
    """差分解。格子点 nodes × nodes 上の値と線形補間。"""
    nodes: np.ndarray
    values: np.ndarray

    def interpolate(self, points) -> np.ndarray:
        pts = _points(points)
        interp = RegularGridInterpolator((self.nodes, self.nodes), self.values, method="linear")
        return interp(pts)


def fd_reference_laplace(boundary_fn: Callable[[np.ndarray], np.ndarray], grid_n: int) -> FdSolution:
    """正方形 [−1,1]² 上の Dirichlet 問題を 5 点差分で直接解く。

    Args:
        boundary_fn: 境界値 g（(m,2) の点に対する値）
        grid_n: 各辺の分割数（格子点は grid_n + 1 個）

    Raises:
        ConfigError: grid_n < 64
        BinetError: 線形ソルバーの結果が非有限、または残差が大きい
    """
    if grid_n < 64:
        raise ConfigError(f"finite-difference grid needs at least 64 cells per side, got {grid_n}")
    nodes = np.linspace(-1.0, 1.0, grid_n + 1)
    X, Y = np.meshgrid(nodes, nodes, indexing="ij")
    values = np.zeros_like(X)
    edge = np.zeros_like(X, dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    values[edge] = np.real(boundary_fn(np.stack([X[edge], Y[edge]], axis=-1)))

    m = grid_n - 1
    h2 = (2.0 / grid_n) ** 2
    second = sparse.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1])
    eye = sparse.identity(m)
    laplacian = (sparse.kron(second, eye) + sparse.kron(eye, second)).tocsc() / h2

    # 境界値を右辺に移す
    rhs = np.zeros((m, m))
    rhs[0, :] -= values[0, 1:-1]
    rhs[-1, :] -= values[-1, 1:-1]
    rhs[:, 0] -= values[1:-1, 0]
    rhs[:, -1] -= values[1:-1, -1]
    rhs /= h2

    interior = spsolve(laplacian, rhs.ravel())
    residual = np.linalg.norm(laplacian @ interior - rhs.ravel()) / max(np.linalg.norm(rhs), 1.0)
    if not np.all(np.isfinite(interior)) or residual > 1e-8:
        raise BinetError(f"finite-difference solve failed (relative residual {residual:.3e})")
    values[1:-1, 1:-1] = interior.reshape(m, m)
    logger.info("finite-difference reference solved on a %d x %d grid", grid_n + 1, grid_n + 1)
    return FdSolution(nodes=nodes, values=values)
