import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.geometry import BoundaryGeometry, CurveSpec, barycenter, discretize, make_curve
from core.kernels import PdeKind
from core.quadrature import DLP, EXTERIOR, INTERIOR, SLP
from core.utils import AppConstants, ConfigError, LRUCache
from services.oracles import exact_solution
from services.solver import TrainingProblem, build_problem

"""
パラメータ付き問題族。ネットワーク入力に族のパラメータを付け足して解作用素を学習する。
- `WavenumberFamily` : 波数 k を動かす Helmholtz 問題
- `TriangleFamily` : 三角形の形状 (a, b, c) を動かす Laplace 問題
"""

logger = logging.getLogger(__name__)


def _wavenumber_pool(k_ranges: Sequence[Tuple[float, float]], pool_size: int) -> np.ndarray:
    """学習区間の和集合上の格子点。区間長に比例して点を配分する。"""
    lengths = np.array([hi - lo for lo, hi in k_ranges], dtype=float)
    total = float(lengths.sum())
    pool = []
    for (lo, hi), length in zip(k_ranges, lengths):
        count = max(2, int(round(pool_size * length / total))) if total > 0 else 1
        pool.append(np.linspace(lo, hi, count))
    return np.unique(np.concatenate(pool))


class WavenumberFamily:
    """波数 k ∈ ∪[lo, hi] の Helmholtz 問題族（境界は固定）。

    各エポックで固定の格子点プールから samples_per_epoch 個の k を引く。
    作用素は (k, 格子) をキーにキャッシュする。
    """

    def __init__(self, geometry: BoundaryGeometry, nodes: int, k_ranges: Sequence[Tuple[float, float]],
                 solution: Callable[[float, np.ndarray], np.ndarray], potential: str = DLP,
                 side: str = EXTERIOR, samples_per_epoch: int = AppConstants.DEFAULT_SAMPLES_PER_EPOCH,
                 pool_size: int = AppConstants.DEFAULT_K_POOL_SIZE,
                 kr_order: int = AppConstants.DEFAULT_KR_ORDER, cache: Optional[LRUCache] = None):
        if not k_ranges:
            raise ConfigError("wavenumber family needs at least one k range")
        for lo, hi in k_ranges:
            if not 0.0 < lo <= hi:
                raise ConfigError(f"invalid wavenumber range [{lo}, {hi}]")
        if samples_per_epoch < 1 or pool_size < 1:
            raise ConfigError("wavenumber family needs a positive sample count and pool size")
        self.geometry = geometry
        self.grid = discretize(geometry, nodes)
        self.k_ranges = [(float(lo), float(hi)) for lo, hi in k_ranges]
        self.solution = solution
        self.potential = potential
        self.side = side
        self.samples_per_epoch = samples_per_epoch
        self.kr_order = kr_order
        self.cache = cache if cache is not None else LRUCache()
        self.pool = _wavenumber_pool(self.k_ranges, pool_size)

    def in_training_range(self, k: float) -> bool:
        return any(lo <= k <= hi for lo, hi in self.k_ranges)

    def problem(self, k: float) -> TrainingProblem:
        return build_problem(PdeKind.helmholtz(k), self.geometry, self.grid, self.potential, self.side,
                             lambda pts: self.solution(k, pts), kr_order=self.kr_order,
                             parametric_inputs=(k,), cache=self.cache, label=f"k={k:g}")

    def members(self, epoch: int, rng: np.random.Generator) -> List[TrainingProblem]:
        size = min(self.samples_per_epoch, len(self.pool))
        ks = rng.choice(self.pool, size=size, replace=False)
        return [self.problem(float(k)) for k in ks]


def hankel_solution(k: float, points: np.ndarray) -> np.ndarray:
    return exact_solution("hankel", {"k": k}, points)


class TriangleFamily:
    """頂点 (0,0), (a,0), (b,c) の三角形上の内部 Laplace 問題族（単層ポテンシャル）。

    境界条件は重心 (xc, yc) を使った g = (x−xc)(y−yc) + (x−xc) + (y−yc) + 1。
    members 個の三角形を resample_every エポックごとに引き直す。
    """

    def __init__(self, members: int = AppConstants.DEFAULT_TRIANGLE_MEMBERS,
                 resample_every: int = AppConstants.DEFAULT_RESAMPLE_EVERY, nodes: int = 96,
                 low: float = 0.05, potential: str = SLP, cache: Optional[LRUCache] = None):
        if members < 1:
            raise ConfigError("triangle family needs at least one member")
        if resample_every < 1:
            raise ConfigError("resample period must be positive")
        if not 0.0 < low < 1.0:
            raise ConfigError(f"triangle parameter lower bound must lie in (0, 1), got {low}")
        if nodes % 3 != 0:
            raise ConfigError(f"triangle node count must be divisible by 3, got {nodes}")
        self.count = members
        self.resample_every = resample_every
        self.nodes = nodes
        self.low = low
        self.potential = potential
        self.cache = cache if cache is not None else LRUCache()
        self._current: List[TrainingProblem] = []

    def sample_parameters(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.low, 1.0, size=(count, 3))

    def problem(self, a: float, b: float, c: float) -> TrainingProblem:
        geometry = make_curve(CurveSpec(kind="triangle", a=a, b=b, c=c))
        grid = discretize(geometry, self.nodes)
        xc, yc = barycenter(geometry)
        params = {"xc": float(xc), "yc": float(yc)}
        return build_problem(PdeKind.laplace(), geometry, grid, self.potential, INTERIOR,
                             lambda pts: exact_solution("triangle_bc", params, pts),
                             parametric_inputs=(a, b, c), cache=self.cache, label=geometry.name)

    def members(self, epoch: int, rng: np.random.Generator) -> List[TrainingProblem]:
        if not self._current or epoch % self.resample_every == 0:
            draws = self.sample_parameters(rng, self.count)
            self._current = [self.problem(*map(float, row)) for row in draws]
            logger.info("epoch %d: resampled %d triangles", epoch, len(self._current))
        return self._current
