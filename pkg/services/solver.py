import logging
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from core.geometry import BoundaryGeometry, QuadratureGrid
from core.kernels import PdeKind
from core.network import AdamState, DensityNetwork, adam_step
from core.quadrature import (INTERIOR, OperatorMatrix, assemble_boundary_operator,
                             assemble_eval_operator)
from core.utils import AppConstants, ConfigError, DivergenceError, GeometryError, LRUCache

"""
BINet ソルバー。
境界上の密度をネットワークで表し、層ポテンシャル作用素 A を通した値が境界条件 g に
一致するよう学習する。損失は L(θ) = (1/n) Σ_i |(A h(θ))_i − g_i|²。
"""

logger = logging.getLogger(__name__)

BoundaryFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TrainingProblem:
    """境界値問題1つ分: 方程式・形状・作用素・境界値。

    parametric_inputs は各節点の座標の後ろに付け足すネットワーク入力
    （波数 k や三角形パラメータ a, b, c）。
    """
    pde: PdeKind
    geometry: BoundaryGeometry
    grid: QuadratureGrid
    potential: str
    side: str
    boundary_values: np.ndarray
    operator: OperatorMatrix
    parametric_inputs: Tuple[float, ...] = ()
    label: str = ""

    def __post_init__(self):
        if self.operator.trace_side != self.side or not self.operator.jump_included:
            raise ConfigError(f"{self.label}: operator side '{self.operator.trace_side}' "
                              f"does not match problem side '{self.side}'")
        if self.operator.shape[0] != len(self.boundary_values) or self.operator.shape[0] != self.grid.n:
            raise ConfigError(f"{self.label}: boundary data has {len(self.boundary_values)} values "
                              f"for an operator with {self.operator.shape[0]} rows")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def channels(self) -> int:
        return self.operator.channels

    @cached_property
    def inputs(self) -> np.ndarray:
        extra = np.tile(np.asarray(self.parametric_inputs, dtype=float), (self.n, 1))
        return np.hstack([self.grid.points, extra])

    @cached_property
    def target(self) -> np.ndarray:
        g = np.asarray(self.boundary_values)
        if self.channels == 1:
            return np.real(g).astype(float)[:, None]
        return np.stack([g.real, g.imag], axis=-1).astype(float)


def build_problem(pde: PdeKind, geometry: BoundaryGeometry, grid: QuadratureGrid, potential: str,
                  side: str, boundary_fn: BoundaryFn, kr_order: int = AppConstants.DEFAULT_KR_ORDER,
                  parametric_inputs: Sequence[float] = (), cache: Optional[LRUCache] = None,
                  label: str = "") -> TrainingProblem:
    """境界値問題を組み立てる。cache を渡すと作用素を (方程式, 格子) ごとに再利用する。"""

    def assemble():
        return assemble_boundary_operator(pde, grid, potential, side, kr_order)

    if cache is not None:
        key = (pde.name, pde.k, potential, side, kr_order, grid.grid_hash)
        operator = cache.get_or_create(key, assemble)
    else:
        operator = assemble()
    values = np.asarray(boundary_fn(grid.points))
    if pde.is_complex:
        values = values.astype(complex)
    elif np.iscomplexobj(values):
        raise ConfigError(f"{label}: real PDE {pde.name} received complex boundary data")
    return TrainingProblem(pde=pde, geometry=geometry, grid=grid, potential=potential, side=side,
                           boundary_values=values, operator=operator,
                           parametric_inputs=tuple(float(v) for v in parametric_inputs), label=label)


def _density(problem: TrainingProblem, net: DensityNetwork) -> np.ndarray:
    if net.spec.out_dim != problem.channels:
        raise ConfigError(f"{problem.label}: network has {net.spec.out_dim} outputs but the "
                          f"problem needs {problem.channels} channels")
    h = net.forward(problem.inputs)
    if not np.all(np.isfinite(h)):
        bad = int(np.sum(~np.isfinite(h)))
        raise DivergenceError(f"{problem.label}: network produced {bad} non-finite density values "
                              f"(max |param| = {max(float(np.max(np.abs(p))) for p in net.params.values()):.3g})")
    return h


def boundary_residual(problem: TrainingProblem, net: DensityNetwork) -> np.ndarray:
    """節点ごとの残差 A h(θ) − g（(n, c) 形状）"""
    return problem.operator.apply(_density(problem, net)) - problem.target


def boundary_loss(problem: TrainingProblem, net: DensityNetwork) -> float:
    """L(θ) = (1/n) Σ_i |(A h)_i − g_i|²（節点数で割る単純平均）

    Raises:
        DivergenceError: ネットワーク出力が非有限
    """
    r = boundary_residual(problem, net)
    return float(np.sum(r * r) / problem.n)


def loss_and_gradient(problem: TrainingProblem, net: DensityNetwork,
                      rows: Optional[np.ndarray] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """損失と勾配。上流勾配 (2/n) Aᵀ(A h − g) をネットワークに逆伝播する。

    rows を渡すとその選点だけの部分損失（ミニバッチ）になる。
    """
    h = _density(problem, net)
    r = problem.operator.apply(h) - problem.target
    count = problem.n
    if rows is not None:
        mask = np.zeros((problem.n, 1))
        mask[rows] = 1.0
        r = r * mask
        count = len(rows)
    loss = float(np.sum(r * r) / count)
    upstream = (2.0 / count) * problem.operator.apply_transpose(r)
    return loss, net.backward(problem.inputs, upstream)


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 5000
    lr: float = AppConstants.DEFAULT_LR
    seed: int = 0
    log_every: int = AppConstants.DEFAULT_LOG_EVERY
    minibatch: Optional[int] = None
    divergence_threshold: float = AppConstants.DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.minibatch is not None and self.minibatch < 1:
            raise ConfigError(f"minibatch must be positive, got {self.minibatch}")


@dataclass
class TrainReport:
    loss_history: List[float]
    final_loss: float
    final_residual: float
    wall_time: float
    epochs: int
    seed: int
    diverged: bool = False
    message: str = ""
    config: dict = field(default_factory=dict)


class Family(Protocol):
    """学習1エポックで使う問題の集合を返すもの"""

    def members(self, epoch: int, rng: np.random.Generator) -> List[TrainingProblem]:
        ...


class StaticFamily:
    """固定の問題リスト。要素1つなら単一問題の学習と同じになる。"""

    def __init__(self, problems: Sequence[TrainingProblem]):
        if not problems:
            raise ConfigError("a problem family needs at least one member")
        self.problems = list(problems)

    def members(self, epoch: int, rng: np.random.Generator) -> List[TrainingProblem]:
        return self.problems


def train_operator(family: Family, net: DensityNetwork, opts: TrainOptions,
                   progress: Optional[Callable[[int, int, float], None]] = None) -> Tuple[TrainReport, DensityNetwork]:
    """問題族の平均損失を Adam で最小化する（全バッチ、シード決定的）。

    発散（損失が非有限または閾値超え）したら学習を止め、diverged=True の報告を返す。
    """
    rng = np.random.default_rng(opts.seed)
    state = AdamState(lr=opts.lr)
    history: List[float] = []
    diverged = False
    message = ""
    start = time.perf_counter()

    for epoch in range(opts.epochs):
        problems = family.members(epoch, rng)
        if not problems:
            raise ConfigError("problem family returned an empty sample set")
        total = 0.0
        summed: Optional[Dict[str, np.ndarray]] = None
        try:
            for problem in problems:
                rows = None
                if opts.minibatch is not None and opts.minibatch < problem.n:
                    rows = np.sort(rng.choice(problem.n, size=opts.minibatch, replace=False))
                loss, grads = loss_and_gradient(problem, net, rows)
                total += loss
                if summed is None:
                    summed = grads
                else:
                    for k in summed:
                        summed[k] += grads[k]
        except DivergenceError as e:
            diverged, message = True, str(e)
            logger.warning("training diverged at epoch %d: %s", epoch + 1, e)
            break
        loss = total / len(problems)
        if not np.isfinite(loss) or loss > opts.divergence_threshold:
            diverged = True
            message = f"loss {loss:.3e} exceeded divergence threshold at epoch {epoch + 1}"
            logger.warning(message)
            break
        history.append(loss)
        if opts.log_every and (epoch + 1) % opts.log_every == 0:
            logger.info("epoch %d/%d loss %.6e", epoch + 1, opts.epochs, loss)
            if progress is not None:
                progress(epoch + 1, opts.epochs, loss)
        scale = 1.0 / len(problems)
        adam_step(state, net.params, {k: v * scale for k, v in summed.items()})

    final_loss = history[-1] if history else float("nan")
    report = TrainReport(loss_history=history, final_loss=final_loss,
                         final_residual=float(np.sqrt(final_loss)) if history else float("nan"),
                         wall_time=time.perf_counter() - start, epochs=len(history), seed=opts.seed,
                         diverged=diverged, message=message, config=asdict(opts))
    return report, net


def train(problem: TrainingProblem, net: DensityNetwork, opts: TrainOptions,
          progress: Optional[Callable[[int, int, float], None]] = None) -> Tuple[TrainReport, DensityNetwork]:
    """単一の境界値問題を学習する。"""
    return train_operator(StaticFamily([problem]), net, opts, progress)


@dataclass(frozen=True, eq=False)
class FieldResult:
    values: np.ndarray
    near_flags: np.ndarray


def density_values(problem: TrainingProblem, net: DensityNetwork) -> np.ndarray:
    """節点上の密度（複素問題では Re + i Im）"""
    h = _density(problem, net)
    if problem.channels == 1:
        return h[:, 0]
    return h[:, 0] + 1j * h[:, 1]


def solve_field(problem: TrainingProblem, net: DensityNetwork, targets) -> FieldResult:
    """学習した密度から領域内（外部問題では外側）の解を評価する。

    Raises:
        GeometryError: 問題の側と反対側の評価点
        QuadratureError: 境界上の評価点
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    inside = problem.geometry.contains(targets)
    wrong = ~inside if problem.side == INTERIOR else inside
    if np.any(wrong):
        raise GeometryError(f"{problem.label}: {int(wrong.sum())} evaluation targets lie on the wrong side "
                            f"of the boundary for a {problem.side} problem")
    evaluator = assemble_eval_operator(problem.pde, problem.grid, targets, problem.potential)
    values = evaluator.apply_complex(density_values(problem, net))
    return FieldResult(values=values, near_flags=evaluator.near_flags)


def relative_l2(u, u_ref) -> float:
    """‖u − u_ref‖₂ / ‖u_ref‖₂（評価点で重み付けしない）

    Raises:
        ValueError: 長さの不一致、または参照解のノルムが 0
    """
    u = np.asarray(u)
    u_ref = np.asarray(u_ref)
    if u.shape != u_ref.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {u_ref.shape}")
    ref_norm = float(np.linalg.norm(u_ref))
    if ref_norm == 0.0:
        raise ValueError("reference solution has zero norm")
    return float(np.linalg.norm(u - u_ref) / ref_norm)
