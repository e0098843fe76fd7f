import logging
import os
import queue
import time
from dataclasses import asdict, dataclass, field, fields, replace
from operator import eq, ge, gt, le, lt
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.geometry import BoundaryGeometry, CurveSpec, barycenter, discretize, make_curve
from core.kernels import HELMHOLTZ_2D, LAPLACE_2D, PdeKind
from core.network import DensityNetwork, NetworkSpec, init_network
from core.quadrature import (DLP, EXTERIOR, INTERIOR, POTENTIALS, SIDES, SLP,
                             assemble_boundary_operator, assemble_eval_operator)
from core.storage import ConfigManager, ResultBundle, TrialRecord, load_json_document
from core.utils import AppConstants, ConfigError, GeometryError, LRUCache
from services import ntk as ntk_studies
from services.families import TriangleFamily, WavenumberFamily, hankel_solution
from services.oracles import BOUNDARY_FUNCTIONS, SOLUTION_NAMES, exact_solution, fd_reference_laplace
from services.solver import (TrainingProblem, TrainOptions, boundary_residual, build_problem,
                             relative_l2, solve_field, train, train_operator)
from services.workers import run_trials

"""
実験ハーネス。
JSON の実験設定を検証し、実験を最初から最後まで実行して `ResultBundle` を返す。

タスク:
- solve : 単一の境界値問題（試行を繰り返して相対 L² 誤差の中央値を取る）
- compare-potentials : 同じ問題を単層・二重層の両方で解いて比べる
- operator-wavenumber / operator-triangle : パラメータ付き問題族の解作用素を学習する
- quadrature-sanity : 学習なしで Gauss 恒等式などの求積チェック
- ntk-width / ntk-drift : カーネルの幅依存性と学習中のずれ
"""

logger = logging.getLogger(__name__)

SOLVE = "solve"
COMPARE = "compare-potentials"
OPERATOR_WAVENUMBER = "operator-wavenumber"
OPERATOR_TRIANGLE = "operator-triangle"
QUADRATURE_SANITY = "quadrature-sanity"
NTK_WIDTH = "ntk-width"
NTK_DRIFT = "ntk-drift"

TASKS = (SOLVE, COMPARE, OPERATOR_WAVENUMBER, OPERATOR_TRIANGLE, QUADRATURE_SANITY, NTK_WIDTH, NTK_DRIFT)

TASK_METRICS = {
    SOLVE: ("median_rel_l2", "mean_rel_l2", "max_rel_l2", "diverged_trials", "median_final_loss",
            "corner_residual", "loss_reduction"),
    COMPARE: ("dlp_median_rel_l2", "slp_median_rel_l2", "dlp_loss_at_compare", "slp_loss_at_compare",
              "dlp_slp_loss_ratio", "diverged_trials"),
    OPERATOR_WAVENUMBER: ("max_rel_l2", "held_out_max_rel_l2", "extrapolation_max_rel_l2", "diverged_trials"),
    OPERATOR_TRIANGLE: ("median_rel_l2", "fraction_below_1e-2", "unevaluable_triangles", "diverged_trials"),
    QUADRATURE_SANITY: ("failed_rows", "max_error"),
    NTK_WIDTH: ("width_monotone", "lambda_min_dlp", "lambda_min_slp", "mc_max_z", "mc_fraction_within_3se",
                "depth0_deviation"),
    NTK_DRIFT: ("drift_ratio", "max_drift_smallest", "max_drift_largest", "linearization_gap"),
}

REGIONS = ("lattice", "annulus", "random")
REFERENCES = ("exact", "fd")

_OPS = {"<=": le, "<": lt, ">=": ge, ">": gt, "==": eq}

# 評価点から境界までの最小距離（これより近い点は評価から外す）
_BOUNDARY_CLEARANCE = 1e-9


# --- 設定 ---------------------------------------------------------------------

def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, dict):
        return {k: _thaw(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_thaw(v) for v in value]
    return value


def _section(cls, data, path: str):
    """辞書から設定セクションを作る。未知のキーは dotted path 付きで拒否する。"""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    try:
        return cls(**{k: _freeze(v) for k, v in data.items()})
    except TypeError as e:
        raise ConfigError(f"{path}: {e}")


@dataclass(frozen=True)
class PdeSection:
    name: str = LAPLACE_2D
    k: Optional[float] = None

    def __post_init__(self):
        if self.name not in (LAPLACE_2D, HELMHOLTZ_2D):
            raise ConfigError(f"pde.name: solver supports {LAPLACE_2D} and {HELMHOLTZ_2D}, got '{self.name}'")
        if self.k is not None and not self.k > 0:
            raise ConfigError(f"pde.k: wavenumber must be positive, got {self.k}")

    def kind(self, k: Optional[float] = None) -> PdeKind:
        if self.name == LAPLACE_2D:
            return PdeKind.laplace()
        return PdeKind.helmholtz(k if k is not None else self.k)


@dataclass(frozen=True)
class GeometrySection:
    kind: str = "circle"
    nodes: int = 256
    radius: float = 1.0
    axes: Tuple[float, float] = (1.0, 0.5)
    side: float = 2.0
    a: float = 0.3
    b: float = 0.6
    c: float = 0.4
    vertices: Tuple[Tuple[float, float], ...] = ()
    center: Tuple[float, float] = (0.0, 0.0)

    def curve_spec(self) -> CurveSpec:
        return CurveSpec(kind=self.kind, radius=self.radius, axes=self.axes, side=self.side,
                         a=self.a, b=self.b, c=self.c, vertices=self.vertices, center=self.center)


@dataclass(frozen=True)
class ProblemSection:
    potential: str = DLP
    side: str = INTERIOR
    solution: Optional[str] = None
    solution_params: Dict[str, float] = field(default_factory=dict)
    boundary: Optional[str] = None
    reference: str = "exact"
    fd_grid: int = 256
    kr_order: Optional[int] = None
    corner: Optional[Tuple[float, float]] = None
    corner_radius: float = 0.15

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ConfigError(f"problem.potential: expected one of {POTENTIALS}, got '{self.potential}'")
        if self.side not in SIDES:
            raise ConfigError(f"problem.side: expected one of {SIDES}, got '{self.side}'")
        if self.solution is not None and self.solution not in SOLUTION_NAMES:
            raise ConfigError(f"problem.solution: unknown exact solution '{self.solution}'")
        if self.boundary is not None and self.boundary not in BOUNDARY_FUNCTIONS:
            raise ConfigError(f"problem.boundary: unknown boundary function '{self.boundary}'")
        if self.reference not in REFERENCES:
            raise ConfigError(f"problem.reference: expected one of {REFERENCES}, got '{self.reference}'")
        if self.reference == "fd" and self.boundary is None:
            raise ConfigError("problem.boundary: a finite-difference reference needs a boundary function")
        if self.kr_order is not None and self.kr_order not in (2, 6, 10):
            raise ConfigError(f"problem.kr_order: expected 2, 6 or 10, got {self.kr_order}")
        if self.corner_radius <= 0:
            raise ConfigError("problem.corner_radius: must be positive")


@dataclass(frozen=True)
class NetworkSection:
    arch: str = "resnet"
    width: int = 40
    depth: int = 6
    activation: str = "relu"
    parameterization: str = "standard"
    bias: Optional[bool] = None

    def spec(self, in_dim: int, out_dim: int) -> NetworkSpec:
        try:
            return NetworkSpec(arch=self.arch, in_dim=in_dim, out_dim=out_dim, width=self.width,
                               depth=self.depth, activation=self.activation,
                               parameterization=self.parameterization, bias=self.bias)
        except ValueError as e:
            raise ConfigError(f"network: {e}")


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 5000
    faithful_epochs: Optional[int] = None
    lr: float = AppConstants.DEFAULT_LR
    log_every: int = AppConstants.DEFAULT_LOG_EVERY
    minibatch: Optional[int] = None
    divergence_threshold: float = AppConstants.DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if self.epochs < 1 or (self.faithful_epochs is not None and self.faithful_epochs < 1):
            raise ConfigError("training.epochs: must be at least 1")
        if self.lr < 0:
            raise ConfigError(f"training.lr: must be non-negative, got {self.lr}")

    def options(self, faithful: bool, seed: int) -> TrainOptions:
        epochs = self.faithful_epochs if faithful and self.faithful_epochs else self.epochs
        return TrainOptions(epochs=epochs, lr=self.lr, seed=seed, log_every=self.log_every,
                            minibatch=self.minibatch, divergence_threshold=self.divergence_threshold)


@dataclass(frozen=True)
class EvaluationSection:
    region: str = "lattice"
    resolution: int = 41
    box: Optional[Tuple[float, float, float, float]] = None
    r_in: Optional[float] = None
    r_out: Optional[float] = None
    count: int = 400
    seed: int = 12345

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ConfigError(f"evaluation.region: expected one of {REGIONS}, got '{self.region}'")
        if self.resolution < 2 or self.count < 1:
            raise ConfigError("evaluation.resolution/count: too small")
        if self.region == "annulus" and (self.r_in is None or self.r_out is None or not 0 < self.r_in < self.r_out):
            raise ConfigError("evaluation.r_in/r_out: annulus needs 0 < r_in < r_out")
        if self.box is not None and (len(self.box) != 4 or self.box[0] >= self.box[2] or self.box[1] >= self.box[3]):
            raise ConfigError("evaluation.box: expected [xmin, ymin, xmax, ymax] with xmin < xmax, ymin < ymax")


@dataclass(frozen=True)
class ComparisonSection:
    potentials: Tuple[str, ...] = (DLP, SLP)
    compare_epoch: Optional[int] = None

    def __post_init__(self):
        if set(self.potentials) != {DLP, SLP}:
            raise ConfigError("comparison.potentials: must name both 'dlp' and 'slp'")


@dataclass(frozen=True)
class OperatorSection:
    k_ranges: Tuple[Tuple[float, float], ...] = ((2.0, 3.5), (4.5, 6.0))
    test_values: Tuple[float, ...] = (2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 6.2)
    samples_per_epoch: int = AppConstants.DEFAULT_SAMPLES_PER_EPOCH
    pool_size: int = AppConstants.DEFAULT_K_POOL_SIZE
    members: int = AppConstants.DEFAULT_TRIANGLE_MEMBERS
    resample_every: int = AppConstants.DEFAULT_RESAMPLE_EVERY
    low: float = 0.05
    test_count: int = 100
    test_seed: int = 2024


@dataclass(frozen=True)
class NtkSection:
    widths: Tuple[int, ...] = (64, 256, 1024)
    depth: int = 2
    nodes: int = 16
    trials: int = 5
    definiteness_nodes: int = 64
    mc_points: int = 3
    mc_samples: int = 200000
    checkpoints: Tuple[int, ...] = (0, 10, 100, 1000)
    lr_scale: float = 0.5
    linearization_steps: int = 0

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("ntk.widths: need at least one positive width")
        if self.trials < 1 or self.depth < 0:
            raise ConfigError("ntk.trials/depth: invalid value")


@dataclass(frozen=True)
class AcceptanceRule:
    metric: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ConfigError(f"acceptance.op: expected one of {tuple(_OPS)}, got '{self.op}'")

    def check(self, metrics: Dict[str, Any]) -> Dict[str, Any]:
        actual = metrics.get(self.metric)
        ok = actual is not None and np.isfinite(actual) and bool(_OPS[self.op](actual, self.value))
        return {"metric": self.metric, "op": self.op, "value": self.value, "actual": actual, "passed": ok}


_SECTIONS = {
    "pde": PdeSection, "geometry": GeometrySection, "problem": ProblemSection, "network": NetworkSection,
    "training": TrainingSection, "evaluation": EvaluationSection, "comparison": ComparisonSection,
    "operator": OperatorSection, "ntk": NtkSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """実験設定。`from_dict` は未知のキーを拒否し、`to_dict` と往復して同じ値に戻る。"""
    id: str
    task: str
    description: str = ""
    pde: PdeSection = PdeSection()
    geometry: GeometrySection = GeometrySection()
    problem: ProblemSection = ProblemSection()
    network: NetworkSection = NetworkSection()
    training: TrainingSection = TrainingSection()
    evaluation: EvaluationSection = EvaluationSection()
    comparison: Optional[ComparisonSection] = None
    operator: Optional[OperatorSection] = None
    ntk: Optional[NtkSection] = None
    trials: int = 5
    seed: int = 0
    acceptance: Tuple[AcceptanceRule, ...] = ()
    scaled_acceptance: Tuple[AcceptanceRule, ...] = ()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """
        辞書から設定を作り、検証する。

        Raises:
            ConfigError: 必須キーの欠落、未知のキー、値の範囲外、組み合わせの矛盾
        """
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown key")
        for key in ("id", "task"):
            if key not in data:
                raise ConfigError(f"{key}: missing required key")
        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            if key in _SECTIONS:
                if value is None and key in ("comparison", "operator", "ntk"):
                    kwargs[key] = None
                else:
                    kwargs[key] = _section(_SECTIONS[key], value, key)
            elif key in ("acceptance", "scaled_acceptance"):
                if not isinstance(value, list):
                    raise ConfigError(f"{key}: expected a list of rules")
                kwargs[key] = tuple(_section(AcceptanceRule, rule, f"{key}[{i}]") for i, rule in enumerate(value))
            else:
                kwargs[key] = value
        config = cls(**kwargs)
        config.validate()
        return config

    def to_dict(self) -> dict:
        return _thaw(asdict(self))

    def validate(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ConfigError("id: must be a non-empty string")
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task '{self.task}' (expected one of {', '.join(TASKS)})")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError(f"trials: must be a positive integer, got {self.trials}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {self.seed}")
        self.network.spec(in_dim=2, out_dim=1)
        if self.task in (SOLVE, COMPARE, NTK_DRIFT, OPERATOR_WAVENUMBER):
            try:
                discretize(make_curve(self.geometry.curve_spec()), self.geometry.nodes)
            except GeometryError as e:
                raise ConfigError(f"geometry: {e}")
        if self.task in (SOLVE, COMPARE, NTK_DRIFT):
            if self.pde.name == HELMHOLTZ_2D and self.pde.k is None:
                raise ConfigError("pde.k: Helmholtz experiments need a wavenumber")
            if self.problem.solution is None and self.problem.boundary is None:
                raise ConfigError("problem.solution: need an exact solution or a boundary function")
            if self.problem.reference == "fd" and self.geometry.kind != "square":
                raise ConfigError("problem.reference: the finite-difference reference is defined on the square")
        if self.task == COMPARE and self.comparison is None:
            raise ConfigError("comparison: compare-potentials needs a comparison section")
        if self.task in (OPERATOR_WAVENUMBER, OPERATOR_TRIANGLE) and self.operator is None:
            raise ConfigError(f"operator: {self.task} needs an operator section")
        if self.task in (NTK_WIDTH, NTK_DRIFT):
            if self.ntk is None:
                raise ConfigError(f"ntk: {self.task} needs an ntk section")
            if self.pde.name != LAPLACE_2D:
                raise ConfigError("pde.name: kernel studies use the Laplace operator")
        if self.task == OPERATOR_WAVENUMBER and self.pde.name != HELMHOLTZ_2D:
            raise ConfigError("pde.name: the wavenumber family is a Helmholtz problem")
        for key in ("acceptance", "scaled_acceptance"):
            for i, rule in enumerate(getattr(self, key)):
                if rule.metric not in TASK_METRICS[self.task]:
                    raise ConfigError(f"{key}[{i}].metric: '{rule.metric}' is not reported by task {self.task}")


def load_experiment_config(path: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_json_document(path))


def list_experiments(config_dir: str) -> List[Tuple[str, str, str]]:
    """設定ディレクトリ内の実験 (id, task, 説明) をファイル名順に返す。"""
    rows = []
    for name in sorted(os.listdir(config_dir)):
        if not name.endswith(".json"):
            continue
        config = load_experiment_config(os.path.join(config_dir, name))
        rows.append((config.id, config.task, config.description))
    return rows


# --- 評価点 -------------------------------------------------------------------

def _on_side(geometry: BoundaryGeometry, side: str, pts: np.ndarray, min_distance: float = 0.0) -> np.ndarray:
    inside = geometry.contains(pts)
    keep = inside if side == INTERIOR else ~inside
    return keep & (geometry.distance(pts) > max(_BOUNDARY_CLEARANCE, min_distance))


def evaluation_targets(ev: EvaluationSection, geometry: BoundaryGeometry, side: str,
                       min_distance: float = 0.0) -> np.ndarray:
    """
    問題の側にある評価点を作る。min_distance を渡すと、境界からそれ以下の距離の点は作らない
    （random では条件を満たす点が count 個になるまで引き直す）。

    - lattice: 箱（既定は境界の外接矩形）上の resolution × resolution 格子
    - annulus: 半径 [r_in, r_out] の極座標格子（resolution × 4·resolution）
    - random: 箱の中の一様乱数点（棄却法で count 個）

    Raises:
        ConfigError: 条件を満たす点が1つもない
    """
    box = ev.box if ev.box is not None else geometry.bounding_box
    if ev.region == "lattice":
        xs = np.linspace(box[0], box[2], ev.resolution)
        ys = np.linspace(box[1], box[3], ev.resolution)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        pts = pts[_on_side(geometry, side, pts, min_distance)]
    elif ev.region == "annulus":
        radii = np.linspace(ev.r_in, ev.r_out, ev.resolution)
        angles = 2.0 * np.pi * np.arange(4 * ev.resolution) / (4 * ev.resolution)
        R, T = np.meshgrid(radii, angles, indexing="ij")
        pts = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=-1)
        pts = pts[_on_side(geometry, side, pts, min_distance)]
    else:
        rng = np.random.default_rng(ev.seed)
        chunks, have = [], 0
        for _ in range(100):
            draw = rng.uniform((box[0], box[1]), (box[2], box[3]), size=(2 * ev.count, 2))
            draw = draw[_on_side(geometry, side, draw, min_distance)]
            chunks.append(draw)
            have += len(draw)
            if have >= ev.count:
                break
        pts = np.concatenate(chunks)[:ev.count]
    if len(pts) == 0:
        raise ConfigError(f"evaluation region '{ev.region}' has no points on the {side} side of {geometry.name}")
    return pts


# --- 実行 ---------------------------------------------------------------------

@dataclass
class TrialOutcome:
    record: TrialRecord
    loss_history: List[float]
    field_values: Optional[np.ndarray] = None
    corner_residual: Optional[float] = None
    net: Optional[DensityNetwork] = None


@dataclass
class RunContext:
    config: ExperimentConfig
    faithful: bool
    seed: int
    workers: int
    kr_order: int
    cache: LRUCache
    progress_queue: Optional['queue.Queue'] = None

    @property
    def mode(self) -> str:
        return "faithful" if self.faithful else "scaled"

    def trial_seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.config.trials)]

    def run(self, trial_fn: Callable[[int, int], Any]) -> List[Any]:
        return run_trials(trial_fn, self.trial_seeds(), workers=self.workers,
                          progress_queue=self.progress_queue)


def _median(values) -> Optional[float]:
    finite = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.median(finite)) if finite else None


def _solution_params(config: ExperimentConfig, k: Optional[float] = None) -> dict:
    params = dict(config.problem.solution_params)
    k = k if k is not None else config.pde.k
    if k is not None:
        params.setdefault("k", k)
    return params


def _boundary_fn(config: ExperimentConfig):
    prob = config.problem
    if prob.boundary is not None:
        return BOUNDARY_FUNCTIONS[prob.boundary]
    params = _solution_params(config)
    return lambda pts: exact_solution(prob.solution, params, pts)


def _reference(config: ExperimentConfig, targets: np.ndarray) -> np.ndarray:
    prob = config.problem
    if prob.reference == "fd":
        fd = fd_reference_laplace(BOUNDARY_FUNCTIONS[prob.boundary], prob.fd_grid)
        return fd.interpolate(targets)
    return exact_solution(prob.solution, _solution_params(config), targets)


def _single_problem(ctx: RunContext, potential: Optional[str] = None) -> TrainingProblem:
    config = ctx.config
    geometry = make_curve(config.geometry.curve_spec())
    grid = discretize(geometry, config.geometry.nodes)
    potential = potential or config.problem.potential
    return build_problem(config.pde.kind(), geometry, grid, potential, config.problem.side,
                         _boundary_fn(config), kr_order=ctx.kr_order, cache=ctx.cache,
                         label=f"{config.id}/{potential}")


def _corner_residual(problem: TrainingProblem, net, corner, radius: float) -> Optional[float]:
    """角の近くの節点での境界残差の二乗平均平方根"""
    near = np.linalg.norm(problem.grid.points - np.asarray(corner, dtype=float), axis=1) <= radius
    if not np.any(near):
        return None
    r = boundary_residual(problem, net)[near]
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def _solve_trials(ctx: RunContext, problem: TrainingProblem, targets: np.ndarray, reference: np.ndarray,
                  mask: np.ndarray) -> List[TrialOutcome]:
    config = ctx.config
    spec = config.network.spec(in_dim=2, out_dim=problem.channels)

    def trial_fn(trial: int, seed: int) -> TrialOutcome:
        net = init_network(spec, seed)
        report, net = train(problem, net, config.training.options(ctx.faithful, seed))
        if report.diverged:
            return TrialOutcome(TrialRecord(trial, seed, None, True, report.epochs, None, report.wall_time),
                                report.loss_history)
        result = solve_field(problem, net, targets)
        err = relative_l2(result.values[mask], reference[mask])
        corner = None
        if config.problem.corner is not None:
            corner = _corner_residual(problem, net, config.problem.corner, config.problem.corner_radius)
        logger.info("%s trial %d (seed %d): rel L2 %.4e", problem.label, trial, seed, err)
        return TrialOutcome(TrialRecord(trial, seed, err, False, report.epochs, report.final_loss, report.wall_time),
                            report.loss_history, result.values, corner, net)

    return ctx.run(trial_fn)


def _field_data(targets: np.ndarray, values: Optional[np.ndarray], reference: np.ndarray,
                flags: np.ndarray) -> Optional[Dict[str, np.ndarray]]:
    if values is None:
        return None
    values = np.asarray(values, dtype=complex)
    return {"x": targets[:, 0], "y": targets[:, 1], "re_u": values.real, "im_u": values.imag,
            "abs_err": np.abs(values - reference), "flag": flags.astype(int)}


def _eval_setup(ctx: RunContext, problem: TrainingProblem):
    targets = evaluation_targets(ctx.config.evaluation, problem.geometry, problem.side)
    flags = problem.grid.boundary_distance(targets) < AppConstants.NEAR_BAND_FACTOR * problem.grid.max_spacing
    reference = _reference(ctx.config, targets)
    return targets, reference, flags


def _trial_metrics(outcomes: Sequence[TrialOutcome]) -> Dict[str, Any]:
    errs = [o.record.rel_l2 for o in outcomes if not o.record.diverged]
    return {
        "median_rel_l2": _median(errs),
        "mean_rel_l2": float(np.mean(errs)) if errs else None,
        "max_rel_l2": float(np.max(errs)) if errs else None,
        "diverged_trials": sum(o.record.diverged for o in outcomes),
        "median_final_loss": _median([o.record.final_loss for o in outcomes]),
    }


def _first_converged(outcomes: Sequence[TrialOutcome]) -> Optional[TrialOutcome]:
    return next((o for o in outcomes if not o.record.diverged), None)


def _run_solve(ctx: RunContext) -> ResultBundle:
    problem = _single_problem(ctx)
    targets, reference, flags = _eval_setup(ctx, problem)
    outcomes = _solve_trials(ctx, problem, targets, reference, ~flags)
    metrics = _trial_metrics(outcomes)
    metrics["corner_residual"] = _median([o.corner_residual for o in outcomes])
    first = _first_converged(outcomes) or outcomes[0]
    history = first.loss_history
    metrics["loss_reduction"] = history[0] / history[-1] if history and history[-1] > 0 else None
    return ResultBundle(experiment_id=ctx.config.id, mode=ctx.mode, config=ctx.config.to_dict(),
                        trials=[o.record for o in outcomes], metrics=metrics, loss_history=history,
                        field_data=_field_data(targets, first.field_values, reference, flags),
                        checkpoint=first.net)


def _loss_at(history: List[float], epoch: Optional[int]) -> Optional[float]:
    if not history:
        return None
    if epoch is None or epoch > len(history):
        return history[-1]
    return history[epoch - 1]


def _run_compare(ctx: RunContext) -> ResultBundle:
    config = ctx.config
    metrics: Dict[str, Any] = {"diverged_trials": 0}
    records: List[TrialRecord] = []
    table: List[Dict[str, Any]] = []
    history: List[float] = []
    field_data = None
    checkpoint = None
    for potential in config.comparison.potentials:
        problem = _single_problem(ctx, potential)
        targets, reference, flags = _eval_setup(ctx, problem)
        outcomes = _solve_trials(ctx, problem, targets, reference, ~flags)
        summary = _trial_metrics(outcomes)
        losses = [_loss_at(o.loss_history, config.comparison.compare_epoch) for o in outcomes]
        metrics[f"{potential}_median_rel_l2"] = summary["median_rel_l2"]
        metrics[f"{potential}_loss_at_compare"] = _median(losses)
        metrics["diverged_trials"] += summary["diverged_trials"]
        for o, loss in zip(outcomes, losses):
            records.append(replace(o.record, trial=len(records)))
            table.append({"potential": potential, "trial": o.record.trial, "seed": o.record.seed,
                          "rel_l2": o.record.rel_l2, "loss_at_compare": loss})
        if potential == DLP:
            first = _first_converged(outcomes) or outcomes[0]
            history = first.loss_history
            field_data = _field_data(targets, first.field_values, reference, flags)
            checkpoint = first.net
    dlp, slp = metrics.get("dlp_loss_at_compare"), metrics.get("slp_loss_at_compare")
    metrics["dlp_slp_loss_ratio"] = dlp / slp if dlp is not None and slp else None
    return ResultBundle(experiment_id=config.id, mode=ctx.mode, config=config.to_dict(), trials=records,
                        metrics=metrics, loss_history=history, field_data=field_data, table=table,
                        checkpoint=checkpoint)


def _run_wavenumber(ctx: RunContext) -> ResultBundle:
    config = ctx.config
    op = config.operator
    geometry = make_curve(config.geometry.curve_spec())
    family = WavenumberFamily(geometry, config.geometry.nodes, op.k_ranges, hankel_solution,
                              potential=config.problem.potential, side=config.problem.side,
                              samples_per_epoch=op.samples_per_epoch, pool_size=op.pool_size,
                              kr_order=ctx.kr_order, cache=ctx.cache)
    targets = evaluation_targets(config.evaluation, geometry, config.problem.side)
    hull = (min(lo for lo, _ in family.k_ranges), max(hi for _, hi in family.k_ranges))
    spec = config.network.spec(in_dim=3, out_dim=2)

    def trial_fn(trial: int, seed: int):
        net = init_network(spec, seed)
        report, net = train_operator(family, net, config.training.options(ctx.faithful, seed))
        if report.diverged:
            return TrialOutcome(TrialRecord(trial, seed, None, True, report.epochs, None, report.wall_time),
                                report.loss_history), []
        rows = []
        for k in op.test_values:
            problem = family.problem(float(k))
            result = solve_field(problem, net, targets)
            keep = ~result.near_flags
            err = relative_l2(result.values[keep], hankel_solution(float(k), targets)[keep])
            rows.append({"trial": trial, "k": float(k), "rel_l2": err,
                         "in_training_range": family.in_training_range(float(k)),
                         "extrapolation": not hull[0] <= k <= hull[1]})
        interpolated = [r["rel_l2"] for r in rows if not r["extrapolation"]]
        worst = max(interpolated) if interpolated else None
        return TrialOutcome(TrialRecord(trial, seed, worst, False, report.epochs, report.final_loss,
                                        report.wall_time), report.loss_history, net=net), rows

    results = ctx.run(trial_fn)
    outcomes = [o for o, _ in results]
    table = [row for _, rows in results for row in rows]

    def worst(pred):
        return _median_of_trial_max(table, pred)

    metrics = {
        "max_rel_l2": worst(lambda r: not r["extrapolation"]),
        "held_out_max_rel_l2": worst(lambda r: not r["in_training_range"] and not r["extrapolation"]),
        "extrapolation_max_rel_l2": worst(lambda r: r["extrapolation"]),
        "diverged_trials": sum(o.record.diverged for o in outcomes),
    }
    first = _first_converged(outcomes) or outcomes[0]
    return ResultBundle(experiment_id=config.id, mode=ctx.mode, config=config.to_dict(),
                        trials=[o.record for o in outcomes], metrics=metrics,
                        loss_history=first.loss_history, table=table, checkpoint=first.net)


def _median_of_trial_max(table: List[Dict[str, Any]], pred) -> Optional[float]:
    """試行ごとの最大誤差の中央値"""
    per_trial: Dict[int, float] = {}
    for row in table:
        if pred(row):
            per_trial[row["trial"]] = max(per_trial.get(row["trial"], 0.0), row["rel_l2"])
    return _median(per_trial.values())


def _triangle_family(ctx: RunContext) -> TriangleFamily:
    op = ctx.config.operator
    return TriangleFamily(members=op.members, resample_every=op.resample_every, nodes=ctx.config.geometry.nodes,
                          low=op.low, potential=ctx.config.problem.potential, cache=ctx.cache)


def triangle_error(problem: TrainingProblem, net, ev: EvaluationSection) -> Optional[float]:
    """三角形1つでの相対 L² 誤差。近傍帯の外に評価点が取れなければ None。"""
    delta = AppConstants.NEAR_BAND_FACTOR * problem.grid.max_spacing
    try:
        targets = evaluation_targets(ev, problem.geometry, INTERIOR, min_distance=delta)
    except ConfigError:
        logger.warning("%s: no evaluation targets outside the near-boundary band (%.3g); skipped",
                       problem.label, delta)
        return None
    result = solve_field(problem, net, targets)
    keep = ~result.near_flags
    xc, yc = barycenter(problem.geometry)
    reference = exact_solution("triangle_bc", {"xc": xc, "yc": yc}, targets)
    return relative_l2(result.values[keep], reference[keep])


def _run_triangle(ctx: RunContext) -> ResultBundle:
    config = ctx.config
    op = config.operator
    test_params = _triangle_family(ctx).sample_parameters(np.random.default_rng(op.test_seed), op.test_count)
    spec = config.network.spec(in_dim=5, out_dim=1)

    def trial_fn(trial: int, seed: int):
        # 引き直した三角形は試行ごとに持つ（共有するのは演算子キャッシュだけ）
        family = _triangle_family(ctx)
        net = init_network(spec, seed)
        report, net = train_operator(family, net, config.training.options(ctx.faithful, seed))
        if report.diverged:
            return TrialOutcome(TrialRecord(trial, seed, None, True, report.epochs, None, report.wall_time),
                                report.loss_history), []
        rows = []
        for a, b, c in test_params:
            problem = family.problem(float(a), float(b), float(c))
            rows.append({"trial": trial, "a": float(a), "b": float(b), "c": float(c),
                         "rel_l2": triangle_error(problem, net, config.evaluation)})
        median = _median([r["rel_l2"] for r in rows])
        return TrialOutcome(TrialRecord(trial, seed, median, False, report.epochs, report.final_loss,
                                        report.wall_time), report.loss_history, net=net), rows

    results = ctx.run(trial_fn)
    outcomes = [o for o, _ in results]
    table = [row for _, rows in results for row in rows]
    errs = [r["rel_l2"] for r in table if r["rel_l2"] is not None]
    metrics = {
        "median_rel_l2": _median(errs),
        "fraction_below_1e-2": float(np.mean(np.asarray(errs) <= 1e-2)) if errs else None,
        "unevaluable_triangles": sum(r["rel_l2"] is None for r in table),
        "diverged_trials": sum(o.record.diverged for o in outcomes),
    }
    first = _first_converged(outcomes) or outcomes[0]
    return ResultBundle(experiment_id=config.id, mode=ctx.mode, config=config.to_dict(),
                        trials=[o.record for o in outcomes], metrics=metrics,
                        loss_history=first.loss_history, table=table, checkpoint=first.net)


# 求積チェックで使う曲線と内点・許容誤差
_SANITY_CURVES = (
    (CurveSpec(kind="circle"), 256, (0.2, -0.1), 1e-8),
    (CurveSpec(kind="star"), 256, (0.05, 0.02), 1e-8),
    (CurveSpec(kind="square"), 256, (0.3, -0.2), 1e-6),
    (CurveSpec(kind="triangle"), 240, (0.3, 0.13), 1e-6),
)


def quadrature_sanity_rows(kr_order: int = AppConstants.DEFAULT_KR_ORDER) -> List[Dict[str, Any]]:
    """
    学習を使わない求積チェックの表。

    - 二重層の Gauss 恒等式: 内点 1、境界（主値）1/2、外点 0
    - 半径 R の円の単層ポテンシャル S[1] = R ln R（中心と境界上）
    - ジャンプ関係: 境界作用素の内側・外側トレースと、境界のすぐ内側・外側での値の一致
    """
    laplace = PdeKind.laplace()
    rows: List[Dict[str, Any]] = []

    def add(curve: str, check: str, expected: float, value: float, tolerance: float):
        error = abs(value - expected)
        rows.append({"curve": curve, "check": check, "expected": expected, "value": value,
                     "error": error, "tolerance": tolerance, "passed": bool(error <= tolerance)})

    for spec, n, inner, tol in _SANITY_CURVES:
        geometry = make_curve(spec)
        grid = discretize(geometry, n)
        ones = np.ones(n)
        inside = assemble_eval_operator(laplace, grid, np.array([inner]), DLP).apply_complex(ones)[0]
        outside = assemble_eval_operator(laplace, grid, np.array([[3.0, 3.0]]), DLP).apply_complex(ones)[0]
        trace = assemble_boundary_operator(laplace, grid, DLP, INTERIOR, kr_order).apply_complex(ones) - 0.5
        add(geometry.name, "dlp_gauss_interior", 1.0, float(inside), tol)
        add(geometry.name, "dlp_gauss_exterior", 0.0, float(outside), tol)
        add(geometry.name, "dlp_gauss_boundary", 0.5, float(np.max(np.abs(trace - 0.5)) + 0.5), tol)

    radius = 2.0
    circle = discretize(make_curve(CurveSpec(kind="circle", radius=radius)), 256)
    expected = radius * np.log(radius)
    center = assemble_eval_operator(laplace, circle, np.zeros((1, 2)), SLP).apply_complex(np.ones(256))[0]
    on_curve = assemble_boundary_operator(laplace, circle, SLP, INTERIOR, kr_order).apply_complex(np.ones(256))
    add(f"circle({radius:g})", "slp_center", expected, float(center), 1e-6)
    add(f"circle({radius:g})", "slp_boundary", expected,
        expected + float(np.max(np.abs(on_curve - expected))), 1e-6)

    # ジャンプ関係: 粗い格子の境界トレースと、細かい格子で境界から offset 離れた点の値を比べる
    coarse = discretize(make_curve(CurveSpec(kind="circle")), 128)
    fine = discretize(make_curve(CurveSpec(kind="circle")), 32768)
    offset = 7e-4
    density = np.cos(coarse.params)
    fine_density = np.cos(fine.params)
    for side, sign in ((INTERIOR, -1.0), (EXTERIOR, 1.0)):
        trace = assemble_boundary_operator(laplace, coarse, DLP, side, kr_order).apply_complex(density)
        shifted = coarse.points + sign * offset * coarse.normals
        near = assemble_eval_operator(laplace, fine, shifted, DLP).apply_complex(fine_density)
        add("circle(1)", f"jump_{side}", 0.0, float(np.max(np.abs(trace - near))), 1e-3)
    return rows


def _run_quadrature_sanity(ctx: RunContext) -> ResultBundle:
    start = time.perf_counter()
    rows = quadrature_sanity_rows(ctx.kr_order)
    failed = [r for r in rows if not r["passed"]]
    for r in failed:
        logger.warning("quadrature check %s on %s failed: error %.3e > %.1e",
                       r["check"], r["curve"], r["error"], r["tolerance"])
    metrics = {"failed_rows": len(failed), "max_error": max(r["error"] for r in rows)}
    record = TrialRecord(0, ctx.seed, None, False, 0, None, time.perf_counter() - start)
    return ResultBundle(experiment_id=ctx.config.id, mode=ctx.mode, config=ctx.config.to_dict(),
                        trials=[record], metrics=metrics, table=rows)


def _run_ntk_width(ctx: RunContext) -> ResultBundle:
    config = ctx.config
    study = config.ntk
    start = time.perf_counter()
    laplace = PdeKind.laplace()
    geometry = make_curve(config.geometry.curve_spec())
    grid = discretize(geometry, study.nodes)
    operator_matrix = assemble_boundary_operator(laplace, grid, config.problem.potential, INTERIOR, ctx.kr_order)
    inputs = grid.points / np.linalg.norm(grid.points, axis=1)[:, None]

    table = ntk_studies.width_convergence_study(study.widths, study.depth, operator_matrix, inputs,
                                                trials=study.trials, seed=ctx.seed)
    medians = [row["median_deviation"] for row in table]
    depth0 = ntk_studies.width_convergence_study(study.widths[:1], 0, operator_matrix, inputs,
                                                 trials=1, seed=ctx.seed)[0]["max_deviation"]

    definiteness = ntk_studies.definiteness_study(
        discretize(geometry, study.definiteness_nodes), depth=study.depth)
    mc_rows = ntk_studies.monte_carlo_layer_check(study.depth, inputs[:study.mc_points],
                                                  samples=study.mc_samples, seed=ctx.seed)
    z = np.array([row["z"] for row in mc_rows])
    metrics = {
        "width_monotone": float(all(b < a for a, b in zip(medians, medians[1:]))),
        "lambda_min_dlp": next(r["min_eigenvalue"] for r in definiteness if r["potential"] == DLP),
        "lambda_min_slp": next(r["min_eigenvalue"] for r in definiteness if r["potential"] == SLP),
        "mc_max_z": float(z.max()),
        "mc_fraction_within_3se": float(np.mean(z <= 3.0)),
        "depth0_deviation": depth0,
    }
    record = TrialRecord(0, ctx.seed, None, False, 0, None, time.perf_counter() - start)
    return ResultBundle(experiment_id=config.id, mode=ctx.mode, config=config.to_dict(),
                        trials=[record], metrics=metrics, table=table)


def _run_ntk_drift(ctx: RunContext) -> ResultBundle:
    config = ctx.config
    study = config.ntk
    start = time.perf_counter()
    problem = _single_problem(ctx)
    table = ntk_studies.training_drift_study(problem, study.widths, depth=study.depth,
                                             checkpoints=study.checkpoints, lr_scale=study.lr_scale, seed=ctx.seed)
    smallest, largest = table[0]["max_drift"], table[-1]["max_drift"]
    metrics = {
        "max_drift_smallest": smallest,
        "max_drift_largest": largest,
        "drift_ratio": largest / smallest if smallest > 0 else None,
        "linearization_gap": None,
    }
    history: List[float] = []
    if study.linearization_steps > 0:
        lin = ntk_studies.linearization_study(problem, study.widths[-1], steps=study.linearization_steps,
                                              depth=study.depth, seed=ctx.seed)
        metrics["linearization_gap"] = max(row["relative_gap"] for row in lin)
        history = [row["observed"] ** 2 / problem.n for row in lin]
    record = TrialRecord(0, ctx.seed, None, False, max(study.checkpoints), None, time.perf_counter() - start)
    return ResultBundle(experiment_id=config.id, mode=ctx.mode, config=config.to_dict(),
                        trials=[record], metrics=metrics, table=table, loss_history=history)


_RUNNERS = {
    SOLVE: _run_solve,
    COMPARE: _run_compare,
    OPERATOR_WAVENUMBER: _run_wavenumber,
    OPERATOR_TRIANGLE: _run_triangle,
    QUADRATURE_SANITY: _run_quadrature_sanity,
    NTK_WIDTH: _run_ntk_width,
    NTK_DRIFT: _run_ntk_drift,
}


def apply_acceptance(bundle: ResultBundle, rules: Sequence[AcceptanceRule]) -> ResultBundle:
    """閾値を評価して bundle.acceptance と bundle.passed を埋める。全試行が発散したら不合格。"""
    bundle.acceptance = [rule.check(bundle.metrics) for rule in rules]
    all_diverged = all(t.diverged for t in bundle.trials)
    bundle.metrics["all_diverged"] = all_diverged
    bundle.passed = not all_diverged and all(row["passed"] for row in bundle.acceptance)
    for row in bundle.acceptance:
        if not row["passed"]:
            logger.error("%s: acceptance %s %s %g failed (actual %s)", bundle.experiment_id,
                         row["metric"], row["op"], row["value"], row["actual"])
    return bundle


def run_experiment(config: ExperimentConfig, faithful: bool = False, seed: Optional[int] = None,
                   settings: Optional[ConfigManager] = None,
                   progress_queue: Optional['queue.Queue'] = None) -> ResultBundle:
    """
    実験を最初から最後まで実行する。

    Args:
        config: 検証済みの実験設定
        faithful: True なら長い学習（faithful_epochs）と acceptance の閾値を使う
        seed: 基準シードの上書き（試行 i のシードは seed + i）
        settings: 実行時設定（並列数、既定の補正次数、キャッシュ容量）
        progress_queue: 試行の進捗を受け取るキュー

    Returns:
        結果一式（acceptance 判定済み）
    """
    settings = settings or ConfigManager()
    ctx = RunContext(config=config, faithful=faithful,
                     seed=config.seed if seed is None else int(seed),
                     workers=settings.get_workers(),
                     kr_order=config.problem.kr_order or settings.get_kr_order(),
                     cache=LRUCache(settings.get_operator_cache_size()),
                     progress_queue=progress_queue)
    logger.info("running %s (%s, %s mode, seed %d)", config.id, config.task, ctx.mode, ctx.seed)
    start = time.perf_counter()
    bundle = _RUNNERS[config.task](ctx)
    bundle.total_time = time.perf_counter() - start
    rules = config.acceptance if faithful else config.scaled_acceptance
    apply_acceptance(bundle, rules)
    logger.info("%s finished in %.1fs (passed=%s, operator cache %d hits / %d misses)",
                config.id, bundle.total_time, bundle.passed, ctx.cache.hits, ctx.cache.misses)
    return bundle
