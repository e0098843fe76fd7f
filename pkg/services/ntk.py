import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.geometry import QuadratureGrid
from core.kernels import PdeKind
from core.network import MLP, NTK, DensityNetwork, NetworkSpec, init_network
from core.quadrature import DLP, INTERIOR, SLP, OperatorMatrix, assemble_boundary_operator
from core.utils import ConfigError
from services.solver import TrainingProblem

"""
ニューラルタンジェントカーネルの数値検証。
- 経験カーネル 𝒩 = A K Aᵀ（K はパラメータ Jacobian の Gram 行列）
- ReLU MLP の解析的カーネル Θ^(L)（arc-cosine 型の再帰）と合成 A Θ Aᵀ
- 幅に関する収束・学習中のドリフト・線形化・正定値性の各スタディ

定理の sup ノルムは有限標本上の成分最大値で代用する。
"""

logger = logging.getLogger(__name__)

EMPIRICAL_N = "empirical_n"
ANALYTIC_THETA = "analytic_theta"
COMPOSED_ATA = "composed_ata"
NETWORK_K = "network_k"


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    values: np.ndarray
    kind: str
    width: Optional[int] = None
    depth: Optional[int] = None
    step: int = 0

    @property
    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(0.5 * (self.values + self.values.T))))


def _require_ntk_scalar(net: DensityNetwork) -> None:
    if net.spec.parameterization != NTK:
        raise ConfigError("kernel computations require a network in NTK parameterization")
    if net.spec.out_dim != 1:
        raise ConfigError("kernel computations require a scalar-output network")


def network_kernel(net: DensityNetwork, inputs) -> KernelMatrix:
    """K(y, y') = Σ_θ ∂h(y)/∂θ ∂h(y')/∂θ を層ごとの (入力, 逆伝播信号) から組み立てる。"""
    if net.spec.out_dim != 1:
        raise ConfigError("kernel computations require a scalar-output network")
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    kernel = np.zeros((len(x), len(x)))
    for rec in net.layer_records(x):
        delta_gram = rec.delta @ rec.delta.T
        kernel += delta_gram * (rec.inputs @ rec.inputs.T)
        if rec.has_bias:
            kernel += delta_gram
    return KernelMatrix(values=kernel, kind=NETWORK_K, width=net.spec.width, depth=net.spec.depth)


def _real_operator(op: OperatorMatrix) -> np.ndarray:
    if op.is_complex:
        raise ConfigError("kernel studies support real (Laplace) operators only")
    return op.entries


def empirical_kernel(net: DensityNetwork, operator: OperatorMatrix, inputs, step: int = 0) -> KernelMatrix:
    """𝒩(x, x') = [A K A](x, x')。J = A·∂h/∂θ として J Jᵀ と等しい。

    Raises:
        ConfigError: NTK パラメータ化でない、出力が1次元でない、複素作用素
    """
    _require_ntk_scalar(net)
    a = _real_operator(operator)
    k = network_kernel(net, inputs).values
    if a.shape[1] != k.shape[0]:
        raise ValueError(f"operator has {a.shape[1]} columns but {k.shape[0]} inputs were given")
    values = a @ k @ a.T
    return KernelMatrix(values=0.5 * (values + values.T), kind=EMPIRICAL_N,
                        width=net.spec.width, depth=net.spec.depth, step=step)


def _arccos_step(sigma: np.ndarray):
    """1層分の Σ^(l), Σ̇^(l) を前の層の Σ から計算する（ReLU、c_σ = 2）。"""
    diag = np.sqrt(np.diag(sigma))
    norm = np.outer(diag, diag)
    rho = np.clip(sigma / norm, -1.0, 1.0)
    angle = np.arccos(rho)
    next_sigma = norm / np.pi * (np.sqrt(1.0 - rho * rho) + (np.pi - angle) * rho)
    derivative = (np.pi - angle) / np.pi
    return next_sigma, derivative


def analytic_layers(depth: int, inputs) -> List[Dict[str, np.ndarray]]:
    """Σ^(0..L) と Σ̇^(1..L) を層ごとに返す。"""
    y = np.atleast_2d(np.asarray(inputs, dtype=float))
    sigma = y @ y.T
    layers = [{"sigma": sigma}]
    for _ in range(depth):
        sigma, derivative = _arccos_step(sigma)
        layers.append({"sigma": sigma, "derivative": derivative})
    return layers


def analytic_theta(depth: int, inputs, normalize: bool = False) -> KernelMatrix:
    """L 隠れ層 ReLU MLP の無限幅カーネル Θ^(L)。

    Θ^(0) = Σ^(0)、Θ^(l) = Θ^(l−1) Σ̇^(l) + Σ^(l)（出力層は Σ̇^(L+1) = 1）。

    Raises:
        ValueError: 単位ノルムでない入力（normalize=False のとき）
    """
    y = np.atleast_2d(np.asarray(inputs, dtype=float))
    norms = np.linalg.norm(y, axis=1)
    if normalize:
        y = y / norms[:, None]
    elif not np.allclose(norms, 1.0, atol=1e-10):
        raise ValueError("analytic NTK expects inputs on the unit sphere")
    layers = analytic_layers(depth, y)
    theta = layers[0]["sigma"].copy()
    for layer in layers[1:]:
        theta = theta * layer["derivative"] + layer["sigma"]
    return KernelMatrix(values=theta, kind=ANALYTIC_THETA, depth=depth)


def compose_operator(theta: KernelMatrix, operator) -> KernelMatrix:
    """A Θ Aᵀ（複素作用素では A Θ Aᴴ）"""
    a = operator.entries if isinstance(operator, OperatorMatrix) else np.asarray(operator)
    if a.shape[1] != theta.values.shape[0]:
        raise ValueError(f"operator with {a.shape[1]} columns cannot act on a {theta.values.shape[0]}-point kernel")
    values = a @ theta.values @ a.conj().T
    if not np.iscomplexobj(values):
        values = 0.5 * (values + values.T)
    return KernelMatrix(values=values, kind=COMPOSED_ATA, width=theta.width, depth=theta.depth)


def monte_carlo_layer_check(depth: int, inputs, samples: int = 200000, seed: int = 0) -> List[dict]:
    """各層の Σ^(l), Σ̇^(l) を Gauss 期待値のモンテカルロ推定と比較する。

    Λ^(l) は解析値の Σ^(l−1) から作る。戻り値は層・成分ごとの推定値・標準誤差・z 値。
    """
    rng = np.random.default_rng(seed)
    layers = analytic_layers(depth, inputs)
    rows = []
    n = layers[0]["sigma"].shape[0]
    for level in range(1, depth + 1):
        prev = layers[level - 1]["sigma"]
        for i in range(n):
            for j in range(i, n):
                cov = np.array([[prev[i, i], prev[i, j]], [prev[j, i], prev[j, j]]])
                chol = np.linalg.cholesky(cov + 1e-12 * np.eye(2))
                uv = rng.standard_normal((samples, 2)) @ chol.T
                u, v = uv[:, 0], uv[:, 1]
                value_samples = 2.0 * np.maximum(u, 0.0) * np.maximum(v, 0.0)
                deriv_samples = 2.0 * ((u > 0) & (v > 0)).astype(float)
                for name, draws in (("sigma", value_samples), ("derivative", deriv_samples)):
                    estimate = float(draws.mean())
                    stderr = float(draws.std(ddof=1) / np.sqrt(samples))
                    exact = float(layers[level][name][i, j])
                    z = abs(estimate - exact) / stderr if stderr > 0 else 0.0
                    rows.append({"layer": level, "i": i, "j": j, "quantity": name, "analytic": exact,
                                 "monte_carlo": estimate, "stderr": stderr, "z": z})
    return rows


def _ntk_net(width: int, depth: int, seed: int, in_dim: int = 2) -> DensityNetwork:
    spec = NetworkSpec(arch=MLP, in_dim=in_dim, out_dim=1, width=width, depth=depth,
                       activation="relu", parameterization=NTK)
    return init_network(spec, seed)


def width_convergence_study(widths: Sequence[int], depth: int, operator: OperatorMatrix, inputs,
                            trials: int = 5, seed: int = 0) -> List[dict]:
    """幅ごとに ‖𝒩₀ − A Θ Aᵀ‖_max の試行中央値を求める。"""
    target = compose_operator(analytic_theta(depth, inputs), operator).values
    rows = []
    for width in widths:
        deviations = []
        for trial in range(trials):
            net = _ntk_net(width, depth, seed + trial)
            n0 = empirical_kernel(net, operator, inputs).values
            deviations.append(float(np.max(np.abs(n0 - target))))
        rows.append({"width": int(width), "depth": depth, "median_deviation": float(np.median(deviations)),
                     "max_deviation": float(np.max(deviations)), "trials": trials})
        logger.info("width %d: median kernel deviation %.4e", width, rows[-1]["median_deviation"])
    return rows


def _gd_rate(kernel: np.ndarray, n: int, lr_scale: float) -> float:
    """勾配降下の学習率 η = lr_scale · n / (2 λ_max(𝒩₀))"""
    lam_max = float(np.max(np.linalg.eigvalsh(kernel)))
    return lr_scale * n / (2.0 * lam_max) if lam_max > 0 else 0.0


def _gd_step(problem: TrainingProblem, net: DensityNetwork, eta: float) -> np.ndarray:
    h = net.forward(problem.inputs)
    r = problem.operator.apply(h) - problem.target
    upstream = (2.0 / problem.n) * problem.operator.apply_transpose(r)
    grads = net.backward(problem.inputs, upstream)
    for k in net.params:
        net.params[k] -= eta * grads[k]
    return r


def training_drift_study(problem: TrainingProblem, widths: Sequence[int], depth: int = 2,
                         checkpoints: Sequence[int] = (0, 10, 100, 1000), lr_scale: float = 0.5,
                         seed: int = 0) -> List[dict]:
    """勾配降下中のカーネルのずれ max_t ‖𝒩_t − 𝒩₀‖_max を幅ごとに記録する。"""
    if problem.operator.is_complex:
        raise ConfigError("drift study supports real operators only")
    rows = []
    last = max(checkpoints)
    marks = set(int(c) for c in checkpoints)
    for width in widths:
        net = _ntk_net(width, depth, seed, in_dim=problem.inputs.shape[1])
        n0 = empirical_kernel(net, problem.operator, problem.inputs).values
        eta = _gd_rate(n0, problem.n, lr_scale)
        drift_at = {}
        for step in range(last + 1):
            if step in marks:
                nt = empirical_kernel(net, problem.operator, problem.inputs, step=step).values
                drift_at[step] = float(np.max(np.abs(nt - n0)))
            if step < last:
                _gd_step(problem, net, eta)
        row = {"width": int(width), "depth": depth, "lr": eta, "max_drift": max(drift_at.values())}
        row.update({f"drift_t{t}": drift_at[t] for t in sorted(drift_at)})
        rows.append(row)
        logger.info("width %d: max kernel drift %.4e", width, row["max_drift"])
    return rows


def linearization_study(problem: TrainingProblem, width: int, steps: int = 200, depth: int = 2,
                        lr_scale: float = 0.1, seed: int = 0, record_every: int = 10) -> List[dict]:
    """観測した残差ノルムと線形化予測 (I − η(2/n)𝒩₀)^t r₀ を比較する。"""
    if problem.operator.is_complex:
        raise ConfigError("linearization study supports real operators only")
    net = _ntk_net(width, depth, seed, in_dim=problem.inputs.shape[1])
    n0 = empirical_kernel(net, problem.operator, problem.inputs).values
    eta = _gd_rate(n0, problem.n, lr_scale)
    propagator = np.eye(problem.n) - eta * (2.0 / problem.n) * n0
    predicted = None
    rows = []
    for step in range(steps + 1):
        if step < steps:
            observed = _gd_step(problem, net, eta)[:, 0]
        else:
            h = net.forward(problem.inputs)
            observed = (problem.operator.apply(h) - problem.target)[:, 0]
        if predicted is None:
            predicted = observed.copy()
        if step % record_every == 0 or step == steps:
            obs_norm = float(np.linalg.norm(observed))
            pred_norm = float(np.linalg.norm(predicted))
            rows.append({"step": step, "observed": obs_norm, "predicted": pred_norm,
                         "relative_gap": abs(obs_norm - pred_norm) / max(pred_norm, 1e-300)})
        predicted = propagator @ predicted
    return rows


def definiteness_study(grid: QuadratureGrid, depth: int = 2) -> List[dict]:
    """内部 Laplace 問題の二重層・単層それぞれで λ_min(A Θ Aᵀ) を求める。"""
    theta = analytic_theta(depth, grid.points, normalize=True)
    rows = []
    for potential in (DLP, SLP):
        op = assemble_boundary_operator(PdeKind.laplace(), grid, potential, INTERIOR)
        composed = compose_operator(theta, op)
        rows.append({"potential": potential, "depth": depth, "nodes": grid.n,
                     "min_eigenvalue": composed.min_eigenvalue,
                     "asserted_positive": potential == DLP})
    return rows
