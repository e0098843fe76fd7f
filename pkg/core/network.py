import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .utils import AppConstants

"""
密度ネットワークモジュール。
境界上の密度 h(y; θ) を近似する MLP / ResNet を numpy だけで実装する。
逆伝播は固定アーキテクチャ専用の手書き実装で、最適化は Adam。

NTK パラメータ化では隠れ層の出力を √(c_σ/d_l) 倍し、重みは標準正規で初期化する（バイアスなし）。
"""

logger = logging.getLogger(__name__)

MLP = "mlp"
RESNET = "resnet"
STANDARD = "standard"
NTK = "ntk"

ARCHITECTURES = (MLP, RESNET)
PARAMETERIZATIONS = (STANDARD, NTK)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0.0).astype(float)


def _relu3(x):
    return np.maximum(x, 0.0) ** 3


def _relu3_grad(x):
    return 3.0 * np.maximum(x, 0.0) ** 2


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_grad(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "relu3": (_relu3, _relu3_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
    "sine": (np.sin, np.cos),
}

# Kaiming 型初期化のゲイン（分散 = gain / fan_in）
_INIT_GAIN = {"relu": 2.0, "relu3": 2.0}


@lru_cache(maxsize=None)
def c_sigma(activation: str) -> float:
    """c_σ = 1 / E[σ(u)²]（u ~ N(0,1)）。ReLU は 2、ReLU³ は 2/15、他は Gauss–Hermite 求積。"""
    if activation == "relu":
        return 2.0
    if activation == "relu3":
        return 2.0 / 15.0
    fn, _ = _lookup(activation)
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    second_moment = float(np.sum(weights * fn(nodes) ** 2) / np.sqrt(2.0 * np.pi))
    return 1.0 / second_moment


def _lookup(activation: str):
    try:
        return ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation '{activation}' (expected one of {', '.join(ACTIVATIONS)})")


@dataclass(frozen=True)
class NetworkSpec:
    """ネットワークの構成。

    depth は MLP では隠れ層の数、ResNet ではブロック数。
    bias が None のときは Standard でバイアスあり、NTK でなし。
    """
    arch: str = RESNET
    in_dim: int = 2
    out_dim: int = 1
    width: int = 40
    depth: int = 6
    activation: str = "relu"
    parameterization: str = STANDARD
    bias: Optional[bool] = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture '{self.arch}'")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization '{self.parameterization}'")
        _lookup(self.activation)
        if self.in_dim < 1 or self.out_dim < 1 or self.width < 1 or self.depth < 0:
            raise ValueError("network widths must be at least 1 and depth non-negative")
        if self.arch == RESNET and self.depth < 1:
            raise ValueError("a ResNet needs at least one block")

    @property
    def use_bias(self) -> bool:
        if self.bias is None:
            return self.parameterization == STANDARD
        return bool(self.bias)

    def layer_shapes(self) -> List[Tuple[str, int, int]]:
        """(層名, fan_out, fan_in) の一覧（順伝播の順）"""
        w = self.width
        if self.arch == MLP:
            dims = [self.in_dim] + [w] * self.depth + [self.out_dim]
            return [(f"dense{i}", dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        shapes = [("input", w, self.in_dim)]
        for b in range(self.depth):
            shapes += [(f"block{b}.fc1", w, w), (f"block{b}.fc2", w, w)]
        shapes.append(("output", self.out_dim, w))
        return shapes

    def param_count(self) -> int:
        total = 0
        for _, fan_out, fan_in in self.layer_shapes():
            total += fan_out * fan_in + (fan_out if self.use_bias else 0)
        return total

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerRecord:
    """全結合層1つ分の (入力, 前活性に対する逆伝播信号)。パラメータ Jacobian の計算に使う。"""
    name: str
    inputs: np.ndarray
    delta: np.ndarray
    has_bias: bool


class DensityNetwork:
    """密度 h(y; θ) を表す全結合ネットワーク。

    パラメータは `params`（層名.W / 層名.b をキーとする辞書）に保持する。
    """

    def __init__(self, spec: NetworkSpec, params: Dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self._act, self._act_grad = _lookup(spec.activation)
        self._scale = np.sqrt(c_sigma(spec.activation) / spec.width) if spec.parameterization == NTK else 1.0

    @property
    def param_names(self) -> List[str]:
        names = []
        for name, _, _ in self.spec.layer_shapes():
            names.append(f"{name}.W")
            if self.spec.use_bias:
                names.append(f"{name}.b")
        return names

    def param_count(self) -> int:
        return int(sum(self.params[name].size for name in self.param_names))

    def _dense(self, name: str, a: np.ndarray) -> np.ndarray:
        out = a @ self.params[f"{name}.W"].T
        if self.spec.use_bias:
            out = out + self.params[f"{name}.b"]
        return out

    def _check_inputs(self, inputs) -> np.ndarray:
        x = np.asarray(inputs, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected inputs of shape (batch, {self.spec.in_dim}), got {np.shape(inputs)}")
        return x

    def _forward_cache(self, x: np.ndarray):
        """順伝播し、逆伝播用の中間値を層ごとに記録する。"""
        cache = []
        s = self._scale
        if self.spec.arch == MLP:
            a = x
            for name, _, _ in self.spec.layer_shapes()[:-1]:
                pre = self._dense(name, a)
                cache.append((name, a, pre))
                a = s * self._act(pre)
            out_name = self.spec.layer_shapes()[-1][0]
            cache.append((out_name, a, None))
            return self._dense(out_name, a), cache

        z = self._dense("input", x)
        cache.append(("input", x, None))
        for b in range(self.spec.depth):
            p1 = self._dense(f"block{b}.fc1", z)
            a1 = s * self._act(p1)
            p2 = self._dense(f"block{b}.fc2", a1)
            cache.append((f"block{b}.fc1", z, p1))
            cache.append((f"block{b}.fc2", a1, p2))
            z = z + s * self._act(p2)
        cache.append(("output", z, None))
        return self._dense("output", z), cache

    def forward(self, inputs) -> np.ndarray:
        """バッチ入力 (batch, in_dim) に対する出力 (batch, out_dim)

        Raises:
            ValueError: 入力次元の不一致
        """
        out, _ = self._forward_cache(self._check_inputs(inputs))
        return out

    __call__ = forward

    def _backward_records(self, x: np.ndarray, upstream: np.ndarray) -> List[LayerRecord]:
        out, cache = self._forward_cache(x)
        upstream = np.asarray(upstream, dtype=float).reshape(out.shape)
        s = self._scale
        use_bias = self.spec.use_bias
        records: List[LayerRecord] = []

        if self.spec.arch == MLP:
            delta = upstream
            for idx in range(len(cache) - 1, -1, -1):
                name, a_in, _ = cache[idx]
                records.append(LayerRecord(name, a_in, delta, use_bias))
                if idx == 0:
                    break
                _, _, pre_prev = cache[idx - 1]
                da = delta @ self.params[f"{name}.W"]
                delta = da * s * self._act_grad(pre_prev)
            return records[::-1]

        dz = upstream
        records.append(LayerRecord("output", cache[-1][1], dz, use_bias))
        dz = dz @ self.params["output.W"]
        for b in range(self.spec.depth - 1, -1, -1):
            _, z_in, p1 = cache[1 + 2 * b]
            _, a1, p2 = cache[2 + 2 * b]
            d2 = dz * s * self._act_grad(p2)
            records.append(LayerRecord(f"block{b}.fc2", a1, d2, use_bias))
            d1 = (d2 @ self.params[f"block{b}.fc2.W"]) * s * self._act_grad(p1)
            records.append(LayerRecord(f"block{b}.fc1", z_in, d1, use_bias))
            dz = dz + d1 @ self.params[f"block{b}.fc1.W"]
        records.append(LayerRecord("input", x, dz, use_bias))
        return records[::-1]

    def backward(self, inputs, upstream) -> Dict[str, np.ndarray]:
        """Σ⟨upstream, output⟩ の全パラメータに関する厳密な勾配"""
        x = self._check_inputs(inputs)
        grads: Dict[str, np.ndarray] = {}
        for rec in self._backward_records(x, upstream):
            grads[f"{rec.name}.W"] = rec.delta.T @ rec.inputs
            if rec.has_bias:
                grads[f"{rec.name}.b"] = rec.delta.sum(axis=0)
        return grads

    def layer_records(self, inputs) -> List[LayerRecord]:
        """出力1次元のネットワークで、サンプルごとの ∂h/∂(前活性) を層ごとに返す。

        各サンプルの出力は自分の入力にしか依存しないので、上流勾配を全て 1 にすれば
        行ごとにそのサンプルの逆伝播信号になる。
        """
        if self.spec.out_dim != 1:
            raise ValueError("per-sample layer records need a scalar-output network")
        x = self._check_inputs(inputs)
        return self._backward_records(x, np.ones((len(x), 1)))

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in self.param_names])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.param_count():
            raise ValueError(f"expected {self.param_count()} parameters, got {flat.size}")
        offset = 0
        for name in self.param_names:
            size = self.params[name].size
            self.params[name] = flat[offset:offset + size].reshape(self.params[name].shape).copy()
            offset += size

    def flatten_grads(self, grads: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[name].ravel() for name in self.param_names])

    def copy(self) -> "DensityNetwork":
        return DensityNetwork(self.spec, {k: v.copy() for k, v in self.params.items()})


def init_network(spec: NetworkSpec, seed: int) -> DensityNetwork:
    """乱数シードから決定的にネットワークを初期化する。

    NTK: 重みは i.i.d. 標準正規。Standard: 分散 gain/fan_in の正規分布
    （ReLU 系は gain = 2、それ以外は 1）、バイアスは 0。
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    gain = _INIT_GAIN.get(spec.activation, 1.0)
    for name, fan_out, fan_in in spec.layer_shapes():
        if spec.parameterization == NTK:
            params[f"{name}.W"] = rng.standard_normal((fan_out, fan_in))
        else:
            params[f"{name}.W"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in))
        if spec.use_bias:
            params[f"{name}.b"] = np.zeros(fan_out)
    logger.debug("initialised %s network with %d parameters (seed %d)", spec.arch, spec.param_count(), seed)
    return DensityNetwork(spec, params)


@dataclass
class AdamState:
    """Adam の状態（1次・2次モーメント、ステップ数、ハイパーパラメータ）"""
    lr: float = AppConstants.DEFAULT_LR
    beta1: float = AppConstants.ADAM_BETA1
    beta2: float = AppConstants.ADAM_BETA2
    eps: float = AppConstants.ADAM_EPS
    step: int = 0
    m: Optional[Dict[str, np.ndarray]] = None
    v: Optional[Dict[str, np.ndarray]] = None


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """バイアス補正付きの Adam 更新を1回行う（params はその場で更新）。"""
    if state.m is None:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{k}' {params[k].shape}")
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= step_size * m / (np.sqrt(v / bc2) + state.eps)
    return params, state
