import csv
import configparser
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .network import DensityNetwork, NetworkSpec
from .utils import AppConstants, BinetError, ConfigError

"""
ストレージ／設定モジュール。
- `ConfigManager` : `config.ini` を管理するクラス（環境変数を優先）
- JSON 文書の読み書き、ネットワークのチェックポイント
- `ResultBundle` と `emit_report`（summary.json と CSV 群の出力）
"""

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "binet-checkpoint"
CHECKPOINT_VERSION = 1

FIELD_COLUMNS = ("x", "y", "re_u", "im_u", "abs_err", "flag")


class ConfigManager:
    """設定ファイル(config.ini)の管理を専門に行うクラス。"""

    def __init__(self, config_path='config.ini'):
        self.config_path = config_path
        self.config = configparser.ConfigParser()
        self.load_config()

    def load_config(self):
        """設定ファイルを読み込む"""
        if os.path.exists(self.config_path):
            self.config.read(self.config_path, encoding='utf-8')

    def get_out_dir(self) -> str:
        """
        結果の出力先ディレクトリを取得する（環境変数を優先）。

        優先順位:
        1. 環境変数 BINET_OUT_DIR
        2. config.ini の [Output] out_dir
        3. 既定値 results
        """
        env = os.environ.get("BINET_OUT_DIR")
        if env and env.strip():
            return env.strip()
        return self.config.get("Output", "out_dir", fallback=AppConstants.DEFAULT_OUT_DIR)

    def get_workers(self) -> int:
        """
        並列に実行する試行数を取得する（環境変数 BINET_WORKERS > [Runtime] workers）。

        Raises:
            ConfigError: 正の整数でない
        """
        raw = os.environ.get("BINET_WORKERS") or self.config.get(
            "Runtime", "workers", fallback=str(AppConstants.DEFAULT_WORKERS))
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"workers must be an integer, got '{raw}'")
        if workers < 1:
            raise ConfigError(f"workers must be at least 1, got {workers}")
        return workers

    def get_log_file(self) -> Optional[str]:
        """ログファイルのパス（空文字ならファイル出力しない）"""
        value = self.config.get("Logging", "file", fallback=AppConstants.LOG_FILE).strip()
        return value or None

    def get_log_level(self) -> int:
        name = self.config.get("Logging", "level", fallback="WARNING").strip().upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            raise ConfigError(f"unknown log level '{name}'")
        return level

    def get_kr_order(self) -> int:
        return self.config.getint("Quadrature", "kr_order", fallback=AppConstants.DEFAULT_KR_ORDER)

    def get_operator_cache_size(self) -> int:
        return self.config.getint("Cache", "operator_cache_size", fallback=AppConstants.OPERATOR_CACHE_SIZE)


def load_json_document(path: str) -> dict:
    """
    JSON 文書を読み込む。

    Raises:
        ConfigError: ファイルが読めない、または JSON として不正
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return data


def save_json_document(path: str, data: dict) -> str:
    """辞書をキー順で JSON 保存する。"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path


def save_checkpoint(net: DensityNetwork, path: str) -> str:
    """
    ネットワークを JSON チェックポイントとして保存する。

    形式: {"format": "binet-checkpoint", "version": 1, "arch": {...},
           "params": {名前: {"shape": [...], "data": [...]}}}
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": net.spec.to_dict(),
        "params": {name: {"shape": list(net.params[name].shape),
                          "data": [float(v) for v in net.params[name].ravel()]}
                   for name in net.param_names},
    }
    return save_json_document(path, payload)


def load_checkpoint(path: str) -> DensityNetwork:
    """
    チェックポイントからネットワークを復元する。

    Raises:
        ConfigError: 形式・版が違う、または形状が構成と一致しない
    """
    payload = load_json_document(path)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a BINet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    spec = NetworkSpec(**payload["arch"])
    params = {}
    for name, entry in payload["params"].items():
        params[name] = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
    net = DensityNetwork(spec, params)
    for name, fan_out, fan_in in spec.layer_shapes():
        if params.get(f"{name}.W", np.empty(0)).shape != (fan_out, fan_in):
            raise ConfigError(f"{path}: parameter {name}.W does not match the architecture")
    return net


@dataclass
class TrialRecord:
    """1試行分の結果"""
    trial: int
    seed: int
    rel_l2: Optional[float]
    diverged: bool
    epochs: int
    final_loss: Optional[float]
    wall_time: float = 0.0


@dataclass
class ResultBundle:
    """実験1回分の結果一式。`emit_report` でファイルに書き出す。"""
    experiment_id: str
    mode: str
    config: Dict[str, Any]
    trials: List[TrialRecord]
    metrics: Dict[str, Any] = field(default_factory=dict)
    acceptance: List[Dict[str, Any]] = field(default_factory=list)
    passed: bool = True
    loss_history: List[float] = field(default_factory=list)
    field_data: Optional[Dict[str, np.ndarray]] = None
    table: List[Dict[str, Any]] = field(default_factory=list)
    total_time: float = 0.0
    checkpoint: Optional[DensityNetwork] = None

    def summary(self) -> dict:
        """summary.json の内容。実行時間は "timing" キーにまとめる。"""
        return {
            "experiment": self.experiment_id,
            "mode": self.mode,
            "passed": bool(self.passed),
            "metrics": _clean(self.metrics),
            "acceptance": _clean(self.acceptance),
            "trials": [_clean({"trial": t.trial, "seed": t.seed, "rel_l2": t.rel_l2, "diverged": t.diverged,
                               "epochs": t.epochs, "final_loss": t.final_loss}) for t in self.trials],
            "config": _clean(self.config),
            "timing": {"total_seconds": self.total_time,
                       "trial_seconds": [t.wall_time for t in self.trials]},
        }


def _clean(value):
    """JSON に書けるよう numpy 型・非有限値を変換する。"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def _write_csv(path: str, header, rows) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_report(bundle: ResultBundle, out_dir: str) -> List[str]:
    """
    結果一式を書き出す: summary.json, loss_history.csv, field.csv, errors.csv, table.csv, checkpoint.json。
    checkpoint.json は最初に収束した試行のネットワーク（あれば）。

    同じ内容の bundle からはバイト単位で同じファイルができる（timing を除く）。

    Returns:
        書き出したファイルのパス一覧

    Raises:
        ValueError: 試行が1つもない
        BinetError: 出力先に書き込めない
    """
    if not bundle.trials:
        raise ValueError(f"{bundle.experiment_id}: cannot emit a report without trials")
    try:
        os.makedirs(out_dir, exist_ok=True)
        written = [save_json_document(os.path.join(out_dir, "summary.json"), bundle.summary())]

        path = os.path.join(out_dir, "loss_history.csv")
        _write_csv(path, ("epoch", "loss"), ((i + 1, v) for i, v in enumerate(bundle.loss_history)))
        written.append(path)

        path = os.path.join(out_dir, "errors.csv")
        _write_csv(path, ("trial", "rel_l2"), ((t.trial, t.rel_l2) for t in bundle.trials))
        written.append(path)

        if bundle.field_data is not None:
            path = os.path.join(out_dir, "field.csv")
            columns = [np.asarray(bundle.field_data[c]) for c in FIELD_COLUMNS]
            _write_csv(path, FIELD_COLUMNS, zip(*columns))
            written.append(path)

        if bundle.table:
            path = os.path.join(out_dir, "table.csv")
            header = list(bundle.table[0].keys())
            _write_csv(path, header, ([row.get(h) for h in header] for row in bundle.table))
            written.append(path)

        if bundle.checkpoint is not None:
            written.append(save_checkpoint(bundle.checkpoint, os.path.join(out_dir, "checkpoint.json")))
    except OSError as e:
        raise BinetError(f"cannot write report to {out_dir}: {e}")
    logger.info("report for %s written to %s (%d files)", bundle.experiment_id, out_dir, len(written))
    return written


def load_summary(out_dir: str) -> dict:
    return load_json_document(os.path.join(out_dir, "summary.json"))
