import logging
import threading
from collections import OrderedDict
from logging.handlers import RotatingFileHandler
from typing import Any, Callable, Hashable, Optional

"""
ユーティリティモジュール。
- `AppConstants` : 数値計算・学習・ハーネスで共有する定数
- `LRUCache` : スレッドセーフな LRU キャッシュ（演算子行列のキャッシュ用）
- 例外クラス階層と `setup_logging`
"""


# アプリケーション定数
class AppConstants:
    """アプリケーション全体で使用する定数"""

    # 幾何・離散化
    MIN_SMOOTH_NODES = 16
    AREA_TOLERANCE = 1e-14

    # 求積
    DEFAULT_KR_ORDER = 6
    NEAR_BAND_FACTOR = 3.0  # δ_near = 3 × 最大節点間隔
    ON_BOUNDARY_TOLERANCE = 1e-12

    # 特殊関数
    BESSEL_SERIES_LIMIT = 12.0
    BESSEL_SERIES_TERMS = 60
    BESSEL_ASYMPTOTIC_TERMS = 20

    # 学習
    DEFAULT_LR = 1e-3
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    DIVERGENCE_THRESHOLD = 1e6
    DEFAULT_LOG_EVERY = 500

    # 作用素学習
    DEFAULT_SAMPLES_PER_EPOCH = 16
    DEFAULT_K_POOL_SIZE = 64
    DEFAULT_TRIANGLE_MEMBERS = 80
    DEFAULT_RESAMPLE_EVERY = 500
    OPERATOR_CACHE_SIZE = 128

    # ハーネス
    DEFAULT_WORKERS = 1
    DEFAULT_OUT_DIR = "results"
    LOG_FILE = "binet.log"
    LOG_MAX_BYTES = 1024 * 1024 * 5
    LOG_BACKUP_COUNT = 3


class BinetError(Exception):
    """本パッケージが送出する例外の基底クラス"""


class ConfigError(BinetError, ValueError):
    """設定ファイル・CLI引数の検証エラー"""


class GeometryError(BinetError, ValueError):
    """境界形状の指定や離散化の前提条件違反"""


class QuadratureError(BinetError, ValueError):
    """演算子行列の組み立てに関する前提条件違反"""


class DivergenceError(BinetError, RuntimeError):
    """損失が非有限値になった、または発散閾値を超えた"""


class LRUCache(OrderedDict):
    """容量制限付きのキャッシュ(Least Recently Used)。

    試行をスレッドで並列実行するため、読み書きはロックで保護する。
    """

    def __init__(self, maxsize=AppConstants.OPERATOR_CACHE_SIZE):
        super().__init__()
        self.maxsize = maxsize
        self.hits = 0
        self.misses = 0
        self._lock = threading.RLock()

    def __setitem__(self, key, value):
        with self._lock:
            if key in self:
                self.move_to_end(key)
            super().__setitem__(key, value)
            if len(self) > self.maxsize:
                self.popitem(last=False)

    def get_or_create(self, key: Hashable, factory: Callable[[], Any]) -> Any:
        """キーが無ければ `factory()` で値を作って登録し、あれば最近使用扱いにして返す。"""
        with self._lock:
            if key in self:
                self.hits += 1
                self.move_to_end(key)
                return super().__getitem__(key)
            self.misses += 1
        # 組み立ては重いのでロック外で行う（同じキーの重複作成は許容）
        value = factory()
        self[key] = value
        return value


def setup_logging(log_file: Optional[str] = AppConstants.LOG_FILE,
                  console_level: int = logging.WARNING) -> logging.Logger:
    """ルートロガーにファイル出力（ローテーション付き）とコンソール出力を設定する。

    Args:
        log_file: ログファイルのパス（None ならファイル出力しない）
        console_level: コンソールに出すログの最低レベル

    Returns:
        設定済みのルートロガー
    """
    logger = logging.getLogger()
    logger.setLevel(logging.INFO)
    log_formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    if logger.hasHandlers():
        logger.handlers.clear()

    if log_file:
        file_handler = RotatingFileHandler(log_file, maxBytes=AppConstants.LOG_MAX_BYTES,
                                           backupCount=AppConstants.LOG_BACKUP_COUNT, encoding='utf-8')
        file_handler.setFormatter(log_formatter)
        file_handler.setLevel(logging.INFO)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(log_formatter)
    console_handler.setLevel(console_level)
    logger.addHandler(console_handler)
    return logger
