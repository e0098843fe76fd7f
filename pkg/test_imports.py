#!/usr/bin/env python3
"""
依存関係のインポートテストスクリプト
すべてのモジュールが正常にインポートできるか確認します
"""

import sys
import os
import importlib

# プロジェクトルートをパスに追加
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# (表示名, モジュール名, 確認する属性)
STANDARD_MODULES = [
    ("queue", "queue", None),
    ("threading", "threading", None),
    ("concurrent.futures", "concurrent.futures", "ThreadPoolExecutor"),
    ("configparser", "configparser", None),
]

EXTERNAL_MODULES = [
    ("numpy", "numpy", "linalg"),
    ("scipy.sparse", "scipy.sparse", "kron"),
    ("scipy.interpolate", "scipy.interpolate", "RegularGridInterpolator"),
    ("scipy.special", "scipy.special", "xlogy"),
    ("pytest", "pytest", None),
]

PROJECT_MODULES = [
    ("core.utils", "core.utils", "AppConstants"),
    ("core.geometry", "core.geometry", "discretize"),
    ("core.special", "core.special", "hankel_h0"),
    ("core.kernels", "core.kernels", "greens"),
    ("core.quadrature", "core.quadrature", "assemble_boundary_operator"),
    ("core.network", "core.network", "DensityNetwork"),
    ("core.storage", "core.storage", "ConfigManager"),
    ("services.solver", "services.solver", "train"),
    ("services.families", "services.families", "WavenumberFamily"),
    ("services.ntk", "services.ntk", "empirical_kernel"),
    ("services.oracles", "services.oracles", "fd_reference_laplace"),
    ("services.workers", "services.workers", "run_trials"),
    ("services.experiments", "services.experiments", "run_experiment"),
    ("cli.app", "cli.app", "App"),
]


def test_import(label, module_name, attribute=None):
    """モジュールのインポートをテストする"""
    try:
        module = importlib.import_module(module_name)
        if attribute is not None and not hasattr(module, attribute):
            raise ImportError(f"'{attribute}' が見つかりません")
        print(f"✓ {label}: OK")
        return True
    except ImportError as e:
        print(f"✗ {label}: インポートエラー - {e}")
        return False
    except Exception as e:
        print(f"✗ {label}: エラー - {e}")
        return False


def main():
    print("=" * 60)
    print("依存関係のインポートテスト")
    print("=" * 60)
    print()

    results = []
    for title, modules in (("【標準ライブラリ】", STANDARD_MODULES),
                           ("【外部ライブラリ】", EXTERNAL_MODULES),
                           ("【プロジェクトモジュール】", PROJECT_MODULES)):
        print(title)
        results.extend(test_import(*entry) for entry in modules)
        print()

    # 結果サマリー
    print("=" * 60)
    passed = sum(results)
    total = len(results)
    print(f"結果: {passed}/{total} テストが成功しました")

    if passed == total:
        print("✅ すべての依存関係が正常にインストールされています！")
        return 0
    else:
        print("⚠️  一部の依存関係が不足しています。")
        print("   以下のコマンドでインストールしてください：")
        print("   python3 -m pip install -r requirements.txt")
        return 1


if __name__ == "__main__":
    sys.exit(main())
