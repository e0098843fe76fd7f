import argparse
import logging
import os
import queue
import sys
import threading
from typing import List, Optional

from core.storage import ConfigManager, emit_report
from core.utils import BinetError, ConfigError, setup_logging
from services.experiments import list_experiments, load_experiment_config, run_experiment

"""
コマンドラインアプリケーション。
- binet run <config.json> [--out DIR] [--faithful] [--seed N]
- binet validate <config.json>
- binet list-experiments [--configs DIR]

終了コード: 0 合格、1 設定エラー、2 閾値不合格、3 実行時エラー
"""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ACCEPTANCE = 2
EXIT_RUNTIME = 3

DEFAULT_CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


class App:
    """binet コマンドの本体。サブコマンドごとに cmd_* メソッドを持つ。"""

    def __init__(self, config_manager: Optional[ConfigManager] = None, stream=None):
        self.config_manager = config_manager or ConfigManager()
        self.stream = stream or sys.stdout
        self.logger = logging.getLogger(__name__)
        self.ui_queue: 'queue.Queue' = queue.Queue()

    def _setup_logging(self, verbose: bool) -> None:
        level = logging.INFO if verbose else self.config_manager.get_log_level()
        setup_logging(self.config_manager.get_log_file(), console_level=level)

    def _print(self, text: str) -> None:
        print(text, file=self.stream)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="binet", description="Boundary-integral neural PDE solver")
        parser.add_argument("-v", "--verbose", action="store_true", help="log progress to the console")
        sub = parser.add_subparsers(dest="command", required=True)

        run = sub.add_parser("run", help="run an experiment and write its report")
        run.add_argument("config", help="experiment config (JSON)")
        run.add_argument("--out", default=None, help="output directory (default: <out_dir>/<experiment id>)")
        run.add_argument("--faithful", action="store_true", help="use the full-length training schedule")
        run.add_argument("--seed", type=int, default=None, help="override the base seed")

        validate = sub.add_parser("validate", help="validate an experiment config")
        validate.add_argument("config", help="experiment config (JSON)")

        listing = sub.add_parser("list-experiments", help="list shipped experiment configs")
        listing.add_argument("--configs", default=DEFAULT_CONFIG_DIR, help="config directory")
        return parser

    def main(self, argv: Optional[List[str]] = None) -> int:
        parser = self.build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code == 0 else EXIT_CONFIG
        try:
            self._setup_logging(args.verbose)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG

        commands = {"run": self.cmd_run, "validate": self.cmd_validate,
                    "list-experiments": self.cmd_list_experiments}
        try:
            return commands[args.command](args)
        except ConfigError as e:
            self.logger.error("config error: %s", e)
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except (BinetError, OSError) as e:
            self.logger.error("run failed: %s", e, exc_info=True)
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        except Exception as e:
            self.logger.critical("unexpected error: %s", e, exc_info=True)
            print(f"unexpected error: {e}", file=sys.stderr)
            return EXIT_RUNTIME

    def cmd_validate(self, args) -> int:
        config = load_experiment_config(args.config)
        self._print(f"{config.id}: ok ({config.task}, {config.trials} trial(s))")
        return EXIT_OK

    def cmd_list_experiments(self, args) -> int:
        for experiment_id, task, description in list_experiments(args.configs):
            self._print(f"{experiment_id:<24} {task:<20} {description}")
        return EXIT_OK

    def cmd_run(self, args) -> int:
        config = load_experiment_config(args.config)
        out_dir = args.out or os.path.join(self.config_manager.get_out_dir(), config.id)
        result = {}

        def worker():
            try:
                result["bundle"] = run_experiment(config, faithful=args.faithful, seed=args.seed,
                                                  settings=self.config_manager, progress_queue=self.ui_queue)
            except BaseException as e:
                result["error"] = e
            finally:
                self.ui_queue.put(('run_done', None))

        thread = threading.Thread(target=worker, daemon=True)
        thread.start()
        self._process_ui_queue()
        thread.join()
        if "error" in result:
            raise result["error"]

        bundle = result["bundle"]
        emit_report(bundle, out_dir)
        for row in bundle.acceptance:
            mark = "PASS" if row["passed"] else "FAIL"
            self._print(f"  [{mark}] {row['metric']} {row['op']} {row['value']:g} (actual {row['actual']})")
        self._print(f"{bundle.experiment_id}: {'passed' if bundle.passed else 'failed'} -> {out_dir}")
        if bundle.metrics.get("all_diverged"):
            self.logger.error("%s: every trial diverged", bundle.experiment_id)
            return EXIT_RUNTIME
        return EXIT_OK if bundle.passed else EXIT_ACCEPTANCE

    def _process_ui_queue(self) -> None:
        """実験スレッドが終わるまで進捗キューを処理する。"""
        while True:
            task_type, data = self.ui_queue.get()
            if task_type == 'trial_progress':
                done, total = data
                print(f"trial {done}/{total} finished", file=sys.stderr)
            elif task_type == 'trials_done':
                self.logger.info("all trials finished")
            elif task_type == 'run_done':
                return


def main(argv: Optional[List[str]] = None) -> int:
    return App().main(argv)
