import logging
import queue
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, List, Optional, Sequence

from core.utils import AppConstants

"""
試行の並列実行。
各試行は独立（シードだけが違う）なのでスレッドプールで回し、進捗はキューで通知する。
結果は完了順ではなく試行番号順に返す。
"""

logger = logging.getLogger(__name__)


def run_trials(
    trial_fn: Callable[[int, int], Any],
    seeds: Sequence[int],
    workers: int = AppConstants.DEFAULT_WORKERS,
    progress_queue: Optional['queue.Queue'] = None,
) -> List[Any]:
    """
    trial_fn(trial, seed) を全シードについて実行する。

    Args:
        trial_fn: 1試行を実行する関数（試行番号, シード）
        seeds: 試行ごとのシード
        workers: 同時に実行する試行数（1 なら呼び出しスレッドで順に実行）
        progress_queue: ('trial_progress', (完了数, 総数)) と ('trials_done', None) を受け取るキュー

    Returns:
        試行番号順の結果リスト
    """
    total = len(seeds)
    results: List[Any] = [None] * total
    done = 0
    logger.debug("running %d trials with %d workers", total, max(1, min(workers, total)))

    def report():
        if progress_queue is not None:
            progress_queue.put(('trial_progress', (done, total)))

    if workers <= 1 or total <= 1:
        for i, seed in enumerate(seeds):
            results[i] = trial_fn(i, seed)
            done += 1
            report()
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(trial_fn, i, seed): i for i, seed in enumerate(seeds)}
            for future in as_completed(futures):
                i = futures[future]
                results[i] = future.result()
                done += 1
                report()

    if progress_queue is not None:
        progress_queue.put(('trials_done', None))
    return results
