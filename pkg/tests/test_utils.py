import logging
from logging.handlers import RotatingFileHandler

from core.utils import (AppConstants, BinetError, ConfigError, DivergenceError, GeometryError, LRUCache,
                        QuadratureError, setup_logging)


class TestErrorHierarchy:
    def test_value_errors_stay_value_errors(self):
        for cls in (ConfigError, GeometryError, QuadratureError):
            assert issubclass(cls, BinetError)
            assert issubclass(cls, ValueError)

    def test_divergence_is_runtime_error(self):
        assert issubclass(DivergenceError, RuntimeError)
        assert issubclass(DivergenceError, BinetError)


class TestLRUCache:
    def test_evicts_least_recently_used(self):
        cache = LRUCache(maxsize=2)
        cache["a"] = 1
        cache["b"] = 2
        cache.get_or_create("a", lambda: 0)
        cache["c"] = 3
        assert "a" in cache and "c" in cache
        assert "b" not in cache

    def test_get_or_create_counts_hits_and_misses(self):
        cache = LRUCache(maxsize=4)
        calls = []

        def factory():
            calls.append(1)
            return "value"

        assert cache.get_or_create("k", factory) == "value"
        assert cache.get_or_create("k", factory) == "value"
        assert len(calls) == 1
        assert (cache.hits, cache.misses) == (1, 1)

    def test_default_capacity(self):
        assert LRUCache().maxsize == AppConstants.OPERATOR_CACHE_SIZE


class TestSetupLogging:
    def test_installs_file_and_console_handlers(self, tmp_path):
        root = logging.getLogger()
        saved = list(root.handlers)
        try:
            logger = setup_logging(str(tmp_path / "run.log"), console_level=logging.ERROR)
            kinds = {type(h) for h in logger.handlers}
            assert RotatingFileHandler in kinds
            console = [h for h in logger.handlers if type(h) is logging.StreamHandler]
            assert console[0].level == logging.ERROR
            logging.getLogger("binet.test").info("hello")
            for h in logger.handlers:
                h.flush()
            assert "hello" in (tmp_path / "run.log").read_text(encoding="utf-8")
        finally:
            for h in list(root.handlers):
                root.removeHandler(h)
                h.close()
            for h in saved:
                root.addHandler(h)

    def test_without_file(self):
        root = logging.getLogger()
        saved = list(root.handlers)
        try:
            logger = setup_logging(None)
            assert all(not isinstance(h, RotatingFileHandler) for h in logger.handlers)
        finally:
            for h in list(root.handlers):
                root.removeHandler(h)
            for h in saved:
                root.addHandler(h)
