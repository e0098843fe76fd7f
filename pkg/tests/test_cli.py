import io
import json
import logging
import os

import pytest

from cli.app import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, App
from core.storage import ConfigManager

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture(autouse=True)
def restore_root_handlers():
    root = logging.getLogger()
    saved = list(root.handlers)
    yield
    for handler in list(root.handlers):
        if handler not in saved:
            root.removeHandler(handler)
    for handler in saved:
        if handler not in root.handlers:
            root.addHandler(handler)


@pytest.fixture
def app(tmp_path, monkeypatch):
    monkeypatch.delenv("BINET_WORKERS", raising=False)
    monkeypatch.setenv("BINET_OUT_DIR", str(tmp_path / "results"))
    ini = tmp_path / "config.ini"
    ini.write_text("[Logging]\nfile =\nlevel = WARNING\n", encoding="utf-8")
    return App(config_manager=ConfigManager(str(ini)), stream=io.StringIO())


def _write_config(tmp_path, **overrides):
    data = {
        "id": "cli-solve",
        "task": "solve",
        "geometry": {"kind": "circle", "nodes": 32},
        "problem": {"solution": "exp_sin", "solution_params": {"a": 1.0}},
        "network": {"arch": "mlp", "width": 6, "depth": 1, "activation": "tanh"},
        "training": {"epochs": 5, "log_every": 0},
        "evaluation": {"region": "lattice", "resolution": 9},
        "trials": 1,
        "scaled_acceptance": [{"metric": "median_rel_l2", "op": "<=", "value": 0.0}],
    }
    data.update(overrides)
    path = tmp_path / f"{data['id']}.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestValidate:
    def test_shipped_config(self, app):
        assert app.main(["validate", os.path.join(CONFIG_DIR, "laplace-smooth-a4.json")]) == EXIT_OK
        assert app.stream.getvalue().startswith("laplace-smooth-a4: ok (solve, 5 trial(s))")

    def test_bad_config(self, app, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"id": "broken", "task": "solve", "training": {"epoch": 1}}', encoding="utf-8")
        assert app.main(["validate", str(path)]) == EXIT_CONFIG

    def test_missing_file(self, app, tmp_path):
        assert app.main(["validate", str(tmp_path / "absent.json")]) == EXIT_CONFIG

    def test_usage_error(self, app):
        assert app.main([]) == EXIT_CONFIG


class TestListExperiments:
    def test_lists_every_config(self, app):
        assert app.main(["list-experiments", "--configs", CONFIG_DIR]) == EXIT_OK
        lines = app.stream.getvalue().strip().splitlines()
        assert len(lines) == 14
        assert any(line.startswith("quadrature-sanity") for line in lines)


class TestRun:
    def test_quadrature_sanity_passes(self, app, tmp_path):
        out = tmp_path / "sanity"
        code = app.main(["run", os.path.join(CONFIG_DIR, "quadrature-sanity.json"), "--out", str(out)])
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["passed"] is True
        assert (out / "table.csv").exists()

    def test_failed_threshold(self, app, tmp_path):
        code = app.main(["run", _write_config(tmp_path)])
        assert code == EXIT_ACCEPTANCE
        assert (tmp_path / "results" / "cli-solve" / "summary.json").exists()
        assert "[FAIL] median_rel_l2" in app.stream.getvalue()

    def test_all_trials_diverged(self, app, tmp_path):
        path = _write_config(tmp_path, id="cli-diverge",
                             training={"epochs": 5, "log_every": 0, "divergence_threshold": 1e-12})
        assert app.main(["run", path, "--seed", "7"]) == EXIT_RUNTIME
        summary = json.loads((tmp_path / "results" / "cli-diverge" / "summary.json").read_text(encoding="utf-8"))
        assert summary["trials"][0]["diverged"] is True
        assert summary["trials"][0]["seed"] == 7
