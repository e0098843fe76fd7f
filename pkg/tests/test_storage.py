import logging
import math

import numpy as np
import pytest

from core.network import RESNET, NetworkSpec, init_network
from core.storage import (ConfigManager, ResultBundle, TrialRecord, emit_report, load_checkpoint,
                          load_json_document, load_summary, save_checkpoint)
from core.utils import ConfigError


@pytest.fixture
def ini_file(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[Output]\nout_dir = from_ini\n\n[Runtime]\nworkers = 3\n\n"
                    "[Logging]\nfile =\nlevel = info\n\n[Quadrature]\nkr_order = 10\n", encoding="utf-8")
    return str(path)


def _bundle(**overrides):
    values = dict(
        experiment_id="demo", mode="smoke", config={"id": "demo", "nested": {"k": np.float64(4.0)}},
        trials=[TrialRecord(0, 100, 0.01, False, 20, 1e-4, wall_time=1.5),
                TrialRecord(1, 101, None, True, 3, float("nan"), wall_time=0.2)],
        metrics={"median_rel_l2": 0.01, "diverged_trials": np.int64(1)},
        loss_history=[1.0, 0.5, 0.25],
    )
    values.update(overrides)
    return ResultBundle(**values)


class TestConfigManager:
    def test_reads_ini(self, ini_file, monkeypatch):
        monkeypatch.delenv("BINET_OUT_DIR", raising=False)
        monkeypatch.delenv("BINET_WORKERS", raising=False)
        config = ConfigManager(ini_file)
        assert config.get_out_dir() == "from_ini"
        assert config.get_workers() == 3
        assert config.get_log_file() is None
        assert config.get_log_level() == logging.INFO
        assert config.get_kr_order() == 10

    def test_environment_wins(self, ini_file, monkeypatch):
        monkeypatch.setenv("BINET_OUT_DIR", "  from_env ")
        monkeypatch.setenv("BINET_WORKERS", "2")
        config = ConfigManager(ini_file)
        assert config.get_out_dir() == "from_env"
        assert config.get_workers() == 2

    def test_defaults_without_file(self, tmp_path, monkeypatch):
        monkeypatch.delenv("BINET_OUT_DIR", raising=False)
        monkeypatch.delenv("BINET_WORKERS", raising=False)
        config = ConfigManager(str(tmp_path / "missing.ini"))
        assert config.get_out_dir() == "results"
        assert config.get_workers() == 1
        assert config.get_log_file() == "binet.log"

    def test_invalid_workers(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BINET_WORKERS", "0")
        with pytest.raises(ConfigError):
            ConfigManager(str(tmp_path / "missing.ini")).get_workers()


class TestJsonDocuments:
    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_json_document(str(path))

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_json_document(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_json_document(str(tmp_path / "nope.json"))


class TestCheckpoint:
    def test_restores_outputs(self, tmp_path, rng):
        net = init_network(NetworkSpec(arch=RESNET, width=5, depth=2), seed=9)
        path = save_checkpoint(net, str(tmp_path / "net.json"))
        restored = load_checkpoint(path)
        x = rng.normal(size=(6, 2))
        np.testing.assert_array_equal(restored(x), net(x))
        assert restored.spec == net.spec

    def test_rejects_foreign_format(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "something-else", "version": 1}', encoding="utf-8")
        with pytest.raises(ConfigError):
            load_checkpoint(str(path))


class TestEmitReport:
    def test_writes_expected_files(self, tmp_path):
        bundle = _bundle(table=[{"width": 64, "drift": 0.5}])
        written = emit_report(bundle, str(tmp_path / "out"))
        names = sorted(p.split("/")[-1] for p in written)
        assert names == ["errors.csv", "loss_history.csv", "summary.json", "table.csv"]
        assert (tmp_path / "out" / "loss_history.csv").read_text().splitlines() == \
            ["epoch,loss", "1,1", "2,0.5", "3,0.25"]
        assert (tmp_path / "out" / "errors.csv").read_text().splitlines()[2] == "1,"

    def test_checkpoint_written_with_report(self, tmp_path, rng):
        net = init_network(NetworkSpec(width=4, depth=1), seed=2)
        written = emit_report(_bundle(checkpoint=net), str(tmp_path))
        assert str(tmp_path / "checkpoint.json") in written
        x = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(load_checkpoint(str(tmp_path / "checkpoint.json"))(x), net(x))

    def test_summary_is_json_clean(self, tmp_path):
        emit_report(_bundle(), str(tmp_path))
        summary = load_summary(str(tmp_path))
        assert summary["experiment"] == "demo"
        assert summary["metrics"]["diverged_trials"] == 1
        assert summary["trials"][1]["final_loss"] is None
        assert summary["config"]["nested"]["k"] == 4.0
        assert summary["timing"]["trial_seconds"] == [1.5, 0.2]

    def test_field_csv(self, tmp_path):
        field = {"x": np.array([0.1]), "y": np.array([0.2]), "re_u": np.array([1.0]),
                 "im_u": np.array([0.0]), "abs_err": np.array([1e-3]), "flag": np.array([False])}
        emit_report(_bundle(field_data=field), str(tmp_path))
        lines = (tmp_path / "field.csv").read_text().splitlines()
        assert lines[0] == "x,y,re_u,im_u,abs_err,flag"
        assert lines[1].endswith(",0")

    def test_identical_bundles_give_identical_files(self, tmp_path):
        emit_report(_bundle(), str(tmp_path / "a"))
        emit_report(_bundle(), str(tmp_path / "b"))
        for name in ("errors.csv", "loss_history.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_requires_trials(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(_bundle(trials=[]), str(tmp_path))

    def test_nan_metric_becomes_null(self, tmp_path):
        emit_report(_bundle(metrics={"median_rel_l2": math.nan}), str(tmp_path))
        assert load_summary(str(tmp_path))["metrics"]["median_rel_l2"] is None
