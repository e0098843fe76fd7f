import os
import queue

import numpy as np
import pytest

from core.geometry import CurveSpec, make_curve
from core.network import MLP, NetworkSpec, init_network
from core.storage import ConfigManager, ResultBundle, TrialRecord
from core.utils import ConfigError
from services.experiments import (TASK_METRICS, AcceptanceRule, EvaluationSection, ExperimentConfig,
                                  apply_acceptance, evaluation_targets, list_experiments,
                                  load_experiment_config, quadrature_sanity_rows, run_experiment,
                                  triangle_error)
from services.families import TriangleFamily

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture
def settings(tmp_path, monkeypatch):
    monkeypatch.delenv("BINET_WORKERS", raising=False)
    monkeypatch.delenv("BINET_OUT_DIR", raising=False)
    return ConfigManager(str(tmp_path / "none.ini"))


def _solve_dict(**overrides):
    data = {
        "id": "tiny-solve",
        "task": "solve",
        "pde": {"name": "laplace2d"},
        "geometry": {"kind": "circle", "nodes": 32},
        "problem": {"potential": "dlp", "side": "interior", "solution": "exp_sin", "solution_params": {"a": 1.0}},
        "network": {"arch": "mlp", "width": 8, "depth": 2, "activation": "tanh"},
        "training": {"epochs": 30, "lr": 0.01, "log_every": 10},
        "evaluation": {"region": "lattice", "resolution": 9},
        "trials": 2,
        "seed": 3,
        "scaled_acceptance": [{"metric": "median_rel_l2", "op": "<=", "value": 50.0}],
    }
    data.update(overrides)
    return data


def _triangle_dict(**overrides):
    data = {
        "id": "tiny-triangle", "task": "operator-triangle",
        "geometry": {"kind": "triangle", "nodes": 96},
        "problem": {"potential": "slp", "side": "interior"},
        "network": {"arch": "mlp", "width": 8, "depth": 1, "activation": "tanh"},
        "training": {"epochs": 2, "log_every": 0},
        "evaluation": {"region": "random", "count": 20},
        "operator": {"members": 2, "resample_every": 2, "test_count": 3},
        "trials": 1,
    }
    data.update(overrides)
    return data


class TestConfigParsing:
    def test_shipped_configs_validate(self):
        rows = list_experiments(CONFIG_DIR)
        assert len(rows) == 14
        ids = [row[0] for row in rows]
        assert "laplace-smooth-a4" in ids and "ntk-drift-study" in ids

    @pytest.mark.parametrize("name", sorted(os.listdir(CONFIG_DIR)))
    def test_round_trip(self, name):
        config = load_experiment_config(os.path.join(CONFIG_DIR, name))
        assert ExperimentConfig.from_dict(config.to_dict()) == config
        assert config.id == name[:-len(".json")]

    def test_unknown_key_reports_dotted_path(self):
        with pytest.raises(ConfigError, match=r"^training\.epoch: unknown key"):
            ExperimentConfig.from_dict(_solve_dict(training={"epoch": 10}))

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="^solver: unknown key"):
            ExperimentConfig.from_dict(_solve_dict(solver="adam"))

    def test_missing_required_key(self):
        data = _solve_dict()
        del data["task"]
        with pytest.raises(ConfigError, match="task"):
            ExperimentConfig.from_dict(data)

    @pytest.mark.parametrize("overrides", [
        {"task": "train-everything"},
        {"trials": 0},
        {"pde": {"name": "helmholtz2d"}},
        {"pde": {"name": "stokes2d"}},
        {"problem": {"potential": "dlp", "side": "interior"}},
        {"problem": {"solution": "exp_sin", "reference": "fd", "boundary": "nonsmooth"}},
        {"geometry": {"kind": "circle", "nodes": 8}},
        {"network": {"arch": "resnet", "depth": 0}},
        {"evaluation": {"region": "annulus"}},
        {"acceptance": [{"metric": "lambda_min_dlp", "op": ">", "value": 0}]},
        {"acceptance": [{"metric": "median_rel_l2", "op": "~", "value": 0}]},
    ])
    def test_invalid_configs(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(_solve_dict(**overrides))


class TestAcceptance:
    def test_rule_check(self):
        rule = AcceptanceRule("median_rel_l2", "<=", 0.01)
        assert rule.check({"median_rel_l2": 0.005})["passed"]
        assert not rule.check({"median_rel_l2": 0.02})["passed"]
        assert not rule.check({"median_rel_l2": None})["passed"]
        assert not rule.check({"median_rel_l2": float("nan")})["passed"]

    def test_all_diverged_fails(self):
        bundle = ResultBundle(experiment_id="x", mode="scaled", config={},
                              trials=[TrialRecord(0, 0, None, True, 1, None)], metrics={"diverged_trials": 1})
        apply_acceptance(bundle, [AcceptanceRule("diverged_trials", ">=", 0)])
        assert bundle.metrics["all_diverged"]
        assert not bundle.passed


class TestEvaluationTargets:
    def test_lattice_stays_inside(self):
        square = make_curve(CurveSpec(kind="square"))
        pts = evaluation_targets(EvaluationSection(region="lattice", resolution=11), square, "interior")
        assert len(pts) == 81
        assert np.all(square.contains(pts))

    def test_annulus_outside_star(self):
        star = make_curve(CurveSpec(kind="star"))
        pts = evaluation_targets(EvaluationSection(region="annulus", r_in=0.7, r_out=2.0, resolution=5),
                                 star, "exterior")
        assert len(pts) == 5 * 20
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1).min(), 0.7)

    def test_random_is_seeded(self, unit_circle):
        ev = EvaluationSection(region="random", count=50, seed=1)
        first = evaluation_targets(ev, unit_circle, "interior")
        assert first.shape == (50, 2)
        np.testing.assert_array_equal(first, evaluation_targets(ev, unit_circle, "interior"))

    def test_empty_region(self, unit_circle):
        ev = EvaluationSection(region="annulus", r_in=0.1, r_out=0.5, resolution=4)
        with pytest.raises(ConfigError):
            evaluation_targets(ev, unit_circle, "exterior")

    def test_random_redraws_outside_band(self):
        square = make_curve(CurveSpec(kind="square"))
        ev = EvaluationSection(region="random", count=50, seed=4)
        pts = evaluation_targets(ev, square, "interior", min_distance=0.3)
        assert pts.shape == (50, 2)
        assert np.all(square.distance(pts) > 0.3)


class TestTriangleError:
    net = init_network(NetworkSpec(arch=MLP, in_dim=5, width=8, depth=1, activation="tanh"), seed=0)
    ev = EvaluationSection(region="random", count=20)

    def test_thin_triangle_is_unevaluable(self, caplog):
        """近傍帯が内接円より太い三角形は誤差を出さない"""
        problem = TriangleFamily(nodes=12).problem(1.0, 0.5, 0.05)
        with caplog.at_level("WARNING"):
            assert triangle_error(problem, self.net, self.ev) is None
        assert "near-boundary band" in caplog.text

    def test_regular_triangle_is_scored(self):
        problem = TriangleFamily(nodes=96).problem(1.0, 0.5, 0.8)
        err = triangle_error(problem, self.net, self.ev)
        assert err is not None and np.isfinite(err) and err > 0.0


class TestQuadratureSanity:
    def test_all_rows_pass(self):
        rows = quadrature_sanity_rows()
        failed = [(r["curve"], r["check"], r["error"]) for r in rows if not r["passed"]]
        assert failed == []
        checks = {r["check"] for r in rows}
        assert {"dlp_gauss_interior", "dlp_gauss_boundary", "dlp_gauss_exterior", "slp_center",
                "jump_interior", "jump_exterior"} <= checks


class TestRunExperiment:
    def test_solve(self, settings):
        progress = queue.Queue()
        config = ExperimentConfig.from_dict(_solve_dict())
        bundle = run_experiment(config, settings=settings, progress_queue=progress)
        assert bundle.mode == "scaled"
        assert [t.seed for t in bundle.trials] == [3, 4]
        assert len(bundle.loss_history) == 30
        assert bundle.field_data is not None
        assert set(TASK_METRICS["solve"]) <= set(bundle.metrics)
        assert bundle.passed
        messages = []
        while not progress.empty():
            messages.append(progress.get()[0])
        assert messages == ["trial_progress", "trial_progress", "trials_done"]

    def test_seed_override_is_deterministic(self, settings):
        config = ExperimentConfig.from_dict(_solve_dict(trials=1))
        first = run_experiment(config, seed=11, settings=settings)
        second = run_experiment(config, seed=11, settings=settings)
        assert first.trials[0].seed == 11
        assert first.loss_history == second.loss_history

    def test_compare_potentials(self, settings):
        config = ExperimentConfig.from_dict(_solve_dict(
            id="tiny-compare", task="compare-potentials", trials=1,
            comparison={"compare_epoch": 10}, scaled_acceptance=[]))
        bundle = run_experiment(config, settings=settings)
        assert {row["potential"] for row in bundle.table} == {"dlp", "slp"}
        assert bundle.metrics["dlp_slp_loss_ratio"] is not None
        assert [t.trial for t in bundle.trials] == [0, 1]

    def test_wavenumber_operator(self, settings):
        config = ExperimentConfig.from_dict({
            "id": "tiny-k", "task": "operator-wavenumber",
            "pde": {"name": "helmholtz2d"},
            "geometry": {"kind": "star", "nodes": 64},
            "problem": {"potential": "dlp", "side": "exterior"},
            "network": {"arch": "mlp", "width": 8, "depth": 1, "activation": "sigmoid"},
            "training": {"epochs": 3, "log_every": 0},
            "evaluation": {"region": "annulus", "r_in": 0.8, "r_out": 1.5, "resolution": 5},
            "operator": {"k_ranges": [[1.0, 2.0]], "test_values": [1.5, 2.5], "samples_per_epoch": 2,
                         "pool_size": 4},
            "trials": 1,
        })
        bundle = run_experiment(config, settings=settings)
        assert [row["extrapolation"] for row in bundle.table] == [False, True]
        assert bundle.metrics["max_rel_l2"] == bundle.table[0]["rel_l2"]
        assert bundle.metrics["held_out_max_rel_l2"] is None

    def test_triangle_operator(self, settings):
        config = ExperimentConfig.from_dict(_triangle_dict())
        bundle = run_experiment(config, settings=settings)
        assert len(bundle.table) == 3
        evaluated = [row["rel_l2"] for row in bundle.table if row["rel_l2"] is not None]
        assert bundle.metrics["unevaluable_triangles"] == 3 - len(evaluated)
        fraction = bundle.metrics["fraction_below_1e-2"]
        assert fraction is None or 0.0 <= fraction <= 1.0

    def test_triangle_operator_independent_of_workers(self, settings, tmp_path, monkeypatch):
        """並列に試行しても各試行の三角形列は変わらない"""
        config = ExperimentConfig.from_dict(_triangle_dict(trials=3, training={"epochs": 5, "log_every": 0}))
        serial = run_experiment(config, settings=settings)
        monkeypatch.setenv("BINET_WORKERS", "4")
        parallel = run_experiment(config, settings=ConfigManager(str(tmp_path / "none.ini")))
        assert [(t.final_loss, t.rel_l2) for t in parallel.trials] == \
            [(t.final_loss, t.rel_l2) for t in serial.trials]
        assert parallel.table == serial.table
        assert parallel.loss_history == serial.loss_history

    def test_checkpoint_is_first_converged_net(self, settings):
        bundle = run_experiment(ExperimentConfig.from_dict(_solve_dict(trials=1)), settings=settings)
        assert bundle.checkpoint is not None
        assert bundle.checkpoint.spec.width == 8

    def test_quadrature_sanity_task(self, settings):
        bundle = run_experiment(load_experiment_config(os.path.join(CONFIG_DIR, "quadrature-sanity.json")),
                                settings=settings)
        assert bundle.metrics["failed_rows"] == 0
        assert bundle.passed

    def test_ntk_width(self, settings):
        config = ExperimentConfig.from_dict({
            "id": "tiny-ntk", "task": "ntk-width",
            "geometry": {"kind": "circle", "nodes": 16},
            "ntk": {"widths": [8, 1024], "depth": 2, "nodes": 16, "trials": 3, "definiteness_nodes": 32,
                    "mc_points": 2, "mc_samples": 4000},
            "trials": 1,
            "scaled_acceptance": [{"metric": "depth0_deviation", "op": "<=", "value": 1e-10},
                                  {"metric": "lambda_min_dlp", "op": ">", "value": 0.0}],
        })
        bundle = run_experiment(config, settings=settings)
        assert [row["width"] for row in bundle.table] == [8, 1024]
        assert bundle.metrics["width_monotone"] == 1.0
        assert bundle.passed

    def test_ntk_drift(self, settings):
        config = ExperimentConfig.from_dict({
            "id": "tiny-drift", "task": "ntk-drift",
            "geometry": {"kind": "circle", "nodes": 16},
            "problem": {"solution": "exp_sin", "solution_params": {"a": 1.0}},
            "ntk": {"widths": [16, 256], "depth": 1, "checkpoints": [0, 5], "lr_scale": 0.5,
                    "linearization_steps": 10},
            "trials": 1,
        })
        bundle = run_experiment(config, settings=settings)
        assert {"drift_t0", "drift_t5"} <= set(bundle.table[0])
        assert bundle.table[0]["drift_t0"] == 0.0
        assert bundle.metrics["linearization_gap"] is not None
        assert len(bundle.loss_history) == 2
