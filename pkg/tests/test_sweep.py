"""Hyperparameter sweep: distributions, random search, N x K grid."""

import json

import numpy as np
import pytest

from aapm.config import ConfigError
from aapm.sweep import Distribution, SweepSpec, default_space, nk_grid, sweep
from tests.conftest import make_dataset, pipeline_config


class TestDistribution:
    def test_choice_parse_and_sample(self):
        dist = Distribution.parse("choice:1e-3,1e-4,5e-4")
        rng = np.random.default_rng(0)
        draws = {dist.sample(rng) for _ in range(50)}
        assert draws <= {1e-3, 1e-4, 5e-4}
        assert len(draws) > 1

    def test_uniform_bounds(self):
        dist = Distribution.parse("uniform:0,0.3")
        rng = np.random.default_rng(1)
        draws = [dist.sample(rng) for _ in range(200)]
        assert all(0.0 <= d <= 0.3 for d in draws)

    def test_log_uniform_integer_endpoints(self):
        dist = Distribution.parse("log_uniform:32,1024,8")
        rng = np.random.default_rng(2)
        draws = [dist.sample(rng) for _ in range(200)]
        assert all(isinstance(d, int) and 32 <= d <= 1024 for d in draws)
        # log-uniform: smaller values are as common as larger ones
        assert sum(d < 182 for d in draws) > 40  # geometric midpoint of [32, 1024]

    def test_bad_distribution_rejected(self):
        with pytest.raises(ConfigError):
            Distribution.parse("triangular:1,2,3")
        with pytest.raises(ConfigError):
            Distribution.parse("uniform:1")

    def test_default_space_covers_standard_table(self):
        space = default_space()
        assert set(space) == {
            "learning_rate", "d_model", "d_emb", "epochs", "hidden_layers",
            "dropout_rate", "batch_size", "eta", "window", "n_rounds", "top_k",
        }
        assert space["eta"].kind == "uniform" and space["eta"].values == (0.9, 1.0)
        assert space["window"].values == (1, 7, 15, 30, 45, 60, 90, 180)


class TestSweepSpec:
    def test_unknown_parameter_rejected(self):
        with pytest.raises(ConfigError):
            SweepSpec(params={"nonsense": Distribution("choice", (1,))})

    def test_unknown_objective_rejected(self):
        with pytest.raises(ConfigError):
            SweepSpec(params={}, objective="nope")

    def test_budget_positive(self):
        with pytest.raises(ConfigError):
            SweepSpec(params={}, budget=0)

    def test_from_file(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps({
            "objective": "ew_sharpe_val",
            "budget": 2,
            "params": {"window": "choice:1,2"},
        }))
        spec = SweepSpec.from_file(path)
        assert spec.budget == 2
        assert spec.params["window"].values == (1, 2)


@pytest.fixture(scope="module")
def sweep_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    data = make_dataset(root, n_assets=10, n_days=50, n_pretrain_days=15, seed=5)
    cfg = pipeline_config(root, data, **{"network.epochs": 3, "agent.top_k": 1})
    return root, cfg


class TestSweepRuns:
    def test_budget_one_reproducible(self, sweep_env):
        root, cfg = sweep_env
        spec = SweepSpec(
            params={"window": Distribution("choice", (1, 2, 3))},
            budget=1,
        )
        best1 = sweep(cfg, spec, root / "s1")
        best2 = sweep(cfg, spec, root / "s2")
        assert best1 == best2
        lines = (root / "s1" / "trials.csv").read_text().splitlines()
        assert lines[0] == "trial,seed,window,ew_sharpe_val"
        assert len(lines) == 2

    def test_degenerate_choice_identical_objectives(self, sweep_env):
        root, cfg = sweep_env
        spec = SweepSpec(
            params={"window": Distribution("choice", (2,))},
            budget=3,
        )
        sweep(cfg, spec, root / "degenerate")
        rows = (root / "degenerate" / "trials.csv").read_text().splitlines()[1:]
        objectives = {row.rsplit(",", 1)[1] for row in rows}
        assert len(objectives) == 1

    def test_grid_emits_table(self, sweep_env):
        root, cfg = sweep_env
        results = nk_grid(
            cfg, root / "grid", n_values=(1, 2), k_values=(1, 2), objective="ew_sharpe_val"
        )
        assert set(results) == {(1, 1), (1, 2), (2, 1), (2, 2)}
        lines = (root / "grid" / "grid.csv").read_text().splitlines()
        assert lines[0].endswith("1,2")
        assert len(lines) == 3
        assert all(np.isfinite(v) for v in results.values())
