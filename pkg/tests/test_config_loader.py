from __future__ import annotations

import pytest

from app.config_loader import (
    get_config,
    load_experiment,
    lookup_oracle_constants,
    parse_experiment,
    save_oracle_constants,
)
from app.exceptions import ConfigInvalid, MissingRun


def _raw(**overrides) -> dict:
    raw = {"p": 4.0, "d": 1, "L": 6.0, "n": 64, "dt": 0.01, "T": 0.1, "init": {"type": "bump"}}
    raw.update(overrides)
    return raw


class TestExperimentSchema:
    def test_defaults(self):
        cfg = parse_experiment(_raw())
        assert cfg.particles.N == 100_000
        assert cfg.delta is None and cfg.R is None
        assert cfg.snapshot_every == 50

    @pytest.mark.parametrize(
        "overrides, field_path",
        [
            ({"p": 1.5}, "p"),
            ({"d": 3}, "d"),
            ({"n": 63}, "n"),
            ({"particles": {"N": -1}}, "particles.N"),
            ({"init": {"type": "spline"}}, "init.type"),
            ({"colour": "red"}, "colour"),
        ],
    )
    def test_violations_name_the_field(self, overrides, field_path):
        with pytest.raises(ConfigInvalid) as info:
            parse_experiment(_raw(**overrides))
        assert info.value.field_path == field_path

    def test_dt_beyond_horizon(self):
        with pytest.raises(ConfigInvalid):
            parse_experiment(_raw(dt=1.0, T=0.5))

    def test_problem_box_check(self):
        problem = parse_experiment(_raw(L=2.0)).problem(R=1.0, delta=0.0)
        with pytest.raises(ConfigInvalid) as info:
            problem.check_box(c_support=2.0)
        assert info.value.field_path == "L"

    def test_prox_config_merges_defaults(self):
        prox = parse_experiment(_raw()).prox_config(1e-9, {"fixed_point_damping": 0.25})
        assert prox.delta == 1e-9
        assert prox.fixed_point_damping == 0.25


class TestFiles:
    def test_missing_experiment(self, tmp_path):
        with pytest.raises(MissingRun):
            load_experiment(tmp_path / "absent.json")

    def test_json_experiment(self, write_experiment):
        cfg = load_experiment(write_experiment())
        assert cfg.init.type == "barenblatt"
        assert cfg.particles.seed == 7

    def test_global_settings(self):
        settings = get_config()
        assert {"global", "paths", "solver", "particles", "verification"} <= set(settings)

    def test_oracle_constants_merge(self, tmp_path):
        path = tmp_path / "constants.json"
        save_oracle_constants([{"p": 4.0, "d": 1, "C_support": 2.0}], path)
        save_oracle_constants([{"p": 4.0, "d": 1, "C_support": 3.0}, {"p": 3.0, "d": 2, "C_support": 1.0}], path)
        assert lookup_oracle_constants(4.0, 1, path)["C_support"] == 3.0
        assert lookup_oracle_constants(3.0, 2, path)["C_support"] == 1.0
        assert lookup_oracle_constants(5.0, 1, path) is None
