import json

import pytest

from screenlab.pipeline import ConfigError, ExperimentConfig, run_pipeline

FAST = {"primitives": {"density": {"n": 21}}, "solver": {"mesh": 21}, "simulation": {"n": 2000}, "seed": 4}


def _cfg(tmp_path, **kw):
    return dict(FAST, out=str(tmp_path), **kw)


def test_unknown_stage_names_its_position():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_mapping({"stages": ["solve", "bake"]})
    assert err.value.field == "stages[1]"


@pytest.mark.parametrize("raw,field", [({"colour": 1}, "colour"), ({"seed": -1}, "seed"),
                                       ({"simulation": {"n": 0}}, "simulation.n"),
                                       ({"solver": {"mesh": 2}}, "solver.mesh"),
                                       ({"tolerance_scale": 0}, "tolerance_scale"),
                                       ({"seed": None, "stages": ["simulate"]}, "seed")])
def test_config_errors_name_field(raw, field):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_mapping(raw)
    assert err.value.field == field


def test_solve_and_simulate_manifest(tmp_path):
    man = run_pipeline(_cfg(tmp_path, stages=["solve", "simulate"]))
    assert man.ok
    assert {"menu.csv", "dataset.csv"} <= set(man.artifacts)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["artifacts"] == man.artifacts


def test_rerun_reproduces_checksums(tmp_path):
    a = run_pipeline(_cfg(tmp_path / "a", stages=["solve", "simulate"]))
    b = run_pipeline(_cfg(tmp_path / "b", stages=["solve", "simulate"]))
    assert a.artifacts == b.artifacts
    assert a.config_hash == b.config_hash


def test_missing_upstream_is_planned(tmp_path):
    man = run_pipeline(_cfg(tmp_path, stages=["simulate"]))
    assert list(man.stages) == ["solve", "simulate"]


def test_bad_primitives_are_config_errors():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_mapping({"primitives": {"dimension": 3}})
    assert err.value.field == "primitives"


def test_failed_stage_skips_dependents(tmp_path):
    # a corrupt menu on disk makes simulate fail without rerunning solve
    (tmp_path / "menu.csv").write_text("# screenlab menu\ntheta1\n")
    man = run_pipeline(_cfg(tmp_path, stages=["simulate", "identify-linear"]))
    assert man.stages["simulate"] == "failed"
    assert man.stages["identify-linear"] == "skipped"
    assert man.errors["simulate"]["type"] == "ArtifactError"


def test_report_lists_earlier_stages(tmp_path):
    run_pipeline(_cfg(tmp_path, stages=["solve", "simulate"]))
    man = run_pipeline(_cfg(tmp_path, stages=["report"]))
    text = (tmp_path / "report.md").read_text()
    assert "solve" in text and "simulate" in text
    assert "menu.csv" in man.artifacts
