import json

import numpy as np
import pytest

from screenlab import io
from screenlab.ident_bunching import RadonEstimate
from screenlab.simulate import Dataset, sample_market


@pytest.fixture
def dataset(small_menu):
    prim, menu = small_menu
    return sample_market(menu, prim, 500, seed=1)


def test_dataset_round_trip_is_exact(dataset, tmp_path):
    f = io.write_dataset(dataset, tmp_path / "d.csv")
    back = io.read_dataset(f)
    assert np.array_equal(back.q, dataset.q)
    assert np.array_equal(back.p, dataset.p)
    assert np.array_equal(back.X1, dataset.X1)
    assert np.array_equal(back.z, dataset.z)
    assert back.meta["seed"] == 1


def test_dataset_file_is_plain_csv(dataset, tmp_path):
    f = io.write_dataset(dataset, tmp_path / "d.csv")
    lines = f.read_text().splitlines()
    assert lines[0] == "q_1,q_2,p,x1_1,x1_2,z"
    assert len(lines) == dataset.n + 1
    assert json.loads((tmp_path / "d.csv.meta.json").read_text())["n"] == dataset.n


def test_missing_regime_column_is_named(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("q_1,q_2,p\n0.1,0.2,0.3\n")
    # without the column every record is in the single default regime
    assert np.all(io.read_dataset(f).z == 1)
    with pytest.raises(io.ArtifactError, match="'z'"):
        io.read_dataset(f, require_z=True)


def test_missing_price_column_is_named(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("q_1,q_2\n0.1,0.2\n")
    with pytest.raises(io.ArtifactError, match="'p'"):
        io.read_dataset(f)


def test_unknown_column_rejected(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("q_1,p,color\n0.1,0.2,3\n")
    with pytest.raises(io.ArtifactError, match="color"):
        io.read_dataset(f)


@pytest.mark.parametrize("text", ["", "q_1,q_2,p\n"])
def test_empty_dataset(tmp_path, text):
    f = tmp_path / "d.csv"
    f.write_text(text)
    with pytest.raises(io.EmptyDatasetError):
        io.read_dataset(f)


def test_non_numeric_cell_located(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("q_1,q_2,p\n0.1,0.2,0.3\n0.1,abc,0.3\n")
    with pytest.raises(io.ArtifactError, match=r"row 3.*'q_2'"):
        io.read_dataset(f)


def test_menu_round_trip(small_menu, tmp_path):
    _, menu = small_menu
    back = io.read_menu(io.write_menu(menu, tmp_path / "m.csv"))
    assert np.array_equal(back.U, menu.U)
    assert np.array_equal(back.rho, menu.rho)
    assert np.array_equal(back.labels, menu.labels)
    assert back.objective == float(menu.objective)


def test_plot_kinds(small_menu, dataset, tmp_path):
    _, menu = small_menu
    cols, _ = io.read_table(io.emit_plot_data(menu, "surface", tmp_path / "s.csv"))
    assert len(cols["q1"]) == menu.U.size
    cols, _ = io.read_table(io.emit_plot_data(dataset, "scatter", tmp_path / "c.csv"))
    assert np.array_equal(cols["p"], dataset.p)
    ax = (np.linspace(0, 1, 5),) * 2
    est = RadonEstimate(None, None, None, None, None, ax, np.ones((5, 5)), 1.0, 0.0)
    cols, _ = io.read_table(io.emit_plot_data(est, "density", tmp_path / "g.csv"))
    assert len(cols["density"]) == 25
    paths = [np.zeros((3, 2)), np.ones((4, 2))]
    cols, _ = io.read_table(io.emit_plot_data(paths, "trajectory", tmp_path / "t.csv"))
    assert list(cols["path"]) == [0, 0, 0, 1, 1, 1, 1]


def test_unsupported_plot(dataset, tmp_path):
    with pytest.raises(io.UnsupportedPlotError):
        io.emit_plot_data(dataset, "surface", tmp_path / "x.csv")
