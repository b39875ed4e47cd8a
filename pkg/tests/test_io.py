import json

import numpy as np
import pytest

from runmax import io
from runmax.mc import simulate
from runmax.model import DiffusionModel, GridSpec, assemble_p0, build_grid


def test_density_csv_round_trip(tmp_path):
    m = DiffusionModel.from_strings("0", x0=0.1)
    g = build_grid(GridSpec(dx=0.2, n_time=3), m, 1.0)
    f = assemble_p0(m, g)
    path = tmp_path / "d.csv"
    io.write_density_csv(f, path)
    back = io.read_density_csv(path, g)
    np.testing.assert_array_equal(back.values, f.values)
    header = path.read_text().splitlines()[0]
    assert header == "t,m,x1,value"
    other = build_grid(GridSpec(dx=0.3, n_time=3), m, 1.0)
    with pytest.raises(io.FormatError):
        io.read_density_csv(path, other)


def test_density_csv_d2(tmp_path):
    m = DiffusionModel.from_strings(["0", "0"], x0=[0.0, 0.0])
    g = build_grid(GridSpec(dx=0.5, n_time=2), m, 0.5)
    f = assemble_p0(m, g)
    io.write_density_csv(f, tmp_path / "d.csv")
    np.testing.assert_array_equal(io.read_density_csv(tmp_path / "d.csv", g).values, f.values)


def test_bad_csv(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    g = build_grid(GridSpec(dx=0.2, n_time=2), DiffusionModel.from_strings("0"), 1.0)
    with pytest.raises(io.FormatError):
        io.read_density_csv(tmp_path / "x.csv", g)


def test_ensemble_binary_round_trip(tmp_path):
    ens = simulate(DiffusionModel.from_strings("tanh(x1)"), 1.0, 3000, 0.1, seed=2**63 + 5)
    io.write_ensemble(ens, tmp_path / "s.bin")
    back = io.read_ensemble(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.m, ens.m)
    np.testing.assert_array_equal(back.x, ens.x)
    assert (back.seed, back.dt, back.T, back.bridge, back.n_paths) == (ens.seed, ens.dt, ens.T, True, 3000)
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:8] == io.MAGIC
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(io.FormatError):
        io.read_ensemble(tmp_path / "t.bin")
    (tmp_path / "u.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(io.FormatError):
        io.read_ensemble(tmp_path / "u.bin")
    io.write_ensemble_csv(ens, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "M,X1" and len(rows) == 3001
    assert float(rows[1].split(",")[0]) == ens.m[0]


def test_json_schema_version(tmp_path):
    io.write_json({"a": np.arange(3), "b": np.float64(1.5), "c": np.bool_(True)}, tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d == {"schema_version": "1", "a": [0, 1, 2], "b": 1.5, "c": True}
