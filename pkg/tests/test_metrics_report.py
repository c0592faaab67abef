import json
import math

import numpy as np
import pytest

from mrept.grid import cube_grid, make_grid
from mrept.linsolve import SolveReport
from mrept.metrics_report import (
    LOG_COLUMNS,
    anomaly_accuracy,
    convergence_log,
    export_slice,
    history_rows,
    l2_error,
    read_convergence_log,
    read_pgm,
)
from mrept.phantom import Admittivity, default_config, grid_from_hints, phantom_from_dict, sample
from mrept.recon_init import InitHistory
from mrept.recon_newton import ReconResult


def test_l2_error_cases(rng):
    g = make_grid(4, 4, 4, 0.25)  # 64 nodes of volume 1/64
    a = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    assert l2_error(a, a, g) == 0
    c = 0.6 - 0.8j
    assert l2_error(a + c, a, g) == pytest.approx(abs(c), rel=1e-14)
    b = rng.normal(size=g.shape)
    ref = math.sqrt(math.fsum((np.abs(a - b) ** 2).ravel()) * g.cell_volume)
    assert l2_error(a, b, g) == pytest.approx(ref, rel=1e-12)
    region = np.zeros(g.shape, bool)
    region[1, 2, 3] = True
    assert l2_error(a, b, g, region) == pytest.approx(abs(a - b)[1, 2, 3] * math.sqrt(g.cell_volume))
    with pytest.raises(ValueError, match="empty"):
        l2_error(a, b, g, np.zeros(g.shape, bool))


def test_anomaly_accuracy_cases(rng):
    truth = rng.uniform(0.5, 1.5, (4, 4, 4)) + 0.3j
    S = rng.uniform(size=truth.shape) > 0.5
    assert anomaly_accuracy(truth, truth, S) == 0
    assert anomaly_accuracy(np.where(S, 1.1 * truth, 7.0), truth, S) == pytest.approx(0.1)
    with pytest.raises(ValueError, match="empty"):
        anomaly_accuracy(truth, truth, np.zeros(truth.shape, bool))
    zero = truth.copy()
    zero[S] = 0
    with pytest.raises(ValueError, match="vanishes"):
        anomaly_accuracy(truth, zero, S)


def test_constant_slice_is_uniform_gray(tmp_path):
    path = export_slice(np.full((5, 6, 7), 3.0), 2, tmp_path / "c.pgm")
    img = read_pgm(path)
    assert img.shape == (6, 5) and np.all(img == 128)
    side = json.loads((tmp_path / "c.pgm.json").read_text())
    assert side["window"] == [3.0, 3.0] and side["z_index"] == 2


def test_slice_orientation_and_window(tmp_path):
    f = np.zeros((4, 3, 2))
    f[3, 2, 1] = 1.0  # largest x, largest y
    img = read_pgm(export_slice(f, 1, tmp_path / "o.pgm"))
    assert img[0, -1] == 255 and img.sum() == 255
    img = read_pgm(export_slice(f, 1, tmp_path / "w.pgm", window=(0.0, 2.0)))
    assert img[0, -1] == 128


def test_csv_roundtrip_bit_exact(tmp_path, rng):
    f = rng.normal(size=(5, 4, 3)) * 10.0 ** rng.integers(-8, 8, size=(5, 4, 3))
    path = export_slice(f, 1, tmp_path / "s.csv")
    back = np.loadtxt(path, delimiter=",")
    assert np.array_equal(back, f[:, :, 1].T[::-1])


def test_export_guards(tmp_path):
    with pytest.raises(ValueError, match="complex"):
        export_slice(np.ones((3, 3, 3)) * 1j, 0, tmp_path / "x.pgm")
    with pytest.raises(IndexError):
        export_slice(np.ones((3, 3, 3)), 3, tmp_path / "x.pgm")
    with pytest.raises(ValueError, match="unknown slice format"):
        export_slice(np.ones((3, 3, 3)), 0, tmp_path / "x.png")


def test_exports_deterministic(tmp_path, rng):
    f = rng.normal(size=(6, 6, 3))
    a = export_slice(f, 1, tmp_path / "a.pgm").read_bytes()
    b = export_slice(f, 1, tmp_path / "b.pgm").read_bytes()
    assert a == b


def test_model1_sigma_slice_histogram(tmp_path):
    cfg = default_config("model1")
    cfg["smoothing"] = 0.0
    p = phantom_from_dict(cfg)
    g = grid_from_hints(cfg)
    sigma = sample(p, g).sigma
    path = export_slice(sigma, g.nz // 2, tmp_path / "s.csv")
    values = set(np.unique(np.loadtxt(path, delimiter=",")))
    assert values == {cfg["background"]["sigma"]} | {s["material"]["sigma"] for s in cfg["anomalies"]}
    img = read_pgm(export_slice(sigma, g.nz // 2, tmp_path / "s.pgm"))
    assert len(np.unique(img)) == len(values)


def test_empty_history_gives_header_only(tmp_path):
    path = convergence_log(InitHistory(), tmp_path / "log.csv")
    assert path.read_text() == ",".join(LOG_COLUMNS) + "\n"


def test_newton_log_roundtrip(tmp_path, rng):
    g = cube_grid(3, 1.0)
    res = ReconResult(Admittivity.from_gamma(np.ones(g.shape, complex)))
    res.J = list(rng.uniform(0, 1, 11))
    res.step_norms = list(rng.uniform(0, 1, 10))
    res.errors = list(rng.uniform(0, 1, 11))
    res.anomaly = list(rng.uniform(0, 1, 11))
    res.reports = [(SolveReport("direct", 1, 0.0, 0.0), SolveReport("bicgstab", 7, 0.0, 0.0))] * 10
    path = convergence_log(res, tmp_path / "newton.csv")
    back = read_convergence_log(path)
    assert back["iteration"] == list(range(1, 11))
    assert back["J"] == res.J[1:] and back["step_norm"] == res.step_norms
    assert back["error"] == res.errors[1:] and back["anomaly"] == res.anomaly[1:]
    assert back["solver_iterations"] == [8] * 10
    assert all(j >= 0 for j in back["J"])
    init = json.loads((tmp_path / "newton.csv.json").read_text())["initial"]
    assert init["J"] == res.J[0]


def test_init_log_without_truth(tmp_path):
    hist = InitHistory(step_norms=[0.5, 0.25])
    rows = history_rows(hist)
    assert [r["iteration"] for r in rows] == [1, 2]
    back = read_convergence_log(convergence_log(hist, tmp_path / "init.csv"))
    assert back["step_norm"] == [0.5, 0.25]
    assert all(math.isnan(v) for v in back["error"] + back["J"])
    assert not (tmp_path / "init.csv.json").exists()
