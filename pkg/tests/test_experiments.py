import json
from pathlib import Path

import numpy as np
import pytest

from lp_debias.errors import DomainError, ImageMismatch
from lp_debias.experiments import (EXPERIMENTS, ExperimentConfig, ResultBundle, loglog_slope,
                                   run_experiment, synthetic_flows, synthetic_images,
                                   validate_summary, write_table)
from lp_debias.transport import write_pgm

SMALL = {
    "sim2x2": dict(n=[1000], R=20, penalty=["log"]),
    "simgrid": dict(n=[200], R=4, L=2),
    "simdegenerate": dict(n=[1000, 10000], R=10, penalty=["exp"]),
    "entropic_compare": dict(n=[1000], R=5, lambdas=[0.1, 0.2]),
    "coloc": dict(n=[30], B=5),
    "rebalance": dict(n=40, B=20),
}


def small_config(name, **extra):
    kw = dict(SMALL[name])
    if name == "rebalance":
        kw["n"] = [kw["n"]]
    kw.update(extra)
    return ExperimentConfig(name, **kw)


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_experiment_writes_valid_bundle(tmp_path, name):
    bundle = run_experiment(small_config(name))
    out = bundle.write(tmp_path / name)
    doc = json.loads((out / "summary.json").read_text())
    validate_summary(doc)
    assert doc["experiment"] == name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["experiment"] == name
    assert manifest["build"]
    for table in manifest["tables"]:
        lines = (out / table).read_text().splitlines()
        assert len(lines) >= 2


@pytest.mark.parametrize("name", ["sim2x2", "simdegenerate", "rebalance"])
def test_reruns_are_byte_identical(tmp_path, name):
    a = run_experiment(small_config(name)).write(tmp_path / "a")
    b = run_experiment(small_config(name)).write(tmp_path / "b")
    for path in sorted(a.glob("*.csv")):
        assert path.read_bytes() == (b / path.name).read_bytes()


def test_seed_changes_output(tmp_path):
    a = run_experiment(small_config("sim2x2")).write(tmp_path / "a")
    b = run_experiment(small_config("sim2x2", seed=1)).write(tmp_path / "b")
    assert (a / "replicates.csv").read_bytes() != (b / "replicates.csv").read_bytes()


def test_validate_summary_rejects_bad_documents():
    good = {"schema_version": 1, "experiment": "sim2x2", "failures": 0}
    validate_summary(good)
    for bad in ({**good, "schema_version": 2}, {**good, "experiment": "x"},
                {k: v for k, v in good.items() if k != "failures"}):
        with pytest.raises(ValueError):
            validate_summary(bad)


def test_config_validation():
    with pytest.raises(DomainError):
        ExperimentConfig("nope")
    with pytest.raises(DomainError):
        ExperimentConfig("sim2x2", R=0)
    with pytest.raises(DomainError):
        ExperimentConfig("sim2x2", r0=[0.0])
    with pytest.raises(DomainError):
        ExperimentConfig("sim2x2", alpha=1.0)


def test_grid_guard():
    with pytest.raises(DomainError):
        run_experiment(ExperimentConfig("simgrid", L=13, n=[10], R=1))


def test_sim2x2_reports_variance_and_cells():
    doc = run_experiment(small_config("sim2x2")).summary_document()
    assert doc["var_G_w"] == 1 / 8
    (cell,) = doc["cells"]
    assert cell["replicates"] == 20 and cell["failed"] == 0
    assert 0 <= cell["ks"] <= 1


def test_simgrid_every_replicate_rescaled():
    doc = run_experiment(small_config("simgrid")).summary_document()
    (cell,) = doc["cells"]
    assert cell["rescaled"] == 4
    assert cell["variance_from_oracle"] + cell["variance_from_dual"] == 4


def test_entropic_product_distance():
    doc = run_experiment(small_config("entropic_compare")).summary_document()
    assert doc["product_coupling_distance"] == 0.25
    assert [row["lambda"] for row in doc["profile"]] == [0.1, 0.2]


def test_coloc_identical_images(tmp_path):
    img, _ = synthetic_images(16, seed=2)
    path = tmp_path / "a.pgm"
    write_pgm(path, img)
    bundle = run_experiment(ExperimentConfig("coloc", images=[str(path), str(path)], n=[20], B=3))
    header, rows = bundle.tables["curves"]
    col_star = np.array([row[header.index("col_star")] for row in rows])
    np.testing.assert_allclose(col_star, 1.0, atol=1e-9)


def test_coloc_errors(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.ones((4, 4), dtype=int))
    write_pgm(tmp_path / "b.pgm", np.ones((4, 5), dtype=int))
    with pytest.raises(ImageMismatch):
        run_experiment(ExperimentConfig("coloc", images=[str(tmp_path / "a.pgm"),
                                                         str(tmp_path / "b.pgm")]))
    with pytest.raises(DomainError):
        run_experiment(ExperimentConfig("coloc", n=[10 ** 6], B=2))


def test_synthetic_images_shape():
    a, b = synthetic_images(32, seed=0)
    assert a.shape == b.shape == (32, 32)
    assert 100 < np.count_nonzero(a) < 400 and np.count_nonzero(b) > 100


def test_rebalance_planted_arc():
    doc = run_experiment(ExperimentConfig("rebalance", B=200)).summary_document()
    assert doc["days"] == 84
    assert [0, 4] in doc["displayed_arcs"]


def test_rebalance_null_generator(tmp_path):
    D, _ = synthetic_flows(5, 84, seed=3, planted=0.0)
    data = tmp_path / "flows.csv"
    np.savetxt(data, D, delimiter=",")
    cost = tmp_path / "cost.csv"
    np.savetxt(cost, np.ones((5, 5)) - np.eye(5), delimiter=",")
    doc = run_experiment(ExperimentConfig("rebalance", data=str(data), costs=str(cost),
                                          B=200)).summary_document()
    assert doc["displayed_arcs"] == []


def test_rebalance_rejects_unbalanced_cost_shape(tmp_path):
    data = tmp_path / "flows.csv"
    np.savetxt(data, np.array([[1.0, -1.0], [2.0, -2.0]]), delimiter=",")
    cost = tmp_path / "cost.csv"
    np.savetxt(cost, np.ones((3, 3)), delimiter=",")
    with pytest.raises(DomainError):
        run_experiment(ExperimentConfig("rebalance", data=str(data), costs=str(cost), B=2))


def test_loglog_slope_and_write_table(tmp_path):
    assert loglog_slope([1, 10, 100], [1, 0.1, 0.01]) == pytest.approx(-1.0)
    write_table(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [True, "x"]])
    assert (tmp_path / "t.csv").read_text() == "a,b\n1,0.10000000000000001\n1,x\n"


def test_bundle_without_config(tmp_path):
    out = ResultBundle("sim2x2", {"x": np.float64(np.nan)}).write(tmp_path)
    assert json.loads((out / "summary.json").read_text())["x"] is None


@pytest.mark.xfail(strict=True, reason=(
    "at n=100 the debiased cost is far from Gaussian for every r0 (KS >= 0.46); the best "
    "r0 is about 0.3, so r0=1 does not beat the decade below it"))
def test_sim2x2_r0_sensitivity_ordering():
    # "too small" and "too large" fixed in advance as one decade either side of 1
    doc = run_experiment(ExperimentConfig("sim2x2", n=[100], R=500, r0=[0.1, 1.0, 10.0],
                                          penalty=["log", "exp"])).summary
    for pen in ("log_barrier", "exponential"):
        ks = {c["r0"]: c["ks"] for c in doc["cells"] if c["penalty"] == pen}
        assert ks[1.0] < ks[0.1] and ks[1.0] < ks[10.0], (pen, ks)


def test_simdegenerate_penalty_contrast():
    doc = run_experiment(ExperimentConfig("simdegenerate", R=300,
                                          penalty=["log", "exp"])).summary
    assert doc["fits"]["log_barrier:r0=1"]["slope"] == pytest.approx(-1.0, abs=0.2)
    assert doc["fits"]["exponential:r0=1"]["slope"] < -1.1
    header, rows = run_experiment(ExperimentConfig("simdegenerate", R=300,
                                                   penalty=["exp"])).tables["mse"]
    spread = [row[header.index("mean_abs_root")] for row in rows]
    assert all(a > b for a, b in zip(spread, spread[1:]))


@pytest.mark.slow
def test_simgrid_scaled_down():
    bundle = run_experiment(ExperimentConfig("simgrid", L=4, n=[200, 5000], R=200))
    small, large = bundle.summary["cells"]
    assert bundle.failures == 0
    assert large["ks"] <= 0.1
    assert large["mse_plan"] < small["mse_plan"]
    assert small["rescaled"] == large["rescaled"] == 200


@pytest.fixture(scope="module")
def coloc_golden():
    cfg = json.loads((Path(__file__).parent / "golden" / "criterion_11_coloc.json").read_text())
    return run_experiment(ExperimentConfig(**cfg))


def test_coloc_band_narrows_with_n(coloc_golden):
    header, rows = coloc_golden.tables["band"]
    rows = np.array([[r[0], r[2], r[3]] for r in rows])
    widths = [np.mean(rows[rows[:, 0] == n, 2] - rows[rows[:, 0] == n, 1]) for n in (50, 150)]
    assert widths[1] < widths[0]
    assert all(c["band_coverage_large_xi"] >= 0.95 for c in coloc_golden.summary["cells"])


@pytest.mark.xfail(strict=True, reason=(
    "over the upper three quarters of the xi grid the entropic curve is closer at n=150 "
    "(0.074 vs 0.109): with lam=2 pixels its blur is small where Col is near 1, while the "
    "subsample error of the debiased curve remains"))
def test_coloc_large_xi_ordering(coloc_golden):
    for cell in coloc_golden.summary["cells"]:
        assert cell["sup_err_pcol_large_xi"] < cell["sup_err_rcol_large_xi"], cell["n"]
