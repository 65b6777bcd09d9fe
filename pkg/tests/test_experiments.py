import csv
import math

import numpy as np
import pytest

from barrierfield.experiments import (
    ChannelConfig,
    HorseshoeConfig,
    evaluation_grid,
    horseshoe_inside,
    horseshoe_mesh,
    horseshoe_replicate,
    horseshoe_truth,
    run_channel,
    run_horseshoe,
    run_stationary_validation,
    sample_locations,
    summarize_horseshoe,
)
from barrierfield.inference import ObservationSet, fit, predict
from barrierfield.mesh import project_points
from barrierfield.precision import build_model, matern_correlation


def test_truth_examples():
    v, inside = horseshoe_truth(-0.5, 0.0)
    assert v == pytest.approx(0.0, abs=1e-15) and inside
    v, inside = horseshoe_truth(3.0, 0.5)
    assert v == pytest.approx(math.pi / 4 + 3, rel=1e-15) and inside
    assert v == pytest.approx(3.785, abs=5e-4)
    _, inside = horseshoe_truth(0.0, 0.0)
    assert not inside


def test_truth_symmetry_and_domain():
    x = np.linspace(0, 3, 7)
    up, _ = horseshoe_truth(x, 0.5 + 0.1 * np.ones_like(x))
    down, _ = horseshoe_truth(x, -0.5 - 0.1 * np.ones_like(x))
    assert np.allclose(up, -down + 2 * 0.01)
    # arm tips are round: past x = 3 only points within 0.4 of the centre line
    assert horseshoe_inside(3.39, 0.5) and not horseshoe_inside(3.41, 0.5)
    assert horseshoe_inside(3.0, 0.9) and not horseshoe_inside(3.0, 0.91)


def test_evaluation_grid_and_mesh_coverage():
    pts = evaluation_grid()
    assert pts.shape == (14584, 2)
    assert np.all(horseshoe_inside(pts[:, 0], pts[:, 1]))
    mesh = horseshoe_mesh()
    for kind in ("MS", "MB", "MN"):
        model = build_model(mesh, kind)
        assert project_points(model.mesh, pts).valid.all()
    mn = build_model(mesh, "MN")
    # the arms stay apart in the water-only mesh: no water node in the gap between them
    gap = (mn.mesh.vertices[:, 0] > 0.2) & (np.abs(mn.mesh.vertices[:, 1]) < 0.05)
    assert not gap.any()


def test_sample_locations():
    a = sample_locations(np.random.default_rng(3), 500)
    b = sample_locations(np.random.default_rng(3), 500)
    assert np.array_equal(a, b) and a.shape == (500, 2)
    assert np.all(horseshoe_inside(a[:, 0], a[:, 1]))


@pytest.mark.parametrize("kw", [{"n": 5}, {"replicates": 0}, {"sigma_eps": -1}, {"hyper_mode": "fixed"},
                                {"models": ("MS", "MX")}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        HorseshoeConfig(**kw)


def test_near_interpolation_bound():
    # noise-free data at every evaluation point and fixed hyperparameters;
    # the model noise sd must stay positive, so it is small rather than zero
    pts = evaluation_grid()
    truth = horseshoe_truth(pts[:, 0], pts[:, 1])[0]
    model = build_model(horseshoe_mesh(), "MB")
    res = fit(model, ObservationSet(pts, truth), "fixed", theta=(1.0, 1.0, 0.01), compute_sd=False)
    mean, _ = predict(res, pts, with_sd=False)
    assert np.sqrt(np.mean((mean - truth) ** 2)) < 0.05


@pytest.fixture(scope="module")
def small_config():
    return HorseshoeConfig(n=120, replicates=3, seed=11, grid_shape=(60, 30), hyper_mode="fixed",
                           theta=(1.0, 1.0, 0.1), mesh_spacing=0.1)


def test_horseshoe_determinism(tmp_path, small_config):
    a = run_horseshoe(small_config, tmp_path / "a")
    b = run_horseshoe(small_config, tmp_path / "b")
    for name in ("horseshoe_rmse.csv", "horseshoe_summary.csv", "horseshoe_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a["summary"]["failures"] == 0
    rows = list(csv.DictReader((tmp_path / "a" / "horseshoe_rmse.csv").open(newline="")))
    assert [r["model"] for r in rows[:3]] == ["MS", "MB", "MN"]
    assert all(r["status"] == "ok" for r in rows)
    assert b["rows"] == a["rows"]


def test_replicate_order_independent(small_config):
    res = run_horseshoe(small_config)
    mesh = horseshoe_mesh(small_config.mesh_spacing, small_config.extension)
    models = {k: build_model(mesh, k) for k in ("MS", "MB", "MN")}
    pts = evaluation_grid(*small_config.grid_shape)
    truth = horseshoe_truth(pts[:, 0], pts[:, 1])[0]
    rows = []
    for rep in (2, 0, 1):
        rows.extend(horseshoe_replicate(small_config, rep, models, pts, truth))
    rows.sort(key=lambda r: (r["replicate"], ("MS", "MB", "MN").index(r["model"])))
    assert rows == res["rows"]


def test_summary_statistics():
    rows = [{"replicate": i, "model": m, "rmse": v, "status": "ok"}
            for i, (a, b) in enumerate([(1.0, 0.5), (2.0, 0.4), (3.0, 3.5)])
            for m, v in (("MS", a), ("MB", b))]
    rows.append({"replicate": 3, "model": "MS", "rmse": float("nan"), "status": "failed: x"})
    s = summarize_horseshoe(rows)
    assert s["failures"] == 1
    assert s["models"]["MS"]["median"] == 2.0 and s["models"]["MB"]["q1"] == 0.45
    assert s["mb_beats_ms"] == 2
    assert s["median_ratio_mb_ms"] == pytest.approx(0.25)


def test_channel_config():
    with pytest.raises(ValueError):
        ChannelConfig(gaps=(0.1, 0.2))
    with pytest.raises(ValueError):
        ChannelConfig(probes=((5, 4), (5, 4.5)))
    cfg = ChannelConfig()
    assert cfg.ext == 6.0
    assert cfg.same_side_probe() == (3.5, 4.5)
    assert len(cfg.barrier(0.0).polygons) == 1
    assert len(cfg.barrier(0.4).polygons) == 2


def test_channel_full_width_gap_matches_stationary(tmp_path):
    cfg = ChannelConfig(spacing=0.25, gaps=(10.0, 0.4, 0.0))
    rows = run_channel(cfg, tmp_path, heatmaps=True)
    ms = next(r for r in rows if r["model"] == "MS")
    mb = [r for r in rows if r["model"] == "MB"]
    assert abs(mb[0]["cross_corr"] - ms["cross_corr"]) < 0.02
    assert mb[0]["cross_corr"] >= mb[1]["cross_corr"] >= mb[2]["cross_corr"]
    assert mb[2]["cross_corr"] < 0.1 and mb[2]["same_side_corr"] > 0.5
    # the stationary reference agrees with the Matérn curve at the probe distance
    assert ms["cross_corr"] == pytest.approx(matern_correlation(1.5, 4.0), abs=0.02)
    assert (tmp_path / "channel.csv").exists()
    assert (tmp_path / "corr_ms.csv").exists() and (tmp_path / "corr_mb_gap0.pgm").exists()
    assert (tmp_path / "corr_mn_gap0.4.csv").exists()


def test_stationary_validation_refinement(tmp_path):
    coarse = run_stationary_validation(spacing=0.4)
    fine = run_stationary_validation(spacing=0.2, out_path=tmp_path / "s.csv")
    assert fine["max_error"] <= coarse["max_error"]
    assert fine["max_error"] < 0.05
    assert fine["rows"][0]["distance"] == 0 and fine["rows"][0]["abs_error"] == 0
    assert (tmp_path / "s.csv").read_bytes().startswith(b"distance,empirical,analytic,abs_error\r\n")
    with pytest.raises(ValueError):
        run_stationary_validation(spacing=0.7)
    with pytest.raises(ValueError):
        run_stationary_validation(extension=4.0)
