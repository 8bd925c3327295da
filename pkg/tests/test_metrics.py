import csv
import json

import numpy as np
import pytest

from deformgrids.errors import DegenerateGeometryError, InputError
from deformgrids.geometry import TriMesh, icosphere, sample_surface
from deformgrids.metrics import (
    EDGE,
    FrameMetrics,
    correspondence_error,
    evaluate_frame,
    metrics_from_samples,
    threshold_distance,
    unit_box_transform,
    write_reports,
)

PLATE = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def oracle_metrics(pp, pn, gp, gn, taus=(0.005, 0.01), base=np.sqrt(3.0)):
    """Full distance matrices, no spatial index."""
    D = ((pp[:, None, :] - gp[None, :, :]) ** 2).sum(axis=2)
    a, b = D.argmin(axis=1), D.argmin(axis=0)
    da, db = D[np.arange(len(pp)), a], D[b, np.arange(len(gp))]
    cd = da.mean() + db.mean()
    nc = 0.5 * (np.abs((pn * gn[a]).sum(axis=1)).mean() + np.abs((gn * pn[b]).sum(axis=1)).mean())
    fs = []
    for tau in taus:
        th = tau * base
        p, r = np.mean(np.sqrt(da) < th), np.mean(np.sqrt(db) < th)
        fs.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return cd, nc, fs


def bumpy_sphere(seed, sub=2):
    ico = icosphere(sub, 0.5)
    rng = np.random.default_rng(seed)
    return ico.with_vertices(ico.vertices * (1 + 0.05 * rng.standard_normal((len(ico.vertices), 1))))


def test_identical_meshes():
    ico = icosphere(2, 0.7)
    m = evaluate_frame(ico, ico, n=5000, seed=3)
    assert m.cd == 0.0 and m.nc == pytest.approx(1.0, abs=1e-12)
    assert m.f_half == 1.0 and m.f_one == 1.0


@pytest.mark.parametrize("offset,f_half,f_one", [(0.01, 0.0, 1.0), (0.02, 0.0, 0.0), (0.005, 1.0, 1.0)])
def test_offset_plate_closed_form(offset, f_half, f_one):
    # same seed, same topology: every prediction sample sits exactly `offset` above its twin
    pred = PLATE.with_vertices(PLATE.vertices + [0, 0, offset])
    m = evaluate_frame(pred, PLATE, n=4000, seed=1)
    assert m.cd == pytest.approx(2 * offset ** 2, rel=1e-9)
    assert m.nc == pytest.approx(1.0, abs=1e-12)
    assert (m.f_half, m.f_one) == (f_half, f_one)


def test_matches_brute_force_oracle():
    pred, gt = bumpy_sphere(0), bumpy_sphere(1)
    tf = unit_box_transform(gt.vertices)
    pp, pn = sample_surface(pred.with_vertices(tf.apply(pred.vertices) + 0.5), 1000, 7)
    gp, gn = sample_surface(gt.with_vertices(tf.apply(gt.vertices) + 0.5), 1000, 7)
    m = metrics_from_samples(pp, pn, gp, gn, thresholds=(0.005, 0.01, 0.05))
    cd, nc, fs = oracle_metrics(pp, pn, gp, gn, taus=(0.005, 0.01))
    assert m.cd == pytest.approx(cd, rel=0, abs=1e-12)
    assert m.nc == pytest.approx(nc, rel=0, abs=1e-12)
    assert m.f_half == pytest.approx(fs[0], abs=1e-12) and m.f_one == pytest.approx(fs[1], abs=1e-12)
    assert 0 < m.f_half <= m.f_one < 1
    # symmetric in its arguments
    s = metrics_from_samples(gp, gn, pp, pn)
    assert (s.cd, s.f_half, s.f_one) == (m.cd, m.f_half, m.f_one)
    assert s.nc == pytest.approx(m.nc, abs=1e-15)


def test_edge_basis_threshold():
    assert threshold_distance(0.01) == pytest.approx(0.01 * np.sqrt(3))
    assert threshold_distance(0.01, EDGE) == 0.01
    with pytest.raises(InputError):
        threshold_distance(0.01, "radius")
    pred = PLATE.with_vertices(PLATE.vertices + [0, 0, 0.008])
    m = evaluate_frame(pred, PLATE, n=2000, seed=0, basis=EDGE)
    assert (m.f_half, m.f_one) == (0.0, 1.0)


def test_unit_box_anchored_on_ground_truth():
    big = PLATE.with_vertices(PLATE.vertices * 10)
    m = evaluate_frame(big.with_vertices(big.vertices + [0, 0, 0.1]), big, n=2000, seed=0)
    assert m.cd == pytest.approx(2 * 0.01 ** 2, rel=1e-9)
    tf = unit_box_transform(big.vertices)
    np.testing.assert_allclose(tf.apply(big.vertices).min(axis=0) + 0.5, [0, 0, 0.5], atol=1e-15)
    with pytest.raises(DegenerateGeometryError):
        unit_box_transform(np.ones((4, 3)))


def test_sampling_noise_bound():
    pred, gt = bumpy_sphere(2, sub=3), bumpy_sphere(3, sub=3)
    a = evaluate_frame(pred, gt, seed=0).cd
    b = evaluate_frame(pred, gt, seed=1).cd
    assert abs(a - b) / a < 0.05


def test_correspondence_error():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(3, 50, 3))
    assert correspondence_error(g, g) == 0.0
    d = np.array([0.03, -0.04, 0.0])
    assert correspondence_error(g + d, g) == pytest.approx(0.05, rel=1e-12)
    p = g + rng.normal(scale=0.1, size=g.shape)
    want = np.mean([np.linalg.norm(p[t, i] - g[t, i]) for t in range(3) for i in range(50)])
    assert correspondence_error(p, g) == pytest.approx(want, rel=1e-12)
    scale = np.array([1.0, 2.0, 0.5])
    want = np.mean([scale[t] * np.linalg.norm(p[t, i] - g[t, i]) for t in range(3) for i in range(50)])
    assert correspondence_error(p, g, scale) == pytest.approx(want, rel=1e-12)
    with pytest.raises(InputError):
        correspondence_error(p[:, :10], g)


def test_reports(tmp_path):
    frames = [FrameMetrics(2e-5, 0.9, 0.5, 0.8, 0.01), FrameMetrics(4e-5, 0.7, 0.3, 0.6, 0.03)]
    rep = write_reports(frames, tmp_path / "m.json", tmp_path / "m.csv", extra={"run": "x"})
    loaded = json.loads((tmp_path / "m.json").read_text())
    assert loaded == rep and loaded["run"] == "x"
    assert loaded["mean"]["cd_x1e5"] == pytest.approx(3.0)
    assert loaded["mean"]["corr"] == pytest.approx(0.02)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["frame", "CD_x1e5", "NC", "F-0.5%", "F-1%", "Corr"]
    assert rows[1][1] == "2.000000" and rows[-1][0] == "mean" and float(rows[-1][2]) == pytest.approx(0.8)
    none = write_reports([FrameMetrics(0, 1, 1, 1)], tmp_path / "n.json", tmp_path / "n.csv")
    assert none["mean"]["corr"] is None
    assert list(csv.reader(open(tmp_path / "n.csv")))[1][-1] == ""
