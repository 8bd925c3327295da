import filecmp
import json

import numpy as np
import pytest

from deformgrids.errors import InputError
from deformgrids.io import load_mesh, load_points
from deformgrids.synth import (
    axis_rotation,
    bend,
    bending_bar,
    gt_isometry_loss,
    make_scene,
    rigid_sphere,
    scaling_cube,
    write_scene,
)


def edge_lengths(mesh):
    e = mesh.edges
    return np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)


def test_rigid_sphere_is_rigid():
    sc = rigid_sphere(T=6, n_points=300)
    ref = edge_lengths(sc.meshes[0])
    for m in sc.meshes[1:]:
        np.testing.assert_allclose(edge_lengths(m), ref, rtol=0, atol=1e-12)
    assert gt_isometry_loss(sc) < 1e-12
    # fixed material samples move with the sphere
    R = axis_rotation((0.2, 1.0, 0.3), np.deg2rad(5.0 * 4))
    np.testing.assert_allclose(sc.frames[4], sc.frames[0] @ R.T + [0.08, 0, 0], atol=1e-12)
    assert sc.template_frame == 3 and sc.tracks.shape == (7, len(sc.meshes[0].vertices), 3)


def test_axis_rotation():
    R = axis_rotation([0, 0, 2], np.pi / 2)
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)


def test_scaling_cube_isometry_closed_form():
    sc = scaling_cube(T=4, n_points=200, scale_per_frame=1.2, divisions=(2, 2, 2))
    rest = sc.meshes[0]
    e = rest.edges
    d = rest.vertices[e[:, 0]] - rest.vertices[e[:, 1]]

    def lengths(t):
        s = 1.2 ** t
        return np.sqrt((s * d[:, 0]) ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)

    k = 2
    pairs = [(t, t - 1 if t > k else t + 1) for t in range(5) if t != k]
    want = sum(np.abs(lengths(t) - lengths(s)).sum() for t, s in pairs) / (4 * len(e))
    assert gt_isometry_loss(sc) == pytest.approx(want, rel=1e-12)
    assert want > 0


def test_bend_closed_form():
    b = np.deg2rad(40.0)
    pts = np.array([[-1, 0.1, 0.05], [1, 0, 0], [1, 0.12, -0.1], [0.3, -0.1, 0.0]])
    np.testing.assert_allclose(bend(pts, 0.0), pts, atol=1e-15)
    out = bend(pts, b)
    np.testing.assert_allclose(out[0], pts[0], atol=1e-15)  # root stays put
    # the tip cross-section is rotated by the full bend angle
    np.testing.assert_allclose(out[2] - out[1], [-0.12 * np.sin(b), 0.12 * np.cos(b), -0.1], atol=1e-14)
    # centerline keeps its length: arc from the root to the tip has length 2
    s = np.linspace(-1, 1, 4001)
    c = bend(np.stack([s, 0 * s, 0 * s], axis=1), b)
    assert np.linalg.norm(np.diff(c, axis=0), axis=1).sum() == pytest.approx(2.0, rel=1e-6)


def test_bending_bar_scene():
    sc = bending_bar(T=4, n_points=100)
    assert len(sc.frames) == 5 and sc.template_frame == 2
    assert np.ptp(sc.meshes[0].vertices[:, 0]) == pytest.approx(2.0)


def test_make_scene_errors():
    with pytest.raises(InputError):
        make_scene("tetrahedron")
    with pytest.raises(InputError):
        make_scene("rigid-sphere", T=0)


def test_same_seed_same_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    info = write_scene(make_scene("bending-bar", T=3, n_points=150, seed=9), a)
    write_scene(make_scene("bending-bar", T=3, n_points=150, seed=9), b)
    for rel in info["frames"] + info["gt_meshes"] + ["template.obj", "tracks.npy", "scene.json"]:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel
    c = make_scene("bending-bar", T=3, n_points=150, seed=10)
    assert not np.array_equal(c.frames[0], load_points(a / info["frames"][0]))
    meta = json.loads((a / "scene.json").read_text())
    assert meta["template_frame"] == 1 and meta["params"]["seed"] == 9
    m = load_mesh(a / "template.obj")
    np.testing.assert_allclose(m.vertices, np.load(a / "tracks.npy")[1], atol=1e-12)


def test_fresh_samples_per_frame():
    sc = rigid_sphere(T=2, n_points=100, fixed_samples=False)
    R = axis_rotation((0.2, 1.0, 0.3), np.deg2rad(5.0))
    assert not np.allclose(sc.frames[1], sc.frames[0] @ R.T + [0.02, 0, 0])
    # points still lie on the moving sphere
    np.testing.assert_allclose(np.linalg.norm(sc.frames[1] - [0.02, 0, 0], axis=1), 0.5, atol=0.02)
