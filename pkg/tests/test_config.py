import pytest

from deformgrids.config import RunConfig
from deformgrids.errors import ConfigError
from deformgrids.optimizer import OptimSchedule


def test_default_hyperparameters():
    c = RunConfig()
    snapshot = {
        "alpha": 5.56, "w_isometry": 250.0, "lr": 5e-3, "lr_growth": 1.1, "lam": 0.25, "lam_growth": 1.5,
        "mesh_lr": 1e-4, "mesh_lam": 16.0, "levels": 10, "keyframe_resolution": 128, "keyframe_gamma": 0.001,
        "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "eval_samples": 100000, "thresholds": [0.005, 0.01],
        "f_basis": "diagonal", "prune": True, "precondition": True, "multires": True, "isometry": True,
    }
    assert {k: getattr(c, k) for k in snapshot} == snapshot
    s = c.schedule(17)
    assert s.level_lr(10) == pytest.approx(5e-3 * 1.1 ** 9) and s.level_lambda(10) == pytest.approx(0.25 * 1.5 ** 9)
    assert s.precondition_order == c.precondition_order == OptimSchedule().precondition_order


@pytest.mark.parametrize("n,want", [(2, 2000), (17, 2000), (34, 4000), (26, 3059), (85, 10000), (500, 10000)])
def test_auto_epochs(n, want):
    assert RunConfig().resolved_epochs(n) == want


def test_explicit_epochs_and_levels():
    c = RunConfig(epochs=7, levels=4)
    assert c.resolved_epochs(100) == 7 and c.schedule(3).epochs == 7
    assert c.grid_levels() == [1, 2, 3, 4]
    assert RunConfig(levels=4, multires=False).grid_levels() == [4]


def test_toml_round_trip(tmp_path):
    c = RunConfig(frames=["a.ply", "b.ply"], template="t.obj", epochs=12, noise_pct=1.5, thresholds=[0.01, 0.02],
                  precondition=False, alpha=3)
    p = tmp_path / "c.toml"
    c.save(p)
    back = RunConfig.load(p)
    assert back == c and isinstance(back.alpha, float)


def test_partial_toml_uses_defaults():
    c = RunConfig.from_toml('epochs = 5\nprecondition_order = "after_adam"\n')
    assert c.epochs == 5 and c.precondition_order == "after_adam" and c.levels == 10


@pytest.mark.parametrize("text", [
    "epochz = 3",
    'epochs = "3"',
    "epochs = 2.5",
    "prune = 1",
    "alpha = true",
    "frames = 'a.ply'",
    "thresholds = [0.1, 'x']",
    "levels = 0",
    "epochs = -1",
    "alpha = -1.0",
    "lr = 0.0",
    "beta2 = 1.0",
    "noise_pct = 100.0",
    "thresholds = [0.1]",
    'f_basis = "radius"',
    'precondition_order = "sometimes"',
    "epochs = [",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_toml(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "none.toml")


def test_overrides():
    c = RunConfig().with_overrides(epochs=9, seed=None, threads=2)
    assert c.epochs == 9 and c.seed == 0 and c.threads == 2
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(bogus=1)
