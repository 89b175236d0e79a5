import numpy as np
import pytest

from glmmsmc import config
from glmmsmc.errors import ValidationError
from glmmsmc.model import ModelSpec, RandomBlock


def test_defaults_validate():
    cfg = config.resolve()
    assert cfg["model"]["sigma_beta_sq"] == 1e8 and cfg["model"]["A"] == 0.01
    assert cfg["sampler"] == "smc"


def test_preset_poisson():
    cfg = config.resolve("paper-4.1")
    s = cfg["smc"]
    assert (s["n_particles"], s["n_stages"], s["partition"]) == (1000, 105, "singleton")
    assert s["tau"] == pytest.approx(1 / 3)
    assert (cfg["mcmc"]["iters"], cfg["mcmc"]["burnin"]) == (20000, 10000)
    assert cfg["model"]["splines"] == [{"column": "x2", "K": 10}]


def test_preset_logit_structure():
    cfg = config.resolve("paper-4.2-structure")
    assert cfg["smc"]["n_particles"] == 1000 and cfg["smc"]["n_stages"] == 305
    assert cfg["smc"]["tau"] == {"fixed": 3.0, "random": 6.0, "spline": 5.0}
    assert cfg["model"]["family"] == "logit" and cfg["model"]["splines"][0]["K"] == 20


def test_unknown_preset():
    with pytest.raises(ValidationError):
        config.resolve("nope")


@pytest.mark.parametrize("item,expect", [
    ("smc.n_stages=50", {"smc": {"n_stages": 50}}),
    ("smc.tau=0.25", {"smc": {"tau": 0.25}}),
    ("smc.partition=[[0, 1], [2]]", {"smc": {"partition": [[0, 1], [2]]}}),
    ("label=abc", {"label": "abc"}),
])
def test_parse_override(item, expect):
    assert config.parse_override(item) == expect


@pytest.mark.parametrize("item", ["novalue", "=3", "a=[1,"])
def test_bad_override(item):
    with pytest.raises(ValidationError):
        config.parse_override(item)


def test_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("smc:\n  n_stages: 40\n  n_particles: 300\nlabel: fromfile\n")
    cfg = config.resolve("paper-4.1", p, ["smc.n_stages=20"])
    assert cfg["smc"]["n_stages"] == 20
    assert cfg["smc"]["n_particles"] == 300
    assert cfg["label"] == "fromfile"
    assert cfg["smc"]["tau"] == pytest.approx(1 / 3)


@pytest.mark.parametrize("item", [
    "sampler=gibbs", "smc.n_particles=1", "smc.n_stages=5", "mcmc.burnin=30000",
    "smc.resample_threshold=1.5", "seed=-1", "bogus=1", "slice.width=0",
])
def test_validation(item):
    with pytest.raises(ValidationError):
        config.resolve("paper-4.1", None, [item])


def test_file_errors(tmp_path):
    with pytest.raises(OSError):
        config.resolve(None, tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError):
        config.resolve(None, bad)


def test_output_dir(monkeypatch, tmp_path):
    cfg = config.resolve(None, None, ["label=xyz"])
    monkeypatch.setenv(config.OUTPUT_ROOT_ENV, str(tmp_path))
    assert config.output_dir(cfg) == tmp_path / "xyz"
    cfg["output_dir"] = str(tmp_path / "here")
    assert config.output_dir(cfg) == tmp_path / "here"


def _mixed_model():
    rng = np.random.default_rng(0)
    C = np.hstack([np.ones((12, 1)), rng.standard_normal((12, 1)), np.eye(12)[:, :3],
                   rng.standard_normal((12, 2))])
    blocks = (RandomBlock("subject", 2, 3, "random"), RandomBlock("age", 5, 2, "spline"))
    names = ("(Intercept)", "x", "u1", "u2", "u3", "s1", "s2")
    return ModelSpec(rng.integers(0, 2, 12).astype(float), C, 2, blocks, 1e8, 0.01, "logit", names)


def test_move_config_by_class():
    model = _mixed_model()
    cfg = config.resolve("paper-4.2-structure")
    mc = config.move_config(cfg, model)
    assert mc.J == model.P
    np.testing.assert_allclose(mc.tau, [3, 3, 6, 6, 6, 5, 5])


def test_move_config_partitions():
    model = _mixed_model()
    cfg = config.resolve(None, None, ["smc.partition=one_block"])
    mc = config.move_config(cfg, model)
    assert mc.J == 1 and mc.tau[0] == pytest.approx(2.4 / np.sqrt(7))
    cfg = config.resolve(None, None, ["smc.partition=[['(Intercept)', x], [2, 3, 4, 5, 6]]",
                                      "smc.tau=[0.5, 0.7]"])
    mc = config.move_config(cfg, model)
    assert mc.J == 2 and list(mc.partition[0]) == [0, 1]
    cfg = config.resolve(None, None, ["smc.partition=[[0, 1]]"])
    with pytest.raises(ValidationError):
        config.move_config(cfg, model)
    cfg = config.resolve(None, None, ["smc.partition=[[zzz]]"])
    with pytest.raises(ValidationError):
        config.move_config(cfg, model)
