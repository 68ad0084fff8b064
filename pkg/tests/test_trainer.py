from dataclasses import replace

import pytest
import torch

from anocon import trainer
from anocon.constraints import ConstraintSpec
from anocon.errors import ConfigError
from anocon.tensorio import load_manifest
from anocon.trainer import TrainConfig, defaults_for
from anocon.vae import ModelConfig

SMALL = ModelConfig(latent_dim=4, width_scale=0.0625, input_size=(32, 32), n_blocks=3)


def cfg(method, **kw):
    warm = {"warmup_epochs": 2} if method == "gradcamcons" else {}
    return replace(defaults_for(method, "desk"), **{"model": SMALL, "epochs": 3, "batch_size": 8,
                                                     "repetitions": 1, **warm, **kw})


@pytest.fixture(scope="module")
def data(small_bench):
    man = load_manifest(small_bench / "train")
    x = trainer.load_images(man)
    return man, x, trainer.brain_masks(x)


def test_paper_defaults():
    g = defaults_for("gradcamcons")
    assert g.constraint.kind == "logbarrier" and g.constraint.t == 10 and g.constraint.lambda_s == 1e3
    assert g.warmup_epochs == 50 and g.epochs == 300 and g.lr == 1e-5 and g.batch_size == 8
    a = defaults_for("amcons")
    assert a.beta == 10 and a.constraint.lambda_h == 0.1 and a.lr == 1e-4 and a.epochs == 250
    assert defaults_for("vae").beta == 1
    assert defaults_for("ae").beta == 0
    d = defaults_for("amcons", "desk")
    assert d.epochs == 30 and d.batch_size == 16 and d.model.input_size == (64, 64)


def test_invalid_combinations():
    with pytest.raises(ConfigError):
        TrainConfig("amcons", constraint=ConstraintSpec("l2_image"))
    with pytest.raises(ConfigError):
        TrainConfig("gradcamcons", constraint=ConstraintSpec("entropy"))
    with pytest.raises(ConfigError):
        TrainConfig("vae", constraint=ConstraintSpec("logbarrier"))
    with pytest.raises(ConfigError):
        TrainConfig("gradcamcons", epochs=5, warmup_epochs=5, constraint=ConstraintSpec("logbarrier"))
    with pytest.raises(ConfigError):
        TrainConfig("vae", block_s=9)
    with pytest.raises(ConfigError):
        defaults_for("gan")


def test_config_json_round_trip():
    c = defaults_for("gradcamcons", "desk")
    assert TrainConfig.from_json(c.to_json()) == c


def test_vae_constraint_column_zero(data):
    _, x, b = data
    h = trainer.train(cfg("vae"), images=x, brains=b).history
    assert [r["constraint"] for r in h] == [0.0] * 3
    assert all(r["entropy"] is None and r["t_eff"] is None for r in h)


def test_gradcamcons_warmup_has_no_constraint(data):
    _, x, b = data
    h = trainer.train(cfg("gradcamcons", epochs=4), images=x, brains=b).history
    assert h[0]["constraint"] == 0.0 and h[1]["constraint"] == 0.0
    assert h[2]["constraint"] > 0 and h[3]["constraint"] > 0
    assert h[0]["t_eff"] == 10.0


def test_amcons_without_entropy_weight_equals_vae(data):
    _, x, b = data
    a = trainer.train(cfg("amcons", beta=1.0, constraint=ConstraintSpec("entropy", lambda_h=0.0)), images=x, brains=b)
    v = trainer.train(cfg("vae", beta=1.0), images=x, brains=b)
    for ra, rv in zip(a.history, v.history):
        assert ra["recon"] == rv["recon"] and ra["kl"] == rv["kl"] and ra["total"] == rv["total"]
        assert ra["entropy"] > 0


def test_determinism_bitwise(data, tmp_path):
    man, _, _ = data
    c = cfg("amcons")
    a = trainer.train(c, man)
    b = trainer.train(c, man)
    assert trainer.history_csv(a.history) == trainer.history_csv(b.history)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    a.save(tmp_path / "m")
    assert (tmp_path / "m" / "history.csv").read_text() == trainer.history_csv(b.history)
    assert (tmp_path / "m" / "history.csv").read_text().splitlines()[0] == ",".join(trainer.HISTORY_COLUMNS)


def test_repetitions_distinct_seeds(data, tmp_path):
    man, _, _ = data
    runs = trainer.run_repetitions(cfg("ae", epochs=1, repetitions=3), man, out=tmp_path)
    assert [r.seed for r in runs] == [0, 1, 2]
    assert all((tmp_path / f"rep{i}" / "checkpoint.json").is_file() for i in range(3))
    assert trainer.history_csv(runs[0].history) != trainer.history_csv(runs[1].history)


def test_invalid_manifest_rejected(small_bench):
    test = load_manifest(small_bench / "test")
    bad = replace(test, split="train")
    with pytest.raises(ConfigError):
        trainer.train(cfg("vae"), bad)


def test_downsample_mask_never_empty():
    m = torch.zeros(1, 32, 32, dtype=torch.bool)
    m[0, 5, 5] = True
    assert trainer.downsample_mask(m, (8, 8)).sum() == 1
