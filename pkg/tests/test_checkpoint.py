import numpy as np
import pytest

import advdistill as ad
from advdistill.errors import CheckpointError


@pytest.fixture
def model():
    return ad.Model(ad.ArchSpec("mlp", (6,), 3, hidden=8), init_seed=11)


def test_round_trip_reproduces_logits_exactly(tmp_path, model):
    x = np.random.default_rng(0).uniform(0, 1, (7, 6))
    before = model.logits(x)
    ad.save_checkpoint(model, tmp_path / "m.npz", epoch=3, metrics={"clean_acc": 50.0})
    loaded = ad.load_checkpoint(tmp_path / "m.npz").to_model()
    after = loaded.logits(x)
    assert np.array_equal(before, after)  # bit-for-bit


def test_round_trip_parameters_exact(tmp_path, model):
    ad.save_checkpoint(model, tmp_path / "m.npz")
    ckpt = ad.load_checkpoint(tmp_path / "m.npz")
    for key, arr in model.params.items():
        assert np.array_equal(ckpt.params[key], arr)


def test_metadata_survives(tmp_path, model):
    ad.save_checkpoint(
        model, tmp_path / "m.npz", epoch=42,
        metrics={"clean_acc": 88.5, "pgd10_acc": 51.25}, seed=9, config_digest="abc",
    )
    ckpt = ad.load_checkpoint(tmp_path / "m.npz")
    assert ckpt.epoch == 42
    assert ckpt.metrics == {"clean_acc": 88.5, "pgd10_acc": 51.25}
    assert ckpt.seed == 9
    assert ckpt.config_digest == "abc"
    assert ckpt.arch.n_classes == 3


def test_wrong_architecture_id_rejected(tmp_path, model):
    ad.save_checkpoint(model, tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="architecture mismatch"):
        ad.load_checkpoint(tmp_path / "m.npz", expected_arch_id="cnn[8x8x1->3,c8-16,h64]")


def test_corrupt_file_rejected(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"this is not a checkpoint")
    with pytest.raises(CheckpointError, match="corrupt"):
        ad.load_checkpoint(path)


def test_not_a_checkpoint_npz_rejected(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, stuff=np.arange(3))
    with pytest.raises(CheckpointError):
        ad.load_checkpoint(path)
