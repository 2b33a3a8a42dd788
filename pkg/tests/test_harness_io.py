import struct

import numpy as np
import pytest

from ald.encoder import AmortizedEncoder
from ald.harness.checkpoint import CheckpointError, load_checkpoint, model_state, restore_state, save_checkpoint
from ald.harness.config import (ConfigError, ExperimentConfig, load_config, parse_ints, parse_matrix,
                                parse_vector, write_config)
from ald.harness.datasets import load_flat_images, make_digit_idx, synthesize_digits
from ald.harness.idx import (IdxFormatError, load_idx_bytes, load_idx_images, load_idx_labels, unit_to_pixels,
                             write_idx_images, write_idx_labels)
from ald.models import DiscretizedLogisticLikelihood, GaussianPrior, LatentVariableModel, check_pixel_grid


# ---------------------------------------------------------------------- IDX
@pytest.fixture
def fixture_file(tmp_path):
    path = tmp_path / "tiny-images.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes(range(8)))
    return path


def test_idx_fixture_values(fixture_file):
    imgs = load_idx_images(fixture_file)
    assert imgs.shape == (2, 2, 2)
    expected = (2.0 * np.arange(8) / 255.0 - 1.0).reshape(2, 2, 2)
    np.testing.assert_array_equal(imgs, expected)
    assert imgs[0, 0, 0] == -1.0 and imgs[0, 0, 1] == pytest.approx(-1 + 2 / 255)
    np.testing.assert_array_equal(load_idx_bytes(fixture_file).ravel(), np.arange(8))


def test_idx_magic_mismatch(tmp_path):
    path = tmp_path / "labels.idx"
    write_idx_labels(path, np.array([3, 1, 4]))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx_images(path)
    np.testing.assert_array_equal(load_idx_labels(path), [3, 1, 4])


@pytest.mark.parametrize("payload", [b"", b"\x00\x00\x08", struct.pack(">II", 0x803, 2)])
def test_idx_truncated_header(tmp_path, payload):
    path = tmp_path / "bad.idx"
    path.write_bytes(payload)
    with pytest.raises(IdxFormatError):
        load_idx_images(path)


def test_idx_truncated_payload_and_trailing_bytes(tmp_path, fixture_file):
    raw = fixture_file.read_bytes()
    short, long = tmp_path / "short.idx", tmp_path / "long.idx"
    short.write_bytes(raw[:-1])
    long.write_bytes(raw + b"\x00")
    with pytest.raises(IdxFormatError, match="payload"):
        load_idx_images(short)
    with pytest.raises(IdxFormatError, match="trailing"):
        load_idx_images(long)


def test_idx_overflow(tmp_path):
    path = tmp_path / "huge.idx"
    path.write_bytes(struct.pack(">IIII", 0x803, 65536, 65536, 2))
    with pytest.raises(IdxFormatError, match="overflow"):
        load_idx_images(path)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    path = tmp_path / "imgs.idx"
    write_idx_images(path, imgs)
    loaded = load_idx_images(path)
    check_pixel_grid(loaded)
    np.testing.assert_array_equal(unit_to_pixels(loaded), imgs)
    with pytest.raises(ValueError):
        write_idx_images(tmp_path / "x.idx", np.full((1, 2, 2), 300))


def test_digit_dataset(tmp_path):
    paths = make_digit_idx(tmp_path, n_train=64, n_test=16, seed=3)
    train = load_flat_images(paths["train-images"])
    test = load_flat_images(paths["test-images"], limit=10)
    assert train.shape == (64, 784) and test.shape == (10, 784)
    check_pixel_grid(train)
    assert load_idx_labels(paths["train-labels"]).shape == (64,)
    assert train.min() == -1.0 and train.max() > 0.5
    again = make_digit_idx(tmp_path / "again", n_train=64, n_test=16, seed=3)
    assert again["train-images"].read_bytes() == paths["train-images"].read_bytes()
    imgs, labels = synthesize_digits(4, np.random.default_rng(0))
    assert imgs.shape == (4, 28, 28) and imgs.dtype == np.uint8 and labels.shape == (4,)


# --------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.standard_normal((3, 4)), "scalar": np.array(2.5), "vé": rng.standard_normal(7)}
    path = tmp_path / "c.bin"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
        assert loaded[k].shape == np.shape(tensors[k])


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    expected = struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<2Q", 1, 2) + struct.pack("<2d", 1, 2)
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"w": np.ones(3)})
    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "d.bin").write_bytes(raw + raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.bin")


def test_model_state_restore(tmp_path):
    rng = np.random.default_rng(2)
    model = LatentVariableModel(GaussianPrior.standard(2),
                                DiscretizedLogisticLikelihood.build(rng, 2, 6, m=10, hidden=(4,)))
    enc = AmortizedEncoder.mlp(6, 2, rng, d=5, hidden=(3,), phi_std=0.5)
    state = model_state(model, enc)
    assert "encoder.phi" in state and "model.b" in state
    save_checkpoint(tmp_path / "m.bin", state)
    model2 = LatentVariableModel(GaussianPrior.standard(2),
                                 DiscretizedLogisticLikelihood.build(np.random.default_rng(9), 2, 6, m=10, hidden=(4,)))
    enc2 = AmortizedEncoder.mlp(6, 2, np.random.default_rng(9), d=5, hidden=(3,))
    restore_state(load_checkpoint(tmp_path / "m.bin"), model2, enc2)
    X = np.random.default_rng(3).uniform(-1, 1, (2, 6))
    np.testing.assert_array_equal(enc.encode(X).data, enc2.encode(X).data)
    assert model2.likelihood.b.item() == model.likelihood.b.item()


# ------------------------------------------------------------------- config
def test_parsers():
    np.testing.assert_array_equal(parse_vector("1, 2.5,-3"), [1, 2.5, -3])
    np.testing.assert_array_equal(parse_matrix("0.7, 0.6; 0.6, 0.8"), [[0.7, 0.6], [0.6, 0.8]])
    assert parse_ints("2,3,128") == (2, 3, 128)
    with pytest.raises(ConfigError):
        parse_matrix("1, 2; 3")


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig("conjugate-ald", 7, tmp_path / "out", {"sampler": {"total_steps": "100"}})
    write_config(cfg, tmp_path / "c.ini")
    loaded = load_config(tmp_path / "c.ini")
    assert loaded.kind == "conjugate-ald" and loaded.seed == 7
    assert loaded.get("sampler", "total_steps", 3000, int) == 100
    assert loaded.get("sampler", "burn_in", 1000, int) == 1000


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig("nonsense")
    with pytest.raises(ConfigError):
        ExperimentConfig("train-lae", seed=-1)
    with pytest.raises(ConfigError):
        ExperimentConfig("train-lae", sections={"bogus": {}})
    (tmp_path / "c.ini").write_text("[experiment]\nkind = train-vae\n[trainer]\nepochs = ten\n")
    cfg = load_config(tmp_path / "c.ini")
    with pytest.raises(ConfigError):
        cfg.get("trainer", "epochs", 1, int)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.ini", kind="train-lae")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_config_missing_file(tmp_path):
    (tmp_path / "c.ini").write_text("[experiment]\nkind = train-lae\n[data]\ntrain_images = nope.idx\n")
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.path("data", "train_images") == tmp_path / "nope.idx"
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.check_files()
