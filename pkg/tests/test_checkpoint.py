import struct

import numpy as np
import pytest

from checkpoint import (
    MAGIC,
    checkpoint_tensors,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from errors import CheckpointFormatError, CheckpointMismatchError, CheckpointTruncatedError
from model import ModelConfig
from optimizer import AdamState, adam_step


@pytest.fixture
def stepped(micro_model, rng):
    """Micro model after one Adam step, so moments and BN stats are populated."""
    for t in micro_model.params.values():
        t.grad = rng.normal(size=t.shape)
    adam = AdamState()
    adam_step(micro_model.params, adam)
    micro_model.bn_states["ref1.1.bn"].running_mean[:] = rng.normal(size=4)
    return micro_model, adam


@pytest.fixture
def saved(tmp_path, stepped):
    model, adam = stepped
    path = tmp_path / "run" / "model.ckpt"
    save_checkpoint(path, model, adam, iteration=12, seed=99, extra={"note": "x"})
    return path


class TestCodec:
    def test_header(self):
        data = encode_tensors({"a": np.zeros((2, 3), np.float32)})
        assert data[:4] == MAGIC
        assert struct.unpack("<II", data[4:12]) == (1, 1)

    def test_dtypes_kept(self):
        tensors = {"f": np.ones((2,), np.float32), "d": np.arange(3.0), "b": np.array([1, 2], np.uint8)}
        decoded = decode_tensors(encode_tensors(tensors))
        assert list(decoded) == ["f", "d", "b"]
        for name, arr in tensors.items():
            assert decoded[name].dtype == arr.dtype
            np.testing.assert_array_equal(decoded[name], arr)

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointFormatError):
            encode_tensors({"i": np.zeros(2, np.int64)})

    def test_bad_magic(self):
        data = encode_tensors({"a": np.zeros(2)})
        with pytest.raises(CheckpointFormatError, match="bad magic"):
            decode_tensors(b"NOPE" + data[4:])

    def test_unknown_version(self):
        data = bytearray(encode_tensors({"a": np.zeros(2)}))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(CheckpointFormatError, match="version 7"):
            decode_tensors(bytes(data))

    def test_truncated(self):
        data = encode_tensors({"a": np.zeros((4, 4))})
        with pytest.raises(CheckpointTruncatedError):
            decode_tensors(data[:-5])

    def test_trailing_bytes(self):
        data = encode_tensors({"a": np.zeros(2)})
        with pytest.raises(CheckpointTruncatedError, match="trailing"):
            decode_tensors(data + b"\x00")


class TestSaveLoad:
    def test_save_load_save_is_byte_identical(self, tmp_path, saved):
        model, adam, ckpt = load_checkpoint(saved)
        again = tmp_path / "again.ckpt"
        save_checkpoint(again, model, adam, ckpt.iteration, ckpt.seed, ckpt.extra)
        assert again.read_bytes() == saved.read_bytes()

    def test_state_restored(self, saved, stepped):
        original, original_adam = stepped
        model, adam, ckpt = load_checkpoint(saved)
        assert (ckpt.iteration, ckpt.seed, ckpt.extra) == (12, 99, {"note": "x"})
        assert model.config == original.config
        assert adam.t == 1 and adam.lr == original_adam.lr
        for name, t in original.params.items():
            np.testing.assert_array_equal(model.params[name].data, t.data)
            np.testing.assert_array_equal(adam.m[name], original_adam.m[name])
        np.testing.assert_array_equal(model.bn_states["ref1.1.bn"].running_mean,
                                      original.bn_states["ref1.1.bn"].running_mean)

    def test_loaded_model_predicts_identically(self, saved, stepped, rng):
        original, _ = stepped
        model, _, _ = load_checkpoint(saved)
        mask = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
        image_in = rng.random((1, 3, 8, 8)) * mask
        np.testing.assert_array_equal(model.eval().predict(image_in, mask),
                                      original.eval().predict(image_in, mask))

    def test_no_temporary_file_left(self, saved):
        assert not saved.with_name(saved.name + ".tmp").exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointFormatError, match="cannot read"):
            read_checkpoint(tmp_path / "absent.ckpt")

    def test_truncated_file(self, tmp_path, saved):
        damaged = tmp_path / "damaged.ckpt"
        damaged.write_bytes(saved.read_bytes()[:-100])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(damaged)

    def test_wrong_dims(self, tmp_path, stepped):
        model, adam = stepped
        tensors = checkpoint_tensors(model, adam, 0, 0)
        tensors["param/enc.1.mask_w"] = np.zeros((4, 1, 5, 5))
        path = tmp_path / "bad.ckpt"
        path.write_bytes(encode_tensors(tensors))
        with pytest.raises(CheckpointMismatchError, match="enc.1.mask_w"):
            load_checkpoint(path)

    def test_missing_bn_statistics(self, tmp_path, stepped):
        model, adam = stepped
        tensors = checkpoint_tensors(model, adam, 0, 0)
        del tensors["bn/ref2.1.bn/var"]
        path = tmp_path / "bad.ckpt"
        path.write_bytes(encode_tensors(tensors))
        with pytest.raises(CheckpointMismatchError, match="ref2.1.bn"):
            load_checkpoint(path)

    def test_unexpected_tensor(self, tmp_path, stepped):
        model, adam = stepped
        tensors = checkpoint_tensors(model, adam, 0, 0)
        tensors["param/extra"] = np.zeros(3)
        path = tmp_path / "bad.ckpt"
        path.write_bytes(encode_tensors(tensors))
        with pytest.raises(CheckpointMismatchError, match="unexpected"):
            load_checkpoint(path)

    def test_expected_config_mismatch(self, saved):
        with pytest.raises(CheckpointMismatchError, match="differs"):
            load_checkpoint(saved, expected=ModelConfig.preset("micro", refinements=1))

    def test_expected_config_match(self, saved):
        model, _, _ = load_checkpoint(saved, expected=ModelConfig.preset("micro"))
        assert model.config.refinements == 2
