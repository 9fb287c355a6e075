import struct

import numpy as np
import pytest

from app.services.checkpoint import (
    MAGIC,
    CheckpointError,
    apply_checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from app.services.duplex import learnable_params, make_spec


class TestCodec:
    def test_header_layout(self):
        data = encode_checkpoint({"w": np.array([[1.5, -2.0]])})
        assert data[:8] == MAGIC
        assert struct.unpack_from("<I", data, 8) == (1,)
        assert struct.unpack_from("<H", data, 12) == (1,)
        assert data[14:15] == b"w"
        assert struct.unpack_from("<BII", data, 15) == (2, 1, 2)
        assert struct.unpack_from("<2d", data, 24) == (1.5, -2.0)
        assert len(data) == 24 + 16

    def test_scalar_and_empty_tensors(self):
        params = decode_checkpoint(encode_checkpoint({"s": np.float64(3.0), "e": np.zeros((0, 4))}))
        assert params["s"].shape == () and params["s"] == 3.0
        assert params["e"].shape == (0, 4)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(b"NOTACKPT" + b"\x00" * 4)

    def test_truncated(self):
        data = encode_checkpoint({"w": np.ones(4)})
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(data[:-3])

    def test_name_not_utf8(self):
        data = bytearray(encode_checkpoint({"w": np.ones(1)}))
        data[14] = 0xFF
        with pytest.raises(CheckpointError, match="not valid UTF-8"):
            decode_checkpoint(bytes(data))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint({}) + b"\x01")


class TestModelCheckpoint:
    def test_save_load_apply(self, tmp_path):
        source = make_spec(num_blocks=2, seed=1)
        source.head_weight[...] = np.arange(source.head_weight.size).reshape(source.head_weight.shape)
        path = save_checkpoint(tmp_path / "ckpt" / "model.bin", learnable_params(source))
        target = make_spec(num_blocks=2, seed=2)
        apply_checkpoint(target, load_checkpoint(path))
        for name, value in learnable_params(source).items():
            assert np.array_equal(learnable_params(target)[name], value)

    def test_shape_mismatch(self):
        params = learnable_params(make_spec(num_blocks=2, branch_channels=4))
        with pytest.raises(CheckpointError, match="does not match"):
            apply_checkpoint(make_spec(num_blocks=2, branch_channels=3), params)

    def test_missing_tensor(self):
        params = learnable_params(make_spec(num_blocks=1))
        with pytest.raises(CheckpointError, match="lacks"):
            apply_checkpoint(make_spec(num_blocks=2), params)
