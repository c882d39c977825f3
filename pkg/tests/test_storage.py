"""
Tests for the binary tensor container and checkpoints.
"""

import struct

import numpy as np
import pytest
import torch

from cobra_wsss.core.branches import CobraModel
from cobra_wsss.core.exceptions import CheckpointError, StorageError
from cobra_wsss.core.storage import MAGIC, TensorStore, load_checkpoint, load_state_into, save_checkpoint

from .helpers import tiny_config


class TestTensorStore:
    """Container layout, dtypes and failure modes."""

    def setup_method(self):
        self.tensors = {
            "f32": torch.rand(2, 3),
            "f64": torch.rand(4, dtype=torch.float64),
            "i64": torch.arange(6).reshape(3, 2),
            "u8": np.array([[0, 255]], dtype=np.uint8),
            "flag": torch.tensor([True, False]),
            "scalar": torch.tensor(1.5),
        }

    def test_round_trip(self, tmp_path):
        store = TensorStore(tmp_path / "t.cbt")
        store.write(self.tensors, {"id": "x", "epoch": 3})
        tensors, meta = store.read()
        assert meta == {"id": "x", "epoch": 3}
        assert list(tensors) == list(self.tensors)
        for name, value in self.tensors.items():
            expected = torch.as_tensor(value)
            assert tensors[name].dtype == expected.dtype
            assert torch.equal(tensors[name], expected)

    def test_header(self, tmp_path):
        TensorStore(tmp_path / "t.cbt").write({"a": torch.zeros(1)})
        raw = (tmp_path / "t.cbt").read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<H", raw[4:6]) == (1,)

    def test_no_temporary_file_left(self, tmp_path):
        TensorStore(tmp_path / "t.cbt").write({"a": torch.zeros(1)})
        assert [p.name for p in tmp_path.iterdir()] == ["t.cbt"]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.cbt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(StorageError):
            TensorStore(path).read()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.cbt"
        TensorStore(path).write({"a": torch.rand(10)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(StorageError):
            TensorStore(path).read()

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageError):
            TensorStore(tmp_path / "none.cbt").read()

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(StorageError):
            TensorStore(tmp_path / "t.cbt").write({"c": np.zeros(2, dtype=np.complex64)})


class TestCheckpoints:
    """Model state round trip and mismatch reporting."""

    def setup_method(self):
        self.cfg = tiny_config().model
        self.model = CobraModel(self.cfg)

    def test_round_trip(self, tmp_path):
        save_checkpoint(self.model, tmp_path / "c.cbt", {"epoch": 1})
        state, meta = load_checkpoint(tmp_path / "c.cbt")
        other = CobraModel(self.cfg)
        load_state_into(other, state)
        assert meta["epoch"] == 1
        for name, tensor in self.model.state_dict().items():
            assert torch.equal(other.state_dict()[name], tensor)

    def test_shape_mismatch_names_the_tensor(self, tmp_path):
        save_checkpoint(self.model, tmp_path / "c.cbt", {})
        state, _ = load_checkpoint(tmp_path / "c.cbt")
        wider = self.cfg.model_copy(update={"proj_dim": 16})
        with pytest.raises(CheckpointError) as exc:
            load_state_into(CobraModel(wider), state)
        assert exc.value.tensor_name == "cak.projection.linear.weight"
        assert "cak.projection.linear.weight" in str(exc.value)

    def test_missing_tensor(self):
        state = dict(self.model.state_dict())
        state.pop("sak.backbone.cls_token")
        with pytest.raises(CheckpointError) as exc:
            load_state_into(CobraModel(self.cfg), state)
        assert exc.value.tensor_name == "sak.backbone.cls_token"

    def test_unexpected_tensor(self):
        state = dict(self.model.state_dict())
        state["extra"] = torch.zeros(1)
        with pytest.raises(CheckpointError) as exc:
            load_state_into(CobraModel(self.cfg), state)
        assert exc.value.tensor_name == "extra"
