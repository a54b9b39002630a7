"""Checkpoint round-trips must be bit-exact; corruption must be caught."""

import numpy as np
import pytest

from gatevit import backbone as bb
from gatevit import policy as pol
from gatevit.checkpoint import load_checkpoint, save_checkpoint
from gatevit.errors import CheckpointError
from gatevit.harness import load_model, save_model
from gatevit.runconfig import parse_config
from gatevit.training import ModelBundle


def run_cfg(adaptive=True):
    return parse_config({
        "model": {"image_size": 12, "patch_size": 4, "channels": 1,
                  "embed_dim": 8, "num_heads": 2, "num_blocks": 2,
                  "num_classes": 4},
        "data": {"kind": "synthetic", "num_train": 8, "num_val": 8},
        "adaptive": adaptive,
    })


def test_roundtrip_bit_exact(tmp_path, rng):
    rc = run_cfg()
    model = ModelBundle.init(rc.model, rng, dtype=np.float32)
    path = tmp_path / "ck.bin"
    save_model(path, rc, model)
    loaded, cfg_dict = load_model(path)
    assert cfg_dict["model"]["embed_dim"] == 8
    orig = model.named_tensors()
    new = loaded.named_tensors()
    assert set(orig) == set(new)
    for name in orig:
        assert orig[name].data.dtype == new[name].data.dtype
        assert np.array_equal(orig[name].data, new[name].data), name


def test_roundtrip_float64(tmp_path, rng):
    rc = run_cfg(adaptive=False)
    model = ModelBundle.init(rc.model, rng, adaptive=False, dtype=np.float64)
    path = tmp_path / "ck.bin"
    save_model(path, rc, model)
    loaded, _ = load_model(path)
    assert loaded.decisions is None
    for name, t in model.named_tensors().items():
        assert np.array_equal(t.data, loaded.named_tensors()[name].data)


def test_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path, rng):
    rc = run_cfg()
    model = ModelBundle.init(rc.model, rng)
    path = tmp_path / "ck.bin"
    save_model(path, rc, model)
    blob = path.read_bytes()
    path.write_bytes(blob[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_header_payload_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck.bin", {"x": 1},
                    {"a": np.arange(6, dtype=np.float32)})
    blob = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(blob + b"extra")
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "bad.bin")


def test_garbled_header(tmp_path, rng):
    rc = run_cfg()
    model = ModelBundle.init(rc.model, rng)
    path = tmp_path / "ck.bin"
    save_model(path, rc, model)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
