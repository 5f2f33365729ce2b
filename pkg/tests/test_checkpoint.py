import json

import numpy as np
import pytest

from contentctr.autodiff import AdamState
from contentctr.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, to_f32_grid
from contentctr.model import ContentCTR, ModelConfig

CFG = ModelConfig(n=4, d=8, d_h=4, n_h=2, ffn_hidden=8, d_visual=5, d_text=5, n_streamers=3)


def _model():
    model = ContentCTR(CFG)
    model.load_arrays({k: to_f32_grid(v) for k, v in model.parameter_arrays().items()})
    return model


def test_save_load_save_is_bit_exact(tmp_path):
    model = _model()
    adam = AdamState(lr=0.01, t=3, m={k: to_f32_grid(v * 0.1) for k, v in model.parameter_arrays().items()},
                     v={k: to_f32_grid(v * v) for k, v in model.parameter_arrays().items()})
    save_checkpoint(tmp_path / "a", model, adam, {"epoch": 3})
    loaded, adam2, meta = load_checkpoint(tmp_path / "a", expect_config=CFG)
    assert meta == {"epoch": 3} and adam2.t == 3 and adam2.lr == 0.01
    for k, v in model.parameter_arrays().items():
        assert np.array_equal(loaded.parameter_arrays()[k], v)
        assert np.array_equal(adam2.m[k], adam.m[k]) and np.array_equal(adam2.v[k], adam.v[k])
    save_checkpoint(tmp_path / "b", loaded, adam2, meta)
    for name in ("weights.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_f32_grid_is_idempotent():
    x = np.random.default_rng(0).normal(size=50)
    g = to_f32_grid(x)
    assert np.array_equal(to_f32_grid(g), g)
    assert np.max(np.abs(g - x) / np.abs(x)) < 2 ** -23


def test_without_adam(tmp_path):
    save_checkpoint(tmp_path, _model())
    _, adam, meta = load_checkpoint(tmp_path)
    assert adam is None and meta == {}


def test_bad_magic_rejected(tmp_path):
    save_checkpoint(tmp_path, _model())
    blob = tmp_path / "weights.bin"
    blob.write_bytes(b"XXXX" + blob.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_truncated_blob_rejected(tmp_path):
    save_checkpoint(tmp_path, _model())
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_config_mismatch_and_missing(tmp_path):
    save_checkpoint(tmp_path / "c", _model())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c", expect_config=ModelConfig())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")
    manifest = tmp_path / "c" / "manifest.json"
    doc = json.loads(manifest.read_text())
    doc["format"] = "other"
    manifest.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
