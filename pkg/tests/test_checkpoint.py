import json
import os

import numpy as np
import pytest

from moelab.checkpoint import (
    MANIFEST_NAME,
    PARAMS_NAME,
    load_checkpoint,
    save_checkpoint,
)
from moelab.convert import ConversionConfig, convert_model
from moelab.errors import ConfigError
from moelab.model import ModelSpec, init_dense_model
from moelab.routing import GateSpec


def sample_model():
    spec = ModelSpec(hidden=8, inner=12, n_layers=2)
    dense = init_dense_model(spec, np.random.default_rng(1))
    gate = GateSpec(kind="linear", top_k=1, encoder_dim=8)
    return convert_model(dense, ConversionConfig(gate=gate, seed=2))


def test_round_trip_is_bitwise(tmp_path):
    model = sample_model()
    save_checkpoint(model, tmp_path, extra={"steps": 7})
    loaded = load_checkpoint(tmp_path)
    assert loaded.spec == model.spec
    assert loaded.frozen == model.frozen
    assert set(loaded.params) == set(model.params)
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])


def test_save_load_save_produces_identical_bytes(tmp_path):
    model = sample_model()
    first = tmp_path / "a"
    second = tmp_path / "b"
    save_checkpoint(model, first)
    save_checkpoint(load_checkpoint(first), second)
    for fname in (MANIFEST_NAME, PARAMS_NAME):
        assert (first / fname).read_bytes() == (second / fname).read_bytes()


def test_manifest_records_layout(tmp_path):
    model = sample_model()
    save_checkpoint(model, tmp_path)
    manifest = json.load(open(tmp_path / MANIFEST_NAME))
    assert manifest["format_version"] == 1
    assert manifest["dtype"] == "<f8"
    tensors = manifest["tensors"]
    assert [t["name"] for t in tensors] == list(model.params)
    offset = 0
    for t in tensors:
        assert t["offset"] == offset
        offset += t["nbytes"]
    assert offset == os.path.getsize(tmp_path / PARAMS_NAME)


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(ConfigError, match="manifest"):
        load_checkpoint(tmp_path)


def test_wrong_version_rejected(tmp_path):
    save_checkpoint(sample_model(), tmp_path)
    manifest = json.load(open(tmp_path / MANIFEST_NAME))
    manifest["format_version"] = 99
    json.dump(manifest, open(tmp_path / MANIFEST_NAME, "w"))
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(tmp_path)


def test_wrong_dtype_rejected(tmp_path):
    save_checkpoint(sample_model(), tmp_path)
    manifest = json.load(open(tmp_path / MANIFEST_NAME))
    manifest["dtype"] = "<f4"
    json.dump(manifest, open(tmp_path / MANIFEST_NAME, "w"))
    with pytest.raises(ConfigError, match="dtype"):
        load_checkpoint(tmp_path)


def test_truncated_params_rejected(tmp_path):
    save_checkpoint(sample_model(), tmp_path)
    raw = (tmp_path / PARAMS_NAME).read_bytes()
    (tmp_path / PARAMS_NAME).write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ConfigError, match="inconsistent size"):
        load_checkpoint(tmp_path)


def test_frozen_set_survives(tmp_path):
    model = sample_model()
    assert model.frozen
    save_checkpoint(model, tmp_path)
    assert load_checkpoint(tmp_path).frozen == model.frozen
