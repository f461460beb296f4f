"""
Unit Tests for the HEDL container
Weights round trips and corrupt-file handling
"""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from checkpoint import (
    META_KEY,
    decode_container,
    encode_container,
    load_weights,
    read_container,
    read_meta,
    save_weights,
    write_container,
)
from exceptions import ArtifactIOException
from model import forward_capture


class TestContainer:
    """Tests for encode_container and decode_container"""

    def test_mixed_entries(self):
        """Floats, ints, strings and empty arrays survive encoding"""
        entries = {
            "w": np.arange(6, dtype=np.float64).reshape(2, 3),
            "idx": np.array([[0, 1], [2, 3]], dtype=np.int64),
            "note": "héllo",
            "empty": np.zeros((0, 2)),
        }
        decoded = decode_container(encode_container(entries))
        assert np.array_equal(decoded["w"], entries["w"])
        assert decoded["idx"].dtype == np.int64
        assert decoded["note"] == "héllo"
        assert decoded["empty"].shape == (0, 2)

    def test_encoding_is_deterministic(self):
        """Entry order does not change the bytes"""
        a = encode_container({"b": np.ones(2), "a": np.zeros(3)})
        b = encode_container({"a": np.zeros(3), "b": np.ones(2)})
        assert a == b

    def test_bad_magic(self):
        """Wrong magic bytes are an artifact error"""
        blob = b"XXXX" + encode_container({"a": np.ones(2)})[4:]
        with pytest.raises(ArtifactIOException):
            decode_container(blob)

    def test_truncated(self):
        """Truncated tables and payloads are artifact errors"""
        blob = encode_container({"a": np.ones(4)})
        with pytest.raises(ArtifactIOException):
            decode_container(blob[:-8])
        with pytest.raises(ArtifactIOException):
            decode_container(blob[:10])

    def test_unsupported_dtype(self):
        """Complex arrays cannot be stored"""
        with pytest.raises(ArtifactIOException):
            encode_container({"c": np.array([1 + 2j])})

    def test_missing_file(self, tmp_path):
        """A missing file is an artifact error"""
        with pytest.raises(ArtifactIOException):
            read_container(tmp_path / "missing.hedl")


class TestWeights:
    """Tests for save_weights and load_weights"""

    def test_round_trip_preserves_outputs(self, tmp_path, random_weights):
        """Saved and loaded weights give identical logits"""
        loaded = load_weights(save_weights(random_weights, tmp_path / "model.hedl"))
        assert loaded.config == random_weights.config
        assert loaded.fingerprint() == random_weights.fingerprint()
        a, _ = forward_capture(random_weights, [0, 12, 1])
        b, _ = forward_capture(loaded, [0, 12, 1])
        assert np.array_equal(a.data, b.data)

    def test_loaded_arrays_are_writable(self, tmp_path, random_weights):
        """Loaded tensors can be edited in place"""
        loaded = load_weights(save_weights(random_weights, tmp_path / "model.hedl"))
        loaded["unembed"].data[0, 0] = 1.0


class TestCorruptArtifacts:
    """Damaged containers surface as ArtifactIOException"""

    def test_invalid_utf8_name(self):
        """A name byte outside UTF-8 is a corrupt container"""
        blob = bytearray(encode_container({"a": np.ones(2)}))
        assert blob[16:17] == b"a"
        blob[16] = 0xFF
        with pytest.raises(ArtifactIOException):
            decode_container(bytes(blob))

    def test_payload_not_a_whole_shape(self):
        """A shape that does not match its payload is a corrupt container"""
        blob = bytearray(encode_container({"a": np.ones(4)}))
        # shape u64 follows name length, name, dtype code and ndim
        blob[12 + 4 + 1 + 5:12 + 4 + 1 + 5 + 8] = (3).to_bytes(8, "little")
        with pytest.raises(ArtifactIOException):
            decode_container(bytes(blob))

    def test_metadata_not_json(self):
        """Unparseable or non-object metadata is an artifact error"""
        with pytest.raises(ArtifactIOException):
            read_meta({META_KEY: "{not json"})
        with pytest.raises(ArtifactIOException):
            read_meta({META_KEY: "[1, 2]"})
        with pytest.raises(ArtifactIOException):
            read_meta({})

    def test_weights_missing_tensor(self, tmp_path, random_weights):
        """A weights file without one parameter is an artifact error"""
        entries = read_container(save_weights(random_weights, tmp_path / "model.hedl"))
        del entries["unembed"]
        path = write_container(tmp_path / "partial.hedl", entries)
        with pytest.raises(ArtifactIOException):
            load_weights(path)

    def test_weights_bad_config(self, tmp_path, random_weights):
        """Metadata with an invalid or absent model config is an artifact error"""
        entries = read_container(save_weights(random_weights, tmp_path / "model.hedl"))
        meta = json.loads(entries[META_KEY])
        meta["config"]["n_layers"] = 0
        entries[META_KEY] = json.dumps(meta)
        with pytest.raises(ArtifactIOException):
            load_weights(write_container(tmp_path / "bad_config.hedl", entries))
        del meta["config"]
        entries[META_KEY] = json.dumps(meta)
        with pytest.raises(ArtifactIOException):
            load_weights(write_container(tmp_path / "no_config.hedl", entries))

    def test_weights_tensor_stored_as_text(self, tmp_path, random_weights):
        """A parameter entry holding a string is an artifact error"""
        entries = read_container(save_weights(random_weights, tmp_path / "model.hedl"))
        entries["ln_f.g"] = "oops"
        with pytest.raises(ArtifactIOException):
            load_weights(write_container(tmp_path / "text.hedl", entries))
