#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

import json
import struct

import numpy as np
import pytest

from layer_delta import (
    BadMagicError,
    CheckpointError,
    CompressedModel,
    Model,
    OverlappingOffsetsError,
    QuantPolicy,
    TruncatedPayloadError,
    UnsupportedVersionError,
    attach_adapters,
    build_plan,
    compress,
    dumps,
    forward,
    load,
    loads,
    quantize_model,
    read_header,
    save,
)
from layer_delta._checkpoint import ALIGNMENT


@pytest.fixture
def compressed(tiny_config, tiny_model):
    plan = build_plan(tiny_config, "sequential", "both", k=2)
    return compress(tiny_model, plan, rank=3)


def rebuild(header, payload):
    """Re-encodes a container around an edited header."""
    header_bytes = json.dumps(header).encode()
    data = struct.pack("<4sIQ", b"DLLM", 1, len(header_bytes)) + header_bytes
    data += bytes(-len(data) % ALIGNMENT)
    return data + payload


def split(data):
    header, start = read_header(data)
    return header, data[start:]


def test_model_round_trip_f64(tiny_model):
    loaded = loads(dumps(tiny_model, dtype="f64"))

    assert isinstance(loaded, Model)
    assert loaded.config == tiny_model.config
    for name, tensor in tiny_model.named_parameters():
        np.testing.assert_array_equal(loaded.params[name].data, tensor.data)


def test_model_round_trip_f32(tiny_model):
    data = dumps(tiny_model)
    loaded = loads(data)

    for name, tensor in tiny_model.named_parameters():
        np.testing.assert_array_equal(
            loaded.params[name].data, tensor.data.astype(np.float32).astype(np.float64)
        )
    assert dumps(loaded) == data


def test_header_layout(compressed):
    data = dumps(compressed)
    header, start = read_header(data)

    assert data[:4] == b"DLLM"
    assert struct.unpack_from("<I", data, 4) == (1,)
    assert start % ALIGNMENT == 0
    assert header["kind"] == "compressed"
    assert header["float_dtype"] == "f32"
    assert header["config"] == compressed.config.to_dict()
    assert header["plan"] == compressed.plan.to_dict()
    assert header["quant_policy"] is None
    assert all(entry["offset"] % ALIGNMENT == 0 for entry in header["tensors"])
    assert len(data) == start + max(e["offset"] + e["length"] for e in header["tensors"])
    # Targets aren't stored, only their A/B pairs
    names = {entry["name"] for entry in header["tensors"]}
    for site in compressed.plan.targets:
        assert site.name not in names
        assert f"deltas.{site.name}.A" in names
        assert f"deltas.{site.name}.B" in names


def test_compressed_round_trip(compressed):
    loaded = loads(dumps(compressed, dtype="f64"))

    assert isinstance(loaded, CompressedModel)
    assert loaded.plan == compressed.plan
    assert loaded.quant_policy is None
    for site, delta in compressed.deltas.items():
        restored = loaded.deltas[site]
        assert restored.rank == delta.rank
        assert restored.scaling == delta.scaling
        assert restored.init_method == delta.init_method
        np.testing.assert_array_equal(restored.A.data, delta.A.data)
        np.testing.assert_array_equal(restored.B.data, delta.B.data)

    tokens = np.arange(20).reshape(2, 10)
    np.testing.assert_array_equal(
        forward(loaded, tokens).data, forward(compressed, tokens).data
    )


def test_adapters_round_trip(compressed):
    attach_adapters(compressed, rank=2, lora_alpha=4.0)
    loaded = loads(dumps(compressed, dtype="f64"))

    assert set(loaded.adapters) == set(compressed.adapters)
    for site, adapter in compressed.adapters.items():
        assert loaded.adapters[site].scaling == 2.0
        np.testing.assert_array_equal(loaded.adapters[site].B.data, adapter.B.data)


@pytest.mark.parametrize("bits", [4, 8])
def test_quantized_round_trip(compressed, bits):
    policy = QuantPolicy(bits=bits, strategy="AnchorSkip")
    quantized = quantize_model(compressed, policy)
    data = dumps(quantized)
    loaded = loads(data)

    assert loaded.quant_policy == policy
    assert set(loaded.quantized) == set(quantized.quantized)
    for name, q in quantized.quantized.items():
        restored = loaded.quantized[name]
        assert restored.scheme == q.scheme
        assert restored.shape == q.shape
        assert restored.codes.dtype == q.codes.dtype
        np.testing.assert_array_equal(restored.codes, q.codes)
        np.testing.assert_array_equal(restored.scales, q.scales)
    assert dumps(loaded) == data

    header, _ = read_header(data)
    dtypes = {entry["name"]: entry["dtype"] for entry in header["tensors"]}
    name = next(iter(quantized.quantized))
    assert dtypes[name] == ("i8" if bits == 8 else "u4p")
    assert dtypes[f"{name}.scales"] == "f32"


def test_save_and_load(tmp_path, compressed):
    path = tmp_path / "student.dllm"
    save(compressed, path)
    assert path.read_bytes() == dumps(compressed)
    assert isinstance(load(path), CompressedModel)


def test_load_missing_file(tmp_path):
    with pytest.raises(CheckpointError) as e:
        load(tmp_path / "missing.dllm")
    assert str(e.value).startswith("Couldn't read checkpoint ")


def test_unknown_dtype(tiny_model):
    with pytest.raises(ValueError) as e:
        dumps(tiny_model, dtype="f16")
    assert str(e.value) == (
        "Unknown option for dtype: 'f16'. Available options are: 'f32', 'f64'"
    )


def test_bad_magic(tiny_model):
    data = b"GGUF" + dumps(tiny_model)[4:]
    with pytest.raises(BadMagicError) as e:
        loads(data)
    assert str(e.value) == "Bad magic bytes b'GGUF', expected b'DLLM'"


def test_unsupported_version(tiny_model):
    data = bytearray(dumps(tiny_model))
    struct.pack_into("<I", data, 4, 2)
    with pytest.raises(UnsupportedVersionError) as e:
        loads(bytes(data))
    assert str(e.value) == "Unsupported checkpoint version 2"


@pytest.mark.parametrize("size", [0, 3, 15])
def test_truncated_preamble(size):
    with pytest.raises(TruncatedPayloadError) as e:
        loads(b"DLLM\x01\x00\x00\x00\xff\xff\xff\xff\x00\x00\x00\x00"[:size])
    assert str(e.value) == "File is too short to hold a checkpoint preamble"


def test_truncated_header(tiny_model):
    with pytest.raises(TruncatedPayloadError) as e:
        loads(dumps(tiny_model)[:40])
    assert str(e.value) == "Header extends past the end of the file"


def test_truncated_payload(tiny_model):
    with pytest.raises(TruncatedPayloadError) as e:
        loads(dumps(tiny_model)[:-10])
    assert str(e.value) == "Tensor 'output' extends past the end of the file"


def test_overlapping_offsets(tiny_model):
    header, payload = split(dumps(tiny_model))
    header["tensors"][1]["offset"] = header["tensors"][0]["offset"]

    with pytest.raises(OverlappingOffsetsError) as e:
        loads(rebuild(header, payload))
    assert str(e.value) == "Tensors 'blocks.0.attn_norm' and 'embed' overlap"


def test_wrong_byte_length(tiny_model):
    header, payload = split(dumps(tiny_model))
    header["tensors"][1]["length"] -= 4

    with pytest.raises(CheckpointError) as e:
        loads(rebuild(header, payload))
    assert str(e.value) == "Tensor 'blocks.0.attn_norm' has the wrong byte length"


def test_invalid_header_json(tiny_model):
    data = bytearray(dumps(tiny_model))
    data[16] = ord("[")
    with pytest.raises(CheckpointError) as e:
        loads(bytes(data))
    assert str(e.value) == "Checkpoint header isn't valid JSON"


def test_missing_tensor_table():
    with pytest.raises(CheckpointError) as e:
        loads(rebuild({"kind": "model"}, b""))
    assert str(e.value) == "Checkpoint header has no tensor table"


def test_unknown_kind(tiny_model):
    header, payload = split(dumps(tiny_model))
    header["kind"] = "tokenizer"
    with pytest.raises(CheckpointError) as e:
        loads(rebuild(header, payload))
    assert str(e.value) == "Unknown checkpoint kind 'tokenizer'"


def test_missing_delta_pair(compressed):
    header, payload = split(dumps(compressed))
    header["tensors"] = [e for e in header["tensors"] if not e["name"].endswith(".B")]
    with pytest.raises(CheckpointError) as e:
        loads(rebuild(header, payload))
    assert str(e.value).startswith("Checkpoint is missing the A/B pair of ")
