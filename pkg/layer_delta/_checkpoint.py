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

"""Binary checkpoint container.

Layout::

    b"DLLM" | u32 version | u64 header_len | header JSON | padding | payload

All integers are little-endian. The payload starts at the first 64-byte
boundary after the header and every tensor blob starts at a 64-byte
aligned offset relative to the payload start.
"""

import logging
import os
import struct
from typing import Any, Dict, List, Mapping, Tuple, Union

import numpy as np

from ._delta import CompressedModel, DeltaModule, SharingPlan
from ._exceptions import (
    BadMagicError,
    CheckpointError,
    OverlappingOffsetsError,
    SerializationError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from ._models import ModelConfig, QuantPolicy, WeightSite
from ._quantizer import QuantizedTensor
from ._serializer import JsonSerializer
from ._tensor import Array, Tensor
from ._transformer import Model, parameter_names

_logger = logging.getLogger("layer_delta.checkpoint")

MAGIC = b"DLLM"
VERSION = 1
ALIGNMENT = 64

_PREAMBLE = struct.Struct("<4sIQ")
_NUMPY_DTYPES = {"f64": "<f8", "f32": "<f4", "i8": "i1", "u4p": "u1"}
_FLOAT_DTYPES = ("f64", "f32")
_serializer = JsonSerializer()

Checkpointable = Union[Model, CompressedModel]
_Blob = Tuple[Dict[str, Any], bytes]


def _align(n: int) -> int:
    return -(-n // ALIGNMENT) * ALIGNMENT


def _float_blob(name: str, array: Array, dtype: str) -> _Blob:
    data = np.ascontiguousarray(array, dtype=_NUMPY_DTYPES[dtype]).tobytes()
    return {"name": name, "dtype": dtype, "shape": list(array.shape)}, data


def _quantized_blobs(name: str, q: QuantizedTensor) -> List[_Blob]:
    dtype = "i8" if q.scheme == "absmax_int8" else "u4p"
    codes = {
        "name": name,
        "dtype": dtype,
        "shape": list(q.shape),
        "scales": f"{name}.scales",
        "scheme": q.scheme,
        "granularity": q.granularity,
    }
    return [
        (codes, np.ascontiguousarray(q.codes).tobytes()),
        _float_blob(f"{name}.scales", q.scales, "f32"),
    ]


def _collect(obj: Checkpointable, dtype: str) -> Tuple[Dict[str, Any], List[_Blob]]:
    header: Dict[str, Any] = {"config": obj.config.to_dict(), "float_dtype": dtype}
    blobs: List[_Blob] = []
    if isinstance(obj, Model):
        header["kind"] = "model"
        for name, tensor in obj.named_parameters():
            blobs.append(_float_blob(name, tensor.data, dtype))
        return header, blobs

    header["kind"] = "compressed"
    header["plan"] = obj.plan.to_dict()
    header["quant_policy"] = obj.quant_policy.to_dict() if obj.quant_policy else None
    for name in parameter_names(obj.config):
        if name in obj.params:
            blobs.append(_float_blob(name, obj.params[name].data, dtype))
        elif name in obj.quantized:
            blobs.extend(_quantized_blobs(name, obj.quantized[name]))
    for group, modules in (("deltas", obj.deltas), ("adapters", obj.adapters)):
        header[group] = {
            site.name: {"rank": m.rank, "scaling": m.scaling, "init_method": m.init_method}
            for site, m in modules.items()
        }
        for site, module in modules.items():
            blobs.append(_float_blob(f"{group}.{site.name}.A", module.A.data, dtype))
            blobs.append(_float_blob(f"{group}.{site.name}.B", module.B.data, dtype))
    return header, blobs


def dumps(obj: Checkpointable, dtype: str = "f32") -> bytes:
    """Encodes a model or compressed model into container bytes.

    Float tensors are stored as ``dtype`` ('f32' or 'f64'); quantization
    scales are always 'f32'.
    """
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(
            f"Unknown option for dtype: '{dtype}'. Available options are: 'f32', 'f64'"
        )
    header, blobs = _collect(obj, dtype)
    table = []
    offset = 0
    for entry, data in blobs:
        offset = _align(offset)
        table.append(dict(entry, offset=offset, length=len(data)))
        offset += len(data)
    header["tensors"] = table
    for entry in table:
        _logger.debug(
            "Tensor %r: %s %s at offset %d", entry["name"], entry["dtype"], entry["shape"], entry["offset"]
        )
    header_bytes = _serializer.dumps(header)

    buffer = bytearray(_PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)))
    buffer += header_bytes
    payload_start = _align(len(buffer))
    buffer += bytes(payload_start - len(buffer))
    for entry, (_, data) in zip(table, blobs):
        buffer += bytes(payload_start + entry["offset"] - len(buffer))
        buffer += data
    return bytes(buffer)


def save(obj: Checkpointable, path: Union[str, "os.PathLike[str]"], dtype: str = "f32") -> None:
    data = dumps(obj, dtype)
    with open(path, "wb") as f:
        f.write(data)
    _logger.info("Saved %s checkpoint to '%s' (%d bytes)", type(obj).__name__, path, len(data))


def read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    """Validates the preamble and returns ``(header, payload_start)``."""
    if len(data) < _PREAMBLE.size:
        raise TruncatedPayloadError("File is too short to hold a checkpoint preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"Bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"Unsupported checkpoint version {version}")
    header_end = _PREAMBLE.size + header_len
    if header_end > len(data):
        raise TruncatedPayloadError("Header extends past the end of the file")
    try:
        header = _serializer.loads(data[_PREAMBLE.size : header_end])
    except SerializationError as e:
        raise CheckpointError("Checkpoint header isn't valid JSON", errors=(e,)) from None
    if not isinstance(header, dict) or "tensors" not in header:
        raise CheckpointError("Checkpoint header has no tensor table")
    return header, _align(header_end)


def _check_table(table: List[Dict[str, Any]], payload_size: int) -> None:
    spans = []
    for entry in table:
        offset, length = int(entry["offset"]), int(entry["length"])
        if offset < 0 or length < 0 or offset + length > payload_size:
            raise TruncatedPayloadError(
                f"Tensor '{entry['name']}' extends past the end of the file"
            )
        spans.append((offset, offset + length, entry["name"]))
    spans.sort()
    for (_, end, first), (start, _, second) in zip(spans, spans[1:]):
        if start < end:
            raise OverlappingOffsetsError(f"Tensors '{first}' and '{second}' overlap")


def _expected_length(entry: Mapping[str, Any]) -> int:
    shape = [int(d) for d in entry["shape"]]
    if entry["dtype"] == "u4p":
        return shape[0] * -(-shape[1] // 2)
    return int(np.prod(shape, dtype=np.int64)) * np.dtype(_NUMPY_DTYPES[entry["dtype"]]).itemsize


def _read_arrays(data: bytes, header: Dict[str, Any], payload_start: int) -> Dict[str, Array]:
    table = header["tensors"]
    payload = memoryview(data)[payload_start:]
    try:
        _check_table(table, len(payload))
        arrays = {}
        for entry in table:
            dtype = entry["dtype"]
            if dtype not in _NUMPY_DTYPES:
                raise CheckpointError(f"Unknown dtype '{dtype}' for '{entry['name']}'")
            if _expected_length(entry) != entry["length"]:
                raise CheckpointError(f"Tensor '{entry['name']}' has the wrong byte length")
            raw = payload[entry["offset"] : entry["offset"] + entry["length"]]
            array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[dtype])
            if dtype == "u4p":
                rows, cols = entry["shape"]
                array = array.reshape(rows, -(-cols // 2))
            else:
                array = array.reshape(entry["shape"])
            arrays[entry["name"]] = array.copy()
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed tensor table: {e}", errors=(e,)) from None
    return arrays


def _tensor(array: Array) -> Tensor:
    return Tensor(array.astype(np.float64))


def loads(data: bytes) -> Checkpointable:
    header, payload_start = read_header(data)
    arrays = _read_arrays(data, header, payload_start)
    entries = {entry["name"]: entry for entry in header["tensors"]}
    try:
        config = ModelConfig.from_dict(header["config"])
        if header.get("kind") == "model":
            return Model(config, {n: _tensor(arrays[n]) for n in parameter_names(config)})
        if header.get("kind") != "compressed":
            raise CheckpointError(f"Unknown checkpoint kind '{header.get('kind')}'")

        plan = SharingPlan.from_dict(header["plan"])
        policy = header.get("quant_policy")
        params: Dict[str, Tensor] = {}
        quantized: Dict[str, QuantizedTensor] = {}
        targets = {t.name for t in plan.targets}
        for name in parameter_names(config):
            if name in targets:
                continue
            entry = entries.get(name)
            if entry is None:
                raise CheckpointError(f"Checkpoint is missing tensor '{name}'")
            if entry["dtype"] in _FLOAT_DTYPES:
                params[name] = _tensor(arrays[name])
            else:
                quantized[name] = QuantizedTensor(
                    codes=arrays[name],
                    scales=arrays[entry["scales"]],
                    shape=(int(entry["shape"][0]), int(entry["shape"][1])),
                    bits=8 if entry["dtype"] == "i8" else 4,
                    scheme=entry["scheme"],
                    granularity=entry.get("granularity", "row"),
                )

        modules: Dict[str, Dict[WeightSite, DeltaModule]] = {}
        for group in ("deltas", "adapters"):
            modules[group] = {}
            for site_name, meta in header.get(group, {}).items():
                a_name, b_name = f"{group}.{site_name}.A", f"{group}.{site_name}.B"
                if a_name not in arrays or b_name not in arrays:
                    raise CheckpointError(f"Checkpoint is missing the A/B pair of '{site_name}'")
                modules[group][WeightSite.from_name(site_name)] = DeltaModule(
                    A=_tensor(arrays[a_name]),
                    B=_tensor(arrays[b_name]),
                    rank=int(meta["rank"]),
                    scaling=float(meta["scaling"]),
                    init_method=meta["init_method"],
                )
        return CompressedModel(
            config,
            params,
            plan,
            modules["deltas"],
            modules["adapters"],
            quantized=quantized,
            quant_policy=QuantPolicy.from_dict(policy) if policy else None,
        )
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"Invalid checkpoint contents: {e}", errors=(e,)) from None


def load(path: Union[str, "os.PathLike[str]"]) -> Checkpointable:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Couldn't read checkpoint '{path}': {e.strerror}", errors=(e,)) from None
    obj = loads(data)
    _logger.info("Loaded %s checkpoint from '%s' (%d bytes)", type(obj).__name__, path, len(data))
    return obj
