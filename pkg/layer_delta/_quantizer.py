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

"""Weight-only quantization of stored base matrices."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from ._delta import CompressedModel
from ._exceptions import ShapeError
from ._models import QuantPolicy
from ._tensor import Array, Tensor

_logger = logging.getLogger("layer_delta.quantizer")

#: The 16 NormalFloat levels of the QLoRA NF4 data type (the table shipped
#: by bitsandbytes): standard-normal quantiles normalized to [-1, 1]. The
#: table is asymmetric around an exact zero (7 negative and 8 positive
#: levels) so 0.0 has a code of its own.
NF4_LEVELS: Array = np.array(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=np.float64,
)
NF4_LEVELS.setflags(write=False)
#: Code of the 0.0 level
NF4_ZERO_CODE = 7

_SCHEMES = {8: "absmax_int8", 4: "nf4"}


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus float32 scales of a 2-D matrix.

    ``absmax_int8`` codes are ``int8`` with shape ``[rows, cols]``. ``nf4``
    codes index :data:`NF4_LEVELS` and are packed two per byte along each
    row, the even column in the low nibble.
    """

    codes: Array
    scales: Array
    shape: Tuple[int, int]
    bits: int
    scheme: str
    granularity: str = "row"

    @property
    def nbytes(self) -> int:
        return int(self.codes.nbytes + self.scales.nbytes)

    def unpacked_codes(self) -> Array:
        if self.scheme == "absmax_int8":
            return self.codes.astype(np.int64)
        return unpack_nibbles(self.codes, self.shape[1])

    def row_scales(self) -> Array:
        scales = self.scales.astype(np.float64)
        if self.granularity == "tensor":
            return np.full(self.shape[0], scales[0])
        return scales

    def dequantize(self) -> Array:
        return dequantize_tensor(self)


def pack_nibbles(codes: Array) -> Array:
    """Packs 4-bit codes of a ``[rows, cols]`` array two per byte."""
    rows, cols = codes.shape
    padded = np.zeros((rows, cols + cols % 2), dtype=np.uint8)
    padded[:, :cols] = codes
    return (padded[:, 0::2] | (padded[:, 1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: Array, cols: int) -> Array:
    low = packed & 0x0F
    high = packed >> 4
    codes = np.empty((packed.shape[0], packed.shape[1] * 2), dtype=np.int64)
    codes[:, 0::2] = low
    codes[:, 1::2] = high
    return codes[:, :cols]


def quantize_tensor(
    w: Any, bits: int = 8, scheme: Optional[str] = None, granularity: str = "row"
) -> QuantizedTensor:
    """Quantizes a 2-D matrix with one float32 scale per row (or per tensor).

    ``absmax_int8``: ``scale = absmax / 127`` and codes are the rounded
    ratio clipped to [-127, 127]. ``nf4``: ``scale = absmax`` and codes
    are the nearest :data:`NF4_LEVELS` entry. All-zero rows get a zero
    scale and the zero code.
    """
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"Only 2-D matrices can be quantized, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("Matrix contains non-finite values")
    if bits not in _SCHEMES:
        raise ValueError("'bits' must be either 4 or 8")
    scheme = scheme or _SCHEMES[bits]
    if scheme != _SCHEMES[bits]:
        raise ValueError(f"Scheme '{scheme}' doesn't use {bits} bits")
    if granularity not in ("row", "tensor"):
        raise ValueError("'granularity' must be one of 'row', 'tensor'")

    absmax = np.abs(data).max(axis=1) if data.size else np.zeros(data.shape[0])
    if granularity == "tensor":
        absmax = np.array([absmax.max() if absmax.size else 0.0])
    divisor = 127.0 if scheme == "absmax_int8" else 1.0
    scales = (absmax / divisor).astype(np.float32)
    row = scales.astype(np.float64)
    if granularity == "tensor":
        row = np.full(data.shape[0], row[0])
    safe = np.where(row > 0, row, 1.0)[:, None]

    if scheme == "absmax_int8":
        codes = np.clip(np.rint(data / safe), -127, 127).astype(np.int8)
    else:
        normalized = np.clip(data / safe, -1.0, 1.0)
        index = np.abs(normalized[..., None] - NF4_LEVELS).argmin(axis=-1)
        index[row == 0] = NF4_ZERO_CODE
        codes = pack_nibbles(index.astype(np.uint8))
    return QuantizedTensor(
        codes=codes,
        scales=scales,
        shape=(int(data.shape[0]), int(data.shape[1])),
        bits=bits,
        scheme=scheme,
        granularity=granularity,
    )


def dequantize_tensor(q: QuantizedTensor) -> Array:
    """Float64 matrix of the original shape."""
    codes = q.unpacked_codes()
    values = codes.astype(np.float64) if q.scheme == "absmax_int8" else NF4_LEVELS[codes]
    return values * q.row_scales()[:, None]


def _quantizable(compressed: CompressedModel, policy: QuantPolicy) -> Dict[str, bool]:
    anchors = {site.name for site in compressed.plan.anchors}
    names = list(compressed.params) + list(compressed.quantized)
    selected = {}
    for name in names:
        if name.endswith("_norm"):
            continue
        is_block_matrix = name.startswith("blocks.")
        if policy.strategy == "AllQuant":
            selected[name] = True
        elif is_block_matrix and name not in anchors:
            selected[name] = True
    return selected


def quantize_model(compressed: CompressedModel, policy: QuantPolicy) -> CompressedModel:
    """Quantizes the stored base matrices of a compressed model.

    ``AllQuant`` covers every stored 2-D tensor including the embedding
    and output projection; ``AnchorSkip`` covers stored block matrices
    that aren't anchors. Norms, deltas and adapters stay in float.
    """
    selected = _quantizable(compressed, policy)
    params: Dict[str, Tensor] = {}
    quantized = {}
    for name in list(compressed.params) + list(compressed.quantized):
        if name not in selected:
            params[name] = Tensor(compressed.stored(name).data.copy())
            continue
        weight = compressed.stored(name).data
        zero_rows = int(np.sum(~weight.any(axis=1)))
        if zero_rows:
            _logger.warning("Quantizing '%s' with %d all-zero rows", name, zero_rows)
        quantized[name] = quantize_tensor(
            weight, policy.bits, policy.scheme, policy.granularity
        )
    result = CompressedModel(
        compressed.config,
        params,
        compressed.plan,
        {site: d.copy() for site, d in compressed.deltas.items()},
        {site: a.copy() for site, a in compressed.adapters.items()},
        quantized=quantized,
        quant_policy=policy,
    )
    _logger.info(
        "Quantized %d tensors to %d bits with %s (%d kept in float)",
        len(quantized),
        policy.bits,
        policy.strategy,
        sum(1 for n in params if not n.endswith("_norm")),
    )
    return result
