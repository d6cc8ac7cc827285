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

"""JSON encoding for checkpoint headers, config files and line reports."""

import json
from abc import ABC, abstractmethod
from typing import Any, Iterable, Iterator, List, Union

import numpy as np

from ._exceptions import SerializationError

Line = Union[bytes, str, Any]


def _describe(value: Any) -> str:
    return f"{value!r} (type: {type(value).__name__})"


class Serializer(ABC):
    """Converts between Python values and bytes."""

    @abstractmethod
    def loads(self, data: bytes) -> Any:
        ...

    @abstractmethod
    def dumps(self, data: Any) -> bytes:
        ...


class JsonSerializer(Serializer):
    """Compact JSON with sorted keys so equal values always encode to
    equal bytes. numpy scalars and arrays, sets and anything with a
    ``to_dict()`` method are accepted; NaN and infinities are not.
    """

    def default(self, data: Any) -> Any:
        if isinstance(data, np.generic):
            return data.item()
        if isinstance(data, np.ndarray):
            return data.tolist()
        if isinstance(data, (set, frozenset)):
            return sorted(data)
        to_dict = getattr(data, "to_dict", None)
        if callable(to_dict):
            return to_dict()
        raise SerializationError(f"Unable to serialize to JSON: {_describe(data)}")

    def encode(self, data: Any) -> bytes:
        text = json.dumps(
            data,
            default=self.default,
            ensure_ascii=False,
            allow_nan=False,
            sort_keys=True,
            separators=(",", ":"),
        )
        return text.encode("utf-8", "surrogatepass")

    def decode(self, data: bytes) -> Any:
        return json.loads(data) if data != b"" else None

    def loads(self, data: bytes) -> Any:
        try:
            return self.decode(data)
        except (ValueError, TypeError) as e:
            raise SerializationError(
                f"Unable to deserialize as JSON: {data!r}", errors=(e,)
            ) from None

    def dumps(self, data: Any) -> bytes:
        try:
            return self.encode(data)
        except (ValueError, UnicodeError, TypeError) as e:
            raise SerializationError(
                f"Unable to serialize to JSON: {_describe(data)}", errors=(e,)
            ) from None


class NdjsonSerializer(JsonSerializer):
    """One JSON document per line, used for training reports and CLI
    output. Pre-encoded ``str``/``bytes`` lines pass through unchanged.
    """

    def iter_loads(self, data: bytes) -> Iterator[Any]:
        for line in data.splitlines():
            if not line:
                continue
            try:
                yield self.decode(line)
            except (ValueError, TypeError) as e:
                raise SerializationError(
                    f"Unable to deserialize as NDJSON: {data!r}", errors=(e,)
                ) from None

    def loads(self, data: bytes) -> List[Any]:
        return list(self.iter_loads(data))

    def encode_line(self, line: Line) -> bytes:
        if isinstance(line, str):
            line = line.encode("utf-8", "surrogatepass")
        if isinstance(line, bytes):
            return line.rstrip(b"\n")
        try:
            return self.encode(line)
        except (ValueError, UnicodeError, TypeError) as e:
            raise SerializationError(
                f"Unable to serialize to NDJSON: {_describe(line)}", errors=(e,)
            ) from None

    def dumps(self, data: Union[bytes, str, Iterable[Line]]) -> bytes:
        lines = (data,) if isinstance(data, (bytes, str)) else data
        return b"".join(self.encode_line(line) + b"\n" for line in lines)
