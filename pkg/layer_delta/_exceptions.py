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

from typing import Any, Tuple


class LayerDeltaWarning(Warning):
    """Generic warning for the 'layer-delta' package."""


class ConvergenceWarning(LayerDeltaWarning):
    """Warning for iterative routines that stopped at their iteration cap."""


class LayerDeltaError(Exception):
    """Generic exception for the 'layer-delta' package.

    For the 'errors' attribute, errors are ordered from
    most recently raised (index=0) to least recently raised (index=N)
    """

    def __init__(self, message: Any, errors: Tuple[Exception, ...] = ()):
        super().__init__(message)
        self.errors = tuple(errors)
        self.message = message

    def __repr__(self) -> str:
        parts = [repr(self.message)]
        if self.errors:
            parts.append(f"errors={self.errors!r}")
        return "{}({})".format(self.__class__.__name__, ", ".join(parts))

    def __str__(self) -> str:
        return str(self.message)


class ShapeError(LayerDeltaError):
    """Tensor shapes don't fit the operation"""


class ConfigError(LayerDeltaError):
    """A configuration value or config file field is invalid"""


class PlanError(LayerDeltaError):
    """A sharing plan is invalid or doesn't match the model it's applied to"""


class EmptyLossError(LayerDeltaError):
    """Every position of a loss was ignored"""

    def __str__(self) -> str:
        return f"empty loss: {self.message}" if self.message else "empty loss"


class TrainingError(LayerDeltaError):
    """Error raised while training a model"""


class CorpusError(LayerDeltaError):
    """Error raised while loading or splitting a text corpus"""


class SerializationError(LayerDeltaError):
    """Error that occurred during the serialization or
    deserialization of a header, plan or report
    """


class CheckpointError(LayerDeltaError):
    """Error raised while reading or writing a checkpoint container"""


class BadMagicError(CheckpointError):
    """The file doesn't start with the container magic bytes"""


class UnsupportedVersionError(CheckpointError):
    """The container version isn't one this package can read"""


class TruncatedPayloadError(CheckpointError):
    """The header or a tensor blob extends past the end of the file"""


class OverlappingOffsetsError(CheckpointError):
    """Two tensor blobs in the container share bytes"""
