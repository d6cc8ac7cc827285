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

import pytest

from layer_delta import (
    BadMagicError,
    CheckpointError,
    ConvergenceWarning,
    EmptyLossError,
    LayerDeltaError,
    LayerDeltaWarning,
    PlanError,
    ShapeError,
)


def test_exception_repr_and_str():
    e = LayerDeltaError({"errors": [{"status": 500}]})
    assert repr(e) == "LayerDeltaError({'errors': [{'status': 500}]})"
    assert str(e) == "{'errors': [{'status': 500}]}"

    e = LayerDeltaError("error", errors=(ValueError("value error"),))
    assert repr(e) == "LayerDeltaError('error', errors={!r})".format(
        e.errors,
    )
    assert str(e) == "error"


def test_subclass_repr():
    e = BadMagicError("Bad magic bytes")
    assert repr(e) == "BadMagicError('Bad magic bytes')"
    assert isinstance(e, CheckpointError)
    assert isinstance(e, LayerDeltaError)


def test_empty_loss_error_str():
    assert str(EmptyLossError("every position is ignored")) == (
        "empty loss: every position is ignored"
    )
    assert str(EmptyLossError("")) == "empty loss"


def test_plan_error_is_not_shape_error():
    with pytest.raises(PlanError):
        try:
            raise PlanError("")
        except ShapeError:
            pass


def test_convergence_warning_hierarchy():
    assert issubclass(ConvergenceWarning, LayerDeltaWarning)
    assert issubclass(LayerDeltaWarning, Warning)
    assert not issubclass(ConvergenceWarning, LayerDeltaError)
