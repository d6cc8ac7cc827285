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

import io
import logging

import numpy as np
import pytest

from layer_delta import (
    ConvergenceWarning,
    build_plan,
    compress,
    debug_logging,
    truncated_svd,
)
from layer_delta import _linalg


def test_debug_logging(tiny_config, tiny_model):
    debug_logging()

    stream = io.StringIO()
    logging.getLogger("layer_delta.delta").addHandler(logging.StreamHandler(stream))

    plan = build_plan(tiny_config, "sequential", "mlp", k=2)
    compress(tiny_model, plan, rank=2)

    lines = stream.getvalue().split("\n")
    print(lines)
    assert any(
        line.startswith("Compressed 6 sites with 'svd' init: ") for line in lines
    )
    for name in ("delta", "pmr", "checkpoint"):
        assert logging.getLogger(f"layer_delta.{name}").level == logging.DEBUG


def test_library_is_silent_by_default(capsys, tiny_config, tiny_model):
    plan = build_plan(tiny_config, "sequential", "mlp", k=2)
    compress(tiny_model, plan, rank=2)

    captured = capsys.readouterr()
    assert captured.out == ""
    assert captured.err == ""


def test_convergence_warning_is_logged(monkeypatch, caplog):
    monkeypatch.setattr(_linalg, "JACOBI_MAX_SWEEPS", 1)
    matrix = np.random.default_rng(4).normal(size=(6, 5))

    with caplog.at_level(logging.WARNING, logger="layer_delta.linalg"):
        with pytest.warns(ConvergenceWarning):
            truncated_svd(matrix, 2)

    assert [r.name for r in caplog.records] == ["layer_delta.linalg"]
