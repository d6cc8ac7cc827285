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

import numpy as np
import pytest

from layer_delta import (
    EmptyLossError,
    ShapeError,
    Tensor,
    backward,
    kl_divergence_logits,
    softmax_cross_entropy,
)
from layer_delta._losses import IGNORE_INDEX, log_softmax


@pytest.fixture
def logits():
    return np.random.default_rng(7).normal(size=(2, 3, 5))


def test_log_softmax_is_stable():
    out = log_softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(out, np.log([[0.5, 0.5]]))


def test_cross_entropy_value(logits):
    targets = np.array([[0, 1, 2], [3, 4, 0]])
    loss = softmax_cross_entropy(logits, targets)
    logp = log_softmax(logits)
    expected = -np.mean(np.take_along_axis(logp, targets[..., None], axis=-1))
    assert loss.item() == pytest.approx(expected)


def test_cross_entropy_ignores_positions(logits):
    targets = np.array([[0, IGNORE_INDEX, 2], [IGNORE_INDEX, 4, 0]])
    loss = softmax_cross_entropy(logits, targets)
    logp = log_softmax(logits)
    expected = -(logp[0, 0, 0] + logp[0, 2, 2] + logp[1, 1, 4] + logp[1, 2, 0]) / 4
    assert loss.item() == pytest.approx(expected)


def test_cross_entropy_gradient(logits):
    targets = np.array([[0, IGNORE_INDEX, 2], [3, 4, 0]])
    x = Tensor(logits, requires_grad=True)
    backward(softmax_cross_entropy(x, targets))

    eps = 1e-6
    expected = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += eps
        minus[idx] -= eps
        expected[idx] = (
            softmax_cross_entropy(plus, targets).item()
            - softmax_cross_entropy(minus, targets).item()
        ) / (2 * eps)
    np.testing.assert_allclose(x.grad, expected, atol=1e-8)
    assert np.all(x.grad[0, 1] == 0.0)


def test_cross_entropy_all_ignored(logits):
    with pytest.raises(EmptyLossError) as e:
        softmax_cross_entropy(logits, np.full((2, 3), IGNORE_INDEX))
    assert str(e.value) == "empty loss: every position is ignored"


def test_cross_entropy_errors(logits):
    with pytest.raises(ShapeError):
        softmax_cross_entropy(logits, np.zeros((2, 4), dtype=int))
    with pytest.raises(ValueError) as e:
        softmax_cross_entropy(logits, np.full((2, 3), 5))
    assert str(e.value) == "Targets must be in [0, 5) or equal to 'ignore_index'"


def test_kl_is_zero_for_identical_logits(logits):
    assert kl_divergence_logits(logits, logits).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_value_and_sign(logits):
    student = logits[::-1].copy()
    loss = kl_divergence_logits(logits, student).item()
    p = np.exp(log_softmax(logits))
    expected = np.mean(np.sum(p * (log_softmax(logits) - log_softmax(student)), axis=-1))
    assert loss == pytest.approx(expected)
    assert loss > 0


def test_kl_gradient_only_reaches_student(logits):
    teacher = Tensor(logits, requires_grad=True)
    student = Tensor(logits[::-1].copy(), requires_grad=True)
    mask = np.array([[True, False, True], [True, True, True]])
    backward(kl_divergence_logits(teacher, student, mask))
    assert teacher.grad is None

    eps = 1e-6
    base = student.data
    expected = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        expected[idx] = (
            kl_divergence_logits(logits, plus, mask).item()
            - kl_divergence_logits(logits, minus, mask).item()
        ) / (2 * eps)
    np.testing.assert_allclose(student.grad, expected, atol=1e-8)
    assert np.all(student.grad[0, 1] == 0.0)


def test_kl_errors(logits):
    with pytest.raises(EmptyLossError) as e:
        kl_divergence_logits(logits, logits, np.zeros((2, 3), dtype=bool))
    assert str(e.value) == "empty loss: every position is masked out"
    with pytest.raises(ShapeError):
        kl_divergence_logits(logits, logits[:, :2])
    with pytest.raises(ShapeError):
        kl_divergence_logits(logits, logits, np.ones((3, 2), dtype=bool))
