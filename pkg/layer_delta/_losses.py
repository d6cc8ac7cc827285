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

"""Fused loss functions over logits."""

from typing import Any, Optional, Tuple

import numpy as np

from ._exceptions import EmptyLossError, ShapeError
from ._tensor import Array, Tensor, TensorLike, _result, as_tensor

#: Target value that excludes a position from the loss
IGNORE_INDEX = -100


def log_softmax(x: Array) -> Array:
    """Log-softmax over the last axis, stabilized by max-subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(
    logits: TensorLike, targets: Any, ignore_index: int = IGNORE_INDEX
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``
    over every position whose target isn't ``ignore_index``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim < 1 or logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"Targets of shape {targets.shape} don't fit logits of shape {logits.shape}"
        )
    vocab = logits.shape[-1]
    flat_targets = targets.reshape(-1)
    keep = flat_targets != ignore_index
    kept = flat_targets[keep]
    if kept.size and (kept.min() < 0 or kept.max() >= vocab):
        raise ValueError(f"Targets must be in [0, {vocab}) or equal to 'ignore_index'")
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("every position is ignored")

    logp = log_softmax(logits.data.reshape(-1, vocab))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, kept].sum() / count

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        grad = np.exp(logp)
        grad[rows, kept] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (g / count)).reshape(logits.shape),)

    return _result(np.asarray(loss), "cross_entropy", (logits,), backward)


def kl_divergence_logits(
    teacher_logits: TensorLike,
    student_logits: TensorLike,
    mask: Optional[Any] = None,
) -> Tensor:
    """Mean over positions of ``KL(softmax(teacher) || softmax(student))``.

    The teacher logits are constants: no gradient reaches them even when
    they were produced by recorded operations. ``mask`` selects the
    positions that count, all of them by default.
    """
    teacher = as_tensor(teacher_logits)
    student = as_tensor(student_logits)
    if teacher.shape != student.shape:
        raise ShapeError(
            f"Teacher logits {teacher.shape} and student logits {student.shape} differ"
        )
    vocab = student.shape[-1]
    if mask is None:
        include = np.ones(student.shape[:-1], dtype=bool).reshape(-1)
    else:
        include = np.asarray(mask, dtype=bool)
        if include.shape != student.shape[:-1]:
            raise ShapeError(
                f"Mask of shape {include.shape} doesn't fit logits of shape {student.shape}"
            )
        include = include.reshape(-1)
    count = int(include.sum())
    if count == 0:
        raise EmptyLossError("every position is masked out")

    logp_t = log_softmax(teacher.data.reshape(-1, vocab))[include]
    logp_s = log_softmax(student.data.reshape(-1, vocab))[include]
    p_t = np.exp(logp_t)
    loss = (p_t * (logp_t - logp_s)).sum() / count

    def backward(g: Array) -> Tuple[Optional[Array], ...]:
        grad = np.zeros((include.size, vocab))
        grad[include] = (np.exp(logp_s) - p_t) * (g / count)
        return (grad.reshape(student.shape),)

    return _result(np.asarray(loss), "kl_divergence", (student,), backward)
