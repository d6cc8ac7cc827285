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

"""Optimizer, schedules and the epoch loop shared by every trainer."""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _tensor as T
from ._corpus import Corpus
from ._exceptions import TrainingError
from ._losses import softmax_cross_entropy
from ._models import LR_SCHEDULES, EpochRecord, TrainConfig
from ._tensor import Array, Tensor
from ._transformer import Model, ParameterView, evaluate_perplexity, forward

_logger = logging.getLogger("layer_delta.training")

#: Validation perplexity within this factor of the final one counts as converged
THRESHOLD_RATIO = 1.05

#: Returns the loss of one batch and the replacement rate it was trained at
StepFn = Callable[[int, Array, Array], Tuple[Tensor, float]]


class Adam:
    """Adam with bias correction, updating leaf tensors in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * p.grad
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - lr * (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescales gradients so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def learning_rate(base: float, schedule: str, step: int, total_steps: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        progress = min(1.0, step / max(1, total_steps))
        return base * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ValueError(
        f"Unknown option for lr_schedule: '{schedule}'. "
        f"Available options are: '{', '.join(LR_SCHEDULES)}'"
    )


def steps_per_epoch(n_tokens: int, batch_size: int, seq_len: int) -> int:
    return max(1, math.ceil(n_tokens / (batch_size * seq_len)))


class BatchSampler:
    """Draws random contiguous windows from a token stream."""

    def __init__(
        self, ids: Array, batch_size: int, seq_len: int, rng: np.random.Generator
    ):
        self.ids = np.asarray(ids, dtype=np.int64)
        if self.ids.size < seq_len + 1:
            raise TrainingError(
                f"Train split has {self.ids.size} tokens, "
                f"need at least {seq_len + 1} for one sequence"
            )
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rng = rng

    def sample(self) -> Tuple[Array, Array]:
        """``(inputs, targets)`` of shape ``[batch, seq_len]``, targets
        shifted by one position.
        """
        starts = self.rng.integers(0, self.ids.size - self.seq_len, size=self.batch_size)
        windows = np.stack([self.ids[s : s + self.seq_len + 1] for s in starts])
        return windows[:, :-1], windows[:, 1:]


@dataclass
class TrainReport:
    """Per-epoch metrics of one training run."""

    epochs: List[EpochRecord] = field(default_factory=list)
    #: First epoch (1-based) whose val perplexity is within 5% of the last one
    epochs_to_threshold: Optional[int] = None
    #: Seconds spent in the whole run
    wall_clock: float = 0.0
    #: Label of the run, for example 'pmr' or 'baseline'
    name: str = ""

    def finalize(self, ratio: float = THRESHOLD_RATIO) -> "TrainReport":
        self.epochs_to_threshold = None
        if self.epochs:
            final = self.epochs[-1].val_perplexity
            for record in self.epochs:
                if record.val_perplexity <= ratio * final:
                    self.epochs_to_threshold = record.epoch
                    break
        return self

    @property
    def final_perplexity(self) -> Optional[float]:
        return self.epochs[-1].val_perplexity if self.epochs else None

    @property
    def tokens(self) -> int:
        return sum(r.tokens for r in self.epochs)

    def without_timing(self) -> Tuple[Any, ...]:
        """Everything except wall-clock times, for run-to-run comparisons."""
        return (tuple(r.without_timing() for r in self.epochs), self.epochs_to_threshold)

    def to_records(self) -> List[Dict[str, Any]]:
        """One record per epoch followed by a summary record."""
        records: List[Dict[str, Any]] = [
            dict(type="epoch", run=self.name, **r.to_dict()) for r in self.epochs
        ]
        records.append(
            {
                "type": "summary",
                "run": self.name,
                "epochs": len(self.epochs),
                "epochs_to_threshold": self.epochs_to_threshold,
                "final_val_perplexity": self.final_perplexity,
                "tokens": self.tokens,
                "wall_clock": self.wall_clock,
            }
        )
        return records


def run_epochs(
    step_fn: StepFn,
    params: Sequence[Tensor],
    train_ids: Array,
    evaluate: Callable[[], float],
    config: TrainConfig,
    total_epochs: int,
    name: str = "",
) -> TrainReport:
    """Runs ``total_epochs`` epochs of Adam over ``params``.

    ``evaluate`` returns the validation perplexity at the end of an epoch.
    """
    report = TrainReport(name=name)
    start = time.perf_counter()
    if total_epochs == 0:
        return report.finalize()

    rng = np.random.default_rng([config.seed, 0])
    sampler = BatchSampler(train_ids, config.batch_size, config.seq_len, rng)
    per_epoch = steps_per_epoch(sampler.ids.size, config.batch_size, config.seq_len)
    total_steps = per_epoch * total_epochs
    optimizer = Adam(params, lr=config.learning_rate)
    tokens_per_step = config.batch_size * config.seq_len
    seen = 0
    step = 0

    for epoch in range(1, total_epochs + 1):
        epoch_start = time.perf_counter()
        losses: List[float] = []
        rates: List[float] = []
        for _ in range(per_epoch):
            if config.max_tokens is not None and seen >= config.max_tokens:
                break
            lr = learning_rate(config.learning_rate, config.lr_schedule, step, total_steps)
            inputs, targets = sampler.sample()
            loss, rate = step_fn(step, inputs, targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"Loss became non-finite at step {step} (lr={lr:.6g})")
            optimizer.zero_grad()
            T.backward(loss)
            if config.grad_clip is not None:
                clip_grad_norm(optimizer.params, config.grad_clip)
            optimizer.step(lr)
            _logger.debug("step=%d loss=%.6f lr=%.6g rate=%.3f", step, value, lr, rate)
            losses.append(value)
            rates.append(rate)
            seen += tokens_per_step
            step += 1
        if not losses:
            break

        val_ppl = evaluate()
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_perplexity=val_ppl,
            replacement_rate=float(np.mean(rates)),
            tokens=len(losses) * tokens_per_step,
            wall_clock=time.perf_counter() - epoch_start,
        )
        report.epochs.append(record)
        _logger.info(
            "%sepoch %d/%d: train_loss=%.4f val_ppl=%.4f rate=%.3f",
            f"[{name}] " if name else "",
            epoch,
            total_epochs,
            record.train_loss,
            record.val_perplexity,
            record.replacement_rate,
        )

    report.wall_clock = time.perf_counter() - start
    return report.finalize()


def validation_perplexity(view: ParameterView, corpus: Corpus, config: TrainConfig) -> float:
    return evaluate_perplexity(view, corpus.val, seq_len=config.seq_len + 1)[0]


def train_teacher(
    model: Model, corpus: Corpus, config: TrainConfig
) -> Tuple[Model, TrainReport]:
    """Trains every parameter of a copy of ``model`` with cross-entropy."""
    if corpus.train.size == 0:
        raise TrainingError("Train split is empty")
    trained = model.copy().requires_grad_(True)

    def step_fn(step: int, inputs: Array, targets: Array) -> Tuple[Tensor, float]:
        return softmax_cross_entropy(forward(trained, inputs), targets), 1.0

    report = run_epochs(
        step_fn,
        [p for _, p in trained.named_parameters()],
        corpus.train,
        lambda: validation_perplexity(trained, corpus, config),
        config,
        config.epochs,
        name="teacher",
    )
    trained.requires_grad_(False)
    return trained, report
