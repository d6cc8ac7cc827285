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

"""Progressive module replacement: distilling deltas while teacher
modules are stochastically swapped for their compressed counterparts.
"""

import logging
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from . import _tensor as T
from ._corpus import Corpus
from ._delta import CompressedModel, attach_adapters
from ._exceptions import PlanError, TrainingError
from ._losses import kl_divergence_logits, softmax_cross_entropy
from ._models import SUBLAYER_ROLES, ReplacementScheduler, TrainConfig, WeightSite
from ._tensor import Array, Tensor
from ._training import TrainReport, run_epochs, steps_per_epoch, validation_perplexity
from ._transformer import Model, ParameterView, forward

_logger = logging.getLogger("layer_delta.pmr")

ReplacementMask = Dict[WeightSite, bool]


def replacement_probability(
    sched: ReplacementScheduler, step: int, depth_rank: int, n_units: int
) -> float:
    """Probability that a delta unit of the given depth rank uses the
    student path at ``step``.
    """
    if step < 0:
        raise ValueError("'step' must be a non-negative integer")
    base = min(1.0, sched.p0 + (1.0 - sched.p0) * step / sched.converge_step)
    boost = 1.0 + sched.depth_bias * depth_rank / max(1, n_units - 1)
    return float(min(1.0, max(0.0, base * boost)))


def bind_scheduler(sched: ReplacementScheduler, student: CompressedModel) -> ReplacementScheduler:
    """Ranks the plan's delta units by depth unless already ranked."""
    if sched.depth_ranks:
        return sched
    return sched.with_units(student.plan.units())


def sample_replacement_mask(
    sched: ReplacementScheduler,
    step: int,
    rng: np.random.Generator,
    sites: Optional[Any] = None,
) -> ReplacementMask:
    """Draws one Bernoulli per delta unit; every matrix of a unit shares
    its draw. ``sites`` defaults to every role of the ranked units.
    """
    units = sorted(sched.depth_ranks, key=lambda u: sched.depth_ranks[u])
    n_units = len(units)
    draws = rng.random(n_units)
    chosen = {}
    for i, unit in enumerate(units):
        p = replacement_probability(sched, step, sched.depth_ranks[unit], n_units)
        chosen[unit] = bool(draws[i] < p)
    if sites is None:
        sites = [WeightSite(b, s, r) for (b, s) in units for r in SUBLAYER_ROLES[s]]
    return {site: chosen[site.unit] for site in sites}


class HybridView(ParameterView):
    """Forward view mixing teacher and student.

    Masked targets use the student path (anchor plus delta), unmasked
    targets use the teacher's original matrix and everything else comes
    from the student.
    """

    def __init__(
        self,
        teacher: ParameterView,
        student: CompressedModel,
        mask: Mapping[WeightSite, bool],
    ):
        targets = set(student.plan.targets)
        if set(mask) != targets:
            raise PlanError("Replacement mask must cover exactly the delta sites")
        if teacher.config != student.config:
            raise PlanError("Teacher and student configs differ")
        self.teacher = teacher
        self.student = student
        self.mask = dict(mask)
        self.config = student.config

    def param(self, name: str) -> Tensor:
        return self.student.param(name)

    def weight(self, site: WeightSite) -> Tensor:
        if site in self.mask and not self.mask[site]:
            return self.teacher.weight(site)
        return self.student.weight(site)

    def project(self, site: WeightSite, x: Tensor) -> Tensor:
        if site in self.mask and not self.mask[site]:
            return self.teacher.project(site, x)
        return self.student.project(site, x)


def hybrid_forward(
    teacher: ParameterView,
    student: CompressedModel,
    mask: Mapping[WeightSite, bool],
    tokens: Any,
) -> Tensor:
    return forward(HybridView(teacher, student, mask), tokens)


def distill_loss(
    student_logits: Tensor, teacher_logits: Any, targets: Any, alpha: float
) -> Tensor:
    """``(1 - alpha) * CE + alpha * KL(teacher || student)``; the teacher
    logits are constants.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("'alpha' must be between 0 and 1")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits
    if alpha == 0.0:
        return softmax_cross_entropy(student_logits, targets)
    kl = kl_divergence_logits(teacher, student_logits)
    if alpha == 1.0:
        return kl
    ce = softmax_cross_entropy(student_logits, targets)
    return T.add(T.scale(ce, 1.0 - alpha), T.scale(kl, alpha))


def train(
    teacher: Model,
    student: CompressedModel,
    corpus: Corpus,
    config: TrainConfig,
    sched: Optional[ReplacementScheduler] = None,
    name: str = "",
) -> Tuple[CompressedModel, TrainReport]:
    """Distills the deltas of a copy of ``student`` from ``teacher``.

    Without a scheduler every delta site is always replaced, which is
    plain distillation. In joint mode adapters on retained matrices are
    trained too. Batches, masks and dropout draw from independent
    streams of ``config.seed``.
    """
    if corpus.train.size == 0:
        raise TrainingError("Train split is empty")
    if teacher.config != student.config:
        raise PlanError("Teacher and student configs differ")
    student = student.copy()
    if sched is not None:
        sched = bind_scheduler(sched, student)
    total_epochs = config.epochs + (sched.extra_epochs if sched is not None else 0)
    if total_epochs == 0:
        return student, TrainReport(name=name).finalize()

    if config.mode == "joint" and not student.adapters:
        attach_adapters(student, config.adapter_rank, config.lora_alpha, config.seed)
    trainable = student.delta_parameters()
    if config.mode == "joint":
        trainable += student.adapter_parameters()
    for p in trainable:
        p.requires_grad = True

    mask_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2]) if config.lora_dropout > 0 else None
    all_student = {site: True for site in student.plan.targets}
    n_units = len(student.plan.units())

    def step_fn(step: int, inputs: Array, targets: Array) -> Tuple[Tensor, float]:
        if sched is None or sched.constant:
            mask = all_student
        else:
            mask = sample_replacement_mask(sched, step, mask_rng, student.plan.targets)
        replaced = {site.unit for site, on in mask.items() if on}
        rate = len(replaced) / n_units if n_units else 1.0
        with T.no_grad():
            teacher_logits = forward(teacher, inputs)
        with student.training(config.lora_dropout, dropout_rng):
            logits = hybrid_forward(teacher, student, mask, inputs)
        return distill_loss(logits, teacher_logits, targets, config.alpha), rate

    report = run_epochs(
        step_fn,
        trainable,
        corpus.train,
        lambda: validation_perplexity(student, corpus, config),
        config,
        total_epochs,
        name=name,
    )
    for p in trainable:
        p.requires_grad = False
        p.grad = None

    if sched is not None and not sched.constant:
        steps = steps_per_epoch(corpus.train.size, config.batch_size, config.seq_len)
        if steps * total_epochs < sched.converge_step:
            _logger.warning(
                "Replacement rate didn't reach 1.0: %d steps ran, converge_step is %d",
                steps * total_epochs,
                sched.converge_step,
            )
    return student, report


def compare_pmr(
    teacher: Model,
    student: CompressedModel,
    corpus: Corpus,
    config: TrainConfig,
    sched: ReplacementScheduler,
) -> Dict[str, Any]:
    """Trains the same student with and without progressive replacement
    under identical seeds and summarizes both runs.
    """
    _, pmr_report = train(teacher, student, corpus, config, sched, name="pmr")
    _, plain_report = train(
        teacher,
        student,
        corpus,
        config.replace(epochs=config.epochs + sched.extra_epochs),
        None,
        name="baseline",
    )
    return {
        "pmr": pmr_report,
        "baseline": plain_report,
        "comparison": {
            "type": "comparison",
            "pmr_epochs_to_threshold": pmr_report.epochs_to_threshold,
            "baseline_epochs_to_threshold": plain_report.epochs_to_threshold,
            "pmr_final_val_perplexity": pmr_report.final_perplexity,
            "baseline_final_val_perplexity": plain_report.final_perplexity,
        },
    }
