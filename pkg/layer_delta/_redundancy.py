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

"""Choosing which blocks and sublayers get replaced by deltas."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Type, Union

import numpy as np

from . import _tensor as T
from ._delta import PLAN_STRATEGIES, SharingPlan, default_protected_blocks
from ._exceptions import PlanError
from ._models import SUBLAYER_ROLES, SUBLAYERS, ModelConfig, WeightSite, normalize_sublayers
from ._tensor import Array
from ._transformer import ParameterView, forward

_logger = logging.getLogger("layer_delta.redundancy")

#: Token positions sampled for the similarity report by default
SIMILARITY_SAMPLE_SIZE = 8192

Unit = Tuple[int, str]


@dataclass(frozen=True)
class ImportanceReport:
    """Mean cosine similarity between the residual stream entering and
    leaving each sublayer. Higher means more redundant.
    """

    scores: Mapping[Unit, float]
    #: Number of token positions the scores were averaged over
    sample_size: int
    #: Free-form identifier of the sampled corpus
    corpus_id: str = ""

    def __post_init__(self) -> None:
        for unit, score in self.scores.items():
            if not np.isfinite(score):
                raise ValueError(f"Score of {unit} isn't finite")

    def ranked(self) -> List[Tuple[Unit, float]]:
        """Units from most to least redundant, ties by lower block."""
        return sorted(
            self.scores.items(),
            key=lambda item: (-item[1], item[0][0], SUBLAYERS.index(item[0][1])),
        )

    def to_rows(self) -> List[Dict[str, Any]]:
        return [
            {"site": f"blocks.{block}.{sublayer}", "score": score, "n": self.sample_size}
            for (block, sublayer), score in sorted(
                self.scores.items(), key=lambda i: (i[0][0], SUBLAYERS.index(i[0][1]))
            )
        ]

    def to_text(self) -> str:
        """Tab-separated table with a header row."""
        lines = ["site\tscore\tn"]
        lines.extend(f"{r['site']}\t{r['score']:.6f}\t{r['n']}" for r in self.to_rows())
        return "\n".join(lines) + "\n"


def _windows(config: ModelConfig, sample: Any, limit: int) -> Array:
    ids = np.asarray(sample, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[:limit]
        window = min(config.max_seq_len, ids.size)
        if window == 0:
            return ids.reshape(0, 0)
        usable = (ids.size // window) * window
        ids = ids[:usable].reshape(-1, window)
    return ids


def layer_similarity(
    model: ParameterView,
    sample: Any,
    sublayer: str = "both",
    corpus_id: str = "",
    max_positions: int = SIMILARITY_SAMPLE_SIZE,
) -> ImportanceReport:
    """Scores every sublayer of ``model`` by how little it changes the
    residual stream over the sampled token positions.
    """
    kinds = normalize_sublayers(sublayer)
    ids = _windows(model.config, sample, max_positions)
    if ids.size == 0:
        raise ValueError("Corpus sample is empty")

    sums: Dict[Unit, float] = {}
    counts: Dict[Unit, int] = {}

    def observe(kind: str, block: int, h_in: Array, h_out: Array) -> None:
        if kind not in kinds:
            return
        a = h_in.reshape(-1, h_in.shape[-1])
        b = h_out.reshape(-1, h_out.shape[-1])
        norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
        cos = np.sum(a * b, axis=-1) / np.maximum(norms, 1e-30)
        cos = np.where(norms > 0, cos, 1.0)
        unit = (block, kind)
        sums[unit] = sums.get(unit, 0.0) + float(np.sum(cos))
        counts[unit] = counts.get(unit, 0) + cos.size

    with T.no_grad():
        for row in ids:
            forward(model, row[None, :], observer=observe)

    scores = {unit: float(np.clip(sums[unit] / counts[unit], -1.0, 1.0)) for unit in sums}
    _logger.debug("Similarity report over %d positions: %s", ids.size, scores)
    return ImportanceReport(scores=scores, sample_size=int(ids.size), corpus_id=corpus_id)


def _expand(
    units: Iterable[Tuple[Unit, int]],
) -> List[Tuple[WeightSite, WeightSite]]:
    """``((target_block, sublayer), anchor_block)`` pairs to matrix entries."""
    return [
        (WeightSite(block, sub, role), WeightSite(anchor, sub, role))
        for (block, sub), anchor in units
        for role in SUBLAYER_ROLES[sub]
    ]


def _eligible(config: ModelConfig, protected: Iterable[int]) -> List[int]:
    protected = set(protected)
    return [b for b in range(config.n_layers) if b not in protected]


def _latest_run(eligible: Sequence[int], length: int) -> Optional[int]:
    """Start of the latest run of ``length`` consecutive eligible blocks."""
    available = set(eligible)
    for start in sorted(eligible, reverse=True):
        if all(start + i in available for i in range(length)):
            return start
    return None


class PlanStrategy:
    """Places delta sites for a config. Subclasses implement :meth:`place`."""

    name = ""

    def place(
        self,
        config: ModelConfig,
        sublayers: Sequence[str],
        k: int,
        eligible: List[int],
        importance: Optional[ImportanceReport],
    ) -> List[Tuple[Unit, int]]:  # pragma: nocover
        """Returns ``((target_block, sublayer), anchor_block)`` pairs."""
        raise NotImplementedError()


class SequentialStrategy(PlanStrategy):
    """One anchor block followed by ``k`` delta blocks that all share it,
    in the latest eligible region.
    """

    name = "sequential"

    def place(
        self,
        config: ModelConfig,
        sublayers: Sequence[str],
        k: int,
        eligible: List[int],
        importance: Optional[ImportanceReport],
    ) -> List[Tuple[Unit, int]]:
        start = _latest_run(eligible, k + 1)
        if start is None:
            raise PlanError(
                f"k={k} is too large: no {k + 1} consecutive eligible blocks"
            )
        return [((start + i, sub), start) for i in range(1, k + 1) for sub in sublayers]


class AlternatingStrategy(PlanStrategy):
    """Anchor and delta blocks alternate, each delta anchored on the block
    right before it.
    """

    name = "alternating"

    def place(
        self,
        config: ModelConfig,
        sublayers: Sequence[str],
        k: int,
        eligible: List[int],
        importance: Optional[ImportanceReport],
    ) -> List[Tuple[Unit, int]]:
        start = _latest_run(eligible, 2 * k)
        if start is None:
            raise PlanError(
                f"k={k} is too large: no {2 * k} consecutive eligible blocks"
            )
        return [
            ((start + 2 * i + 1, sub), start + 2 * i)
            for i in range(k)
            for sub in sublayers
        ]


class SimilarityStrategy(PlanStrategy):
    """The ``k`` most redundant eligible sublayers, each anchored on the
    nearest earlier eligible block whose same sublayer is kept.
    """

    name = "similarity"

    def place(
        self,
        config: ModelConfig,
        sublayers: Sequence[str],
        k: int,
        eligible: List[int],
        importance: Optional[ImportanceReport],
    ) -> List[Tuple[Unit, int]]:
        if importance is None:
            raise PlanError("The 'similarity' strategy requires an importance report")
        candidates: List[Unit] = []
        for sub in sublayers:
            # The lowest eligible block can't have an earlier anchor.
            candidates.extend((b, sub) for b in eligible[1:])
        for unit in candidates:
            if unit not in importance.scores:
                raise PlanError(f"Importance report has no score for {unit}")
        if k > len(candidates):
            raise PlanError(f"k={k} is too large: only {len(candidates)} eligible sites")
        ranked = sorted(
            candidates,
            key=lambda u: (-importance.scores[u], u[0], SUBLAYERS.index(u[1])),
        )
        chosen = set(ranked[:k])
        pairs = []
        for block, sub in sorted(chosen):
            anchor = max(b for b in eligible if b < block and (b, sub) not in chosen)
            pairs.append(((block, sub), anchor))
        return pairs


_STRATEGY_CLASS_NAMES: Dict[str, Type[PlanStrategy]] = {
    "sequential": SequentialStrategy,
    "alternating": AlternatingStrategy,
    "similarity": SimilarityStrategy,
}


def build_plan(
    config: ModelConfig,
    strategy: Union[str, PlanStrategy] = "sequential",
    sublayer: str = "mlp",
    k: int = 0,
    importance: Optional[ImportanceReport] = None,
    protected_blocks: Optional[Iterable[int]] = None,
) -> SharingPlan:
    """Builds a sharing plan with ``k`` delta blocks (or sites, for the
    similarity strategy) for ``sublayer`` in ``'mlp'``, ``'attention'``
    or ``'both'``.
    """
    if isinstance(strategy, str):
        if strategy not in _STRATEGY_CLASS_NAMES:
            raise PlanError(
                "Unknown option for strategy: '%s'. Available options are: '%s'"
                % (strategy, "', '".join(sorted(_STRATEGY_CLASS_NAMES)))
            )
        strategy = _STRATEGY_CLASS_NAMES[strategy]()
    sublayers = normalize_sublayers(sublayer)
    if not isinstance(k, int) or k < 0:
        raise PlanError("'k' must be a non-negative integer")
    protected = (
        default_protected_blocks(config.n_layers)
        if protected_blocks is None
        else frozenset(protected_blocks)
    )
    tag = strategy.name if strategy.name in PLAN_STRATEGIES else "explicit"
    if k == 0:
        return SharingPlan(protected_blocks=protected, strategy=tag)

    eligible = _eligible(config, protected)
    pairs = strategy.place(config, sublayers, k, eligible, importance)
    plan = SharingPlan(entries=tuple(_expand(pairs)), protected_blocks=protected, strategy=tag)
    plan.validate(config)
    _logger.info(
        "Built %s plan: %d targets over %d units", tag, len(plan), len(plan.units())
    )
    return plan
