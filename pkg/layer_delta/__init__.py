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

"""Compression of small decoder-only transformers with shared anchor
weights and low-rank deltas, recovered by progressive module replacement
"""

import logging

from ._checkpoint import dumps, load, loads, read_header, save
from ._corpus import Corpus, detokenize, load_corpus, split_ids, tokenize, unigram_perplexity
from ._delta import (
    CompressedModel,
    DeltaModule,
    SharingPlan,
    attach_adapters,
    compress,
    compression_ratio,
    compute_delta,
    init_delta,
    merge_adapters,
    reconstruct_weight,
    storage_breakdown,
)
from ._exceptions import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ConvergenceWarning,
    CorpusError,
    EmptyLossError,
    LayerDeltaError,
    LayerDeltaWarning,
    OverlappingOffsetsError,
    PlanError,
    SerializationError,
    ShapeError,
    TrainingError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from ._linalg import QRResult, SVDResult, qr_decompose, truncated_svd
from ._losses import kl_divergence_logits, softmax_cross_entropy
from ._models import (
    EpochRecord,
    EvalResult,
    ModelConfig,
    QuantPolicy,
    ReplacementScheduler,
    TrainConfig,
    WeightSite,
)
from ._pmr import (
    HybridView,
    compare_pmr,
    distill_loss,
    hybrid_forward,
    replacement_probability,
    sample_replacement_mask,
    train,
)
from ._quantizer import (
    NF4_LEVELS,
    QuantizedTensor,
    dequantize_tensor,
    quantize_model,
    quantize_tensor,
)
from ._redundancy import (
    AlternatingStrategy,
    ImportanceReport,
    PlanStrategy,
    SequentialStrategy,
    SimilarityStrategy,
    build_plan,
    layer_similarity,
)
from ._serializer import JsonSerializer, NdjsonSerializer, Serializer
from ._tensor import Tensor, backward, no_grad
from ._training import TrainReport, train_teacher
from ._transformer import (
    Model,
    ParameterView,
    count_params,
    evaluate_perplexity,
    forward,
    init_model,
    score_sequence,
)
from ._utils import fixup_module_metadata
from ._version import __version__ as __version__  # noqa

__all__ = [
    "AlternatingStrategy",
    "BadMagicError",
    "CheckpointError",
    "CompressedModel",
    "ConfigError",
    "ConvergenceWarning",
    "Corpus",
    "CorpusError",
    "DeltaModule",
    "EmptyLossError",
    "EpochRecord",
    "EvalResult",
    "HybridView",
    "ImportanceReport",
    "JsonSerializer",
    "LayerDeltaError",
    "LayerDeltaWarning",
    "Model",
    "ModelConfig",
    "NF4_LEVELS",
    "NdjsonSerializer",
    "OverlappingOffsetsError",
    "ParameterView",
    "PlanError",
    "PlanStrategy",
    "QRResult",
    "QuantPolicy",
    "QuantizedTensor",
    "ReplacementScheduler",
    "SVDResult",
    "SequentialStrategy",
    "SerializationError",
    "Serializer",
    "ShapeError",
    "SharingPlan",
    "SimilarityStrategy",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "TruncatedPayloadError",
    "UnsupportedVersionError",
    "WeightSite",
    "attach_adapters",
    "backward",
    "build_plan",
    "compare_pmr",
    "compress",
    "compression_ratio",
    "compute_delta",
    "count_params",
    "dequantize_tensor",
    "detokenize",
    "distill_loss",
    "dumps",
    "evaluate_perplexity",
    "forward",
    "hybrid_forward",
    "init_delta",
    "init_model",
    "kl_divergence_logits",
    "layer_similarity",
    "load",
    "load_corpus",
    "loads",
    "merge_adapters",
    "no_grad",
    "qr_decompose",
    "quantize_model",
    "quantize_tensor",
    "read_header",
    "reconstruct_weight",
    "replacement_probability",
    "sample_replacement_mask",
    "save",
    "score_sequence",
    "softmax_cross_entropy",
    "split_ids",
    "storage_breakdown",
    "tokenize",
    "train",
    "train_teacher",
    "truncated_svd",
    "unigram_perplexity",
]

_logger = logging.getLogger("layer_delta")
_logger.addHandler(logging.NullHandler())
del _logger

fixup_module_metadata(__name__, globals())
del fixup_module_metadata


def debug_logging() -> None:
    """Enables logging on all ``layer_delta.*`` loggers and attaches a
    :class:`logging.StreamHandler` instance to each. This is an easy way to
    follow training progress step by step or debug a compression run.
    """
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[%(asctime)s] %(message)s", datefmt="%Y-%m-%dT%H:%M:%S")
    handler.setFormatter(formatter)
    for logger in (
        logging.getLogger("layer_delta.checkpoint"),
        logging.getLogger("layer_delta.cli"),
        logging.getLogger("layer_delta.delta"),
        logging.getLogger("layer_delta.linalg"),
        logging.getLogger("layer_delta.pmr"),
        logging.getLogger("layer_delta.quantizer"),
        logging.getLogger("layer_delta.redundancy"),
        logging.getLogger("layer_delta.tensor"),
        logging.getLogger("layer_delta.training"),
        logging.getLogger("layer_delta.transformer"),
    ):
        logger.addHandler(handler)
        logger.setLevel(logging.DEBUG)
