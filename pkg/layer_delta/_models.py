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

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import (
    TYPE_CHECKING,
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Type,
    TypeVar,
)

from ._exceptions import ConfigError

if TYPE_CHECKING:
    from typing_extensions import Final


class DefaultType(enum.Enum):
    """
    Sentinel used as a default value when ``None`` has special meaning like
    'use the rank of the delta'. The only comparisons that are supported
    for this type are ``is``.
    """

    value = 0

    def __repr__(self) -> str:
        return "<DEFAULT>"

    def __str__(self) -> str:
        return "<DEFAULT>"


DEFAULT: "Final[DefaultType]" = DefaultType.value

_T = TypeVar("_T")

#: Matrix roles of each sublayer in canonical order.
SUBLAYER_ROLES: Dict[str, Tuple[str, ...]] = {
    "attention": ("q", "k", "v", "o"),
    "mlp": ("gate", "up", "down"),
}
SUBLAYERS: Tuple[str, ...] = ("attention", "mlp")

LR_SCHEDULES = ("constant", "cosine")
TRAIN_MODES = ("delta_only", "joint")
QUANT_STRATEGIES = ("AnchorSkip", "AllQuant")
QUANT_GRANULARITIES = ("row", "tensor")


def _from_mapping(cls: Type[_T], data: Mapping[str, Any], what: str) -> _T:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown field in {what}: '{key}'")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid {what}: {e}", errors=(e,)) from None


def _check_int(name: str, value: Any, minimum: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        if minimum == 0:
            raise ConfigError(f"'{name}' must be a non-negative integer")
        raise ConfigError(f"'{name}' must be a positive integer")


@dataclass(frozen=True)
class WeightSite:
    """Address of one projection matrix inside a transformer block."""

    #: Block index, 0-based
    block: int
    #: Either 'attention' or 'mlp'
    sublayer: str
    #: One of 'q', 'k', 'v', 'o' for attention and 'gate', 'up', 'down' for mlp
    role: str

    def __post_init__(self) -> None:
        if self.sublayer not in SUBLAYER_ROLES:
            raise ValueError(
                f"Unknown sublayer: '{self.sublayer}'. "
                "Available options are: 'attention', 'mlp'"
            )
        if self.role not in SUBLAYER_ROLES[self.sublayer]:
            raise ValueError(
                f"Role '{self.role}' isn't a matrix of the '{self.sublayer}' sublayer"
            )
        if not isinstance(self.block, int) or self.block < 0:
            raise ValueError("'block' must be a non-negative integer")

    @property
    def name(self) -> str:
        return f"blocks.{self.block}.{self.sublayer}.{self.role}"

    @property
    def unit(self) -> Tuple[int, str]:
        """The (block, sublayer) pair this matrix belongs to."""
        return (self.block, self.sublayer)

    @property
    def sort_key(self) -> Tuple[int, int, int]:
        return (
            self.block,
            SUBLAYERS.index(self.sublayer),
            SUBLAYER_ROLES[self.sublayer].index(self.role),
        )

    def at_block(self, block: int) -> "WeightSite":
        return dataclasses.replace(self, block=block)

    def shape(self, config: "ModelConfig") -> Tuple[int, int]:
        """Stored shape ``[out, in]`` of the matrix under ``config``."""
        d, f = config.d_model, config.d_ffn
        if self.role in ("gate", "up"):
            return (f, d)
        if self.role == "down":
            return (d, f)
        return (d, d)

    @classmethod
    def from_name(cls, name: str) -> "WeightSite":
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "blocks" or not parts[1].isdigit():
            raise ValueError(f"Not a weight site name: '{name}'")
        return cls(block=int(parts[1]), sublayer=parts[2], role=parts[3])

    def __str__(self) -> str:
        return self.name


def sort_sites(sites: Iterable[WeightSite]) -> List[WeightSite]:
    return sorted(sites, key=lambda s: s.sort_key)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a pre-norm decoder-only transformer."""

    #: Number of transformer blocks
    n_layers: int = 8
    #: Width of the residual stream
    d_model: int = 128
    #: Number of attention heads, must divide 'd_model'
    n_heads: int = 4
    #: Hidden width of the gated MLP
    d_ffn: int = 352
    #: Number of token ids, 258 for the byte tokenizer
    vocab_size: int = 258
    #: Longest sequence the rotary tables are built for
    max_seq_len: int = 128
    #: Epsilon added inside the RMSNorm square root
    norm_eps: float = 1e-6
    #: Seed used by 'init_model' when no other seed is given
    seed: int = 0

    def __post_init__(self) -> None:
        _check_int("n_layers", self.n_layers, 0)
        for name in ("d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            _check_int(name, getattr(self, name), 1)
        if self.d_model % self.n_heads:
            raise ConfigError("'d_model' must be divisible by 'n_heads'")
        if self.head_dim % 2:
            raise ConfigError("'d_model / n_heads' must be even for rotary encoding")
        if not (isinstance(self.norm_eps, (int, float)) and self.norm_eps > 0):
            raise ConfigError("'norm_eps' must be a positive number")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("'seed' must be a non-negative integer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **kwargs: Any) -> "ModelConfig":
        if not kwargs:
            return self
        return dataclasses.replace(self, **kwargs)

    def weight_sites(self, sublayer: Optional[str] = None) -> List[WeightSite]:
        """Every block matrix implied by the config, in canonical order."""
        sublayers = SUBLAYERS if sublayer in (None, "both") else (sublayer,)
        return [
            WeightSite(block, name, role)
            for block in range(self.n_layers)
            for name in SUBLAYERS
            if name in sublayers
            for role in SUBLAYER_ROLES[name]
        ]

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        return _from_mapping(cls, data, "model config")


@dataclass(frozen=True)
class TrainConfig:
    """Options for teacher pre-training and delta tuning."""

    #: Weight of the KL term against cross-entropy, in [0, 1]
    alpha: float = 0.5
    #: Peak learning rate for Adam
    learning_rate: float = 1e-3
    #: Either 'constant' or 'cosine'
    lr_schedule: str = "constant"
    #: Number of passes over the train split
    epochs: int = 1
    #: Sequences per optimization step
    batch_size: int = 8
    #: Tokens per training sequence
    seq_len: int = 64
    #: Seed for batch order, replacement masks and dropout
    seed: int = 0
    #: Either 'delta_only' or 'joint'
    mode: str = "delta_only"
    #: LoRA alpha of gaussian/eva deltas and joint adapters. ``None`` means
    #: 'same as the rank' which makes the scaling 1.
    lora_alpha: Optional[float] = None
    #: Dropout on the low-rank input path while training
    lora_dropout: float = 0.0
    #: Rank of the adapters attached to retained weights in joint mode
    adapter_rank: int = 4
    #: Maximum global gradient norm, ``None`` disables clipping
    grad_clip: Optional[float] = 1.0
    #: Stop after this many training tokens if set
    max_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("'alpha' must be between 0 and 1")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise ConfigError("'learning_rate' must be a positive number")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError("'lr_schedule' must be one of 'constant', 'cosine'")
        _check_int("epochs", self.epochs, 0)
        _check_int("batch_size", self.batch_size, 1)
        _check_int("seq_len", self.seq_len, 1)
        _check_int("seed", self.seed, 0)
        _check_int("adapter_rank", self.adapter_rank, 1)
        if self.mode not in TRAIN_MODES:
            raise ConfigError("'mode' must be one of 'delta_only', 'joint'")
        if self.lora_alpha is not None and not self.lora_alpha > 0:
            raise ConfigError("'lora_alpha' must be a positive number")
        if not (0.0 <= self.lora_dropout < 1.0):
            raise ConfigError("'lora_dropout' must be in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("'grad_clip' must be a positive number")
        if self.max_tokens is not None:
            _check_int("max_tokens", self.max_tokens, 1)

    def replace(self, **kwargs: Any) -> "TrainConfig":
        if not kwargs:
            return self
        return dataclasses.replace(self, **kwargs)

    def lora_scaling(self, rank: int) -> float:
        alpha = float(rank) if self.lora_alpha is None else float(self.lora_alpha)
        return alpha / rank

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        return _from_mapping(cls, data, "train config")


@dataclass(frozen=True)
class ReplacementScheduler:
    """Probability schedule for progressive module replacement.

    The base rate ramps linearly from ``p0`` to 1 at ``converge_step``.
    With ``depth_bias > 0`` deeper delta units are replaced earlier.
    """

    #: Replacement probability at step 0
    p0: float = 0.2
    #: Step at which the base rate reaches 1.0
    converge_step: int = 100
    #: Strength of the depth-dependent boost, 0 means an even schedule
    depth_bias: float = 0.0
    #: Epochs trained on top of 'TrainConfig.epochs'
    extra_epochs: int = 0
    #: Depth rank of each (block, sublayer) delta unit, 0 is the shallowest
    depth_ranks: Mapping[Tuple[int, str], int] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if not (0.0 <= self.p0 <= 1.0):
            raise ConfigError("'p0' must be between 0 and 1")
        _check_int("converge_step", self.converge_step, 1)
        if not (self.depth_bias >= 0.0 and math.isfinite(self.depth_bias)):
            raise ConfigError("'depth_bias' must be a non-negative number")
        _check_int("extra_epochs", self.extra_epochs, 0)

    def replace(self, **kwargs: Any) -> "ReplacementScheduler":
        if not kwargs:
            return self
        return dataclasses.replace(self, **kwargs)

    def with_units(self, units: Iterable[Tuple[int, str]]) -> "ReplacementScheduler":
        """Ranks the given delta units by depth (block, then sublayer)."""
        ordered = sorted(set(units), key=lambda u: (u[0], SUBLAYERS.index(u[1])))
        return self.replace(depth_ranks={unit: i for i, unit in enumerate(ordered)})

    @property
    def constant(self) -> bool:
        """Whether every unit is replaced from step 0, i.e. plain training."""
        return self.p0 >= 1.0

    @property
    def n_units(self) -> int:
        return len(self.depth_ranks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "p0": self.p0,
            "converge_step": self.converge_step,
            "depth_bias": self.depth_bias,
            "extra_epochs": self.extra_epochs,
        }


@dataclass(frozen=True)
class QuantPolicy:
    """Which stored weights get quantized, and how."""

    #: 8 for absmax int8, 4 for NF4
    bits: int = 8
    #: 'AnchorSkip' keeps anchors in float, 'AllQuant' quantizes them too
    strategy: str = "AllQuant"
    #: 'row' for one scale per row, 'tensor' for one scale per matrix
    granularity: str = "row"

    def __post_init__(self) -> None:
        if self.bits not in (4, 8):
            raise ConfigError("'bits' must be either 4 or 8")
        if self.strategy not in QUANT_STRATEGIES:
            raise ConfigError("'strategy' must be one of 'AnchorSkip', 'AllQuant'")
        if self.granularity not in QUANT_GRANULARITIES:
            raise ConfigError("'granularity' must be one of 'row', 'tensor'")

    @property
    def scheme(self) -> str:
        return "absmax_int8" if self.bits == 8 else "nf4"

    def replace(self, **kwargs: Any) -> "QuantPolicy":
        if not kwargs:
            return self
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QuantPolicy":
        return _from_mapping(cls, data, "quantization policy")


@dataclass(frozen=True)
class EvalResult:
    """Perplexity of a model on one split of a corpus."""

    dataset: str
    perplexity: float
    tokens: int
    storage_bytes: int
    params: int
    compression: float

    def __post_init__(self) -> None:
        if not self.perplexity > 0:
            raise ValueError("'perplexity' must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    """Metrics collected at the end of one training epoch."""

    epoch: int
    train_loss: float
    val_perplexity: float
    replacement_rate: float
    tokens: int
    wall_clock: float

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def without_timing(self) -> Tuple[Any, ...]:
        return (
            self.epoch,
            self.train_loss,
            self.val_perplexity,
            self.replacement_rate,
            self.tokens,
        )


def normalize_sublayers(sublayer: str) -> Sequence[str]:
    if sublayer == "both":
        return SUBLAYERS
    if sublayer not in SUBLAYERS:
        raise ConfigError(
            f"Unknown option for sublayer: '{sublayer}'. "
            "Available options are: 'attention', 'both', 'mlp'"
        )
    return (sublayer,)
