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

"""Anchor sharing with low-rank deltas.

A target matrix is rebuilt from an earlier anchor matrix of the same
role as ``W_target = W_anchor + s * A @ B`` where ``A`` is ``M x r`` and
``B`` is ``r x N``. Only anchors and untouched matrices are stored.
"""

import contextlib
import dataclasses
import logging
from dataclasses import dataclass
from typing import (
    TYPE_CHECKING,
    Any,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np

from . import _tensor as T
from ._exceptions import PlanError, ShapeError
from ._linalg import qr_decompose, truncated_svd
from ._models import SUBLAYERS, ModelConfig, QuantPolicy, WeightSite, sort_sites
from ._tensor import Array, Tensor
from ._transformer import Model, ParameterView, count_params, forward, parameter_names

if TYPE_CHECKING:
    from ._quantizer import QuantizedTensor

_logger = logging.getLogger("layer_delta.delta")

INIT_METHODS = ("gaussian", "svd", "qr", "eva")
PLAN_STRATEGIES = ("sequential", "alternating", "similarity", "explicit")

#: Token positions sampled for activation-based initialization
EVA_SAMPLE_SIZE = 4096

RankSpec = Union[int, str, Mapping[Any, int]]


def default_protected_blocks(n_layers: int) -> FrozenSet[int]:
    """The first block and the last two blocks."""
    return frozenset(b for b in (0, n_layers - 2, n_layers - 1) if 0 <= b < n_layers)


@dataclass(frozen=True)
class SharingPlan:
    """Mapping from target sites to the anchor sites they're rebuilt from."""

    #: ``(target, anchor)`` pairs, kept sorted by target
    entries: Tuple[Tuple[WeightSite, WeightSite], ...] = ()
    #: Blocks that never hold a target or an anchor
    protected_blocks: FrozenSet[int] = frozenset()
    #: One of 'sequential', 'alternating', 'similarity', 'explicit'
    strategy: str = "explicit"

    def __post_init__(self) -> None:
        if self.strategy not in PLAN_STRATEGIES:
            raise PlanError(
                f"Unknown option for strategy: '{self.strategy}'. "
                f"Available options are: '{', '.join(sorted(PLAN_STRATEGIES))}'"
            )
        entries = tuple(sorted(self.entries, key=lambda e: e[0].sort_key))
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "protected_blocks", frozenset(self.protected_blocks))

        targets: Set[WeightSite] = set()
        for target, anchor in entries:
            if target in targets:
                raise PlanError(f"Target '{target}' appears more than once")
            targets.add(target)
            if (target.sublayer, target.role) != (anchor.sublayer, anchor.role):
                raise PlanError(
                    f"Anchor '{anchor}' has a different role than target '{target}'"
                )
            if anchor.block >= target.block:
                raise PlanError(f"Anchor '{anchor}' must come before target '{target}'")
            for site in (target, anchor):
                if site.block in self.protected_blocks:
                    raise PlanError(f"Site '{site}' lies in protected block {site.block}")
        for target, anchor in entries:
            if anchor in targets:
                raise PlanError(
                    f"Anchor '{anchor}' of '{target}' is itself a target, "
                    "anchors must resolve in one hop"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tuple[WeightSite, WeightSite]]:
        return iter(self.entries)

    @property
    def targets(self) -> List[WeightSite]:
        return [target for target, _ in self.entries]

    @property
    def anchors(self) -> List[WeightSite]:
        return sort_sites({anchor for _, anchor in self.entries})

    def anchor_of(self, site: WeightSite) -> Optional[WeightSite]:
        for target, anchor in self.entries:
            if target == site:
                return anchor
        return None

    def units(self) -> List[Tuple[int, str]]:
        """Distinct ``(block, sublayer)`` pairs holding targets, by depth."""
        units = {target.unit for target in self.targets}
        return sorted(units, key=lambda u: (u[0], SUBLAYERS.index(u[1])))

    def validate(self, config: ModelConfig) -> None:
        """Checks that every site of the plan exists in ``config``."""
        for target, anchor in self.entries:
            for site in (target, anchor):
                if site.block >= config.n_layers:
                    raise PlanError(
                        f"Unknown site '{site}' for a model with {config.n_layers} blocks"
                    )
        for block in self.protected_blocks:
            if not 0 <= block < max(1, config.n_layers):
                raise PlanError(f"Protected block {block} doesn't exist")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "protected_blocks": sorted(self.protected_blocks),
            "entries": [
                {"target": target.name, "anchor": anchor.name}
                for target, anchor in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SharingPlan":
        try:
            entries = tuple(
                (WeightSite.from_name(e["target"]), WeightSite.from_name(e["anchor"]))
                for e in data.get("entries", ())
            )
            return cls(
                entries=entries,
                protected_blocks=frozenset(int(b) for b in data.get("protected_blocks", ())),
                strategy=data.get("strategy", "explicit"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise PlanError(f"Invalid sharing plan: {e}", errors=(e,)) from None


@dataclass
class DeltaModule:
    """Low-rank pair whose scaled product is a weight difference."""

    A: Tensor
    B: Tensor
    rank: int
    scaling: float = 1.0
    init_method: str = "svd"

    def __post_init__(self) -> None:
        m, r = self.A.shape
        r2, n = self.B.shape
        if r != self.rank or r2 != self.rank:
            raise ShapeError(
                f"Delta factors {self.A.shape} and {self.B.shape} don't have rank {self.rank}"
            )
        if self.rank > min(m, n):
            raise ShapeError(f"Rank {self.rank} exceeds min{(m, n)}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.A.shape[0], self.B.shape[1])

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> Tensor:
        """``s * A @ B`` as a differentiable tensor."""
        return T.scale(T.matmul(self.A, self.B), self.scaling)

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]

    def copy(self) -> "DeltaModule":
        return dataclasses.replace(
            self, A=Tensor(self.A.data.copy()), B=Tensor(self.B.data.copy())
        )


class CompressedModel(ParameterView):
    """A model whose plan targets are stored as deltas over their anchors."""

    def __init__(
        self,
        config: ModelConfig,
        params: Dict[str, Tensor],
        plan: SharingPlan,
        deltas: Dict[WeightSite, DeltaModule],
        adapters: Optional[Dict[WeightSite, DeltaModule]] = None,
        quantized: Optional[Dict[str, "QuantizedTensor"]] = None,
        quant_policy: Optional[QuantPolicy] = None,
    ):
        plan.validate(config)
        targets = set(plan.targets)
        if set(deltas) != targets:
            raise PlanError("Every plan target needs exactly one delta module")
        quantized = dict(quantized or {})
        stored = set(params) | set(quantized)
        expected = {n for n in parameter_names(config)} - {t.name for t in targets}
        if stored != expected:
            missing = sorted(expected - stored)
            extra = sorted(stored - expected)
            raise PlanError(
                f"Stored tensors don't match the plan (missing={missing}, unexpected={extra})"
            )
        for site, delta in deltas.items():
            if delta.shape != site.shape(config):
                raise ShapeError(f"Delta of '{site}' has shape {delta.shape}")
        adapters = dict(adapters or {})
        for site in adapters:
            if site in targets:
                raise PlanError(f"Adapter attached to target '{site}'")

        self.config = config
        self.params = params
        self.plan = plan
        self.deltas = {site: deltas[site] for site in sort_sites(deltas)}
        self.adapters = {site: adapters[site] for site in sort_sites(adapters)}
        self.quantized = quantized
        self.quant_policy = quant_policy
        self._dropout = 0.0
        self._dropout_rng: Optional[np.random.Generator] = None

    def __repr__(self) -> str:
        return (
            f"<CompressedModel n_layers={self.config.n_layers} "
            f"deltas={len(self.deltas)} adapters={len(self.adapters)}>"
        )

    def stored(self, name: str) -> Tensor:
        """A stored base tensor, dequantized if needed."""
        if name in self.params:
            return self.params[name]
        if name in self.quantized:
            return Tensor(self.quantized[name].dequantize())
        raise KeyError(f"Unknown parameter: '{name}'")

    def param(self, name: str) -> Tensor:
        return self.stored(name)

    def base_weight(self, site: WeightSite) -> Tensor:
        """Stored matrix of a non-target site, with its adapter applied."""
        try:
            weight = self.stored(site.name)
        except KeyError:
            raise PlanError(f"No stored weight for '{site}'") from None
        adapter = self.adapters.get(site)
        if adapter is not None:
            weight = T.add(weight, adapter.delta())
        return weight

    def weight(self, site: WeightSite) -> Tensor:
        delta = self.deltas.get(site)
        if delta is None:
            if site.block >= self.config.n_layers:
                raise PlanError(f"Unknown site '{site}'")
            return self.base_weight(site)
        anchor = self.plan.anchor_of(site)
        if anchor is None or anchor.name not in self.params and anchor.name not in self.quantized:
            raise PlanError(f"Dangling anchor for target '{site}'")
        return T.add(self.base_weight(anchor), delta.delta())

    def project(self, site: WeightSite, x: Tensor) -> Tensor:
        if self._dropout_rng is None or self._dropout == 0.0:
            return super().project(site, x)
        delta = self.deltas.get(site)
        if delta is not None:
            base, low_rank = self.base_weight(self.plan.anchor_of(site)), delta  # type: ignore[arg-type]
        elif site in self.adapters:
            base, low_rank = self.stored(site.name), self.adapters[site]
        else:
            return super().project(site, x)
        out = T.matmul(x, T.transpose(base))
        dropped = T.dropout(x, self._dropout, self._dropout_rng)
        side = T.matmul(T.matmul(dropped, T.transpose(low_rank.B)), T.transpose(low_rank.A))
        return T.add(out, T.scale(side, low_rank.scaling))

    @contextlib.contextmanager
    def training(
        self, dropout: float, rng: Optional[np.random.Generator]
    ) -> Iterator["CompressedModel"]:
        """Enables dropout on the low-rank input path within the block."""
        previous = (self._dropout, self._dropout_rng)
        self._dropout, self._dropout_rng = dropout, rng
        try:
            yield self
        finally:
            self._dropout, self._dropout_rng = previous

    def delta_parameters(self) -> List[Tensor]:
        return [p for delta in self.deltas.values() for p in delta.parameters()]

    def adapter_parameters(self) -> List[Tensor]:
        return [p for adapter in self.adapters.values() for p in adapter.parameters()]

    def frozen_arrays(self) -> List[Array]:
        """Every stored array that delta-only training must leave untouched."""
        arrays = [self.params[name].data for name in sorted(self.params)]
        for name in sorted(self.quantized):
            arrays.extend([self.quantized[name].codes, self.quantized[name].scales])
        return arrays

    def num_delta_params(self) -> int:
        return sum(d.num_params for d in self.deltas.values()) + sum(
            a.num_params for a in self.adapters.values()
        )

    def num_stored_params(self) -> int:
        """Base scalars plus every delta and adapter scalar."""
        return count_params(self) + self.num_delta_params()

    def copy(self) -> "CompressedModel":
        return CompressedModel(
            self.config,
            {k: Tensor(v.data.copy()) for k, v in self.params.items()},
            self.plan,
            {site: d.copy() for site, d in self.deltas.items()},
            {site: a.copy() for site, a in self.adapters.items()},
            dict(self.quantized),
            self.quant_policy,
        )


class ActivationCapture(ParameterView):
    """Wraps a view and records the inputs that reach selected sites."""

    def __init__(self, inner: ParameterView, sites: Iterable[WeightSite]):
        self.inner = inner
        self.config = inner.config
        self.samples: Dict[WeightSite, List[Array]] = {site: [] for site in sites}

    def param(self, name: str) -> Tensor:
        return self.inner.param(name)

    def weight(self, site: WeightSite) -> Tensor:
        return self.inner.weight(site)

    def project(self, site: WeightSite, x: Tensor) -> Tensor:
        if site in self.samples:
            self.samples[site].append(x.data.reshape(-1, x.shape[-1]).copy())
        return self.inner.project(site, x)

    def matrix(self, site: WeightSite, limit: int) -> Array:
        rows = np.concatenate(self.samples[site], axis=0) if self.samples[site] else None
        if rows is None or rows.shape[0] == 0:
            raise ValueError(f"No activations were captured for '{site}'")
        return rows[:limit]


def compute_delta(w_anchor: Any, w_target: Any) -> Tensor:
    """``W_target - W_anchor``"""
    anchor = T.as_tensor(w_anchor)
    target = T.as_tensor(w_target)
    if anchor.shape != target.shape:
        raise ShapeError(
            f"Anchor shape {anchor.shape} doesn't match target shape {target.shape}"
        )
    return Tensor(target.data - anchor.data)


def init_delta(
    delta_full: Any,
    rank: int,
    method: str = "svd",
    activations: Optional[Any] = None,
    scaling: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> DeltaModule:
    """Initializes a rank-``rank`` delta module for an ``M x N`` difference.

    - ``gaussian``: ``A ~ N(0, 1/r)``, ``B = 0``.
    - ``svd``: ``A = U_r diag(S_r)``, ``B = V_rᵀ`` of ``delta_full``.
    - ``qr``: leading ``r`` columns of ``Q`` and rows of ``R``.
    - ``eva``: ``B`` holds the top right-singular vectors of the ``S x N``
      input activations, ``A = 0``.

    ``scaling`` applies to gaussian and eva and defaults to 1.
    """
    delta = T.as_tensor(delta_full).data
    if delta.ndim != 2:
        raise ShapeError(f"Expected a 2-D delta, got shape {delta.shape}")
    m, n = delta.shape
    if not isinstance(rank, (int, np.integer)) or not 1 <= rank <= min(m, n):
        raise ShapeError(f"Rank must be between 1 and {min(m, n)} for shape {(m, n)}, got {rank}")
    rank = int(rank)

    if method == "gaussian":
        rng = rng if rng is not None else np.random.default_rng(0)
        a = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(m, rank))
        b = np.zeros((rank, n))
        s = 1.0 if scaling is None else float(scaling)
    elif method == "svd":
        u, sv, v = truncated_svd(delta, rank)
        a, b, s = u * sv, v.T.copy(), 1.0
    elif method == "qr":
        q, r = qr_decompose(delta)
        a, b, s = q[:, :rank].copy(), r[:rank].copy(), 1.0
    elif method == "eva":
        if activations is None:
            raise ValueError("The 'eva' init method requires activations")
        acts = T.as_tensor(activations).data
        if acts.ndim != 2 or acts.shape[1] != n:
            raise ShapeError(
                f"Activations of shape {acts.shape} don't match input size {n}"
            )
        if rank > acts.shape[0]:
            raise ShapeError(f"Rank {rank} exceeds the {acts.shape[0]} activation samples")
        b = truncated_svd(acts, rank).V.T.copy()
        a = np.zeros((m, rank))
        s = 1.0 if scaling is None else float(scaling)
    else:
        raise ValueError(
            f"Unknown option for init_method: '{method}'. "
            f"Available options are: '{', '.join(INIT_METHODS)}'"
        )
    return DeltaModule(A=Tensor(a), B=Tensor(b), rank=rank, scaling=s, init_method=method)


def reconstruct_weight(compressed: CompressedModel, site: Union[WeightSite, str]) -> Tensor:
    """Effective weight of a site: the stored matrix, or anchor plus delta."""
    if isinstance(site, str):
        try:
            site = WeightSite.from_name(site)
        except ValueError as e:
            raise PlanError(f"Unknown site '{site}'", errors=(e,)) from None
    return compressed.weight(site)


def resolve_ranks(plan: SharingPlan, config: ModelConfig, rank: RankSpec) -> Dict[WeightSite, int]:
    """Turns an integer, ``"full"`` or a per-site mapping into a rank per target.

    Mapping keys may be sites or site names; integer ranks are capped at
    ``min(M, N)`` of each site.
    """
    ranks: Dict[WeightSite, int] = {}
    for target in plan.targets:
        full = min(target.shape(config))
        if isinstance(rank, str):
            if rank != "full":
                raise ValueError(f"Rank must be an integer or 'full', got '{rank}'")
            ranks[target] = full
        elif isinstance(rank, Mapping):
            value = rank.get(target, rank.get(target.name))
            if value is None:
                raise PlanError(f"No rank given for target '{target}'")
            ranks[target] = full if value == "full" else int(value)
        else:
            ranks[target] = min(int(rank), full)
        if ranks[target] < 1 or ranks[target] > full:
            raise ShapeError(
                f"Rank {ranks[target]} for '{target}' must be between 1 and {full}"
            )
    return ranks


def capture_activations(
    model: ParameterView, sites: Sequence[WeightSite], tokens: Any, limit: int = EVA_SAMPLE_SIZE
) -> Dict[WeightSite, Array]:
    """Inputs reaching each site while running ``tokens`` through ``model``."""
    capture = ActivationCapture(model, sites)
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        window = model.config.max_seq_len
        usable = (ids.size // window) * window or ids.size
        ids = ids[:usable].reshape(-1, min(window, usable))
    with T.no_grad():
        seen = 0
        for row in ids:
            forward(capture, row[None, :])
            seen += row.size
            if seen >= limit:
                break
    return {site: capture.matrix(site, limit) for site in sites}


def compress(
    model: Model,
    plan: SharingPlan,
    rank: RankSpec = "full",
    method: str = "svd",
    calibration: Optional[Any] = None,
    seed: int = 0,
    lora_alpha: Optional[float] = None,
    eva_samples: int = EVA_SAMPLE_SIZE,
) -> CompressedModel:
    """Replaces every plan target by a delta over its anchor.

    gaussian and eva deltas start at zero so the compressed model begins
    as the anchored model; svd at full rank reproduces the original.
    """
    plan.validate(model.config)
    if method not in INIT_METHODS:
        raise ValueError(
            f"Unknown option for init_method: '{method}'. "
            f"Available options are: '{', '.join(INIT_METHODS)}'"
        )
    ranks = resolve_ranks(plan, model.config, rank)
    activations: Dict[WeightSite, Array] = {}
    if method == "eva" and plan.targets:
        if calibration is None:
            raise ValueError("The 'eva' init method requires a calibration corpus")
        activations = capture_activations(model, plan.targets, calibration, eva_samples)

    rng = np.random.default_rng(seed)
    deltas: Dict[WeightSite, DeltaModule] = {}
    for target, anchor in plan.entries:
        r = ranks[target]
        scaling = None if lora_alpha is None else lora_alpha / r
        deltas[target] = init_delta(
            compute_delta(model.weight(anchor), model.weight(target)),
            r,
            method,
            activations=activations.get(target),
            scaling=scaling,
            rng=rng,
        )

    target_names = {t.name for t in plan.targets}
    params = {
        name: Tensor(tensor.data.copy())
        for name, tensor in model.params.items()
        if name not in target_names
    }
    compressed = CompressedModel(model.config, params, plan, deltas)
    original = count_params(model)
    stored = compressed.num_stored_params()
    _logger.info(
        "Compressed %d sites with '%s' init: %d -> %d parameters (%.2f%%)",
        len(plan),
        method,
        original,
        stored,
        100.0 * (original - stored) / original,
    )
    return compressed


def compression_ratio(original_params: int, compressed_params: int) -> float:
    """``(original - compressed) / original``"""
    if original_params <= 0 or compressed_params <= 0:
        raise ValueError("Parameter counts must be positive")
    if compressed_params > original_params:
        raise ValueError(
            f"Compressed count {compressed_params} exceeds original count {original_params}"
        )
    return (original_params - compressed_params) / original_params


_DTYPE_BYTES = {"f64": 8, "f32": 4}


def storage_breakdown(compressed: CompressedModel, dtype: str = "f32") -> Dict[str, int]:
    """Bytes each part of a compressed model takes in a checkpoint."""
    try:
        width = _DTYPE_BYTES[dtype]
    except KeyError:
        raise ValueError(f"Unknown float dtype: '{dtype}'") from None
    base = sum(t.size for t in compressed.params.values()) * width
    quantized = sum(q.nbytes for q in compressed.quantized.values())
    deltas = sum(d.num_params for d in compressed.deltas.values()) * width
    adapters = sum(a.num_params for a in compressed.adapters.values()) * width
    return {
        "base_bytes": base,
        "quantized_bytes": quantized,
        "delta_bytes": deltas,
        "adapter_bytes": adapters,
        "total_bytes": base + quantized + deltas + adapters,
    }


def attach_adapters(
    compressed: CompressedModel,
    rank: int,
    lora_alpha: Optional[float] = None,
    seed: int = 0,
) -> CompressedModel:
    """Adds zero-initialized low-rank adapters to every retained block matrix."""
    rng = np.random.default_rng([seed, 3])
    targets = set(compressed.plan.targets)
    adapters = dict(compressed.adapters)
    for site in compressed.config.weight_sites():
        if site in targets or site in adapters:
            continue
        r = min(rank, min(site.shape(compressed.config)))
        scaling = 1.0 if lora_alpha is None else lora_alpha / r
        adapters[site] = init_delta(
            np.zeros(site.shape(compressed.config)), r, "gaussian", scaling=scaling, rng=rng
        )
    compressed.adapters = {site: adapters[site] for site in sort_sites(adapters)}
    return compressed


def merge_adapters(compressed: CompressedModel) -> CompressedModel:
    """Folds adapters into the stored weights they're attached to.

    A quantized weight with an adapter is stored in float after merging.
    """
    params = {k: Tensor(v.data.copy()) for k, v in compressed.params.items()}
    quantized = dict(compressed.quantized)
    for site, adapter in compressed.adapters.items():
        base = compressed.stored(site.name).data
        params[site.name] = Tensor(base + adapter.scaling * (adapter.A.data @ adapter.B.data))
        quantized.pop(site.name, None)
    return CompressedModel(
        compressed.config,
        params,
        compressed.plan,
        {site: d.copy() for site, d in compressed.deltas.items()},
        quantized=quantized,
        quant_policy=compressed.quant_policy if quantized else None,
    )
