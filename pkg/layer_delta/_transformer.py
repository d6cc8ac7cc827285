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

"""Pre-norm decoder-only transformer with addressable weight sites."""

import functools
import logging
import math
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import _tensor as T
from ._exceptions import ShapeError
from ._losses import log_softmax
from ._models import SUBLAYER_ROLES, ModelConfig, WeightSite
from ._tensor import Array, Tensor

_logger = logging.getLogger("layer_delta.transformer")

#: Called as ``observer(sublayer, block, h_in, h_out)`` around every residual add
ResidualObserver = Callable[[str, int, Array, Array], None]

INIT_STD = 0.02
ROTARY_BASE = 10000.0


def parameter_names(config: ModelConfig) -> List[str]:
    """Names of every stored parameter of a model, in canonical order."""
    names = ["embed"]
    for block in range(config.n_layers):
        names.append(f"blocks.{block}.attn_norm")
        names.extend(f"blocks.{block}.attention.{r}" for r in SUBLAYER_ROLES["attention"])
        names.append(f"blocks.{block}.mlp_norm")
        names.extend(f"blocks.{block}.mlp.{r}" for r in SUBLAYER_ROLES["mlp"])
    names.extend(["final_norm", "output"])
    return names


def parameter_shape(config: ModelConfig, name: str) -> Tuple[int, ...]:
    if name in ("embed", "output"):
        return (config.vocab_size, config.d_model)
    if name.endswith("_norm"):
        return (config.d_model,)
    return WeightSite.from_name(name).shape(config)


class ParameterView(ABC):
    """Read access to the weights a forward pass needs.

    Concrete views decide where a block matrix comes from: a plain model
    returns its stored matrix, a compressed model reconstructs targets
    from anchors and deltas.
    """

    config: ModelConfig

    @abstractmethod
    def param(self, name: str) -> Tensor:
        """Embedding, norm gains and output projection by name."""

    @abstractmethod
    def weight(self, site: WeightSite) -> Tensor:
        """Effective ``[out, in]`` matrix of a block site."""

    def project(self, site: WeightSite, x: Tensor) -> Tensor:
        """Applies ``x @ Wᵀ`` for the site."""
        return T.matmul(x, T.transpose(self.weight(site)))


class Model(ParameterView):
    """Parameter set of a decoder-only transformer."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        expected = parameter_names(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(
                f"Parameters don't match the config (missing={missing}, unexpected={extra})"
            )
        for name in expected:
            shape = parameter_shape(config, name)
            if params[name].shape != shape:
                raise ShapeError(
                    f"Parameter '{name}' has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = {name: params[name] for name in expected}

    def __repr__(self) -> str:
        return f"<Model n_layers={self.config.n_layers} d_model={self.config.d_model}>"

    def param(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"Unknown parameter: '{name}'") from None

    def weight(self, site: WeightSite) -> Tensor:
        if site.block >= self.config.n_layers:
            raise KeyError(f"Unknown weight site: '{site.name}'")
        return self.params[site.name]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def requires_grad_(self, flag: bool = True) -> "Model":
        for tensor in self.params.values():
            tensor.requires_grad = flag
            tensor.grad = None
        return self

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def arrays(self) -> Dict[str, Array]:
        return {k: v.data for k, v in self.params.items()}


def init_model(config: ModelConfig, seed: Optional[int] = None) -> Model:
    """Scaled-normal initialization; ``o`` and ``down`` projections get an
    extra ``1/sqrt(2 * n_layers)`` factor. Norm gains start at 1.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    residual_std = INIT_STD / math.sqrt(2 * max(1, config.n_layers))
    params: Dict[str, Tensor] = {}
    for name in parameter_names(config):
        shape = parameter_shape(config, name)
        if name.endswith("_norm"):
            params[name] = Tensor(np.ones(shape))
        elif name.endswith(".o") or name.endswith(".down"):
            params[name] = Tensor(rng.normal(0.0, residual_std, size=shape))
        else:
            params[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape))
    return Model(config, params)


def count_params(model_or_config: Union[ModelConfig, ParameterView]) -> int:
    """Number of stored scalars of a model, excluding delta modules."""
    if isinstance(model_or_config, ModelConfig):
        c = model_or_config
        d, f, v = c.d_model, c.d_ffn, c.vocab_size
        return v * d + c.n_layers * (2 * d + 4 * d * d + 3 * d * f) + d + d * v
    total = sum(t.size for t in model_or_config.params.values())  # type: ignore[attr-defined]
    quantized = getattr(model_or_config, "quantized", {})
    return int(total + sum(int(np.prod(q.shape)) for q in quantized.values()))


@functools.lru_cache(maxsize=32)
def rotary_tables(head_dim: int, max_seq_len: int) -> Tuple[Array, Array]:
    inv_freq = 1.0 / (ROTARY_BASE ** (np.arange(0, head_dim, 2) / head_dim))
    angles = np.outer(np.arange(max_seq_len), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def check_tokens(config: ModelConfig, tokens: Any) -> Array:
    ids = np.asarray(tokens)
    if ids.ndim != 2:
        raise ShapeError(f"Tokens must have shape [batch, seq], got {tuple(ids.shape)}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("Tokens must be integer ids")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(
            f"Sequence length {ids.shape[1]} exceeds 'max_seq_len' ({config.max_seq_len})"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"Token ids must be in [0, {config.vocab_size})")
    return ids.astype(np.int64)


def _attention(view: ParameterView, block: int, x: Tensor, cos: Array, sin: Array) -> Tensor:
    config = view.config
    b, t, d = x.shape
    heads, hd = config.n_heads, config.head_dim

    def split(role: str) -> Tensor:
        proj = view.project(WeightSite(block, "attention", role), x)
        return T.transpose(T.reshape(proj, (b, t, heads, hd)), (0, 2, 1, 3))

    q = T.rotary(split("q"), cos, sin)
    k = T.rotary(split("k"), cos, sin)
    v = split("v")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(hd))
    probs = T.softmax(scores, causal=True)
    context = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return view.project(WeightSite(block, "attention", "o"), context)


def _mlp(view: ParameterView, block: int, x: Tensor) -> Tensor:
    gate = view.project(WeightSite(block, "mlp", "gate"), x)
    up = view.project(WeightSite(block, "mlp", "up"), x)
    return view.project(WeightSite(block, "mlp", "down"), T.mul(T.silu(gate), up))


def forward(
    view: ParameterView, tokens: Any, observer: Optional[ResidualObserver] = None
) -> Tensor:
    """Logits ``[B, T, V]`` for a batch of token ids ``[B, T]``.

    ``observer`` sees the residual stream before and after every sublayer.
    """
    config = view.config
    ids = check_tokens(config, tokens)
    seq = ids.shape[1]
    cos, sin = rotary_tables(config.head_dim, config.max_seq_len)
    cos, sin = cos[:seq], sin[:seq]
    eps = config.norm_eps

    h = T.embedding(view.param("embed"), ids)
    for block in range(config.n_layers):
        x = T.rms_norm(h, view.param(f"blocks.{block}.attn_norm"), eps)
        h_next = T.add(h, _attention(view, block, x, cos, sin))
        if observer is not None:
            observer("attention", block, h.data, h_next.data)
        h = h_next

        x = T.rms_norm(h, view.param(f"blocks.{block}.mlp_norm"), eps)
        h_next = T.add(h, _mlp(view, block, x))
        if observer is not None:
            observer("mlp", block, h.data, h_next.data)
        h = h_next

    h = T.rms_norm(h, view.param("final_norm"), eps)
    return T.matmul(h, T.transpose(view.param("output")))


def score_sequence(view: ParameterView, tokens: Any) -> Tuple[float, int]:
    """Total log-likelihood of ``tokens[1:]`` given their prefixes, and the
    number of scored tokens.
    """
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size < 2:
        raise ValueError("Sequence must have at least 2 tokens to be scored")
    with T.no_grad():
        logits = forward(view, ids[None, :])
    logp = log_softmax(logits.data[0, :-1])
    total = float(logp[np.arange(ids.size - 1), ids[1:]].sum())
    return total, int(ids.size - 1)


def evaluate_perplexity(
    view: ParameterView, ids: Any, seq_len: Optional[int] = None, batch_size: int = 16
) -> Tuple[float, int]:
    """Perplexity of a token stream, scored in fixed windows.

    Consecutive windows share one token so every token after the first is
    predicted exactly once. Returns ``(perplexity, scored_tokens)``.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size < 2:
        raise ValueError("Need at least 2 tokens to evaluate perplexity")
    window = min(seq_len or view.config.max_seq_len, view.config.max_seq_len)
    if window < 2:
        raise ValueError("Evaluation window must hold at least 2 tokens")
    starts = list(range(0, ids.size - 1, window - 1))
    full = [s for s in starts if s + window <= ids.size]
    tail = [s for s in starts if s + window > ids.size]

    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(full), batch_size):
            batch = np.stack([ids[s : s + window] for s in full[i : i + batch_size]])
            logp = log_softmax(forward(view, batch).data[:, :-1])
            picked = np.take_along_axis(logp, batch[:, 1:, None], axis=-1)
            total += float(picked.sum())
            count += batch.shape[0] * (window - 1)
        for s in tail:
            ll, n = score_sequence(view, ids[s:])
            total += ll
            count += n
    ppl = math.exp(-total / count)
    _logger.debug("Perplexity %.4f over %d tokens", ppl, count)
    return ppl, count
