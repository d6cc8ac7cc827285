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

import logging

import numpy as np
import pytest

from layer_delta import ModelConfig, TrainConfig, init_model, load_corpus

TINY_CONFIG = ModelConfig(
    n_layers=6, d_model=16, n_heads=2, d_ffn=24, max_seq_len=32, seed=0
)

TEXT = (
    "the cat sat on the mat. the dog ran to the park and back. "
    "a bird sang in the tree while the sun rose over the hill. "
) * 24


def random_weights_like(model, seed):
    """Copy of ``model`` with every block matrix redrawn, so deltas between
    blocks are full rank."""
    rng = np.random.default_rng(seed)
    other = model.copy()
    for site in model.config.weight_sites():
        t = other.params[site.name]
        t.data = rng.normal(0.0, 0.05, size=t.shape)
    return other


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_CONFIG


@pytest.fixture
def tiny_model(tiny_config):
    return random_weights_like(init_model(tiny_config), seed=1)


@pytest.fixture
def corpus_path(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(TEXT, encoding="utf-8")
    return path


@pytest.fixture
def corpus(corpus_path):
    return load_corpus(corpus_path)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(
        epochs=2, batch_size=4, seq_len=16, learning_rate=3e-3, seed=0, alpha=0.5
    )


@pytest.fixture(scope="function", autouse=True)
def layer_delta_logging():
    logger = logging.getLogger("layer_delta")
    level = logger.level
    yield
    logger.setLevel(level)
    for name in (
        "checkpoint",
        "cli",
        "delta",
        "linalg",
        "pmr",
        "quantizer",
        "redundancy",
        "tensor",
        "training",
        "transformer",
    ):
        logger = logging.getLogger(f"layer_delta.{name}")
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
        logger.setLevel(logging.NOTSET)
