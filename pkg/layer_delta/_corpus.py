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

"""Byte-level tokenizer and corpus splits."""

import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Tuple, Union

import numpy as np

from ._exceptions import CorpusError
from ._tensor import Array

#: Sequence markers. Corpora are one continuous byte stream and never carry
#: them; 'tokenize' adds them only when asked.
BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258

SPLITS = ("train", "val", "test")


def tokenize(text: Union[str, bytes], add_special: bool = False) -> Array:
    """UTF-8 bytes of ``text`` as token ids, wrapped in BOS and EOS when
    ``add_special`` is set.
    """
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if add_special:
        ids = np.concatenate([[BOS_ID], ids, [EOS_ID]]).astype(np.int64)
    return ids


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    """Bytes of the ids, dropping BOS and EOS markers."""
    values = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    values = values[(values != BOS_ID) & (values != EOS_ID)]
    if values.size and (values.min() < 0 or values.max() > 255):
        raise ValueError("Token ids must be byte values, BOS or EOS")
    return values.astype(np.uint8).tobytes()


def detokenize(ids: Iterable[int]) -> str:
    """Text of the ids. Invalid UTF-8 sequences are replaced."""
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Corpus:
    """Token ids of a text split contiguously into train/val/test."""

    ids: Array
    #: ``(train_end, val_end)`` offsets into ``ids``
    boundaries: Tuple[int, int]
    #: Identifier recorded in evaluation results, the file name by default
    corpus_id: str = ""

    @property
    def train(self) -> Array:
        return self.ids[: self.boundaries[0]]

    @property
    def val(self) -> Array:
        return self.ids[self.boundaries[0] : self.boundaries[1]]

    @property
    def test(self) -> Array:
        return self.ids[self.boundaries[1] :]

    def split(self, name: str) -> Array:
        if name not in SPLITS:
            raise ValueError(
                f"Unknown option for split: '{name}'. "
                "Available options are: 'test', 'train', 'val'"
            )
        return getattr(self, name)  # type: ignore[no-any-return]

    def split_sizes(self) -> Dict[str, int]:
        return {name: int(self.split(name).size) for name in SPLITS}


def split_ids(ids: Any, corpus_id: str = "") -> Corpus:
    """80/10/10 contiguous split of a token stream."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise CorpusError("Corpus is empty")
    n = ids.size
    train_end = (8 * n) // 10
    val_end = train_end + n // 10
    return Corpus(ids=ids, boundaries=(train_end, val_end), corpus_id=corpus_id)


def load_corpus(path: Union[str, "os.PathLike[str]"], seed: int = 0) -> Corpus:
    """Reads a UTF-8 text file and splits it.

    Splits are contiguous so ``seed`` doesn't change them; it's accepted so
    every loader in a pipeline shares one signature.
    """
    del seed
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorpusError(f"Couldn't read corpus '{path}': {e.strerror}", errors=(e,)) from None
    if not data:
        raise CorpusError(f"Corpus '{path}' is empty")
    return split_ids(tokenize(data), corpus_id=os.path.basename(os.fspath(path)))


def unigram_perplexity(train_ids: Any, eval_ids: Any, vocab_size: int = VOCAB_SIZE) -> float:
    """Perplexity of ``eval_ids`` under add-one smoothed unigram counts of
    ``train_ids``.
    """
    train = np.asarray(train_ids, dtype=np.int64)
    target = np.asarray(eval_ids, dtype=np.int64)
    if target.size == 0:
        raise CorpusError("Evaluation split is empty")
    counts = np.bincount(train, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(np.exp(-logp[target].mean()))
