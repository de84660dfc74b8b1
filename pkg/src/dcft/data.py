"""Token-sequence classification datasets: synthetic generators and CSV I/O.

CSV layout: a header row with a ``label`` column (integer) and a ``tokens``
column holding space-separated integer token ids.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError


@dataclass
class Dataset:
    sequences: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise DataError(f"{len(self.sequences)} sequences but {len(self.labels)} labels")
        for i, seq in enumerate(self.sequences):
            if len(seq) == 0:
                raise DataError(f"row {i}: empty token sequence")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset([self.sequences[i] for i in idx], self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["Dataset"]:
        """Mini-batches in order, or shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])

    def validate(self, vocab_size: int, max_seq_len: int, num_classes: int) -> None:
        for i, seq in enumerate(self.sequences):
            if seq.min() < 0 or seq.max() >= vocab_size:
                raise DataError(f"row {i}: token ids must lie in [0, {vocab_size})")
            if len(seq) > max_seq_len:
                raise DataError(f"row {i}: length {len(seq)} exceeds max_seq_len {max_seq_len}")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise DataError(f"labels must lie in [0, {num_classes})")


# -- generators ------------------------------------------------------------


def token_majority(n: int, vocab_size: int = 16, seq_len: int = 9, seed: int = 0) -> Dataset:
    """Label 1 when tokens from the upper half of the vocabulary outnumber the lower half.

    The label is a threshold of a linear function of token counts, so a
    bag-of-tokens linear probe separates it exactly.
    """
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, vocab_size, size=(n, seq_len))
    upper = (toks >= vocab_size // 2).sum(axis=1)
    labels = (upper > seq_len - upper).astype(np.int64)
    return Dataset(list(toks), labels)


def marked_parity(n: int, vocab_size: int = 16, seq_len: int = 8, seed: int = 0, marker: int = 0) -> Dataset:
    """Label is the parity of how often ``marker`` appears."""
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, vocab_size, size=(n, seq_len))
    labels = ((toks == marker).sum(axis=1) % 2).astype(np.int64)
    return Dataset(list(toks), labels)


def teacher(n: int, vocab_size: int = 16, seq_len: int = 8, seed: int = 0, num_classes: int = 2) -> Dataset:
    """Labels from the argmax of a fixed random projection of token counts."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(vocab_size, num_classes))
    toks = rng.integers(0, vocab_size, size=(n, seq_len))
    counts = np.stack([np.bincount(t, minlength=vocab_size) for t in toks])
    return Dataset(list(toks), np.argmax(counts @ proj, axis=1))


GENERATORS = {
    "token-majority": token_majority,
    "marked-parity": marked_parity,
    "teacher": teacher,
}


def generate(task: str, n: int, vocab_size: int, seq_len: int, seed: int) -> Dataset:
    if task not in GENERATORS:
        raise DataError(f"unknown task {task!r}; known: {', '.join(GENERATORS)}")
    return GENERATORS[task](n, vocab_size=vocab_size, seq_len=seq_len, seed=seed)


# -- CSV -------------------------------------------------------------------


def _parse_rows(reader: csv.DictReader, origin: str) -> Dataset:
    if reader.fieldnames is None or not {"label", "tokens"} <= set(reader.fieldnames):
        raise DataError(f"{origin}: header must contain 'label' and 'tokens' columns")
    seqs, labels = [], []
    for line, row in enumerate(reader, start=2):
        try:
            labels.append(int(row["label"]))
            seqs.append(np.array([int(t) for t in row["tokens"].split()], dtype=np.int64))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{origin}:{line}: {exc}") from None
    if not labels:
        raise DataError(f"{origin}: no data rows")
    return Dataset(seqs, labels)


def read_csv(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            return _parse_rows(csv.DictReader(fh), str(path))
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except IsADirectoryError:
        raise DataError(f"dataset path is a directory: {path}") from None


def to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "tokens"])
    for seq, label in zip(ds.sequences, ds.labels):
        writer.writerow([int(label), " ".join(str(int(t)) for t in seq)])
    return buf.getvalue()


BUNDLED = {"token-majority": "token_majority.csv"}

# parameters the bundled files were generated with
BUNDLED_RECIPE = {"token-majority": dict(n=512, vocab_size=16, seq_len=9, seed=7)}


def bundled(name: str = "token-majority") -> Dataset:
    if name not in BUNDLED:
        raise DataError(f"no bundled dataset {name!r}; known: {', '.join(BUNDLED)}")
    text = resources.files("dcft").joinpath("data", BUNDLED[name]).read_text()
    return _parse_rows(csv.DictReader(io.StringIO(text)), f"bundled:{name}")
