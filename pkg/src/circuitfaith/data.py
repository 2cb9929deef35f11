from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LengthMismatch(ValueError):
    def __init__(self, pairs: list[int]):
        super().__init__(f"clean/corrupt length mismatch in pairs {pairs}")
        self.pairs = pairs


@dataclass
class PromptPairBatch:
    """Index-aligned clean/corrupt token id arrays plus their oracle answers.

    ``clean_answers`` / ``corrupt_answers`` hold per-position targets: token ids for
    classification tasks, real values for regression tasks.
    """

    task: str
    clean: np.ndarray
    corrupt: np.ndarray
    clean_answers: np.ndarray | None = None
    corrupt_answers: np.ndarray | None = None
    regression: bool = False

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.int64)
        self.corrupt = np.asarray(self.corrupt, dtype=np.int64)
        if self.clean.ndim != 2 or self.corrupt.ndim != 2:
            raise ValueError("clean and corrupt must be [B, T] arrays")
        if self.clean.shape[0] != self.corrupt.shape[0]:
            raise ValueError(f"{self.clean.shape[0]} clean prompts vs {self.corrupt.shape[0]} corrupt")
        if self.clean.shape[0] == 0:
            raise ValueError("empty batch")

    @classmethod
    def from_sequences(cls, task: str, clean: Sequence[Sequence[int]], corrupt: Sequence[Sequence[int]],
                       **kw) -> "PromptPairBatch":
        if len(clean) != len(corrupt):
            raise ValueError("clean and corrupt lists differ in length")
        bad = [i for i, (a, b) in enumerate(zip(clean, corrupt)) if len(a) != len(b)]
        if bad:
            raise LengthMismatch(bad)
        if len({len(a) for a in clean}) > 1:
            raise ValueError("all prompts in a batch must share one length")
        return cls(task, np.array(clean), np.array(corrupt), **kw)

    def __len__(self) -> int:
        return self.clean.shape[0]

    @property
    def seq_len(self) -> int:
        return self.clean.shape[1]

    def subset(self, idx) -> "PromptPairBatch":
        pick = lambda a: None if a is None else a[idx]
        return PromptPairBatch(self.task, self.clean[idx], self.corrupt[idx],
                               pick(self.clean_answers), pick(self.corrupt_answers), self.regression)
