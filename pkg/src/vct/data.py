"""Batched views of signal pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .synth import SignalPair


@dataclass
class Batch:
    ecg: np.ndarray  # (B, W)
    ppg: np.ndarray  # (B, W)
    ecg_present: np.ndarray  # (B,) bool
    ppg_present: np.ndarray  # (B,) bool
    y_reg: np.ndarray  # (B,)
    y_cls: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return self.ecg.shape[0]

    def view(self, name: str) -> np.ndarray:
        return self.ecg if name == "ecg" else self.ppg

    def subset(self, idx) -> "Batch":
        return Batch(
            self.ecg[idx], self.ppg[idx], self.ecg_present[idx], self.ppg_present[idx], self.y_reg[idx], self.y_cls[idx]
        )


def stack_pairs(pairs: Sequence[SignalPair]) -> Batch:
    if not pairs:
        raise ValueError("cannot batch an empty list of pairs")
    return Batch(
        ecg=np.stack([p.ecg for p in pairs]),
        ppg=np.stack([p.ppg for p in pairs]),
        ecg_present=np.array([p.ecg_present for p in pairs], dtype=bool),
        ppg_present=np.array([p.ppg_present for p in pairs], dtype=bool),
        y_reg=np.array([p.label_reg for p in pairs], dtype=np.float64),
        y_cls=np.array([p.label_cls for p in pairs], dtype=np.int64),
    )


def standardize_views(data: Batch, eps: float = 1e-8) -> Batch:
    """Z-score each present view of each sample; absent (all-zero) views stay zero."""

    def _z(x: np.ndarray, present: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=1, keepdims=True)
        sd = x.std(axis=1, keepdims=True)
        out = (x - mu) / np.maximum(sd, eps)
        keep = present[:, None] & (sd > eps)
        return np.where(keep, out, 0.0)

    return Batch(
        _z(data.ecg, data.ecg_present),
        _z(data.ppg, data.ppg_present),
        data.ecg_present.copy(),
        data.ppg_present.copy(),
        data.y_reg.copy(),
        data.y_cls.copy(),
    )


def batch_indices(
    n: int, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False
) -> Iterator[np.ndarray]:
    """Index arrays of one pass over ``n`` samples, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        if drop_last and idx.size < batch_size:
            break
        yield idx


def iterate_batches(
    data: Batch, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False
) -> Iterator[Batch]:
    for idx in batch_indices(len(data), batch_size, rng, drop_last):
        yield data.subset(idx)
