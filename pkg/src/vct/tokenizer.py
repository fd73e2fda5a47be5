"""View-centric tokenization.

Each view is cut into length-P sub-series, embedded by its own linear map,
prefixed with its own special token, and tagged with a positional row and a
view-type vector.  The two per-view sequences are then concatenated, ECG
first.  Nothing in one view's tokens depends on the other view's samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

VIEWS = ("ecg", "ppg")


@dataclass(frozen=True)
class TokenMeta:
    view: str  # ecg | ppg | prompt
    role: str  # special | patch | prompt | mask
    time_index: int | None = None


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, T, d)
    meta: list[TokenMeta]

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"TokenSequence expects (B, T, d) tokens, got {self.tokens.shape}")
        if len(self.meta) != self.tokens.shape[1]:
            raise ShapeError(f"meta length {len(self.meta)} != sequence length {self.tokens.shape[1]}")

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def special_index(self, view: str | None = None) -> int:
        """Position of the first special token (optionally of a given view)."""
        for i, m in enumerate(self.meta):
            if m.role == "special" and (view is None or m.view == view):
                return i
        raise LookupError(f"no special token for view {view!r} in sequence")


def segment(signal: np.ndarray, patch_len: int) -> np.ndarray:
    """Split the trailing axis into contiguous patches: (..., W) -> (..., N, P)."""
    signal = np.asarray(signal, dtype=np.float64)
    w = signal.shape[-1]
    if patch_len <= 0 or w % patch_len:
        raise ValueError(f"signal length {w} is not divisible by patch length {patch_len}")
    return signal.reshape(signal.shape[:-1] + (w // patch_len, patch_len))


@lru_cache(maxsize=32)
def _positional_cached(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def positional_table(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table; row t depends only on (t, dim)."""
    return _positional_cached(int(length), int(dim))


def init_tokenizer(params: dict, patch_len: int, dim: int, rng: np.random.Generator, views=VIEWS) -> None:
    scale = np.sqrt(2.0 / (patch_len + dim))
    for v in views:
        params[f"tokenizer.embed.{v}"] = Tensor(rng.normal(0, scale, (patch_len, dim)), requires_grad=True)
        params[f"tokenizer.special.{v}"] = Tensor(rng.normal(0, 0.02, dim), requires_grad=True)
        params[f"tokenizer.type.{v}"] = Tensor(rng.normal(0, 0.02, dim), requires_grad=True)


def tokenize_view(signal: np.ndarray, params: dict, view: str) -> TokenSequence:
    """(B, W) or (W,) signal -> (B, N+1, d) tokens: special row first, then patches."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    sig = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    embed = params[f"tokenizer.embed.{view}"]
    special = params[f"tokenizer.special.{view}"]
    vtype = params[f"tokenizer.type.{view}"]
    p, d = embed.shape
    if sig.shape[-1] % p:
        raise ShapeError(f"tokenize_view: signal length {sig.shape[-1]} vs embedding rows {p}")
    patches = segment(sig, p)  # (B, N, P)
    b, n, _ = patches.shape
    patch_tok = ad.matmul(Tensor(patches), embed)  # (B, N, d)
    spec_tok = ad.add(ad.reshape(special, (1, 1, d)), Tensor(np.zeros((b, 1, d))))
    body = ad.concat([spec_tok, patch_tok], axis=1)
    body = ad.add(body, Tensor(positional_table(n + 1, d)))
    body = ad.add(body, vtype)
    meta = [TokenMeta(view, "special", 0)] + [TokenMeta(view, "patch", t) for t in range(n)]
    return TokenSequence(body, meta)


def join_views(*seqs: TokenSequence) -> TokenSequence:
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise ShapeError(f"join_views: embedding dims differ {sorted(dims)}")
    return TokenSequence(ad.concat([s.tokens for s in seqs], axis=1), [m for s in seqs for m in s.meta])


def tokenize_pair(ecg: np.ndarray, ppg: np.ndarray, params: dict) -> TokenSequence:
    return join_views(tokenize_view(ecg, params, "ecg"), tokenize_view(ppg, params, "ppg"))
