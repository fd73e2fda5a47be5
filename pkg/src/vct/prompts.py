"""Missing-view scenarios and missing-aware prompts.

A sample's presence flags pick one of three prompt sets (complete, ECG-only,
PPG-only).  Each selected encoder layer owns its own prompt matrix per case.
Input-tailored prompts are prepended to the layer input and accumulate with
depth; attention-tailored prompts are split in half and prepended to the
keys and values only, so sequence length never changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .synth import SignalPair
from .tokenizer import TokenMeta, TokenSequence

CASES = ("complete", "ecg_only", "ppg_only")
KINDS = ("missing_ecg", "missing_ppg", "missing_both")
STYLES = ("input_tailored", "attention_tailored")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MissingScenario:
    kind: str = "missing_both"
    beta: float = 70.0
    applies_to: str = "both"  # train | test | both

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown missing kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.beta <= 100.0:
            raise ValueError(f"missing rate beta={self.beta} outside [0, 100]")
        if self.applies_to not in ("train", "test", "both"):
            raise ValueError(f"applies_to must be train, test or both, got {self.applies_to!r}")

    def applies(self, split: str) -> bool:
        if self.applies_to == "both":
            return True
        return split == self.applies_to or (self.applies_to == "train" and split == "val")

    def counts(self, n: int) -> dict[str, int]:
        """Number of samples per case for a set of ``n`` samples."""
        n_missing = _round_half_up(self.beta * n / 100.0)
        if self.kind == "missing_ecg":
            out = {"ppg_only": n_missing, "ecg_only": 0}
        elif self.kind == "missing_ppg":
            out = {"ecg_only": n_missing, "ppg_only": 0}
        else:
            half = _round_half_up(n_missing / 2.0)
            out = {"ecg_only": half, "ppg_only": n_missing - half}
        out["complete"] = n - n_missing
        return out


def _drop_view(p: SignalPair, view: str) -> SignalPair:
    if view == "ecg":
        return replace(p, ecg=np.zeros_like(p.ecg), ecg_present=False)
    return replace(p, ppg=np.zeros_like(p.ppg), ppg_present=False)


def apply_missing(
    pairs: Sequence[SignalPair], scenario: MissingScenario, rng: np.random.Generator
) -> list[SignalPair]:
    """Zero out one view on a uniformly chosen subset; labels and order are kept."""
    scenario.validate()
    n = len(pairs)
    counts = scenario.counts(n)
    out = list(pairs)
    if counts["complete"] == n:
        return out
    chosen = rng.permutation(n)
    n_ecg_only, n_ppg_only = counts["ecg_only"], counts["ppg_only"]
    for i in chosen[:n_ppg_only]:
        out[i] = _drop_view(pairs[i], "ecg")
    for i in chosen[n_ppg_only : n_ppg_only + n_ecg_only]:
        out[i] = _drop_view(pairs[i], "ppg")
    return out


def case_of(ecg_present: bool, ppg_present: bool) -> str:
    if ecg_present and ppg_present:
        return "complete"
    if ecg_present:
        return "ecg_only"
    if ppg_present:
        return "ppg_only"
    raise ValueError("both views absent: no prompt case applies")


def case_indices(ecg_present: np.ndarray, ppg_present: np.ndarray) -> np.ndarray:
    return np.array([CASES.index(case_of(bool(e), bool(p))) for e, p in zip(ecg_present, ppg_present)], dtype=np.intp)


@dataclass(frozen=True)
class PromptConfig:
    style: str = "input_tailored"
    length: int = 20
    layers: tuple[int, ...] = (1, 2, 3, 4, 5, 6)  # 1-indexed encoder layers
    init_std: float = 0.02

    def validate(self, depth: int | None = None) -> None:
        if self.style not in STYLES:
            raise ValueError(f"unknown prompt style {self.style!r}")
        if self.length < 0:
            raise ValueError("prompt length must be non-negative")
        if self.style == "attention_tailored" and self.length % 2:
            raise ValueError(f"attention-tailored prompts need an even length, got {self.length}")
        if depth is not None and any(not 1 <= i <= depth for i in self.layers):
            raise ValueError(f"prompt layers {self.layers} outside 1..{depth}")


def prompt_name(case: str, layer: int) -> str:
    return f"prompts.{case}.layer{layer}"


def init_prompt_bank(params: dict, cfg: PromptConfig, dim: int, rng: np.random.Generator, depth: int | None = None) -> None:
    cfg.validate(depth)
    for case in CASES:
        for layer in cfg.layers:
            params[prompt_name(case, layer)] = Tensor(rng.normal(0, cfg.init_std, (cfg.length, dim)), requires_grad=True)


def select_prompt(flags: tuple[bool, bool], params: dict, cfg: PromptConfig) -> dict[int, Tensor]:
    """Per-layer prompt matrices for one sample's presence flags."""
    case = case_of(*flags)
    return {layer: params[prompt_name(case, layer)] for layer in cfg.layers}


def inject_input_tailored(seq: TokenSequence, prompt: Tensor) -> TokenSequence:
    """[prompt; h] along the sequence axis.  ``prompt`` is (N_p, d) or (B, N_p, d)."""
    p = ad.as_tensor(prompt)
    b, _, d = seq.tokens.shape
    if p.shape[-1] != d:
        raise ShapeError(f"prompt dim {p.shape[-1]} != token dim {d}")
    if p.ndim == 2:
        p = ad.add(ad.reshape(p, (1,) + p.shape), Tensor(np.zeros((b, 1, 1))))
    toks = ad.concat([p, seq.tokens], axis=1)
    return TokenSequence(toks, [TokenMeta("prompt", "prompt", None)] * p.shape[1] + list(seq.meta))


def split_kv(prompt: Tensor) -> tuple[Tensor, Tensor]:
    n = prompt.shape[-2]
    if n % 2:
        raise ValueError(f"attention-tailored prompt length must be even, got {n}")
    half = n // 2
    if prompt.ndim == 2:
        return prompt[:half], prompt[half:]
    return prompt[:, :half], prompt[:, half:]


def inject_attention_tailored(q, k, v, prompt, scale: float | None = None) -> Tensor:
    """softmax(Q [p_k; K]^T * scale) [p_v; V] for single-head (T, d) or (B, T, d) inputs."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    pk, pv = split_kv(ad.as_tensor(prompt))
    axis = q.ndim - 2
    if pk.ndim < k.ndim:
        b = k.shape[0]
        pk = ad.add(ad.reshape(pk, (1,) + pk.shape), Tensor(np.zeros((b, 1, 1))))
        pv = ad.add(ad.reshape(pv, (1,) + pv.shape), Tensor(np.zeros((b, 1, 1))))
    keys = ad.concat([pk, k], axis=axis)
    vals = ad.concat([pv, v], axis=axis)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(keys)), scale), axis=-1)
    return ad.matmul(att, vals)


@dataclass
class MissingAwarePrompts:
    """Prompt hook for :func:`vct.encoder.encode`, built per batch from presence flags."""

    params: dict
    cfg: PromptConfig
    cases: np.ndarray  # (B,) indices into CASES
    _stacked: dict[int, Tensor] = field(default_factory=dict)

    @classmethod
    def for_batch(cls, params: dict, cfg: PromptConfig, ecg_present, ppg_present) -> "MissingAwarePrompts":
        return cls(params, cfg, case_indices(ecg_present, ppg_present))

    def _batch_prompt(self, layer: int) -> Tensor | None:
        if layer not in self.cfg.layers or self.cfg.length == 0:
            return None
        if layer not in self._stacked:
            mats = [ad.reshape(self.params[prompt_name(c, layer)], (1, self.cfg.length, -1)) for c in CASES]
            self._stacked[layer] = ad.take(ad.concat(mats, axis=0), self.cases, axis=0)
        return self._stacked[layer]

    def input_prompt(self, layer: int) -> Tensor | None:
        if self.cfg.style != "input_tailored":
            return None
        return self._batch_prompt(layer + 1)

    def kv_prompt(self, layer: int) -> tuple[Tensor, Tensor] | None:
        if self.cfg.style != "attention_tailored":
            return None
        p = self._batch_prompt(layer + 1)
        return None if p is None else split_kv(p)


def input_tailored_length(n_patches: int, prompt_len: int, n_layers: int) -> int:
    return prompt_len * n_layers + 2 * n_patches + 2
