"""Fusion encoder: pre-norm transformer layers over the joint token sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tokenizer import TokenMeta, TokenSequence, init_tokenizer


@dataclass(frozen=True)
class EncoderConfig:
    patch_len: int = 10
    dim: int = 32
    depth: int = 4
    heads: int = 4
    ffn: bool = True
    ffn_mult: int = 4

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"embedding dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.patch_len <= 0:
            raise ValueError("depth must be >= 0 and patch_len > 0")


FULL_ENCODER = EncoderConfig(patch_len=50, dim=512, depth=8, heads=8)


class PromptHook(Protocol):
    """Per-layer prompt source consulted by :func:`encode` (0-indexed layers)."""

    def input_prompt(self, layer: int) -> Tensor | None: ...

    def kv_prompt(self, layer: int) -> tuple[Tensor, Tensor] | None: ...


# ---------------------------------------------------------------- init


def _linear(params: dict, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
    limit = math.sqrt(6.0 / (d_in + d_out))
    params[f"{name}.weight"] = Tensor(rng.uniform(-limit, limit, (d_in, d_out)), requires_grad=True)
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(d_out), requires_grad=True)


def _norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.gain"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(dim), requires_grad=True)


def init_block(params: dict, prefix: str, dim: int, heads: int, rng, ffn: bool = True, ffn_mult: int = 4) -> None:
    inner = heads * (dim // heads)
    _norm(params, f"{prefix}.ln1", dim)
    for proj in ("q", "k", "v"):
        # a key bias only shifts every score of a query equally, which softmax cancels
        _linear(params, f"{prefix}.attn.{proj}", dim, inner, rng, bias=proj != "k")
    _linear(params, f"{prefix}.attn.out", inner, dim, rng)
    if ffn:
        _norm(params, f"{prefix}.ln2", dim)
        _linear(params, f"{prefix}.ffn.fc1", dim, ffn_mult * dim, rng)
        _linear(params, f"{prefix}.ffn.fc2", ffn_mult * dim, dim, rng)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, views=("ecg", "ppg")) -> dict:
    """Tokenizer, encoder layers, final norm and pooler, as a flat name -> Tensor dict."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    init_tokenizer(params, cfg.patch_len, cfg.dim, rng, views)
    for i in range(cfg.depth):
        init_block(params, f"encoder.layers.{i}", cfg.dim, cfg.heads, rng, cfg.ffn, cfg.ffn_mult)
    _norm(params, "encoder.ln_f", cfg.dim)
    _linear(params, "pooler", cfg.dim, cfg.dim, rng)
    return params


# ---------------------------------------------------------------- forward


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return ad.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, inner = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, inner // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(
    x: Tensor, params: dict, prefix: str, heads: int, kv_prefix: tuple[Tensor, Tensor] | None = None
) -> Tensor:
    """Full (non-causal) multi-head self-attention.

    ``kv_prefix`` = (p_k, p_v), each (B, n, inner), is prepended to the keys
    and values only; queries and the output length are unchanged.
    """
    q = linear(x, params, f"{prefix}.attn.q")
    k = linear(x, params, f"{prefix}.attn.k")
    v = linear(x, params, f"{prefix}.attn.v")
    if kv_prefix is not None:
        pk, pv = kv_prefix
        if pk.ndim != 3 or pk.shape != pv.shape or pk.shape[0] != x.shape[0] or pk.shape[2] != k.shape[2]:
            raise ShapeError(f"attention prompt shapes {pk.shape}/{pv.shape} do not fit keys {k.shape}")
        k = ad.concat([pk, k], axis=1)
        v = ad.concat([pv, v], axis=1)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(qh.shape[-1]))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), vh)
    return linear(_merge_heads(ctx), params, f"{prefix}.attn.out")


def block(
    x: Tensor, params: dict, prefix: str, heads: int, kv_prefix=None, ffn: bool = True
) -> Tensor:
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = ad.add(x, attention(h, params, prefix, heads, kv_prefix))
    if ffn:
        h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        h = linear(ad.gelu(linear(h, params, f"{prefix}.ffn.fc1")), params, f"{prefix}.ffn.fc2")
        x = ad.add(x, h)
    return x


def encode(
    seq: TokenSequence,
    params: dict,
    cfg: EncoderConfig,
    prompt_hook: PromptHook | None = None,
    final_norm: bool = True,
) -> TokenSequence:
    """Run the encoder layers; input-tailored prompts grow the sequence, others keep it."""
    if seq.length < 1:
        raise ShapeError("encode: empty token sequence")
    h = seq.tokens
    meta = list(seq.meta)
    for i in range(cfg.depth):
        kv = None
        if prompt_hook is not None:
            p = prompt_hook.input_prompt(i)
            if p is not None:
                if p.ndim != 3 or p.shape[0] != h.shape[0] or p.shape[2] != h.shape[2]:
                    raise ShapeError(f"layer {i}: input prompt shape {p.shape} does not fit sequence {h.shape}")
                h = ad.concat([p, h], axis=1)
                meta = [TokenMeta("prompt", "prompt", None)] * p.shape[1] + meta
            kv = prompt_hook.kv_prompt(i)
        h = block(h, params, f"encoder.layers.{i}", cfg.heads, kv, cfg.ffn)
        if ad.debug_enabled() and not np.all(np.isfinite(h.data)):
            raise ad.NonFiniteError(f"encode: non-finite activations after layer {i}")
    if final_norm and cfg.depth > 0:
        h = ad.layer_norm(h, params["encoder.ln_f.gain"], params["encoder.ln_f.bias"])
    return TokenSequence(h, meta)


def pool(seq: TokenSequence, params: dict) -> Tensor:
    """tanh(affine(first special token)) -> (B, d).

    The pooled token is located through metadata, so prepended prompts do
    not move it.
    """
    if seq.length == 0:
        raise ShapeError("pool: empty sequence")
    idx = seq.special_index()
    return ad.tanh(linear(seq.tokens[:, idx, :], params, "pooler"))


# ---------------------------------------------------------------- accounting


def count_params(params: dict, trainable_filter: Callable[[str], bool] | None = None) -> int:
    return int(sum(t.size for name, t in params.items() if trainable_filter is None or trainable_filter(name)))


def param_table(params: dict) -> dict[str, int]:
    """Parameter counts grouped by top-level component name."""
    table: dict[str, int] = {}
    for name, t in params.items():
        key = name.split(".")[0]
        table[key] = table.get(key, 0) + t.size
    return table
