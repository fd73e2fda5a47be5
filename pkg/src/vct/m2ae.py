"""Multitask masked autoencoding: per-view masked reconstruction plus
contrastive ECG-PPG alignment (CEP).

The encoder only sees visible tokens.  A light decoder re-inserts a shared
mask token at the hidden slots, adds its own positional and view codes, and
regresses the raw samples of every masked patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .encoder import EncoderConfig, _linear, _norm, block, encode, init_block, linear, pool
from .tokenizer import TokenMeta, TokenSequence, positional_table, segment, tokenize_pair, tokenize_view

VIEWS = ("ecg", "ppg")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_count(n_patches: int, alpha: float) -> int:
    return round_half_up(alpha * n_patches)


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 32
    depth: int = 1
    heads: int = 4


FULL_DECODER = DecoderConfig(dim=256, depth=3, heads=6)


@dataclass(frozen=True)
class M2AEConfig:
    alpha_ecg: float = 0.8
    alpha_ppg: float = 0.8
    decoder: DecoderConfig = DecoderConfig()
    w_rec_ecg: float = 1.0
    w_rec_ppg: float = 1.0
    w_cep: float = 1.0
    cep_dim: int = 16
    tau: float = 0.1
    cep_mode: str = "separate"  # separate | joint
    norm_targets: bool = False

    @property
    def cep_enabled(self) -> bool:
        return self.w_cep > 0


@dataclass
class MaskPlan:
    """Masked patch indices per view, one sorted row per batch item."""

    n_patches: int
    alpha: dict[str, float]
    masked: dict[str, np.ndarray]  # view -> (B, m) sorted
    visible: dict[str, np.ndarray]  # view -> (B, N - m) sorted

    @property
    def batch_size(self) -> int:
        return next(iter(self.masked.values())).shape[0]

    def encoder_length(self) -> int:
        return sum(self.visible[v].shape[1] + 1 for v in VIEWS)

    def joint_visible_index(self) -> np.ndarray:
        """Positions in the (2N+2)-token joint sequence kept for the encoder."""
        n = self.n_patches
        b = self.batch_size
        cols = []
        for k, v in enumerate(VIEWS):
            base = k * (n + 1)
            cols.append(np.full((b, 1), base))
            cols.append(base + 1 + self.visible[v])
        return np.concatenate(cols, axis=1)

    def joint_masked_index(self) -> np.ndarray:
        n = self.n_patches
        return np.concatenate([k * (n + 1) + 1 + self.masked[v] for k, v in enumerate(VIEWS)], axis=1)


def draw_mask(
    n_patches: int, alpha, rng: np.random.Generator, batch_size: int = 1
) -> MaskPlan:
    """Uniform masking without replacement, drawn independently per view and sample.

    ``alpha`` is one rate for both views or a {view: rate} dict.
    """
    rates = dict(alpha) if isinstance(alpha, dict) else {v: float(alpha) for v in VIEWS}
    masked, visible = {}, {}
    for v in VIEWS:
        a = rates[v]
        if not 0.0 < a < 1.0:
            raise ValueError(f"mask rate for {v} must lie in (0, 1), got {a}")
        m = mask_count(n_patches, a)
        if m in (0, n_patches):
            raise ValueError(f"mask rate {a} with N={n_patches} masks {m} patches (degenerate)")
        rows_m, rows_v = [], []
        for _ in range(batch_size):
            perm = rng.permutation(n_patches)
            rows_m.append(np.sort(perm[:m]))
            rows_v.append(np.sort(perm[m:]))
        masked[v] = np.array(rows_m, dtype=np.intp)
        visible[v] = np.array(rows_v, dtype=np.intp)
    return MaskPlan(n_patches, rates, masked, visible)


# ---------------------------------------------------------------- params


def init_decoder(params: dict, cfg: DecoderConfig, enc_dim: int, patch_len: int, rng) -> None:
    _linear(params, "decoder.embed", enc_dim, cfg.dim, rng)
    params["decoder.mask_token"] = Tensor(rng.normal(0, 0.02, cfg.dim), requires_grad=True)
    for v in VIEWS:
        # view code so ECG and PPG mask tokens at the same time index differ
        params[f"decoder.type.{v}"] = Tensor(rng.normal(0, 0.02, cfg.dim), requires_grad=True)
    for i in range(cfg.depth):
        init_block(params, f"decoder.layers.{i}", cfg.dim, cfg.heads, rng)
    _norm(params, "decoder.ln_f", cfg.dim)
    for v in VIEWS:
        _linear(params, f"decoder.head.{v}", cfg.dim, patch_len, rng)


def init_cep(params: dict, enc_dim: int, cep_dim: int, rng) -> None:
    for v in VIEWS:
        _linear(params, f"cep.proj.{v}", enc_dim, cep_dim, rng)


def init_m2ae(params: dict, enc_cfg: EncoderConfig, cfg: M2AEConfig, rng) -> None:
    init_decoder(params, cfg.decoder, enc_cfg.dim, enc_cfg.patch_len, rng)
    init_cep(params, enc_cfg.dim, cfg.cep_dim, rng)


# ---------------------------------------------------------------- forward pieces


def masked_encoder_input(joint: TokenSequence, plan: MaskPlan) -> TokenSequence:
    idx = plan.joint_visible_index()
    toks = ad.gather_rows(joint.tokens, idx)
    meta = []
    for v in VIEWS:
        meta.append(TokenMeta(v, "special", 0))
        meta.extend(TokenMeta(v, "patch", None) for _ in range(plan.visible[v].shape[1]))
    return TokenSequence(toks, meta)


def decode(enc_out: Tensor, plan: MaskPlan, params: dict, cfg: DecoderConfig) -> Tensor:
    """Visible encoder outputs -> decoder states for all 2N+2 joint positions."""
    b = enc_out.shape[0]
    n = plan.n_patches
    x = linear(enc_out, params, "decoder.embed")
    n_masked = plan.joint_masked_index().shape[1]
    mask_tok = ad.add(ad.reshape(params["decoder.mask_token"], (1, 1, cfg.dim)), Tensor(np.zeros((b, n_masked, 1))))
    full = ad.concat([x, mask_tok], axis=1)
    order = np.concatenate([plan.joint_visible_index(), plan.joint_masked_index()], axis=1)
    full = ad.gather_rows(full, np.argsort(order, axis=1, kind="stable"))
    pos = positional_table(n + 1, cfg.dim)
    full = ad.add(full, Tensor(np.concatenate([pos, pos], axis=0)))
    vtype = ad.concat(
        [ad.add(ad.reshape(params[f"decoder.type.{v}"], (1, cfg.dim)), Tensor(np.zeros((n + 1, 1)))) for v in VIEWS],
        axis=0,
    )
    full = ad.add(full, vtype)
    for i in range(cfg.depth):
        full = block(full, params, f"decoder.layers.{i}", cfg.heads)
    return ad.layer_norm(full, params["decoder.ln_f.gain"], params["decoder.ln_f.bias"])


def reconstruct(dec: Tensor, plan: MaskPlan, params: dict, view: str) -> Tensor:
    """Predicted samples of the masked patches of one view: (B, m, P)."""
    k = VIEWS.index(view)
    idx = k * (plan.n_patches + 1) + 1 + plan.masked[view]
    return linear(ad.gather_rows(dec, idx), params, f"decoder.head.{view}")


def patch_targets(signal: np.ndarray, patch_len: int, normalize: bool = False) -> np.ndarray:
    patches = segment(signal, patch_len)
    if normalize:
        mu = patches.mean(axis=-1, keepdims=True)
        sd = patches.std(axis=-1, keepdims=True)
        patches = (patches - mu) / (sd + 1e-6)
    return patches


def reconstruction_loss(pred: Tensor, targets, masked_idx: np.ndarray) -> Tensor:
    """MSE over masked patches only; each patch is averaged over its samples.

    ``targets`` holds every patch of the view, (B, N, P); visible patches
    never enter the loss.
    """
    tgt = ad.gather_rows(ad.as_tensor(targets), masked_idx)
    return ad.mse(pred, tgt)


def cep_loss(ecg_emb, ppg_emb, tau: float = 0.1) -> Tensor:
    """Symmetric InfoNCE with the diagonal as positives."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    e = ad.l2_normalize(ad.as_tensor(ecg_emb), axis=-1)
    p = ad.l2_normalize(ad.as_tensor(ppg_emb), axis=-1)
    b = e.shape[0]
    sim = ad.scale(ad.matmul(e, ad.transpose(p)), 1.0 / tau)
    diag = sim[np.arange(b), np.arange(b)]
    pos = ad.mean(diag)
    e2p = ad.sub(ad.mean(ad.logsumexp(sim, axis=1)), pos)
    p2e = ad.sub(ad.mean(ad.logsumexp(sim, axis=0)), pos)
    return ad.scale(ad.add(e2p, p2e), 0.5)


def cep_embed(batch: Batch, params: dict, enc_cfg: EncoderConfig, mode: str = "separate") -> tuple[Tensor, Tensor]:
    """Unit-norm (B, k) embeddings per view from unmasked passes.

    ``separate`` encodes each view alone so no attention crosses views;
    ``joint`` reads both special tokens from one joint pass.
    """
    if not (np.all(batch.ecg_present) and np.all(batch.ppg_present)):
        raise ValueError("cep_embed needs both views present in every sample")
    out = []
    if mode == "separate":
        for v in VIEWS:
            h = encode(tokenize_view(batch.view(v), params, v), params, enc_cfg)
            out.append(ad.l2_normalize(linear(pool(h, params), params, f"cep.proj.{v}")))
    elif mode == "joint":
        h = encode(tokenize_pair(batch.ecg, batch.ppg, params), params, enc_cfg)
        for v in VIEWS:
            idx = h.special_index(v)
            z = ad.tanh(linear(h.tokens[:, idx, :], params, "pooler"))
            out.append(ad.l2_normalize(linear(z, params, f"cep.proj.{v}")))
    else:
        raise ValueError(f"unknown cep mode {mode!r}")
    return out[0], out[1]


@dataclass
class PretrainOutput:
    rec_ecg: Tensor
    rec_ppg: Tensor
    cep: Tensor
    total: Tensor
    pred: dict[str, Tensor]
    encoder_length: int

    def values(self) -> dict[str, float]:
        return {
            "L_rec_ecg": float(self.rec_ecg.data),
            "L_rec_ppg": float(self.rec_ppg.data),
            "L_cep": float(self.cep.data),
            "total": float(self.total.data),
        }


def pretrain_step(
    batch: Batch,
    plan: MaskPlan,
    params: dict,
    enc_cfg: EncoderConfig,
    cfg: M2AEConfig,
    targets: dict[str, np.ndarray | Tensor] | None = None,
) -> PretrainOutput:
    """Forward all three proxy losses for one batch; call backward on ``.total``."""
    b = len(batch)
    if plan.batch_size != b:
        raise ValueError(f"mask plan covers {plan.batch_size} samples, batch has {b}")
    if cfg.cep_enabled and b < 2:
        raise ValueError("CEP needs at least two samples per batch for negatives")
    joint = tokenize_pair(batch.ecg, batch.ppg, params)
    enc_in = masked_encoder_input(joint, plan)
    enc_out = encode(enc_in, params, enc_cfg)
    dec = decode(enc_out.tokens, plan, params, cfg.decoder)
    if targets is None:
        targets = {v: patch_targets(batch.view(v), enc_cfg.patch_len, cfg.norm_targets) for v in VIEWS}
    pred, rec = {}, {}
    for v in VIEWS:
        pred[v] = reconstruct(dec, plan, params, v)
        rec[v] = reconstruction_loss(pred[v], targets[v], plan.masked[v])
    if cfg.cep_enabled:
        e, p = cep_embed(batch, params, enc_cfg, cfg.cep_mode)
        cep = cep_loss(e, p, cfg.tau)
    else:
        cep = Tensor(0.0)
    total = ad.add(ad.scale(rec["ecg"], cfg.w_rec_ecg), ad.scale(rec["ppg"], cfg.w_rec_ppg))
    if cfg.cep_enabled:
        total = ad.add(total, ad.scale(cep, cfg.w_cep))
    return PretrainOutput(rec["ecg"], rec["ppg"], cep, total, pred, enc_in.length)
