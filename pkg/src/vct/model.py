"""Task model: view tokenizer, fusion encoder, pooler and a linear task head.

Regression targets are standardized with training-split statistics, which
are stored next to the weights so predictions come back in label units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import Batch
from .encoder import EncoderConfig, _linear, encode, linear, pool
from .prompts import MissingAwarePrompts, PromptConfig
from .tokenizer import VIEWS, join_views, tokenize_view

TASKS = ("regression", "classification")
STAT_MEAN = "stats.target_mean"
STAT_STD = "stats.target_std"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "regression"
    n_classes: int = 2

    def validate(self) -> None:
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ValueError("classification needs at least two classes")

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "regression" else self.n_classes

    def targets(self, batch: Batch) -> np.ndarray:
        return batch.y_reg if self.kind == "regression" else batch.y_cls


def is_buffer(name: str) -> bool:
    """Non-trainable state stored alongside the weights."""
    return name.startswith("stats.")


def init_head(params: dict, dim: int, task: TaskSpec, rng: np.random.Generator) -> None:
    _linear(params, "head", dim, task.out_dim, rng)


def set_target_stats(params: dict, y: np.ndarray, task: TaskSpec) -> None:
    if task.kind == "regression":
        sd = float(np.std(y))
        params[STAT_MEAN] = Tensor(np.array([float(np.mean(y))]))
        params[STAT_STD] = Tensor(np.array([sd if sd > 0 else 1.0]))
    else:
        params[STAT_MEAN] = Tensor(np.array([0.0]))
        params[STAT_STD] = Tensor(np.array([1.0]))


def represent(
    batch: Batch,
    params: dict,
    cfg: EncoderConfig,
    prompt_cfg: PromptConfig | None = None,
    views: tuple[str, ...] = VIEWS,
) -> Tensor:
    """Pooled (B, d) representation; a single-view model passes one view name."""
    seq = join_views(*[tokenize_view(batch.view(v), params, v) for v in views])
    hook = None
    if prompt_cfg is not None:
        hook = MissingAwarePrompts.for_batch(params, prompt_cfg, batch.ecg_present, batch.ppg_present)
    return pool(encode(seq, params, cfg, hook), params)


def head(rep: Tensor, params: dict) -> Tensor:
    """Task head on pooled (B, d) features: (B,) regression value or (B, C) logits."""
    out = linear(ad.as_tensor(rep), params, "head")
    if out.shape[-1] == 1:
        out = ad.reshape(out, (out.shape[0],))
    return out


def forward(batch: Batch, params: dict, cfg: EncoderConfig, prompt_cfg=None, views=VIEWS) -> Tensor:
    """Head output: (B,) standardized regression value or (B, C) logits."""
    return head(represent(batch, params, cfg, prompt_cfg, views), params)


def pooled_features(batch: Batch, params: dict, cfg: EncoderConfig, prompt_cfg=None, views=VIEWS, chunk: int = 256) -> np.ndarray:
    """Pooled representations of every sample, without gradients: (B, d)."""
    out = []
    with ad.no_grad():
        for lo in range(0, len(batch), chunk):
            part = batch.subset(np.arange(lo, min(lo + chunk, len(batch))))
            out.append(represent(part, params, cfg, prompt_cfg, views).data)
    return np.concatenate(out)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"class ids outside [0, {logits.shape[1]})")
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.mean(logp[np.arange(labels.size), labels]), -1.0)


def task_loss(out: Tensor, batch: Batch, params: dict, task: TaskSpec) -> Tensor:
    if task.kind == "regression":
        mu, sd = params[STAT_MEAN].data[0], params[STAT_STD].data[0]
        return ad.mse(out, Tensor((batch.y_reg - mu) / sd))
    return cross_entropy(out, batch.y_cls)


def predict(
    batch: Batch, params: dict, cfg: EncoderConfig, task: TaskSpec, prompt_cfg=None, views=VIEWS, chunk: int = 256,
    features: np.ndarray | None = None,
):
    """Label-unit predictions (regression) or class ids, plus the mean task loss.

    ``features`` are precomputed pooled representations; the encoder is skipped.
    """
    preds, losses = [], []
    with ad.no_grad():
        for lo in range(0, len(batch), chunk):
            idx = np.arange(lo, min(lo + chunk, len(batch)))
            part = batch.subset(idx)
            if features is None:
                out = forward(part, params, cfg, prompt_cfg, views)
            else:
                out = head(Tensor(features[idx]), params)
            losses.append(float(task_loss(out, part, params, task).data) * len(part))
            if task.kind == "regression":
                preds.append(out.data * params[STAT_STD].data[0] + params[STAT_MEAN].data[0])
            else:
                preds.append(np.argmax(out.data, axis=-1))
    return np.concatenate(preds), sum(losses) / len(batch)


# ---------------------------------------------------------------- metrics


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _paired(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true.astype(np.float64) - y_pred) ** 2)))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = _paired(y_true, y_pred)
    return float(np.mean(y_true == y_pred))


def f1_macro(y_true, y_pred, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over classes 0..n_classes-1.

    A class absent from both inputs scores 0, as does any class whose
    precision and recall are both undefined or zero.
    """
    y_true, y_pred = _paired(y_true, y_pred)
    y_true = y_true.astype(np.int64)
    y_pred = y_pred.astype(np.int64)
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    scores = []
    for c in range(n_classes):
        tp = np.sum((y_true == c) & (y_pred == c))
        fp = np.sum((y_true != c) & (y_pred == c))
        fn = np.sum((y_true == c) & (y_pred != c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


METRICS = {"rmse": rmse, "accuracy": accuracy, "f1_macro": f1_macro}


def metric(y_true, y_pred, kind: str) -> float:
    if kind not in METRICS:
        raise ValueError(f"unknown metric {kind!r}; expected one of {tuple(METRICS)}")
    return METRICS[kind](y_true, y_pred)


def _paired(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_true)
    b = np.asarray(y_pred, dtype=np.float64) if np.asarray(y_pred).dtype.kind == "f" else np.asarray(y_pred)
    if a.size == 0 or b.size == 0:
        raise ValueError("metric on empty inputs")
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b
