"""Training loops: M2AE pretraining, the three finetuning regimes and prompt tuning.

Each regime is a predicate over parameter names.  The optimizer only ever
touches names the predicate accepts, and ``assert_frozen`` checks that
claim by hashing every array before and after.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Batch, batch_indices, iterate_batches
from .encoder import EncoderConfig, init_encoder
from .m2ae import M2AEConfig, draw_mask, init_m2ae, pretrain_step
from .model import TaskSpec, forward, head, init_head, is_buffer, pooled_features, predict, set_target_stats, task_loss
from .model import accuracy, f1_macro, rmse
from .optim import AdamW, lr_at
from .prompts import PromptConfig, init_prompt_bank
from .tokenizer import VIEWS

MODES = ("rand_init", "fine_last", "fine_all", "prompt_tune")
FINETUNE_WEIGHT_DECAY = 2e-2
PRETRAIN_WEIGHT_DECAY = 0.05


class MissingCheckpointError(ValueError):
    pass


class FrozenParameterError(AssertionError):
    pass


def _backbone(name: str) -> bool:
    return name.startswith(("tokenizer.", "encoder.", "pooler."))


def trainable(name: str, mode: str) -> bool:
    if is_buffer(name):
        return False
    if mode in ("rand_init", "fine_all"):
        return _backbone(name) or name.startswith("head.")
    if mode == "fine_last":
        return name.startswith("head.")
    if mode == "prompt_tune":
        return name.startswith(("head.", "prompts."))
    if mode == "pretrain":
        return _backbone(name) or name.startswith(("decoder.", "cep."))
    raise ValueError(f"unknown training mode {mode!r}")


def trainable_names(params: dict, mode: str) -> list[str]:
    return [n for n in params if trainable(n, mode)]


def fingerprint(params: dict) -> dict[str, str]:
    return {n: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest() for n, t in params.items()}


def assert_frozen(before: dict[str, str], params: dict, mode: str) -> None:
    """Raise if any parameter outside the mode's trainable set changed."""
    after = fingerprint(params)
    for name, digest in before.items():
        if not trainable(name, mode) and after.get(name) != digest:
            raise FrozenParameterError(f"{mode}: frozen parameter {name} was modified")


def copy_params(params: dict) -> dict:
    return {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in params.items()}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float | None = None  # None: 0.05 for rand_init, 2e-2 for finetune modes
    warmup_fraction: float = 0.1
    patience: int = 5
    min_delta: float = 0.0
    seed: int = 0

    def decay_for(self, mode: str) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return PRETRAIN_WEIGHT_DECAY if mode in ("rand_init", "pretrain") else FINETUNE_WEIGHT_DECAY

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.warmup_fraction < 1:
            raise ValueError("lr must be positive and warmup_fraction in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class History:
    """Long-format training log: one row per (epoch, split, metric)."""

    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def log(self, epoch: int, split: str, name: str, value: float) -> None:
        self.rows.append((int(epoch), split, name, float(value)))

    def series(self, split: str, name: str) -> list[float]:
        return [v for _, s, n, v in self.rows if s == split and n == name]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "metric", "value"])
            for e, s, n, v in self.rows:
                w.writerow([e, s, n, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.log(int(row["epoch"]), row["split"], row["metric"], float(row["value"]))
        return h


@dataclass
class TrainResult:
    params: dict
    history: History
    best_epoch: int
    epochs_run: int
    trainable: list[str]


def evaluate(
    data: Batch, params: dict, cfg: EncoderConfig, task: TaskSpec, prompt_cfg=None, views=VIEWS,
    features: np.ndarray | None = None,
) -> dict:
    pred, loss = predict(data, params, cfg, task, prompt_cfg, views, features=features)
    if task.kind == "regression":
        return {"loss": loss, "rmse": rmse(data.y_reg, pred)}
    return {
        "loss": loss,
        "accuracy": accuracy(data.y_cls, pred),
        "f1_macro": f1_macro(data.y_cls, pred, task.n_classes),
    }


def _check_loss(loss: Tensor, epoch: int, step: int, lr: float, params: dict | None = None) -> None:
    value = float(loss.data)
    if math.isfinite(value):
        return
    exc = NonFiniteError(f"non-finite loss {value} at epoch {epoch}, step {step}, lr {lr:.3g}")
    norms = {}
    for name, t in (params or {}).items():
        norms[name] = float(np.sqrt(np.sum(t.data**2)))
    worst = sorted(norms, key=lambda n: -norms[n] if math.isfinite(norms[n]) else -math.inf)[:10]
    exc.diagnostics = {
        "epoch": epoch,
        "step": step,
        "lr": lr,
        "loss": repr(value),
        "non_finite_params": sorted(n for n, v in norms.items() if not math.isfinite(v)),
        "largest_param_norms": {n: norms[n] for n in worst},
    }
    raise exc


def prepare_params(
    mode: str,
    cfg: EncoderConfig,
    task: TaskSpec,
    train: Batch,
    rng: np.random.Generator,
    pretrained: dict | None = None,
    prompt_cfg: PromptConfig | None = None,
    views: tuple[str, ...] = VIEWS,
) -> dict:
    """Fresh or pretrained backbone plus a new head (and prompt bank for prompt_tune)."""
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")
    if mode == "rand_init":
        params = init_encoder(cfg, rng, views)
    else:
        if pretrained is None:
            raise MissingCheckpointError(f"{mode} needs a pretrained checkpoint")
        params = {n: t for n, t in copy_params(pretrained).items() if not n.startswith(("decoder.", "cep."))}
    if "head.weight" not in params or mode != "prompt_tune":
        init_head(params, cfg.dim, task, rng)
    if mode == "prompt_tune":
        if prompt_cfg is None:
            raise ValueError("prompt_tune needs a prompt configuration")
        if not any(n.startswith("prompts.") for n in params):
            init_prompt_bank(params, prompt_cfg, cfg.dim, rng, cfg.depth)
    set_target_stats(params, task.targets(train), task)
    return params


def run_training(
    train: Batch,
    val: Batch,
    cfg: EncoderConfig,
    task: TaskSpec,
    mode: str,
    tc: TrainConfig = TrainConfig(),
    pretrained: dict | None = None,
    prompt_cfg: PromptConfig | None = None,
    views: tuple[str, ...] = VIEWS,
    params: dict | None = None,
) -> TrainResult:
    """Train one regime with early stopping on validation loss; returns the best-val weights."""
    tc.validate()
    task.validate()
    rng = np.random.default_rng(tc.seed)
    if params is None:
        params = prepare_params(mode, cfg, task, train, rng, pretrained, prompt_cfg, views)
    use_prompts = prompt_cfg if mode == "prompt_tune" else None
    names = trainable_names(params, mode)
    before = fingerprint(params)
    opt = AdamW(lr=tc.lr, weight_decay=tc.decay_for(mode))
    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    history = History()
    # a linear probe never changes the pooled features, so compute them once
    feats = {}
    if mode == "fine_last":
        feats = {"train": pooled_features(train, params, cfg, None, views), "val": pooled_features(val, params, cfg, None, views)}
    best, best_epoch, best_params, step = math.inf, -1, None, 0
    epoch = 0
    for epoch in range(tc.epochs):
        losses = []
        for idx in batch_indices(len(train), tc.batch_size, rng):
            batch = train.subset(idx)
            for n in names:
                params[n].grad = None
            lr = lr_at(step, total, tc.lr, tc.warmup_fraction)
            if feats:
                out = head(Tensor(feats["train"][idx]), params)
            else:
                out = forward(batch, params, cfg, use_prompts, views)
            loss = task_loss(out, batch, params, task)
            _check_loss(loss, epoch, step, lr, params)
            losses.append(float(loss.data))
            ad.backward(loss)
            opt.step(params, names, lr)
            step += 1
        history.log(epoch, "train", "loss", float(np.mean(losses)))
        for k, v in evaluate(val, params, cfg, task, use_prompts, views, feats.get("val")).items():
            history.log(epoch, "val", k, v)
        val_loss = history.series("val", "loss")[-1]
        if val_loss < best - tc.min_delta:
            best, best_epoch, best_params = val_loss, epoch, copy_params(params)
        elif epoch - best_epoch >= tc.patience:
            break
    assert_frozen(before, params, mode)
    return TrainResult(best_params if best_params is not None else params, history, best_epoch, epoch + 1, names)


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    params: dict
    history: History
    steps: list[dict[str, float]]


def run_pretraining(
    train: Batch,
    cfg: EncoderConfig,
    m2ae: M2AEConfig,
    tc: TrainConfig = TrainConfig(epochs=10, batch_size=64),
    params: dict | None = None,
    val: Batch | None = None,
) -> PretrainResult:
    """M2AE pretraining; logs each step's three losses and per-epoch means."""
    tc.validate()
    rng = np.random.default_rng(tc.seed)
    if params is None:
        params = init_encoder(cfg, rng)
        init_m2ae(params, cfg, m2ae, rng)
    names = trainable_names(params, "pretrain")
    opt = AdamW(lr=tc.lr, weight_decay=tc.decay_for("pretrain"))
    n_patches = train.ecg.shape[1] // cfg.patch_len
    alpha = {"ecg": m2ae.alpha_ecg, "ppg": m2ae.alpha_ppg}
    drop_last = m2ae.cep_enabled and len(train) > tc.batch_size
    steps_per_epoch = len(train) // tc.batch_size if drop_last else math.ceil(len(train) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    history, steps, step = History(), [], 0
    for epoch in range(tc.epochs):
        rows = []
        for batch in iterate_batches(train, tc.batch_size, rng, drop_last=drop_last):
            if m2ae.cep_enabled and len(batch) < 2:
                continue
            for n in names:
                params[n].grad = None
            lr = lr_at(step, total, tc.lr, tc.warmup_fraction)
            out = pretrain_step(batch, draw_mask(n_patches, alpha, rng, len(batch)), params, cfg, m2ae)
            _check_loss(out.total, epoch, step, lr, params)
            ad.backward(out.total)
            opt.step(params, names, lr)
            row = {"step": step, "epoch": epoch, **out.values()}
            rows.append(row)
            steps.append(row)
            step += 1
        for k in ("L_rec_ecg", "L_rec_ppg", "L_cep", "total"):
            history.log(epoch, "train", k, float(np.mean([r[k] for r in rows])))
        if val is not None:
            for k, v in pretrain_eval(val, params, cfg, m2ae, np.random.default_rng(tc.seed + 1)).items():
                history.log(epoch, "val", k, v)
    return PretrainResult(params, history, steps)


def pretrain_eval(data: Batch, params: dict, cfg: EncoderConfig, m2ae: M2AEConfig, rng, chunk: int = 256) -> dict:
    n_patches = data.ecg.shape[1] // cfg.patch_len
    alpha = {"ecg": m2ae.alpha_ecg, "ppg": m2ae.alpha_ppg}
    sums: dict[str, float] = {}
    with ad.no_grad():
        for lo in range(0, len(data), chunk):
            part = data.subset(np.arange(lo, min(lo + chunk, len(data))))
            if m2ae.cep_enabled and len(part) < 2:
                continue
            out = pretrain_step(part, draw_mask(n_patches, alpha, rng, len(part)), params, cfg, m2ae)
            for k, v in out.values().items():
                sums[k] = sums.get(k, 0.0) + v * len(part)
    return {k: v / len(data) for k, v in sums.items()}
