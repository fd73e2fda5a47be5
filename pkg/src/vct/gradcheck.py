"""Whole-model gradient check on a tiny configuration.

Every parameter is perturbed coordinate by coordinate and the central
difference of each loss is compared with the tape gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, grad_check_params
from .data import Batch
from .encoder import EncoderConfig, init_encoder
from .m2ae import DecoderConfig, M2AEConfig, draw_mask, init_m2ae, pretrain_step
from .model import TaskSpec, forward, init_head, set_target_stats, task_loss
from .prompts import PromptConfig, init_prompt_bank

TINY_ENCODER = EncoderConfig(patch_len=5, dim=8, depth=2, heads=2)
TINY_DECODER = DecoderConfig(dim=8, depth=1, heads=2)


@dataclass
class LossCheck:
    loss: str
    reports: dict[str, GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.reports.values()), default=0.0)

    @property
    def worst(self) -> str:
        return max(self.reports, key=lambda n: self.reports[n].max_rel_err)

    @property
    def n_scalars(self) -> int:
        return int(sum(r.analytic.size for r in self.reports.values()))


def _tiny_batch(rng: np.random.Generator, n_patches: int, patch_len: int, batch: int, ecg_present=None, ppg_present=None):
    w = n_patches * patch_len
    ecg_present = np.ones(batch, bool) if ecg_present is None else np.asarray(ecg_present, bool)
    ppg_present = np.ones(batch, bool) if ppg_present is None else np.asarray(ppg_present, bool)
    ecg = rng.standard_normal((batch, w)) * ecg_present[:, None]
    ppg = rng.standard_normal((batch, w)) * ppg_present[:, None]
    return Batch(ecg, ppg, ecg_present, ppg_present, rng.standard_normal(batch) * 3 + 90, rng.integers(0, 2, batch))


def check_model_gradients(
    seed: int = 0, n_patches: int = 4, batch: int = 2, h: float = 1e-5, tol: float = 1e-4
) -> list[LossCheck]:
    """Gradient checks for L_rec_ecg, L_rec_ppg, L_cep and the task losses."""
    rng = np.random.default_rng(seed)
    cfg = TINY_ENCODER
    m2ae_cfg = M2AEConfig(alpha_ecg=0.5, alpha_ppg=0.5, decoder=TINY_DECODER, cep_dim=4)
    params = init_encoder(cfg, rng)
    init_m2ae(params, cfg, m2ae_cfg, rng)
    data = _tiny_batch(rng, n_patches, cfg.patch_len, batch)
    plan = draw_mask(n_patches, 0.5, rng, batch)
    checks = []
    for key in ("L_rec_ecg", "L_rec_ppg", "L_cep"):
        attr = {"L_rec_ecg": "rec_ecg", "L_rec_ppg": "rec_ppg", "L_cep": "cep"}[key]

        def loss_fn(attr=attr):
            return getattr(pretrain_step(data, plan, params, cfg, m2ae_cfg), attr)

        checks.append(LossCheck(key, grad_check_params(loss_fn, _trainable(params), h, tol)))

    for kind in ("regression", "classification"):
        task = TaskSpec(kind)
        tparams = {n: t for n, t in params.items() if not n.startswith(("decoder.", "cep."))}
        init_head(tparams, cfg.dim, task, rng)
        set_target_stats(tparams, task.targets(data), task)
        checks.append(
            LossCheck(f"task_{kind}", grad_check_params(lambda: task_loss(forward(data, tparams, cfg), data, tparams, task), _trainable(tparams), h, tol))
        )

    task = TaskSpec("regression")
    missing = _tiny_batch(rng, n_patches, cfg.patch_len, batch, ecg_present=[True, False], ppg_present=[True, True])
    for style in ("input_tailored", "attention_tailored"):
        pc = PromptConfig(style=style, length=2, layers=(1, 2))
        pparams = {n: t for n, t in params.items() if not n.startswith(("decoder.", "cep."))}
        init_head(pparams, cfg.dim, task, rng)
        init_prompt_bank(pparams, pc, cfg.dim, rng, cfg.depth)
        set_target_stats(pparams, missing.y_reg, task)

        def loss_fn(pparams=pparams, pc=pc):
            return task_loss(forward(missing, pparams, cfg, pc), missing, pparams, task)

        checks.append(LossCheck(f"task_prompt_{style}", grad_check_params(loss_fn, _trainable(pparams), h, tol)))
    return checks


def _trainable(params: dict) -> dict:
    return {n: t for n, t in params.items() if not n.startswith("stats.")}
