"""Walk through the library on a small synthetic ECG/PPG set.

Generates paired windows, pretrains a masked autoencoder backbone, fits a
linear probe and a full fine-tune, then drops 70% of views and compares
the probe against missing-aware prompt tuning.  Sizes are kept small so
the script finishes in under a minute on one CPU;
the RMSE values are illustrative only at this scale.

    python demos/library_walkthrough.py
"""

import numpy as np

from vct.data import stack_pairs, standardize_views
from vct.encoder import EncoderConfig
from vct.m2ae import DecoderConfig, M2AEConfig
from vct.model import TaskSpec
from vct.prompts import MissingScenario, PromptConfig, apply_missing
from vct.synth import SynthConfig, generate_dataset
from vct.train import TrainConfig, evaluate, run_pretraining, run_training

ENC = EncoderConfig(patch_len=10, dim=16, depth=2, heads=2)
TASK = TaskSpec("regression")  # label is a linear function of the ECG-to-PPG lag


def prepare(parts, scenario=None, seed=0):
    out = []
    for k, part in enumerate(parts):
        if scenario is not None:
            part = apply_missing(part, scenario, np.random.default_rng(seed + k))
        out.append(standardize_views(stack_pairs(part)))
    return out


def main():
    synth = SynthConfig(heart_rate_mean=60, ptt_lag_range=(0.15, 0.3), noise_std=0.02, seed=0)
    parts = generate_dataset(synth, 600)
    train, val, test = prepare(parts)
    print(f"train {len(train)} windows, {train.ecg.shape[1]} samples per view")

    baseline = float(np.sqrt(np.mean((test.y_reg - train.y_reg.mean()) ** 2)))
    print(f"predict-the-mean RMSE: {baseline:.3f}")

    m2ae = M2AEConfig(decoder=DecoderConfig(dim=16, depth=1, heads=2))
    pre = run_pretraining(train, ENC, m2ae, TrainConfig(epochs=3, batch_size=64))
    print("pretraining, last step:", {k: round(v, 4) for k, v in pre.steps[-1].items()})

    tc = TrainConfig(epochs=5, batch_size=32)
    for mode in ("rand_init", "fine_last", "fine_all"):
        res = run_training(train, val, ENC, TASK, mode, tc, pretrained=None if mode == "rand_init" else pre.params)
        print(f"{mode:10s} test RMSE {evaluate(test, res.params, ENC, TASK)['rmse']:.3f}")

    scenario = MissingScenario("missing_both", 70)
    train, val, test = prepare(parts, scenario)
    res = run_training(train, val, ENC, TASK, "fine_last", tc, pretrained=pre.params)
    print(f"70% missing, fine_last        RMSE {evaluate(test, res.params, ENC, TASK)['rmse']:.3f}")
    for style in ("input_tailored", "attention_tailored"):
        pcfg = PromptConfig(style, length=4, layers=(1, 2))
        res = run_training(train, val, ENC, TASK, "prompt_tune", tc, pretrained=pre.params, prompt_cfg=pcfg)
        print(f"70% missing, {style:18s} RMSE {evaluate(test, res.params, ENC, TASK, pcfg)['rmse']:.3f}")


if __name__ == "__main__":
    main()
