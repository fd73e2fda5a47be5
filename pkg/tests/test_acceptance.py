"""The ten acceptance criteria, each printed as one PASS/FAIL line.

Training-based criteria share pretrained backbones: one M2AE run per
(seed, alpha, cep) on the seed's training split, reused by C6 to C9.
"""

import csv
import math
import time

import numpy as np
from scipy.stats import binomtest, spearmanr

from conftest import make_batch, record_criterion
from vct import autodiff as ad
from vct.checkpoint import TruncatedCheckpointError, load_checkpoint, save_checkpoint
from vct.cli import main as cli_main
from vct.config import ExperimentConfig
from vct.data import stack_pairs, standardize_views
from vct.encoder import FULL_ENCODER, EncoderConfig, count_params, encode, init_encoder
from vct.gradcheck import check_model_gradients
from vct.m2ae import DecoderConfig, M2AEConfig, draw_mask, init_m2ae, mask_count, patch_targets, pretrain_step
from vct.model import TaskSpec, init_head, rmse
from vct.prompts import MissingAwarePrompts, MissingScenario, PromptConfig, apply_missing, init_prompt_bank
from vct.synth import SynthConfig, generate_dataset
from vct.tokenizer import tokenize_pair
from vct.train import TrainConfig, evaluate, run_pretraining, run_training, trainable

SEEDS = range(5)
ENC = EncoderConfig(patch_len=10, dim=32, depth=4, heads=4)
TASK = TaskSpec("regression")
N_DATA = 3000
PRETRAIN = TrainConfig(epochs=20, batch_size=64)
FINETUNE = TrainConfig(epochs=20, batch_size=32)
PROMPT = dict(length=20, layers=(1, 2, 3, 4))


def _verdict(number, ok, title, detail):
    record_criterion(number, ok, title, detail)
    assert ok, detail


def _synth(seed):
    return SynthConfig(heart_rate_mean=60, ptt_lag_range=(0.15, 0.3), noise_std=0.02, seed=seed)


_SPLITS: dict = {}
_PRETRAINED: dict = {}


def _pairs(seed, n=N_DATA):
    if (seed, n) not in _SPLITS:
        _SPLITS[(seed, n)] = generate_dataset(_synth(seed), n)
    return _SPLITS[(seed, n)]


def _batches(seed, n=N_DATA, scenario=None, rng_base=0):
    out = []
    for k, part in enumerate(_pairs(seed, n)):
        if scenario is not None:
            part = apply_missing(part, scenario, np.random.default_rng(1000 * seed + 10 * k + rng_base))
        out.append(standardize_views(stack_pairs(part)))
    return out


def _pretrained(seed, alpha=0.8, cep=True):
    key = (seed, alpha, cep)
    if key not in _PRETRAINED:
        m2ae = M2AEConfig(alpha_ecg=alpha, alpha_ppg=alpha, decoder=DecoderConfig(dim=32, depth=1, heads=4), w_cep=1.0 if cep else 0.0)
        train = _batches(seed)[0]
        tc = TrainConfig(**{**PRETRAIN.__dict__, "seed": seed})
        _PRETRAINED[key] = run_pretraining(train, ENC, m2ae, tc).params
    return _PRETRAINED[key]


def _tc(base, seed, **kw):
    return TrainConfig(**{**base.__dict__, "seed": seed, **kw})


# ---------------------------------------------------------------- C1-C4: exact contracts


def test_c1_shape_ledger():
    rng = np.random.default_rng(0)
    params = init_encoder(FULL_ENCODER, rng)
    ecg, ppg = rng.normal(size=1250), rng.normal(size=1250)  # 10 s at 125 Hz
    h0 = tokenize_pair(ecg, ppg, params)
    lengths = {}
    for style in ("input_tailored", "attention_tailored"):
        pcfg = PromptConfig(style, 20, (1, 2, 3, 4, 5, 6))
        p = dict(params)
        init_prompt_bank(p, pcfg, 512, rng, FULL_ENCODER.depth)
        hook = MissingAwarePrompts.for_batch(p, pcfg, np.array([True]), np.array([True]))
        with ad.no_grad():
            lengths[style] = encode(h0, p, FULL_ENCODER, hook).length
    ok = h0.tokens.shape[1:] == (52, 512) and lengths == {"input_tailored": 172, "attention_tailored": 52}
    detail = f"h0 {h0.tokens.shape[1]}x{h0.tokens.shape[2]}, input-tailored {lengths['input_tailored']}, attention-tailored {lengths['attention_tailored']}"
    _verdict(1, ok, "shape ledger", detail)


def test_c2_parameter_accounting():
    params = init_encoder(FULL_ENCODER, np.random.default_rng(0))
    backbone = count_params(params)
    init_head(params, 512, TASK, np.random.default_rng(1))
    init_prompt_bank(params, PromptConfig(length=20, layers=(1, 2, 3, 4, 5, 6)), 512, np.random.default_rng(2), 8)
    prompts = count_params(params, lambda n: n.startswith("prompts."))
    n_train = count_params(params, lambda n: trainable(n, "prompt_tune"))
    total = count_params(params)
    dev = (backbone - 25.9e6) / 25.9e6
    frac = n_train / total
    ok = abs(dev) < 0.05 and frac < 0.03
    detail = (
        f"backbone {backbone:,} ({dev:+.2%} vs 25.9M); prompt-tune trainable {n_train:,} of {total:,} = {frac:.2%} "
        f"(prompts {prompts:,} + head {n_train - prompts}; reported 676K leaves {676_000 - n_train:,} unexplained)"
    )
    _verdict(2, ok, "parameter accounting", detail)


def test_c3_gradient_correctness():
    t0 = time.time()
    checks = check_model_gradients(seed=0, n_patches=4, batch=2)
    worst = max(checks, key=lambda c: c.max_rel_err)
    ok = all(c.max_rel_err < 1e-4 for c in checks) and {"L_rec_ecg", "L_rec_ppg", "L_cep"} <= {c.loss for c in checks}
    errs = ", ".join(f"{c.loss} {c.max_rel_err:.1e}" for c in checks)
    _verdict(3, ok, "gradient correctness", f"{errs}; worst {worst.loss}/{worst.worst} ({time.time() - t0:.0f} s)")


def test_c4_masking_contract():
    problems = []
    for n in (4, 20, 25):
        for alpha in (0.2, 0.5, 0.8):
            m = mask_count(n, alpha)
            if m in (0, n):
                continue
            if m != math.floor(alpha * n + 0.5):
                problems.append(f"count N={n} a={alpha}")
            plan = draw_mask(n, alpha, np.random.default_rng(n), batch_size=3)
            if any(plan.masked[v].shape != (3, m) for v in ("ecg", "ppg")):
                problems.append(f"plan N={n} a={alpha}")
            if plan.encoder_length() != 2 * (n - m) + 2:
                problems.append(f"length N={n} a={alpha}")
    cfg = EncoderConfig(patch_len=5, dim=8, depth=2, heads=2)
    m2ae = M2AEConfig(alpha_ecg=0.5, alpha_ppg=0.5, decoder=DecoderConfig(8, 1, 2), cep_dim=4)
    rng = np.random.default_rng(0)
    params = init_encoder(cfg, rng)
    init_m2ae(params, cfg, m2ae, rng)
    batch = make_batch(rng, n=3, n_patches=8)
    plan = draw_mask(8, 0.5, rng, 3)
    targets = {v: ad.Tensor(patch_targets(batch.view(v), 5), requires_grad=True) for v in ("ecg", "ppg")}
    out = pretrain_step(batch, plan, params, cfg, m2ae, targets)
    ad.backward(ad.add(out.rec_ecg, out.rec_ppg))
    for v in ("ecg", "ppg"):
        for i in range(3):
            if np.any(targets[v].grad[i, plan.visible[v][i]] != 0.0):
                problems.append(f"visible gradient {v}[{i}]")
    if out.encoder_length != 2 * (8 - 4) + 2:
        problems.append("pretrain encoder length")
    _verdict(4, not problems, "masking contract", "counts, zero visible-target gradient and encoder length exact" if not problems else "; ".join(problems))


# ---------------------------------------------------------------- C5-C9: training directions


def test_c5_multi_view_necessity():
    rows = []
    for seed in SEEDS:
        train, val, test = _batches(seed, n=5000)
        base = rmse(test.y_reg, np.full(len(test), train.y_reg.mean()))
        got = {}
        for views in (("ecg", "ppg"), ("ecg",), ("ppg",)):
            res = run_training(train, val, ENC, TASK, "rand_init", _tc(FINETUNE, seed), views=views)
            got["+".join(views)] = evaluate(test, res.params, ENC, TASK, views=views)["rmse"] / base
        ok = got["ecg+ppg"] < 0.5 and abs(got["ecg"] - 1) <= 0.10 and abs(got["ppg"] - 1) <= 0.10
        rows.append((ok, got, base))
    n_ok = sum(r[0] for r in rows)
    detail = f"{n_ok}/5 seeds; RMSE/baseline per seed (two-view, ECG, PPG): " + "; ".join(
        f"{g['ecg+ppg']:.3f}, {g['ecg']:.3f}, {g['ppg']:.3f}" for _, g, _ in rows
    )
    _verdict(5, n_ok >= 4, "multi-view necessity", detail)


def _first_epoch_at(curve, target):
    hits = [i + 1 for i, v in enumerate(curve) if v <= target]
    return hits[0] if hits else math.inf


def test_c6_pretraining_benefit():
    rows = []
    for seed in SEEDS:
        train, val, _ = _batches(seed)
        tc = _tc(FINETUNE, seed, patience=FINETUNE.epochs)  # full curves for the epoch comparison
        rand = run_training(train, val, ENC, TASK, "rand_init", tc).history
        fine = run_training(train, val, ENC, TASK, "fine_all", tc, pretrained=_pretrained(seed)).history
        target = min(rand.series("val", "rmse"))
        e_rand = _first_epoch_at(rand.series("val", "rmse"), target)
        e_fine = _first_epoch_at(fine.series("val", "rmse"), target)
        l_rand, l_fine = rand.series("val", "loss")[0], fine.series("val", "loss")[0]
        ok = e_fine <= e_rand / 3 and l_fine < l_rand
        rows.append((ok, e_fine, e_rand, l_fine, l_rand))
    n_ok = sum(r[0] for r in rows)
    detail = f"{n_ok}/5 seeds; epochs to RandInit's best val RMSE (FineAll vs RandInit), first-epoch val loss: " + "; ".join(
        f"{ef} vs {er}, {lf:.3f} vs {lr:.3f}" for _, ef, er, lf, lr in rows
    )
    _verdict(6, n_ok >= 4, "pretraining benefit", detail)


def test_c7_ablation_direction():
    scores = {}
    for alpha in (0.2, 0.5, 0.8):
        for cep in (False, True):
            vals = []
            for seed in SEEDS:
                train, val, test = _batches(seed)
                res = run_training(train, val, ENC, TASK, "fine_last", _tc(FINETUNE, seed), pretrained=_pretrained(seed, alpha, cep))
                vals.append(evaluate(test, res.params, ENC, TASK)["rmse"])
            scores[(alpha, cep)] = np.array(vals)
    mean = {k: v.mean() for k, v in scores.items()}
    ordered = mean[(0.8, True)] < mean[(0.5, True)] < mean[(0.2, True)]
    worse_p = {}
    for alpha in (0.2, 0.5, 0.8):
        diff = scores[(alpha, True)] - scores[(alpha, False)]
        worse_p[alpha] = binomtest(int(np.sum(diff > 0)), int(np.sum(diff != 0)) or 1, 0.5, alternative="greater").pvalue
    cep_ok = all(p >= 0.05 for p in worse_p.values())
    detail = (
        "mean FineLast RMSE with CEP a=0.8/0.5/0.2: "
        + "/".join(f"{mean[(a, True)]:.4f}" for a in (0.8, 0.5, 0.2))
        + ", without CEP: "
        + "/".join(f"{mean[(a, False)]:.4f}" for a in (0.8, 0.5, 0.2))
        + f"; ordering {'holds' if ordered else 'violated'}; CEP-worse sign-test p "
        + ", ".join(f"a={a}: {p:.3f}" for a, p in worse_p.items())
    )
    _verdict(7, ordered and cep_ok, "ablation direction", detail)


def test_c8_prompt_benefit():
    scenario = MissingScenario("missing_both", 70)
    rows = []
    for seed in SEEDS:
        train, val, test = _batches(seed, scenario=scenario)
        pre = _pretrained(seed)
        res = run_training(train, val, ENC, TASK, "fine_last", _tc(FINETUNE, seed), pretrained=pre)
        base = evaluate(test, res.params, ENC, TASK)["rmse"]
        got = {}
        for style in ("input_tailored", "attention_tailored"):
            pcfg = PromptConfig(style, **PROMPT)
            res = run_training(train, val, ENC, TASK, "prompt_tune", _tc(FINETUNE, seed), pretrained=pre, prompt_cfg=pcfg)
            got[style] = evaluate(test, res.params, ENC, TASK, pcfg)["rmse"]
        gain = {k: 1 - v / base for k, v in got.items()}
        rows.append((all(g >= 0.05 for g in gain.values()), base, gain))
    n_ok = sum(r[0] for r in rows)
    trend = sum(r[2]["input_tailored"] >= r[2]["attention_tailored"] for r in rows)
    detail = f"{n_ok}/5 seeds; baseline RMSE and relative gain (input, attention): " + "; ".join(
        f"{b:.3f} {g['input_tailored']:+.1%} {g['attention_tailored']:+.1%}" for _, b, g in rows
    ) + f"; input >= attention in {trend}/5 (not gated)"
    _verdict(8, n_ok >= 4, "prompt benefit", detail)


def test_c9_robustness_grid(tmp_path, monkeypatch):
    monkeypatch.setenv("VCT_OUTPUT_ROOT", str(tmp_path))
    betas = [10.0, 30.0, 50.0, 70.0, 90.0]
    kinds = ("missing_ecg", "missing_ppg", "missing_both")
    cells = {k: [] for k in kinds}
    complete = True
    for seed in SEEDS:
        cfg = ExperimentConfig.from_dict({"run.seed": seed, "run.mode": "fine_last"})
        ckpt = tmp_path / f"pre{seed}.ckpt"
        save_checkpoint(_pretrained(seed), ckpt, cfg.hash())
        for kind in kinds:
            out = tmp_path / f"{kind}-{seed}"
            argv = ["sweep", "--checkpoint", str(ckpt), "--scenario", kind, "--betas", ",".join(str(b) for b in betas),
                    "--set", f"run.seed={seed}", "--out", str(out)]
            if cli_main(argv) != 0:
                complete = False
                continue
            with open(out / "sweep.csv") as fh:
                rows = list(csv.DictReader(fh))
            complete &= sorted(float(r["beta"]) for r in rows) == betas
            cells[kind] += [(float(r["beta"]), float(r["rmse"])) for r in rows]
    stats = {}
    for kind, pts in cells.items():
        b, r = zip(*pts) if pts else ((), ())
        rho, p = spearmanr(b, r) if len(pts) > 2 else (float("nan"), 1.0)
        stats[kind] = (rho, p)
    degrade = all(rho > 0 and p < 0.05 for rho, p in stats.values())
    detail = f"matrix {'complete' if complete else 'incomplete'} (3 kinds x 5 betas x 5 seeds); FineLast RMSE vs beta Spearman: " + ", ".join(
        f"{k} rho={rho:+.3f} p={p:.3g}" for k, (rho, p) in stats.items()
    )
    _verdict(9, complete and degrade, "robustness grid", detail)


# ---------------------------------------------------------------- C10: persistence


def test_c10_determinism_and_persistence(tmp_path):
    cfg = EncoderConfig(patch_len=10, dim=16, depth=2, heads=2)
    train, val, test = (standardize_views(stack_pairs(s)) for s in generate_dataset(_synth(7), 200))
    metrics, params = [], []
    for _ in range(2):
        res = run_training(train, val, cfg, TASK, "rand_init", TrainConfig(epochs=3, seed=7))
        metrics.append(evaluate(test, res.params, cfg, TASK))
        params.append(res.params)
    same = all(abs(metrics[0][k] - metrics[1][k]) <= 1e-12 for k in metrics[0])
    save_checkpoint(params[0], tmp_path / "m.ckpt", "x", 3)
    back = load_checkpoint(tmp_path / "m.ckpt").params
    bitwise = list(back) == list(params[0]) and all(back[n].data.tobytes() == t.data.tobytes() for n, t in params[0].items())
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-1])
    try:
        load_checkpoint(tmp_path / "t.ckpt")
        rejected = False
    except TruncatedCheckpointError:
        rejected = True
    detail = f"rerun metric gap {max(abs(metrics[0][k] - metrics[1][k]) for k in metrics[0]):.1e}, round-trip {'bitwise' if bitwise else 'differs'}, truncation {'rejected' if rejected else 'accepted'}"
    _verdict(10, same and bitwise and rejected, "determinism and persistence", detail)
