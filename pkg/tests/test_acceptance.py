"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line on the real stdout (past pytest's
capture) so a tee'd run shows the eleven verdicts at a glance. The first
seven and the metric oracle run on tiny geometry in seconds; the three
desk-scale checks share one trained classifier + autoencoder pair built
by module fixtures, and together stay inside the half-hour budget.
"""

import math
import time

import numpy as np
import pytest
import torch

from vitsentry.attacks import (AdaptiveCwConfig, CwConfig, FgsmConfig,
                               PatchConfig, PgdConfig, adaptive_cw, apgd, cw,
                               fgsm, generate, pgd, rank_patches)
from vitsentry.attacks import _patch_pixel_mask
from vitsentry.data import make_synthetic, split
from vitsentry.detectors import (DetectorConfig, JointDetector,
                                 calibrate_threshold, pair_scores)
from vitsentry.experiment import fooling_rate
from vitsentry.mae import (MAEConfig, MaskedAutoencoder, full_recover,
                           reconstruct, sample_mask, train_mae)
from vitsentry.metrics import roc_auc, roc_curve
from vitsentry.objectives import Composite, CrossEntropy
from vitsentry.rollout import normalize_layer, rollout, rollout_all
from vitsentry.vit import (ModelConfig, TrainSpec, VitClassifier, accuracy,
                           loss_and_input_gradient, patchify, train_classifier)


def _verdict(capsys, n, label, ok):
    with capsys.disabled():
        print(f"criterion {n:2d} ({label}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {n} ({label}) failed"


# ---------------------------------------------------------------------------
# 1. rollout against brute force

def test_criterion_01_rollout_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(20):
        raw = rng.standard_normal((4, 16, 16))
        stack = np.exp(raw) / np.exp(raw).sum(axis=-1, keepdims=True)
        normed = np.stack([normalize_layer(a) for a in stack])
        # rows of A_l and its identity-averaged form sum to 1 +- 1e-4
        ok &= bool(np.abs(stack.sum(-1) - 1.0).max() <= 1e-4)
        ok &= bool(np.abs(normed.sum(-1) - 1.0).max() <= 1e-4)
        # brute-force product, later layers on the left
        brute = np.eye(16)
        for a in normed:
            brute = a @ brute
        got = rollout(stack)
        ok &= bool(np.linalg.norm(got - brute) <= 1e-8)
        # per-layer agreement too
        rolled = rollout_all(stack)
        brute = np.eye(16)
        for l, a in enumerate(normed):
            brute = a @ brute
            ok &= bool(np.linalg.norm(rolled[l] - brute) <= 1e-8)
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    _verdict(capsys, 1, "rollout oracle", ok)


# ---------------------------------------------------------------------------
# 2. gradients against central finite differences

def _fd_check(loss_fn, x, coords, h=1e-6):
    """Max relative error between analytic and central-difference gradients
    at the sampled coordinates."""
    _, grad = loss_fn(x)
    worst = 0.0
    for idx in coords:
        xp = x.clone()
        xm = x.clone()
        xp[idx] += h
        xm[idx] -= h
        lp, _ = loss_fn(xp)
        lm, _ = loss_fn(xm)
        fd = (lp - lm) / (2 * h)
        g = float(grad[idx])
        denom = max(abs(fd), abs(g), 1e-8)
        worst = max(worst, abs(fd - g) / denom)
    return worst


def test_criterion_02_gradient_correctness(capsys):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    config = ModelConfig(image_size=16, channels=3, patch_size=4, embed_dim=32,
                         depth=2, num_heads=2, mlp_hidden_dim=64, num_classes=4)
    model = VitClassifier(config).to(torch.float64).eval()
    mae = MaskedAutoencoder(MAEConfig(
        image_size=16, channels=3, patch_size=4, encoder_dim=32,
        encoder_depth=2, encoder_heads=2, encoder_mlp_dim=64, decoder_dim=64,
        decoder_depth=1, decoder_heads=2,
        decoder_mlp_dim=128)).to(torch.float64).eval()
    g = torch.Generator().manual_seed(1)
    # an interior point, away from the [0, 1] clamp corners
    x = (0.25 + 0.5 * torch.rand(16, 16, 3, generator=g)).to(torch.float64)
    y = torch.tensor(2)
    rng = np.random.default_rng(2)
    coords = [tuple(rng.integers(0, d) for d in x.shape) for _ in range(60)]

    worst_ce = _fd_check(
        lambda inp: loss_and_input_gradient(model, inp, y, CrossEntropy()),
        x, coords)

    mask = sample_mask(16, 0.5, generator=torch.Generator().manual_seed(3))
    composite = Composite(reference=x.clone(), mae=mae, beta_attn=0.5,
                          beta_cls=0.5, c=1.0, mask=mask)
    coords2 = [tuple(rng.integers(0, d) for d in x.shape) for _ in range(60)]
    worst_comp = _fd_check(
        lambda inp: loss_and_input_gradient(model, inp, y, composite),
        x, coords2)

    elapsed = time.perf_counter() - t0
    ok = worst_ce < 1e-3 and worst_comp < 1e-3 and elapsed < 60.0
    _verdict(capsys, 2, "gradient correctness", ok)


# ---------------------------------------------------------------------------
# 3. attack constraints, bit-checked

def test_criterion_03_attack_constraints(capsys):
    t0 = time.perf_counter()
    torch.manual_seed(4)
    config = ModelConfig(image_size=16, channels=3, patch_size=4, embed_dim=32,
                         depth=2, num_heads=2, mlp_hidden_dim=64, num_classes=4)
    model = VitClassifier(config).eval()
    g = torch.Generator().manual_seed(5)
    x = torch.rand(32, 16, 16, 3, generator=g)
    y = torch.randint(0, 4, (32,), generator=g)

    ok = True
    for eps in (0.01, 0.05, 0.1, 0.3):
        for adv in (fgsm(model, x, y, eps),
                    pgd(model, x, y, eps, eps / 4, 8),
                    apgd(model, x, y, eps, 8, rho=0.75)):
            delta = adv - x
            ok &= bool((delta.abs() <= eps).all())
            ok &= bool((adv >= 0).all() and (adv <= 1).all())

    for k in (1, 3):
        cfg = PatchConfig(num_patches=k, steps=40)
        adv = generate(model, x, y, cfg).adversarials
        sel = rank_patches(model, x).topk(k, dim=-1).indices
        outside = ~_patch_pixel_mask(model, sel)
        ok &= bool(torch.equal(adv[outside], x[outside]))
        ok &= bool((adv >= 0).all() and (adv <= 1).all())

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120.0
    _verdict(capsys, 3, "attack constraints", ok)


# ---------------------------------------------------------------------------
# 4. reduction identities

def test_criterion_04_reduction_identities(capsys, tiny_model, tiny_mae,
                                           tiny_batch):
    x, y = tiny_batch
    a = fgsm(tiny_model, x, y, 0.05)
    b = pgd(tiny_model, x, y, 0.05, 0.05, 1)
    first = torch.equal(a, b)

    c1, s1 = cw(tiny_model, x, y, steps=10, lr=0.02)
    c2, s2 = adaptive_cw(tiny_model, tiny_mae, x, y, 0.0, 0.0,
                         CwConfig(steps=10, lr=0.02))
    second = torch.equal(c1, c2) and torch.equal(s1, s2)
    _verdict(capsys, 4, "reduction identities", first and second)


# ---------------------------------------------------------------------------
# 5. reconstruction identity on kept patches

def test_criterion_05_reconstruction_identity(capsys, tiny_mae):
    g = torch.Generator().manual_seed(6)
    ok = True
    for _ in range(10):
        x = torch.rand(100, 16, 16, 3, generator=g)
        mask = sample_mask(16, 0.5, generator=g, batch=100)
        out = reconstruct(tiny_mae, x, mask)
        kept = mask.keep
        px = patchify(x, 4)
        pp = patchify(out.x_prime, 4)
        ok &= bool(torch.equal(px[kept], pp[kept]))
        ok &= bool((out.x_prime >= 0).all() and (out.x_prime <= 1).all())
    # complement pairs partition the patch set, every draw
    for _ in range(1000):
        mask = sample_mask(16, 0.5, generator=g)
        comp = mask.complement()
        ok &= bool((mask.keep ^ comp.keep).all())
    _verdict(capsys, 5, "reconstruction identity", ok)


# ---------------------------------------------------------------------------
# 6. calibration holds its false-positive budget

def test_criterion_06_calibration(capsys, tiny_model, tiny_mae):
    # 3000 calibration scores to pin tau, 1000 held-out to measure FPR
    ds = make_synthetic(4000, seed=7, image_size=16)
    g = torch.Generator().manual_seed(8)
    d_attn, _ = pair_scores(tiny_model, tiny_mae, ds.images, generator=g)
    scores = d_attn[:, 1]
    calib, held = scores[:3000], scores[3000:]
    ok = True
    for target in (0.01, 0.05):
        thr = calibrate_threshold(calib, target)
        fpr = float((held > thr.tau).mean())
        ok &= abs(fpr - target) <= 0.02
    _verdict(capsys, 6, "calibration", ok)


# ---------------------------------------------------------------------------
# 7. OR-rule set identities

def test_criterion_07_or_rule(capsys, tiny_model, tiny_mae, tiny_batch):
    x, y = tiny_batch
    ds = make_synthetic(64, seed=9, image_size=16)
    adv = fgsm(tiny_model, ds.images, torch.randint(0, 4, (64,)), 0.1)
    evaluation = torch.cat([ds.images, adv])
    is_adv = np.r_[np.zeros(64, bool), np.ones(64, bool)]

    g = torch.Generator().manual_seed(10)
    d_attn, d_cls = pair_scores(tiny_model, tiny_mae, evaluation, generator=g)
    tau_a = float(np.quantile(d_attn[:64, 1], 0.9))
    tau_c = float(np.quantile(d_cls[:64, 1], 0.9))
    flag_a = d_attn[:, 1] > tau_a
    flag_c = d_cls[:, 1] > tau_c
    flag_j = flag_a | flag_c

    def rates(flags):
        tpr = float(flags[is_adv].mean())
        fpr = float(flags[~is_adv].mean())
        return tpr, fpr

    tpr_a, fpr_a = rates(flag_a)
    tpr_c, fpr_c = rates(flag_c)
    tpr_j, fpr_j = rates(flag_j)
    ok = tpr_j >= max(tpr_a, tpr_c) and fpr_j <= fpr_a + fpr_c
    _verdict(capsys, 7, "OR-rule identities", ok)


# ---------------------------------------------------------------------------
# 10. AUC rank statistic against trapezoidal integration

def test_criterion_10_auc_oracle(capsys):
    rng = np.random.default_rng(11)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        labels = rng.random(n) < 0.5
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        fpr, tpr = roc_curve(scores, labels)
        ok &= abs(roc_auc(scores, labels) - np.trapezoid(tpr, fpr)) <= 1e-12
    hand = roc_auc(np.array([2.0, 4.0, 1.0, 3.0]),
                   np.array([True, True, False, False]))
    ok &= hand == 0.75
    _verdict(capsys, 10, "AUC oracle", ok)


# ---------------------------------------------------------------------------
# desk-scale fixtures shared by criteria 8, 9 and 11

DESK_MODEL = ModelConfig(image_size=32, channels=3, patch_size=4, embed_dim=64,
                         depth=6, num_heads=4, mlp_hidden_dim=256,
                         num_classes=10)
DESK_MAE = MAEConfig(image_size=32, channels=3, patch_size=4, encoder_dim=64,
                     encoder_depth=4, encoder_heads=4, encoder_mlp_dim=256,
                     decoder_dim=64, decoder_depth=2, decoder_heads=4,
                     decoder_mlp_dim=256)
DESK_EPS = 0.1          # scaled step budget for 32x32 synthetic shapes
_timings = {}


@pytest.fixture(scope="module")
def desk_data():
    pool = make_synthetic(9000, seed=0)
    return split(pool, [7000, 500, 1000, 500], seed=1)


@pytest.fixture(scope="module")
def desk_model(desk_data):
    train, _, _, test = desk_data
    t0 = time.perf_counter()
    model, _ = train_classifier(
        train.images, train.labels, DESK_MODEL,
        TrainSpec(epochs=25, batch_size=128, lr=1e-3, seed=0))
    _timings["train_vit"] = time.perf_counter() - t0
    _timings["test_accuracy"] = accuracy(model, test.images, test.labels)
    return model


@pytest.fixture(scope="module")
def desk_mae(desk_data):
    train, _, _, _ = desk_data
    t0 = time.perf_counter()
    mae, _ = train_mae(train.images, DESK_MAE,
                       TrainSpec(epochs=80, batch_size=128, lr=1.5e-3, seed=2))
    _timings["train_mae"] = time.perf_counter() - t0
    return mae


@pytest.fixture(scope="module")
def desk_layer(desk_model, desk_mae, desk_data):
    """Operating layer for the desk detectors, fixed on validation data.

    The joint detector fires on either distance, so the layer study scores
    both features against successful validation FGSM and keeps the layer
    whose better feature separates best. Attention-only selection favours
    the shallowest layer, which starves the CLS side at this scale.
    """
    _, val, _, _ = desk_data
    batch = generate(desk_model, val.images, val.labels, FgsmConfig(eps=0.06))
    kept = batch.subset(batch.success)
    c_attn, c_cls = _desk_scores(desk_model, desk_mae, val.images, 19)
    a_attn, a_cls = _desk_scores(desk_model, desk_mae, kept.adversarials, 20)
    per_layer = [max(_auc(c_attn[:, layer], a_attn[:, layer]),
                     _auc(c_cls[:, layer], a_cls[:, layer]))
                 for layer in range(DESK_MODEL.depth)]
    return int(np.argmax(per_layer))


def _desk_scores(model, mae, images, seed, strategy="random"):
    return pair_scores(model, mae, images, strategy=strategy,
                       recovery_mode="full",
                       generator=torch.Generator().manual_seed(seed))


def _auc(clean_col, adv_col):
    scores = np.r_[clean_col, adv_col]
    labels = np.r_[np.zeros(len(clean_col), bool), np.ones(len(adv_col), bool)]
    return roc_auc(scores, labels)


# ---------------------------------------------------------------------------
# 8. desk-scale detection, directional

def test_criterion_08_desk_detection(capsys, desk_model, desk_mae, desk_layer,
                                     desk_data):
    t0 = time.perf_counter()
    _, _, _, test = desk_data
    x, y = test.images, test.labels
    acc = _timings["test_accuracy"]

    clean_attn, clean_cls = _desk_scores(desk_model, desk_mae, x, 21)

    pgd_batch = generate(desk_model, x, y,
                         PgdConfig(eps=DESK_EPS, eps_step=DESK_EPS / 4, steps=10))
    pgd_kept = pgd_batch.subset(pgd_batch.success)
    a_attn, a_cls = _desk_scores(desk_model, desk_mae, pgd_kept.adversarials, 22)
    pgd_auc_attn = _auc(clean_attn[:, desk_layer], a_attn[:, desk_layer])
    pgd_auc_cls = _auc(clean_cls[:, desk_layer], a_cls[:, desk_layer])

    # weight the attention-drawing term heavily enough to matter at this
    # scale; near zero the objective degenerates to plain cross-entropy
    # confined to two patches and stops being an attention attack at all
    patch_batch = generate(desk_model, x, y,
                           PatchConfig(num_patches=2, alpha=0.5))
    patch_kept = patch_batch.subset(patch_batch.success)
    p_attn, _ = _desk_scores(desk_model, desk_mae, patch_kept.adversarials, 23)
    patch_auc_attn = _auc(clean_attn[:, desk_layer], p_attn[:, desk_layer])

    elapsed = (time.perf_counter() - t0 + _timings["train_vit"]
               + _timings["train_mae"])
    ok = (acc >= 0.95
          and max(pgd_auc_attn, pgd_auc_cls) >= 0.90
          and patch_auc_attn >= 0.90
          and elapsed < 1800.0)
    with capsys.disabled():
        print(f"    [desk: acc {acc:.3f}, pgd attn/cls "
              f"{pgd_auc_attn:.3f}/{pgd_auc_cls:.3f}, patch attn "
              f"{patch_auc_attn:.3f}, layer {desk_layer}, {elapsed:.0f}s]")
    _verdict(capsys, 8, "desk-scale detection", ok)


# ---------------------------------------------------------------------------
# 9. masking-strategy ordering

def test_criterion_09_masking_strategies(capsys, desk_model, desk_mae,
                                         desk_layer, desk_data):
    _, _, _, test = desk_data
    x, y = test.images[:300], test.labels[:300]
    batch = generate(desk_model, x, y,
                     PgdConfig(eps=DESK_EPS, eps_step=DESK_EPS / 4, steps=10))
    kept = batch.subset(batch.success)

    aucs = {}
    for strategy in ("random", "salient"):
        c_attn, _ = _desk_scores(desk_model, desk_mae, x, 24, strategy)
        a_attn, _ = _desk_scores(desk_model, desk_mae, kept.adversarials, 25,
                                 strategy)
        aucs[strategy] = _auc(c_attn[:, desk_layer], a_attn[:, desk_layer])

    ok = aucs["random"] >= aucs["salient"] - 0.02
    with capsys.disabled():
        print(f"    [strategies: random {aucs['random']:.3f}, "
              f"salient {aucs['salient']:.3f}]")
    _verdict(capsys, 9, "masking-strategy ordering", ok)


# ---------------------------------------------------------------------------
# 11. adaptive attack still loses ground at matched FPR

def test_criterion_11_adaptive_degradation(capsys, desk_model, desk_mae,
                                           desk_layer, desk_data):
    _, _, calib, test = desk_data
    x, y = test.images[:150], test.labels[:150]

    c_attn, c_cls = _desk_scores(desk_model, desk_mae, calib.images, 26)
    detector = JointDetector(
        mae=desk_mae,
        config_attn=DetectorConfig(feature="attention", layer=desk_layer,
                                   recovery_mode="full"),
        config_cls=DetectorConfig(feature="cls", layer=desk_layer,
                                  recovery_mode="full"),
        threshold_attn=calibrate_threshold(c_attn[:, desk_layer], 0.05),
        threshold_cls=calibrate_threshold(c_cls[:, desk_layer], 0.05),
    )

    batch = generate(desk_model, x, y,
                     AdaptiveCwConfig(inner=CwConfig(steps=30, lr=0.02, c=2.0),
                                      beta_attn=1e-2, beta_cls=1e-3),
                     mae=desk_mae,
                     generator=torch.Generator().manual_seed(27))
    kept = batch.subset(batch.success)
    undetected = fooling_rate(desk_model, kept)
    gated = fooling_rate(desk_model, kept, detector=detector,
                         generator=torch.Generator().manual_seed(28))
    ok = len(kept) > 0 and gated < undetected
    with capsys.disabled():
        print(f"    [adaptive: fooling {undetected:.3f} -> {gated:.3f} "
              f"with detection, n={len(kept)}]")
    _verdict(capsys, 11, "adaptive degradation", ok)
