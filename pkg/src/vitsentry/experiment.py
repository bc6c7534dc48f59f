"""Experiment orchestration: run an attack grid against one model+MAE
pair, score the survivors with both detection features, and persist
everything needed to re-derive the aggregate numbers.

Outputs under the experiment directory:

  report.json                   aggregate metrics + config echo + seeds
  scores_<tag>.csv              one row per (sample, feature)
  roc_<tag>_<feature>.csv       tie-grouped (fpr, tpr) table
  adv_<tag>.npz                 optional adversarial archives

Reports are written through a temp file and renamed, and everything is
seeded, so a rerun with the same inputs is byte-identical apart from
the wall-clock fields.
"""

import csv
import json
import os
import tempfile
import time
import warnings

import numpy as np
import torch

from . import attacks, metrics
from .detectors import pair_scores
from .errors import EvaluationError
from .vit import predict

SCHEMA_VERSION = 1
FEATURES = ("attention", "cls")


def fooling_rate(model, batch, detector=None, generator=None):
    """Fraction of the batch that fools the classifier.

    Pass the batch already filtered to successful adversarials. With a
    detector, a sample only counts when it is misclassified AND slips
    past detection.
    """
    if len(batch) == 0:
        raise EvaluationError("cannot compute a fooling rate on an empty batch")
    labels, _ = predict(model, batch.adversarials)
    fooled = (labels != batch.labels).cpu().numpy()
    if detector is not None:
        flagged = detector.flags(model, batch.adversarials, generator=generator)
        fooled = fooled & ~flagged
    return float(fooled.mean())


def _fpr_key(target):
    digits = f"{target:.2f}".split(".")[1]
    return f"tpr_at_fpr_{digits}"


def _atomic_text(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_scores_csv(path, clean_scores, adv_scores):
    """Long-format sidecar: (id, score, is_adversarial, detector)."""
    rows = []
    for feature in FEATURES:
        for i, s in enumerate(clean_scores[feature]):
            rows.append((i, repr(float(s)), 0, feature))
        for i, s in enumerate(adv_scores[feature]):
            rows.append((i, repr(float(s)), 1, feature))
    with _CsvWriter(path, ("id", "score", "is_adversarial", "detector")) as writer:
        writer.writerows(rows)


class _CsvWriter:
    def __init__(self, path, header):
        self.path = path
        self.header = header

    def __enter__(self):
        directory = os.path.dirname(os.path.abspath(self.path)) or "."
        fd, self.tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        self.fh = os.fdopen(fd, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.header)
        return self.writer

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        elif os.path.exists(self.tmp):
            os.unlink(self.tmp)
        return False


def _write_roc_csv(path, scores, labels):
    fpr, tpr = metrics.roc_curve(scores, labels)
    with _CsvWriter(path, ("fpr", "tpr")) as writer:
        writer.writerows((repr(float(f)), repr(float(t))) for f, t in zip(fpr, tpr))


def _render_roc(path, scores, labels, title):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        warnings.warn("matplotlib unavailable; skipping ROC image", stacklevel=2)
        return
    fpr, tpr = metrics.roc_curve(scores, labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr)
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_experiment(model, mae, images, labels, attack_configs, layer, out_dir, *,
                   ratio=0.5, strategy="random", recovery_mode="half",
                   target_fprs=(0.01, 0.05), primary_feature="attention",
                   surrogate=None, seed=0, config_echo=None,
                   save_archives=False, render_plots=False, chunk_size=128,
                   log=None):
    """Run every attack in the grid and write the report. Returns its path.

    Detection scores use `layer` for both features. Patch attacks are
    scored with full recovery regardless of `recovery_mode`; everything
    else uses the configured mode. Negatives for AUC are the original
    counterparts of the successful adversarials.
    """
    os.makedirs(out_dir, exist_ok=True)
    started = time.time()
    seeds = {"experiment": int(seed)}
    rows = []

    for index, cfg in enumerate(attack_configs):
        tag = f"{index:02d}_{cfg.name}"
        attack_seed = seed * 1000 + index
        seeds[tag] = attack_seed
        t0 = time.time()
        if log:
            log(f"[{tag}] generating {len(images)} adversarials")
        gen = torch.Generator().manual_seed(attack_seed)
        batch = attacks.generate(model, images, labels, cfg,
                                 mae=mae, surrogate=surrogate, generator=gen)
        if save_archives:
            attacks.save_batch(os.path.join(out_dir, f"adv_{tag}.npz"), batch)
        kept = batch.subset(batch.success)
        mode = "full" if isinstance(cfg, attacks.PatchConfig) else recovery_mode
        row = {
            "attack": cfg.name,
            "tag": tag,
            "recovery_mode": mode,
            "layer": int(layer),
            "fooling_rate": float(np.asarray(batch.success).mean()) if len(batch) else 0.0,
            "n_clean": len(kept),
            "n_adv": len(kept),
        }
        if len(kept) == 0:
            row.update({"auc": None, "features": {}})
            for target in target_fprs:
                row[_fpr_key(target)] = None
            row["seconds"] = time.time() - t0
            rows.append(row)
            if log:
                log(f"[{tag}] no successful adversarials; skipping metrics")
            continue

        if log:
            log(f"[{tag}] scoring {len(kept)} successful adversarials")
        clean_attn, clean_cls = pair_scores(
            model, mae, kept.originals, ratio=ratio, strategy=strategy,
            recovery_mode=mode, chunk_size=chunk_size,
            generator=torch.Generator().manual_seed(attack_seed + 1))
        adv_attn, adv_cls = pair_scores(
            model, mae, kept.adversarials, ratio=ratio, strategy=strategy,
            recovery_mode=mode, chunk_size=chunk_size,
            generator=torch.Generator().manual_seed(attack_seed + 2))
        clean_scores = {"attention": clean_attn[:, layer], "cls": clean_cls[:, layer]}
        adv_scores = {"attention": adv_attn[:, layer], "cls": adv_cls[:, layer]}

        y = np.r_[np.zeros(len(kept), dtype=bool), np.ones(len(kept), dtype=bool)]
        feature_stats = {}
        for feature in FEATURES:
            s = np.r_[clean_scores[feature], adv_scores[feature]]
            stats = {"auc": metrics.roc_auc(s, y)}
            for target in target_fprs:
                tpr, achieved, tau = metrics.tpr_at_fpr(s, y, target)
                stats[_fpr_key(target)] = tpr
                stats[f"fpr_achieved_{_fpr_key(target)[-2:]}"] = achieved
                stats[f"tau_{_fpr_key(target)[-2:]}"] = tau
            feature_stats[feature] = stats
            _write_roc_csv(os.path.join(out_dir, f"roc_{tag}_{feature}.csv"), s, y)
            if render_plots:
                _render_roc(os.path.join(out_dir, f"roc_{tag}_{feature}.png"),
                            s, y, f"{cfg.name} / {feature}")

        _write_scores_csv(os.path.join(out_dir, f"scores_{tag}.csv"),
                          clean_scores, adv_scores)
        primary = feature_stats[primary_feature]
        row["auc"] = primary["auc"]
        for target in target_fprs:
            row[_fpr_key(target)] = primary[_fpr_key(target)]
        row["features"] = feature_stats
        row["seconds"] = time.time() - t0
        rows.append(row)
        if log:
            log(f"[{tag}] auc(attention)={feature_stats['attention']['auc']:.4f} "
                f"auc(cls)={feature_stats['cls']['auc']:.4f}")

    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config_echo,
        "seeds": seeds,
        "primary_feature": primary_feature,
        "per_attack": rows,
        "timestamps": {"started": started, "finished": time.time()},
    }
    path = os.path.join(out_dir, "report.json")
    _atomic_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def report_fingerprint(report):
    """Canonical JSON of a report with the wall-clock fields removed.

    Two runs with identical inputs and seeds produce equal fingerprints.
    """
    trimmed = dict(report)
    trimmed.pop("timestamps", None)
    trimmed["per_attack"] = [
        {k: v for k, v in row.items() if k != "seconds"}
        for row in report.get("per_attack", ())
    ]
    return json.dumps(trimmed, indent=2, sort_keys=True)
