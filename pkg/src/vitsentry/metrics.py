"""Detection metrics: exact rank-statistic AUC, ROC tables, threshold
quantiles and TPR at a target FPR.

Scores follow the convention "higher means more adversarial"; labels mark
the adversarial (positive) samples. AUC is the Mann-Whitney statistic
P(s_pos > s_neg) + 0.5 * P(s_pos = s_neg), computed through average
ranks, which matches trapezoidal integration of the tie-grouped ROC
curve exactly.
"""

import math
import warnings

import numpy as np

from .errors import ConfigurationError, EvaluationError, InputError


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise EvaluationError("no samples")
    if y.all() or not y.any():
        raise EvaluationError("AUC needs both adversarial and clean samples")
    return s, y


def roc_auc(scores, labels):
    """Rank-statistic AUC with half credit for ties."""
    s, y = _split(scores, labels)
    n = s.size
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    uniq, first = np.unique(ss, return_index=True)
    counts = np.diff(np.append(first, n))
    # 1-based ranks averaged within each tie group
    group_rank = first + (counts + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[np.searchsorted(uniq, ss)]
    n_pos = int(y.sum())
    n_neg = n - n_pos
    pos_rank_sum = math.fsum(ranks[y])
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, labels):
    """Tie-grouped ROC points from (0, 0) to (1, 1).

    Returns (fpr, tpr) arrays suitable for plotting or trapezoidal
    integration; one point per distinct score, thresholds descending.
    """
    s, y = _split(scores, labels)
    n = s.size
    desc = np.argsort(-s, kind="mergesort")
    y_sorted = y[desc]
    s_sorted = s[desc]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    last = np.r_[np.where(np.diff(s_sorted) != 0)[0], n - 1]
    n_pos = int(y.sum())
    n_neg = n - n_pos
    fpr = np.r_[0.0, fps[last] / n_neg]
    tpr = np.r_[0.0, tps[last] / n_pos]
    return fpr, tpr


def empirical_threshold(clean_scores, target_fpr):
    """Order-statistic threshold: the smallest calibration score whose
    strictly-greater fraction is at most target_fpr.

    With the detection rule "score > tau", the calibration-set false
    positive rate is then the largest achievable value not above the
    target. Warns when the calibration set is too small to resolve the
    target (fewer than 1/target_fpr scores).
    """
    if not (0.0 < target_fpr < 1.0):
        raise ConfigurationError(f"target FPR must be in (0, 1), got {target_fpr}")
    s = np.asarray(clean_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise InputError("cannot calibrate on an empty score set")
    if s.size < 1.0 / target_fpr:
        warnings.warn(
            f"calibration set of {s.size} scores cannot resolve FPR {target_fpr}; "
            "the threshold degenerates to the maximum score", stacklevel=2)
    ss = np.sort(s)
    n = ss.size
    frac_greater = (n - np.searchsorted(ss, ss, side="right")) / n
    # frac_greater is non-increasing along ss, so the first admissible
    # index gives the smallest admissible score
    return float(ss[np.argmax(frac_greater <= target_fpr)])


def tpr_at_fpr(scores, labels, target_fpr):
    """Detection rate at a threshold calibrated on the clean samples.

    Returns (tpr, achieved_fpr, tau): tau from `empirical_threshold`
    over the negative scores, tpr the fraction of positive scores
    strictly above tau, achieved_fpr the same fraction among negatives.
    """
    s, y = _split(scores, labels)
    tau = empirical_threshold(s[~y], target_fpr)
    tpr = float(np.mean(s[y] > tau))
    achieved = float(np.mean(s[~y] > tau))
    return tpr, achieved, tau
