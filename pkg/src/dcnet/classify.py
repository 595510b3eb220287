"""Subject-level stratification and evaluation: the median-score decision
rule, per-metric Gaussian likelihood-ratio classifiers, logistic
regression over the eight-metric vectors, ROC/AUC, and leave-one-out
cross-validation.

The likelihood-ratio statistic is the log difference
``sum log p_AD - sum log p_CN`` compared against a threshold; the
operating point is picked on the training fold by maximizing Youden's J
(TPR - FPR), and a fixed-threshold decision (0 for the LRT, 0.5 for
logistic scores) is reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CN, AD = 0, 1


def median_psic_decision(values) -> tuple:
    """Median of the per-voxel scores and the label it implies.

    Even counts take the midpoint of the middle two; a median exactly at
    0.5 is assigned to AD (the >= convention).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty score list")
    med = float(np.median(values))
    return med, (AD if med >= 0.5 else CN)


@dataclass(frozen=True)
class GaussianClassModel:
    mean_cn: float
    var_cn: float
    mean_ad: float
    var_ad: float
    floored: bool = False


def fit_gaussian_model(values_cn, values_ad) -> GaussianClassModel:
    """Per-class sample mean and unbiased variance of one metric."""
    values_cn = np.asarray(values_cn, dtype=np.float64)
    values_ad = np.asarray(values_ad, dtype=np.float64)
    if values_cn.size < 2 or values_ad.size < 2:
        raise ValueError("need at least two values per class")
    floored = False
    out = []
    for vals in (values_cn, values_ad):
        mean = float(vals.mean())
        var = float(vals.var(ddof=1))
        floor = max(1e-12 * mean * mean, 1e-300)
        if var < floor:
            var = floor
            floored = True
        out.extend([mean, var])
    return GaussianClassModel(out[0], out[1], out[2], out[3], floored)


def _log_gauss(x, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - (x - mean) ** 2 / (2.0 * var)


def lrt_statistic(model: GaussianClassModel, observed) -> float:
    """Log-likelihood difference; AD is favoured by positive values."""
    x = np.asarray(observed, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no observations")
    return float(
        _log_gauss(x, model.mean_ad, model.var_ad).sum()
        - _log_gauss(x, model.mean_cn, model.var_cn).sum()
    )


# ---------------------------------------------------------------------------
# logistic regression (damped Newton, L2 on the non-intercept weights)
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = np.atleast_2d(features)
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(features) - self.mean) / self.std


@dataclass
class LogisticModel:
    weights: np.ndarray  # intercept first
    converged: bool
    n_iter: int


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_fit(features, labels, l2: float = 1e-4, max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """Penalized maximum likelihood via damped Newton iterations.

    Expects standardized features.  With a single class present the model
    degenerates to an intercept predicting that class's clipped rate.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.shape[0] != y.size:
        raise ValueError("features and labels disagree in length")
    n, f = x.shape
    if len(np.unique(y)) < 2:
        rate = np.clip(y.mean(), 1e-6, 1.0 - 1e-6)
        w = np.zeros(f + 1)
        w[0] = np.log(rate / (1.0 - rate))
        return LogisticModel(w, True, 0)
    xd = np.column_stack([np.ones(n), x])
    w = np.zeros(f + 1)
    mask = np.ones(f + 1)
    mask[0] = 0.0  # intercept unpenalized

    def objective(w):
        z = xd @ w
        # log(1 + e^-|z|) + max(z, 0) - y z is the stable negative log-likelihood
        nll = np.sum(np.logaddexp(0.0, z) - y * z)
        return nll + 0.5 * l2 * np.sum((mask * w) ** 2)

    obj = objective(w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(xd @ w)
        grad = xd.T @ (p - y) + l2 * mask * w
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        h = (xd * (p * (1.0 - p))[:, None]).T @ xd + l2 * np.diag(mask)
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(40):
            new_obj = objective(w - scale * step)
            if new_obj <= obj:
                break
            scale *= 0.5
        w = w - scale * step
        obj = objective(w)
    else:
        converged = np.linalg.norm(xd.T @ (_sigmoid(xd @ w) - y) + l2 * mask * w) < tol
    return LogisticModel(w, converged, it)


def logistic_predict(model: LogisticModel, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return _sigmoid(model.weights[0] + x @ model.weights[1:])


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # leading +inf for the (0, 0) corner


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over the unique scores, predictions by score >= t."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == AD))
    n_neg = int(np.sum(labels == CN))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tpr = np.empty(thresholds.size)
    fpr = np.empty(thresholds.size)
    for i, t in enumerate(thresholds):
        pred = scores >= t
        tpr[i] = np.sum(pred & (labels == AD)) / n_pos
        fpr[i] = np.sum(pred & (labels == CN)) / n_neg
    return RocCurve(fpr, tpr, thresholds)


def auc(curve: RocCurve) -> float:
    """Area under the curve by the trapezoidal rule."""
    return float(np.trapezoid(curve.tpr, curve.fpr))


def youden_threshold(scores, labels) -> float:
    """Operating point maximizing TPR - FPR on the given scores.

    The returned cut sits midway between the adjacent score levels of the
    J-maximizing sweep position, so held-out values slightly past the
    training range still fall on the right side.
    """
    curve = roc_curve(scores, labels)
    i = int(np.argmax(curve.tpr - curve.fpr))
    if i == 0:
        return np.inf  # best point predicts nobody positive
    if i == curve.thresholds.size - 1:
        return -np.inf  # best point predicts everybody positive
    return float(0.5 * (curve.thresholds[i] + curve.thresholds[i + 1]))


# ---------------------------------------------------------------------------
# leave-one-out cross-validation over subjects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectRecord:
    """Per-voxel observations of one subject within one ROI."""

    subject_id: str
    label: int
    values: np.ndarray  # (Nvox,) for a single metric, (Nvox, F) for feature vectors


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    value: float
    predicted: int
    true_label: int


@dataclass
class LoocvResult:
    pa: float          # at the fold-wise Youden operating point
    pa_fixed: float    # at the classifier's natural fixed threshold
    auc: float         # threshold-free, over the held-out scores
    scores: list = field(default_factory=list)        # SubjectScore per subject
    fold_inputs: list = field(default_factory=list)   # (held_out_id, fold ids) audit trail


def _lrt_subject_score(model, record):
    return lrt_statistic(model, record.values)


def loocv(records, classifier: str = "metric_lrt") -> LoocvResult:
    """Leave-one-subject-out evaluation with balanced class exclusion.

    ``classifier`` is 'metric_lrt' (records carry one metric per voxel) or
    'logistic' (records carry 8-vectors per voxel; the subject score is
    the median per-voxel probability).  Models, standardization and the
    Youden operating point are fit on each training fold only.

    Each fold drops the held-out subject plus one round-robin subject of
    the other class.  A one-sided exclusion makes the held-out subject
    systematically less like its own class's fold model than any training
    subject was, which inverts score rankings whenever the between-subject
    spread of a metric is small; the paired drop restores the symmetry.
    """
    records = list(records)
    labels = np.array([r.label for r in records])
    if np.sum(labels == CN) < 2 or np.sum(labels == AD) < 2:
        raise ValueError("need at least two subjects per class")
    if classifier not in ("metric_lrt", "logistic"):
        raise ValueError(f"unknown classifier {classifier!r}")
    fixed_threshold = 0.0 if classifier == "metric_lrt" else 0.5

    position = {}
    class_sizes = {CN: 0, AD: 0}
    for r in records:
        position[r.subject_id] = class_sizes[r.label]
        class_sizes[r.label] += 1

    result = LoocvResult(0.0, 0.0, 0.0)
    held_scores = np.empty(len(records))
    hits_youden = 0
    hits_fixed = 0
    for i, held in enumerate(records):
        other = CN if held.label == AD else AD
        paired_position = position[held.subject_id] % class_sizes[other]
        fold = [
            r
            for j, r in enumerate(records)
            if j != i and not (r.label == other and position[r.subject_id] == paired_position)
        ]
        result.fold_inputs.append((held.subject_id, tuple(r.subject_id for r in fold)))
        if classifier == "metric_lrt":
            cn_vals = np.concatenate([r.values for r in fold if r.label == CN])
            ad_vals = np.concatenate([r.values for r in fold if r.label == AD])
            model = fit_gaussian_model(cn_vals, ad_vals)
            fold_scores = np.array([_lrt_subject_score(model, r) for r in fold])
            held_score = _lrt_subject_score(model, held)
        else:
            train_x = np.concatenate([r.values for r in fold])
            train_y = np.concatenate([np.full(len(r.values), r.label) for r in fold])
            scaler = Standardizer.fit(train_x)
            model = logistic_fit(scaler.transform(train_x), train_y)
            fold_scores = np.array(
                [float(np.median(logistic_predict(model, scaler.transform(r.values)))) for r in fold]
            )
            held_score = float(np.median(logistic_predict(model, scaler.transform(held.values))))
        eta = youden_threshold(fold_scores, np.array([r.label for r in fold]))
        held_scores[i] = held_score
        predicted = AD if held_score >= eta else CN
        hits_youden += predicted == held.label
        hits_fixed += (AD if held_score >= fixed_threshold else CN) == held.label
        result.scores.append(SubjectScore(held.subject_id, held_score, predicted, held.label))
    result.pa = hits_youden / len(records)
    result.pa_fixed = hits_fixed / len(records)
    result.auc = auc(roc_curve(held_scores, labels))
    return result
