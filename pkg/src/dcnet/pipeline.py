"""End-to-end orchestration: cohort loading, network training, subject
scoring, reference classifiers, and the evaluation report.

The report mirrors the metric/classifier comparison tables: one column
per classifier (MD FA CL CP DV ASD DE CVD LR DNN), one row group per
statistic:

* ``auc_subject``       threshold-free subject-level AUC,
* ``pa_subject_youden`` subject accuracy at the fold-wise Youden point,
* ``pa_subject_fixed``  subject accuracy at the natural fixed threshold
                        (0 for the LRT statistic, 0.5 for scores),
* ``pa_dc_valid``       DNN only: accuracy over held-out cubes.

Reference classifiers are evaluated by leave-one-subject-out
cross-validation.  The network is cross-fitted over stratified subject
folds (default 5, i.e. the 4:1 split rotated), so every subject's median
score and score map come from a model that never saw that subject;
``folds = 1`` falls back to a single split where only the held-out side
is out of sample.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classify import (
    AD,
    CN,
    SubjectRecord,
    auc,
    loocv,
    median_psic_decision,
    roc_curve,
    youden_threshold,
)
from .metrics import METRIC_NAMES, metric_table
from .network import NetworkConfig, NetworkParams
from .training import LabeledDcSet, TrainingConfig, fit, psic_scores, split_dataset
from .volio import (
    CohortManifest,
    export_psic,
    extract_dcs,
    fit_sh_volume,
    read_manifest,
    read_mask,
    read_volume,
    write_model,
)

REPORT_COLUMNS = [name.upper() for name in METRIC_NAMES] + ["LR", "DNN"]


@dataclass(frozen=True)
class EvalConfig:
    network: NetworkConfig = NetworkConfig()
    training: TrainingConfig = TrainingConfig(split_mode="by_subject")
    sh_reg: float = 0.006
    max_dcs_per_subject: int | None = None
    folds: int = 5
    seed: int = 0

    @classmethod
    def from_json(cls, text: str, seed: int | None = None) -> "EvalConfig":
        doc = json.loads(text)
        net = NetworkConfig(**doc.get("network", {}))
        tr_doc = dict(doc.get("training", {}))
        tr_doc.setdefault("split_mode", "by_subject")
        if "split_ratio" in tr_doc:
            tr_doc["split_ratio"] = tuple(tr_doc["split_ratio"])
        training = TrainingConfig(**tr_doc)
        cfg = cls(
            network=net,
            training=training,
            sh_reg=doc.get("sh_reg", 0.006),
            max_dcs_per_subject=doc.get("max_dcs_per_subject"),
            folds=doc.get("folds", 5),
            seed=doc.get("seed", 0),
        )
        if seed is not None:
            cfg = replace(
                cfg,
                seed=seed,
                training=replace(cfg.training, seed=seed),
                network=replace(cfg.network, seed=seed),
            )
        return cfg


@dataclass
class SubjectData:
    subject_id: str
    label: int
    cubes: np.ndarray     # (N, M, M, M, P)
    centers: np.ndarray   # (N, 3)
    metrics: np.ndarray   # (Nvox, 8) over all ROI voxels
    grid: tuple
    mask: np.ndarray


def load_subject(manifest: CohortManifest, entry, network: NetworkConfig, sh_reg: float) -> SubjectData:
    volume = read_volume(manifest.volume_path(entry))
    mask = read_mask(manifest.mask_path(entry))
    coeffs = fit_sh_volume(volume, mask, network.n_max, sh_reg)
    cubeset = extract_dcs(coeffs, mask, network.radius)
    metrics = metric_table(volume.data[mask], volume.scheme)
    return SubjectData(
        entry.subject_id, entry.label, cubeset.cubes, cubeset.centers, metrics, mask.shape, mask
    )


def load_cohort(manifest: CohortManifest, network: NetworkConfig, sh_reg: float):
    return [load_subject(manifest, entry, network, sh_reg) for entry in manifest.subjects]


def build_dcset(subjects, max_per_subject=None, seed=0) -> LabeledDcSet:
    """Stack subject cubes into one labeled set, optionally subsampled.

    Subsampling draws a fixed-size subset per subject from a per-subject
    seed stream, so the selection is independent of cohort ordering.
    """
    streams = np.random.SeedSequence(seed).spawn(len(subjects))
    samples, labels, ids = [], [], []
    for subj, stream in zip(subjects, streams):
        cubes = subj.cubes
        if max_per_subject is not None and len(cubes) > max_per_subject:
            rng = np.random.default_rng(stream)
            keep = np.sort(rng.choice(len(cubes), max_per_subject, replace=False))
            cubes = cubes[keep]
        samples.append(cubes)
        labels.append(np.full(len(cubes), subj.label))
        ids.append(np.full(len(cubes), subj.subject_id, dtype=object))
    return LabeledDcSet(np.concatenate(samples), np.concatenate(labels), np.concatenate(ids))


def subject_median_scores(params: NetworkParams, subjects) -> list:
    """(subject_id, label, median score, decided label) per subject."""
    rows = []
    for subj in subjects:
        scores = psic_scores(params, subj.cubes)
        median, decided = median_psic_decision(scores)
        rows.append((subj.subject_id, subj.label, median, decided))
    return rows


def predict_scores_volume(params: NetworkParams, volume, mask, sh_reg: float = 0.006):
    """Per-voxel scores over the mask interior; zeros where no cube fits."""
    coeffs = fit_sh_volume(volume, mask, params.config.n_max, sh_reg)
    cubeset = extract_dcs(coeffs, mask, params.config.radius)
    scores = np.zeros(mask.shape)
    if len(cubeset):
        values = psic_scores(params, cubeset.cubes)
        scores[tuple(cubeset.centers.T)] = values
    return scores


@dataclass
class EvalResult:
    table: dict                      # kind -> column -> value (np.nan when n/a)
    subject_rows: list               # (id, label, median_psic, decided, fold)
    history: object                  # fold-0 training history
    params: NetworkParams            # fold-0 model
    fold_models: dict                # fold index -> NetworkParams
    subject_fold: dict               # subject_id -> fold index


def _reference_columns(subjects, result_table):
    labels = np.array([s.label for s in subjects])
    for mi, name in enumerate(METRIC_NAMES):
        records = [
            SubjectRecord(s.subject_id, s.label, s.metrics[:, mi]) for s in subjects
        ]
        res = loocv(records, "metric_lrt")
        col = name.upper()
        result_table["auc_subject"][col] = res.auc
        result_table["pa_subject_youden"][col] = res.pa
        result_table["pa_subject_fixed"][col] = res.pa_fixed
    records = [SubjectRecord(s.subject_id, s.label, s.metrics) for s in subjects]
    res = loocv(records, "logistic")
    result_table["auc_subject"]["LR"] = res.auc
    result_table["pa_subject_youden"]["LR"] = res.pa
    result_table["pa_subject_fixed"]["LR"] = res.pa_fixed
    return labels


def subject_folds(subjects, k: int, seed: int) -> dict:
    """Stratified assignment of subject ids to k folds, round-robin per class."""
    rng = np.random.default_rng(seed)
    assignment = {}
    for label in (CN, AD):
        ids = np.array([s.subject_id for s in subjects if s.label == label])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            assignment[str(sid)] = i % k
    return assignment


def evaluate_cohort(manifest: CohortManifest, cfg: EvalConfig, log=None) -> EvalResult:
    subjects = load_cohort(manifest, cfg.network, cfg.sh_reg)
    dcset = build_dcset(subjects, cfg.max_dcs_per_subject, cfg.seed)
    labels = np.array([s.label for s in subjects])

    table = {kind: {col: np.nan for col in REPORT_COLUMNS} for kind in (
        "auc_subject", "pa_subject_youden", "pa_subject_fixed", "pa_dc_valid",
    )}
    _reference_columns(subjects, table)

    if cfg.folds < 1:
        raise ValueError("folds must be >= 1")
    if cfg.folds == 1:
        # single split per the training config; in-sample scores for the
        # training-side subjects (quick mode)
        assignment = {str(s.subject_id): 0 for s in subjects}
    else:
        assignment = subject_folds(subjects, cfg.folds, cfg.seed)

    scores = np.full(len(subjects), np.nan)
    correct_youden = np.zeros(len(subjects), dtype=bool)
    fold_models = {}
    dc_pa = []
    history0 = None
    for f in range(cfg.folds):
        if cfg.folds == 1:
            train_set, valid_set, _ = split_dataset(
                dcset, cfg.training.split_ratio, cfg.training.split_mode, cfg.training.seed
            )
            held_idx = list(range(len(subjects)))  # single model scores everyone
            train_subj_idx = held_idx
        else:
            held_ids = {sid for sid, fold in assignment.items() if fold == f}
            held_mask = np.isin(dcset.subject_ids.astype(str), list(held_ids))
            train_set = dcset.subset(np.flatnonzero(~held_mask))
            valid_set = dcset.subset(np.flatnonzero(held_mask))
            held_idx = [i for i, s in enumerate(subjects) if str(s.subject_id) in held_ids]
            train_subj_idx = [i for i in range(len(subjects)) if i not in set(held_idx)]
        params, history = fit(train_set, valid_set, cfg.network, cfg.training, log=log)
        fold_models[f] = params
        dc_pa.append(history.rows[-1][3])
        if history0 is None:
            history0 = history
        # operating point from the fold's own training subjects
        fold_scores = np.array(
            [median_psic_decision(psic_scores(params, subjects[i].cubes))[0] for i in train_subj_idx]
        )
        eta = youden_threshold(fold_scores, labels[train_subj_idx])
        for i in held_idx:
            median, _ = median_psic_decision(psic_scores(params, subjects[i].cubes))
            scores[i] = median
            correct_youden[i] = (AD if median >= eta else CN) == subjects[i].label

    decided = scores >= 0.5
    table["auc_subject"]["DNN"] = auc(roc_curve(scores, labels))
    table["pa_subject_fixed"]["DNN"] = float(np.mean(decided == (labels == AD)))
    table["pa_subject_youden"]["DNN"] = float(np.mean(correct_youden))
    table["pa_dc_valid"]["DNN"] = float(np.mean(dc_pa))

    subject_fold = {str(s.subject_id): assignment[str(s.subject_id)] for s in subjects}
    subject_rows = [
        (s.subject_id, s.label, scores[i], AD if decided[i] else CN, subject_fold[str(s.subject_id)])
        for i, s in enumerate(subjects)
    ]
    return EvalResult(table, subject_rows, history0, fold_models[0], fold_models, subject_fold)


def write_report(path, result: EvalResult, roi_name: str = "roi"):
    def emit(fh):
        writer = csv.writer(fh)
        writer.writerow(["roi", "kind"] + REPORT_COLUMNS)
        for kind, row in result.table.items():
            writer.writerow(
                [roi_name, kind]
                + ["" if np.isnan(row[c]) else f"{row[c]:.6f}" for c in REPORT_COLUMNS]
            )

    from .volio import _atomic_write

    _atomic_write(path, lambda fh: emit(_TextWrap(fh)))


class _TextWrap:
    """Minimal text adapter over a binary stream for csv.writer."""

    def __init__(self, fh):
        self._fh = fh

    def write(self, s):
        self._fh.write(s.encode())


def write_subject_scores(path, result: EvalResult):
    from .volio import _atomic_write

    def emit(fh):
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "label", "median_psic", "decided", "fold"])
        for sid, label, median, decided, fold in result.subject_rows:
            writer.writerow([sid, label, f"{median:.12f}", decided, fold])

    _atomic_write(path, lambda fh: emit(_TextWrap(fh)))


def export_artifacts(dir_path, manifest: CohortManifest, result: EvalResult, cfg: EvalConfig):
    """Model file, training history, subject scores, and per-subject score
    maps, each map produced by the fold model that did not train on the
    subject."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    write_model(dir_path / "model.mdl", result.params, cfg.seed, {"epochs": cfg.training.epochs})
    with open(dir_path / "history.csv", "w", newline="") as fh:
        result.history.write_csv(fh)
    write_subject_scores(dir_path / "subjects.csv", result)
    for entry in manifest.subjects:
        volume = read_volume(manifest.volume_path(entry))
        mask = read_mask(manifest.mask_path(entry))
        params = result.fold_models[result.subject_fold[str(entry.subject_id)]]
        scores = predict_scores_volume(params, volume, mask, cfg.sh_reg)
        export_psic(dir_path / f"psic_{entry.subject_id}.dcb", scores, mask)


def evaluate_manifest(manifest_path, cfg: EvalConfig, report_path, artifacts_dir=None, log=None) -> EvalResult:
    manifest = read_manifest(manifest_path)
    result = evaluate_cohort(manifest, cfg, log=log)
    write_report(report_path, result)
    if artifacts_dir is not None:
        export_artifacts(artifacts_dir, manifest, result, cfg)
    return result
