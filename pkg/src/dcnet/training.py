"""Dataset assembly, train/validation splitting, Adam, and the
cross-entropy training loop with prediction-accuracy monitoring.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkConfig, NetworkParams, backward_batch, forward_batch, init_params

CN, AD = 0, 1
_EVAL_CHUNK = 512  # fixed evaluation chunk size keeps reduction order thread-invariant


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class LabeledDcSet:
    """SH cubes with binary labels and subject provenance."""

    samples: np.ndarray      # (N, M, M, M, P)
    labels: np.ndarray       # (N,) in {0, 1}
    subject_ids: np.ndarray  # (N,)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.subject_ids = np.asarray(self.subject_ids)
        n = self.samples.shape[0]
        if self.samples.ndim != 5 or len(self.labels) != n or len(self.subject_ids) != n:
            raise ValueError("samples, labels and subject_ids must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, indices) -> "LabeledDcSet":
        idx = np.asarray(indices)
        return LabeledDcSet(self.samples[idx], self.labels[idx], self.subject_ids[idx])


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.5e-3
    batch_size: int = 256
    epochs: int = 200
    keep_prob: float = 0.7
    split_ratio: tuple = (4, 1)
    split_mode: str = "by_sample"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    keep_best: bool = False  # retain the best-validation-PA checkpoint instead of the last

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.split_mode not in ("by_sample", "by_subject"):
            raise ValueError("split_mode must be 'by_sample' or 'by_subject'")


def split_dataset(dset: LabeledDcSet, ratio=(4, 1), mode="by_sample", seed=0):
    """Randomized stratified split into (train, valid).

    by_sample shuffles cubes individually; by_subject keeps each subject's
    cubes on one side.  Stratified per class so the class balance carries
    over.  Raises if either side ends up empty.
    """
    if len(dset) == 0:
        raise ValueError("cannot split an empty dataset")
    a, b = ratio
    if a <= 0 or b < 0:
        raise ValueError("ratio parts must be positive (train) and nonnegative (valid)")
    rng = np.random.default_rng(seed)
    train_idx, valid_idx = [], []
    if mode == "by_sample":
        for label in (0, 1):
            idx = np.flatnonzero(dset.labels == label)
            if idx.size == 0:
                continue
            rng.shuffle(idx)
            n_train = int(round(idx.size * a / (a + b)))
            train_idx.append(idx[:n_train])
            valid_idx.append(idx[n_train:])
    elif mode == "by_subject":
        for label in (0, 1):
            mask = dset.labels == label
            subjects = np.unique(dset.subject_ids[mask])
            if subjects.size == 0:
                continue
            rng.shuffle(subjects)
            n_train = int(round(subjects.size * a / (a + b)))
            train_subj = set(subjects[:n_train].tolist())
            idx = np.flatnonzero(mask)
            on_train = np.isin(dset.subject_ids[idx], list(train_subj))
            train_idx.append(idx[on_train])
            valid_idx.append(idx[~on_train])
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    train_idx = np.sort(np.concatenate(train_idx))
    valid_idx = np.sort(np.concatenate(valid_idx)) if any(len(v) for v in valid_idx) else np.array([], dtype=int)
    if train_idx.size == 0 or valid_idx.size == 0:
        raise ValueError("split produced an empty partition")
    return dset.subset(train_idx), dset.subset(valid_idx), (train_idx, valid_idx)


def cross_entropy(gamma: float, gamma0) -> float:
    """Two-class cross-entropy with clipping at 1e-12."""
    g = np.clip(gamma, 1e-12, 1.0 - 1e-12)
    return float(-(gamma0 * np.log(g) + (1.0 - gamma0) * np.log(1.0 - g)))


def _batch_cross_entropy(gamma: np.ndarray, targets: np.ndarray) -> float:
    g = np.clip(gamma, 1e-12, 1.0 - 1e-12)
    return float(np.mean(-(targets * np.log(g) + (1.0 - targets) * np.log(1.0 - g))))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads: np.ndarray, state: AdamState, cfg: TrainingConfig):
    """One Adam update with bias correction; mutates params in place.

    ``params`` may be a NetworkParams (its version counter is bumped) or a
    plain float64 vector.  Non-finite gradients abort the step.
    """
    if not np.all(np.isfinite(grads)):
        raise TrainingDiverged(f"non-finite gradients ({np.count_nonzero(~np.isfinite(grads))} entries)")
    theta = params.flat if isinstance(params, NetworkParams) else params
    if theta.shape != grads.shape:
        raise ValueError("gradient shape does not match parameters")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    theta -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if isinstance(params, NetworkParams):
        params.version += 1
    return params, state


def _scores(params: NetworkParams, samples: np.ndarray) -> np.ndarray:
    out = np.empty(samples.shape[0])
    for start in range(0, samples.shape[0], _EVAL_CHUNK):
        chunk = samples[start : start + _EVAL_CHUNK]
        out[start : start + _EVAL_CHUNK] = forward_batch(params, chunk)[0]
    return out


def psic_scores(params: NetworkParams, samples: np.ndarray) -> np.ndarray:
    """Inference scores for (N, M, M, M, P) cubes, no dropout."""
    return _scores(params, np.asarray(samples, dtype=np.float64))


def prediction_accuracy(params: NetworkParams, dset: LabeledDcSet) -> float:
    """PA = 1 - mean |predicted - label| with prediction = score >= 0.5."""
    if len(dset) == 0:
        raise ValueError("empty dataset")
    predicted = (_scores(params, dset.samples) >= 0.5).astype(np.float64)
    return float(1.0 - np.mean(np.abs(predicted - dset.labels)))


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)  # (epoch, mean_loss, train_pa, valid_pa)
    train_indices: np.ndarray | None = None
    valid_indices: np.ndarray | None = None

    def write_csv(self, stream):
        writer = csv.writer(stream)
        writer.writerow(["epoch", "mean_loss", "train_pa", "valid_pa"])
        for row in self.rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    @property
    def final_valid_pa(self) -> float:
        return self.rows[-1][3]


def train(dset: LabeledDcSet, net_cfg: NetworkConfig, cfg: TrainingConfig, log=None):
    """Mini-batch cross-entropy training with Adam and dropout.

    Splits ``dset`` per the config, runs ``cfg.epochs`` epochs of shuffled
    batches and returns (params, history).  All randomness (split, shuffle
    order, dropout masks, initialization) derives from the two seeds, so a
    rerun reproduces the history bit for bit.
    """
    if len(np.unique(dset.labels)) < 2:
        raise ValueError("training set must contain both classes")
    train_set, valid_set, (train_idx, valid_idx) = split_dataset(
        dset, cfg.split_ratio, cfg.split_mode, cfg.seed
    )
    params, history = fit(train_set, valid_set, net_cfg, cfg, log=log)
    history.train_indices = train_idx
    history.valid_indices = valid_idx
    return params, history


def fit(train_set: LabeledDcSet, valid_set: LabeledDcSet, net_cfg: NetworkConfig, cfg: TrainingConfig, log=None):
    """Training core on an explicit (train, valid) pair."""
    params = init_params(net_cfg)
    state = AdamState.zeros(params.flat.size)
    shuffle_rng, dropout_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    ]
    history = TrainingHistory()
    best = None
    n = len(train_set)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x = train_set.samples[batch]
            targets = train_set.labels[batch].astype(np.float64)
            gamma, cache = forward_batch(
                params, x, keep_prob=cfg.keep_prob, dropout_rng=dropout_rng
            )
            loss = _batch_cross_entropy(gamma, targets)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss_sum += loss * len(batch)
            grads = backward_batch(params, cache, targets)
            params, state = adam_step(params, grads, state, cfg)
        row = (
            epoch,
            loss_sum / n,
            prediction_accuracy(params, train_set),
            prediction_accuracy(params, valid_set),
        )
        history.rows.append(row)
        if log is not None:
            log(row)
        if cfg.keep_best and (best is None or row[3] >= best[0]):
            best = (row[3], params.copy())
    if cfg.keep_best and best is not None:
        params = best[1]
    return params, history
