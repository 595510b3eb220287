import numpy as np
import pytest

import dcnet.training as training
from dcnet.network import NetworkConfig, init_params
from dcnet.training import (
    AdamState,
    LabeledDcSet,
    TrainingConfig,
    TrainingDiverged,
    adam_step,
    cross_entropy,
    prediction_accuracy,
    split_dataset,
    train,
)

from oracles import scalar_adam


def toy_set(n_per_class=60, p=6, gap=3.0, seed=0):
    """Two Gaussian blobs in coefficient space, trivially separable at gap 3."""
    rng = np.random.default_rng(seed)
    m = n_per_class
    x0 = rng.normal(-gap / 2, 1.0, size=(m, 3, 3, 3, p))
    x1 = rng.normal(gap / 2, 1.0, size=(m, 3, 3, 3, p))
    samples = np.concatenate([x0, x1])
    labels = np.concatenate([np.zeros(m, dtype=int), np.ones(m, dtype=int)])
    subjects = np.array([f"s{i % 10}_{l}" for i, l in enumerate(labels)], dtype=object)
    return LabeledDcSet(samples, labels, subjects)


class TestSplit:
    def test_four_to_one_counts(self):
        dset = toy_set(50)  # 100 samples
        tr, va, _ = split_dataset(dset, (4, 1), "by_sample", seed=0)
        assert len(tr) == 80 and len(va) == 20

    def test_empty_validation_rejected(self):
        with pytest.raises(ValueError):
            split_dataset(toy_set(10), (1, 0), "by_sample", seed=0)

    def test_by_subject_partition(self):
        dset = toy_set(40)
        tr, va, _ = split_dataset(dset, (4, 1), "by_subject", seed=3)
        assert set(tr.subject_ids.tolist()).isdisjoint(set(va.subject_ids.tolist()))
        assert len(tr) + len(va) == len(dset)

    def test_stratified_by_label(self):
        dset = toy_set(50)
        tr, va, _ = split_dataset(dset, (4, 1), "by_sample", seed=1)
        assert np.sum(tr.labels == 0) == 40 and np.sum(tr.labels == 1) == 40

    def test_reproducible(self):
        dset = toy_set(30)
        a = split_dataset(dset, (4, 1), "by_sample", seed=9)[2]
        b = split_dataset(dset, (4, 1), "by_sample", seed=9)[2]
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestCrossEntropy:
    def test_half_is_log_two(self):
        assert cross_entropy(0.5, 1) == pytest.approx(np.log(2), abs=1e-12)

    def test_perfect_fit_tends_to_zero(self):
        assert cross_entropy(1.0 - 1e-13, 1) == pytest.approx(0.0, abs=1e-11)

    def test_confident_mistake(self):
        assert cross_entropy(0.9, 0) == pytest.approx(-np.log(0.1), abs=1e-12)

    def test_clipping_keeps_finite(self):
        assert np.isfinite(cross_entropy(0.0, 1))
        assert np.isfinite(cross_entropy(1.0, 0))


class TestAdam:
    def test_zero_gradients_noop(self):
        cfg = TrainingConfig()
        theta = np.array([1.0, -2.0, 3.0])
        state = AdamState.zeros(3)
        out, _ = adam_step(theta.copy(), np.zeros(3), state, cfg)
        assert np.array_equal(out, theta)

    def test_first_step_is_signed_lr(self):
        cfg = TrainingConfig(learning_rate=1e-2)
        theta = np.zeros(2)
        out, _ = adam_step(theta, np.array([0.3, -40.0]), AdamState.zeros(2), cfg)
        assert out == pytest.approx([-1e-2, 1e-2], rel=1e-6)

    def test_three_steps_match_scalar_oracle(self):
        cfg = TrainingConfig(learning_rate=0.05)
        # deterministic gradient sequence of a 1-parameter problem
        grads = [0.8, -0.3, 0.45]
        theta = np.array([0.2])
        state = AdamState.zeros(1)
        mine = []
        for g in grads:
            theta, state = adam_step(theta, np.array([g]), state, cfg)
            mine.append(float(theta[0]))
        expected = scalar_adam(0.2, grads, 0.05)
        assert np.allclose(mine, expected, atol=1e-12)

    def test_nonfinite_gradient_aborts(self):
        cfg = TrainingConfig()
        with pytest.raises(TrainingDiverged):
            adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2), cfg)

    def test_network_params_version_bump(self):
        cfg = NetworkConfig(n_max=0, kernel_size=1)
        params = init_params(cfg, 0)
        v0 = params.version
        adam_step(params, np.ones_like(params.flat), AdamState.zeros(params.flat.size), TrainingConfig())
        assert params.version == v0 + 1


@pytest.fixture(scope="module")
def toy_training_run():
    dset = toy_set(60)
    net_cfg = NetworkConfig(n_max=2, seed=0)
    cfg = TrainingConfig(
        learning_rate=2e-3, batch_size=32, epochs=12, keep_prob=1.0, seed=0
    )
    params, history = train(dset, net_cfg, cfg)
    return dset, net_cfg, cfg, params, history


class TestTrain:
    def test_separable_reaches_perfect_validation(self, toy_training_run):
        _, _, _, _, history = toy_training_run
        assert history.rows[-1][0] < 50
        assert history.final_valid_pa == 1.0

    def test_loss_non_increasing_after_burn_in(self, toy_training_run):
        _, _, _, _, history = toy_training_run
        losses = [row[1] for row in history.rows]
        for i in range(5, len(losses) - 1):
            assert losses[i + 1] <= 1.1 * losses[i]

    def test_label_permutation_null(self):
        dset = toy_set(60)
        rng = np.random.default_rng(7)
        permuted = LabeledDcSet(dset.samples, rng.permutation(dset.labels), dset.subject_ids)
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=32, epochs=6, seed=0)
        _, history = train(permuted, NetworkConfig(n_max=2, seed=0), cfg)
        assert 0.4 <= history.final_valid_pa <= 0.6

    def test_bit_reproducible(self):
        dset = toy_set(30)
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=16, epochs=3, seed=4)
        runs = [train(dset, NetworkConfig(n_max=2, seed=1), cfg) for _ in range(2)]
        assert runs[0][1].rows == runs[1][1].rows
        assert np.array_equal(runs[0][0].flat, runs[1][0].flat)

    def test_single_class_rejected(self):
        dset = toy_set(20)
        only_ones = LabeledDcSet(dset.samples, np.ones(len(dset), dtype=int), dset.subject_ids)
        with pytest.raises(ValueError):
            train(only_ones, NetworkConfig(n_max=2), TrainingConfig(epochs=1))

    def test_history_csv_shape(self, toy_training_run, tmp_path):
        _, _, _, _, history = toy_training_run
        with open(tmp_path / "h.csv", "w", newline="") as fh:
            history.write_csv(fh)
        lines = (tmp_path / "h.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,mean_loss,train_pa,valid_pa"
        assert len(lines) == len(history.rows) + 1


class TestPredictionAccuracy:
    def test_formula_on_stubbed_scores(self, monkeypatch):
        dset = toy_set(2, seed=1)  # 4 samples

        def fake_scores(params, samples):
            return np.array([0.6, 0.4, 0.6, 0.4])

        monkeypatch.setattr(training, "_scores", fake_scores)
        # labels are (0, 0, 1, 1): predictions (1, 0, 1, 0) -> PA = 0.5
        assert prediction_accuracy(object(), dset) == 0.5

    def test_all_correct_and_all_wrong(self, monkeypatch):
        dset = toy_set(2, seed=1)
        monkeypatch.setattr(training, "_scores", lambda p, s: dset.labels.astype(float))
        assert prediction_accuracy(object(), dset) == 1.0
        monkeypatch.setattr(training, "_scores", lambda p, s: 1.0 - dset.labels)
        assert prediction_accuracy(object(), dset) == 0.0

    def test_matches_confusion_matrix_count(self, toy_training_run):
        dset, _, _, params, _ = toy_training_run
        scores = training.psic_scores(params, dset.samples)
        predicted = (scores >= 0.5).astype(int)
        tp = np.sum((predicted == 1) & (dset.labels == 1))
        tn = np.sum((predicted == 0) & (dset.labels == 0))
        assert prediction_accuracy(params, dset) == pytest.approx((tp + tn) / len(dset), abs=1e-12)
