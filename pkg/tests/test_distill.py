"""Difficulty estimation, smoothing, strategy losses, and dispatch."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmckit.data import DatasetSpec, generate
from rmckit.distill import (
    DistillConfig,
    build_strategy_loss,
    compute_difficulty,
    difficulty_degree,
    focal_weights,
    jtt_weights,
    load_difficulty,
    load_probs,
    per_sample_loss_matrix,
    predict_logits,
    rmc_loss,
    save_difficulty,
    save_probs,
    smooth_teacher,
    teacher_probs,
    train_student,
    variance_scores,
)
from rmckit.errors import ConfigError, ContractError
from rmckit.model import ModelConfig, init_model, truncate_student
from rmckit.tensor import Tensor, cross_entropy
from rmckit.training import EncodedDataset, TrainConfig, fit

TINY_MODEL = ModelConfig(vocab_size=14, max_seq_len=16, embed_dim=16, num_layers=2,
                         num_heads=2, ffn_dim=32, num_classes=2, seed=5)
TINY_DATA = DatasetSpec(seed=21, n_train=192, n_dev=64, n_adv=64)


@pytest.fixture(scope="module")
def tiny_world():
    splits = generate(TINY_DATA)
    train = EncodedDataset(splits["train"])
    teacher = init_model(TINY_MODEL)
    fit(teacher, train, TrainConfig(lr=1e-3, epochs=2, seed=0))
    return splits, train, teacher


def entropy(row):
    row = row[row > 0]
    return float(-(row * np.log(row)).sum())


class TestLossMatrix:
    def test_identical_snapshots_zero_variance(self, tiny_world):
        _, train, teacher = tiny_world
        matrix = per_sample_loss_matrix([teacher] * 5, train)
        np.testing.assert_allclose(variance_scores(matrix), 0.0, atol=1e-24)

    def test_single_sample_matches_scalar_oracle(self, tiny_world):
        splits, _, teacher = tiny_world
        ds = EncodedDataset(splits["dev"][:1])
        matrix = per_sample_loss_matrix([teacher], ds)
        logits = predict_logits(teacher, ds)[0]
        z = sum(math.exp(v) for v in logits)
        expected = -math.log(math.exp(logits[ds.labels[0]]) / z)
        assert matrix[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_permuting_samples_permutes_rows(self, tiny_world):
        splits, _, teacher = tiny_world
        examples = splits["dev"][:16]
        base = per_sample_loss_matrix([teacher], EncodedDataset(examples))
        perm = np.random.default_rng(3).permutation(16)
        shuffled = per_sample_loss_matrix(
            [teacher], EncodedDataset([examples[i] for i in perm]))
        np.testing.assert_allclose(shuffled, base[perm], atol=1e-12)

    def test_mismatched_snapshot_config_rejected(self, tiny_world):
        _, train, teacher = tiny_world
        other = init_model(ModelConfig(vocab_size=14, max_seq_len=16, embed_dim=16,
                                       num_layers=1, num_heads=2, ffn_dim=32,
                                       num_classes=3, seed=0))
        with pytest.raises(ContractError):
            per_sample_loss_matrix([teacher, other], train)


class TestVarianceScores:
    def test_constant_row_zero(self):
        assert variance_scores([[2.0, 2.0, 2.0, 2.0, 2.0]])[0] == 0.0

    def test_hand_computed_population_variance(self):
        assert variance_scores([[0.0, 0.0, 0.0, 0.0, 5.0]])[0] == pytest.approx(4.0)

    def test_scaling_row_scales_variance_quadratically(self):
        rng = np.random.default_rng(0)
        row = rng.uniform(0, 3, size=(1, 5))
        base = variance_scores(row)[0]
        assert variance_scores(3.0 * row)[0] == pytest.approx(9.0 * base, rel=1e-12)

    def test_single_column_rejected(self):
        with pytest.raises(ContractError):
            variance_scores([[1.0]])


class TestDifficultyDegree:
    def test_endpoints(self):
        scores = difficulty_degree([0.0, 1.0, 2.0], alpha=0.5)
        assert scores.degrees[0] == pytest.approx(0.5)
        assert scores.degrees[2] == pytest.approx(1.0)

    def test_direct_evaluation(self):
        scores = difficulty_degree([0.0, 1.0, 2.0], alpha=0.5)
        assert scores.degrees[1] == pytest.approx(0.75)

    def test_degenerate_spread_gives_ones(self):
        scores = difficulty_degree([3.0, 3.0], alpha=0.2)
        np.testing.assert_array_equal(scores.degrees, 1.0)

    def test_invalid_alpha_rejected(self):
        for alpha in (0.0, -0.1, 1.5):
            with pytest.raises(ConfigError):
                difficulty_degree([1.0, 2.0], alpha=alpha)

    @given(st.lists(st.floats(0, 100), min_size=2, max_size=30),
           st.floats(0.05, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_order_preserving_affine(self, variances, alpha):
        scores = difficulty_degree(variances, alpha)
        v = np.asarray(variances)
        d = scores.degrees
        assert (d >= alpha - 1e-12).all() and (d <= 1.0 + 1e-12).all()
        order = np.argsort(v, kind="stable")
        assert (np.diff(d[order]) >= -1e-12).all()


class TestSmoothTeacher:
    def test_degree_one_is_bitwise_identity(self):
        probs = np.array([[0.3, 0.7], [0.05, 0.95]])
        out = smooth_teacher(probs, [1.0, 1.0])
        assert out.targets.tobytes() == probs.tobytes()

    def test_analytic_case(self):
        out = smooth_teacher(np.array([[0.9, 0.1]]), [0.5])
        np.testing.assert_allclose(out.targets, [[0.75, 0.25]], atol=1e-12)

    def test_uniform_stays_uniform(self):
        probs = np.full((3, 4), 0.25)
        out = smooth_teacher(probs, [0.3, 0.7, 1.0])
        np.testing.assert_allclose(out.targets, 0.25, atol=1e-12)

    def test_invalid_degree_rejected(self):
        with pytest.raises(ConfigError):
            smooth_teacher(np.array([[0.5, 0.5]]), [0.0])

    def test_non_distribution_rejected(self):
        with pytest.raises(ContractError):
            smooth_teacher(np.array([[0.5, 0.4]]), [0.5])

    @given(st.integers(2, 6), st.floats(0.1, 1.0), st.integers(0, 10_000))
    @settings(max_examples=80, deadline=None)
    def test_invariants(self, k, degree, seed):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0.01, 1.0, size=(1, k))
        probs = raw / raw.sum()
        out = smooth_teacher(probs, [degree]).targets[0]
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        assert (out >= 0).all()
        assert out.argmax() == probs[0].argmax()

    @given(st.integers(2, 6), st.integers(0, 10_000),
           st.floats(0.1, 0.95), st.floats(0.05, 0.9))
    @settings(max_examples=80, deadline=None)
    def test_entropy_monotone_in_degree(self, k, seed, d_hi, step):
        d_lo = max(0.05, d_hi - step)
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0.01, 1.0, size=(1, k))
        probs = raw / raw.sum()
        h_lo = entropy(smooth_teacher(probs, [d_lo]).targets[0])
        h_hi = entropy(smooth_teacher(probs, [d_hi]).targets[0])
        assert h_lo >= h_hi - 1e-10


class TestRmcLoss:
    def test_lambda_zero_equals_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((4, 3)))
        labels = [0, 2, 1, 1]
        targets = np.full((4, 3), 1 / 3)
        loss = rmc_loss(labels, logits, targets, lam=0.0)
        assert loss.item() == cross_entropy(logits, labels).item()

    def test_lambda_one_one_hot_equals_cross_entropy(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((3, 2)))
        labels = [1, 0, 1]
        onehot = np.eye(2)[labels]
        loss = rmc_loss(labels, logits, onehot, lam=1.0)
        assert loss.item() == pytest.approx(cross_entropy(logits, labels).item(),
                                            rel=1e-12)

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(3)
        logits_data = rng.standard_normal((3, 3))
        labels = [2, 0, 1]
        raw = rng.uniform(0.1, 1.0, size=(3, 3))
        targets = raw / raw.sum(axis=1, keepdims=True)
        lam = 0.9

        expected = 0.0
        for row, y, t in zip(logits_data, labels, targets):
            z = sum(math.exp(v) for v in row)
            probs = [math.exp(v) / z for v in row]
            ce = -math.log(probs[y])
            kl = sum(tj * (math.log(tj) - math.log(pj)) for tj, pj in zip(t, probs))
            expected += ((1 - lam) * ce + lam * kl) / 3
        loss = rmc_loss(labels, Tensor(logits_data), targets, lam=lam)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_weights_average_before_batch_mean(self):
        rng = np.random.default_rng(4)
        logits_data = rng.standard_normal((2, 2))
        labels = [0, 1]
        targets = np.full((2, 2), 0.5)
        weights = [2.0, 0.5]
        lam = 0.4
        expected = 0.0
        for i, (row, y) in enumerate(zip(logits_data, labels)):
            z = sum(math.exp(v) for v in row)
            probs = [math.exp(v) / z for v in row]
            ce = -math.log(probs[y])
            kl = sum(0.5 * (math.log(0.5) - math.log(p)) for p in probs)
            expected += weights[i] * ((1 - lam) * ce + lam * kl) / 2
        loss = rmc_loss(labels, Tensor(logits_data), targets, lam=lam,
                        per_sample_weights=weights)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_invalid_lambda_rejected(self):
        with pytest.raises(ConfigError):
            rmc_loss([0], Tensor([[0.0, 0.0]]), np.array([[0.5, 0.5]]), lam=1.5)


class TestFocalWeights:
    def test_equal_probs_give_unit_weights(self):
        np.testing.assert_allclose(focal_weights([0.7, 0.7, 0.7], 2.0), 1.0,
                                   atol=1e-15)

    def test_hand_computed_pair(self):
        w = focal_weights([0.9, 0.5], 2.0)
        np.testing.assert_allclose(w, [0.01 / 0.13, 0.25 / 0.13], atol=1e-9)

    def test_batch_mean_exactly_one(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            p = rng.uniform(0.05, 0.999, size=rng.integers(2, 40))
            assert focal_weights(p, 2.0).mean() == pytest.approx(1.0, abs=1e-12)

    def test_all_confident_batch_rejected(self):
        with pytest.raises(ContractError):
            focal_weights([1.0, 1.0], 2.0)


class TestJttWeights:
    def test_all_correct_gives_unit_weights(self, tiny_world):
        splits, train, teacher = tiny_world
        preds = predict_logits(teacher, train).argmax(axis=1)
        correct = [ex for ex, p in zip(train.examples, preds) if p == ex.label]
        w = jtt_weights(teacher, EncodedDataset(correct), 2.0)
        np.testing.assert_allclose(w, 1.0, atol=1e-15)

    def test_hand_computed_rescaling(self, tiny_world):
        splits, train, teacher = tiny_world
        preds = predict_logits(teacher, train).argmax(axis=1)
        correct = [ex for ex, p in zip(train.examples, preds) if p == ex.label]
        wrong = [ex for ex, p in zip(train.examples, preds) if p != ex.label]
        assert len(wrong) >= 2, "fixture teacher should miss a few examples"
        chosen = wrong[:2] + correct[:8]
        w = jtt_weights(teacher, EncodedDataset(chosen), 2.0)
        np.testing.assert_allclose(w[:2], 2.0 * 10 / 12, atol=1e-12)
        np.testing.assert_allclose(w[2:], 1.0 * 10 / 12, atol=1e-12)
        assert w.mean() == pytest.approx(1.0, abs=1e-12)

    def test_empty_dataset_rejected(self, tiny_world):
        _, _, teacher = tiny_world
        with pytest.raises(ContractError):
            jtt_weights(teacher, EncodedDataset([]), 2.0)


class TestTrainStudent:
    def test_vanilla_dispatch_matches_plain_fit(self, tiny_world):
        splits, train, teacher = tiny_world
        cfg = TrainConfig(lr=1e-3, epochs=1, seed=9)
        a = truncate_student(teacher, 1)
        _, log_a, _ = train_student("vanilla", teacher, a, train,
                                    DistillConfig(strategy="vanilla"), cfg)
        b = truncate_student(teacher, 1)
        log_b = fit(b, train, cfg)
        assert log_a.epoch_losses == log_b.epoch_losses
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_distil_lambda_zero_bit_identical_to_vanilla(self, tiny_world):
        splits, train, teacher = tiny_world
        cfg = TrainConfig(lr=1e-3, epochs=1, seed=9)
        a = truncate_student(teacher, 1)
        train_student("distil", teacher, a, train,
                      DistillConfig(strategy="distil", lam=0.0), cfg)
        b = truncate_student(teacher, 1)
        train_student("vanilla", teacher, b, train,
                      DistillConfig(strategy="vanilla"), cfg)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_degenerate_difficulty_reduces_rmc_to_distil(self, tiny_world):
        splits, train, teacher = tiny_world
        cfg = TrainConfig(lr=1e-3, epochs=1, seed=9)
        # identical snapshots make every variance zero, hence every degree 1
        a = truncate_student(teacher, 1)
        train_student("rmc", teacher, a, train, DistillConfig(strategy="rmc"),
                      cfg, snapshots=[teacher, teacher])
        b = truncate_student(teacher, 1)
        train_student("distil", teacher, b, train,
                      DistillConfig(strategy="distil"), cfg)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_unknown_strategy_rejected(self, tiny_world):
        splits, train, teacher = tiny_world
        with pytest.raises(ConfigError):
            train_student("mystery", teacher, truncate_student(teacher, 1), train,
                          DistillConfig(strategy="mystery"), TrainConfig(epochs=1))

    def test_focal_and_jtt_run(self, tiny_world):
        splits, train, teacher = tiny_world
        cfg = TrainConfig(lr=1e-3, epochs=1, seed=9)
        for strategy in ("focal", "jtt"):
            student = truncate_student(teacher, 1)
            _, log, artifacts = train_student(
                strategy, teacher, student, train,
                DistillConfig(strategy=strategy), cfg)
            assert log.steps > 0
            if strategy == "jtt":
                assert artifacts["jtt_weights"].mean() == pytest.approx(1.0, abs=1e-12)


class TestPersistence:
    def test_difficulty_round_trip(self, tmp_path):
        scores = compute_difficulty_stub()
        path = tmp_path / "difficulty.tsv"
        save_difficulty(path, scores)
        loaded = load_difficulty(path)
        np.testing.assert_array_equal(loaded.variances, scores.variances)
        np.testing.assert_array_equal(loaded.degrees, scores.degrees)
        assert loaded.alpha == scores.alpha
        assert (loaded.v_min, loaded.v_max) == (scores.v_min, scores.v_max)

    def test_probs_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        raw = rng.uniform(0.01, 1, size=(17, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        path = tmp_path / "probs.tsv"
        save_probs(path, probs)
        np.testing.assert_array_equal(load_probs(path), probs)


def compute_difficulty_stub():
    rng = np.random.default_rng(7)
    return difficulty_degree(rng.uniform(0, 2, size=23), alpha=0.5)
