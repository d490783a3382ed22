"""Difficulty-aware distillation and the baseline training strategies.

Stage 1 feeds the training samples to pruned model snapshots at several
sparsity levels, reads per-sample losses, and normalizes their variance
into a difficulty degree on [alpha, 1].  Stage 2 raises the teacher's
softmax rows to that per-sample power (renormalized), flattening targets
for low-variance shortcut samples, and trains the compressed model on a
convex combination of hard-label cross-entropy and KL against the
smoothed targets.

Baselines share the same machinery: plain fine-tuning, unsmoothed
distillation, constant-degree smoothing, focal reweighting, and
misclassification up-weighting with a briefly trained identification
model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError
from .model import init_model
from .tensor import Tensor, cross_entropy, kl_divergence, no_grad
from .training import EncodedDataset, TrainConfig, fit

STRATEGIES = ("vanilla", "distil", "smooth", "focal", "jtt", "rmc")


@dataclass
class DistillConfig:
    strategy: str = "rmc"
    lam: float = 0.9            # soft-target weight in the combined loss
    alpha: float = 0.5          # difficulty floor
    smooth_degree: float = 0.9  # constant degree used by the smooth baseline
    gamma: float = 2.0          # focal exponent
    jtt_lambda_up: float = 2.0  # misclassified-sample raw weight
    jtt_epochs: int = 1         # identification model training length

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; "
                              f"expected one of {STRATEGIES}")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        return self


@dataclass
class DifficultyScores:
    variances: np.ndarray  # per-sample loss variance across snapshots
    v_min: float
    v_max: float
    alpha: float
    degrees: np.ndarray    # affine rescale of variance into [alpha, 1]


@dataclass
class SmoothedTargets:
    targets: np.ndarray        # per-sample probability rows, each sums to 1
    source_probs: np.ndarray
    degrees: np.ndarray


# -- stage 1: difficulty ---------------------------------------------------


def predict_logits(model, dataset, batch_size=256):
    """Evaluation-mode logits for every example, row order preserved."""
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    out = np.empty((len(dataset), model.config.num_classes))
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            ids, mask, _ = dataset.batch(idx)
            out[idx] = model.forward(ids, mask).data
    return out


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_loss_matrix(snapshots, dataset, batch_size=256):
    """Unreduced cross-entropy of every sample under every snapshot.

    Entry (i, k) is sample i's loss under snapshot k; models are only
    evaluated, never updated.
    """
    if not snapshots:
        raise ContractError("need at least one snapshot")
    first = snapshots[0].config
    for snap in snapshots[1:]:
        if (snap.config.vocab_size, snap.config.num_classes, snap.config.max_seq_len) != \
                (first.vocab_size, first.num_classes, first.max_seq_len):
            raise ContractError("snapshots disagree on tokenization or class count")
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    rows = np.arange(len(dataset))
    matrix = np.empty((len(dataset), len(snapshots)))
    for k, snap in enumerate(snapshots):
        logp = _log_softmax(predict_logits(snap, dataset, batch_size))
        matrix[:, k] = -logp[rows, dataset.labels]
    return matrix


def variance_scores(loss_matrix):
    """Population variance of each sample's losses across snapshots."""
    loss_matrix = np.asarray(loss_matrix, dtype=np.float64)
    if loss_matrix.ndim != 2 or loss_matrix.shape[1] < 2:
        raise ContractError("variance needs a matrix with at least 2 snapshot columns")
    return loss_matrix.var(axis=1)


def difficulty_degree(variances, alpha) -> DifficultyScores:
    """Affine map of variances onto [alpha, 1]; degenerate spread maps to 1."""
    if not (0.0 < alpha <= 1.0):
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    v = np.asarray(variances, dtype=np.float64)
    if v.size == 0:
        raise ContractError("no samples to score")
    v_min, v_max = float(v.min()), float(v.max())
    if v_max > v_min:
        degrees = alpha + (1.0 - alpha) * (v - v_min) / (v_max - v_min)
    else:
        degrees = np.ones_like(v)
    return DifficultyScores(variances=v, v_min=v_min, v_max=v_max,
                            alpha=alpha, degrees=degrees)


def compute_difficulty(snapshots, dataset, alpha) -> DifficultyScores:
    return difficulty_degree(variance_scores(per_sample_loss_matrix(snapshots, dataset)),
                             alpha)


# -- stage 2: smoothing and losses ----------------------------------------


def teacher_probs(teacher, dataset, batch_size=256):
    """Teacher softmax rows, computed once and cached by callers."""
    return np.exp(_log_softmax(predict_logits(teacher, dataset, batch_size)))


def smooth_teacher(probs, degrees) -> SmoothedTargets:
    """Per-sample power transform of teacher rows with renormalization.

    Degree 1 leaves a row bit-identical; lower degrees flatten it while
    preserving the argmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError(f"expected rank-2 probabilities, got shape {probs.shape}")
    degrees = np.asarray(degrees, dtype=np.float64)
    if degrees.shape != (probs.shape[0],):
        raise ContractError("one degree per sample is required")
    if (degrees <= 0).any() or (degrees > 1).any():
        raise ConfigError("degrees must lie in (0, 1]")
    if (probs < 0).any():
        raise ContractError("probabilities must be nonnegative")
    rowsum = probs.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-6:
        raise ContractError("teacher rows must sum to 1 within 1e-6")

    targets = probs.copy()
    needs = degrees != 1.0
    if needs.any():
        powered = probs[needs] ** degrees[needs, None]
        targets[needs] = powered / powered.sum(axis=1, keepdims=True)
    return SmoothedTargets(targets=targets, source_probs=probs, degrees=degrees)


def rmc_loss(labels, student_logits, targets, lam, per_sample_weights=None):
    """Convex combination of gold cross-entropy and KL to the targets.

    Optional weights multiply per-sample terms before batch averaging
    (used by the reweighting baselines).
    """
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    w = None
    scale = 1.0
    if per_sample_weights is not None:
        w = np.asarray(per_sample_weights, dtype=np.float64)
        # the weighted-mean primitives divide by sum(w); rescale to
        # mean-over-batch semantics
        scale = float(w.sum()) / w.shape[0]
    parts = []
    if lam < 1.0:
        parts.append((1.0 - lam) * scale * cross_entropy(student_logits, labels, w))
    if lam > 0.0:
        parts.append(lam * scale * kl_divergence(Tensor(np.asarray(targets)),
                                                 student_logits, w))
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def focal_weights(gold_probs, gamma):
    """Weights (1-p)^gamma normalized to batch mean exactly 1."""
    p = np.asarray(gold_probs, dtype=np.float64)
    if (p <= 0).any() or (p > 1).any():
        raise ContractError("gold-class probabilities must lie in (0, 1]")
    raw = (1.0 - p) ** gamma
    mean = raw.mean()
    if mean == 0.0:
        raise ContractError("degenerate batch: every gold probability is 1, "
                            "focal normalizer is zero")
    return raw / mean


def jtt_weights(identification_model, dataset, lambda_up):
    """Up-weight samples the identification model misclassifies.

    Raw weights (lambda_up for misses, 1 otherwise) are rescaled so the
    dataset mean is exactly 1.
    """
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    preds = predict_logits(identification_model, dataset).argmax(axis=1)
    raw = np.where(preds != dataset.labels, float(lambda_up), 1.0)
    return raw * (raw.shape[0] / raw.sum())


# -- strategy dispatch ------------------------------------------------------


def _clamped_gold_probs(logits_data, labels):
    probs = np.exp(_log_softmax(logits_data))
    p = probs[np.arange(len(labels)), labels]
    # keep the focal normalizer nonzero when the whole batch saturates
    return np.minimum(p, 1.0 - 1e-15)


def build_strategy_loss(strategy, dataset: EncodedDataset, cfg: DistillConfig,
                        tprobs=None, difficulty=None, sample_weights=None):
    """Per-batch loss closure for ``fit``; slices dataset-level artifacts."""
    cfg.validate()
    labels = dataset.labels

    if strategy == "vanilla":
        return lambda logits, idx: cross_entropy(logits, labels[idx])

    if strategy in ("distil", "smooth", "rmc"):
        if tprobs is None:
            raise ContractError(f"{strategy} needs cached teacher probabilities")
        if cfg.lam == 0.0:
            # the soft term vanishes; keep the graph identical to vanilla
            return lambda logits, idx: cross_entropy(logits, labels[idx])
        if strategy == "distil":
            targets = tprobs
        elif strategy == "smooth":
            degrees = np.full(tprobs.shape[0], cfg.smooth_degree)
            targets = smooth_teacher(tprobs, degrees).targets
        else:
            if difficulty is None:
                raise ContractError("rmc needs stage-1 difficulty degrees")
            targets = smooth_teacher(tprobs, difficulty.degrees).targets
        return lambda logits, idx: rmc_loss(labels[idx], logits, targets[idx], cfg.lam)

    if strategy == "focal":
        def focal_loss(logits, idx):
            p = _clamped_gold_probs(logits.data, labels[idx])
            return cross_entropy(logits, labels[idx], focal_weights(p, cfg.gamma))
        return focal_loss

    if strategy == "jtt":
        if sample_weights is None:
            raise ContractError("jtt needs precomputed identification weights")
        return lambda logits, idx: cross_entropy(logits, labels[idx],
                                                 sample_weights[idx])

    raise ConfigError(f"unknown strategy {strategy!r}")


def train_identification_model(teacher_config, dataset, train_config: TrainConfig,
                               epochs):
    """Fresh same-architecture model briefly trained with cross-entropy."""
    model = init_model(teacher_config)
    short = replace_epochs(train_config, epochs)
    fit(model, dataset, short)
    return model


def replace_epochs(config: TrainConfig, epochs):
    return TrainConfig(lr=config.lr, epochs=epochs, batch_size=config.batch_size,
                       weight_decay=config.weight_decay, seed=config.seed)


def prepare_strategy(strategy, teacher, dataset, cfg: DistillConfig,
                     train_config: TrainConfig, snapshots=None, difficulty=None):
    """Compute the dataset-level artifacts a strategy needs.

    Returns (loss_fn, artifacts) where artifacts may hold cached teacher
    probabilities, stage-1 difficulty scores, or identification weights.
    """
    cfg.validate()
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    artifacts = {}
    tprobs = None
    sample_weights = None

    if strategy in ("distil", "smooth", "rmc"):
        tprobs = teacher_probs(teacher, dataset)
        artifacts["teacher_probs"] = tprobs
    if strategy == "rmc":
        if difficulty is None:
            if snapshots is None:
                raise ContractError("rmc needs pruned snapshots or precomputed "
                                    "difficulty scores")
            difficulty = compute_difficulty(snapshots, dataset, cfg.alpha)
        artifacts["difficulty"] = difficulty
    if strategy == "jtt":
        ident = train_identification_model(teacher.config, dataset, train_config,
                                           cfg.jtt_epochs)
        sample_weights = jtt_weights(ident, dataset, cfg.jtt_lambda_up)
        artifacts["jtt_weights"] = sample_weights

    loss_fn = build_strategy_loss(strategy, dataset, cfg, tprobs=tprobs,
                                  difficulty=difficulty,
                                  sample_weights=sample_weights)
    return loss_fn, artifacts


def train_student(strategy, teacher, student, dataset, cfg: DistillConfig,
                  train_config: TrainConfig, snapshots=None, difficulty=None,
                  prune_schedule=None):
    """Train a compressed model with the given strategy (in place).

    ``student`` is either a truncated model (distillation family) or a
    clone of the teacher to be magnitude-pruned when ``prune_schedule``
    is given.  Returns (student, train_log, artifacts).
    """
    from .pruning import magnitude_prune_finetune  # local import, avoids cycle

    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    loss_fn, artifacts = prepare_strategy(strategy, teacher, dataset, cfg,
                                          train_config, snapshots=snapshots,
                                          difficulty=difficulty)
    if prune_schedule is not None:
        log = magnitude_prune_finetune(student, dataset, prune_schedule,
                                       train_config, loss_fn=loss_fn)
    else:
        log = fit(student, dataset, train_config, loss_fn=loss_fn)
    return student, log, artifacts


# -- persistence -------------------------------------------------------------


def save_difficulty(path, scores: DifficultyScores):
    """Line-delimited records: sample index, variance, degree."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# alpha={scores.alpha!r} v_min={scores.v_min!r} "
                 f"v_max={scores.v_max!r}\n")
        for i, (v, d) in enumerate(zip(scores.variances, scores.degrees)):
            fh.write(f"{i}\t{float(v)!r}\t{float(d)!r}\n")


def load_difficulty(path) -> DifficultyScores:
    variances, degrees = [], []
    alpha = v_min = v_max = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                fields = dict(part.split("=") for part in line[1:].split())
                alpha = float(fields["alpha"])
                v_min = float(fields["v_min"])
                v_max = float(fields["v_max"])
                continue
            _, v, d = line.rstrip("\n").split("\t")
            variances.append(float(v))
            degrees.append(float(d))
    return DifficultyScores(variances=np.array(variances), v_min=v_min,
                            v_max=v_max, alpha=alpha, degrees=np.array(degrees))


def save_probs(path, probs):
    """Line-delimited records: sample index, comma-separated class probabilities."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(np.asarray(probs)):
            fh.write(f"{i}\t{','.join(repr(float(p)) for p in row)}\n")


def load_probs(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            _, values = line.rstrip("\n").split("\t")
            rows.append([float(v) for v in values.split(",")])
    return np.array(rows)
