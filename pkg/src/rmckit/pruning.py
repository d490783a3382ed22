"""Task-specific compression: magnitude pruning and attention-head pruning.

Magnitude pruning masks the globally smallest encoder weights during
fine-tuning on a cubic sparsity ramp; masked coordinates are held at
exactly zero for the rest of training.  Head pruning scores each
(layer, head) by the mean absolute gradient of the loss with respect to
its mask scalar, then zeroes the lowest-scoring heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .model import TransformerClassifier
from .tensor import Tensor, backward, cross_entropy
from .training import EncodedDataset, TrainConfig, fit


@dataclass(frozen=True)
class PruneSchedule:
    """Cubic sparsity ramp over the middle third of training by default."""

    target_sparsity: float
    warmup_frac: float = 1.0 / 3.0
    ramp_frac: float = 1.0 / 3.0

    def validate(self):
        if not (0.0 <= self.target_sparsity < 1.0):
            raise ConfigError(f"target sparsity must lie in [0, 1), "
                              f"got {self.target_sparsity}")
        if self.warmup_frac < 0 or self.ramp_frac <= 0 or \
                self.warmup_frac + self.ramp_frac > 1.0:
            raise ConfigError("warmup and ramp fractions must fit inside training")
        return self

    def scheduled(self, step, total_steps) -> float:
        """Sparsity that should be reached after ``step`` of ``total_steps``."""
        warm = int(self.warmup_frac * total_steps)
        ramp = max(1, int(self.ramp_frac * total_steps))
        if step <= warm:
            return 0.0
        t = min(1.0, (step - warm) / ramp)
        return self.target_sparsity * (1.0 - (1.0 - t) ** 3)


@dataclass
class HeadImportance:
    scores: np.ndarray  # (num_layers, num_heads), mean |dL/dxi|, >= 0
    sample_count: int


def _maskable_params(model):
    return [model.params[name] for name in model.maskable_names()]


def _masked_count(params):
    return sum(int((p.mask == 0).sum()) for p in params if p.mask is not None)


def apply_magnitude_masks(model, count):
    """Mask the ``count`` globally smallest-magnitude unmasked encoder weights.

    Returns the number of newly masked coordinates (0 when already at or
    past ``count``); newly masked weights are set to exactly 0.
    """
    params = _maskable_params(model)
    already = _masked_count(params)
    need = count - already
    if need <= 0:
        return 0

    magnitudes = []
    for p in params:
        m = np.abs(p.data.reshape(-1))
        if p.mask is not None:
            m = np.where(p.mask.reshape(-1) == 0, np.inf, m)
        magnitudes.append(m)
    flat = np.concatenate(magnitudes)
    order = np.argsort(flat, kind="stable")[:need]

    offsets = np.cumsum([0] + [p.data.size for p in params])
    for i, p in enumerate(params):
        local = order[(order >= offsets[i]) & (order < offsets[i + 1])] - offsets[i]
        if local.size == 0:
            continue
        if p.mask is None:
            p.mask = np.ones_like(p.data)
        p.mask.reshape(-1)[local] = 0.0
        p.data.reshape(-1)[local] = 0.0
    return need


def magnitude_prune_finetune(model, train_set, schedule: PruneSchedule,
                             config: TrainConfig, loss_fn=None):
    """Fine-tune ``model`` in place while ramping its encoder sparsity.

    Embeddings are frozen (never updated, never masked).  ``loss_fn``
    is pluggable so distillation objectives can guide the pruning.
    Returns the training log; prune events carry (step, sparsity).
    """
    schedule.validate()
    params = _maskable_params(model)
    total_maskable = sum(p.data.size for p in params)
    if _masked_count(params) > round(schedule.target_sparsity * total_maskable):
        raise ContractError("model is already sparser than the target")

    def hook(model_, opt, step, total_steps, log):
        target_count = round(schedule.scheduled(step, total_steps) * total_maskable)
        newly = apply_magnitude_masks(model_, target_count)
        if newly:
            for p, m, v in zip(opt.params, opt._m, opt._v):
                if p.mask is not None:
                    dead = p.mask == 0
                    m[dead] = 0.0
                    v[dead] = 0.0
            log.prune_events.append((step, target_count / total_maskable))
        worst = 0.0
        for p in params:
            if p.mask is not None:
                masked_abs = np.abs(p.data[p.mask == 0])
                if masked_abs.size:
                    worst = max(worst, float(masked_abs.max()))
        log.masked_value_max = max(log.masked_value_max, worst)

    return fit(model, train_set, config, loss_fn=loss_fn,
               freeze_embeddings=True, step_hook=hook)


def head_importance(model: TransformerClassifier, probe_set, batch_size=64) -> HeadImportance:
    """Mean absolute loss sensitivity of each attention head's mask scalar.

    Uses per-sample mask copies so one backward pass yields per-sample
    gradients; model parameters are left untouched.
    """
    if isinstance(probe_set, EncodedDataset):
        dataset = probe_set
    else:
        if len(probe_set) == 0:
            raise ContractError("probe set is empty")
        dataset = EncodedDataset(probe_set)
    if len(dataset) == 0:
        raise ContractError("probe set is empty")
    for xi in model.head_masks:
        if not np.all(xi == 1.0):
            raise ContractError("head importance expects all head masks at 1")

    cfg = model.config
    totals = np.zeros((cfg.num_layers, cfg.num_heads))
    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        ids, mask, labels = dataset.batch(idx)
        overrides = [Tensor(np.ones((len(idx), cfg.num_heads, 1, 1)), requires_grad=True)
                     for _ in range(cfg.num_layers)]
        logits = model.forward(ids, mask, xi_override=overrides)
        # sum of per-sample losses, so each row of an override grad is the
        # gradient of that sample's own loss
        backward(cross_entropy(logits, labels) * float(len(idx)))
        for layer, xi in enumerate(overrides):
            totals[layer] += np.abs(xi.grad[:, :, 0, 0]).sum(axis=0)
    return HeadImportance(scores=totals / n, sample_count=n)


def structured_prune(model: TransformerClassifier, importance: HeadImportance,
                     num_to_prune: int) -> TransformerClassifier:
    """Zero the mask scalar of the lowest-scoring heads (in place).

    Ties break deterministically by (layer, head) index.  Weight tensors
    are not touched.
    """
    cfg = model.config
    total = cfg.num_layers * cfg.num_heads
    if not (0 <= num_to_prune < total):
        raise ConfigError(f"num_to_prune must lie in [0, {total}), got {num_to_prune}")
    ranked = sorted((importance.scores[l, h], l, h)
                    for l in range(cfg.num_layers) for h in range(cfg.num_heads))
    for _, layer, head in ranked[:num_to_prune]:
        model.head_masks[layer][head] = 0.0
    return model
