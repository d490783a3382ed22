"""Shared minibatch training loop.

Teacher fine-tuning, pruning fine-tunes, and every distillation strategy
run through ``fit`` with a pluggable per-batch loss.  Batch order is the
only source of randomness and is fully determined by the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import encode_batch
from .tensor import AdamW, backward, cross_entropy

# ``gc`` pauses are measurable at this op granularity; the tape frees by
# refcount, so collection is deferred to epoch boundaries during fits.
import gc


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 64
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)
    steps: int = 0
    masked_value_max: float = 0.0  # largest |weight| ever seen under a zero mask
    prune_events: list = field(default_factory=list)


class EncodedDataset:
    """Examples pre-encoded into padded id/mask matrices for fast slicing."""

    def __init__(self, examples):
        self.examples = examples
        self.ids, self.mask, self.labels = encode_batch(examples)
        self.lengths = self.mask.sum(axis=1).astype(np.int64)

    def __len__(self):
        return len(self.examples)

    def batch(self, idx):
        width = int(self.lengths[idx].max())
        return self.ids[idx, :width], self.mask[idx, :width], self.labels[idx]


def fit(model, dataset, config: TrainConfig, loss_fn=None, freeze_embeddings=False,
        step_hook=None) -> TrainLog:
    """Train ``model`` in place and return the loss trace.

    ``loss_fn(logits, batch_indices)`` returns the scalar batch loss; the
    default is cross-entropy against the dataset labels.  ``step_hook``
    (if given) runs after each optimizer step as
    ``step_hook(model, optimizer, step_index, total_steps, log)`` and is
    how the pruning schedule is attached.
    """
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset(dataset)
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")

    if loss_fn is None:
        def loss_fn(logits, idx):
            return cross_entropy(logits, dataset.labels[idx])

    frozen = []
    if freeze_embeddings:
        for name in ("tok_emb", "pos_emb"):
            p = model.params[name]
            if p.requires_grad:
                frozen.append(p)
                p.requires_grad = False

    params = model.trainable_parameters(freeze_embeddings=freeze_embeddings)
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    log = TrainLog()

    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        step = 0
        for _ in range(config.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                ids, mask, _ = dataset.batch(idx)
                opt.zero_grad()
                loss = loss_fn(model.forward(ids, mask), idx)
                backward(loss)
                opt.step()
                step += 1
                if step_hook is not None:
                    step_hook(model, opt, step, total_steps, log)
                epoch_loss += loss.item() * len(idx)
            log.epoch_losses.append(epoch_loss / n)
            gc.collect()
    finally:
        for p in frozen:
            p.requires_grad = True
        if gc_was_enabled:
            gc.enable()
    log.steps = step
    return log
