"""Synthetic sentence-pair task with an injected shortcut marker.

The semantic rule: label is 1 iff the hypothesis content tokens appear as
a contiguous, order-preserved run inside the premise.  Solving the rule
needs cross-sequence attention; negatives are near misses (a shuffled or
one-token-corrupted premise window), so token overlap alone is useless.

The shortcut: every hypothesis ends with one of two marker tokens.  With
probability ``rho`` the marker agrees with the label (train/dev); the
adversarial split uses ``rho_adv`` (default 0: the marker always lies).
An example is tagged hard when its marker disagrees with the label, which
is the construction-time ground truth for easy/hard analysis.

Splits serialize as line-delimited UTF-8, one record per line with
tab-separated fields ``premise,hypothesis,label,marker,hard`` where the
id lists are comma-separated (see docs/reference.md).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GenerationError, ParseError

PAD, CLS, SEP, MARKER0, MARKER1 = 0, 1, 2, 3, 4
NUM_RESERVED = 5
NUM_CLASSES = 2


@dataclass(frozen=True)
class LabeledPairExample:
    premise: tuple
    hypothesis: tuple  # includes the trailing marker token when present
    label: int
    marker: Optional[int]  # class implied by the marker token, None if absent
    hard: bool


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_train: int = 20000
    n_dev: int = 4000
    n_adv: int = 4000
    rho: float = 0.9
    rho_adv: float = 0.0
    premise_len: tuple = (3, 8)
    hypothesis_len: tuple = (2, 2)
    vocab_size: int = 14
    shuffle_negative_frac: float = 0.0
    rule: str = "substring"

    def validate(self):
        if self.rule != "substring":
            raise GenerationError(f"unknown task rule {self.rule!r}")
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.rho_adv <= 1.0):
            raise GenerationError("marker correlations must lie in [0, 1]")
        if not (0.0 <= self.shuffle_negative_frac <= 1.0):
            raise GenerationError("shuffle_negative_frac must lie in [0, 1]")
        p_lo, p_hi = self.premise_len
        h_lo, h_hi = self.hypothesis_len
        if not (1 <= p_lo <= p_hi and 1 <= h_lo <= h_hi):
            raise GenerationError("length ranges must be ordered and positive")
        if h_lo > p_lo:
            raise GenerationError(f"shortest premise ({p_lo}) cannot contain the "
                                  f"shortest hypothesis ({h_lo})")
        if self.vocab_size < NUM_RESERVED + 2:
            raise GenerationError(f"vocab_size {self.vocab_size} leaves fewer than "
                                  f"2 content tokens")
        return self


def contains_run(premise, window) -> bool:
    """True iff ``window`` occurs contiguously and in order inside ``premise``."""
    n, m = len(premise), len(window)
    for start in range(n - m + 1):
        if tuple(premise[start:start + m]) == tuple(window):
            return True
    return False


def _make_example(rng, spec, positive, agree_prob):
    p_lo, p_hi = spec.premise_len
    h_lo, h_hi = spec.hypothesis_len
    content = np.arange(NUM_RESERVED, spec.vocab_size)

    for _ in range(500):
        plen = int(rng.integers(p_lo, p_hi + 1))
        premise = tuple(int(t) for t in rng.choice(content, size=plen))
        hlen = int(rng.integers(h_lo, min(h_hi, plen) + 1))
        start = int(rng.integers(0, plen - hlen + 1))
        window = list(premise[start:start + hlen])

        if positive:
            hypothesis = tuple(window)
            label = 1
        else:
            # two negative families: order-violating windows keep every
            # token present (hard), token replacement uses a token absent
            # from the premise (solvable by content matching alone)
            if hlen >= 2 and rng.random() < spec.shuffle_negative_frac:
                order = rng.permutation(hlen)
                hypothesis = tuple(window[i] for i in order)
            else:
                absent = np.setdiff1d(content, np.asarray(premise))
                if absent.size == 0:
                    continue  # premise covers the whole content vocab; redraw
                pos = int(rng.integers(0, hlen))
                window[pos] = int(rng.choice(absent))
                hypothesis = tuple(window)
            label = 0
            if contains_run(premise, hypothesis):
                continue  # corruption failed to break the rule; redraw

        implied = label if rng.random() < agree_prob else 1 - label
        marker = MARKER1 if implied == 1 else MARKER0
        return LabeledPairExample(premise=premise,
                                  hypothesis=hypothesis + (marker,),
                                  label=label,
                                  marker=implied,
                                  hard=implied != label)
    raise GenerationError("could not construct a negative example; "
                          "length/vocab ranges leave no room for corruption")


def _generate_split(seed_seq, spec, size, agree_prob):
    rng = np.random.default_rng(seed_seq)
    n_pos = size // 2
    examples = [_make_example(rng, spec, i < n_pos, agree_prob) for i in range(size)]
    order = rng.permutation(size)
    return [examples[i] for i in order]


def generate(spec: DatasetSpec) -> dict:
    """Deterministically build {train, dev, adversarial} example lists."""
    spec.validate()
    train_ss, dev_ss, adv_ss = np.random.SeedSequence(spec.seed).spawn(3)
    return {
        "train": _generate_split(train_ss, spec, spec.n_train, spec.rho),
        "dev": _generate_split(dev_ss, spec, spec.n_dev, spec.rho),
        "adversarial": _generate_split(adv_ss, spec, spec.n_adv, spec.rho_adv),
    }


def partition_by_flag(examples):
    """Split into (easy, hard) by the construction-time hard flag."""
    easy = [ex for ex in examples if not ex.hard]
    hard = [ex for ex in examples if ex.hard]
    return easy, hard


def strip_marker(example: LabeledPairExample) -> tuple:
    """Hypothesis content tokens without the trailing marker."""
    hyp = example.hypothesis
    if hyp and hyp[-1] in (MARKER0, MARKER1):
        return hyp[:-1]
    return hyp


# -- persistence ---------------------------------------------------------


def write_split(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            marker = "-" if ex.marker is None else str(ex.marker)
            fh.write("{}\t{}\t{}\t{}\t{}\n".format(
                ",".join(map(str, ex.premise)),
                ",".join(map(str, ex.hypothesis)),
                ex.label, marker, int(ex.hard)))


def read_split(path, vocab_size=None, num_classes=NUM_CLASSES):
    """Parse a split file; malformed lines raise ParseError with the line number."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 tab-separated fields, "
                                 f"got {len(parts)}")
            try:
                premise = tuple(int(t) for t in parts[0].split(",") if t != "")
                hypothesis = tuple(int(t) for t in parts[1].split(",") if t != "")
                label = int(parts[2])
                marker = None if parts[3] == "-" else int(parts[3])
                hard = bool(int(parts[4]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not (0 <= label < num_classes):
                raise ParseError(f"{path}:{lineno}: label {label} outside "
                                 f"[0, {num_classes})")
            if vocab_size is not None:
                ids = premise + hypothesis
                if ids and max(ids) >= vocab_size:
                    raise ParseError(f"{path}:{lineno}: token id {max(ids)} outside "
                                     f"vocab of size {vocab_size}")
            examples.append(LabeledPairExample(premise, hypothesis, label, marker, hard))
    return examples


# -- batching ------------------------------------------------------------


def encode_example(example):
    return (CLS,) + example.premise + (SEP,) + example.hypothesis + (SEP,)


def encode_batch(examples, pad_to=None):
    """Token-id matrix, attention mask, and label vector for a batch.

    Rows are padded with PAD to the longest row (or ``pad_to``).
    """
    rows = [encode_example(ex) for ex in examples]
    width = max(len(r) for r in rows)
    if pad_to is not None:
        width = max(width, pad_to)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
        mask[i, :len(row)] = 1.0
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return ids, mask, labels
