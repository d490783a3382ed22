"""Transformer sentence-pair classifier with head masks and prune masks.

A small pre-norm encoder: token + position embeddings, ``num_layers``
blocks of multi-head self-attention and a GELU feed-forward with residual
connections, a final layer norm, and a linear classification head on the
first-position (CLS) vector.  Every attention head output is multiplied
by a per-(layer, head) mask scalar before the output projection, and
every encoder weight matrix can carry a binary prune mask.  Embedding
tables never carry a prune mask.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .tensor import (
    Tensor,
    embedding,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
    transpose,
)

CHECKPOINT_MAGIC = b"RMCK"
CHECKPOINT_VERSION = 1

# encoder weight matrices eligible for magnitude pruning, per layer
MASKABLE_SUFFIXES = ("attn_q.w", "attn_k.w", "attn_v.w", "attn_out.w", "ffn_in.w", "ffn_out.w")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 32
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    num_classes: int = 2
    seed: int = 0

    def validate(self):
        for field in ("vocab_size", "max_seq_len", "embed_dim", "num_layers",
                      "num_heads", "ffn_dim", "num_classes"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        return self


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count (see docs/reference.md)."""
    d, f = config.embed_dim, config.ffn_dim
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return (config.vocab_size * d + config.max_seq_len * d
            + config.num_layers * per_layer + 2 * d
            + d * config.num_classes + config.num_classes)


class TransformerClassifier:
    """Encoder plus classification head; parameters live in a name->Tensor map."""

    def __init__(self, config: ModelConfig, params: dict, head_masks: list):
        self.config = config
        self.params = params
        self.head_masks = head_masks  # one float array of shape (num_heads,) per layer

    # -- parameter access ----------------------------------------------

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def trainable_parameters(self, freeze_embeddings=False):
        skip = {"tok_emb", "pos_emb"} if freeze_embeddings else set()
        return [p for name, p in self.params.items() if name not in skip]

    def maskable_names(self):
        return [f"layer{i}.{suffix}"
                for i in range(self.config.num_layers)
                for suffix in MASKABLE_SUFFIXES]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "TransformerClassifier":
        params = {}
        for name, p in self.params.items():
            q = Tensor(p.data.copy(), requires_grad=p.requires_grad)
            if p.mask is not None:
                q.mask = p.mask.copy()
            params[name] = q
        return TransformerClassifier(self.config, params,
                                     [m.copy() for m in self.head_masks])

    # -- forward ---------------------------------------------------------

    def forward(self, token_ids, attention_mask, xi_override=None) -> Tensor:
        """Logits for a batch of padded token-id rows.

        ``attention_mask`` is 1.0 on real tokens, 0.0 on padding.  When
        ``xi_override`` (one Tensor per layer, broadcastable against the
        per-head context) is given it replaces the stored head masks,
        which is how head sensitivities are probed.
        """
        ids = np.asarray(token_ids)
        batch, seq = ids.shape
        cfg = self.config
        if seq > cfg.max_seq_len:
            raise ContractError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        d, heads = cfg.embed_dim, cfg.num_heads
        head_dim = d // heads

        mask = np.asarray(attention_mask, dtype=np.float64)
        attn_bias = Tensor(((mask - 1.0) * 1e9).reshape(batch, 1, 1, seq))

        x = embedding(self.params["tok_emb"], ids) + self.params["pos_emb"][0:seq]
        # flatten (batch, seq) so every weight matmul is a single 2-D GEMM
        x = x.reshape(batch * seq, d)
        for layer in range(cfg.num_layers):
            p = lambda s: self.params[f"layer{layer}.{s}"]

            def project(src, which):
                y = matmul(src, self._masked(p(f"{which}.w"))) + p(f"{which}.b")
                return transpose(y.reshape(batch, seq, heads, head_dim), (0, 2, 1, 3))

            normed = layer_norm(x, p("ln1.g"), p("ln1.b"))
            q = project(normed, "attn_q")
            k = project(normed, "attn_k")
            v = project(normed, "attn_v")
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
            attn = softmax_rows(scores + attn_bias)
            ctx = matmul(attn, v)

            if xi_override is not None:
                ctx = ctx * xi_override[layer]
            else:
                xi = self.head_masks[layer]
                if not np.all(xi == 1.0):
                    ctx = ctx * Tensor(xi.reshape(heads, 1, 1))

            merged = transpose(ctx, (0, 2, 1, 3)).reshape(batch * seq, d)
            x = x + (matmul(merged, self._masked(p("attn_out.w"))) + p("attn_out.b"))

            normed = layer_norm(x, p("ln2.g"), p("ln2.b"))
            h = gelu(matmul(normed, self._masked(p("ffn_in.w"))) + p("ffn_in.b"))
            x = x + (matmul(h, self._masked(p("ffn_out.w"))) + p("ffn_out.b"))

        x = layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])
        pooled = x.reshape(batch, seq, d)[:, 0, :]
        return matmul(pooled, self.params["classifier.w"]) + self.params["classifier.b"]

    @staticmethod
    def _masked(w: Tensor) -> Tensor:
        if w.mask is not None and not w.mask.all():
            return w * Tensor(w.mask)
        return w


def init_model(config: ModelConfig) -> TransformerClassifier:
    """Seeded deterministic initialization: scaled-uniform weights, zero
    biases, unit layer-norm gains, all head masks 1, no prune masks."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, f = config.embed_dim, config.ffn_dim

    def uniform(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                      requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "tok_emb": uniform(config.vocab_size, d),
        "pos_emb": uniform(config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        prefix = f"layer{i}."
        for proj in ("attn_q", "attn_k", "attn_v", "attn_out"):
            params[prefix + proj + ".w"] = uniform(d, d)
            params[prefix + proj + ".b"] = zeros(d)
        params[prefix + "ln1.g"] = ones(d)
        params[prefix + "ln1.b"] = zeros(d)
        params[prefix + "ffn_in.w"] = uniform(d, f)
        params[prefix + "ffn_in.b"] = zeros(f)
        params[prefix + "ffn_out.w"] = uniform(f, d)
        params[prefix + "ffn_out.b"] = zeros(d)
        params[prefix + "ln2.g"] = ones(d)
        params[prefix + "ln2.b"] = zeros(d)
    params["final_ln.g"] = ones(d)
    params["final_ln.b"] = zeros(d)
    params["classifier.w"] = uniform(d, config.num_classes)
    params["classifier.b"] = zeros(config.num_classes)

    head_masks = [np.ones(config.num_heads) for _ in range(config.num_layers)]
    return TransformerClassifier(config, params, head_masks)


def truncate_student(model: TransformerClassifier, keep_layers: int) -> TransformerClassifier:
    """New model keeping the first ``keep_layers`` encoder layers and copies
    of the embeddings and classifier."""
    if keep_layers <= 0:
        raise ConfigError(f"keep_layers must be positive, got {keep_layers}")
    if keep_layers > model.config.num_layers:
        raise ConfigError(f"keep_layers {keep_layers} exceeds model depth "
                          f"{model.config.num_layers}")
    config = replace(model.config, num_layers=keep_layers)
    student = model.clone()
    kept = {name: p for name, p in student.params.items()
            if not name.startswith("layer")
            or int(name.split(".")[0][len("layer"):]) < keep_layers}
    return TransformerClassifier(config, kept, student.head_masks[:keep_layers])


def sparsity(model: TransformerClassifier) -> float:
    """Fraction of maskable encoder weights whose prune mask is 0."""
    zeros = 0
    total = 0
    for name in model.maskable_names():
        p = model.params[name]
        total += p.data.size
        if p.mask is not None:
            zeros += int((p.mask == 0).sum())
    return zeros / total if total else 0.0


# -- checkpoint persistence ---------------------------------------------

_CONFIG_FIELDS = ("vocab_size", "max_seq_len", "embed_dim", "num_layers",
                  "num_heads", "ffn_dim", "num_classes", "seed")


def config_digest(config: ModelConfig) -> str:
    text = ",".join(f"{k}={getattr(config, k)}" for k in _CONFIG_FIELDS)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _write_entry(fh, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    for extent in array.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError("truncated checkpoint file")
    return buf


def _read_entry(fh):
    head = fh.read(4)
    if not head:
        return None
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(model: TransformerClassifier, path, extra=None):
    """Binary checkpoint: magic, version, config text block, tensor entries.

    Prune masks are stored as ``mask:<param>`` entries and head masks as
    ``headmask:layer<i>``; the round trip is bit-exact.
    """
    lines = [f"{k}={getattr(model.config, k)}" for k in _CONFIG_FIELDS]
    for key in sorted(extra or {}):
        lines.append(f"meta.{key}={extra[key]}")
    block = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name, p in model.params.items():
            _write_entry(fh, name, p.data)
            if p.mask is not None:
                _write_entry(fh, "mask:" + name, p.mask)
        for i, xi in enumerate(model.head_masks):
            _write_entry(fh, f"headmask:layer{i}", xi)


def load_checkpoint(path):
    """Load a checkpoint; returns (model, metadata) where metadata holds the
    non-config keys from the text block."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        (block_len,) = struct.unpack("<I", _read_exact(fh, 4))
        block = _read_exact(fh, block_len).decode("utf-8")
        entries = {}
        while True:
            entry = _read_entry(fh)
            if entry is None:
                break
            entries[entry[0]] = entry[1]

    fields = {}
    metadata = {}
    for line in block.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            metadata[key[len("meta."):]] = value
        elif key in _CONFIG_FIELDS:
            fields[key] = int(value)
    missing = set(_CONFIG_FIELDS) - set(fields)
    if missing:
        raise ParseError(f"{path}: config block missing {sorted(missing)}")

    config = ModelConfig(**fields)
    model = init_model(config)
    for name, p in model.params.items():
        if name not in entries:
            raise ParseError(f"{path}: missing tensor entry {name}")
        if entries[name].shape != p.data.shape:
            raise ParseError(f"{path}: shape mismatch for {name}")
        p.data = entries[name].copy()
        mask_key = "mask:" + name
        if mask_key in entries:
            p.mask = entries[mask_key].copy()
    for i in range(config.num_layers):
        key = f"headmask:layer{i}"
        if key in entries:
            model.head_masks[i] = entries[key].copy()
    return model, metadata
