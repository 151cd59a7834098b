"""Toy pre-norm transformer encoders: the teacher / student pair factory.

Encoders here are deliberately small (a few layers, tens of dimensions) but
structurally standard: learned token + position embeddings, multi-head
softmax attention, GeLU feed-forward blocks, pre-norm residuals, and a final
layer norm. Students are produced either by keeping a prefix of the teacher's
layers (same width) or by training an independent narrower encoder on the
same corpus. Low-rank adaptation can be attached to the attention
projections of a frozen encoder.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    Adam,
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    concat_cols,
    cross_entropy,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)
from .errors import ConfigError, DataError

INIT_STD = 0.02

# Weight matrices of one block, in initialization / serialization order.
_LAYER_KEYS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "w1", "b1", "w2", "b2",
)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    model_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_len: int
    seed: int = 0

    def __post_init__(self):
        if min(self.num_layers, self.model_dim, self.num_heads, self.ffn_dim,
               self.vocab_size, self.max_len) < 1:
            raise ConfigError("encoder config fields must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.rank < 1 or self.alpha <= 0:
            raise ConfigError("lora rank and alpha must be positive")
        bad = set(self.targets) - {"q", "v"}
        if bad or not self.targets:
            raise ConfigError(f"lora targets must be a non-empty subset of {{q, v}}, got {self.targets}")


class Encoder:
    """Pre-norm transformer encoder over token-id sequences."""

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        d, f = config.model_dim, config.ffn_dim

        def normal(shape, name):
            return Parameter(
                (INIT_STD * rng.standard_normal(shape)).astype(dtype), name=name
            )

        def const(value, size, name):
            return Parameter(np.full(size, value, dtype=dtype), name=name)

        self.tok_emb = normal((config.vocab_size, d), "tok_emb")
        self.pos_emb = normal((config.max_len, d), "pos_emb")
        self.layers = []
        for i in range(config.num_layers):
            pre = f"layer{i}."
            layer = {
                "ln1_g": const(1.0, d, pre + "ln1_g"),
                "ln1_b": const(0.0, d, pre + "ln1_b"),
                "wq": normal((d, d), pre + "wq"),
                "bq": const(0.0, d, pre + "bq"),
                "wk": normal((d, d), pre + "wk"),
                "bk": const(0.0, d, pre + "bk"),
                "wv": normal((d, d), pre + "wv"),
                "bv": const(0.0, d, pre + "bv"),
                "wo": normal((d, d), pre + "wo"),
                "bo": const(0.0, d, pre + "bo"),
                "ln2_g": const(1.0, d, pre + "ln2_g"),
                "ln2_b": const(0.0, d, pre + "ln2_b"),
                "w1": normal((d, f), pre + "w1"),
                "b1": const(0.0, f, pre + "b1"),
                "w2": normal((f, d), pre + "w2"),
                "b2": const(0.0, d, pre + "b2"),
            }
            self.layers.append(layer)
        self.final_g = const(1.0, d, "final_g")
        self.final_b = const(0.0, d, "final_b")
        # (layer_index, "q"|"v") -> (A, B); populated by attach_lora
        self.lora: dict[tuple[int, str], tuple[Parameter, Parameter]] = {}
        self.lora_config: LoraConfig | None = None

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for layer in self.layers:
            for key in _LAYER_KEYS:
                yield layer[key].name, layer[key]
        yield "final_g", self.final_g
        yield "final_b", self.final_b
        for (i, t) in sorted(self.lora):
            a, b = self.lora[(i, t)]
            yield a.name, a
            yield b.name, b

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def clone(self) -> "Encoder":
        dup = copy.deepcopy(self)
        for p in dup.parameters():
            p.grad = None
        return dup

    # -- forward ------------------------------------------------------------

    def _project(self, h: Tensor, layer_idx: int, which: str) -> Tensor:
        layer = self.layers[layer_idx]
        out = add(matmul(h, layer["w" + which]), layer["b" + which])
        pair = self.lora.get((layer_idx, which))
        if pair is not None:
            a, b = pair
            out = add(out, scale(matmul(matmul(h, b), a),
                                 self.lora_config.alpha / self.lora_config.rank))
        return out

    def _attention(self, h: Tensor, layer_idx: int, attn_sink) -> Tensor:
        cfg = self.config
        dh = cfg.model_dim // cfg.num_heads
        layer = self.layers[layer_idx]
        q = self._project(h, layer_idx, "q")
        k = add(matmul(h, layer["wk"]), layer["bk"])
        v = self._project(h, layer_idx, "v")
        heads = []
        for head in range(cfg.num_heads):
            lo, hi = head * dh, (head + 1) * dh
            qi = slice_cols(q, lo, hi)
            ki = slice_cols(k, lo, hi)
            vi = slice_cols(v, lo, hi)
            probs = softmax_rows(scale(matmul(qi, transpose(ki)), 1.0 / math.sqrt(dh)))
            if attn_sink is not None:
                attn_sink.append(np.array(probs.data))
            heads.append(matmul(probs, vi))
        return add(matmul(concat_cols(heads), layer["wo"]), layer["bo"])

    def encode(self, ids, attn_sink: list | None = None) -> Tensor:
        """Final-layer hidden states, one row per token.

        ``attn_sink``, when given a list, receives each head's attention
        probability matrix (debug instrumentation; rows sum to one).
        """
        idx = np.asarray(ids, dtype=np.int64)
        m = idx.shape[0] if idx.ndim == 1 else 0
        if idx.ndim != 1 or m < 1:
            raise DataError("encode expects a non-empty flat id sequence")
        if m > self.config.max_len:
            raise DataError(f"sequence length {m} exceeds max_len {self.config.max_len}")
        if idx.min() < 0 or idx.max() >= self.config.vocab_size:
            raise DataError("token id out of range")

        x = add(
            embedding_lookup(self.tok_emb, idx),
            embedding_lookup(self.pos_emb, np.arange(m)),
        )
        for i, layer in enumerate(self.layers):
            h = layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            x = add(x, self._attention(h, i, attn_sink))
            h = layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            ff = add(matmul(gelu(add(matmul(h, layer["w1"]), layer["b1"])), layer["w2"]),
                     layer["b2"])
            x = add(x, ff)
        return layer_norm(x, self.final_g, self.final_b)


def init_encoder(config: EncoderConfig, dtype=np.float32) -> Encoder:
    return Encoder(config, dtype=dtype)


def param_count(module) -> int:
    """Total scalar parameters (trainable and frozen) of any module."""
    return sum(p.data.size for _, p in module.named_parameters())


def mask_token_id(vocab_size: int) -> int:
    return vocab_size - 1


def mlm_pretrain(enc: Encoder, corpus, mask_rate: float, steps: int, lr: float,
                 seed: int = 0, batch_size: int = 4):
    """Masked-token pretraining with a weight-tied output head.

    Each step masks a random subset of ``batch_size`` corpus sequences (at
    least one position per sequence), predicts the original ids through
    ``hidden @ tok_emb.T``, and takes one Adam step on the mean cross
    entropy. The loss covers every position, not only the masked ones: the
    visible positions anchor token identity in the final representations
    (at this scale a masked-only objective lets them collapse to a
    sequence-wide average), while the masked positions supply the contextual
    signal. Returns the (mutated) encoder and the per-step loss curve.
    """
    if not corpus:
        raise DataError("mlm_pretrain: empty corpus")
    if not (0.0 < mask_rate < 1.0):
        raise ConfigError(f"mask_rate must be in (0,1), got {mask_rate}")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    mask_id = mask_token_id(enc.config.vocab_size)
    rng = np.random.default_rng(seed)
    opt = Adam(enc.parameters(), lr=lr)
    losses: list[float] = []
    for _ in range(steps):
        opt.zero_grad()
        total = None
        with Tape() as tape:
            for _ in range(batch_size):
                seq = np.asarray(corpus[rng.integers(len(corpus))], dtype=np.int64)
                masked = rng.random(seq.shape[0]) < mask_rate
                if not masked.any():
                    masked[rng.integers(seq.shape[0])] = True
                hidden = enc.encode(np.where(masked, mask_id, seq))
                logits = matmul(hidden, transpose(enc.tok_emb))
                loss = cross_entropy(logits, seq)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / batch_size)
        backward(total, tape)
        opt.step()
        losses.append(total.item())
    return enc, losses


def derive_pruned_student(teacher: Encoder, keep_layers: int) -> Encoder:
    """Student sharing the teacher's width: embeddings plus the first
    ``keep_layers`` blocks, deep-copied so later training never touches the
    teacher. The teacher's final layer norm is copied as well."""
    total = teacher.config.num_layers
    if not (1 <= keep_layers < total):
        raise ConfigError(
            f"keep_layers must be in [1, {total - 1}], got {keep_layers}"
        )
    student = Encoder(replace(teacher.config, num_layers=keep_layers),
                      dtype=teacher.dtype)
    student.tok_emb.data = np.array(teacher.tok_emb.data)
    student.pos_emb.data = np.array(teacher.pos_emb.data)
    for dst, src in zip(student.layers, teacher.layers[:keep_layers]):
        for key in _LAYER_KEYS:
            dst[key].data = np.array(src[key].data)
    student.final_g.data = np.array(teacher.final_g.data)
    student.final_b.data = np.array(teacher.final_b.data)
    return student


def attach_lora(enc: Encoder, cfg: LoraConfig, seed: int = 0) -> Encoder:
    """Add low-rank trainable deltas to the targeted attention projections.

    Each targeted weight W acts as W + (alpha/rank) * B @ A with A drawn from
    a seeded normal and B zero, so attaching changes nothing until B trains.
    All base encoder weights are frozen; only the A/B pairs stay trainable.
    """
    d = enc.config.model_dim
    if cfg.rank >= d:
        raise ConfigError(f"lora rank {cfg.rank} must be < model_dim {d}")
    if enc.lora:
        raise ConfigError("lora already attached")
    rng = np.random.default_rng(seed)
    enc.set_trainable(False)
    for i in range(enc.config.num_layers):
        for t in cfg.targets:
            a = Parameter(
                (INIT_STD * rng.standard_normal((cfg.rank, d))).astype(enc.dtype),
                name=f"layer{i}.lora_{t}.a",
            )
            b = Parameter(np.zeros((d, cfg.rank), dtype=enc.dtype),
                          name=f"layer{i}.lora_{t}.b")
            enc.lora[(i, t)] = (a, b)
    enc.lora_config = cfg
    return enc


def lora_parameters(enc: Encoder):
    out = []
    for key in sorted(enc.lora):
        out.extend(enc.lora[key])
    return out
