"""Alignment training: fit the adapter to map student embeddings onto
teacher embeddings under mean squared error, with both encoders frozen.

Phase 1 runs on a task-independent corpus for a step budget at the higher
default learning rate; phase 2 continues on the task's own sequences for an
epoch budget at a reduced rate, warm-starting from the phase-1 adapter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import AlignmentAdapter
from .autodiff import Adam, Tape, Tensor, add, backward, mse_loss, scale
from .checkpoint import weights_digest
from .encoder import Encoder
from .errors import ConfigError, DataError, FrozenContractError, NumericsError

PHASE_TASK_INDEPENDENT = "task_independent"
PHASE_TASK_SPECIFIC = "task_specific"

_PHASE_DEFAULTS = {
    # phase -> (learning rate, budget meaning, default budget)
    PHASE_TASK_INDEPENDENT: (5e-4, "steps", 1000),
    PHASE_TASK_SPECIFIC: (1e-4, "epochs", 10),
}


@dataclass
class AlignmentPhaseConfig:
    phase: str
    learning_rate: float | None = None
    budget: int | None = None  # steps for phase 1, epochs for phase 2
    batch_size: int = 8
    seed: int = 0
    holdout_fraction: float = 0.1
    # Frozen encoders make cached outputs bit-identical to recomputation;
    # off by default, recompute-per-batch is the reference path.
    cache_encoder_outputs: bool = False

    def __post_init__(self):
        if self.phase not in _PHASE_DEFAULTS:
            raise ConfigError(f"unknown alignment phase {self.phase!r}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 < self.holdout_fraction < 0.5):
            raise ConfigError("holdout_fraction must be in (0, 0.5)")

    @property
    def resolved_lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None \
            else _PHASE_DEFAULTS[self.phase][0]

    @property
    def resolved_budget(self) -> int:
        b = self.budget if self.budget is not None else _PHASE_DEFAULTS[self.phase][2]
        if b < 0:
            raise ConfigError("budget must be non-negative")
        return b


@dataclass
class AlignmentRunRecord:
    phase: str
    initial_val_mse: float
    entries: list = field(default_factory=list)  # (index, train_mse, val_mse, seconds)
    config: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def final_val_mse(self) -> float:
        return self.entries[-1][2] if self.entries else self.initial_val_mse

    def to_log_text(self) -> str:
        lines = [
            f"# phase={self.phase} initial_val_mse={self.initial_val_mse!r} "
            "columns=index,train_mse,val_mse,elapsed_s"
        ]
        for idx, train, val, secs in self.entries:
            lines.append(f"{idx}\t{train!r}\t{val!r}\t{secs:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_log_text(cls, text: str) -> "AlignmentRunRecord":
        lines = [l for l in text.splitlines() if l]
        head = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split(" ")
                    if "=" in kv)
        rec = cls(phase=head["phase"], initial_val_mse=float(head["initial_val_mse"]))
        for line in lines[1:]:
            idx, train, val, secs = line.split("\t")
            rec.entries.append((int(idx), float(train), float(val), float(secs)))
        return rec


def _check_frozen(*encoders: Encoder):
    for enc in encoders:
        for name, p in enc.named_parameters():
            if p.trainable:
                raise FrozenContractError(
                    f"encoder parameter {name} is trainable during alignment"
                )


def _check_dims(adapter: AlignmentAdapter, student: Encoder, teacher: Encoder):
    if adapter.config.d_c != student.config.model_dim:
        raise ConfigError(
            f"adapter d_c {adapter.config.d_c} != student dim {student.config.model_dim}"
        )
    if adapter.config.d_l != teacher.config.model_dim:
        raise ConfigError(
            f"adapter d_l {adapter.config.d_l} != teacher dim {teacher.config.model_dim}"
        )


def encode_pairs(student: Encoder, teacher: Encoder, sequences):
    """Frozen-encoder embedding pairs (R_C, R_L) for each sequence."""
    pairs = []
    for seq in sequences:
        rc = student.encode(seq).data
        rl = teacher.encode(seq).data
        pairs.append((rc, rl))
    return pairs


def _mean_adapter_mse(adapter: AlignmentAdapter, pairs) -> float:
    total = 0.0
    for rc, rl in pairs:
        total += mse_loss(adapter.forward(Tensor(rc)), rl).item()
    return total / len(pairs)


def eval_alignment_mse(adapter: AlignmentAdapter, student: Encoder,
                       teacher: Encoder, corpus) -> float:
    """Mean per-sequence adapter MSE against teacher embeddings. Pure."""
    if not corpus:
        raise DataError("eval_alignment_mse: empty corpus")
    _check_dims(adapter, student, teacher)
    return _mean_adapter_mse(adapter, encode_pairs(student, teacher, corpus))


def align_train(adapter: AlignmentAdapter, student: Encoder, teacher: Encoder,
                corpus, cfg: AlignmentPhaseConfig):
    """Train the adapter to minimize embedding MSE; encoders stay untouched.

    A seed-determined slice of the corpus is held out; its validation MSE is
    recorded at every step (phase 1) or epoch (phase 2). Returns the mutated
    adapter and an AlignmentRunRecord.
    """
    if len(corpus) < 2:
        raise DataError("alignment corpus needs at least 2 sequences")
    _check_dims(adapter, student, teacher)
    _check_frozen(student, teacher)
    digests = (weights_digest(student), weights_digest(teacher))

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(corpus))
    n_val = max(1, round(cfg.holdout_fraction * len(corpus)))
    val_seqs = [corpus[i] for i in order[:n_val]]
    train_seqs = [corpus[i] for i in order[n_val:]]

    # Held-out pairs are always cached: encoders are frozen, so this is
    # bit-identical to recomputation and keeps the per-step trace cheap.
    val_pairs = encode_pairs(student, teacher, val_seqs)
    train_pairs = encode_pairs(student, teacher, train_seqs) \
        if cfg.cache_encoder_outputs else None

    record = AlignmentRunRecord(
        phase=cfg.phase,
        initial_val_mse=_mean_adapter_mse(adapter, val_pairs),
        config={
            "phase": cfg.phase,
            "learning_rate": cfg.resolved_lr,
            "budget": cfg.resolved_budget,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
        },
    )
    if not np.isfinite(record.initial_val_mse):
        raise NumericsError("alignment validation MSE is not finite at start")

    opt = Adam(adapter.parameters(), lr=cfg.resolved_lr)
    started = time.monotonic()

    def run_batch(indices) -> float:
        opt.zero_grad()
        total = None
        with Tape() as tape:
            for i in indices:
                if train_pairs is not None:
                    rc, rl = train_pairs[i]
                else:
                    rc = student.encode(train_seqs[i]).data
                    rl = teacher.encode(train_seqs[i]).data
                loss = mse_loss(adapter.forward(Tensor(rc)), rl)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / len(indices))
        backward(total, tape)
        opt.step()
        return total.item()

    def log_point(index: int, train_mse: float):
        val = _mean_adapter_mse(adapter, val_pairs)
        if not (np.isfinite(train_mse) and np.isfinite(val)):
            raise NumericsError(
                f"alignment diverged at {cfg.phase} index {index}: "
                f"train={train_mse} val={val}"
            )
        record.entries.append((index, train_mse, val, time.monotonic() - started))

    budget = cfg.resolved_budget
    if cfg.phase == PHASE_TASK_INDEPENDENT:
        for step in range(budget):
            idx = rng.integers(len(train_seqs), size=cfg.batch_size)
            log_point(step, run_batch(idx))
    else:
        for epoch in range(budget):
            perm = rng.permutation(len(train_seqs))
            epoch_losses = [
                run_batch(perm[lo : lo + cfg.batch_size])
                for lo in range(0, len(perm), cfg.batch_size)
            ]
            log_point(epoch, float(np.mean(epoch_losses)))

    record.wall_seconds = time.monotonic() - started
    if (weights_digest(student), weights_digest(teacher)) != digests:
        raise FrozenContractError("encoder weights changed during alignment")
    return adapter, record
