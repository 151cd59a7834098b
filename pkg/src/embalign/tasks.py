"""Synthetic token-level tasks, task heads, and evaluation metrics.

Two task families stand in for real sequence-labeling corpora:

* tagging: a hidden Markov chain over K tag classes emits tokens from
  per-class vocabulary bands. Bands overlap by a configurable fraction, so
  single tokens are ambiguous and neighbouring context carries signal.
* span QA: a question (a short token pattern) is planted verbatim inside a
  random context for answerable items and scrubbed from it otherwise; the
  model predicts the planted span or no-answer.

The last two vocabulary ids are reserved (separator, mask); generators only
emit tokens below them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json
import numpy as np

from .autodiff import Parameter, Tensor, matmul
from .errors import ConfigError, DataError, ShapeError

NUM_RESERVED_TOKENS = 2


def sep_token_id(vocab_size: int) -> int:
    return vocab_size - 2


def usable_vocab(vocab_size: int) -> int:
    n = vocab_size - NUM_RESERVED_TOKENS
    if n < 2:
        raise ConfigError(f"vocab_size {vocab_size} leaves no usable tokens")
    return n


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _emission_bands(usable: int, num_classes: int, overlap: float):
    """Per-class uniform emission bands over [0, usable), with the requested
    overlap fraction between neighbouring classes. Returns (starts, width)."""
    if not (0.0 <= overlap < 1.0):
        raise ConfigError(f"emission overlap must be in [0,1), got {overlap}")
    width = int(usable // (1.0 + (num_classes - 1) * (1.0 - overlap)))
    if width < 1:
        raise ConfigError("vocabulary too small for the requested class count")
    if num_classes == 1:
        return [0], width
    stride = (usable - width) // (num_classes - 1)
    if stride < 1:
        raise ConfigError("vocabulary too small for the requested overlap")
    starts = [k * stride for k in range(num_classes - 1)]
    starts.append(usable - width)
    return starts, width


def _emission_matrix(usable, num_classes, overlap):
    starts, width = _emission_bands(usable, num_classes, overlap)
    em = np.zeros((num_classes, usable))
    for k, s in enumerate(starts):
        em[k, s : s + width] = 1.0 / width
    return em


def _transition_matrix(num_classes, order, stay_prob):
    if order == "unigram":
        return np.full((num_classes, num_classes), 1.0 / num_classes)
    if order != "markov":
        raise ConfigError(f"order must be 'unigram' or 'markov', got {order!r}")
    if not (0.0 < stay_prob < 1.0):
        raise ConfigError(f"stay_prob must be in (0,1), got {stay_prob}")
    tr = np.full((num_classes, num_classes),
                 (1.0 - stay_prob) / max(num_classes - 1, 1))
    np.fill_diagonal(tr, stay_prob)
    return tr


def _sample_tagged_sequences(rng, emissions, transitions, num_sequences,
                             length_range):
    lo, hi = length_range
    if not (1 <= lo <= hi):
        raise ConfigError(f"bad length_range {length_range}")
    num_classes = emissions.shape[0]
    out = []
    for _ in range(num_sequences):
        m = int(rng.integers(lo, hi + 1))
        tags = np.empty(m, dtype=np.int64)
        tags[0] = rng.integers(num_classes)
        for i in range(1, m):
            tags[i] = rng.choice(num_classes, p=transitions[tags[i - 1]])
        ids = np.array(
            [rng.choice(emissions.shape[1], p=emissions[t]) for t in tags],
            dtype=np.int64,
        )
        out.append((ids.tolist(), tags.tolist()))
    return out


def _three_way_split(rng, items):
    """80/10/10 split by seeded shuffle."""
    order = rng.permutation(len(items))
    n_dev = max(1, len(items) // 10)
    n_test = max(1, len(items) // 10)
    n_train = len(items) - n_dev - n_test
    if n_train < 1:
        raise ConfigError("too few items to split")
    picked = [items[i] for i in order]
    return {
        "train": picked[:n_train],
        "dev": picked[n_train : n_train + n_dev],
        "test": picked[n_train + n_dev :],
    }


@dataclass
class TaggingItem:
    ids: list[int]
    labels: list[int]


@dataclass
class TaggingDataset:
    vocab_size: int
    num_classes: int
    class_names: list[str]
    splits: dict[str, list[TaggingItem]]
    seed: int
    params: dict = field(default_factory=dict)

    def items(self, split: str) -> list[TaggingItem]:
        return self.splits[split]


def gen_tagging_corpus(seed: int, vocab_size: int, num_classes: int,
                       num_sequences: int, length_range=(6, 12),
                       order: str = "markov", emission_overlap: float = 0.5,
                       stay_prob: float = 0.65) -> TaggingDataset:
    """Token sequences with per-token class labels from a hidden Markov chain."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if num_sequences < 10:
        raise ConfigError("need at least 10 sequences for a 80/10/10 split")
    usable = usable_vocab(vocab_size)
    emissions = _emission_matrix(usable, num_classes, emission_overlap)
    transitions = _transition_matrix(num_classes, order, stay_prob)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        raw = _sample_tagged_sequences(rng, emissions, transitions,
                                       num_sequences, length_range)
        items = [TaggingItem(ids, labels) for ids, labels in raw]
        splits = _three_way_split(rng, items)
        seen = {l for it in splits["train"] for l in it.labels}
        if seen == set(range(num_classes)):
            break
    else:
        raise ConfigError("could not draw a train split covering every class")
    return TaggingDataset(
        vocab_size=vocab_size,
        num_classes=num_classes,
        class_names=[f"C{k}" for k in range(num_classes)],
        splits=splits,
        seed=seed,
        params={
            "order": order,
            "emission_overlap": emission_overlap,
            "stay_prob": stay_prob,
            "length_range": list(length_range),
            "emissions": emissions.tolist(),
            "transitions": transitions.tolist(),
        },
    )


def gen_token_corpus(seed: int, vocab_size: int, num_sequences: int,
                     length_range=(8, 16), num_states: int = 10,
                     emission_overlap: float = 0.0,
                     stay_prob: float = 0.9) -> list[list[int]]:
    """Unlabelled Markov-structured token sequences (task-independent text)."""
    usable = usable_vocab(vocab_size)
    emissions = _emission_matrix(usable, num_states, emission_overlap)
    transitions = _transition_matrix(num_states, "markov", stay_prob)
    rng = np.random.default_rng(seed)
    raw = _sample_tagged_sequences(rng, emissions, transitions, num_sequences,
                                   length_range)
    return [ids for ids, _ in raw]


@dataclass
class SpanQAItem:
    question: list[int]
    context: list[int]
    span: tuple[int, int] | None  # inclusive [start, end] over context positions

    def __post_init__(self):
        if self.span is not None:
            s, e = self.span
            if not (0 <= s <= e < len(self.context)):
                raise DataError(f"span {self.span} outside context of length {len(self.context)}")


@dataclass
class SpanQADataset:
    vocab_size: int
    splits: dict[str, list[SpanQAItem]]
    seed: int
    params: dict = field(default_factory=dict)

    def items(self, split: str) -> list[SpanQAItem]:
        return self.splits[split]


def _find_pattern(context, pattern, skip_start=None):
    """Start index of the first pattern occurrence, ignoring skip_start."""
    q = len(pattern)
    for p in range(len(context) - q + 1):
        if p == skip_start:
            continue
        if context[p : p + q] == pattern:
            return p
    return None


def _scrub_occurrence(rng, context, usable, pos, pattern_len, keep_range):
    """Break the occurrence at pos by rerandomizing one of its tokens that
    lies outside the protected planted span."""
    for j in range(pattern_len):
        idx = pos + j
        if keep_range is None or not (keep_range[0] <= idx <= keep_range[1]):
            context[idx] = int(rng.integers(usable))
            return
    raise AssertionError("occurrence fully inside protected span")  # pragma: no cover


def gen_spanqa_corpus(seed: int, vocab_size: int, num_items: int,
                      context_length_range=(16, 24),
                      answerable_fraction: float = 0.7,
                      question_len: int = 3) -> SpanQADataset:
    """Extractive span QA items: find the question pattern in the context.

    Answerable items contain the question token sequence exactly once, at the
    stored span; unanswerable items are guaranteed not to contain it.
    """
    if not (0.0 <= answerable_fraction <= 1.0):
        raise ConfigError(f"answerable_fraction must be in [0,1], got {answerable_fraction}")
    if num_items < 10:
        raise ConfigError("need at least 10 items for a 80/10/10 split")
    lo, hi = context_length_range
    if lo < question_len:
        raise ConfigError(
            f"context length {lo} too short for a {question_len}-token pattern"
        )
    usable = usable_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(num_items):
        question = [int(t) for t in rng.integers(usable, size=question_len)]
        ctx_len = int(rng.integers(lo, hi + 1))
        context = [int(t) for t in rng.integers(usable, size=ctx_len)]
        if rng.random() < answerable_fraction:
            start = int(rng.integers(ctx_len - question_len + 1))
            context[start : start + question_len] = question
            span = (start, start + question_len - 1)
        else:
            start, span = None, None
        for _ in range(1000):
            pos = _find_pattern(context, question, skip_start=start)
            if pos is None:
                break
            _scrub_occurrence(rng, context, usable, pos, question_len, span)
        else:  # pragma: no cover
            raise ConfigError("could not scrub stray pattern occurrences")
        if span is not None:
            assert context[span[0] : span[1] + 1] == question
        items.append(SpanQAItem(question, context, span))
    splits = _three_way_split(rng, items)
    return SpanQADataset(
        vocab_size=vocab_size,
        splits=splits,
        seed=seed,
        params={
            "question_len": question_len,
            "context_length_range": list(context_length_range),
            "answerable_fraction": answerable_fraction,
        },
    )


def qa_input_ids(item: SpanQAItem, vocab_size: int):
    """Model input for a QA item: question ++ [SEP] ++ context.

    Returns (ids, context_offset); position 0 (the first question token)
    doubles as the no-answer anchor during decoding.
    """
    ids = list(item.question) + [sep_token_id(vocab_size)] + list(item.context)
    return ids, len(item.question) + 1


# ---------------------------------------------------------------------------
# Task heads
# ---------------------------------------------------------------------------


class TaskHead:
    """Linear task head: [input_dim x K] for tagging, two [input_dim x 1]
    maps (start / end scores) for span extraction."""

    def __init__(self, kind: str, input_dim: int, num_classes: int | None = None,
                 seed: int = 0, dtype=np.float32):
        if kind not in ("tagging", "span"):
            raise ConfigError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.input_dim = input_dim
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)

        def normal(shape, name):
            return Parameter((0.02 * rng.standard_normal(shape)).astype(dtype),
                             name=name)

        if kind == "tagging":
            if not num_classes or num_classes < 2:
                raise ConfigError("tagging head needs num_classes >= 2")
            self.w = normal((input_dim, num_classes), "head.w")
        else:
            self.w_start = normal((input_dim, 1), "head.w_start")
            self.w_end = normal((input_dim, 1), "head.w_end")

    def named_parameters(self):
        if self.kind == "tagging":
            yield "head.w", self.w
        else:
            yield "head.w_start", self.w_start
            yield "head.w_end", self.w_end

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def forward(self, reps: Tensor):
        if reps.data.ndim != 2 or reps.data.shape[1] != self.input_dim:
            raise ShapeError(
                f"head expects [m x {self.input_dim}] input, got {reps.data.shape}"
            )
        if self.kind == "tagging":
            return matmul(reps, self.w)
        return matmul(reps, self.w_start), matmul(reps, self.w_end)


def head_forward(head: TaskHead, reps: Tensor):
    return head.forward(reps)


def decode_span(start_logits, end_logits, context_offset: int, context_len: int,
                max_answer_len: int = 10, null_threshold: float = 0.0):
    """Best (start, end) over context positions, or None for no-answer.

    Maximizes start+end score subject to start <= end and
    end - start < max_answer_len. The score at input position 0 plays the
    no-answer role: predict None when start[0]+end[0] >= best + threshold.
    Ties resolve to the lowest (start, end).
    """
    s = np.asarray(start_logits, dtype=np.float64).reshape(-1)
    e = np.asarray(end_logits, dtype=np.float64).reshape(-1)
    lo, hi = context_offset, context_offset + context_len
    if hi > s.shape[0]:
        raise ShapeError("context window exceeds logit length")
    grid = s[lo:hi, None] + e[None, lo:hi]
    valid = np.triu(np.ones((context_len, context_len), dtype=bool))
    valid &= ~np.triu(np.ones((context_len, context_len), dtype=bool), k=max_answer_len)
    grid = np.where(valid, grid, -np.inf)
    flat = int(np.argmax(grid))
    best_s, best_e = divmod(flat, context_len)
    best = grid[best_s, best_e]
    null_score = s[0] + e[0]
    if null_score >= best + null_threshold:
        return None
    return int(best_s), int(best_e)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Headline numbers (0-100 scale) plus the raw counts they derive from."""

    task: str
    accuracy: float | None = None
    f1_overall: float | None = None
    f1_macro: float | None = None
    em: float | None = None
    f1: float | None = None
    counts: dict = field(default_factory=dict)

    def primary_metric(self) -> float:
        return self.accuracy if self.task == "tagging" else self.f1

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "f1_overall": self.f1_overall,
            "f1_macro": self.f1_macro,
            "em": self.em,
            "f1": self.f1,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _f1_from_counts(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def metrics_from_confusion(confusion, outside_class: int | None = None):
    """(accuracy, overall_f1, macro_f1) on the 0-100 scale from a [gold x pred]
    confusion matrix. Overall F1 is micro-averaged; with an outside class it
    pools only the remaining classes. Macro F1 averages classes that occur in
    gold (again skipping the outside class when one is declared)."""
    conf = np.asarray(confusion, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    accuracy = 100.0 * np.trace(conf) / total

    k = conf.shape[0]
    gold_counts = conf.sum(axis=1)
    pred_counts = conf.sum(axis=0)
    scored = [c for c in range(k) if c != outside_class]
    tp = sum(conf[c, c] for c in scored)
    fp = sum(pred_counts[c] - conf[c, c] for c in scored)
    fn = sum(gold_counts[c] - conf[c, c] for c in scored)
    overall = 100.0 * _f1_from_counts(tp, fp, fn)

    per_class = [
        _f1_from_counts(conf[c, c], pred_counts[c] - conf[c, c],
                        gold_counts[c] - conf[c, c])
        for c in scored
        if gold_counts[c] > 0
    ]
    if not per_class:
        raise DataError("no scored class appears in gold")
    macro = 100.0 * float(np.mean(per_class))
    return accuracy, overall, macro


def tagging_metrics(predictions, gold, num_classes: int,
                    outside_class: int | None = None) -> MetricsReport:
    """Accuracy, micro F1, macro F1 over per-sequence tag predictions."""
    if len(predictions) != len(gold):
        raise DataError("prediction / gold sequence count mismatch")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p_seq, g_seq in zip(predictions, gold):
        if len(p_seq) != len(g_seq):
            raise DataError("prediction / gold length mismatch within a sequence")
        for p, g in zip(p_seq, g_seq):
            conf[g, p] += 1
    accuracy, overall, macro = metrics_from_confusion(conf, outside_class)
    return MetricsReport(
        task="tagging",
        accuracy=accuracy,
        f1_overall=overall,
        f1_macro=macro,
        counts={"confusion": conf.tolist(), "outside_class": outside_class},
    )


def span_overlap_f1(pred, gold) -> float:
    """Token-level F1 between two (start, end) spans or no-answers, in [0,1]."""
    if pred is None and gold is None:
        return 1.0
    if pred is None or gold is None:
        return 0.0
    ps, pe = pred
    gs, ge = gold
    if ps > pe or gs > ge:
        raise DataError(f"invalid span: {pred if ps > pe else gold}")
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2 * precision * recall / (precision + recall)


def spanqa_metrics(predictions, gold) -> MetricsReport:
    """Exact match and token-overlap F1 over predicted spans / no-answers."""
    if len(predictions) != len(gold):
        raise DataError("prediction / gold item count mismatch")
    if not predictions:
        raise DataError("no items to score")
    n_exact = 0
    f1_sum = 0.0
    for p, g in zip(predictions, gold):
        p = tuple(p) if p is not None else None
        g = tuple(g) if g is not None else None
        if p == g:
            n_exact += 1
        f1_sum += span_overlap_f1(p, g)
    n = len(predictions)
    return MetricsReport(
        task="span",
        em=100.0 * n_exact / n,
        f1=100.0 * f1_sum / n,
        counts={"n_items": n, "n_exact": n_exact, "f1_sum": f1_sum},
    )


# ---------------------------------------------------------------------------
# Line-delimited dataset serialization
# ---------------------------------------------------------------------------

_SPLIT_ORDER = ("train", "dev", "test")


def save_tagging_dataset(ds: TaggingDataset, path) -> None:
    """One JSON header line, then one JSON record per item:
    {"split", "ids", "labels"} in split order train/dev/test."""
    with open(path, "w") as fh:
        header = {
            "kind": "tagging",
            "vocab_size": ds.vocab_size,
            "num_classes": ds.num_classes,
            "class_names": ds.class_names,
            "seed": ds.seed,
            "params": ds.params,
        }
        fh.write(json.dumps(header) + "\n")
        for split in _SPLIT_ORDER:
            for item in ds.splits[split]:
                fh.write(json.dumps(
                    {"split": split, "ids": item.ids, "labels": item.labels}
                ) + "\n")


def load_tagging_dataset(path) -> TaggingDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "tagging":
            raise DataError(f"{path} is not a tagging dataset")
        splits = {s: [] for s in _SPLIT_ORDER}
        for line in fh:
            rec = json.loads(line)
            splits[rec["split"]].append(TaggingItem(rec["ids"], rec["labels"]))
    return TaggingDataset(
        vocab_size=header["vocab_size"],
        num_classes=header["num_classes"],
        class_names=header["class_names"],
        splits=splits,
        seed=header["seed"],
        params=header["params"],
    )


def save_spanqa_dataset(ds: SpanQADataset, path) -> None:
    """One JSON header line, then one JSON record per item:
    {"split", "question", "context", "start", "end"} (start/end null when
    unanswerable), in split order train/dev/test."""
    with open(path, "w") as fh:
        header = {
            "kind": "spanqa",
            "vocab_size": ds.vocab_size,
            "seed": ds.seed,
            "params": ds.params,
        }
        fh.write(json.dumps(header) + "\n")
        for split in _SPLIT_ORDER:
            for item in ds.splits[split]:
                s, e = item.span if item.span is not None else (None, None)
                fh.write(json.dumps({
                    "split": split,
                    "question": item.question,
                    "context": item.context,
                    "start": s,
                    "end": e,
                }) + "\n")


def load_spanqa_dataset(path) -> SpanQADataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "spanqa":
            raise DataError(f"{path} is not a span QA dataset")
        splits = {s: [] for s in _SPLIT_ORDER}
        for line in fh:
            rec = json.loads(line)
            span = None if rec["start"] is None else (rec["start"], rec["end"])
            splits[rec["split"]].append(
                SpanQAItem(rec["question"], rec["context"], span)
            )
    return SpanQADataset(
        vocab_size=header["vocab_size"],
        splits=splits,
        seed=header["seed"],
        params=header["params"],
    )
