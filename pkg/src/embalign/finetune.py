"""Task fine-tuning of student stacks, evaluation, latency measurement, and
run reporting.

A stack is student encoder + optional alignment adapter + task head. The
mode decides which pieces train:

* baseline      - student + head (no adapter)
* head_only     - head only, student frozen (comparison floor)
* frozen        - adapter + head, student frozen (plug-and-play)
* joint         - student + adapter + head at a reduced learning rate
* lora          - LoRA A/B + head, base student frozen
* lora_adapter  - LoRA A/B + adapter + head, base student frozen

Everything outside the mode's trainable set is hash-checked before and after
training; any drift is a hard error.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, asdict

import json
import numpy as np

from .adapter import AdapterConfig, AlignmentAdapter
from .autodiff import Adam, Tape, Tensor, add, backward, cross_entropy, scale, transpose
from .checkpoint import digest_named, read_checkpoint, write_checkpoint
from .encoder import Encoder, EncoderConfig, LoraConfig, lora_parameters
from .errors import ConfigError, DataError, FrozenContractError
from .tasks import (
    MetricsReport,
    SpanQADataset,
    TaggingDataset,
    TaskHead,
    decode_span,
    qa_input_ids,
    spanqa_metrics,
    tagging_metrics,
)

MODES = ("baseline", "head_only", "frozen", "joint", "lora", "lora_adapter")
_ADAPTER_MODES = {"frozen", "joint", "lora_adapter"}
_LORA_MODES = {"lora", "lora_adapter"}
_STUDENT_TRAIN_MODES = {"baseline", "joint"}
# joint (and the baseline it is compared against) use the reduced rate
_MODE_LR = {"baseline": 5e-5, "joint": 5e-5,
            "head_only": 1e-4, "frozen": 1e-4, "lora": 1e-4, "lora_adapter": 1e-4}


@dataclass
class FinetuneConfig:
    mode: str
    learning_rate: float | None = None  # default depends on mode
    epochs: int | None = None  # default 4 for tagging, 3 for span QA
    batch_size: int = 8
    seed: int = 0
    max_answer_len: int = 10
    null_threshold: float = 0.0
    # valid only for modes that never update the student
    cache_student_reps: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown finetune mode {self.mode!r}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def resolved_lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None \
            else _MODE_LR[self.mode]

    def resolved_epochs(self, task: str) -> int:
        if self.epochs is not None:
            if self.epochs < 0:
                raise ConfigError("epochs must be non-negative")
            return self.epochs
        return 4 if task == "tagging" else 3


class TaskStack:
    """Student encoder + optional adapter + task head."""

    def __init__(self, student: Encoder, adapter: AlignmentAdapter | None,
                 head: TaskHead):
        if adapter is not None and adapter.config.d_c != student.config.model_dim:
            raise ConfigError("adapter input dim does not match student dim")
        expected = adapter.config.d_l if adapter is not None else student.config.model_dim
        if head.input_dim != expected:
            raise ConfigError(
                f"head expects input dim {head.input_dim}, stack provides {expected}"
            )
        self.student = student
        self.adapter = adapter
        self.head = head

    def named_parameters(self):
        for name, p in self.student.named_parameters():
            yield "student." + name, p
        if self.adapter is not None:
            for name, p in self.adapter.named_parameters():
                yield p.name if p.name.startswith("adapter.") else "adapter." + name, p
        for name, p in self.head.named_parameters():
            yield name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def forward(self, ids):
        reps = self.student.encode(ids)
        if self.adapter is not None:
            reps = self.adapter.forward(reps)
        return self.head.forward(reps)

    def _reps(self, ids, cached):
        if cached is not None:
            reps = Tensor(cached)
        else:
            reps = self.student.encode(ids)
        if self.adapter is not None:
            reps = self.adapter.forward(reps)
        return reps

    def predict_tags(self, ids) -> list[int]:
        logits = self.forward(ids)
        return np.argmax(logits.data, axis=1).tolist()

    def predict_span(self, item, vocab_size, max_answer_len=10, null_threshold=0.0):
        ids, off = qa_input_ids(item, vocab_size)
        s_log, e_log = self.forward(ids)
        return decode_span(s_log.data[:, 0], e_log.data[:, 0], off,
                           len(item.context), max_answer_len, null_threshold)


def make_head(dataset, input_dim: int, seed: int = 0) -> TaskHead:
    if isinstance(dataset, TaggingDataset):
        return TaskHead("tagging", input_dim, num_classes=dataset.num_classes,
                        seed=seed)
    return TaskHead("span", input_dim, seed=seed)


def task_of(dataset) -> str:
    return "tagging" if isinstance(dataset, TaggingDataset) else "span"


def _trainable_sets(stack: TaskStack, mode: str):
    """Set trainable flags per mode; returns the list of trainable params."""
    for p in stack.student.parameters():
        p.trainable = False
    train: list = []
    if mode in _STUDENT_TRAIN_MODES:
        for p in stack.student.parameters():
            p.trainable = True
        train.extend(stack.student.parameters())
    elif mode in _LORA_MODES:
        for p in lora_parameters(stack.student):
            p.trainable = True
        train.extend(lora_parameters(stack.student))
    if stack.adapter is not None:
        stack.adapter.set_trainable(True)
        train.extend(stack.adapter.parameters())
    stack.head.set_trainable(True)
    train.extend(stack.head.parameters())
    return train


def _validate_mode(stack: TaskStack, cfg: FinetuneConfig):
    wants_adapter = cfg.mode in _ADAPTER_MODES
    if wants_adapter != (stack.adapter is not None):
        raise ConfigError(
            f"mode {cfg.mode} {'requires' if wants_adapter else 'forbids'} an adapter"
        )
    wants_lora = cfg.mode in _LORA_MODES
    if wants_lora != bool(stack.student.lora):
        raise ConfigError(
            f"mode {cfg.mode} {'requires' if wants_lora else 'forbids'} attached LoRA"
        )
    if cfg.cache_student_reps and cfg.mode not in ("frozen", "head_only"):
        raise ConfigError(
            "student representations can only be cached when the student is frozen"
        )


def _item_loss(stack: TaskStack, item, task: str, vocab_size: int, cached=None):
    if task == "tagging":
        reps = stack._reps(item.ids, cached)
        return cross_entropy(stack.head.forward(reps), item.labels)
    ids, off = qa_input_ids(item, vocab_size)
    reps = stack._reps(ids, cached)
    s_log, e_log = stack.head.forward(reps)
    if item.span is None:
        gs = ge = 0  # no-answer anchors at position 0
    else:
        gs, ge = off + item.span[0], off + item.span[1]
    return add(cross_entropy(transpose(s_log), [gs]),
               cross_entropy(transpose(e_log), [ge]))


def _dev_metric(stack, dataset, cfg) -> float:
    return evaluate(stack, dataset, "dev", cfg.max_answer_len,
                    cfg.null_threshold).primary_metric()


def finetune(stack: TaskStack, dataset, cfg: FinetuneConfig):
    """Train the stack's mode-dependent trainable set on the task.

    Returns (stack, FinetuneRecord). The stack carries the parameters of the
    epoch with the best dev metric.
    """
    _validate_mode(stack, cfg)
    task = task_of(dataset)
    if stack.head.kind != task:
        raise ConfigError(f"{stack.head.kind} head cannot train on a {task} dataset")
    train_items = dataset.items("train")
    if not train_items:
        raise DataError("empty train split")

    trainable = _trainable_sets(stack, cfg.mode)
    trainable_ids = {id(p) for p in trainable}
    frozen_named = [(n, p) for n, p in stack.named_parameters()
                    if id(p) not in trainable_ids]
    frozen_before = digest_named(frozen_named)

    cache = None
    if cfg.cache_student_reps:
        cache = []
        for item in train_items:
            ids = item.ids if task == "tagging" else qa_input_ids(item, dataset.vocab_size)[0]
            cache.append(stack.student.encode(ids).data)

    epochs = cfg.resolved_epochs(task)
    opt = Adam(trainable, lr=cfg.resolved_lr)
    rng = np.random.default_rng(cfg.seed)

    best_metric = -1.0
    best_state = None
    best_epoch = -1
    dev_trace: list[float] = []
    train_losses: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(len(train_items))
        for lo in range(0, len(perm), cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            opt.zero_grad()
            total = None
            with Tape() as tape:
                for i in batch:
                    loss = _item_loss(stack, train_items[i], task,
                                      dataset.vocab_size,
                                      cache[i] if cache is not None else None)
                    total = loss if total is None else add(total, loss)
                total = scale(total, 1.0 / len(batch))
            backward(total, tape)
            opt.step()
            train_losses.append(total.item())
        metric = _dev_metric(stack, dataset, cfg)
        dev_trace.append(metric)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = [np.array(p.data) for p in trainable]

    if best_state is not None:
        for p, data in zip(trainable, best_state):
            p.data = data

    if digest_named(frozen_named) != frozen_before:
        raise FrozenContractError(
            f"parameters outside the {cfg.mode} trainable set changed"
        )
    record = FinetuneRecord(mode=cfg.mode, task=task, dev_trace=dev_trace,
                            best_epoch=best_epoch, train_losses=train_losses)
    return stack, record


@dataclass
class FinetuneRecord:
    mode: str
    task: str
    dev_trace: list[float]
    best_epoch: int
    train_losses: list[float] = field(default_factory=list)

    @property
    def best_dev_metric(self) -> float:
        return max(self.dev_trace) if self.dev_trace else float("nan")


def evaluate(stack: TaskStack, dataset, split: str, max_answer_len: int = 10,
             null_threshold: float = 0.0) -> MetricsReport:
    """Pure evaluation of a stack on one dataset split."""
    items = dataset.items(split)
    if not items:
        raise DataError(f"empty split {split!r}")
    if task_of(dataset) == "tagging":
        preds = [stack.predict_tags(item.ids) for item in items]
        gold = [item.labels for item in items]
        return tagging_metrics(preds, gold, num_classes=dataset.num_classes)
    preds = [stack.predict_span(item, dataset.vocab_size, max_answer_len,
                                null_threshold) for item in items]
    gold = [item.span for item in items]
    return spanqa_metrics(preds, gold)


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass
class LatencyReport:
    median_seconds_per_seq: float
    speedup: float | None = None
    repeats: int = 0


def _forward_fn(obj):
    if callable(obj):
        return obj
    if hasattr(obj, "forward"):
        return obj.forward
    return obj.encode


def _median_latency(fn, sequences, repeats) -> float:
    fn_times = []
    for seq in sequences:  # warm-up pass, not timed
        fn(seq)
    for _ in range(repeats):
        t0 = time.perf_counter()
        for seq in sequences:
            fn(seq)
        fn_times.append((time.perf_counter() - t0) / len(sequences))
    return statistics.median(fn_times)


def measure_latency(stack, sequences, repeats: int = 9,
                    reference=None) -> LatencyReport:
    """Median wall-clock seconds per sequence over full-corpus repeats;
    speedup = reference median / stack median when a reference is given."""
    if repeats < 5:
        raise ConfigError("latency measurement needs repeats >= 5")
    if not sequences:
        raise DataError("no sequences to time")
    med = _median_latency(_forward_fn(stack), sequences, repeats)
    speedup = None
    if reference is not None:
        ref = _median_latency(_forward_fn(reference), sequences, repeats)
        speedup = ref / med
    return LatencyReport(median_seconds_per_seq=med, speedup=speedup,
                         repeats=repeats)


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """One result row: a mode/window/task combination with its accounting."""

    mode: str
    task: str
    window_n: int | None = None
    metrics: MetricsReport | None = None
    size_pct: float | None = None
    latency_s: float | None = None
    speedup: float | None = None
    reference_count: int | None = None
    seeds: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    dev_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict() if self.metrics else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        if d.get("metrics"):
            d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)

    def to_text(self) -> str:
        """Key/value lines; nested structures are JSON-encoded."""
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, (dict, list)) or value is None:
                value = json.dumps(value)
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        d = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(": ")
            try:
                d[key] = json.loads(value)
            except json.JSONDecodeError:
                d[key] = value
        for key in ("mode", "task"):
            if isinstance(d.get(key), str) is False:
                raise DataError(f"run report missing field {key}")
        return cls.from_dict(d)


_COLUMNS = ("#", "mode", "window", "task", "Acc", "F1_O", "F1_M", "EM", "F1",
            "Sz", "Spd")


def _fmt(value, digits=2):
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def render_table(reports: list[RunReport], reference_label: str = "teacher") -> str:
    """Aligned plain-text table: one row per run plus the reference row."""
    if not reports:
        raise DataError("no runs to report")
    refs = {r.reference_count for r in reports if r.reference_count is not None}
    if len(refs) > 1:
        raise ConfigError(f"inconsistent reference model across runs: {sorted(refs)}")
    rows = [[
        "0", reference_label, "-", "-", "-", "-", "-", "-", "-",
        "100.00", "1.00",
    ]]
    ordered = sorted(reports, key=lambda r: (r.task, r.mode, r.window_n or 0))
    for i, r in enumerate(ordered, start=1):
        m = r.metrics or MetricsReport(task=r.task)
        rows.append([
            str(i), r.mode, str(r.window_n) if r.window_n else "-", r.task,
            _fmt(m.accuracy), _fmt(m.f1_overall), _fmt(m.f1_macro),
            _fmt(m.em), _fmt(m.f1), _fmt(r.size_pct), _fmt(r.speedup),
        ])
    widths = [max(len(row[c]) for row in [list(_COLUMNS)] + rows)
              for c in range(len(_COLUMNS))]
    def line(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    out = [line(list(_COLUMNS)), line(["-" * w for w in widths])]
    out.extend(line(row) for row in rows)
    return "\n".join(out) + "\n"


def build_report(reports: list[RunReport], out_dir,
                 reference_label: str = "teacher"):
    """Write report.json (machine-readable) and report.txt (rendered table)."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(reports, reference_label)
    (out / "report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    (out / "report.txt").write_text(table)
    return table


# ---------------------------------------------------------------------------
# Stack persistence
# ---------------------------------------------------------------------------


def save_stack(stack: TaskStack, stem) -> None:
    meta = {
        "kind": "stack",
        "student_config": asdict(stack.student.config),
        "head": {"kind": stack.head.kind, "input_dim": stack.head.input_dim,
                 "num_classes": stack.head.num_classes},
    }
    if stack.student.lora_config is not None:
        lc = stack.student.lora_config
        meta["lora"] = {"rank": lc.rank, "alpha": lc.alpha,
                        "targets": list(lc.targets)}
    if stack.adapter is not None:
        meta["adapter_config"] = asdict(stack.adapter.config)
        meta["linear_bypass"] = stack.adapter.linear_bypass
    write_checkpoint(stem, stack.named_parameters(), meta)


def load_stack(stem) -> TaskStack:
    meta, params = read_checkpoint(stem)
    if meta.get("kind") != "stack":
        raise DataError(f"{stem} is not a stack checkpoint")
    student = Encoder(EncoderConfig(**meta["student_config"]))
    if "lora" in meta:
        lc = meta["lora"]
        cfg = LoraConfig(rank=lc["rank"], alpha=lc["alpha"],
                         targets=tuple(lc["targets"]))
        student.lora_config = cfg
        for i in range(student.config.num_layers):
            for t in cfg.targets:
                student.lora[(i, t)] = (
                    params[f"student.layer{i}.lora_{t}.a"],
                    params[f"student.layer{i}.lora_{t}.b"],
                )
    adapter = None
    if "adapter_config" in meta:
        adapter = AlignmentAdapter(AdapterConfig(**meta["adapter_config"]),
                                   linear_bypass=meta["linear_bypass"])
    head = TaskHead(meta["head"]["kind"], meta["head"]["input_dim"],
                    num_classes=meta["head"]["num_classes"])
    stack = TaskStack(student, adapter, head)
    for name, p in stack.named_parameters():
        src = params.get(name)
        if src is None:
            raise DataError(f"stack checkpoint missing tensor {name}")
        p.data = src.data
        p.trainable = src.trainable
    return stack
