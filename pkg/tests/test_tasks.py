import json

import numpy as np
import pytest

from embalign.autodiff import Tensor
from embalign.errors import ConfigError, DataError
from embalign.tasks import (
    MetricsReport,
    TaskHead,
    decode_span,
    gen_spanqa_corpus,
    gen_tagging_corpus,
    gen_token_corpus,
    load_spanqa_dataset,
    load_tagging_dataset,
    metrics_from_confusion,
    qa_input_ids,
    save_spanqa_dataset,
    save_tagging_dataset,
    sep_token_id,
    span_overlap_f1,
    spanqa_metrics,
    tagging_metrics,
)

VOCAB = 64


# ---------------------------------------------------------------------------
# tagging generator
# ---------------------------------------------------------------------------


def test_tagging_deterministic():
    a = gen_tagging_corpus(3, VOCAB, 4, 40)
    b = gen_tagging_corpus(3, VOCAB, 4, 40)
    assert a == b
    c = gen_tagging_corpus(4, VOCAB, 4, 40)
    assert a != c


def test_tagging_all_classes_in_train_and_shapes():
    ds = gen_tagging_corpus(0, VOCAB, 5, 60, length_range=(4, 9))
    seen = set()
    for split in ("train", "dev", "test"):
        for item in ds.items(split):
            assert len(item.ids) == len(item.labels)
            assert 4 <= len(item.ids) <= 9
            assert max(item.ids) < VOCAB - 2
            seen.update(item.labels) if split == "train" else None
    assert seen == set(range(5))


def bayes_unigram_accuracy(ds):
    """Exact Bayes-optimal context-free decoder over the known generator."""
    em = np.asarray(ds.params["emissions"])
    # symmetric chain -> uniform stationary distribution, so the posterior
    # argmax reduces to argmax_k emissions[k, token]
    correct = total = 0
    for split in ("train", "dev", "test"):
        for item in ds.items(split):
            for tok, lab in zip(item.ids, item.labels):
                pred = int(np.argmax(em[:, tok]))
                correct += pred == lab
                total += 1
    return correct / total


def test_disjoint_emissions_are_unigram_separable():
    ds = gen_tagging_corpus(1, VOCAB, 4, 40, emission_overlap=0.0)
    assert bayes_unigram_accuracy(ds) == 1.0


def test_overlapping_emissions_not_unigram_separable():
    ds = gen_tagging_corpus(2, VOCAB, 4, 80, emission_overlap=0.5)
    acc = bayes_unigram_accuracy(ds)
    assert acc < 1.0


def test_tagging_guards():
    with pytest.raises(ConfigError):
        gen_tagging_corpus(0, VOCAB, 1, 40)
    with pytest.raises(ConfigError):
        gen_tagging_corpus(0, VOCAB, 4, 5)
    with pytest.raises(ConfigError):
        gen_tagging_corpus(0, VOCAB, 4, 40, order="bigram")
    with pytest.raises(ConfigError):
        gen_tagging_corpus(0, 6, 40, 40)  # vocab too small for 40 classes


def test_token_corpus():
    corpus = gen_token_corpus(0, VOCAB, 25, length_range=(5, 8))
    assert len(corpus) == 25
    assert all(5 <= len(s) <= 8 for s in corpus)
    assert corpus == gen_token_corpus(0, VOCAB, 25, length_range=(5, 8))


# ---------------------------------------------------------------------------
# span QA generator
# ---------------------------------------------------------------------------


def test_spanqa_all_answerable_and_planted():
    ds = gen_spanqa_corpus(0, VOCAB, 40, answerable_fraction=1.0)
    for split in ("train", "dev", "test"):
        for item in ds.items(split):
            assert item.span is not None
            s, e = item.span
            assert item.context[s : e + 1] == item.question


def test_spanqa_pattern_search_oracle():
    """Brute-force substring search recovers every span exactly."""
    ds = gen_spanqa_corpus(1, VOCAB, 60, answerable_fraction=0.6)
    hits = total = 0
    for split in ("train", "dev", "test"):
        for item in ds.items(split):
            q = len(item.question)
            found = None
            for p in range(len(item.context) - q + 1):
                if item.context[p : p + q] == item.question:
                    found = (p, p + q - 1)
                    break
            pred_ok = found == item.span
            hits += pred_ok
            total += 1
    assert hits / total >= 0.99


def test_spanqa_deterministic_and_guards():
    assert gen_spanqa_corpus(5, VOCAB, 20) == gen_spanqa_corpus(5, VOCAB, 20)
    with pytest.raises(ConfigError):
        gen_spanqa_corpus(0, VOCAB, 20, context_length_range=(2, 4), question_len=3)
    with pytest.raises(ConfigError):
        gen_spanqa_corpus(0, VOCAB, 20, answerable_fraction=1.5)


def test_qa_input_layout():
    ds = gen_spanqa_corpus(2, VOCAB, 20)
    item = ds.items("train")[0]
    ids, off = qa_input_ids(item, VOCAB)
    assert off == len(item.question) + 1
    assert ids[off - 1] == sep_token_id(VOCAB)
    assert ids[:off - 1] == item.question
    assert ids[off:] == item.context


# ---------------------------------------------------------------------------
# tagging metrics
# ---------------------------------------------------------------------------


def test_tagging_metrics_perfect():
    gold = [[0, 1, 2], [2, 1]]
    rep = tagging_metrics(gold, gold, num_classes=3)
    assert rep.accuracy == rep.f1_overall == rep.f1_macro == 100.0


def test_tagging_metrics_single_class_predictor():
    # two balanced classes, everything predicted as class 0:
    # class 0 F1 = 2/3, class 1 F1 = 0 -> macro 33.33
    gold = [[0] * 10 + [1] * 10]
    pred = [[0] * 20]
    rep = tagging_metrics(pred, gold, num_classes=2)
    assert rep.accuracy == pytest.approx(50.0)
    assert rep.f1_macro == pytest.approx((200.0 / 3 + 0.0) / 2, abs=0.01)


def confusion_oracle(pred, gold, k):
    conf = np.zeros((k, k), dtype=int)
    for ps, gs in zip(pred, gold):
        for p, g in zip(ps, gs):
            conf[g][p] += 1
    acc = 100.0 * sum(conf[i][i] for i in range(k)) / conf.sum()
    f1s = []
    for c in range(k):
        tp = conf[c][c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        f1s.append((c, 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0,
                    conf[c, :].sum()))
    micro_tp = sum(conf[c][c] for c in range(k))
    micro_fp = sum(conf[:, c].sum() - conf[c][c] for c in range(k))
    micro_fn = sum(conf[c, :].sum() - conf[c][c] for c in range(k))
    micro = 100.0 * 2 * micro_tp / (2 * micro_tp + micro_fp + micro_fn)
    macro = 100.0 * np.mean([f1 for _, f1, n_gold in f1s if n_gold > 0])
    return acc, micro, macro


def test_tagging_metrics_match_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 5))
        gold = [list(rng.integers(0, k, size=rng.integers(1, 12))) for _ in range(n)]
        pred = [list(rng.integers(0, k, size=len(g))) for g in gold]
        rep = tagging_metrics(pred, gold, num_classes=k)
        acc, micro, macro = confusion_oracle(pred, gold, k)
        assert rep.accuracy == pytest.approx(acc, abs=1e-6)
        assert rep.f1_overall == pytest.approx(micro, abs=1e-6)
        assert rep.f1_macro == pytest.approx(macro, abs=1e-6)
        # micro-F1 over all classes equals accuracy for single-label tagging
        assert rep.f1_overall == pytest.approx(rep.accuracy, abs=1e-9)
        # recomputable from stored counts
        a2, o2, m2 = metrics_from_confusion(rep.counts["confusion"],
                                            rep.counts["outside_class"])
        assert (a2, o2, m2) == (rep.accuracy, rep.f1_overall, rep.f1_macro)


def test_tagging_metrics_outside_class_excluded():
    # gold: class 1 appears twice, outside (0) twice; predictions miss one
    gold = [[0, 1, 1, 0]]
    pred = [[1, 1, 0, 0]]
    rep = tagging_metrics(pred, gold, num_classes=2, outside_class=0)
    # entity class 1: tp=1, fp=1, fn=1 -> F1 = 0.5
    assert rep.f1_overall == pytest.approx(50.0)
    assert rep.f1_macro == pytest.approx(50.0)
    assert rep.accuracy == pytest.approx(50.0)


def test_tagging_metrics_length_mismatch():
    with pytest.raises(DataError):
        tagging_metrics([[0, 1]], [[0]], num_classes=2)


# ---------------------------------------------------------------------------
# span metrics
# ---------------------------------------------------------------------------


def test_span_metrics_perfect():
    gold = [(0, 2), None, (3, 3)]
    rep = spanqa_metrics(gold, gold)
    assert rep.em == 100.0 and rep.f1 == 100.0


def test_span_metrics_hand_case():
    rep = spanqa_metrics([(4, 7)], [(2, 5)])
    assert rep.em == 0.0
    assert rep.f1 == pytest.approx(50.0)


def test_span_metrics_no_answer_rules():
    rep = spanqa_metrics([(0, 0)], [None])
    assert rep.em == 0.0 and rep.f1 == 0.0
    rep = spanqa_metrics([None], [None])
    assert rep.em == 100.0 and rep.f1 == 100.0


def test_span_metrics_invalid_span():
    with pytest.raises(DataError):
        spanqa_metrics([(5, 2)], [(1, 2)])


def span_oracle(pred, gold):
    if pred is None and gold is None:
        return 1.0, 1.0
    if pred is None or gold is None:
        return 0.0, 0.0
    em = 1.0 if pred == gold else 0.0
    inter = len(set(range(pred[0], pred[1] + 1)) & set(range(gold[0], gold[1] + 1)))
    if inter == 0:
        return em, 0.0
    p = inter / (pred[1] - pred[0] + 1)
    r = inter / (gold[1] - gold[0] + 1)
    return em, 2 * p * r / (p + r)


def test_span_metrics_match_overlap_oracle_and_em_le_f1():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 8))

        def rand_span():
            if rng.random() < 0.25:
                return None
            s = int(rng.integers(0, 10))
            return (s, s + int(rng.integers(0, 5)))

        pred = [rand_span() for _ in range(n)]
        gold = [rand_span() for _ in range(n)]
        rep = spanqa_metrics(pred, gold)
        ems, f1s = zip(*(span_oracle(p, g) for p, g in zip(pred, gold)))
        assert rep.em == pytest.approx(100.0 * np.mean(ems), abs=1e-6)
        assert rep.f1 == pytest.approx(100.0 * np.mean(f1s), abs=1e-6)
        assert rep.em <= rep.f1 + 1e-9
        # recomputable from counts
        assert rep.em == pytest.approx(
            100.0 * rep.counts["n_exact"] / rep.counts["n_items"])
        assert rep.f1 == pytest.approx(
            100.0 * rep.counts["f1_sum"] / rep.counts["n_items"])


# ---------------------------------------------------------------------------
# heads and span decoding
# ---------------------------------------------------------------------------


def test_tagging_head_shapes_and_tiebreak():
    head = TaskHead("tagging", input_dim=6, num_classes=4)
    reps = Tensor(np.random.default_rng(0).standard_normal((5, 6)).astype(np.float32))
    logits = head.forward(reps)
    assert logits.data.shape == (5, 4)
    head.w.data = np.zeros_like(head.w.data)
    logits = head.forward(reps).data
    assert np.argmax(logits, axis=1).tolist() == [0] * 5  # ties -> lowest index


def test_span_head_shapes():
    head = TaskHead("span", input_dim=6)
    reps = Tensor(np.zeros((7, 6), dtype=np.float32))
    s, e = head.forward(reps)
    assert s.data.shape == (7, 1) and e.data.shape == (7, 1)


def exhaustive_decode(start, end, off, ctx_len, max_len, threshold=0.0):
    best, best_span = -np.inf, None
    for s in range(ctx_len):
        for e in range(s, min(s + max_len, ctx_len)):
            score = start[off + s] + end[off + e]
            if score > best:
                best, best_span = score, (s, e)
    if start[0] + end[0] >= best + threshold:
        return None
    return best_span


def test_span_decode_matches_exhaustive():
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = int(rng.integers(4, 14))
        off = int(rng.integers(1, m - 2))
        ctx_len = m - off
        start = rng.standard_normal(m)
        end = rng.standard_normal(m)
        max_len = int(rng.integers(1, 6))
        got = decode_span(start, end, off, ctx_len, max_answer_len=max_len)
        want = exhaustive_decode(start, end, off, ctx_len, max_len)
        assert got == want
        if got is not None:
            s, e = got
            assert s <= e and e - s < max_len


def test_span_decode_three_positions():
    start = np.asarray([0.0, 1.0, 5.0, 2.0])
    end = np.asarray([0.0, 1.0, 1.0, 4.0])
    got = decode_span(start, end, 1, 3, max_answer_len=10)
    assert got == exhaustive_decode(start, end, 1, 3, 10)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_tagging_roundtrip(tmp_path):
    ds = gen_tagging_corpus(7, VOCAB, 4, 40)
    path = tmp_path / "tagging.jsonl"
    save_tagging_dataset(ds, path)
    assert load_tagging_dataset(path) == ds
    # byte-determinism: same dataset -> identical file bytes
    path2 = tmp_path / "tagging2.jsonl"
    save_tagging_dataset(gen_tagging_corpus(7, VOCAB, 4, 40), path2)
    assert path.read_bytes() == path2.read_bytes()


def test_spanqa_roundtrip(tmp_path):
    ds = gen_spanqa_corpus(8, VOCAB, 30)
    path = tmp_path / "spanqa.jsonl"
    save_spanqa_dataset(ds, path)
    assert load_spanqa_dataset(path) == ds


def test_metrics_report_roundtrip():
    rep = spanqa_metrics([(1, 2), None], [(1, 2), (0, 0)])
    again = MetricsReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert again == rep
