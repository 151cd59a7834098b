import numpy as np
import pytest

from embalign.autodiff import Tensor, finite_diff_check, mse_loss
from embalign.checkpoint import weights_digest
from embalign.encoder import (
    Encoder,
    EncoderConfig,
    LoraConfig,
    attach_lora,
    derive_pruned_student,
    init_encoder,
    lora_parameters,
    mlm_pretrain,
    param_count,
)
from embalign.errors import ConfigError, DataError
from embalign.tasks import gen_token_corpus


def tiny_config(**kw):
    base = dict(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16,
                vocab_size=12, max_len=10, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


def closed_form_count(cfg: EncoderConfig) -> int:
    d, f = cfg.model_dim, cfg.ffn_dim
    per_layer = 2 * d + 4 * d * d + 4 * d + 2 * d + d * f + f + f * d + d
    return cfg.vocab_size * d + cfg.max_len * d + cfg.num_layers * per_layer + 2 * d


# ---------------------------------------------------------------------------
# init / counting
# ---------------------------------------------------------------------------


def test_init_deterministic_per_seed():
    a = init_encoder(tiny_config(seed=5))
    b = init_encoder(tiny_config(seed=5))
    assert weights_digest(a) == weights_digest(b)
    c = init_encoder(tiny_config(seed=6))
    assert weights_digest(a) != weights_digest(c)


def test_param_count_closed_form():
    cfg = EncoderConfig(num_layers=4, model_dim=64, num_heads=4, ffn_dim=128,
                        vocab_size=256, max_len=64, seed=0)
    enc = init_encoder(cfg)
    enumerated = sum(p.data.size for _, p in enc.named_parameters())
    assert param_count(enc) == enumerated == closed_form_count(cfg)


def test_param_count_simple_cases():
    class Stub:
        def __init__(self, tensors):
            self._t = tensors

        def named_parameters(self):
            return iter(self._t)

    from embalign.autodiff import Parameter

    assert param_count(Stub([])) == 0
    w = Parameter(np.zeros((3, 4), dtype=np.float32))
    b = Parameter(np.zeros(4, dtype=np.float32))
    assert param_count(Stub([("w", w), ("b", b)])) == 16


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(num_layers=2, model_dim=10, num_heads=3, ffn_dim=4,
                      vocab_size=8, max_len=4)
    with pytest.raises(ConfigError):
        EncoderConfig(num_layers=0, model_dim=8, num_heads=2, ffn_dim=4,
                      vocab_size=8, max_len=4)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def test_encode_shape_single_token():
    enc = init_encoder(tiny_config())
    out = enc.encode([3])
    assert out.data.shape == (1, 8)


def test_encode_input_validation():
    enc = init_encoder(tiny_config())
    with pytest.raises(DataError):
        enc.encode([99])
    with pytest.raises(DataError):
        enc.encode(list(range(11)))
    with pytest.raises(DataError):
        enc.encode([])


def test_position_sensitivity():
    enc = init_encoder(tiny_config())
    out = enc.encode([4, 4]).data
    assert not np.allclose(out[0], out[1])
    a = enc.encode([2, 7]).data
    b = enc.encode([7, 2]).data
    assert not np.allclose(a[0], b[1], atol=1e-6)


def test_encode_deterministic():
    enc = init_encoder(tiny_config())
    ids = [1, 5, 3, 3]
    one = enc.encode(ids).data
    two = enc.encode(ids).data
    assert one.tobytes() == two.tobytes()


def test_attention_rows_sum_to_one():
    enc = init_encoder(tiny_config(num_layers=3))
    sink = []
    enc.encode([1, 2, 3, 4, 5], attn_sink=sink)
    assert len(sink) == 3 * 2  # layers x heads
    for probs in sink:
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_encode_matches_straight_line_oracle():
    """Hand-rolled single-block forward pass, written independently."""
    cfg = tiny_config(num_layers=1, model_dim=4, num_heads=2, ffn_dim=8,
                      vocab_size=6, max_len=4, seed=3)
    enc = init_encoder(cfg)
    ids = [2, 5]

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        return xc / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps) * g + b

    def gelu_np(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

    L = {k: v.data.astype(np.float64) for k, v in enc.layers[0].items()}
    x = enc.tok_emb.data[ids].astype(np.float64) + enc.pos_emb.data[:2].astype(np.float64)

    h = ln(x, L["ln1_g"], L["ln1_b"])
    q = h @ L["wq"] + L["bq"]
    k = h @ L["wk"] + L["bk"]
    v = h @ L["wv"] + L["bv"]
    heads = []
    dh = 2
    for i in range(2):
        qi, ki, vi = (t[:, i * dh:(i + 1) * dh] for t in (q, k, v))
        scores = qi @ ki.T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        heads.append(probs @ vi)
    attn = np.concatenate(heads, axis=1) @ L["wo"] + L["bo"]
    x = x + attn
    h = ln(x, L["ln2_g"], L["ln2_b"])
    x = x + gelu_np(h @ L["w1"] + L["b1"]) @ L["w2"] + L["b2"]
    want = ln(x, enc.final_g.data.astype(np.float64), enc.final_b.data.astype(np.float64))

    got = enc.encode(ids).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_encode_gradients():
    cfg = tiny_config(num_layers=1, model_dim=4, num_heads=2, ffn_dim=6,
                      vocab_size=8, max_len=6, seed=1)
    enc = Encoder(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    ids = [1, 4, 7]
    tgt = rng.standard_normal((3, 4))

    def f():
        return mse_loss(enc.encode(ids), tgt)

    res = finite_diff_check(f, enc.parameters())
    assert res.passed, str(res)


# ---------------------------------------------------------------------------
# pruned students
# ---------------------------------------------------------------------------


def test_prune_rejects_full_depth():
    teacher = init_encoder(tiny_config(num_layers=4))
    with pytest.raises(ConfigError):
        derive_pruned_student(teacher, 4)
    with pytest.raises(ConfigError):
        derive_pruned_student(teacher, 0)


def test_prune_copies_and_isolates():
    teacher = init_encoder(tiny_config(num_layers=4, seed=9))
    before = weights_digest(teacher)
    student = derive_pruned_student(teacher, 2)
    assert weights_digest(teacher) == before
    assert student.config.num_layers == 2
    for key in ("wq", "w1", "ln1_g"):
        assert student.layers[0][key].data.tobytes() == teacher.layers[0][key].data.tobytes()
    # deep copy: training the student must not touch the teacher
    student.layers[0]["wq"].data[0, 0] += 1.0
    assert weights_digest(teacher) == before


def test_prune_param_ratio():
    cfg = tiny_config(num_layers=4)
    teacher = init_encoder(cfg)
    student = derive_pruned_student(teacher, 2)
    from dataclasses import replace

    assert param_count(student) == closed_form_count(replace(cfg, num_layers=2))


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


def test_lora_zero_b_is_identity():
    enc = init_encoder(tiny_config(seed=2))
    ids = [1, 2, 3]
    before = enc.encode(ids).data.copy()
    attach_lora(enc, LoraConfig(rank=2), seed=4)
    after = enc.encode(ids).data
    assert before.tobytes() == after.tobytes()


def test_lora_param_count_and_flags():
    cfg = tiny_config(num_layers=3)
    enc = init_encoder(cfg)
    base = param_count(enc)
    attach_lora(enc, LoraConfig(rank=2, targets=("q", "v")), seed=0)
    added = param_count(enc) - base
    assert added == 2 * 3 * 2 * 2 * cfg.model_dim  # targets * layers * 2 * rank * dim
    assert all(not p.trainable for _, p in enc.named_parameters()
               if not p.name.startswith("layer0.lora")
               and ".lora_" not in p.name)
    assert all(p.trainable for p in lora_parameters(enc))


def test_lora_base_frozen_after_training():
    from embalign.autodiff import Adam, Tape, backward

    enc = init_encoder(tiny_config(seed=3))
    attach_lora(enc, LoraConfig(rank=2), seed=1)
    base_digest = weights_digest(enc, include=lambda name: ".lora_" not in name)
    opt = Adam(lora_parameters(enc), lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        opt.zero_grad()
        with Tape() as tape:
            out = enc.encode([1, 2, 3, 4])
            loss = mse_loss(out, rng.standard_normal((4, 8)).astype(np.float32))
        backward(loss, tape)
        opt.step()
    after = weights_digest(enc, include=lambda name: ".lora_" not in name)
    assert base_digest == after
    # and the LoRA params actually moved
    assert any(np.abs(p.data).max() > 0 for p in lora_parameters(enc) if "b" in p.name)


def test_lora_rank_guard():
    enc = init_encoder(tiny_config())
    with pytest.raises(ConfigError):
        attach_lora(enc, LoraConfig(rank=8), seed=0)


# ---------------------------------------------------------------------------
# MLM pretraining
# ---------------------------------------------------------------------------


def test_mlm_zero_steps_is_noop():
    enc = init_encoder(tiny_config())
    before = weights_digest(enc)
    corpus = gen_token_corpus(0, vocab_size=12, num_sequences=10, length_range=(4, 6))
    _, losses = mlm_pretrain(enc, corpus, mask_rate=0.2, steps=0, lr=1e-3)
    assert losses == []
    assert weights_digest(enc) == before


def test_mlm_initial_loss_near_log_vocab():
    cfg = tiny_config(vocab_size=32, max_len=16)
    enc = init_encoder(cfg)
    corpus = gen_token_corpus(1, vocab_size=32, num_sequences=20, length_range=(8, 12))
    _, losses = mlm_pretrain(enc, corpus, mask_rate=0.2, steps=5, lr=1e-6, seed=0)
    assert losses[0] == pytest.approx(np.log(32), rel=0.05)


def test_mlm_empty_corpus():
    enc = init_encoder(tiny_config())
    with pytest.raises(DataError):
        mlm_pretrain(enc, [], mask_rate=0.2, steps=1, lr=1e-3)
    with pytest.raises(ConfigError):
        mlm_pretrain(enc, [[1, 2]], mask_rate=0.0, steps=1, lr=1e-3)


def test_mlm_loss_decreases():
    # pilot over 5 seeds put the 2000-step ratio at 0.63-0.74; the 0.8x bound
    # has healthy margin. Two seeds here keep the suite fast.
    cfg = EncoderConfig(num_layers=2, model_dim=32, num_heads=2, ffn_dim=64,
                        vocab_size=64, max_len=32, seed=0)
    for seed in (0, 1):
        enc = init_encoder(cfg)
        corpus = gen_token_corpus(seed, vocab_size=64, num_sequences=60,
                                  length_range=(8, 16))
        _, losses = mlm_pretrain(enc, corpus, mask_rate=0.15, steps=2000,
                                 lr=1e-2, seed=seed)
        initial = float(np.mean(losses[:50]))
        final = float(np.mean(losses[-50:]))
        assert final < 0.8 * initial, f"seed {seed}: {final:.3f} vs {initial:.3f}"
