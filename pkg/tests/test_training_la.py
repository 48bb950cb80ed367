import math

import numpy as np
import pytest

from adapterlab import autodiff as ad
from adapterlab.adapters import Adapter
from adapterlab.corpora import Vocab, gen_corpus, gen_language, pivot_grammar
from adapterlab.encoder import ConfigError, Encoder, ModelConfig
from adapterlab.rng import Rng
from adapterlab.tokens import CLS, IGNORE_INDEX, MASK, N_SPECIAL, PAD, SEP
from adapterlab.training_la import (BatchSampler, EvalRecord, LATrainConfig, PretrainConfig, _lr_at,
                                    masked_position_nll, mlm_mask, pad_batch, pair_items, perplexity,
                                    pretrain_backbone, select_min, train_bilingual_la,
                                    train_language_adapter)


def test_mask_statistics_within_three_sigma():
    rng = Rng(0)
    batch = np.full((200, 50), 10)
    batch[:, 0], batch[:, -1], batch[:, -5:-1] = CLS, SEP, PAD
    masked, labels = mlm_mask(batch, 0.15, rng, vocab_size=60)
    eligible = 200 * 45
    sel = labels != IGNORE_INDEX
    n = int(sel.sum())
    sd = math.sqrt(eligible * 0.15 * 0.85)
    assert abs(n - 0.15 * eligible) < 3 * sd
    assert not sel[:, 0].any() and not sel[:, -5:].any()
    assert np.all(labels[sel] == 10)
    n_mask = int((masked[sel] == MASK).sum())
    n_keep = int((masked[sel] == 10).sum())
    assert abs(n_mask - 0.8 * n) < 3 * math.sqrt(n * 0.16)
    # the random replacement can also draw the original id (prob 1/55)
    assert abs(n_keep - (0.1 + 0.1 / 55) * n) < 3 * math.sqrt(n * 0.1 * 0.9) + 1
    assert np.array_equal(masked[~sel], batch[~sel])
    assert np.all(masked[sel & (masked != MASK)] >= N_SPECIAL)


def test_mask_rejects_premasked_and_needs_a_range():
    with pytest.raises(ValueError):
        mlm_mask(np.array([[CLS, MASK, SEP]]), 0.15, Rng(0), vocab_size=10)
    with pytest.raises(ValueError):
        mlm_mask(np.array([[CLS, 7, SEP]]), 0.15, Rng(0))


def test_pad_batch():
    out = pad_batch([[0, 5, 1], [0, 1]])
    np.testing.assert_array_equal(out, [[0, 5, 1], [0, 1, PAD]])


def test_batch_sampler_covers_pool_each_epoch():
    s = BatchSampler(list(range(10)), 5, Rng(1))
    first = s.next() + s.next()
    assert sorted(first) == list(range(10))
    with pytest.raises(ValueError):
        BatchSampler([], 2, Rng(0))


def test_uniform_model_has_perplexity_equal_to_vocab():
    sents = [[CLS, 5, 6, 7, SEP], [CLS, 8, SEP]]

    def logit_fn(b, r, c):
        # uniform over the four word ids 5..8, impossible elsewhere
        out = np.full((len(r), 9), -np.inf)
        out[:, 5:] = 0.0
        return out

    total, count = masked_position_nll(logit_fn, sents)
    assert count == 4
    assert math.exp(total / count) == pytest.approx(4.0, abs=1e-12)


def test_memorizer_has_perplexity_near_one():
    sents = [[CLS, 7, 7, 7, SEP]] * 3

    def logit_fn(b, r, c):
        out = np.zeros((len(r), 12))
        out[:, 7] = 50.0
        return out

    total, count = masked_position_nll(logit_fn, sents)
    assert math.exp(total / count) == pytest.approx(1.0, abs=1e-12)


def test_nll_matches_scalar_oracle():
    rng = Rng(3)
    W = rng.normal_array((6, 9), 1.0).astype(np.float64)
    sents = [[CLS, 5, 8, SEP], [CLS, 6, 7, 5, SEP]]

    def logit_fn(b, r, c):
        # depends on the masked position and the token to its left
        return np.stack([W[c[i] % 6] + 0.1 * b[r[i], c[i] - 1] for i in range(len(r))])

    total, count = masked_position_nll(logit_fn, sents, batch_size=2)
    expected = 0.0
    for s in sents:
        for p in range(1, len(s) - 1):
            z = W[p % 6] + 0.1 * s[p - 1]
            expected += -(z[s[p]] - math.log(sum(math.exp(v) for v in z)))
    assert count == 5
    assert total == pytest.approx(expected, rel=1e-12)


def test_select_min_prefers_earliest_tie():
    h = [EvalRecord(250, 3.0), EvalRecord(500, 2.5), EvalRecord(750, 2.5), EvalRecord(1000, 2.7)]
    assert select_min(h).step == 500


def test_config_validation():
    with pytest.raises(ConfigError):
        LATrainConfig(steps=100, eval_every=60)
    with pytest.raises(ConfigError):
        LATrainConfig(mask_rate=0.0)
    with pytest.raises(ConfigError):
        PretrainConfig(pair_weight=-1.0)


def test_warmup_then_linear_decay():
    cfg = PretrainConfig(steps=100, warmup=10, lr=1.0)
    assert _lr_at(0, cfg) == pytest.approx(0.1)
    assert _lr_at(9, cfg) == pytest.approx(1.0)
    assert _lr_at(10, cfg) == pytest.approx(1.0)
    assert _lr_at(55, cfg) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def toy():
    lang = gen_language("la1", 2, 1.0)
    vocab = Vocab([lang])
    corpus = gen_corpus(lang, pivot_grammar(), 240, seed=4, heldout_fraction=0.1)
    cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, ffn_size=32, vocab_size=len(vocab), max_len=16,
                      la_reduction=2, ta_reduction=4)
    return cfg, vocab, corpus.ids(vocab), corpus.ids(vocab, "heldout")


def run_la(toy, seed=0):
    cfg, vocab, train, heldout = toy
    enc = Encoder(cfg, Rng(1))
    la = Adapter.new("LA", "la1", cfg, Rng(2))
    tc = LATrainConfig(steps=60, batch_size=8, lr=3e-3, eval_every=20, seed=seed)
    return enc, train_language_adapter(enc, train, heldout, tc, la)


def test_la_training_freezes_backbone_and_restores_best(toy):
    cfg, _, _, heldout = toy
    before = {n: p.data.copy() for n, p in Encoder(cfg, Rng(1)).params.items()}
    enc, (la, hist) = run_la(toy)
    for n, p in enc.params.items():
        assert p.data.tobytes() == before[n].tobytes()
        assert not p.requires_grad
    assert all(not p.requires_grad for _, p in la.params.items())
    assert [r.step for r in hist] == [20, 40, 60]
    assert perplexity(enc, la, heldout) == pytest.approx(select_min(hist).heldout_ppl, rel=1e-9)


def test_la_training_improves_over_the_bare_backbone(toy):
    cfg, _, _, heldout = toy
    bare = perplexity(Encoder(cfg, Rng(1)), None, heldout)
    _, (_, hist) = run_la(toy)
    assert select_min(hist).heldout_ppl < bare


def test_la_training_is_deterministic(toy):
    _, (a, ha) = run_la(toy)
    _, (b, hb) = run_la(toy)
    assert ha == hb
    for n, p in a.params.items():
        assert p.data.tobytes() == b.params[n].data.tobytes()


def test_la_training_rejects_task_adapter(toy):
    cfg, _, train, heldout = toy
    with pytest.raises(ConfigError):
        train_language_adapter(Encoder(cfg, Rng(1)), train, heldout, LATrainConfig(steps=4, eval_every=2),
                               Adapter.new("TA", "t", cfg, Rng(0)))


def test_bilingual_alternates_and_uses_union(toy, monkeypatch):
    cfg, _, train, heldout = toy
    import adapterlab.training_la as tl
    seen_heldout = []
    real = tl.perplexity
    monkeypatch.setattr(tl, "perplexity", lambda e, la, h, **k: seen_heldout.append(len(h)) or real(e, la, h))
    names = []
    tc = LATrainConfig(steps=6, batch_size=4, lr=1e-3, eval_every=3)
    train_bilingual_la(Encoder(cfg, Rng(1)), (train[:100], heldout[:7]), (train[100:], heldout[7:]), tc,
                       Adapter.new("LA", "bi", cfg, Rng(0)), on_batch=lambda s, n: names.append(n))
    assert names == ["src", "tgt"] * 3
    assert seen_heldout == [len(heldout)] * 2


def test_pretraining_lowers_loss(toy):
    cfg, _, train, _ = toy
    enc = Encoder(cfg, Rng(5))
    losses = pretrain_backbone(enc, train, PretrainConfig(steps=80, batch_size=16, lr=3e-3, warmup=10))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert all(not p.requires_grad for _, p in enc.params.items())


def _pairs(n):
    return [[CLS, 10 + i % 7, 20 + i, SEP, 200 + i, 300 + i % 5, SEP] for i in range(n)]


def test_pair_items_mix_true_and_swapped_translations():
    pairs = _pairs(400)
    items = pair_items(pairs, Rng(3))
    assert len(items) == 400
    neg = sum(1 for _, y in items if y == 0)
    assert abs(neg - 200) <= 3 * math.sqrt(100)
    for (s, y), src in zip(items, pairs):
        assert s[:4] == src[:4] and s[-1] == SEP and s.count(SEP) == 2
        if y == 1:
            assert s == src
        else:
            assert s[4] != src[4] and s[4:] in [p[4:] for p in pairs]
    assert items == pair_items(pairs, Rng(3))


def test_pair_items_reject_single_sentences():
    with pytest.raises(ValueError):
        pair_items([[CLS, 9, SEP]], Rng(0))


def test_zero_pair_weight_is_plain_mlm_over_the_pairs(toy):
    cfg, _, train, _ = toy
    pairs = [s + s[1:] for s in train[:40] if len(s) * 2 - 1 <= cfg.max_len]
    pc = PretrainConfig(steps=12, batch_size=8, warmup=2, pair_weight=0.0)
    a, b = Encoder(cfg, Rng(5)), Encoder(cfg, Rng(5))
    la = pretrain_backbone(a, train[40:], pc, pairs=pairs)
    lb = pretrain_backbone(b, list(train[40:]) + pairs, pc)
    assert la == lb
    for n, p in a.params.items():
        assert p.data.tobytes() == b.params[n].data.tobytes()


def test_pair_objective_changes_the_backbone(toy):
    cfg, _, train, _ = toy
    pairs = [s + s[1:] for s in train[:40] if len(s) * 2 - 1 <= cfg.max_len]
    runs = []
    for w in (0.0, 1.0):
        enc = Encoder(cfg, Rng(5))
        losses = pretrain_backbone(enc, train[40:], PretrainConfig(steps=12, batch_size=8, warmup=2,
                                                                   pair_weight=w), pairs=pairs)
        assert all(np.isfinite(losses))
        runs.append(enc.state_dict())
    assert any(runs[0][n].tobytes() != runs[1][n].tobytes() for n in runs[0])
