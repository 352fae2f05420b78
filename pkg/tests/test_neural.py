import math
from collections import Counter

import numpy as np
import pytest
import torch

from sowreap.bpe import BpeVocab, bpe_apply, bpe_decode, bpe_train
from sowreap.decoding import beam_decode, greedy_decode, sample_top_k
from sowreap.model import (ModelConfig, decode_step, load_checkpoint, save_checkpoint,
                           sinusoidal_embedding, sinusoidal_table, subword_order_positions)
from sowreap.seq2seq import ReapGenerator, reap_example, sow_example
from sowreap.sow import OrderPreference
from sowreap.synthetic import generate_corpus
from sowreap.training import (Example, batch_loss, collate, coverage_loss, coverage_schedule, make_optimizer,
                              sequence_nll, train_step)

from conftest import tiny_model

# ---------------------------------------------------------------- BPE


def test_bpe_zero_merges_is_character_level():
    v = bpe_train([["low", "lower"]], 0)
    assert v.merges == []
    assert v.segment("lower") == ["l", "o", "w", "e", "r</w>"]


def test_bpe_first_merge_is_most_frequent_pair():
    corpus = [["low", "lower", "lowest"]]
    counts = Counter()
    for w in corpus[0]:
        syms = list(w[:-1]) + [w[-1] + "</w>"]
        for a, b in zip(syms, syms[1:]):
            counts[a, b] += 1
    top = max(counts.values())
    expected = min(p for p, c in counts.items() if c == top)
    v = bpe_train(corpus, 1)
    assert v.merges[0] == expected == ("l", "o")


def test_bpe_deterministic_and_round_trip():
    corpus = [r["source"].split() for r in generate_corpus(100, seed=3)]
    v1, v2 = bpe_train(corpus, 50), bpe_train(corpus, 50)
    assert v1.merges == v2.merges
    for sent in corpus:
        text = " ".join(sent)
        assert bpe_decode(v1, bpe_apply(v1, text)) == text
    assert bpe_apply(v1, "") == []
    assert v1.unk_id in bpe_apply(v1, "dög")
    assert BpeVocab.loads(v1.dumps()).merges == v1.merges
    with pytest.raises(ValueError):
        bpe_train(corpus, -1)


def test_bpe_ids_dense_and_labels_atomic(small_vocab):
    assert sorted(small_vocab.token_to_id.values()) == list(range(len(small_vocab)))
    ids, owner = small_vocab.encode_tokens(["NP", "dog", "VP"])
    assert ids[0] == small_vocab.label_ids["NP"] and ids[-1] == small_vocab.label_ids["VP"]
    assert small_vocab.decode_tokens(ids) == ["NP", "dog", "VP"]
    assert owner[0] == 0 and owner[-1] == 2


def test_bpe_save_load(tmp_path, small_vocab):
    small_vocab.save(tmp_path / "v.bpe")
    v = BpeVocab.load(tmp_path / "v.bpe")
    assert v.id_to_token == small_vocab.id_to_token

# ---------------------------------------------------------------- positions


def test_sinusoid_examples():
    assert sinusoidal_embedding(0, 6).tolist() == [0, 1, 0, 1, 0, 1]
    v = sinusoidal_embedding(1, 4)
    assert v == pytest.approx([math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], abs=1e-15)
    assert v == pytest.approx([0.84147, 0.54030, 0.01000, 0.99995], abs=5e-6)
    with pytest.raises(ValueError):
        sinusoidal_embedding(1, 5)


def test_sinusoid_rows_distinct():
    table = sinusoidal_table(512, 64)
    d = ((table[:, None, :] - table[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-6


def test_subword_positions_are_permutation():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        pos = [int(x) + 1 for x in rng.permutation(n)]
        owner = [w for w in range(n) for _ in range(int(rng.integers(1, 4)))]
        out = subword_order_positions(pos, owner)
        assert sorted(out) == list(range(1, len(owner) + 1))
        # pieces of the word placed first come first
        first = pos.index(1)
        assert [out[i] for i, w in enumerate(owner) if w == first] == list(range(1, owner.count(first) + 1))


def test_reap_example_order_is_inverse_permutation(small_vocab):
    ex = reap_example(small_vocab, ["NP", "VP", "S"], (3, 1, 2), ["S", "NP", "VP"])
    assert ex.order == [2, 3, 1]


def test_sow_example_positions(small_vocab):
    ex = sow_example(small_vocab, ["NP", "dog", "VP"], ["NP", "NN", "VP"], (1, 3), OrderPreference.FLIP)
    first_piece = ex.order[0]
    assert first_piece == 2 and ex.order[-1] == 1
    assert all(o == 0 for o in ex.order[1:-1])
    assert ex.aux[0] == small_vocab.label_ids["NP"]

# ---------------------------------------------------------------- model


def test_defaults_match_hyperparameter_table():
    c = ModelConfig()
    assert (c.hidden_size, c.encoder_layers, c.decoder_layers, c.heads, c.dropout) == (256, 2, 2, 8, 0.1)
    with pytest.raises(ValueError):
        ModelConfig(hidden_size=30, heads=8)


def _batch(model, b=3, s=5, t=4, seed=0, aux=False):
    g = torch.Generator().manual_seed(seed)
    v = model.config.vocab_size
    src = torch.randint(4, v, (b, s), generator=g)
    order = torch.stack([torch.randperm(s, generator=g) + 1 for _ in range(b)])
    tgt = torch.randint(4, v, (b, t), generator=g)
    exs = [Example(src[i].tolist(), order[i].tolist(), tgt[i].tolist(),
                   src[i].tolist() if aux else None) for i in range(b)]
    return collate(exs)


def test_encoder_additivity_exact():
    m = tiny_model().eval()
    b = _batch(m)
    e_m = m.encode(b.src, b.src_pad)
    e = m.encode_with_order(b.src, b.order, b.src_pad)
    assert torch.equal(e, e_m + m.pe[b.order])
    other = torch.flip(b.order, dims=[1])
    e2 = m.encode_with_order(b.src, other, b.src_pad)
    # the body never sees r, so E_M is reproduced bit for bit under any order
    assert torch.equal(e2, m.encode(b.src, b.src_pad) + m.pe[other])
    # float subtraction does not undo addition bit for bit; the residual is rounding only
    diff = (e - e2) - (m.pe[b.order] - m.pe[other])
    assert diff.abs().max() <= 4 * torch.finfo(e.dtype).eps * e.abs().max()


def test_pe_buffer_equals_sinusoid_table():
    m = tiny_model()
    assert torch.equal(m.pe, torch.tensor(sinusoidal_table(m.config.max_positions + 1, 16), dtype=m.pe.dtype))
    assert m.pe[0].tolist() == [0.0, 1.0] * 8


def test_sow_variant_requires_tags():
    m = tiny_model(variant="SOW").eval()
    b = _batch(m, aux=True)
    with pytest.raises(ValueError):
        m.encode(b.src, b.src_pad)
    assert m.encode(b.src, b.src_pad, b.aux).shape == (3, 5, 16)
    with pytest.raises(ValueError):
        m.encode_with_order(b.src, b.order[:, :2], b.src_pad, b.aux)


def test_decode_step_attention_properties():
    m = tiny_model(layers=2).eval()
    b = _batch(m, s=6)
    b.src_pad[0, 4:] = True
    mem = m.encode_with_order(b.src, b.order, b.src_pad)
    logits, attn = decode_step(m, mem, b.tgt_in, b.src_pad)
    assert torch.isfinite(logits).all()
    assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-5)
    assert attn[0, :, 4:].abs().max() == 0
    # causal mask: changing a later target token leaves earlier logits untouched
    full, _ = m.decode(b.tgt_in, mem, b.src_pad)
    altered = b.tgt_in.clone()
    altered[:, -1] = 5
    full2, _ = m.decode(altered, mem, b.src_pad)
    assert torch.equal(full[:, :-1], full2[:, :-1])
    with pytest.raises(ValueError):
        decode_step(m, mem, torch.ones(1, 100, dtype=torch.long))


def test_self_attention_weights_causal():
    m = tiny_model().eval()
    layer = m.decoder[0].self_attn
    x = torch.randn(1, 5, 16)
    _, w = layer(x, x, causal=True)
    assert torch.triu(w[0, 0], diagonal=1).abs().max() == 0

# ---------------------------------------------------------------- losses


def test_coverage_examples():
    one_hot = torch.zeros(2, 4)
    one_hot[:, 2] = 1
    assert coverage_loss(one_hot[:1]) == 0
    assert coverage_loss(one_hot) == pytest.approx(1.0)
    n = 5
    uniform = torch.full((2, n), 1 / n)
    assert coverage_loss(uniform) == pytest.approx(1.0)
    masked = coverage_loss(one_hot[None], torch.tensor([[True, False]]))
    assert masked == 0


def test_coverage_schedule():
    assert [coverage_schedule(e) for e in (1, 10, 11, 20, 21, 50)] == [1.0, 1.0, 0.5, 0.5, 0.0, 0.0]


def test_zero_coefficient_is_pure_nll():
    m = tiny_model()
    b = _batch(m)
    torch.manual_seed(0)
    total, nll, _ = batch_loss(m, b, 0.0)
    assert torch.equal(total, nll)


def test_gradients_match_finite_differences():
    m = tiny_model(hidden=16, layers=1, dtype=torch.float64)
    b = _batch(m, b=2, s=4, t=3)
    rng = np.random.default_rng(0)
    params = [p for p in m.parameters()]
    m.zero_grad()
    batch_loss(m, b, 1.0)[0].backward()
    eps = 1e-6
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = batch_loss(m, b, 1.0)[0].item()
            p[idx] = orig - eps
            down = batch_loss(m, b, 1.0)[0].item()
            p[idx] = orig
        fd = (up - down) / (2 * eps)
        an = p.grad[idx].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6) or abs(fd - an) < 1e-8


def test_overfit_single_batch():
    m = tiny_model(vocab_size=20, hidden=32, layers=1, heads=4)
    b = _batch(m, b=2, s=5, t=5, seed=1)
    opt = make_optimizer(m, lr=3e-3)
    for _ in range(200):
        train_step(m, opt, b, 0.0)
    exs = [Example(b.src[i].tolist(), b.order[i].tolist(), b.tgt_out[i, :5].tolist()) for i in range(2)]
    assert max(sequence_nll(m, exs)) < 0.1


def test_train_step_rejects_nonfinite():
    from sowreap.training import NumericalError
    m = tiny_model()
    with torch.no_grad():
        m.out_proj.weight.fill_(float("nan"))
    with pytest.raises(NumericalError):
        train_step(m, make_optimizer(m), _batch(m))


def test_untrained_uniform_perplexity():
    m = tiny_model(vocab_size=40)
    with torch.no_grad():
        m.out_proj.weight.zero_()
        m.out_proj.bias.zero_()
    exs = [Example([5, 6, 7], [1, 2, 3], [8, 9])]
    assert math.exp(sequence_nll(m, exs)[0]) == pytest.approx(40, rel=1e-6)
    with pytest.raises(ValueError):
        sequence_nll(m, [Example([5], [1], [])])


def test_nll_invariant_to_padding():
    m = tiny_model().eval()
    short = Example([5, 6], [2, 1], [7, 8])
    long = Example([5, 6, 7, 8, 9, 10], [1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11])
    alone = sequence_nll(m, [short])[0]
    padded = sequence_nll(m, [short, long])[0]
    assert alone == pytest.approx(padded, abs=1e-5)

# ---------------------------------------------------------------- decoding


def _eos_biased(seed=0, bias=2.0):
    m = tiny_model(vocab_size=12, hidden=16, seed=seed).eval()
    with torch.no_grad():
        m.out_proj.bias[2] += bias
    return m


def _memory(m, seed):
    b = _batch(m, b=1, s=4, seed=seed)
    return m.encode_with_order(b.src, b.order, b.src_pad), b


def test_topk_one_equals_greedy_and_seed_determinism():
    m = _eos_biased()
    for seed in range(10):
        mem, _ = _memory(m, seed)
        g = greedy_decode(m, mem, max_len=12)[0]
        assert sample_top_k(m, mem, 1, seed=99, max_len=12) == g
        assert sample_top_k(m, mem, 5, seed=7, max_len=12) == sample_top_k(m, mem, 5, seed=7, max_len=12)


def test_topk_full_vocab_is_full_distribution_sampling():
    m = _eos_biased(bias=0.0)
    mem, _ = _memory(m, 0)
    logits, _ = decode_step(m, mem, torch.tensor([[1]]))
    probs = torch.softmax(logits[0].double(), -1)
    firsts = Counter()
    for s in range(3000):
        out = sample_top_k(m, mem, m.config.vocab_size, seed=s, max_len=2)
        firsts[out[0] if out else 2] += 1
    for tok in range(m.config.vocab_size):
        assert abs(firsts[tok] / 3000 - probs[tok].item()) < 0.035


def _rescore(m, mem, ids, eos=2):
    seq = [1] + ids + [eos]
    with torch.no_grad():
        logits, _ = m.decode(torch.tensor([seq[:-1]]), mem)
        logp = torch.log_softmax(logits[0].double(), -1)
    return sum(logp[i, t].item() for i, t in enumerate(seq[1:]))


def test_beam_rescoring_and_width():
    m = _eos_biased(bias=1.5)
    wins = 0
    for seed in range(50):
        mem, _ = _memory(m, seed)
        ids1, s1 = beam_decode(m, mem, 1, max_len=30)
        assert ids1 == greedy_decode(m, mem, max_len=30)[0]
        ids4, s4 = beam_decode(m, mem, 4, max_len=30)
        assert s4 == pytest.approx(_rescore(m, mem, ids4), abs=1e-5)
        assert s1 == pytest.approx(_rescore(m, mem, ids1), abs=1e-5)
        assert s4 >= s1 - 1e-9
        wins += s4 > s1 + 1e-9
    assert wins > 0

# ---------------------------------------------------------------- persistence & generator


def test_checkpoint_round_trip(tmp_path, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab), variant="SOW").eval()
    save_checkpoint(tmp_path / "m.npz", m, small_vocab, {"epoch": 3})
    m2, v2, header = load_checkpoint(tmp_path / "m.npz")
    assert header["extra"] == {"epoch": 3} and m2.config == m.config
    assert v2.id_to_token == small_vocab.id_to_token
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k


def test_generator_order_sensitivity(small_vocab):
    m = tiny_model(vocab_size=len(small_vocab)).eval()
    gen = ReapGenerator(m, small_vocab)
    toks = ["the", "dog", "saw", "a", "cat"]
    ex1 = reap_example(small_vocab, toks, (1, 2, 3, 4, 5), ["dog"])
    ex2 = reap_example(small_vocab, toks, (5, 4, 3, 2, 1), ["dog"])
    b1, b2 = collate([ex1]), collate([ex2])
    with torch.no_grad():
        l1, _ = m(b1.src, b1.order, b1.tgt_in, b1.src_pad)
        l2, _ = m(b2.src, b2.order, b2.tgt_in, b2.src_pad)
    p1, p2 = torch.log_softmax(l1[0, 0], -1), torch.log_softmax(l2[0, 0], -1)
    kl = (p1.exp() * (p1 - p2)).sum()
    assert kl > 0
    ppl = gen.perplexity(toks, [(1, 2, 3, 4, 5), (5, 4, 3, 2, 1)], ["dog"])
    assert len(ppl) == 2 and ppl[0] != ppl[1]
    out = gen.generate_batch([(toks, (1, 2, 3, 4, 5)), (toks[:2], (2, 1))])
    assert len(out) == 2
    assert gen.generate(toks, (1, 2, 3, 4, 5), method="greedy") == out[0]
    with pytest.raises(ValueError):
        gen.generate(toks, (1, 2, 3, 4, 5), method="nope")
