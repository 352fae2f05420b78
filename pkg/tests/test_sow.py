import numpy as np
import pytest

from sowreap.embeddings import HashEmbeddings
from sowreap.model import order_preference_positions
from sowreap.sow import (EchoTransducer, EngineConfig, OrderPreference, PhraseReordering, PhraseTuple,
                         SowEngine, SwapTransducer, align_output, combine_reorderings, dumps_report,
                         nonterminal_symbols, permutation_from_alignment, reorder_phrase, reorder_sentence,
                         reordering_report, select_segment_pairs)
from sowreap.syntax import PermutationError, Reordering, apply_permutation, check_permutation, parse_ptb

from conftest import random_tree

MONO, FLIP = OrderPreference.MONOTONE, OrderPreference.FLIP


class Scripted:
    """Transducer that returns fixed outputs for given (input, preference) pairs and echoes otherwise."""

    def __init__(self, table, score=-1.0):
        self.table = table
        self.score = score
        self.calls = []

    def transduce(self, tokens, tags, nt_positions, preference):
        self.calls.append((tuple(tokens), tuple(nt_positions)))
        key = (" ".join(tokens), preference)
        if key in self.table:
            return self.table[key].split(), self.score
        return list(tokens), -0.1


def _node(tree, span):
    return next(n for n in tree.subtrees() if n.span == span)


def test_threshold_excludes_small_abstraction():
    # ten tokens; the only eligible pair (NP over 2 tokens, ADJP over 1) covers 3 tokens -> 0.7 unabstracted
    t = parse_ptb("(S (NP (NN a) (NN b)) (X (q c) (q d) (q e) (q f) (q g) (q h) (q i)) (ADJP (JJ j)))")
    cfg = EngineConfig(ignored_tags=("q", "NN", "JJ", "X"))
    assert len(t) == 10
    assert select_segment_pairs(t, cfg) == []
    t2 = parse_ptb("(S (NP (NN a) (NN b) (NN c) (NN d)) (ADJP (JJ e)) (X (q f) (q g) (q h) (q i) (q j)))")
    pts = select_segment_pairs(t2, cfg)
    assert [(p.a_node.label, p.b_node.label) for p in pts] == [("NP", "ADJP")]
    assert pts[0].unabstracted_fraction == pytest.approx(0.5)


def test_ignored_tag_node_excluded():
    t = parse_ptb("(S (DT the) (NP (NN dog) (NN house)) (VP (VBD ran) (RB far)))")
    pts = select_segment_pairs(t, EngineConfig(abstraction_threshold=1.0))
    assert pts
    for p in pts:
        assert "DT" not in (p.a_node.label, p.b_node.label)


def test_punctuation_never_abstracted(warning_tree):
    for p in select_segment_pairs(warning_tree, EngineConfig(candidate_limit=1000)):
        assert p.a_node.label != "." and p.b_node.label != "."


def test_warning_label_root_tuple(warning_tree):
    pts = select_segment_pairs(warning_tree, EngineConfig(candidate_limit=1000))
    yields = {" ".join(p.abstracted_yield): p for p in pts}
    assert "if S it should not VB used ." in yields
    p = yields["if S it should not VB used ."]
    assert p.unabstracted_fraction == pytest.approx(6 / 23)
    assert p.abstracted_tags == ["IN", "S", "PRP", "MD", "RB", "VB", "VBN", "."]
    assert p.nonterminal_positions == (2, 6)


def test_candidates_sorted_and_capped(warning_tree):
    cfg = EngineConfig()
    pts = select_segment_pairs(warning_tree, cfg)
    assert len(pts) == cfg.candidate_limit
    fracs = [p.unabstracted_fraction for p in pts]
    assert fracs == sorted(fracs)


def test_threshold_property_random_trees():
    rng = np.random.default_rng(0)
    for _ in range(300):
        t = parse_ptb(random_tree(rng, int(rng.integers(2, 16))))
        for p in select_segment_pairs(t):
            assert p.unabstracted_fraction <= 0.6 + 1e-12
            assert p.a_node.end < p.b_node.start
            syms = set(p.symbols)
            assert sum(1 for w in p.abstracted_yield if w in syms) == 2


def test_phrase_tuple_validation():
    t = parse_ptb("(S (NP (NN a) (NN b)) (VP (VB c) (NP (NN d))))")
    a, b = _node(t, (1, 2)), _node(t, (3, 4))
    swapped = PhraseTuple(t, b, a)
    assert swapped.a_node is a and swapped.b_node is b
    with pytest.raises(ValueError):
        PhraseTuple(t, a, _node(t, (1, 1)))
    with pytest.raises(ValueError):
        PhraseTuple(t, t, b)


def test_equal_labels_get_indices():
    assert nonterminal_symbols("NP", "NP") == ("NP_1", "NP_2")
    assert nonterminal_symbols("NP", "VP") == ("NP", "VP")
    t = parse_ptb("(S (NP (DT the) (NN dog)) (VBD saw) (NP (DT a) (NN cat)))")
    p = PhraseTuple(t, _node(t, (1, 2)), _node(t, (4, 5)))
    assert p.abstracted_yield == ["NP_1", "saw", "NP_2"]


def test_order_preference_positions():
    assert order_preference_positions((2, 5), 5, MONO) == [0, 1, 0, 0, 2]
    assert order_preference_positions((2, 5), 5, FLIP) == [0, 2, 0, 0, 1]
    assert order_preference_positions((1, 2), 2, MONO) == [1, 2]
    with pytest.raises(ValueError):
        order_preference_positions((2, 2), 5, MONO)


def test_reorder_phrase_warning_label_flip(warning_tree):
    pts = select_segment_pairs(warning_tree, EngineConfig(candidate_limit=1000))
    p = next(p for p in pts if " ".join(p.abstracted_yield) == "if S it should not VB used .")
    tr = Scripted({("if S it should not VB used .", FLIP): "should not VB used if S"})
    z = reorder_phrase(p, FLIP, tr, HashEmbeddings())
    check_permutation(z.perm)
    out = apply_permutation(p.abstracted_yield, z.perm)
    assert out.index("if") > out.index("used") and out.index("S") > out.index("VB")
    assert z.degraded  # "it" and "." were not realised and keep their own slots
    assert z.perm == (4, 5, 3, 6, 7, 1, 2, 8)
    assert z.score == -1.0


def test_reorder_phrase_second_half_first():
    t = parse_ptb("(S (IN if) (S (NN x)) (PRP i) (MD will) (VP (VB go)))")
    p = PhraseTuple(t, t.children[1], t.children[4])
    assert p.abstracted_yield == ["if", "S", "i", "will", "VP"]
    tr = Scripted({("if S i will VP", FLIP): "will VP if S i"})
    z = reorder_phrase(p, FLIP, tr, HashEmbeddings())
    assert z.perm == (4, 5, 1, 2, 3) and not z.degraded


def test_untrained_output_still_permutation():
    rng = np.random.default_rng(0)
    emb = HashEmbeddings()
    t = parse_ptb("(S (S (NN a)) (VP (VB b)))")
    p = PhraseTuple(t, t.children[0], t.children[1])
    for _ in range(50):
        junk = list(rng.choice(["S", "VP", "zz", "b", "a", "qq"], size=int(rng.integers(0, 6))))
        tr = Scripted({("S VP", MONO): " ".join(junk)})
        z = reorder_phrase(p, MONO, tr, emb)
        check_permutation(z.perm, 2)


def test_align_output_rules():
    emb = HashEmbeddings()
    inp = ["the", "NP", "the", "saw", "VP"]
    nt = [False, True, False, False, True]
    assert align_output(inp, nt, ["VP", "the", "the", "NP", "saw"], emb) == [5, 1, 3, 2, 4]
    # a non-terminal symbol never matches a word and vice versa
    assert align_output(inp, nt, ["NP", "NP"], emb) == [2]
    assert permutation_from_alignment([2], 5) == ((1, 2, 3, 4, 5), True)
    with pytest.raises(PermutationError):
        permutation_from_alignment([1, 1], 2)


def _brute_combine(z, r_a, r_b, pt):
    words = [f"t{i}" for i in range(1, len(pt.parent) + 1)]
    a = words[pt.a_node.start - 1:pt.a_node.end]
    b = words[pt.b_node.start - 1:pt.b_node.end]
    a, b = apply_permutation(a, r_a), apply_permutation(b, r_b)
    items = [a if s == "A" else b if s == "B" else [words[s - 1]] for s in pt.slots]
    flat = [w for j in z.perm for w in items[j - 1]]
    return tuple(int(w[1:]) for w in flat)


def test_combine_examples():
    t = parse_ptb("(S (NP (a x) (a y) (a z)) (V w) (VP (b u) (b v)))")
    pt = PhraseTuple(t, t.children[0], t.children[2])
    ident = PhraseReordering((1, 2, 3), 0.0, MONO)
    r = combine_reorderings(ident, Reordering.identity(3), Reordering.identity(2), pt)
    assert r.perm == (1, 2, 3, 4, 5, 6)
    flip = PhraseReordering((3, 2, 1), -0.5, FLIP, ("VP", "w", "NP"))
    r = combine_reorderings(flip, Reordering.identity(3, -0.25), Reordering.identity(2), pt, level=0)
    assert r.perm == (5, 6, 4, 1, 2, 3)
    assert r.perm == _brute_combine(flip, Reordering.identity(3), Reordering.identity(2), pt)
    assert r.score == pytest.approx(-0.75)
    assert r.provenance[0].output == "VP w NP"
    with pytest.raises(PermutationError):
        combine_reorderings(flip, Reordering.identity(2), Reordering.identity(2), pt)


def test_combine_matches_span_substitution_random():
    rng = np.random.default_rng(4)
    for _ in range(200):
        t = parse_ptb(random_tree(rng, int(rng.integers(3, 12))))
        pts = select_segment_pairs(t, EngineConfig(abstraction_threshold=1.0, candidate_limit=1000,
                                                   ignored_tags=()))
        if not pts:
            continue
        pt = pts[int(rng.integers(len(pts)))]
        zp = tuple(int(x) + 1 for x in rng.permutation(len(pt.slots)))
        ra = Reordering(tuple(int(x) + 1 for x in rng.permutation(len(pt.a_node))))
        rb = Reordering(tuple(int(x) + 1 for x in rng.permutation(len(pt.b_node))))
        z = PhraseReordering(zp, 0.0, MONO)
        assert combine_reorderings(z, ra, rb, pt).perm == _brute_combine(z, ra, rb, pt)


def test_reorder_single_leaf_and_flat():
    t = parse_ptb("(NN dog)")
    assert reorder_sentence(t, SwapTransducer()) == [Reordering.identity(1)]
    t = parse_ptb("(S (DT the) (NN dog))")
    out = reorder_sentence(t, SwapTransducer())
    assert [r.perm for r in out] == [(1, 2)] and out[0].score == 0


def test_echo_transducer_gives_identity_only():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = parse_ptb(random_tree(rng, int(rng.integers(2, 14))))
        out = reorder_sentence(t, EchoTransducer())
        assert [r.perm for r in out] == [tuple(range(1, len(t) + 1))]


def test_reorder_sentence_invariants(warning_tree):
    rng = np.random.default_rng(3)
    trees = [warning_tree] + [parse_ptb(random_tree(rng, int(rng.integers(2, 20)))) for _ in range(100)]
    for t in trees:
        out = reorder_sentence(t, SwapTransducer(), k=10)
        assert 1 <= len(out) <= 10
        perms = [r.perm for r in out]
        assert len(set(perms)) == len(perms)
        for r in out:
            check_permutation(r.perm, len(t))
            assert r.n_rules <= 3
        scores = [r.score for r in out]
        assert scores == sorted(scores, reverse=True)
        assert tuple(range(1, len(t) + 1)) in perms


def test_transducer_sees_exactly_two_nonterminals(warning_tree):
    tr = Scripted({})
    SowEngine(tr).reorder(warning_tree)
    assert tr.calls
    for tokens, nt in tr.calls:
        assert len(set(nt)) == 2
        assert all(1 <= p <= len(tokens) for p in nt)


def test_rule_levels_and_budget():
    # right-branching tree: each level offers one flip, nested three deep
    t = parse_ptb("(S (NP (NN a) (NN b)) (S (NP (NN c) (NN d)) (S (NP (NN e) (NN f)) (S (NP (NN g) (NN h)) (VP (VB i) (VB j))))))")
    cfg = EngineConfig(k=50, abstraction_threshold=1.0, max_rules=3)
    out = SowEngine(SwapTransducer(), config=cfg).reorder(t)
    assert max(r.n_rules for r in out) == 3
    deepest = max(out, key=lambda r: (r.n_rules, r.score))
    assert sorted(rule.level for rule in deepest.provenance)[0] == 0
    for r in out:
        levels = sorted(rule.level for rule in r.provenance)
        assert all(lv < cfg.max_rules for lv in levels)
    capped = SowEngine(SwapTransducer(), config=EngineConfig(k=50, abstraction_threshold=1.0, max_rules=1)).reorder(t)
    assert max(r.n_rules for r in capped) == 1


def test_final_score_is_mean_over_rules():
    t = parse_ptb("(S (NP (NN a) (NN b)) (VP (VB c) (NP (NN d) (NN e))))")
    out = reorder_sentence(t, SwapTransducer(), k=20, config=EngineConfig(k=20, abstraction_threshold=1.0))
    for r in out:
        if r.n_rules:
            assert r.score <= 0


def test_report_format(warning_tree):
    tr = Scripted({("if S it should not VB used .", FLIP): "should not VB used if S"}, score=-0.01)
    eng = SowEngine(tr, config=EngineConfig(candidate_limit=1000))
    out = eng.reorder(warning_tree)
    withrule = next(r for r in out if any(x.abstracted_input == "if S it should not VB used ." for x in r.provenance))
    rep = reordering_report("s1", withrule)
    assert rep["sentence_id"] == "s1" and rep["perm"] == list(withrule.perm)
    assert rep["rules"][0] == {"level": 0, "abstracted_input": "if S it should not VB used .",
                               "output": "should not VB used if S"}
    assert dumps_report("s1", withrule).startswith("{")


def test_engine_rejects_bad_k(warning_tree):
    with pytest.raises(ValueError):
        SowEngine(SwapTransducer(), config=EngineConfig(k=0)).reorder(warning_tree)
