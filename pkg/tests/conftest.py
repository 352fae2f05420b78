import numpy as np
import pytest
import torch

from sowreap.bpe import bpe_train
from sowreap.embeddings import HashEmbeddings
from sowreap.model import ModelConfig, TransformerModel
from sowreap.syntax import parse_ptb

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# Bracketing of the 23-token warning-label sentence used in the rule-sequence example.
WARNING_LABEL_PTB = (
    "(S (SBAR (IN if) (S (PP (IN at) (NP (NP (DT any) (NN time)) (PP (IN in) (NP (NP (DT the) "
    "(NN preparation)) (PP (IN of) (NP (DT this) (NN product))))))) (NP (NP (DT the) (NN integrity)) "
    "(PP (IN of) (NP (DT this) (NN container)))) (VP (VBZ is) (VP (VBN compromised))))) "
    "(NP (PRP it)) (VP (MD should) (RB not) (VP (VB be) (VP (VBN used)))) (. .))"
)
WARNING_LABEL_TEXT = ("if at any time in the preparation of this product the integrity of this "
                      "container is compromised it should not be used .")


@pytest.fixture
def warning_tree():
    return parse_ptb(WARNING_LABEL_PTB)


@pytest.fixture(scope="session")
def hash_emb():
    return HashEmbeddings(dim=64)


def tiny_model(vocab_size=30, hidden=16, layers=1, heads=2, variant="REAP", dropout=0.0, seed=0,
               dtype=torch.float32):
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=vocab_size, hidden_size=hidden, encoder_layers=layers,
                      decoder_layers=layers, heads=heads, dropout=dropout, variant=variant,
                      max_positions=64)
    return TransformerModel(cfg).to(dtype)


@pytest.fixture
def small_vocab():
    corpus = [s.split() for s in ["the dog saw a cat", "a red fox met the dog", "every cat hid"]]
    return bpe_train(corpus, 10, labels=["NP", "VP", "S"])


def random_tree(rng: np.random.Generator, n_leaves: int, labels=("NP", "VP", "PP", "S", "ADJP", "SBAR")):
    """Random PTB string over ``n_leaves`` distinct words."""
    words = [f"w{i}" for i in range(n_leaves)]
    tags = ["NN", "VB", "JJ", "DT", "IN", "RB"]

    def build(lo, hi):
        if hi - lo == 1:
            return f"({tags[rng.integers(len(tags))]} {words[lo]})"
        k = int(rng.integers(2, min(4, hi - lo) + 1))
        cuts = sorted(rng.choice(np.arange(lo + 1, hi), size=k - 1, replace=False).tolist())
        bounds = [lo] + cuts + [hi]
        kids = " ".join(build(a, b) for a, b in zip(bounds, bounds[1:]))
        return f"({labels[rng.integers(len(labels))]} {kids})"

    return build(0, n_leaves)


def permuted_ptb(tree, rng: np.random.Generator, p: float = 0.5) -> str:
    """PTB string of ``tree`` with the children of each internal node shuffled with probability ``p``."""
    if tree.is_leaf:
        return f"({tree.label} {tree.leaf_token.surface})"
    kids = list(tree.children)
    if len(kids) > 1 and rng.random() < p:
        kids = [kids[i] for i in rng.permutation(len(kids))]
    return f"({tree.label} " + " ".join(permuted_ptb(k, rng, p) for k in kids) + ")"
