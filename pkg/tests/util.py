"""Shared builders for tests: a hand-checked 12-token sentence, random trees,
a small stochastic grammar, and a deterministic template corpus for
memorization runs."""

import numpy as np

from treelm.corpus import build_vocab, encode
from treelm.deptree import DepTree, random_projective_tree

SAMPLE_FORMS = [
    "The", "luxury", "auto", "manufacturer", "last", "year",
    "sold", "1,214", "cars", "in", "the", "U.S.",
]
SAMPLE_HEADS = [4, 4, 4, 7, 6, 7, 0, 9, 7, 7, 12, 10]
SAMPLE_BFS_FORMS = [
    "sold", "year", "manufacturer", "cars", "in", "last",
    "auto", "luxury", "The", "1,214", "U.S.", "the",
]


def sample_sentence():
    return DepTree.from_rows(SAMPLE_FORMS, SAMPLE_HEADS)


def random_tree_any(rng, n):
    """Random single-rooted tree, not necessarily projective: each token
    attaches to a previously placed token under a random permutation."""
    order = rng.permutation(n) + 1
    heads = [0] * n
    for k, pos in enumerate(order[1:], start=1):
        heads[pos - 1] = int(order[rng.integers(0, k)])
    return DepTree.from_rows([f"w{i}" for i in range(1, n + 1)], heads)


def crossing_oracle(tree):
    """O(n^2) projectivity oracle: no two edges (root edge included) may
    strictly interleave."""
    edges = [(min(t.head, t.index), max(t.head, t.index)) for t in tree.tokens]
    for i, (a, b) in enumerate(edges):
        for c, d in edges[i + 1 :]:
            if a < c < b < d or c < a < d < b:
                return False
    return True


# -- a small stochastic grammar --------------------------------------------
#
# Arity decisions are functions of word identity so that the add-edge
# classifiers have signal to find: a node's feature pairs its predecessor's
# hidden state with its own output embedding, so the label at a node must be
# predictable from the node's word (plus coarse position).

VERBS = ["eats", "sees", "makes", "likes"]
NOUNS_MOD = ["cat", "dog", "fish"]    # take an adjective
NOUNS_BARE = ["man", "bird"]          # never modified
NOUNS = NOUNS_MOD + NOUNS_BARE
PP_TRIGGERS = {"fish", "man"}         # as objects, a prepositional phrase follows
DETS = ["the", "a"]
ADJS = ["big", "red"]                 # "big" always brings a determiner
PREPS = ["with", "near"]


def _np_tokens(rng, out, head_slot):
    """Append a noun phrase; returns the noun's position."""
    noun = NOUNS[rng.integers(len(NOUNS))]
    adj = ADJS[rng.integers(len(ADJS))] if noun in NOUNS_MOD else None
    det = DETS[rng.integers(len(DETS))] if adj == "big" else None
    start = len(out) + 1
    noun_pos = start + (det is not None) + (adj is not None)
    if det:
        out.append((det, noun_pos))
    if adj:
        out.append((adj, noun_pos))
    out.append((noun, head_slot))
    return noun_pos, noun


def toy_tree(rng):
    """subject NP + verb + object NP [+ prepositional phrase], verb-rooted."""
    out = []  # (form, head) with forward references resolved by construction
    subj, _ = _np_tokens(rng, out, None)  # head filled once verb position known
    verb_pos = len(out) + 1
    out.append((VERBS[rng.integers(len(VERBS))], 0))
    out[subj - 1] = (out[subj - 1][0], verb_pos)
    _, obj_noun = _np_tokens(rng, out, verb_pos)
    if obj_noun in PP_TRIGGERS:
        prep_pos = len(out) + 1
        out.append((PREPS[rng.integers(len(PREPS))], verb_pos))
        _np_tokens(rng, out, prep_pos)
    forms = [f for f, _ in out]
    heads = [h for _, h in out]
    return DepTree.from_rows(forms, heads)


def toy_corpus(n, seed=0):
    rng = np.random.default_rng(seed)
    return [toy_tree(rng) for _ in range(n)]


# -- deterministic templates for memorization ------------------------------

def _template(i):
    """A fixed 15-token tree; every word form is unique to the template so
    that, given the template's root word, every continuation is
    deterministic. Exercises left chains, right chains, and mixed nodes."""
    forms = [f"t{i}_{j}" for j in range(15)]
    heads = [4, 4, 4, 6, 6, 0, 8, 6, 8, 9, 10, 11, 12, 13, 14]
    return DepTree.from_rows(forms, heads)


def template_corpus(n_sentences=50, n_templates=3):
    templates = [_template(i) for i in range(n_templates)]
    return [templates[i % n_templates] for i in range(n_sentences)]


def encoded(trees, min_count=0, lowercase=False):
    vocab = build_vocab(trees, min_count=min_count, lowercase=lowercase)
    return encode(trees, vocab).trees, vocab
