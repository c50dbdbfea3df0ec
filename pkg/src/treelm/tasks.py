"""Downstream drivers over a frozen model: sentence-completion scoring,
k-best reranking with attachment scores, add-edge classifier training, and
tree sampling.

Generation mirrors the training-time order exactly: pop a node, grow its
left dependents closest-to-farthest, then its right dependents (the first
right dependent sees the summary of the freshly generated left dependents),
enqueue the children, repeat. Four binary classifiers decide whether each
edge gets added; the words themselves are sampled from the model's
predictive softmax.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .deptree import DepTree, EdgeType, PUNCT_POS, bfs_order, edge_events
from .errors import DataError
from .nncore import Adagrad, RectifierClassifier, softmax_log_prob

CLASSIFIER_NAMES = ("add_left", "add_right", "add_nx_left", "add_nx_right")


# ---------------------------------------------------------------------------
# Completion and reranking
# ---------------------------------------------------------------------------

def parallel_map(fn, items, threads=1):
    """Order-preserving map, optionally over a thread pool. Scoring against
    frozen parameters is read-only apart from diagnostic counters."""
    if threads <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def score_candidates(model, trees):
    return [model.log_prob(t) for t in trees]


def complete(model, question):
    """Index of the highest-scoring candidate; ties go to the lowest index."""
    scores = score_candidates(model, question.candidates)
    return int(np.argmax(scores))


def eval_completion(model, questions):
    """Fraction of questions answered with the gold candidate."""
    hits = sum(complete(model, q) == q.gold for q in questions)
    return hits / len(questions)


def rerank(model, group, parser_weight=0.0):
    """The candidate tree with the highest model score; ties keep the better
    parser rank (candidates arrive rank-ordered).

    ``parser_weight`` optionally mixes in a parser preference as a rank
    penalty (the k-best interface carries ranks, not raw parser scores);
    zero, the default, reranks on model log-probability alone."""
    scores = score_candidates(model, group.candidates)
    if parser_weight:
        scores = [
            s - parser_weight * (rank - 1)
            for s, rank in zip(scores, group.ranks)
        ]
    return group.candidates[int(np.argmax(scores))]


@dataclass
class AttachmentScore:
    uas: float
    las: float
    n_scored: int

    def __str__(self):
        return f"UAS {100 * self.uas:.2f}  LAS {100 * self.las:.2f} ({self.n_scored} tokens)"


def eval_attachment(chosen, gold):
    """Micro-averaged attachment scores over aligned tree pairs; tokens whose
    gold POS is sentence punctuation are excluded."""
    head_ok = label_ok = scored = 0
    for c, g in zip(chosen, gold, strict=True):
        if len(c) != len(g):
            raise DataError("candidate and gold trees have different lengths")
        for ct, gt in zip(c.tokens, g.tokens):
            if gt.pos in PUNCT_POS:
                continue
            scored += 1
            if ct.head == gt.head:
                head_ok += 1
                if ct.label == gt.label:
                    label_ok += 1
    if scored == 0:
        raise DataError("nothing to score: all tokens are punctuation")
    return AttachmentScore(head_ok / scored, label_ok / scored, scored)


# ---------------------------------------------------------------------------
# Add-edge classifiers
# ---------------------------------------------------------------------------

@dataclass
class ClassifierBundle:
    """Four binary deciders over [predecessor hidden state; output embedding
    of the current word] features (dimension 2d)."""

    classifiers: dict
    feature_dim: int

    def decide(self, name, feat, rng=None, sample=False, threshold=0.5):
        p = float(self.classifiers[name].predict_proba(feat)[0])
        if sample:
            return rng.random() < p
        return p > threshold

    def params(self):
        out = {}
        for name, clf in self.classifiers.items():
            out.update(clf.params(name))
        return out


def _node_feature(model, pred_top_h, word):
    return np.concatenate([pred_top_h, model.out_w[word]])


def classifier_dataset(model, trees):
    """Feature/label rows read off gold trees, keyed by classifier name.

    Every generated node answers add_left/add_right (does it take a first
    dependent on that side); left dependents answer add_nx_left (is there a
    sibling one farther out) and right dependents add_nx_right. The root's
    dependent is skipped for add_nx_right since generation never asks there.
    """
    rows = {name: ([], []) for name in CLASSIFIER_NAMES}
    for tree in trees:
        trace = model.forward(tree)
        order = bfs_order(tree)
        rank = {pos: i + 1 for i, pos in enumerate(order)}
        for idx, ev in enumerate(trace.events):
            pos = order[idx]
            h_pred = trace.node_states[ev.t_prime][-1].h
            feat = _node_feature(model, h_pred, ev.word)
            tok = tree.tokens[pos - 1]
            has_left = len(tree.left_deps[pos]) > 0
            has_right = len(tree.right_deps[pos]) > 0
            rows["add_left"][0].append(feat)
            rows["add_left"][1].append(float(has_left))
            rows["add_right"][0].append(feat)
            rows["add_right"][1].append(float(has_right))
            if pos < tok.head:  # a left dependent
                sibs = tree.left_deps[tok.head]
                rows["add_nx_left"][0].append(feat)
                rows["add_nx_left"][1].append(float(sibs.index(pos) < len(sibs) - 1))
            elif tok.head != 0:  # a right dependent below a real head
                sibs = tree.right_deps[tok.head]
                rows["add_nx_right"][0].append(feat)
                rows["add_nx_right"][1].append(float(sibs.index(pos) < len(sibs) - 1))
    return {
        name: (np.array(X), np.array(y)) for name, (X, y) in rows.items()
    }


def train_classifiers(model, trees, epochs=20, batch_size=64, lr=0.01,
                      hidden=300, seed=0):
    """Fit the four add-edge classifiers on features from a frozen model."""
    rng = np.random.default_rng(seed)
    data = classifier_dataset(model, trees)
    dim = 2 * model.cfg.d
    classifiers = {}
    for name in CLASSIFIER_NAMES:
        X, y = data[name]
        clf = RectifierClassifier(dim, rng, hidden=hidden)
        opt = Adagrad(clf.params(), lr=lr)
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for lo in range(0, len(order), batch_size):
                sel = order[lo : lo + batch_size]
                _, grads = clf.loss_and_grads(X[sel], y[sel])
                opt.step(grads)
        classifiers[name] = clf
    return ClassifierBundle(classifiers, dim)


# ---------------------------------------------------------------------------
# Tree generation
# ---------------------------------------------------------------------------

@dataclass
class GenLimits:
    max_nodes: int = 60
    max_depth: int = 10
    max_arity: int = 10          # per side
    temperature: float = 1.0
    forbid_unk: bool = False
    sample_decisions: bool = False  # Bernoulli on classifier probability

    def __post_init__(self):
        if min(self.max_nodes, self.max_depth, self.max_arity) < 1:
            raise ValueError("generation limits must be >= 1")


@dataclass
class GenResult:
    tree: DepTree
    truncated: bool


@dataclass
class _GenNode:
    word: int
    states: list                # per-layer LayerState
    pred_top_h: np.ndarray
    depth: int
    parent: object = None
    left: list = field(default_factory=list)    # children, closest first
    right: list = field(default_factory=list)


def _sample_word(model, h, rng, limits, unk_id=1, root_id=0):
    logits = model.logit_matrix(h)
    forbid = [root_id] + ([unk_id] if limits.forbid_unk else [])
    if limits.temperature <= 0.0:
        logits = logits.copy()
        logits[forbid] = -np.inf
        return int(np.argmax(logits))
    logp = softmax_log_prob(logits / limits.temperature)
    probs = np.exp(logp)
    probs[forbid] = 0.0
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def generate(model, classifiers, limits, rng, vocab=None, unk_id=1, root_id=0):
    """Sample one dependency tree from a tree model plus its add-edge
    classifiers. The root's single dependent is always generated; everything
    else is gated by the classifiers and the hard limits. The result is a
    valid single-rooted projective tree by construction; ``truncated`` marks
    trees a limit cut short while a classifier still wanted to grow them."""
    d = model.cfg.d
    is_ld = getattr(model, "is_ld", False)
    root_states = model._init_states()
    budget = [limits.max_nodes]
    truncated = [False]

    def step(edge, pred_node_states, x_word, q_words):
        x = model.emb[x_word]
        if is_ld and edge is EdgeType.RIGHT:
            ldt = model.ld_summary(q_words)
            q = ldt.top if ldt is not None else np.zeros(d)
            x = np.concatenate([x, q])
        states, _ = model.stacks[edge].forward(x, pred_node_states)
        word = _sample_word(model, states[-1].h, rng, limits, unk_id, root_id)
        return word, states

    def decide(name, node):
        feat = _node_feature(model, node.pred_top_h, node.word)
        return classifiers.decide(
            name, feat, rng=rng, sample=limits.sample_decisions
        )

    # the root always takes exactly one (right) dependent
    word, states = step(EdgeType.RIGHT, root_states, root_id, [])
    budget[0] -= 1
    first = _GenNode(word, states, root_states[-1].h, depth=1)
    queue = deque([first])

    def grow_chain(node, first_edge, nx_edge, ask_first, ask_next, q_words):
        """First dependent then next-sibling chain; returns nodes closest-first."""
        out = []
        cur = node
        for i in range(limits.max_arity + 1):
            if not decide(ask_first if i == 0 else ask_next, cur):
                break
            if budget[0] <= 0 or i == limits.max_arity:
                truncated[0] = True
                break
            edge = first_edge if i == 0 else nx_edge
            word, states = step(edge, cur.states, cur.word, q_words if i == 0 else [])
            budget[0] -= 1
            cur = _GenNode(word, states, cur.states[-1].h, depth=node.depth + 1,
                           parent=node)
            out.append(cur)
        return out

    while queue:
        node = queue.popleft()
        if node.depth >= limits.max_depth:
            if decide("add_left", node) or decide("add_right", node):
                truncated[0] = True
            continue
        node.left = grow_chain(
            node, EdgeType.LEFT, EdgeType.NX_LEFT, "add_left", "add_nx_left", []
        )
        # ld summary consumes the just-generated left dependents, farthest first
        q_words = [n.word for n in reversed(node.left)]
        node.right = grow_chain(
            node, EdgeType.RIGHT, EdgeType.NX_RIGHT, "add_right", "add_nx_right",
            q_words,
        )
        queue.extend(node.left)
        queue.extend(node.right)

    # in-order traversal fixes linear positions; projective by construction
    seq = []

    def emit(node):
        for child in reversed(node.left):
            emit(child)
        seq.append(node)
        for child in node.right:
            emit(child)

    emit(first)
    pos_of = {id(n): i + 1 for i, n in enumerate(seq)}
    forms = [
        vocab.word_of(n.word) if vocab is not None else f"w{n.word}" for n in seq
    ]
    heads = [pos_of[id(n.parent)] if n.parent is not None else 0 for n in seq]
    ids = [n.word for n in seq]
    tree = DepTree.from_rows(forms, heads, word_ids=ids)
    return GenResult(tree, truncated[0])
