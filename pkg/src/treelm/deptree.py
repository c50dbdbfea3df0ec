"""Dependency-tree data model.

A sentence is a list of tokens, each governed by exactly one head (position 0
is a virtual root). Trees are generated top-down: per node, first the left
dependents from closest to farthest, then the right dependents, level by
level. Four edge types describe that process:

  * ``LEFT``      head -> its first (closest) left dependent
  * ``NX_LEFT``   a left dependent -> the next left dependent, one farther out
  * ``RIGHT``     head -> its first (closest) right dependent
  * ``NX_RIGHT``  a right dependent -> the next one farther out

Chaining non-first dependents off their adjacent sibling (instead of the
head) turns every tree into one where each node is reachable from the root
by a unique sequence of edge types; that sequence plus the word at each
step is the node's generation path, and the set of all paths determines
the tree exactly (see :func:`reconstruct_from_paths`).

All functions here are pure; trees are immutable after construction.
"""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass

from .errors import ConllError, ReconstructionError, TreeStructureError

ROOT_FORM = "<root>"

# PTB tags of tokens that attachment scoring conventionally ignores
PUNCT_POS = {"``", "''", ":", ",", "."}


class EdgeType(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    NX_LEFT = "nx_left"
    NX_RIGHT = "nx_right"

    def __repr__(self):
        return f"EdgeType.{self.name}"


@dataclass(frozen=True)
class Token:
    """One token row: 1-based position, surface form, head position (0 = root)."""

    index: int
    form: str
    head: int
    label: str | None = None
    pos: str | None = None


@dataclass(frozen=True)
class EdgeEvent:
    """One generation step: word at BFS position t, produced from the word at
    BFS position t_prime over an edge of type z. Word fields are vocabulary ids."""

    t: int
    t_prime: int
    z: EdgeType
    word: int
    pred_word: int


class DepTree:
    """Indexed projective-friendly dependency tree with ordered dependent lists.

    ``left_deps[h]`` / ``right_deps[h]`` list the dependents of position ``h``
    (0 = root) ordered closest-to-head first. Structural invariants (single
    root dependent, acyclicity, connectivity) are enforced at construction;
    projectivity is checked separately by :func:`is_projective` so that
    ingestion policy can decide what to do with non-projective input.
    """

    __slots__ = ("tokens", "word_ids", "left_deps", "right_deps", "root_index")

    def __init__(self, tokens, word_ids=None):
        tokens = tuple(tokens)
        n = len(tokens)
        if n == 0:
            raise TreeStructureError("empty tree")
        for i, tok in enumerate(tokens, start=1):
            if tok.index != i:
                raise TreeStructureError(
                    f"token index {tok.index} at position {i}: positions must be 1..n"
                )
            if not 0 <= tok.head <= n:
                raise TreeStructureError(
                    f"head {tok.head} of token {i} out of range 0..{n}"
                )
            if tok.head == i:
                raise TreeStructureError(f"token {i} is its own head")

        roots = [t.index for t in tokens if t.head == 0]
        if len(roots) != 1:
            raise TreeStructureError(
                f"expected exactly one token with head 0, found {len(roots)}"
            )

        left = [[] for _ in range(n + 1)]
        right = [[] for _ in range(n + 1)]
        for tok in tokens:
            if tok.index < tok.head:
                left[tok.head].append(tok.index)
            else:
                right[tok.head].append(tok.index)
        for h in range(n + 1):
            left[h].sort(reverse=True)  # closest to head first
            right[h].sort()

        # connectivity + acyclicity: everything reachable from the root
        seen = 0
        queue = deque([roots[0]])
        while queue:
            v = queue.popleft()
            seen += 1
            queue.extend(left[v])
            queue.extend(right[v])
        if seen != n:
            raise TreeStructureError("head relation contains a cycle")

        if word_ids is not None:
            word_ids = tuple(int(w) for w in word_ids)
            if len(word_ids) != n:
                raise TreeStructureError("word_ids length does not match tokens")

        self.tokens = tokens
        self.word_ids = word_ids
        self.left_deps = tuple(tuple(l) for l in left)
        self.right_deps = tuple(tuple(r) for r in right)
        self.root_index = roots[0]

    @classmethod
    def from_rows(cls, forms, heads, labels=None, pos=None, word_ids=None):
        n = len(forms)
        labels = labels if labels is not None else [None] * n
        pos = pos if pos is not None else [None] * n
        toks = [
            Token(i + 1, forms[i], heads[i], labels[i], pos[i]) for i in range(n)
        ]
        return cls(toks, word_ids=word_ids)

    def __len__(self):
        return len(self.tokens)

    @property
    def forms(self):
        return tuple(t.form for t in self.tokens)

    @property
    def heads(self):
        return tuple(t.head for t in self.tokens)

    def with_word_ids(self, word_ids):
        return DepTree(self.tokens, word_ids=word_ids)

    def __eq__(self, other):
        if not isinstance(other, DepTree):
            return NotImplemented
        return self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"DepTree({' '.join(self.forms)!r})"


def same_skeleton(a, b):
    """True iff two trees agree on forms and heads (labels/POS ignored)."""
    return a.forms == b.forms and a.heads == b.heads


# ---------------------------------------------------------------------------
# CoNLL-X ingestion / serialization
# ---------------------------------------------------------------------------

def iter_conll_blocks(text):
    """Yield (block_start_line, comment_lines, row_lines) per blank-separated block."""
    comments, rows = [], []
    start = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            if rows:
                yield start, comments, rows
            comments, rows, start = [], [], None
            continue
        if start is None:
            start = lineno
        if line.lstrip().startswith("#"):
            comments.append(line)
        else:
            rows.append((lineno, line))
    if rows:
        yield start, comments, rows


def _tree_from_rows(rows, block_idx, reattach_extra_roots=False):
    toks = []
    for lineno, line in rows:
        cols = line.split("\t")
        if len(cols) < 8:
            raise ConllError(
                f"expected >= 8 tab-separated columns, got {len(cols)}", line=lineno
            )
        try:
            idx = int(cols[0])
            head = int(cols[6])
        except ValueError:
            raise ConllError(
                f"non-integer ID or HEAD field: {cols[0]!r}/{cols[6]!r}", line=lineno
            ) from None
        form = cols[1]
        pos = cols[4] if cols[4] != "_" else (cols[3] if cols[3] != "_" else None)
        label = cols[7] if cols[7] != "_" else None
        if idx != len(toks) + 1:
            raise ConllError(f"token IDs must be 1..n in order, got {idx}", line=lineno)
        toks.append(Token(idx, form, head, label, pos))

    if reattach_extra_roots:
        roots = [t.index for t in toks if t.head == 0]
        if len(roots) > 1:
            first = roots[0]
            toks = [
                Token(t.index, t.form, first, t.label, t.pos)
                if t.head == 0 and t.index != first
                else t
                for t in toks
            ]
    try:
        return DepTree(toks)
    except TreeStructureError as exc:
        raise ConllError(str(exc), block=block_idx) from exc


def parse_conll(text, skip_nonprojective=False, reattach_extra_roots=False):
    """Parse CoNLL-X text into a list of trees.

    Columns used: ID, FORM, (LEMMA), CPOS, POS, (FEATS), HEAD, DEPREL; extra
    columns are ignored. Non-projective trees raise by default; with
    ``skip_nonprojective`` they are dropped (the count is available through
    :func:`parse_conll_report`).
    """
    trees, _ = parse_conll_report(
        text,
        skip_nonprojective=skip_nonprojective,
        reattach_extra_roots=reattach_extra_roots,
    )
    return trees


def parse_conll_report(text, skip_nonprojective=False, reattach_extra_roots=False):
    """Like :func:`parse_conll` but also returns the number of skipped trees."""
    trees = []
    skipped = 0
    for block_idx, (_, _comments, rows) in enumerate(iter_conll_blocks(text)):
        tree = _tree_from_rows(rows, block_idx, reattach_extra_roots)
        if not is_projective(tree):
            if skip_nonprojective:
                skipped += 1
                continue
            raise ConllError("non-projective tree", block=block_idx)
        trees.append(tree)
    return trees, skipped


def write_conll(tree, comment=None):
    """Render one tree as a CoNLL-X block (10 columns, trailing newline)."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    for t in tree.tokens:
        pos = t.pos if t.pos is not None else "_"
        label = t.label if t.label is not None else "_"
        lines.append(
            "\t".join(
                [str(t.index), t.form, "_", "_", pos, "_", str(t.head), label, "_", "_"]
            )
        )
    return "\n".join(lines) + "\n"


def write_dot(tree, name="tree"):
    """Render a tree in Graphviz DOT form (root shown as node 0)."""
    lines = [f"digraph {name} {{", '  n0 [label="ROOT" shape=box];']
    for t in tree.tokens:
        form = t.form.replace('"', '\\"')
        lines.append(f'  n{t.index} [label="{form}"];')
    for t in tree.tokens:
        lines.append(f"  n{t.head} -> n{t.index};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Structure queries
# ---------------------------------------------------------------------------

def is_projective(tree):
    """True iff every token strictly between a head and its dependent is a
    descendant of that head."""
    heads = (0,) + tree.heads  # heads[pos] for pos 1..n
    for tok in tree.tokens:
        h, d = tok.head, tok.index
        if h == 0:
            continue  # the root edge spans everything it needs to
        lo, hi = (h, d) if h < d else (d, h)
        for x in range(lo + 1, hi):
            a = x
            while a != 0 and a != h:
                a = heads[a]
            if a != h:
                return False
    return True


def bfs_order(tree):
    """Token positions in generation order: per dequeued node, left dependents
    closest to farthest, then right dependents closest to farthest."""
    order = []
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for u in tree.left_deps[v] + tree.right_deps[v]:
            order.append(u)
            queue.append(u)
    return tuple(order)


def _predecessor(tree, pos):
    """(predecessor position, edge type) for a non-root-position token."""
    h = tree.tokens[pos - 1].head
    if pos < h:
        sibs = tree.left_deps[h]
        i = sibs.index(pos)
        return (h, EdgeType.LEFT) if i == 0 else (sibs[i - 1], EdgeType.NX_LEFT)
    sibs = tree.right_deps[h]
    i = sibs.index(pos)
    return (h, EdgeType.RIGHT) if i == 0 else (sibs[i - 1], EdgeType.NX_RIGHT)


def edge_events(tree, vocab=None, root_id=0):
    """Flatten a tree into its generation-step sequence.

    Word ids come from ``vocab`` when given, otherwise from ids attached to
    the tree by the corpus layer. The predecessor of the root's dependent is
    the root itself (id ``root_id``).
    """
    if vocab is not None:
        ids = [vocab.id_of(f) for f in tree.forms]
        root_id = vocab.root_id
    elif tree.word_ids is not None:
        ids = list(tree.word_ids)
    else:
        raise ValueError("edge_events needs a vocab or a tree with word ids attached")

    order = bfs_order(tree)
    rank = {pos: i + 1 for i, pos in enumerate(order)}
    events = []
    for pos in order:
        pred, z = _predecessor(tree, pos)
        events.append(
            EdgeEvent(
                t=rank[pos],
                t_prime=rank.get(pred, 0),
                z=z,
                word=ids[pos - 1],
                pred_word=ids[pred - 1] if pred != 0 else root_id,
            )
        )
    return events


def dependency_path(tree, pos):
    """Generation path of the token at position ``pos``: a tuple of
    (predecessor form, edge type) pairs from the root down. The root's own
    path is empty."""
    if pos == 0:
        return ()
    steps = []
    while pos != 0:
        pred, z = _predecessor(tree, pos)
        form = tree.tokens[pred - 1].form if pred != 0 else ROOT_FORM
        steps.append((form, z))
        pos = pred
    return tuple(reversed(steps))


def all_paths(tree):
    """(form, path) pairs for every token, the full path-set encoding of the tree."""
    return [
        (tok.form, dependency_path(tree, tok.index)) for tok in tree.tokens
    ]


# ---------------------------------------------------------------------------
# Reconstruction from paths
# ---------------------------------------------------------------------------

_NX_PREDECESSOR = {
    EdgeType.NX_LEFT: (EdgeType.LEFT, EdgeType.NX_LEFT),
    EdgeType.NX_RIGHT: (EdgeType.RIGHT, EdgeType.NX_RIGHT),
}


def reconstruct_from_paths(pairs):
    """Rebuild the tree encoded by a collection of (word, path) pairs.

    Each node is addressed by the sequence of edge types along its path, so
    repeated word forms are unambiguous. Raises
    :class:`~treelm.errors.ReconstructionError` on conflicting words, gaps,
    or sibling chains hanging off the wrong kind of node, naming the word
    involved.
    """
    words = {(): ROOT_FORM}
    claimed = {}  # address -> word claimed by some path prefix
    for word, path in pairs:
        addr = tuple(z for _, z in path)
        if not addr:
            raise ReconstructionError(f"word {word!r} has an empty path")
        if addr[0] is not EdgeType.RIGHT:
            raise ReconstructionError(
                f"word {word!r}: a path must start with the root's right edge"
            )
        for j, z in enumerate(addr):
            if z in _NX_PREDECESSOR and (
                j == 0 or addr[j - 1] not in _NX_PREDECESSOR[z]
            ):
                raise ReconstructionError(
                    f"word {word!r}: {z.name} edge follows a non-sibling node"
                )
        if addr in words and words[addr] != word:
            raise ReconstructionError(
                f"conflicting words {words[addr]!r} and {word!r} at one position"
            )
        words[addr] = word
        for j, (pw, _) in enumerate(path):
            prev = claimed.setdefault(addr[:j], pw)
            if prev != pw:
                raise ReconstructionError(
                    f"word {word!r}: path disagrees about an ancestor "
                    f"({prev!r} vs {pw!r})"
                )

    for addr, word in words.items():
        if addr and addr[:-1] not in words:
            missing = claimed.get(addr[:-1])
            if missing is not None:
                raise ReconstructionError(f"word {missing!r} is missing from the path set")
            raise ReconstructionError(f"word {word!r}: predecessor missing from path set")
    for addr, pw in claimed.items():
        if addr not in words:
            raise ReconstructionError(f"word {pw!r} appears in paths but has no path")
        if words[addr] != pw:
            raise ReconstructionError(
                f"paths disagree about the word at a position: "
                f"{words[addr]!r} vs {pw!r}"
            )

    if len(words) == 1:
        raise ReconstructionError("no non-root paths given")

    def chain(first):
        nx = EdgeType.NX_LEFT if first[-1] is EdgeType.LEFT else EdgeType.NX_RIGHT
        out = []
        cur = first
        while cur in words:
            out.append(cur)
            cur = cur + (nx,)
        return out  # closest-to-head first

    # in-order traversal fixes linear positions; heads follow from addresses
    positions = {}

    def visit(addr):
        lefts = chain(addr + (EdgeType.LEFT,))
        rights = chain(addr + (EdgeType.RIGHT,))
        for a in reversed(lefts):
            visit(a)
        positions[addr] = len(positions) + 1
        for a in rights:
            visit(a)

    visit((EdgeType.RIGHT,))
    if len(positions) != len(words) - 1:
        missing = next(a for a in words if a != () and a not in positions)
        raise ReconstructionError(
            f"word {words[missing]!r} is not reachable through first-dependent edges"
        )

    def parent(addr):
        while addr[-1] in _NX_PREDECESSOR:
            addr = addr[:-1]
        return addr[:-1]

    n = len(positions)
    forms = [None] * n
    heads = [0] * n
    for addr, p in positions.items():
        forms[p - 1] = words[addr]
        pa = parent(addr)
        heads[p - 1] = 0 if pa == () else positions[pa]
    return DepTree.from_rows(forms, heads)


# ---------------------------------------------------------------------------
# Random valid instances (used by the gradient-check driver and tests)
# ---------------------------------------------------------------------------

def random_projective_tree(rng, n, forms=None):
    """Draw a uniform-ish random projective tree over ``n`` tokens.

    Recursive span splitting: a head is picked inside the span, the rest of
    the span is cut into contiguous child spans attached to it. ``forms``
    defaults to w1..wn; pass a list to control the word strings.
    """
    heads = [0] * n

    def build(lo, hi, head_slot):
        # choose head position for span [lo, hi] inclusive
        h = int(rng.integers(lo, hi + 1))
        heads[h - 1] = head_slot
        for side_lo, side_hi in ((lo, h - 1), (h + 1, hi)):
            i = side_lo
            while i <= side_hi:
                j = int(rng.integers(i, side_hi + 1))
                build(i, j, h)
                i = j + 1

    build(1, n, 0)
    if forms is None:
        forms = [f"w{i}" for i in range(1, n + 1)]
    return DepTree.from_rows(list(forms), heads)
