"""Vocabulary construction and dataset handling.

The vocabulary maps word forms to dense integer ids; id 0 is the virtual
root token and id 1 the unknown-word bucket. Words at or below the
``min_count`` frequency threshold collapse into the unknown bucket, whose
stored count is the total mass it absorbed (the noise distribution for
contrastive training is built from these counts).
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .deptree import ROOT_FORM, iter_conll_blocks, parse_conll_report, _tree_from_rows
from .errors import ConllError, DataError

UNK_FORM = "<unk>"
VOCAB_MAGIC = "TLMVOCAB1"


class Vocab:
    """Immutable word <-> id mapping with training counts."""

    def __init__(self, words, counts, lowercase, min_count):
        if words[0] != ROOT_FORM or words[1] != UNK_FORM:
            raise ValueError("vocabulary must start with the root and unk entries")
        self.words = tuple(words)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.lowercase = bool(lowercase)
        self.min_count = int(min_count)
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ValueError("duplicate word in vocabulary")

    root_id = 0
    unk_id = 1

    def __len__(self):
        return len(self.words)

    def normalize(self, form):
        return form.lower() if self.lowercase else form

    def id_of(self, form):
        return self._ids.get(self.normalize(form), self.unk_id)

    def word_of(self, idx):
        return self.words[idx]

    def __contains__(self, form):
        return self.normalize(form) in self._ids

    def save(self, path):
        header = "\t".join(
            [
                VOCAB_MAGIC,
                f"lowercase={int(self.lowercase)}",
                f"min_count={self.min_count}",
                f"root={self.root_id}",
                f"unk={self.unk_id}",
            ]
        )
        lines = [header]
        lines += [f"{w}\t{c}" for w, c in zip(self.words, self.counts)]
        data = ("\n".join(lines) + "\n").encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(data)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        lines = data.decode("utf-8").splitlines()
        if not lines or not lines[0].startswith(VOCAB_MAGIC):
            raise DataError(f"{path}: not a {VOCAB_MAGIC} vocabulary file")
        flags = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        words, counts = [], []
        for line in lines[1:]:
            if not line:
                continue
            w, c = line.rsplit("\t", 1)
            words.append(w)
            counts.append(int(c))
        return cls(
            words,
            counts,
            lowercase=bool(int(flags.get("lowercase", "1"))),
            min_count=int(flags.get("min_count", "5")),
        )

    def file_hash(self, path):
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()


def build_vocab(trees, min_count=5, lowercase=True):
    """Count forms over a tree corpus and build the vocabulary.

    Words occurring ``min_count`` times or fewer map to the unknown bucket.
    Ids are assigned by descending frequency, ties broken lexicographically,
    so identical input always yields an identical file.
    """
    trees = list(trees)
    if not trees:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for tree in trees:
        for form in tree.forms:
            counts[form.lower() if lowercase else form] += 1
    counts.pop(ROOT_FORM, None)
    counts.pop(UNK_FORM, None)

    kept = sorted(
        ((w, c) for w, c in counts.items() if c > min_count),
        key=lambda wc: (-wc[1], wc[0]),
    )
    unk_mass = sum(c for _, c in counts.items() if c <= min_count)
    words = [ROOT_FORM, UNK_FORM] + [w for w, _ in kept]
    freq = [0, unk_mass] + [c for _, c in kept]
    return Vocab(words, freq, lowercase=lowercase, min_count=min_count)


@dataclass
class EncodedCorpus:
    """Trees with word ids attached, tagged with their split name."""

    trees: list
    split: str = "train"

    def __len__(self):
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)

    @property
    def n_tokens(self):
        return sum(len(t) for t in self.trees)


def encode(trees, vocab, split="train"):
    """Attach vocabulary ids to every tree; unseen forms become the unk id."""
    out = [t.with_word_ids([vocab.id_of(f) for f in t.forms]) for t in trees]
    return EncodedCorpus(out, split=split)


def split_validation(trees, size, seed):
    """Seeded uniform sample without replacement -> (rest, sample)."""
    if size >= len(trees):
        raise DataError(f"validation size {size} >= corpus size {len(trees)}")
    rng = np.random.default_rng(seed)
    picks = set(rng.choice(len(trees), size=size, replace=False).tolist())
    valid = [t for i, t in enumerate(trees) if i in picks]
    rest = [t for i, t in enumerate(trees) if i not in picks]
    return rest, valid


# ---------------------------------------------------------------------------
# Task bundles: completion questions and k-best groups
# ---------------------------------------------------------------------------

@dataclass
class CompletionQuestion:
    """Five candidate parses of one sentence, one per candidate completion."""

    qid: str
    candidates: list
    gold: int

    def __post_init__(self):
        if len(self.candidates) != 5:
            raise DataError(
                f"question {self.qid}: expected 5 candidates, got {len(self.candidates)}"
            )
        if not 0 <= self.gold < 5:
            raise DataError(f"question {self.qid}: gold index {self.gold} out of range")


@dataclass
class KBestGroup:
    """Gold tree plus a parser's ranked candidate list for one sentence."""

    sid: str
    gold: object
    candidates: list = field(default_factory=list)
    ranks: list = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise DataError(f"sentence {self.sid}: empty candidate list")
        if any(b <= a for a, b in zip(self.ranks, self.ranks[1:])):
            raise DataError(f"sentence {self.sid}: ranks must increase strictly")


def _block_meta(comments):
    meta = {}
    for line in comments:
        for part in line.lstrip("#").split():
            if "=" in part:
                k, v = part.split("=", 1)
                meta[k] = v
    return meta


def _annotated_trees(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    out = []
    for block_idx, (_, comments, rows) in enumerate(iter_conll_blocks(text)):
        tree = _tree_from_rows(rows, block_idx)
        out.append((_block_meta(comments), tree))
    return out


def load_questions(path):
    """Read a completion-question file: blocks annotated ``# qid=... gold=0|1``,
    five blocks per question, exactly one marked gold."""
    groups: dict[str, list] = {}
    order = []
    for meta, tree in _annotated_trees(path):
        qid = meta.get("qid")
        if qid is None:
            raise DataError(f"{path}: block without qid annotation")
        if qid not in groups:
            order.append(qid)
        groups.setdefault(qid, []).append((meta, tree))

    questions = []
    for qid in order:
        entries = groups[qid]
        golds = [i for i, (m, _) in enumerate(entries) if m.get("gold") == "1"]
        if len(golds) != 1:
            raise DataError(f"question {qid}: expected one gold candidate, got {len(golds)}")
        questions.append(
            CompletionQuestion(qid, [t for _, t in entries], gold=golds[0])
        )
    return questions


def load_kbest(gold_path, kbest_path, k):
    """Read gold trees (``# sid=...``) and ranked candidates
    (``# sid=... rank=...``), keeping the ``k`` best ranks per sentence."""
    golds = {}
    gold_order = []
    for meta, tree in _annotated_trees(gold_path):
        sid = meta.get("sid")
        if sid is None:
            raise DataError(f"{gold_path}: gold block without sid annotation")
        golds[sid] = tree
        gold_order.append(sid)

    cands: dict[str, list] = {sid: [] for sid in gold_order}
    for meta, tree in _annotated_trees(kbest_path):
        sid = meta.get("sid")
        if sid is None or "rank" not in meta:
            raise DataError(f"{kbest_path}: candidate block needs sid and rank")
        if sid not in golds:
            raise DataError(f"candidate sentence {sid} has no gold tree")
        cands[sid].append((int(meta["rank"]), tree))

    groups = []
    for sid in gold_order:
        ranked = sorted(cands[sid], key=lambda rt: rt[0])[:k]
        groups.append(
            KBestGroup(
                sid,
                golds[sid],
                candidates=[t for _, t in ranked],
                ranks=[r for r, _ in ranked],
            )
        )
    return groups


def load_conll_file(path, skip_nonprojective=False, reattach_extra_roots=False):
    """Read a CoNLL file from disk; returns (trees, skipped_count)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_conll_report(
            text,
            skip_nonprojective=skip_nonprojective,
            reattach_extra_roots=reattach_extra_roots,
        )
    except ConllError as exc:
        raise ConllError(f"{path}: {exc}") from exc
