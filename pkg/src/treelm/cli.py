"""Command-line entry point.

Subcommands cover the full pipeline: build-vocab, train, score, complete,
rerank, train-classifiers, generate, gradcheck, eval. Flags override values
from an optional JSON config file; the fully resolved configuration is
written into every training run directory. Exit codes: 0 success, 2 usage,
3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tasks
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .corpus import Vocab, build_vocab, encode, load_conll_file, load_kbest, load_questions
from .deptree import write_conll, write_dot
from .errors import DataError, NumericFault, TreeLmError
from .model import ModelConfig, build_model, finite_difference_suite
from .nncore import RectifierClassifier
from .tasks import ClassifierBundle, GenLimits
from .trainer import TrainConfig, train

GRADCHECK_LIMIT = 1e-4


def _fmt(x):
    return f"{x:.6f}"


def _load_model(ckpt_path, vocab_path, check_hash=True):
    model, header = load_checkpoint(ckpt_path)
    vocab = Vocab.load(vocab_path)
    if len(vocab) != model.cfg.vocab_size:
        raise DataError(
            f"vocabulary size {len(vocab)} does not match checkpoint "
            f"({model.cfg.vocab_size})"
        )
    want = header.get("vocab_sha256")
    if check_hash and want:
        have = vocab.file_hash(vocab_path)
        if have != want:
            raise DataError(
                f"vocabulary file hash mismatch: checkpoint expects {want[:12]}..., "
                f"got {have[:12]}..."
            )
    return model, vocab


def _encoded_trees(path, vocab, skip_nonprojective=False):
    trees, skipped = load_conll_file(path, skip_nonprojective=skip_nonprojective)
    if skipped:
        print(f"skipped {skipped} non-projective trees from {path}", file=sys.stderr)
    return encode(trees, vocab).trees


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_build_vocab(args):
    trees, skipped = load_conll_file(
        args.input, skip_nonprojective=args.skip_nonprojective
    )
    if skipped:
        print(f"skipped {skipped} non-projective trees", file=sys.stderr)
    vocab = build_vocab(trees, min_count=args.min_count, lowercase=args.lowercase)
    vocab.save(args.out)
    print(f"wrote {args.out}: |V| = {len(vocab)} ({len(trees)} trees)")
    return 0


def _resolved_config(args, defaults):
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if args.config:
        resolved.update(json.loads(Path(args.config).read_text()))
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved


TRAIN_DEFAULTS = {
    "variant": "treelstm",
    "d": 32,
    "s": None,
    "layers": 1,
    "dropout": 0.0,
    "objective": "nll",
    "batch_size": 64,
    "lr": 1.0,
    "clip": 5.0,
    "k": 20,
    "ln_z_init": 9.0,
    "halve_threshold": 1e-3,
    "max_epochs": 30,
    "seed": 1,
}


def cmd_train(args):
    resolved = _resolved_config(args, TRAIN_DEFAULTS)
    vocab = Vocab.load(args.vocab)
    train_trees = _encoded_trees(args.train, vocab, args.skip_nonprojective)
    valid_trees = _encoded_trees(args.valid, vocab, args.skip_nonprojective)

    mcfg = ModelConfig(
        variant=resolved["variant"],
        vocab_size=len(vocab),
        d=int(resolved["d"]),
        s=resolved["s"],
        layers=int(resolved["layers"]),
        dropout=float(resolved["dropout"]),
    )
    tcfg = TrainConfig(
        objective=resolved["objective"],
        batch_size=int(resolved["batch_size"]),
        lr=float(resolved["lr"]),
        clip=float(resolved["clip"]),
        k=int(resolved["k"]),
        ln_z_init=float(resolved["ln_z_init"]),
        halve_threshold=float(resolved["halve_threshold"]),
        max_epochs=int(resolved["max_epochs"]),
        seed=int(resolved["seed"]),
    )
    model = build_model(mcfg, np.random.default_rng(tcfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab_copy = out / "vocab.tsv"
    vocab.save(vocab_copy)
    report, _ = train(
        model,
        tcfg,
        train_trees,
        valid_trees,
        out_dir=out,
        vocab_hash=vocab.file_hash(vocab_copy),
        vocab=vocab,
    )
    best = report.best_epoch()
    print(
        f"trained {mcfg.variant} for {len(report.rows)} epochs; "
        f"best val NLL {best.val_nll:.4f} (epoch {best.epoch}); run dir {out}"
    )
    return 0


def cmd_score(args):
    model, vocab = _load_model(args.ckpt, args.vocab)
    trees = _encoded_trees(args.input, vocab, args.skip_nonprojective)
    scores = tasks.parallel_map(model.log_prob, trees, args.threads)
    lines = [
        f"{lp:.6f}\t{len(tree)}\t{lp / len(tree):.6f}"
        for tree, lp in zip(trees, scores)
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_complete(args):
    model, vocab = _load_model(args.ckpt, args.vocab)
    questions = load_questions(args.questions)

    def answer(q):
        cands = [
            t.with_word_ids([vocab.id_of(f) for f in t.forms]) for t in q.candidates
        ]
        return tasks.score_candidates(model, cands)

    all_scores = tasks.parallel_map(answer, questions, args.threads)
    rows = []
    hits = 0
    for q, scores in zip(questions, all_scores):
        chosen = int(np.argmax(scores))
        hits += chosen == q.gold
        rows.append(
            f"{q.qid}\t{chosen}\t{q.gold}\t{','.join(_fmt(s) for s in scores)}"
        )
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"accuracy {hits / len(questions):.4f} on {len(questions)} questions",
          file=sys.stderr)
    return 0


def cmd_rerank(args):
    model, vocab = _load_model(args.ckpt, args.vocab)
    groups = load_kbest(args.gold, args.kbest, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def score_group(g):
        cands = [
            t.with_word_ids([vocab.id_of(f) for f in t.forms]) for t in g.candidates
        ]
        scores = tasks.score_candidates(model, cands)
        if args.parser_weight:
            scores = [
                s - args.parser_weight * (rank - 1)
                for s, rank in zip(scores, g.ranks)
            ]
        return scores

    all_scores = tasks.parallel_map(score_group, groups, args.threads)
    chosen_trees, gold_trees = [], []
    score_rows = []
    with open(out / "selected.conll", "w", encoding="utf-8") as fh:
        for g, scores in zip(groups, all_scores):
            pick = int(np.argmax(scores))
            chosen_trees.append(g.candidates[pick])
            gold_trees.append(g.gold)
            fh.write(write_conll(g.candidates[pick], comment=f"sid={g.sid}"))
            fh.write("\n")
            score_rows.append(
                f"{g.sid}\t{g.ranks[pick]}\t{','.join(_fmt(s) for s in scores)}"
            )
    (out / "scores.tsv").write_text("\n".join(score_rows) + "\n")
    score = tasks.eval_attachment(chosen_trees, gold_trees)
    print(score)
    return 0


def cmd_train_classifiers(args):
    model, vocab = _load_model(args.ckpt, args.vocab)
    trees = _encoded_trees(args.train, vocab, args.skip_nonprojective)
    bundle = tasks.train_classifiers(
        model, trees, epochs=args.epochs, seed=args.seed, hidden=args.hidden
    )
    holder = _BundleParams(bundle, model.cfg)
    save_checkpoint(args.out, holder, extra={"kind": "classifiers"})
    print(f"wrote classifier bundle to {args.out}")
    return 0


class _BundleParams:
    """Adapter so the checkpoint container can store a classifier bundle."""

    def __init__(self, bundle, model_cfg):
        self.bundle = bundle
        self.cfg = model_cfg

    def params(self):
        return self.bundle.params()


def load_classifier_bundle(path, model_cfg):
    header, payload_start = read_header(path)
    if header.get("extra", {}).get("kind") != "classifiers":
        raise DataError(f"{path}: not a classifier bundle")
    rng = np.random.default_rng(0)
    dim = 2 * model_cfg.d
    hidden = None
    for entry in header["tensors"]:
        if entry["name"].endswith(".W1"):
            hidden = entry["shape"][0]
            break
    bundle = ClassifierBundle(
        {
            name: RectifierClassifier(dim, rng, hidden=hidden)
            for name in tasks.CLASSIFIER_NAMES
        },
        dim,
    )
    holder = _BundleParams(bundle, model_cfg)
    params = holder.params()
    with open(path, "rb") as fh:
        data = fh.read()
    for entry in header["tensors"]:
        arr = np.frombuffer(
            data,
            dtype=np.dtype("<f8" if entry["dtype"] == "f8" else "<f4"),
            count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
            offset=payload_start + entry["offset"],
        ).reshape(tuple(entry["shape"]))
        params[entry["name"]][...] = arr
    return bundle


def cmd_generate(args):
    model, vocab = _load_model(args.ckpt, args.vocab)
    bundle = load_classifier_bundle(args.classifiers, model.cfg)
    limits = GenLimits(
        max_nodes=args.max_nodes,
        max_depth=args.max_depth,
        max_arity=args.max_arity,
        temperature=args.temperature,
        forbid_unk=args.forbid_unk,
        sample_decisions=args.sample_decisions,
    )
    rng = np.random.default_rng(args.seed)
    blocks = []
    dots = []
    truncated = 0
    for i in range(args.n):
        result = tasks.generate(model, bundle, limits, rng, vocab=vocab)
        truncated += result.truncated
        blocks.append(write_conll(result.tree, comment=f"sample={i}"))
        if args.dot:
            dots.append(write_dot(result.tree, name=f"t{i}"))
    Path(args.out).write_text("\n".join(blocks))
    if args.dot:
        Path(args.dot).write_text("\n".join(dots))
    print(f"sampled {args.n} trees ({truncated} truncated) -> {args.out}")
    return 0


def cmd_gradcheck(args):
    variants = (
        ["treelstm", "ldtreelstm"] if args.variant == "both" else [args.variant]
    )
    worst = 0.0
    for variant in variants:
        err = finite_difference_suite(
            variant,
            d=args.d,
            layers=args.layers,
            seed=args.seed,
            n_trees=args.trees,
        )
        print(f"{variant} d={args.d} layers={args.layers}: max rel err {err:.3e}")
        worst = max(worst, err)
    if worst >= GRADCHECK_LIMIT:
        raise NumericFault(f"gradient check failed: {worst:.3e} >= {GRADCHECK_LIMIT}")
    return 0


def cmd_eval(args):
    if args.task == "attachment":
        if not args.gold:
            raise DataError("eval attachment needs --gold")
        gold, _ = load_conll_file(args.gold)
        pred, _ = load_conll_file(args.pred)
        print(tasks.eval_attachment(pred, gold))
    else:
        hits = total = 0
        for line in Path(args.pred).read_text().splitlines():
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise DataError("completion TSV needs qid, chosen, gold columns")
            hits += cols[1] == cols[2]
            total += 1
        if total == 0:
            raise DataError("no rows to evaluate")
        print(f"accuracy {hits / total:.4f} on {total} questions")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_model_args(p, threads=False):
    p.add_argument("--ckpt", required=True, help="model checkpoint path")
    p.add_argument("--vocab", required=True, help="vocabulary file path")
    p.add_argument("--skip-nonprojective", action="store_true",
                   help="drop non-projective input trees instead of failing")
    if threads:
        p.add_argument("--threads", type=int, default=1,
                       help="scoring thread count (1 = fully deterministic order)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    root = argparse.ArgumentParser(prog="treelm", description=__doc__,
                                   formatter_class=fmt)
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", formatter_class=fmt,
                       help="build a vocabulary from a CoNLL training file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5,
                   help="words occurring this often or less become unk")
    p.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--skip-nonprojective", action="store_true")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--variant", choices=["treelstm", "ldtreelstm", "seqlstm"])
    p.add_argument("--d", type=int, help="hidden size (default 32)")
    p.add_argument("--s", type=int, help="embedding size (default d/2)")
    p.add_argument("--layers", type=int, help="LSTM depth (default 1)")
    p.add_argument("--dropout", type=float, help="inter-layer dropout (default 0)")
    p.add_argument("--objective", choices=["nll", "nce"], help="default nll")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="mini-batch size (default 64)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1.0)")
    p.add_argument("--clip", type=float, help="gradient norm threshold (default 5)")
    p.add_argument("--k", type=int, help="noise samples per token (default 20)")
    p.add_argument("--ln-z-init", dest="ln_z_init", type=float,
                   help="initial log normalizer (default 9)")
    p.add_argument("--halve-threshold", dest="halve_threshold", type=float,
                   help="relative val improvement that triggers halving (default 0.001)")
    p.add_argument("--max-epochs", dest="max_epochs", type=int,
                   help="epoch budget (default 30)")
    p.add_argument("--seed", type=int, help="RNG seed for the whole run (default 1)")
    p.add_argument("--skip-nonprojective", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", formatter_class=fmt,
                       help="log-probability per tree: log_prob, n_tokens, per-token")
    _add_common_model_args(p, threads=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("complete", formatter_class=fmt,
                       help="answer five-way completion questions")
    _add_common_model_args(p, threads=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--out", help="TSV output: qid, chosen, gold, scores")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("rerank", formatter_class=fmt,
                       help="pick the best candidate per k-best group")
    _add_common_model_args(p, threads=True)
    p.add_argument("--parser-weight", dest="parser_weight", type=float, default=0.0,
                   help="experimental rank-penalty interpolation (0 = model score only)")
    p.add_argument("--gold", required=True)
    p.add_argument("--kbest", required=True)
    p.add_argument("--k", type=int, default=4, help="candidates kept per sentence")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("train-classifiers", formatter_class=fmt,
                       help="fit the four add-edge classifiers")
    _add_common_model_args(p)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True, help="classifier bundle path")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--hidden", type=int, default=300)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_train_classifiers)

    p = sub.add_parser("generate", formatter_class=fmt, help="sample trees")
    _add_common_model_args(p)
    p.add_argument("--classifiers", required=True)
    p.add_argument("--n", type=int, default=10, help="number of trees")
    p.add_argument("--out", required=True, help="CoNLL output path")
    p.add_argument("--dot", help="optional DOT output path")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-nodes", dest="max_nodes", type=int, default=60)
    p.add_argument("--max-depth", dest="max_depth", type=int, default=10)
    p.add_argument("--max-arity", dest="max_arity", type=int, default=10)
    p.add_argument("--forbid-unk", action="store_true")
    p.add_argument("--sample-decisions", action="store_true",
                   help="Bernoulli-sample add-edge decisions instead of thresholding")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of the backward passes")
    p.add_argument("--variant", choices=["treelstm", "ldtreelstm", "seqlstm", "both"],
                   default="both")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trees", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", formatter_class=fmt, help="score task outputs")
    p.add_argument("task", choices=["attachment", "completion"])
    p.add_argument("--gold", help="gold CoNLL (attachment)")
    p.add_argument("--pred", required=True,
                   help="predicted CoNLL (attachment) or completion TSV")
    p.set_defaults(func=cmd_eval)

    return root


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TreeLmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
