"""Training loops.

Small vocabularies train with exact negative log-likelihood; large ones with
noise contrastive estimation, which scores only the realized word and k
sampled noise words per token against a learned global normalizer, never
touching a full softmax inside a training step. Either way: shuffled
mini-batches, gradient accumulation per batch, global-norm clipping at 5,
plain SGD, and a validation-driven halving schedule on the learning rate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import DataError, NumericFault
from .nncore import clip_gradients, log_sigmoid, sgd_step, sigmoid


@dataclass
class TrainConfig:
    objective: str = "nll"          # "nll" or "nce"
    batch_size: int = 64
    lr: float = 1.0
    clip: float = 5.0
    k: int = 20                     # noise samples per token (nce)
    ln_z_init: float = 9.0          # initial log normalizer (nce)
    noise_power: float = 0.75       # unigram smoothing exponent (nce)
    halve_threshold: float = 1e-3   # relative val improvement below this starts halving
    lr_floor_factor: float = 2.0 ** -10
    max_epochs: int = 30
    seed: int = 1
    shuffle: bool = True
    deterministic: bool = True      # suppress wall-clock in the report

    def __post_init__(self):
        if self.objective not in ("nll", "nce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective == "nce" and self.k < 1:
            raise ValueError("nce needs k >= 1 noise samples per token")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Noise distribution with alias-method sampling
# ---------------------------------------------------------------------------

class AliasSampler:
    """Walker/Vose alias tables: O(n) setup, O(1) draws from a discrete
    distribution. Zero-probability entries are never drawn."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.min() < 0:
            raise ValueError("negative probability")
        total = probs.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError("probabilities must sum to 1")
        n = len(probs)
        self.n = n
        self.prob = np.zeros(n)
        self.alias = np.zeros(n, dtype=np.int64)
        scaled = probs * n
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)
        for i in large + small:
            self.prob[i] = 1.0

    def sample(self, rng, size):
        cols = rng.integers(self.n, size=size)
        coins = rng.random(size)
        return np.where(coins < self.prob[cols], cols, self.alias[cols])


class NoiseDistribution:
    """Smoothed unigram noise: P(w) proportional to count(w)**power, with the
    root excluded (it is never predicted)."""

    def __init__(self, vocab, power=0.75):
        weights = np.asarray(vocab.counts, dtype=np.float64) ** power
        weights[vocab.root_id] = 0.0
        total = weights.sum()
        if total <= 0:
            raise DataError("noise distribution has no mass; vocabulary counts empty")
        self.probs = weights / total
        self.sampler = AliasSampler(self.probs)
        with np.errstate(divide="ignore"):
            self._log_probs = np.log(self.probs)

    def sample(self, rng, size):
        return self.sampler.sample(rng, size)

    def log_prob(self, ids):
        return self._log_probs[ids]


# ---------------------------------------------------------------------------
# Batch objectives
# ---------------------------------------------------------------------------

def nll_loss(model, trees, train=True, rng=None):
    """Mean per-sentence negative log-likelihood over a batch, with gradients."""
    grads = model.zero_grads()
    weight = -1.0 / len(trees)
    total = 0.0
    for tree in trees:
        trace = model.forward(tree, train=train, rng=rng)
        logp, dh = model.nll_head(trace, weight=weight, grads=grads)
        model.backward(trace, dh, grads)
        total -= logp
    return total / len(trees), grads


def nce_token_loss(model, h, target, noise_ids, log_k_pn_target, log_k_pn_noise, ln_z):
    """Loss and partials for one token: the realized word against its noise
    samples. Returns (loss, d_scores, rows) where rows = [target] + noise."""
    rows = np.concatenate([[target], noise_ids])
    scores = model.out_w[rows] @ h + model.out_b[rows] - ln_z
    delta = scores - np.concatenate([[log_k_pn_target], log_k_pn_noise])
    loss = -(log_sigmoid(delta[0]) + log_sigmoid(-delta[1:]).sum())
    pd = sigmoid(delta)
    d_scores = pd.copy()
    d_scores[0] = pd[0] - 1.0
    return loss, d_scores, rows


def nce_loss(model, trees, noise, k, ln_z, rng, train=True):
    """Noise-contrastive batch loss. ``ln_z`` is a shape-(1,) learned array;
    its gradient comes back under the key ``"ln_z"``. No full softmax is
    evaluated anywhere on this path."""
    if k < 1:
        raise ValueError("nce needs k >= 1")
    grads = model.zero_grads()
    grads["ln_z"] = np.zeros(1)
    weight = 1.0 / len(trees)
    log_k = np.log(k)
    total = 0.0
    for tree in trees:
        trace = model.forward(tree, train=train, rng=rng)
        n = len(trace)
        dh_top = np.zeros_like(trace.h_top)
        noise_ids = noise.sample(rng, (n, k))
        lp_noise = noise.log_prob(noise_ids) + log_k
        lp_target = noise.log_prob(trace.targets) + log_k
        for idx in range(n):
            loss_t, d_scores, rows = nce_token_loss(
                model, trace.h_top[idx], trace.targets[idx], noise_ids[idx],
                lp_target[idx], lp_noise[idx], ln_z[0],
            )
            total += loss_t
            d_scores *= weight
            np.add.at(grads["out_w"], rows, np.outer(d_scores, trace.h_top[idx]))
            np.add.at(grads["out_b"], rows, d_scores)
            grads["ln_z"][0] -= d_scores.sum()
            dh_top[idx] = model.out_w[rows].T @ d_scores
        model.backward(trace, dh_top, grads)
    return total / len(trees), grads


# ---------------------------------------------------------------------------
# Evaluation and the epoch loop
# ---------------------------------------------------------------------------

def corpus_nll(model, trees):
    """Exact validation NLL -> (mean per sentence, mean per token)."""
    total = 0.0
    tokens = 0
    for tree in trees:
        total -= model.log_prob(tree)
        tokens += len(tree)
    return total / len(trees), total / tokens


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_nll: float
    val_nll_per_token: float
    lr: float
    grad_norm_mean: float
    grad_norm_max: float
    postclip_max: float
    wall: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    def best_epoch(self):
        return min(self.rows, key=lambda r: r.val_nll)

    COLUMNS = (
        "epoch train_loss val_nll val_nll_per_token lr "
        "grad_norm_mean grad_norm_max postclip_max wall"
    ).split()

    def to_tsv(self, deterministic=True):
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            vals = [
                str(r.epoch),
                f"{r.train_loss:.10g}",
                f"{r.val_nll:.10g}",
                f"{r.val_nll_per_token:.10g}",
                f"{r.lr:.10g}",
                f"{r.grad_norm_mean:.10g}",
                f"{r.grad_norm_max:.10g}",
                f"{r.postclip_max:.10g}",
                "-" if deterministic else f"{r.wall:.3f}",
            ]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"


def train(model, cfg, train_trees, valid_trees, out_dir=None, vocab_hash=None,
          vocab=None):
    """Run the full training loop; returns (TrainReport, best parameter dict).

    Learning-rate schedule: once the relative validation improvement drops
    below the threshold, the rate is divided by 2 after every following
    epoch, until it falls under ``lr_floor_factor`` times its initial value.
    The best-validation parameters are kept and written as ``ckpt-best``.
    """
    train_trees = list(train_trees)
    valid_trees = list(valid_trees)
    if not train_trees or not valid_trees:
        raise DataError("training and validation corpora must be nonempty")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr
    halving = False
    report = TrainReport()

    noise = None
    ln_z = None
    if cfg.objective == "nce":
        if vocab is None:
            raise DataError("nce training needs the vocabulary for noise counts")
        noise = NoiseDistribution(vocab, power=cfg.noise_power)
        ln_z = np.array([cfg.ln_z_init])

    params = model.params()
    best = {k: v.copy() for k, v in params.items()}
    best_val = float("inf")
    last_good = {k: v.copy() for k, v in params.items()}
    prev_val, _ = corpus_nll(model, valid_trees)  # pre-training baseline
    t_start = time.perf_counter()

    def _write(path_dir, report_obj):
        d = Path(path_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.tsv").write_text(report_obj.to_tsv(cfg.deterministic))
        run_cfg = {"train": cfg.to_dict(), "model": model.cfg.to_dict()}
        (d / "config.json").write_text(json.dumps(run_cfg, indent=2, sort_keys=True))

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_trees)) if cfg.shuffle else np.arange(
            len(train_trees)
        )
        epoch_loss = 0.0
        n_batches = 0
        norms = []
        postclip = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_trees[i] for i in order[lo : lo + cfg.batch_size]]
            if cfg.objective == "nll":
                loss, grads = nll_loss(model, batch, rng=rng)
                step_params = params
            else:
                loss, grads = nce_loss(model, batch, noise, cfg.k, ln_z, rng)
                step_params = dict(params, ln_z=ln_z)
            if not np.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(
                        Path(out_dir) / "ckpt-last", _restored(model, last_good),
                        vocab_hash=vocab_hash,
                    )
                    _write(out_dir, report)
                raise NumericFault(
                    f"non-finite loss {loss} at epoch {epoch}, batch {n_batches}"
                )
            pre = clip_gradients(grads, cfg.clip)
            norms.append(pre)
            postclip.append(min(pre, cfg.clip))
            sgd_step(step_params, grads, lr)
            epoch_loss += loss
            n_batches += 1

        val_nll, val_tok = corpus_nll(model, valid_trees)
        report.rows.append(
            EpochRow(
                epoch=epoch,
                train_loss=epoch_loss / n_batches,
                val_nll=val_nll,
                val_nll_per_token=val_tok,
                lr=lr,
                grad_norm_mean=float(np.mean(norms)),
                grad_norm_max=float(np.max(norms)),
                postclip_max=float(np.max(postclip)),
                wall=time.perf_counter() - t_start,
            )
        )
        for k_, v in params.items():
            last_good[k_][...] = v
        if val_nll < best_val:
            best_val = val_nll
            for k_, v in params.items():
                best[k_][...] = v

        if not halving:
            rel = (prev_val - val_nll) / max(abs(prev_val), 1e-12)
            if rel < cfg.halve_threshold:
                halving = True
        prev_val = val_nll
        if halving:
            lr /= 2.0
            if lr < cfg.lr * cfg.lr_floor_factor:
                break

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "ckpt-last", model, vocab_hash=vocab_hash)
        save_checkpoint(
            out / "ckpt-best", _restored(model, best), vocab_hash=vocab_hash
        )
        _write(out_dir, report)
    return report, best


class _Restored:
    """View of a model with different parameter values, for checkpointing."""

    def __init__(self, model, values):
        self.cfg = model.cfg
        self._values = values

    def params(self):
        return self._values


def _restored(model, values):
    return _Restored(model, values)
