"""Late fusion scoring, ranking metrics, threshold tuning, the evaluation
mode grid and the logistic-regression baseline.

A candidate and a post are compared through the sigmoid of the inner product
of their fused embeddings. Decision thresholds are tuned on the validation
block only (max-F1 operating point and the recall>=0.8 operating point) and
then applied unchanged to the test block.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import neural_core as nc
from . import explicit_model as em
from . import implicit_model as im

MODES = ("entity-only", "explicit-both", "fused-entity", "fused-both")


class SingleClassError(ValueError):
    """Raised when a metric needs both classes but got only one."""


# ---------------------------------------------------------------------------
# Scores and metrics


def match_score(f, g) -> float:
    """Sigmoid of the inner product of two equal-length embeddings."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape or f.ndim != 1:
        raise nc.ShapeError(f"match_score: incompatible shapes {f.shape} and {g.shape}")
    z = float(f @ g)
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def compute_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties count one half (rank-sum form of pair counting).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC undefined: need at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    avg_rank = (starts + ends) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _confusion(scores, labels, threshold):
    pred = scores > threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, tn, fn


def f1_score(scores, labels, threshold) -> float:
    tp, fp, tn, fn = _confusion(scores, labels, threshold)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def recall_score(scores, labels, threshold) -> float:
    tp, fp, tn, fn = _confusion(scores, labels, threshold)
    return tp / (tp + fn) if tp + fn else 0.0


@dataclass
class Thresholds:
    """Validation-tuned operating points, both in (0, 1)."""
    theta_f1: float
    theta_r: float


def tune_thresholds(scores, labels, target_recall=0.8) -> Thresholds:
    """Pick the max-F1 threshold and the largest threshold keeping recall at
    the target. Candidates are midpoints of consecutive distinct scores plus
    the {0, 1} boundaries; F1 ties break toward the larger threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not ((labels == 1).any() and (labels == 0).any()):
        raise SingleClassError("threshold tuning needs both classes in validation")
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    # Boundary candidates stay strictly inside (0, 1) while still meaning
    # "accept everything" / "accept nothing" for the observed scores.
    low = distinct[0] / 2.0
    high = (distinct[-1] + 1.0) / 2.0
    candidates = np.concatenate([[low], mids, [high]])

    best_f1, theta_f1 = -1.0, low
    theta_r = low
    for theta in candidates:
        f1 = f1_score(scores, labels, theta)
        if f1 >= best_f1:
            best_f1, theta_f1 = f1, float(theta)
        if recall_score(scores, labels, theta) >= target_recall:
            theta_r = max(theta_r, float(theta))
    return Thresholds(theta_f1=float(theta_f1), theta_r=float(theta_r))


@dataclass
class MetricsReport:
    """Test-block metrics at validation-tuned thresholds."""
    mode: str
    auc: float
    accuracy: float
    f1: float
    precision_at_recall_0_8: float
    thresholds: Thresholds
    counts: dict
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "auc": self.auc,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "precision_at_recall_0.8": self.precision_at_recall_0_8,
            "thresholds": {"theta_f1": self.thresholds.theta_f1,
                           "theta_r": self.thresholds.theta_r},
            "counts": self.counts,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def build_report(mode, val_scores, val_labels, test_scores, test_labels,
                 config_hash: str) -> MetricsReport:
    thresholds = tune_thresholds(val_scores, val_labels)
    auc = compute_auc(test_scores, test_labels)
    tp, fp, tn, fn = _confusion(test_scores, test_labels, thresholds.theta_f1)
    accuracy = (tp + tn) / len(test_scores)
    f1 = f1_score(test_scores, test_labels, thresholds.theta_f1)
    tp_r, fp_r, _, _ = _confusion(test_scores, test_labels, thresholds.theta_r)
    precision_r = tp_r / (tp_r + fp_r) if tp_r + fp_r else 0.0
    counts = {
        "test_size": int(len(test_scores)),
        "positives": int(np.sum(test_labels == 1)),
        "negatives": int(np.sum(test_labels == 0)),
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
    }
    return MetricsReport(mode=mode, auc=auc, accuracy=accuracy, f1=f1,
                         precision_at_recall_0_8=precision_r,
                         thresholds=thresholds, counts=counts,
                         config_hash=config_hash)


# ---------------------------------------------------------------------------
# Model bundles and the evaluation grid


@dataclass
class ModelBundle:
    """Everything needed to score a corpus: schemas plus trained towers.

    The history towers are optional; fused modes require them.
    """
    resume_schema: object
    post_schema: object
    resume_tower: em.ExplicitTower
    post_tower: em.ExplicitTower
    candidate_tower: im.ImplicitTower | None = None
    post_intent_tower: im.ImplicitTower | None = None
    enc: em.EncodedCorpus | None = field(default=None, repr=False)

    def encoded(self, corpus) -> em.EncodedCorpus:
        if self.enc is None:
            self.enc = em.encode_corpus(corpus, self.resume_schema, self.post_schema,
                                        self.resume_tower.config, self.post_tower.config)
        return self.enc


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PJFIT_THREADS", "1")))
    except ValueError:
        return 1


def _chunked_embed(embed_fn, arrays, n, batch=512):
    """Run embed_fn over row chunks, optionally in a read-only thread pool."""
    chunks = [slice(s, min(s + batch, n)) for s in range(0, n, batch)]
    workers = _threads()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda sl: embed_fn(*[a[sl] for a in arrays]), chunks))
    else:
        parts = [embed_fn(*[a[sl] for a in arrays]) for sl in chunks]
    return np.concatenate(parts, axis=0)


def check_mode(bundle: ModelBundle, mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    wants_text = mode in ("explicit-both", "fused-both")
    if bundle.resume_tower.config.use_text != wants_text:
        kind = "with" if wants_text else "without"
        raise nc.CheckpointError(
            f"mode {mode!r} needs content towers trained {kind} the text branch")
    if mode.startswith("fused") and (bundle.candidate_tower is None
                                     or bundle.post_intent_tower is None):
        raise nc.CheckpointError(f"mode {mode!r} needs history towers in the checkpoint")


def _fused_embeddings(corpus, bundle: ModelBundle, positions, enc):
    """Candidate-side and post-side embeddings for `positions` under fusion."""
    n = len(enc.resume_idx)
    record_content = em.embed_records(bundle.resume_tower, enc)
    post_content = em.embed_posts(bundle.post_tower, enc)
    config = bundle.candidate_tower.config
    hist = im.build_history_arrays(corpus, positions, record_content,
                                   post_content, enc.post_row, config)
    f_int = _chunked_embed(
        lambda seqs: bundle.candidate_tower.embed(seqs, config.max_candidate_history).data,
        [hist.candidate_seqs], len(positions))
    g_int = _chunked_embed(
        lambda seqs: bundle.post_intent_tower.embed(seqs, config.max_post_history).data,
        [hist.post_seqs], len(positions))
    f = np.concatenate([record_content[positions], f_int], axis=1)
    g = np.concatenate([post_content[enc.post_row[positions]], g_int], axis=1)
    return f, g


def _mode_scores(corpus, bundle: ModelBundle, positions, mode) -> np.ndarray:
    enc = bundle.encoded(corpus)
    positions = np.asarray(positions)
    if mode.startswith("fused"):
        f, g = _fused_embeddings(corpus, bundle, positions, enc)
    else:
        rows = enc.post_row[positions]
        f = _chunked_embed(
            lambda i, v, *t: bundle.resume_tower.embed(i, v, t[0] if t else None).data,
            [enc.resume_idx[positions], enc.resume_val[positions]]
            + ([enc.resume_text[positions]] if enc.resume_text is not None else []),
            len(positions))
        g = _chunked_embed(
            lambda i, v, *t: bundle.post_tower.embed(i, v, t[0] if t else None).data,
            [enc.post_idx[rows], enc.post_val[rows]]
            + ([enc.post_text[rows]] if enc.post_text is not None else []),
            len(positions))
    z = np.sum(f * g, axis=1)
    return 1.0 / (1.0 + np.exp(-np.clip(z, -700, 700)))


def _eval_hash(corpus, split, mode, bundle: ModelBundle | None, extra=None) -> str:
    payload = {
        "mode": mode,
        "seed": corpus.seed,
        "corpus": corpus.config.__dict__ if corpus.config else None,
        "split": [len(split.train), len(split.validation), len(split.test)],
    }
    if bundle is not None:
        payload["explicit"] = {
            "resume": bundle.resume_tower.config.to_dict(),
            "post": bundle.post_tower.config.to_dict(),
        }
        if bundle.candidate_tower is not None:
            payload["implicit"] = bundle.candidate_tower.config.to_dict()
    if extra:
        payload.update(extra)
    return nc.config_hash(payload)


def evaluate(corpus, split, bundle: ModelBundle, mode: str) -> MetricsReport:
    """Score the test block under `mode` with thresholds tuned on validation."""
    check_mode(bundle, mode)
    labels = np.array([r.label for r in corpus.records], dtype=np.int64)
    val_scores = _mode_scores(corpus, bundle, np.array(split.validation), mode)
    test_scores = _mode_scores(corpus, bundle, np.array(split.test), mode)
    return build_report(mode, val_scores, labels[np.array(split.validation)],
                        test_scores, labels[np.array(split.test)],
                        _eval_hash(corpus, split, mode, bundle))


# ---------------------------------------------------------------------------
# Logistic-regression baseline


@dataclass
class LrHyper:
    epochs: int = 15
    lr: float = 0.05
    weight_decay: float = 1e-6
    batch_size: int = 256
    seed: int = 0


def lr_baseline(corpus, split, resume_schema, post_schema,
                hyper: LrHyper | None = None):
    """Logistic regression over the concatenated resume and post sparse
    vectors, trained with Adam plus L2 and evaluated exactly like the towers.

    Returns (MetricsReport, TrainingLog).
    """
    from .extraction import extract_entities, encode_sparse

    hyper = hyper or LrHyper()
    n = len(corpus.records)
    width = resume_schema.s + post_schema.s
    idx = np.zeros((n, width), dtype=np.int64)
    val = np.zeros((n, width))
    post_cache = {}
    for pid, doc in corpus.posts.items():
        sf = encode_sparse(extract_entities(doc, post_schema), post_schema)
        post_cache[pid] = (np.asarray(sf.indices, dtype=np.int64) + resume_schema.d_x,
                           np.asarray(sf.values))
    for i, rec in enumerate(corpus.records):
        sf = encode_sparse(extract_entities(rec.resume, resume_schema), resume_schema)
        idx[i, :resume_schema.s] = sf.indices
        val[i, :resume_schema.s] = sf.values
        pidx, pval = post_cache[rec.post]
        idx[i, resume_schema.s:] = pidx
        val[i, resume_schema.s:] = pval

    labels = np.array([r.label for r in corpus.records], dtype=np.float64)
    weights = nc.Parameter("lr.w", np.zeros(resume_schema.d_x + post_schema.d_x))
    bias = nc.Parameter("lr.b", np.zeros(1))
    params = [weights, bias]

    def scores_at(positions):
        z = nc.mul(nc.embedding_lookup(idx[positions], weights),
                   val[positions]).sum(axis=1) + bias
        return nc.sigmoid(z)

    rng = np.random.default_rng(hyper.seed)
    train_positions = np.array(split.train)
    val_positions = np.array(split.validation)
    test_positions = np.array(split.test)
    log = em.TrainingLog()
    best_values = None
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(train_positions)
        total_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            loss = nc.bce_loss(scores_at(batch), labels[batch])
            if not np.isfinite(loss.data):
                raise nc.NumericsError(
                    f"non-finite baseline loss at epoch {epoch}")
            nc.zero_grads(params)
            nc.backward(loss)
            nc.adam_step(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
            total_loss += float(loss.data) * len(batch)
        val_auc = compute_auc(scores_at(val_positions).data, labels[val_positions])
        log.epochs.append(em.EpochStats(epoch=epoch,
                                        train_loss=total_loss / len(order),
                                        val_auc=val_auc))
        if best_values is None or val_auc > log.best_val_auc:
            log.best_epoch, log.best_val_auc = epoch, val_auc
            best_values = (weights.data.copy(), bias.data.copy())
    weights.data, bias.data = best_values

    report = build_report(
        "lr-baseline",
        scores_at(val_positions).data, labels[val_positions],
        scores_at(test_positions).data, labels[test_positions],
        _eval_hash(corpus, split, "lr-baseline", None,
                   extra={"lr_hyper": hyper.__dict__}))
    return report, log
