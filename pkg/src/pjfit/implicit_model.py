"""History towers: an LSTM over encoded past applications per post and per
candidate, each followed by a linear head.

Every history item concatenates the content embedding of the past resume,
a two-bit decision one-hot (accept 10, reject 01, pad 00) and the content
embedding of the post involved. Sequences are truncated to the most recent
entries and left-padded with all-zero items so the final LSTM step is a real
application whenever one exists.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, asdict

import numpy as np

from . import neural_core as nc

ACCEPT = "accept"
REJECT = "reject"
PAD = "pad"

_DECISION_BITS = {ACCEPT: (1.0, 0.0), REJECT: (0.0, 1.0), PAD: (0.0, 0.0)}


@dataclass
class ImplicitConfig:
    content_dim: int              # embedding length of the content towers
    hidden_size: int = 64
    out_dim: int = 64
    max_post_history: int = 20
    max_candidate_history: int = 5

    def __post_init__(self):
        if min(self.content_dim, self.hidden_size, self.out_dim,
               self.max_post_history, self.max_candidate_history) < 1:
            raise ValueError("all history-model dimensions must be >= 1")

    @property
    def item_dim(self) -> int:
        return 2 * self.content_dim + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ImplicitConfig":
        return cls(**d)


def encode_history(items, max_len: int, content_dim: int | None = None) -> np.ndarray:
    """Fixed-length sequence of history items, most recent last.

    items are (resume_vec, post_vec, decision) triples in review order.
    Longer histories keep the most recent max_len entries; shorter ones are
    left-padded with zero items whose decision bits are 00. content_dim is
    required for the cold-start case (no items to infer it from).
    """
    kept = list(items)[-max_len:]
    if kept:
        content_dim = len(kept[0][0])
    elif content_dim is None:
        raise ValueError("content_dim required to encode an empty history")
    width = 2 * content_dim + 2
    out = np.zeros((max_len, width))
    offset = max_len - len(kept)
    for i, (resume_vec, post_vec, decision) in enumerate(kept):
        bits = _DECISION_BITS[decision]
        out[offset + i, :content_dim] = resume_vec
        out[offset + i, content_dim:content_dim + 2] = bits
        out[offset + i, content_dim + 2:] = post_vec
    return out


class ImplicitTower:
    """LSTM encoder plus linear head producing a fixed-length intent vector."""

    def __init__(self, config: ImplicitConfig, prefix: str, rng: np.random.Generator):
        self.config = config
        self.prefix = prefix
        in_dim = config.item_dim + config.hidden_size
        self.params = {
            "lstm.w": nc.Parameter(f"{prefix}.lstm.w",
                                   nc.uniform_init(rng, (in_dim, 4 * config.hidden_size),
                                                   in_dim)),
            "lstm.b": nc.Parameter(f"{prefix}.lstm.b", np.zeros(4 * config.hidden_size)),
            "head.w": nc.Parameter(f"{prefix}.head.w",
                                   nc.uniform_init(rng, (config.hidden_size, config.out_dim),
                                                   config.hidden_size)),
            "head.b": nc.Parameter(f"{prefix}.head.b", np.zeros(config.out_dim)),
        }

    def parameters(self):
        return list(self.params.values())

    def param_values(self) -> dict:
        return {p.name: p.data.copy() for p in self.params.values()}

    def load_values(self, values: dict):
        expected = {p.name: p.data for p in self.params.values()}
        nc.validate_params(expected, values, f"tower {self.prefix}")
        for p in self.params.values():
            p.data = values[p.name].copy()

    def embed(self, sequences: np.ndarray, max_len: int) -> nc.Tensor:
        """Embed a batch of (B, max_len, item_dim) sequences."""
        c = self.config
        if sequences.ndim != 3 or sequences.shape[1] != max_len \
                or sequences.shape[2] != c.item_dim:
            raise nc.ShapeError(
                f"tower {self.prefix}: expected (batch, {max_len}, {c.item_dim}) "
                f"sequences, got {sequences.shape}")
        state = nc.lstm_zero_state(sequences.shape[0], c.hidden_size)
        for t in range(max_len):
            state = nc.lstm_step(nc.Tensor(sequences[:, t, :]), state,
                                 self.params["lstm.w"], self.params["lstm.b"])
        return nc.dense_forward(state.h, self.params["head.w"], self.params["head.b"])


def implicit_embed(sequence: np.ndarray, tower: ImplicitTower, max_len: int) -> nc.Tensor:
    """Embed one (max_len, item_dim) sequence."""
    return tower.embed(sequence[None, :, :], max_len).reshape(tower.config.out_dim)


# ---------------------------------------------------------------------------
# History assembly from a corpus


@dataclass
class HistoryArrays:
    """Per-record history sequences for the post side and the candidate side."""
    post_seqs: np.ndarray         # (n, max_post_history, item_dim)
    candidate_seqs: np.ndarray    # (n, max_candidate_history, item_dim)


def build_history_arrays(corpus, positions, record_content: np.ndarray,
                         post_content: np.ndarray, post_row: np.ndarray,
                         config: ImplicitConfig) -> HistoryArrays:
    """Assemble both history sequences for each record position.

    record_content holds the frozen content embedding of every record's
    resume, post_content of every post (indexed by post_row). The query
    record itself is never part of its own history.
    """
    n = len(positions)
    d = config.content_dim
    post_seqs = np.zeros((n, config.max_post_history, config.item_dim))
    cand_seqs = np.zeros((n, config.max_candidate_history, config.item_dim))
    records = corpus.records
    for row, pos in enumerate(positions):
        rec = records[pos]
        post_positions = corpus._post_index[rec.post]
        earlier = post_positions[:bisect_left(post_positions, pos)]
        offset = config.max_post_history - min(len(earlier), config.max_post_history)
        own_post_vec = post_content[post_row[pos]]
        for i, j in enumerate(earlier[-config.max_post_history:]):
            past = records[j]
            t = offset + i
            post_seqs[row, t, :d] = record_content[j]
            post_seqs[row, t, d] = 1.0 if past.label == 1 else 0.0
            post_seqs[row, t, d + 1] = 0.0 if past.label == 1 else 1.0
            post_seqs[row, t, d + 2:] = own_post_vec

        cand_positions = corpus._cand_index[rec.candidate]
        earlier = cand_positions[:bisect_left(cand_positions, pos)]
        offset = config.max_candidate_history - min(len(earlier), config.max_candidate_history)
        for i, j in enumerate(earlier[-config.max_candidate_history:]):
            past = records[j]
            t = offset + i
            cand_seqs[row, t, :d] = record_content[j]
            cand_seqs[row, t, d] = 1.0 if past.label == 1 else 0.0
            cand_seqs[row, t, d + 1] = 0.0 if past.label == 1 else 1.0
            cand_seqs[row, t, d + 2:] = post_content[post_row[j]]
    return HistoryArrays(post_seqs=post_seqs, candidate_seqs=cand_seqs)


def _pair_scores(candidate_tower, post_tower, hist: HistoryArrays, config,
                 rows) -> np.ndarray:
    out = np.zeros(len(rows))
    for start in range(0, len(rows), 512):
        chunk = rows[start:start + 512]
        f = candidate_tower.embed(hist.candidate_seqs[chunk], config.max_candidate_history)
        g = post_tower.embed(hist.post_seqs[chunk], config.max_post_history)
        z = np.sum(f.data * g.data, axis=1)
        out[start:start + 512] = 1.0 / (1.0 + np.exp(-z))
    return out


def train_implicit(corpus, split, record_content, post_content, post_row,
                   candidate_tower: ImplicitTower, post_tower: ImplicitTower,
                   hyper) -> "TrainingLog":
    """Train both history towers against the labels with the content towers
    frozen: gradients flow only into the LSTM and head parameters.

    record_content/post_content are the precomputed frozen content
    embeddings; refusing to accept None makes the freezing explicit.
    """
    from .explicit_model import EpochStats, TrainingLog
    from .fusion_eval import compute_auc

    if record_content is None or post_content is None:
        raise ValueError("content towers must be trained and frozen first: "
                         "missing precomputed embeddings")
    if len(split.train) == 0:
        raise ValueError("train split is empty")
    config = candidate_tower.config
    if config.content_dim != record_content.shape[1]:
        raise nc.ShapeError(
            f"history config expects content_dim={config.content_dim}, "
            f"embeddings have {record_content.shape[1]}")

    labels = np.array([r.label for r in corpus.records], dtype=np.float64)
    train_positions = np.array(split.train)
    val_positions = np.array(split.validation)
    used = np.concatenate([train_positions, val_positions])
    hist = build_history_arrays(corpus, used, record_content, post_content,
                                post_row, config)
    row_of = {pos: i for i, pos in enumerate(used)}
    train_rows = np.array([row_of[p] for p in train_positions])
    val_rows = np.array([row_of[p] for p in val_positions])
    train_labels = labels[train_positions]
    val_labels = labels[val_positions]

    rng = np.random.default_rng(hyper.seed)
    params = candidate_tower.parameters() + post_tower.parameters()
    log = TrainingLog()
    best_values = None

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train_rows))
        total_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            sel = order[start:start + hyper.batch_size]
            rows = train_rows[sel]
            f = candidate_tower.embed(hist.candidate_seqs[rows],
                                      config.max_candidate_history)
            g = post_tower.embed(hist.post_seqs[rows], config.max_post_history)
            score = nc.sigmoid(nc.mul(f, g).sum(axis=1))
            loss = nc.bce_loss(score, train_labels[sel])
            if not np.isfinite(loss.data):
                raise nc.NumericsError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch {start // hyper.batch_size}")
            nc.zero_grads(params)
            nc.backward(loss)
            nc.adam_step(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
            total_loss += float(loss.data) * len(sel)

        val_scores = _pair_scores(candidate_tower, post_tower, hist, config, val_rows)
        val_auc = compute_auc(val_scores, val_labels)
        log.epochs.append(EpochStats(epoch=epoch,
                                     train_loss=total_loss / len(order),
                                     val_auc=val_auc))
        if best_values is None or val_auc > log.best_val_auc:
            log.best_epoch = epoch
            log.best_val_auc = val_auc
            best_values = {**candidate_tower.param_values(), **post_tower.param_values()}

    candidate_tower.load_values({k: v for k, v in best_values.items()
                                 if k.startswith(candidate_tower.prefix)})
    post_tower.load_values({k: v for k, v in best_values.items()
                            if k.startswith(post_tower.prefix)})
    return log
