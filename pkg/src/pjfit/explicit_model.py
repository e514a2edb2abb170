"""Content towers: factorization-machine block over sparse entities plus a
convolutional encoder over free text, fused by a linear layer into one
embedding per document side.

The FM block emits the weighted active slots (first order), the pairwise
interaction vector computed with the sum-of-squares identity (second order),
and a dense stack over the concatenated slot embeddings. The text branch
embeds words and runs two convolution blocks with max-pooling. Each side
(resume, post) has its own tower; they share no parameters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict

import numpy as np

from . import neural_core as nc
from .extraction import SparseFeature

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

PAD_WORD = "<pad>"
UNK_WORD = "<unk>"


@dataclass
class ExplicitConfig:
    """Dimensions of one content tower.

    out_dim is the embedding length produced for the matching inner product.
    The text settings are ignored when use_text is False.
    """
    s: int
    d_x: int
    fm_dim: int = 7
    out_dim: int = 32
    hidden_widths: tuple = (64, 64)
    use_text: bool = True
    max_sentences: int = 8
    max_words: int = 16
    word_embed_dim: int = 16
    conv_channels: int = 8
    conv1_height: int = 3
    conv2_height: int = 3
    pool_height: int = 2
    text_out_dim: int = 32
    word_vocab: tuple = ()

    def __post_init__(self):
        self.hidden_widths = tuple(self.hidden_widths)
        self.word_vocab = tuple(self.word_vocab)
        if self.fm_dim < 1 or self.out_dim < 1:
            raise ValueError("fm_dim and out_dim must be >= 1")
        if self.use_text:
            if min(self.max_sentences, self.max_words, self.word_embed_dim) < 1:
                raise ValueError("text dimensions must be >= 1")
            if len(self.word_vocab) < 2:
                raise ValueError("use_text requires a word vocabulary")
            if self.text_rows_after_conv() < 1:
                raise ValueError("text dimensions too small for the convolution stack")

    def text_rows_after_conv(self) -> int:
        rows = self.max_sentences * self.max_words
        rows = (rows - self.conv1_height + 1) // self.pool_height
        rows = rows - self.conv2_height + 1
        return rows // self.pool_height if rows > 0 else 0

    def text_flat_dim(self) -> int:
        return self.conv_channels * self.text_rows_after_conv()

    def concat_dim(self) -> int:
        width = self.s + self.fm_dim + self.hidden_widths[-1]
        if self.use_text:
            width += self.text_out_dim
        return width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["word_vocab"] = list(self.word_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExplicitConfig":
        d = dict(d)
        d["hidden_widths"] = tuple(d["hidden_widths"])
        d["word_vocab"] = tuple(d["word_vocab"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Text preparation


def tokenize(sentence: str):
    return _TOKEN_RE.findall(sentence.lower())


def build_word_vocab(sentence_lists) -> tuple:
    """Vocabulary from train sentences: pad first, unknown last, middle sorted."""
    words = set()
    for sentences in sentence_lists:
        for sentence in sentences:
            words.update(tokenize(sentence))
    words.discard(PAD_WORD)
    words.discard(UNK_WORD)
    return (PAD_WORD, *sorted(words), UNK_WORD)


def text_matrix(sentences, config: ExplicitConfig) -> np.ndarray:
    """Fixed-shape word-index matrix via truncation and zero (pad) padding."""
    index = {w: i for i, w in enumerate(config.word_vocab)}
    unk = len(config.word_vocab) - 1
    out = np.zeros((config.max_sentences, config.max_words), dtype=np.int64)
    for i, sentence in enumerate(sentences[:config.max_sentences]):
        for j, word in enumerate(tokenize(sentence)[:config.max_words]):
            out[i, j] = index.get(word, unk)
    return out


# ---------------------------------------------------------------------------
# Tower


class ExplicitTower:
    """One content tower with named parameters under `prefix`."""

    def __init__(self, config: ExplicitConfig, prefix: str, rng: np.random.Generator):
        self.config = config
        self.prefix = prefix
        self.params = {}
        c = config

        def make(name, shape, fan_in, zero=False):
            data = np.zeros(shape) if zero else nc.uniform_init(rng, shape, fan_in)
            p = nc.Parameter(f"{prefix}.{name}", data)
            self.params[name] = p
            return p

        make("fm.w", (c.d_x,), 1)
        make("fm.v", (c.d_x, c.fm_dim), c.fm_dim)
        width_in = c.s * c.fm_dim
        for li, width in enumerate(c.hidden_widths):
            make(f"deep.{li}.w", (width_in, width), width_in)
            make(f"deep.{li}.b", (width,), width_in, zero=True)
            width_in = width
        if c.use_text:
            make("text.embed", (len(c.word_vocab), c.word_embed_dim), c.word_embed_dim)
            make("text.conv1.k", (c.conv_channels, 1, c.conv1_height, c.word_embed_dim),
                 c.conv1_height * c.word_embed_dim)
            make("text.conv1.b", (c.conv_channels,), 1, zero=True)
            make("text.conv2.k", (c.conv_channels, c.conv_channels, c.conv2_height, 1),
                 c.conv2_height * c.conv_channels)
            make("text.conv2.b", (c.conv_channels,), 1, zero=True)
            make("text.fc.w", (c.text_flat_dim(), c.text_out_dim), c.text_flat_dim())
            make("text.fc.b", (c.text_out_dim,), 1, zero=True)
        make("out.w", (c.concat_dim(), c.out_dim), c.concat_dim())
        make("out.b", (c.out_dim,), 1, zero=True)

    def parameters(self):
        return list(self.params.values())

    def param_values(self) -> dict:
        return {p.name: p.data.copy() for p in self.params.values()}

    def load_values(self, values: dict):
        expected = {p.name: p.data for p in self.params.values()}
        nc.validate_params(expected, values, f"tower {self.prefix}")
        for p in self.params.values():
            p.data = values[p.name].copy()

    # -- forward pieces (batched) --

    def _fm_and_deep(self, idx, val):
        c = self.config
        first = nc.mul(nc.embedding_lookup(idx, self.params["fm.w"]), val)
        rows = nc.embedding_lookup(idx, self.params["fm.v"])
        xv = nc.mul(rows, val[:, :, None])
        total = xv.sum(axis=1)
        square_of_sum = nc.mul(total, total)
        sum_of_squares = nc.mul(xv, xv).sum(axis=1)
        second = square_of_sum - sum_of_squares
        h = nc.reshape(xv, (idx.shape[0], c.s * c.fm_dim))
        for li in range(len(c.hidden_widths)):
            h = nc.relu(nc.dense_forward(
                h, self.params[f"deep.{li}.w"], self.params[f"deep.{li}.b"]))
        return first, second, h

    def _text(self, text_idx):
        c = self.config
        batch = text_idx.shape[0]
        flat_idx = text_idx.reshape(batch, c.max_sentences * c.max_words)
        emb = nc.embedding_lookup(flat_idx, self.params["text.embed"])
        img = nc.reshape(emb, (batch, 1, c.max_sentences * c.max_words, c.word_embed_dim))
        h = nc.relu(nc.conv2d_forward(img, self.params["text.conv1.k"],
                                      self.params["text.conv1.b"]))
        h = nc.maxpool(h, (c.pool_height, 1))
        h = nc.relu(nc.conv2d_forward(h, self.params["text.conv2.k"],
                                      self.params["text.conv2.b"]))
        h = nc.maxpool(h, (c.pool_height, 1))
        h = nc.reshape(h, (batch, c.text_flat_dim()))
        return nc.dense_forward(h, self.params["text.fc.w"], self.params["text.fc.b"])

    def embed(self, idx: np.ndarray, val: np.ndarray, text_idx=None) -> nc.Tensor:
        """Embed a batch: idx/val are (B, s) active slots, text_idx (B, S, W)."""
        c = self.config
        if idx.ndim != 2 or idx.shape[1] != c.s:
            raise nc.ShapeError(
                f"tower {self.prefix}: expected (batch, {c.s}) active slots, "
                f"got {idx.shape}")
        parts = list(self._fm_and_deep(idx, val))
        if c.use_text:
            if text_idx is None:
                raise nc.ShapeError(f"tower {self.prefix}: text input required")
            parts.append(self._text(text_idx))
        h = nc.concat(parts, axis=1)
        return nc.dense_forward(h, self.params["out.w"], self.params["out.b"])


# ---------------------------------------------------------------------------
# Spec-level single-input operations


def _check_sparse(x: SparseFeature):
    idx = np.asarray(x.indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("sparse feature has no active slots")
    if np.any(np.diff(idx) <= 0) or idx[-1] >= x.d_x:
        raise ValueError("sparse feature indices must be strictly increasing and < d_x")
    return idx, np.asarray(x.values, dtype=np.float64)


def fm_first_order(x: SparseFeature, w) -> nc.Tensor:
    """Weighted active slots in schema order; one output per slot."""
    idx, val = _check_sparse(x)
    return nc.mul(nc.embedding_lookup(idx[None, :], w), val[None, :]).reshape(len(idx))


def fm_second_order(x: SparseFeature, v) -> nc.Tensor:
    """Pairwise interaction vector via (sum)^2 - sum of squares.

    Equals the two-sided sum over ordered pairs i != j exactly: the identity
    counts each unordered pair twice, matching that sum.
    """
    idx, val = _check_sparse(x)
    xv = nc.mul(nc.embedding_lookup(idx[None, :], v), val[None, :, None])
    total = xv.sum(axis=1)
    return (nc.mul(total, total) - nc.mul(xv, xv).sum(axis=1)).reshape(-1)


def deep_component(x: SparseFeature, v, blocks) -> nc.Tensor:
    """Concatenated value-weighted slot embeddings through dense+relu blocks.

    blocks is a list of (weights, bias) pairs; an empty list returns the
    concatenation itself.
    """
    idx, val = _check_sparse(x)
    xv = nc.mul(nc.embedding_lookup(idx[None, :], v), val[None, :, None])
    h = nc.reshape(xv, (1, len(idx) * v.data.shape[1]))
    for weights, bias in blocks:
        h = nc.relu(nc.dense_forward(h, weights, bias))
    return h.reshape(h.data.shape[1])


def text_cnn(text: np.ndarray, tower: ExplicitTower) -> nc.Tensor:
    """Text branch of a tower for a single (sentences, words) index matrix."""
    c = tower.config
    if text.shape != (c.max_sentences, c.max_words):
        raise nc.ShapeError(
            f"text matrix {text.shape} does not match configured "
            f"({c.max_sentences}, {c.max_words})")
    return tower._text(text[None, :, :]).reshape(c.text_out_dim)


def explicit_embed(features, tower: ExplicitTower) -> nc.Tensor:
    """Embed one document given (SparseFeature, text matrix or None)."""
    sparse, text = features
    idx, val = _check_sparse(sparse)
    if len(idx) != tower.config.s:
        raise ValueError(
            f"active slot count {len(idx)} != tower s={tower.config.s}")
    text_batch = text[None, :, :] if text is not None else None
    return tower.embed(idx[None, :], val[None, :], text_batch).reshape(tower.config.out_dim)


# ---------------------------------------------------------------------------
# Corpus encoding and training


@dataclass
class EncodedCorpus:
    """Pre-encoded features for every record and post, aligned by position."""
    resume_idx: np.ndarray
    resume_val: np.ndarray
    resume_text: np.ndarray | None
    post_row: np.ndarray          # record position -> row in the post arrays
    post_ids: list
    post_idx: np.ndarray
    post_val: np.ndarray
    post_text: np.ndarray | None
    labels: np.ndarray


def encode_corpus(corpus, resume_schema, post_schema,
                  resume_config: ExplicitConfig, post_config: ExplicitConfig) -> EncodedCorpus:
    from .extraction import extract_entities, encode_sparse

    n = len(corpus.records)
    resume_idx = np.zeros((n, resume_schema.s), dtype=np.int64)
    resume_val = np.zeros((n, resume_schema.s))
    resume_text = (np.zeros((n, resume_config.max_sentences, resume_config.max_words),
                            dtype=np.int64) if resume_config.use_text else None)
    for i, rec in enumerate(corpus.records):
        sf = encode_sparse(extract_entities(rec.resume, resume_schema), resume_schema)
        resume_idx[i] = sf.indices
        resume_val[i] = sf.values
        if resume_text is not None:
            resume_text[i] = text_matrix(rec.resume.sentences, resume_config)

    post_ids = sorted(corpus.posts)
    post_pos = {pid: i for i, pid in enumerate(post_ids)}
    post_idx = np.zeros((len(post_ids), post_schema.s), dtype=np.int64)
    post_val = np.zeros((len(post_ids), post_schema.s))
    post_text = (np.zeros((len(post_ids), post_config.max_sentences, post_config.max_words),
                          dtype=np.int64) if post_config.use_text else None)
    for pid in post_ids:
        doc = corpus.posts[pid]
        sf = encode_sparse(extract_entities(doc, post_schema), post_schema)
        post_idx[post_pos[pid]] = sf.indices
        post_val[post_pos[pid]] = sf.values
        if post_text is not None:
            post_text[post_pos[pid]] = text_matrix(doc.sentences, post_config)

    post_row = np.array([post_pos[rec.post] for rec in corpus.records], dtype=np.int64)
    labels = np.array([rec.label for rec in corpus.records], dtype=np.float64)
    return EncodedCorpus(resume_idx=resume_idx, resume_val=resume_val,
                         resume_text=resume_text, post_row=post_row,
                         post_ids=post_ids, post_idx=post_idx, post_val=post_val,
                         post_text=post_text, labels=labels)


@dataclass
class TrainHyper:
    epochs: int = 20
    lr: float = 0.005
    weight_decay: float = 1e-5
    batch_size: int = 64
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")


def _pair_scores(resume_tower, post_tower, enc: EncodedCorpus, positions) -> np.ndarray:
    """Sigmoid inner-product scores for record positions, in chunks."""
    out = np.zeros(len(positions))
    for start in range(0, len(positions), 512):
        chunk = positions[start:start + 512]
        f, g = _pair_embed(resume_tower, post_tower, enc, chunk)
        z = np.sum(f.data * g.data, axis=1)
        out[start:start + 512] = 1.0 / (1.0 + np.exp(-z))
    return out


def _pair_embed(resume_tower, post_tower, enc: EncodedCorpus, positions):
    rows = enc.post_row[positions]
    f = resume_tower.embed(
        enc.resume_idx[positions], enc.resume_val[positions],
        enc.resume_text[positions] if enc.resume_text is not None else None)
    g = post_tower.embed(
        enc.post_idx[rows], enc.post_val[rows],
        enc.post_text[rows] if enc.post_text is not None else None)
    return f, g


def embed_records(tower: ExplicitTower, enc: EncodedCorpus, batch=512) -> np.ndarray:
    """Frozen-tower embeddings f_E for every record, as a plain array."""
    n = enc.resume_idx.shape[0]
    out = np.zeros((n, tower.config.out_dim))
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        text = enc.resume_text[sl] if enc.resume_text is not None else None
        out[sl] = tower.embed(enc.resume_idx[sl], enc.resume_val[sl], text).data
    return out


def embed_posts(tower: ExplicitTower, enc: EncodedCorpus, batch=512) -> np.ndarray:
    """Frozen-tower embeddings g_E for every post row."""
    n = enc.post_idx.shape[0]
    out = np.zeros((n, tower.config.out_dim))
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        text = enc.post_text[sl] if enc.post_text is not None else None
        out[sl] = tower.embed(enc.post_idx[sl], enc.post_val[sl], text).data
    return out


def train_explicit(corpus, split, resume_tower: ExplicitTower,
                   post_tower: ExplicitTower, hyper: TrainHyper,
                   enc: EncodedCorpus | None = None,
                   resume_schema=None, post_schema=None) -> TrainingLog:
    """Minimize binary cross-entropy of the paired tower scores on the train
    block; validation ranking quality is logged per epoch and the best
    parameters are restored at the end.
    """
    from .fusion_eval import compute_auc

    if len(split.train) == 0:
        raise ValueError("train split is empty")
    if enc is None:
        if resume_schema is None or post_schema is None:
            raise ValueError("need either an EncodedCorpus or both schemas")
        enc = encode_corpus(corpus, resume_schema, post_schema,
                            resume_tower.config, post_tower.config)

    rng = np.random.default_rng(hyper.seed)
    params = resume_tower.parameters() + post_tower.parameters()
    train_positions = np.array(split.train)
    val_positions = np.array(split.validation)
    log = TrainingLog()
    best_values = None

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(train_positions)
        total_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            f, g = _pair_embed(resume_tower, post_tower, enc, batch)
            score = nc.sigmoid(nc.mul(f, g).sum(axis=1))
            loss = nc.bce_loss(score, enc.labels[batch])
            if not np.isfinite(loss.data):
                raise nc.NumericsError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch {start // hyper.batch_size}")
            nc.zero_grads(params)
            nc.backward(loss)
            nc.adam_step(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
            total_loss += float(loss.data) * len(batch)

        val_scores = _pair_scores(resume_tower, post_tower, enc, val_positions)
        val_auc = compute_auc(val_scores, enc.labels[val_positions])
        log.epochs.append(EpochStats(epoch=epoch,
                                     train_loss=total_loss / len(order),
                                     val_auc=val_auc))
        if best_values is None or val_auc > log.best_val_auc:
            log.best_epoch = epoch
            log.best_val_auc = val_auc
            best_values = {**resume_tower.param_values(), **post_tower.param_values()}

    resume_tower.load_values({k: v for k, v in best_values.items()
                              if k.startswith(resume_tower.prefix)})
    post_tower.load_values({k: v for k, v in best_values.items()
                            if k.startswith(post_tower.prefix)})
    return log
