"""Desk-scale trainable encoder with hand-written backpropagation.

The encoder is an embedding lookup followed by causal mean-pool mixing
layers::

    M = cumulative_mean(X)            # row t = mean of rows 0..t
    X <- X + gain * tanh(M @ W)

so each [EOU] row can aggregate the tokens before it. A linear head on the
final rows predicts the next token. Training is plain SGD on next-token
cross-entropy, optionally plus the calibration loss on the encoder output.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dialogue import N_RESERVED, Dialogue, Segmentation, flatten_dialogue
from .errors import ConfigError, NonFiniteLoss, ParseError, SequenceTooLong, UnknownToken
from .geometry import block_contrast, corpus_mean, metric_report, similarity_matrix
from .losses import CalibrationConfig, simdrc_loss, simdrc_loss_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    d: int = 16
    n_mix_layers: int = 2
    context_window: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError("embedding dimension d must be >= 2")
        if self.vocab_size < N_RESERVED + 1:
            raise ConfigError(f"vocab_size must exceed the {N_RESERVED} reserved ids")
        if not 0 <= self.n_mix_layers <= 4:
            raise ConfigError("n_mix_layers must be in 0..4")
        if self.context_window < 2:
            raise ConfigError("context_window must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass
class EncoderParams:
    config: EncoderConfig
    embedding: np.ndarray  # (vocab_size, d)
    mix_weights: np.ndarray  # (n_mix_layers, d, d)
    gains: np.ndarray  # (n_mix_layers,)
    projection: np.ndarray  # (d, vocab_size)

    def arrays(self) -> list[np.ndarray]:
        return [self.embedding, self.mix_weights, self.gains, self.projection]

    def copy(self) -> EncoderParams:
        return EncoderParams(self.config, *(a.copy() for a in self.arrays()))

    def zeros_like(self) -> EncoderParams:
        return EncoderParams(self.config, *(np.zeros_like(a) for a in self.arrays()))

    def equals(self, other: EncoderParams) -> bool:
        return self.config == other.config and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    rng = np.random.default_rng(cfg.seed)
    d, V, L = cfg.d, cfg.vocab_size, cfg.n_mix_layers
    embedding = rng.uniform(-1.0, 1.0, size=(V, d)) * np.sqrt(3.0 / d)
    mix = np.eye(d)[None, :, :] + 0.1 * rng.standard_normal((L, d, d)) / np.sqrt(d)
    gains = np.full(L, 0.5)
    projection = rng.standard_normal((d, V)) / np.sqrt(d)
    return EncoderParams(cfg, embedding, mix, gains, projection)


def _check_tokens(params: EncoderParams, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.intp)
    cfg = params.config
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D sequence")
    if ids.size > cfg.context_window:
        raise SequenceTooLong(f"sequence of {ids.size} tokens exceeds context_window={cfg.context_window}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        raise UnknownToken(f"token id {int(ids[bad][0])} outside vocabulary of {cfg.vocab_size}")
    return ids


def _forward(params: EncoderParams, ids: np.ndarray):
    X = params.embedding[ids]
    counts = np.arange(1, len(ids) + 1, dtype=np.float64)[:, None]
    cache = []
    for W, g in zip(params.mix_weights, params.gains):
        M = np.cumsum(X, axis=0) / counts
        A = np.tanh(M @ W)
        cache.append((M, A))
        X = X + g * A
    return X, cache, counts


def encode(params: EncoderParams, tokens: Sequence[int]) -> np.ndarray:
    """Contextual representation of every token, shape (T, d)."""
    X, _, _ = _forward(params, _check_tokens(params, tokens))
    return X


def _task_head(params: EncoderParams, X: np.ndarray, ids: np.ndarray):
    logits = X[:-1] @ params.projection
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    targets = ids[1:]
    n = len(targets)
    loss = float(-logp[np.arange(n), targets].sum() / n)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def _backward(params, ids, X, cache, counts, dX) -> EncoderParams:
    grads = params.zeros_like()
    for layer in reversed(range(params.config.n_mix_layers)):
        M, A = cache[layer]
        W, g = params.mix_weights[layer], params.gains[layer]
        grads.gains[layer] = np.sum(dX * A)
        dZ = dX * g * (1.0 - A * A)
        grads.mix_weights[layer] = M.T @ dZ
        dM = (dZ @ W.T) / counts
        # adjoint of cumulative sum is reverse cumulative sum
        dX = dX + np.cumsum(dM[::-1], axis=0)[::-1]
    np.add.at(grads.embedding, ids, dX)
    return grads


def task_loss(params: EncoderParams, tokens: Sequence[int]) -> tuple[float, EncoderParams]:
    """Mean next-token cross-entropy over positions 0..T-2, with parameter gradients."""
    ids = _check_tokens(params, tokens)
    if ids.size < 2:
        raise ValueError("task loss needs at least two tokens")
    X, cache, counts = _forward(params, ids)
    loss, dlogits = _task_head(params, X, ids)
    dX = np.zeros_like(X)
    dX[:-1] = dlogits @ params.projection.T
    grads = _backward(params, ids, X, cache, counts, dX)
    grads.projection = X[:-1].T @ dlogits
    return loss, grads


def objective_grad(
    params: EncoderParams,
    tokens: Sequence[int],
    seg: Segmentation,
    calibration: CalibrationConfig | None,
) -> tuple[float, float, EncoderParams]:
    """task_loss + calibration total for one dialogue, and the joint gradient.

    Returns ``(task, calibration_total, grads)``; the calibration term is 0 and
    contributes no gradient when ``calibration`` is None.
    """
    ids = _check_tokens(params, tokens)
    X, cache, counts = _forward(params, ids)
    loss, dlogits = _task_head(params, X, ids)
    dX = np.zeros_like(X)
    dX[:-1] = dlogits @ params.projection.T
    cal_total = 0.0
    if calibration is not None:
        report, dH = simdrc_loss_grad(X, seg, calibration)
        cal_total = report.total
        dX += dH
    grads = _backward(params, ids, X, cache, counts, dX)
    grads.projection = X[:-1].T @ dlogits
    return loss, cal_total, grads


# ------------------------------------------------------------------ corpus


def make_synthetic_corpus(
    n_dialogues: int = 400,
    n_utterances_range: tuple[int, int] = (3, 6),
    utterance_len_range: tuple[int, int] = (3, 7),
    n_topics: int = 6,
    vocab_size: int = 64,
    seed: int = 0,
    noise: float = 0.1,
    follow: float = 0.5,
    transition: float = 0.7,
    with_topics: bool = False,
):
    """Dialogues whose utterances each draw tokens from one topic's id slice.

    Content ids ``N_RESERVED..vocab_size-1`` are split into ``n_topics``
    contiguous slices. Every utterance samples a topic and then draws each token
    from that slice, except that with probability ``noise`` a token is drawn
    uniformly from all content ids instead. Within a slice, a token is followed
    by its cyclic successor with probability ``follow``, so token identity (not
    just the topic) carries information about the next token. Utterance topics
    form a chain: with probability ``transition`` an utterance takes the topic
    after its predecessor's, otherwise a uniformly random one.

    With ``with_topics`` the per-utterance topic labels are returned as well.
    """
    lo_n, hi_n = n_utterances_range
    lo_l, hi_l = utterance_len_range
    if not (1 <= lo_n <= hi_n and 1 <= lo_l <= hi_l):
        raise ConfigError("ranges must satisfy 1 <= lo <= hi")
    if vocab_size <= n_topics * 10:
        raise ConfigError("vocab_size must exceed 10 * n_topics")
    rng = np.random.default_rng(seed)
    n_content = vocab_size - N_RESERVED
    edges = np.linspace(0, n_content, n_topics + 1).astype(int) + N_RESERVED
    dialogues = []
    labels = []
    for _ in range(n_dialogues):
        utts = []
        topics = []
        topic = int(rng.integers(n_topics))
        for u in range(int(rng.integers(lo_n, hi_n + 1))):
            if u and rng.random() < transition:
                topic = (topic + 1) % n_topics
            elif u:
                topic = int(rng.integers(n_topics))
            length = int(rng.integers(lo_l, hi_l + 1))
            lo, hi = int(edges[topic]), int(edges[topic + 1])
            tokens = []
            for k in range(length):
                if rng.random() < noise:
                    tokens.append(int(rng.integers(N_RESERVED, vocab_size)))
                elif k and lo <= tokens[-1] < hi and rng.random() < follow:
                    tokens.append(lo + (tokens[-1] - lo + 1) % (hi - lo))
                else:
                    tokens.append(int(rng.integers(lo, hi)))
            utts.append(tuple(tokens))
            topics.append(topic)
        dialogues.append(Dialogue(tuple(utts)))
        labels.append(topics)
    return (dialogues, labels) if with_topics else dialogues


def topic_slices(vocab_size: int, n_topics: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, vocab_size - N_RESERVED, n_topics + 1).astype(int) + N_RESERVED
    return [(int(edges[k]), int(edges[k + 1])) for k in range(n_topics)]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    calibration: CalibrationConfig | None = None
    learning_rate: float = 0.1
    steps: int = 2000
    batch_size: int = 4
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0; batch_size and eval_every must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


CURVE_FIELDS = ("step", "task_loss", "simdrc_total", "locality_distance", "isotropy_distance", "dev_loss")


@dataclass(frozen=True)
class CurveRecord:
    step: int
    task_loss: float
    simdrc_total: float
    locality_distance: float
    isotropy_distance: float | None
    dev_loss: float

    def row(self) -> tuple:
        return tuple(getattr(self, f) for f in CURVE_FIELDS)


@dataclass
class TrainCurve:
    records: list[CurveRecord] = field(default_factory=list)

    def append(self, rec: CurveRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("curve steps must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self) -> CurveRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        lines = [",".join(CURVE_FIELDS)]
        for rec in self.records:
            lines.append(",".join(_csv_value(v) for v in rec.row()))
        return "\n".join(lines) + "\n"


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# the calibration loss is always *reported* with this config for baseline runs
REPORT_CALIBRATION = CalibrationConfig(delta=0.5, alpha=0.3)
TRAIN_PROBE = 64


def split_corpus(corpus: Sequence[Dialogue]) -> tuple[list[Dialogue], list[Dialogue]]:
    """Fixed split: the last 10% (at least one dialogue) is held out."""
    n_dev = max(1, len(corpus) // 10)
    if len(corpus) < 2:
        return list(corpus), list(corpus)
    return list(corpus[:-n_dev]), list(corpus[-n_dev:])


def _flatten_all(corpus, params):
    out = []
    for d in corpus:
        tokens, seg = flatten_dialogue(d)
        _check_tokens(params, tokens)
        out.append((tokens, seg))
    return out


@dataclass(frozen=True)
class EvalSummary:
    task_loss: float
    simdrc_total: float
    locality_distance: float
    isotropy_distance: float | None
    block_contrast: float | None


def _dialogue_task_loss(params: EncoderParams, tokens: Sequence[int]) -> float:
    ids = np.asarray(tokens, dtype=np.intp)
    X, _, _ = _forward(params, ids)
    return _task_head(params, X, ids)[0]


def evaluate(params: EncoderParams, flat: Sequence[tuple[list[int], Segmentation]], calibration: CalibrationConfig) -> EvalSummary:
    losses, totals, locs, isos, blocks = [], [], [], [], []
    for tokens, seg in flat:
        ids = np.asarray(tokens, dtype=np.intp)
        X, _, _ = _forward(params, ids)
        losses.append(_task_head(params, X, ids)[0])
        totals.append(simdrc_loss(X, seg, calibration).total)
        rep = metric_report(X, seg)
        locs.append(rep.locality_distance)
        isos.append(rep.isotropy_distance)
        blocks.append(block_contrast(similarity_matrix(X), seg) if seg.n_utterances > 1 else None)
    return EvalSummary(
        task_loss=corpus_mean(losses),
        simdrc_total=corpus_mean(totals),
        locality_distance=corpus_mean(locs),
        isotropy_distance=corpus_mean(isos),
        block_contrast=corpus_mean(blocks),
    )


def train(
    corpus: Sequence[Dialogue], enc_cfg: EncoderConfig, train_cfg: TrainConfig
) -> tuple[EncoderParams, TrainCurve]:
    """Plain SGD on task loss (+ calibration loss when configured).

    The curve is recorded at step 0, every ``eval_every`` steps and at the
    final step. ``task_loss`` is measured on a fixed probe of the first
    training dialogues; everything else on the held-out split.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    params = init_encoder(enc_cfg)
    train_set, dev_set = split_corpus(corpus)
    train_flat = _flatten_all(train_set, params)
    dev_flat = _flatten_all(dev_set, params)
    probe = train_flat[:TRAIN_PROBE]
    report_cal = train_cfg.calibration or REPORT_CALIBRATION
    rng = np.random.default_rng(train_cfg.seed)
    curve = TrainCurve()

    def record(step: int) -> None:
        dev = evaluate(params, dev_flat, report_cal)
        probe_loss = corpus_mean([_dialogue_task_loss(params, tokens) for tokens, _ in probe])
        rec = CurveRecord(
            step=step,
            task_loss=probe_loss,
            simdrc_total=dev.simdrc_total,
            locality_distance=dev.locality_distance,
            isotropy_distance=dev.isotropy_distance,
            dev_loss=dev.task_loss,
        )
        if not all(np.isfinite(v) for v in rec.row() if v is not None):
            raise NonFiniteLoss(step, "non-finite evaluation metric")
        curve.append(rec)
        log.debug("step %d: %s", step, rec)

    record(0)
    with np.errstate(over="ignore", invalid="ignore"):
        _sgd(params, train_flat, train_cfg, rng, record)
    return params, curve


def _sgd(params, train_flat, train_cfg: TrainConfig, rng, record) -> None:
    lr = train_cfg.learning_rate
    for step in range(1, train_cfg.steps + 1):
        batch = rng.integers(0, len(train_flat), size=train_cfg.batch_size)
        acc = params.zeros_like()
        total = 0.0
        for b in batch:
            tokens, seg = train_flat[int(b)]
            task, cal, grads = objective_grad(params, tokens, seg, train_cfg.calibration)
            total += task + cal
            for a, g in zip(acc.arrays(), grads.arrays()):
                a += g
        if not np.isfinite(total):
            raise NonFiniteLoss(step)
        scale = lr / len(batch)
        for p, g in zip(params.arrays(), acc.arrays()):
            p -= scale * g
        if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
            record(step)


# -------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"ENC1"


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Binary checkpoint: magic, config block, then float64 arrays in declaration order."""
    cfg = params.config
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<QQQQQ", cfg.vocab_size, cfg.d, cfg.n_mix_layers, cfg.context_window, cfg.seed))
    for arr in params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ParseError(f"{path}: not an encoder checkpoint (bad magic)")
    header = struct.calcsize("<QQQQQ")
    if len(data) < 4 + header:
        raise ParseError(f"{path}: truncated config block")
    V, d, L, window, seed = struct.unpack_from("<QQQQQ", data, 4)
    cfg = EncoderConfig(vocab_size=V, d=d, n_mix_layers=L, context_window=window, seed=seed)
    shapes = [(V, d), (L, d, d), (L,), (d, V)]
    pos = 4 + header
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if pos + 8 * n > len(data):
            raise ParseError(f"{path}: truncated parameter arrays")
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes")
    return EncoderParams(cfg, *arrays)
