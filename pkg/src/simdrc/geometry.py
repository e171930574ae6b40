"""Locality / isotropy geometry of token representations.

All functions take ``H`` as a ``(T, d)`` float array whose row ``t`` is the
representation of flattened token ``t``, paired with the ``Segmentation``
that produced the flattened sequence.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dialogue import Segmentation
from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NoContentTokens,
    ParseError,
    RepresentativeTokenQueried,
    SameUtterance,
    ShapeMismatch,
    SingleUtterance,
    Undefined,
    ZeroNorm,
)

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class MetricReport:
    locality_distance: float
    isotropy_distance: float | None  # None for single-utterance dialogues
    coherence: float
    per_utterance_locality: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def as_embedding(H, seg: Segmentation | None = None) -> np.ndarray:
    """Validate and return ``H`` as a float64 (T, d) array with non-zero rows."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] < 1:
        raise ShapeMismatch(f"embedding matrix must be 2-D and non-empty, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        bad = int(np.argwhere(~np.isfinite(H))[0][0])
        raise ZeroNorm("row contains non-finite values", row=bad)
    norms = np.linalg.norm(H, axis=1)
    small = np.flatnonzero(norms < _TINY)
    if small.size:
        raise ZeroNorm(row=int(small[0]))
    if seg is not None and seg.total_len != H.shape[0]:
        raise ShapeMismatch(
            f"embedding has {H.shape[0]} rows but segmentation expects T={seg.total_len}"
        )
    return H


def unit_rows(H: np.ndarray) -> np.ndarray:
    return H / np.linalg.norm(H, axis=1, keepdims=True)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatch(f"cannot compare vectors of shapes {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _TINY or nv < _TINY:
        raise ZeroNorm()
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _rep(seg: Segmentation, i: int) -> int:
    if not 0 <= i < seg.n_utterances:
        raise IndexOutOfRange(f"utterance index {i} outside [0, {seg.n_utterances})")
    return seg.rep_indices[i]


def locality_value(H, seg: Segmentation, i: int, j: int) -> float:
    """Cosine between token ``j`` of utterance ``i`` and that utterance's [EOU] row."""
    H = as_embedding(H, seg)
    rep = _rep(seg, i)
    start, end = seg.spans[i]
    if not 0 <= j < end - start:
        raise IndexOutOfRange(f"token index {j} outside utterance {i} of length {end - start}")
    if start + j == rep:
        raise RepresentativeTokenQueried(f"position {j} is the representative token of utterance {i}")
    return cosine(H[start + j], H[rep])


def _locality_cosines(U: np.ndarray, seg: Segmentation) -> tuple[np.ndarray, np.ndarray]:
    pairs = seg.content_pairs()
    if not pairs:
        raise NoContentTokens("no non-representative token in any utterance")
    idx = np.asarray(pairs, dtype=np.intp)
    cos = np.clip(np.einsum("ij,ij->i", U[idx[:, 0]], U[idx[:, 1]]), -1.0, 1.0)
    return idx, cos


def locality_distance(H, seg: Segmentation) -> float:
    """Mean token-to-representative cosine over all non-representative tokens."""
    U = unit_rows(as_embedding(H, seg))
    _, cos = _locality_cosines(U, seg)
    return float(cos.sum() / cos.size)


def isotropy_value(H, seg: Segmentation, i: int, j: int) -> float:
    if i == j:
        raise SameUtterance(f"isotropy needs two distinct utterances, got {i} twice")
    H = as_embedding(H, seg)
    return cosine(H[_rep(seg, i)], H[_rep(seg, j)])


def rep_cosines(U: np.ndarray, seg: Segmentation) -> np.ndarray:
    """N x N clipped cosine matrix between representative rows."""
    R = U[list(seg.rep_indices)]
    C = np.clip(R @ R.T, -1.0, 1.0)
    # symmetric by construction
    return np.triu(C) + np.triu(C, 1).T


def isotropy_distance(H, seg: Segmentation) -> float:
    """Mean cosine over ordered pairs of distinct representative rows."""
    n = seg.n_utterances
    if n < 2:
        raise SingleUtterance("isotropy distance needs at least two utterances")
    U = unit_rows(as_embedding(H, seg))
    C = rep_cosines(U, seg)
    off = C[~np.eye(n, dtype=bool)]
    return float(off.sum() / (n * (n - 1)))


def coherence_score(H, seg: Segmentation) -> float:
    """Mean cosine between each utterance's [EOU] row and the [CONTEXT] row."""
    U = unit_rows(as_embedding(H, seg))
    if not 0 <= seg.context_index < U.shape[0]:
        raise IndexOutOfRange(f"context index {seg.context_index} outside the matrix")
    if seg.n_utterances < 1:
        raise NoContentTokens("dialogue has no utterances")
    cos = np.clip(U[list(seg.rep_indices)] @ U[seg.context_index], -1.0, 1.0)
    return float(cos.sum() / cos.size)


def metric_report(H, seg: Segmentation) -> MetricReport:
    U = unit_rows(as_embedding(H, seg))
    idx, cos = _locality_cosines(U, seg)
    per_utt = []
    for rep in seg.rep_indices:
        mine = cos[idx[:, 1] == rep]
        per_utt.append(float(mine.sum() / mine.size) if mine.size else float("nan"))
    return MetricReport(
        locality_distance=float(cos.sum() / cos.size),
        isotropy_distance=isotropy_distance(H, seg) if seg.n_utterances >= 2 else None,
        coherence=coherence_score(H, seg),
        per_utterance_locality=per_utt,
    )


def similarity_matrix(H) -> np.ndarray:
    U = unit_rows(as_embedding(H))
    S = np.clip(U @ U.T, -1.0, 1.0)
    S = np.triu(S, 1) + np.triu(S, 1).T
    np.fill_diagonal(S, 1.0)
    return S


def block_contrast(S, seg: Segmentation) -> float:
    """Within-utterance minus cross-utterance mean similarity.

    Only positions inside utterance spans take part; the [CONTEXT] row is
    ignored. Positive values indicate block-diagonal structure.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (seg.total_len, seg.total_len):
        raise ShapeMismatch(f"similarity matrix shape {S.shape} does not match T={seg.total_len}")
    if seg.n_utterances < 2:
        raise Undefined("block contrast needs at least two utterances")
    owner = np.asarray(seg.utterance_of())
    inside = owner >= 0
    same = (owner[:, None] == owner[None, :]) & inside[:, None] & inside[None, :]
    within = same & ~np.eye(len(owner), dtype=bool)
    cross = (owner[:, None] != owner[None, :]) & inside[:, None] & inside[None, :]
    if not within.any():
        raise Undefined("no within-utterance token pair")
    return float(S[within].mean() - S[cross].mean())


def mask_special(S: np.ndarray, seg: Segmentation) -> np.ndarray:
    """Zero the rows and columns of [EOU] and [CONTEXT] positions."""
    S = np.array(S, dtype=np.float64)
    special = seg.special_positions()
    S[special, :] = 0.0
    S[:, special] = 0.0
    return S


def corpus_mean(values: Sequence[float | None]) -> float | None:
    """Unweighted mean over dialogues, skipping undefined (None) entries."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


# ---------------------------------------------------------------- file formats

EMB_MAGIC = b"EMB1"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_embeddings(path: str | Path, matrices: Sequence[np.ndarray], binary: bool = False) -> None:
    """Write one or more matrices back to back, text or ``EMB1`` binary."""
    if binary:
        buf = io.BytesIO()
        for H in matrices:
            H = np.ascontiguousarray(H, dtype="<f8")
            buf.write(EMB_MAGIC)
            buf.write(struct.pack("<QQ", *H.shape))
            buf.write(H.tobytes())
        Path(path).write_bytes(buf.getvalue())
        return
    lines = []
    for H in matrices:
        lines.append(f"{H.shape[0]} {H.shape[1]}")
        lines.extend(" ".join(_fmt(x) for x in row) for row in H)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path: str | Path) -> list[np.ndarray]:
    """Read every matrix in an embedding file (format sniffed from the magic)."""
    data = Path(path).read_bytes()
    if data.startswith(EMB_MAGIC):
        return _read_binary(data)
    return _read_text(data.decode("utf-8"))


def _read_binary(data: bytes) -> list[np.ndarray]:
    out = []
    pos = 0
    while pos < len(data):
        if data[pos:pos + 4] != EMB_MAGIC:
            raise ParseError(f"bad magic at byte {pos}")
        if pos + 20 > len(data):
            raise ParseError(f"truncated header at byte {pos}")
        T, d = struct.unpack_from("<QQ", data, pos + 4)
        pos += 20
        nbytes = 8 * T * d
        if pos + nbytes > len(data):
            raise ParseError(f"truncated matrix body: need {nbytes} bytes at byte {pos}")
        out.append(np.frombuffer(data, dtype="<f8", count=T * d, offset=pos).reshape(T, d).astype(np.float64))
        pos += nbytes
    return out


def _read_text(text: str) -> list[np.ndarray]:
    lines = [(n, ln) for n, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    out = []
    k = 0
    while k < len(lines):
        lineno, header = lines[k]
        parts = header.split()
        try:
            T, d = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"expected header 'T d', got {header!r}", lineno) from None
        if T < 1 or d < 1:
            raise ParseError(f"non-positive dimensions {T}x{d}", lineno)
        rows = lines[k + 1:k + 1 + T]
        if len(rows) < T:
            raise ParseError(f"expected {T} rows after header", lineno)
        M = np.empty((T, d))
        for r, (rl, row) in enumerate(rows):
            vals = row.split()
            if len(vals) != d:
                raise ParseError(f"expected {d} values, got {len(vals)}", rl)
            try:
                M[r] = [float(v) for v in vals]
            except ValueError:
                raise ParseError("non-numeric value", rl) from None
        out.append(M)
        k += 1 + T
    return out


def similarity_csv(S: np.ndarray) -> str:
    return "".join(",".join(_fmt(x) for x in row) + "\n" for row in S)


def similarity_pgm(S: np.ndarray) -> str:
    """Plain (P2) grayscale image, gray level round((s + 1) / 2 * 255)."""
    T = S.shape[0]
    levels = np.clip(np.round((np.asarray(S) + 1.0) / 2.0 * 255.0), 0, 255).astype(int)
    body = "".join(" ".join(str(v) for v in row) + "\n" for row in levels)
    return f"P2\n{T} {T}\n255\n" + body
