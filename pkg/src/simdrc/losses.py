"""Hinge-style calibration losses on cosine geometry, with analytic gradients.

Every loss here is a mean of ``max(0, arg)`` hinge terms where ``arg`` is an
affine function of one cosine. For ``c = cos(x, y)``::

    dc/dx = y / (|x| |y|) - c * x / |x|^2

A hinge whose argument is <= 0 contributes neither value nor gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dialogue import Segmentation
from .errors import MarginOutOfRange, NoContentTokens, ShapeMismatch
from .geometry import as_embedding, rep_cosines


@dataclass(frozen=True)
class CalibrationConfig:
    delta: float = 0.5
    alpha: float = 0.3

    def __post_init__(self):
        if not -1.0 <= self.delta <= 1.0:
            raise MarginOutOfRange(f"delta={self.delta} outside [-1, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise MarginOutOfRange(f"alpha={self.alpha} outside [0, 1]")

    @property
    def locality_margin(self) -> float | None:
        # None switches the locality hinge off (delta <= 0)
        return self.delta if self.delta > 0 else None


@dataclass(frozen=True)
class LossReport:
    locality_loss: float
    isotropy_loss: float
    total: float
    active_locality_terms: int
    active_isotropy_terms: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TermBreakdown:
    """Hinge terms of one loss family.

    ``rows[k]`` holds the two embedding rows whose cosine enters term ``k``;
    ``args[k]`` is the hinge argument, so the term's value is ``max(0, args[k])``.
    """

    rows: np.ndarray
    args: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.maximum(self.args, 0.0)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.args > 0))

    @staticmethod
    def empty() -> TermBreakdown:
        return TermBreakdown(np.zeros((0, 2), dtype=np.intp), np.zeros(0))


def _check_margin(value: float, lo: float, hi: float, name: str) -> None:
    if not lo <= value <= hi:
        raise MarginOutOfRange(f"{name}={value} outside [{lo}, {hi}]")


def _unit(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(H, axis=1)
    return H / norms[:, None], norms


def _mean(values: np.ndarray) -> float:
    return float(values.sum() / values.size) if values.size else 0.0


def _locality_terms(U: np.ndarray, seg: Segmentation, delta1: float):
    pairs = np.asarray(seg.content_pairs(), dtype=np.intp).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise NoContentTokens("no non-representative token in any utterance")
    cos = np.clip(np.einsum("ij,ij->i", U[pairs[:, 0]], U[pairs[:, 1]]), -1.0, 1.0)
    return pairs, cos, TermBreakdown(pairs, delta1 - cos)


def _isotropy_terms(U: np.ndarray, seg: Segmentation, delta2: float):
    n = seg.n_utterances
    C = rep_cosines(U, seg)
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    reps = np.asarray(seg.rep_indices, dtype=np.intp)
    rows = np.stack([reps[ii], reps[jj]], axis=1) if n > 1 else np.zeros((0, 2), dtype=np.intp)
    return C, TermBreakdown(rows, delta2 + C[ii, jj])


def locality_loss(H, seg: Segmentation, delta1: float) -> tuple[float, TermBreakdown]:
    """Mean of ``max(0, delta1 - cos(token, rep))`` over non-representative tokens."""
    _check_margin(delta1, 0.0, 1.0, "delta1")
    U, _ = _unit(as_embedding(H, seg))
    _, _, terms = _locality_terms(U, seg, delta1)
    return _mean(terms.values), terms


def isotropy_loss(H, seg: Segmentation, delta2: float) -> tuple[float, TermBreakdown]:
    """Mean of ``max(0, delta2 + cos(rep_i, rep_j))`` over ordered pairs i != j.

    A single-utterance dialogue has no pairs and yields 0.
    """
    _check_margin(delta2, -1.0, 1.0, "delta2")
    U, _ = _unit(as_embedding(H, seg))
    if seg.n_utterances < 2:
        return 0.0, TermBreakdown.empty()
    _, terms = _isotropy_terms(U, seg, delta2)
    return _mean(terms.values), terms


def _combine(cfg: CalibrationConfig, loc: float, iso: float) -> float:
    return cfg.alpha * loc + (1.0 - cfg.alpha) * iso


def simdrc_terms(H, seg: Segmentation, cfg: CalibrationConfig) -> tuple[TermBreakdown, TermBreakdown]:
    """Locality and isotropy hinge terms under the shared margin of ``cfg``."""
    U, _ = _unit(as_embedding(H, seg))
    margin = cfg.locality_margin
    loc = _locality_terms(U, seg, margin)[2] if margin is not None else TermBreakdown.empty()
    iso = _isotropy_terms(U, seg, cfg.delta)[1] if seg.n_utterances > 1 else TermBreakdown.empty()
    return loc, iso


def simdrc_loss(H, seg: Segmentation, cfg: CalibrationConfig) -> LossReport:
    return simdrc_loss_grad(H, seg, cfg, with_grad=False)[0]


def simdrc_loss_grad(
    H, seg: Segmentation, cfg: CalibrationConfig, with_grad: bool = True
) -> tuple[LossReport, np.ndarray | None]:
    """Combined calibration loss and its gradient w.r.t. every row of ``H``.

    ``total = alpha * locality + (1 - alpha) * isotropy`` with one shared margin.
    The locality hinge is switched off for ``delta <= 0``; see
    ``CalibrationConfig.locality_margin``.
    """
    H = as_embedding(H, seg)
    U, norms = _unit(H)
    G = np.zeros_like(H) if with_grad else None

    loc_value, n_loc = 0.0, 0
    margin = cfg.locality_margin
    if margin is not None:
        pairs, cos, terms = _locality_terms(U, seg, margin)
        loc_value, n_loc = _mean(terms.values), terms.n_active
        if with_grad and n_loc and cfg.alpha > 0:
            act = terms.args > 0
            a, b = pairs[act, 0], pairs[act, 1]
            c = cos[act][:, None]
            # d/dcos of alpha * mean(delta - cos) is -alpha / n_terms
            w = -cfg.alpha / len(pairs)
            np.add.at(G, a, w * (U[b] - c * U[a]) / norms[a, None])
            np.add.at(G, b, w * (U[a] - c * U[b]) / norms[b, None])

    iso_value, n_iso = 0.0, 0
    n = seg.n_utterances
    if n > 1:
        C, terms = _isotropy_terms(U, seg, cfg.delta)
        iso_value, n_iso = _mean(terms.values), terms.n_active
        if with_grad and n_iso and cfg.alpha < 1:
            W = ((cfg.delta + C) > 0).astype(np.float64)
            np.fill_diagonal(W, 0.0)
            # each unordered pair appears twice among the ordered terms
            W *= 2.0 * (1.0 - cfg.alpha) / (n * (n - 1))
            reps = np.asarray(seg.rep_indices, dtype=np.intp)
            R = U[reps]
            G[reps] += (W @ R - (W * C).sum(axis=1)[:, None] * R) / norms[reps, None]

    report = LossReport(
        locality_loss=loc_value,
        isotropy_loss=iso_value,
        total=_combine(cfg, loc_value, iso_value),
        active_locality_terms=n_loc,
        active_isotropy_terms=n_iso,
    )
    return report, G


def batch_simdrc_loss_grad(
    batch: Sequence[tuple[np.ndarray, Segmentation]], cfg: CalibrationConfig
) -> tuple[float, list[np.ndarray]]:
    """Equal-weight mean of per-dialogue totals, with per-dialogue gradients."""
    totals = []
    grads = []
    for H, seg in batch:
        rep, g = simdrc_loss_grad(H, seg, cfg)
        totals.append(rep.total)
        grads.append(g / len(batch))
    return float(sum(totals) / len(totals)), grads


def token_repulsion_baseline(H, rho: float) -> tuple[float, np.ndarray]:
    """Generic pairwise token repulsion: mean over a != b of ``max(0, rho - 1 + cos_ab)``.

    Baseline for comparison only; it pushes every token away from every other
    token regardless of utterance structure.
    """
    _check_margin(rho, 0.0, 1.0, "rho")
    H = as_embedding(H)
    T = H.shape[0]
    if T < 2:
        raise ShapeMismatch("token repulsion needs at least two rows")
    U, norms = _unit(H)
    C = np.clip(U @ U.T, -1.0, 1.0)
    C = np.triu(C, 1) + np.triu(C, 1).T
    off = ~np.eye(T, dtype=bool)
    args = rho - 1.0 + C
    loss = float(np.maximum(args[off], 0.0).sum() / (T * (T - 1)))
    W = ((args > 0) & off).astype(np.float64) * (2.0 / (T * (T - 1)))
    G = (W @ U - (W * C).sum(axis=1)[:, None] * U) / norms[:, None]
    return loss, G
