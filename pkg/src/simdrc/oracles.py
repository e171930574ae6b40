"""Deliberately naive reference implementations used to certify the fast paths.

Nothing in this module imports from ``geometry`` or ``losses``: metrics are
recomputed with explicit Python loops over indices, and gradients are probed
by central finite differences. Keep it that way, otherwise the oracles stop
being independent of the code they check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dialogue import Segmentation
from .errors import NoContentTokens, NonFiniteProbe, ShapeMismatch, SingleUtterance, Undefined


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    worst_coordinate: tuple[int, int]
    n_skipped_boundary_terms: int
    n_terms: int = 0
    n_trials: int = 1
    n_coordinates: int = 0
    n_skipped_coordinates: int = 0

    @property
    def skipped_fraction(self) -> float:
        return self.n_skipped_boundary_terms / self.n_terms if self.n_terms else 0.0

    def passed(self, rel_tol: float = 1e-5, max_skipped_fraction: float = 0.05) -> bool:
        return self.max_rel_error < rel_tol and self.skipped_fraction <= max_skipped_fraction

    def to_dict(self) -> dict:
        out = asdict(self)
        out["worst_coordinate"] = list(self.worst_coordinate)
        out["skipped_fraction"] = self.skipped_fraction
        return out


@dataclass(frozen=True)
class BruteMetrics:
    locality_distance: float
    isotropy_distance: float | None
    coherence: float
    per_utterance_locality: list[float] = field(default_factory=list)


def _dot(u, v) -> float:
    s = 0.0
    for k in range(len(u)):
        s += float(u[k]) * float(v[k])
    return s


def _cos(u, v) -> float:
    nu = math.sqrt(_dot(u, u))
    nv = math.sqrt(_dot(v, v))
    c = _dot(u, v) / (nu * nv)
    return max(-1.0, min(1.0, c))


def brute_force_metrics(H, seg: Segmentation) -> BruteMetrics:
    """Locality/isotropy distances and coherence by explicit loops over indices."""
    rows = [list(map(float, r)) for r in np.asarray(H)]
    loc_sum = 0.0
    loc_count = 0
    per_utt = []
    for i in range(len(seg.spans)):
        start, end = seg.spans[i]
        rep = end - 1
        u_sum = 0.0
        u_count = 0
        for t in range(start, end):
            if t == rep:
                continue
            c = _cos(rows[t], rows[rep])
            u_sum += c
            u_count += 1
        loc_sum += u_sum
        loc_count += u_count
        per_utt.append(u_sum / u_count if u_count else float("nan"))
    if loc_count == 0:
        raise NoContentTokens("no non-representative token")

    n = len(seg.spans)
    iso = None
    if n >= 2:
        s = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    s += _cos(rows[seg.spans[i][1] - 1], rows[seg.spans[j][1] - 1])
        iso = s / (n * (n - 1))

    ctx = rows[seg.total_len - 1]
    coh = 0.0
    for i in range(n):
        coh += _cos(rows[seg.spans[i][1] - 1], ctx)
    return BruteMetrics(loc_sum / loc_count, iso, coh / n, per_utt)


def brute_force_isotropy(H, seg: Segmentation) -> float:
    out = brute_force_metrics(H, seg).isotropy_distance
    if out is None:
        raise SingleUtterance("isotropy distance needs at least two utterances")
    return out


def brute_force_similarity(H) -> list[list[float]]:
    rows = [list(map(float, r)) for r in np.asarray(H)]
    T = len(rows)
    return [[1.0 if a == b else _cos(rows[a], rows[b]) for b in range(T)] for a in range(T)]


def brute_force_block_contrast(S, seg: Segmentation) -> float:
    owner = {}
    for i, (start, end) in enumerate(seg.spans):
        for t in range(start, end):
            owner[t] = i
    w_sum = w_n = x_sum = x_n = 0.0
    for a in owner:
        for b in owner:
            if a == b:
                continue
            if owner[a] == owner[b]:
                w_sum += float(S[a][b])
                w_n += 1
            else:
                x_sum += float(S[a][b])
                x_n += 1
    if w_n == 0 or x_n == 0:
        raise Undefined("block contrast undefined for this segmentation")
    return w_sum / w_n - x_sum / x_n


def brute_force_hinge_terms(H, seg: Segmentation, delta: float) -> list[tuple[float, tuple[int, int], str]]:
    """Every hinge term of the shared-margin combined loss as (arg, rows, family).

    The locality family is present only for ``delta > 0``.
    """
    rows = [list(map(float, r)) for r in np.asarray(H)]
    terms = []
    if delta > 0:
        for start, end in seg.spans:
            rep = end - 1
            for t in range(start, rep):
                terms.append((delta - _cos(rows[t], rows[rep]), (t, rep), "locality"))
    reps = [end - 1 for _, end in seg.spans]
    for i in reps:
        for j in reps:
            if i != j:
                terms.append((delta + _cos(rows[i], rows[j]), (i, j), "isotropy"))
    return terms


def brute_force_simdrc(H, seg: Segmentation, delta: float, alpha: float) -> tuple[float, float, float]:
    """(locality, isotropy, total) of the combined loss by term-by-term loops."""
    loc = []
    iso = []
    for arg, _, family in brute_force_hinge_terms(H, seg, delta):
        (loc if family == "locality" else iso).append(max(0.0, arg))
    lval = sum(loc) / len(loc) if loc else 0.0
    ival = sum(iso) / len(iso) if iso else 0.0
    return lval, ival, alpha * lval + (1.0 - alpha) * ival


def brute_force_repulsion(H, rho: float) -> float:
    rows = [list(map(float, r)) for r in np.asarray(H)]
    T = len(rows)
    s = 0.0
    for a in range(T):
        for b in range(T):
            if a != b:
                s += max(0.0, rho - 1.0 + _cos(rows[a], rows[b]))
    return s / (T * (T - 1))


def finite_diff_grad(f: Callable[[np.ndarray], float], H, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``H``, one coordinate at a time."""
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-8, 1e-4]")
    H = np.array(H, dtype=np.float64)
    G = np.zeros_like(H)
    for t in range(H.shape[0]):
        for k in range(H.shape[1]):
            orig = H[t, k]
            H[t, k] = orig + eps
            fp = f(H.copy())
            H[t, k] = orig - eps
            fm = f(H.copy())
            H[t, k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteProbe((t, k))
            G[t, k] = (fp - fm) / (2.0 * eps)
    return G


def compare_gradients(
    analytic,
    numeric,
    hinge_args: Sequence[tuple[float, Sequence[int]]] = (),
    boundary_tol: float = 1e-4,
) -> GradCheckReport:
    """Coordinate-wise comparison of two gradient matrices.

    ``hinge_args`` lists ``(argument, rows)`` for each hinge term. Rows touched
    by a term with ``|argument| < boundary_tol`` are excluded: the finite
    difference straddles the kink there and matches no particular subgradient.
    Relative error uses the denominator ``max(|a|, |n|, 1e-12)``.
    """
    A = np.asarray(analytic, dtype=np.float64)
    N = np.asarray(numeric, dtype=np.float64)
    if A.shape != N.shape:
        raise ShapeMismatch(f"analytic {A.shape} vs numeric {N.shape}")
    skip_rows = set()
    n_skipped = 0
    for arg, rows in hinge_args:
        if abs(arg) < boundary_tol:
            n_skipped += 1
            skip_rows.update(int(r) for r in rows)

    max_abs = 0.0
    max_rel = 0.0
    worst = (0, 0)
    skipped_coords = 0
    for t in range(A.shape[0]):
        if t in skip_rows:
            skipped_coords += A.shape[1]
            continue
        for k in range(A.shape[1]):
            a, n = A[t, k], N[t, k]
            err = abs(a - n)
            rel = err / max(abs(a), abs(n), 1e-12)
            max_abs = max(max_abs, err)
            if rel > max_rel:
                max_rel, worst = rel, (t, k)
    return GradCheckReport(
        max_abs_error=float(max_abs),
        max_rel_error=float(max_rel),
        worst_coordinate=worst,
        n_skipped_boundary_terms=n_skipped,
        n_terms=len(hinge_args),
        n_coordinates=A.size,
        n_skipped_coordinates=skipped_coords,
    )


def merge_reports(reports: Sequence[GradCheckReport]) -> GradCheckReport:
    if not reports:
        return GradCheckReport(0.0, 0.0, (0, 0), 0, n_terms=0, n_trials=0)
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(
        max_abs_error=max(r.max_abs_error for r in reports),
        max_rel_error=worst.max_rel_error,
        worst_coordinate=worst.worst_coordinate,
        n_skipped_boundary_terms=sum(r.n_skipped_boundary_terms for r in reports),
        n_terms=sum(r.n_terms for r in reports),
        n_trials=sum(r.n_trials for r in reports),
        n_coordinates=sum(r.n_coordinates for r in reports),
        n_skipped_coordinates=sum(r.n_skipped_coordinates for r in reports),
    )
