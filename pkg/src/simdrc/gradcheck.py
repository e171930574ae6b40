"""End-to-end gradient verification of the combined calibration loss."""

from __future__ import annotations

import numpy as np

from .dialogue import Segmentation, segmentation_from_lengths
from .losses import CalibrationConfig, simdrc_loss, simdrc_loss_grad
from .oracles import (
    GradCheckReport,
    brute_force_hinge_terms,
    compare_gradients,
    finite_diff_grad,
    merge_reports,
)

DELTAS = (-0.5, 0.0, 0.3, 0.5, 0.7)
ALPHAS = (0.0, 0.3, 0.5, 1.0)


def random_instance(
    rng: np.random.Generator, t_max: int = 20, d_max: int = 16
) -> tuple[np.ndarray, Segmentation, CalibrationConfig]:
    """Random (H, segmentation, config) with T <= t_max and 2 <= d <= d_max."""
    if t_max < 3:
        raise ValueError("t_max must be at least 3 (one utterance of two tokens plus [CONTEXT])")
    lengths = []
    budget = t_max - 1
    while budget >= 2:
        n = int(rng.integers(2, min(budget, 6) + 1))
        lengths.append(n)
        budget -= n
        if lengths and rng.random() < 0.25:
            break
    seg = segmentation_from_lengths(lengths)
    d = int(rng.integers(2, max(d_max, 2) + 1))
    H = rng.standard_normal((seg.total_len, d))
    cfg = CalibrationConfig(
        delta=float(rng.choice(DELTAS)), alpha=float(rng.choice(ALPHAS))
    )
    return H, seg, cfg


def check_instance(
    H: np.ndarray,
    seg: Segmentation,
    cfg: CalibrationConfig,
    eps: float = 1e-6,
    boundary_tol: float = 1e-4,
    inject_fault: bool = False,
) -> GradCheckReport:
    _, grad = simdrc_loss_grad(H, seg, cfg)
    if inject_fault:
        # test-only: flip the sign of the largest analytic entry
        t, k = np.unravel_index(np.argmax(np.abs(grad)), grad.shape)
        grad = grad.copy()
        grad[t, k] = -grad[t, k]
    numeric = finite_diff_grad(lambda X: simdrc_loss(X, seg, cfg).total, H, eps)
    terms = [(arg, rows) for arg, rows, _ in brute_force_hinge_terms(H, seg, cfg.delta)]
    return compare_gradients(grad, numeric, terms, boundary_tol)


def run_grad_check(
    trials: int = 100,
    t_max: int = 20,
    d_max: int = 16,
    seed: int = 0,
    eps: float = 1e-6,
    boundary_tol: float = 1e-4,
    inject_fault: bool = False,
) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        H, seg, cfg = random_instance(rng, t_max, d_max)
        reports.append(check_instance(H, seg, cfg, eps, boundary_tol, inject_fault))
    return merge_reports(reports)
