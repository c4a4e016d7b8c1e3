"""Redundant-term detection through Gram-matrix interference analysis.

A fitted candidate's terms (the support K) sit inside a larger dictionary S
that also holds external bases the candidate did not use. Projection
coefficients T_ij = G_ji / G_ii measure how much of basis j leaks into the
least-squares coefficient of basis i. Two detection modes:

* ratio (default): a support coefficient whose share of total coefficient
  mass tau_i = |b_i| / (sum_j |b_j| + eps) falls at or below rho is flagged.
* theorem (opt-in, needs user-supplied magnitude bounds A <= |a| <= B and a
  support-size cap M): a coefficient is flagged only when its magnitude is
  provably below what any true term could produce under worst-case
  interference from the rest of the dictionary.

Flags translate into per-token penalties p * max(0, -ln(|b_i| + eps)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_DIAG_CUTOFF = 1e-14


@dataclass(frozen=True)
class ExclusionConfig:
    rho: float = 1e-2
    penalty_scale: float = 0.5
    epsilon: float = 1e-50
    # theorem-mode magnitude bounds; required there, ignored in ratio mode
    a_min: float | None = None
    b_max: float | None = None
    max_support: int | None = None


@dataclass(frozen=True)
class GramAnalysis:
    """Gram and projection matrices over the full dictionary.

    The first ``n_support`` dictionary indices are the candidate's own terms;
    the rest are external bases. ``degenerate`` marks indices whose basis
    evaluated non-finite or whose Gram diagonal fell below the cutoff; they
    are excluded from interference sums and never flagged.
    """

    gram: np.ndarray
    projection: np.ndarray
    degenerate: np.ndarray
    n_support: int

    @property
    def n_external(self) -> int:
        return self.gram.shape[0] - self.n_support


def _as_columns(phis, X: np.ndarray | None) -> np.ndarray:
    columns = []
    for phi in phis:
        if callable(phi):
            if X is None:
                raise ValueError("callable bases need an input matrix")
            columns.append(np.asarray(phi(X), dtype=float).ravel())
        else:
            columns.append(np.asarray(phi, dtype=float).ravel())
    if not columns:
        raise ValueError("empty dictionary")
    n = columns[0].shape[0]
    if any(c.shape[0] != n for c in columns):
        raise ValueError("basis evaluations disagree on row count")
    return np.column_stack(columns)


def gram_matrix(phis, X: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(1/N) Phi^T Phi over the dictionary, plus the degenerate-index mask.

    ``phis`` may be pre-evaluated column vectors or callables applied to X.
    Rows of G touching a degenerate index are zeroed so they cannot poison
    downstream sums; the mask says which.
    """
    phi = _as_columns(phis, X)
    n = phi.shape[0]
    finite = np.all(np.isfinite(phi), axis=0)
    safe = np.where(finite[None, :], phi, 0.0)
    # finite but astronomically large columns can overflow the product;
    # such moments carry no usable interference information, so the indices
    # they touch join the degenerate set (which is never flagged)
    with np.errstate(over="ignore", invalid="ignore"):
        gram = safe.T @ safe / n
    diag = np.diag(gram)
    degenerate = ~finite | ~np.isfinite(diag) | (diag <= DEGENERATE_DIAG_CUTOFF)
    overflowed = ~np.isfinite(gram)
    if overflowed.any():
        degenerate |= overflowed.any(axis=0) | overflowed.any(axis=1)
    gram[degenerate, :] = 0.0
    gram[:, degenerate] = 0.0
    return gram, degenerate


def projection_matrix(gram: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    """T with T_ij = G_ji / G_ii; rows of degenerate indices are zero."""
    diag = np.diag(gram).copy()
    diag[degenerate] = 1.0  # avoid 0/0; the rows get zeroed below
    T = gram.T / diag[:, None]
    T[degenerate, :] = 0.0
    T[:, degenerate] = 0.0
    return T


def build_analysis(phis, X: np.ndarray | None, n_support: int) -> GramAnalysis:
    gram, degenerate = gram_matrix(phis, X)
    if not 0 < n_support <= gram.shape[0]:
        raise ValueError("n_support out of range")
    return GramAnalysis(
        gram=gram,
        projection=projection_matrix(gram, degenerate),
        degenerate=degenerate,
        n_support=n_support,
    )


def exclusion_bound(
    i: int, b: np.ndarray, analysis: GramAnalysis, cfg: ExclusionConfig
) -> float:
    """Magnitude threshold below which support index i cannot be a true term.

    A - ( sum_{j in K, j != i} (B + |b_j|) |T_ij|
          + B * sum of the m largest |T_il| over external l ),
    with m = min(M - 1, #external). Requires a_min/b_max/max_support.
    """
    if cfg.a_min is None or cfg.b_max is None or cfg.max_support is None:
        raise ValueError("theorem mode needs a_min, b_max and max_support")
    k = analysis.n_support
    if not 0 <= i < k:
        raise ValueError("support index out of range")
    T = analysis.projection
    b = np.abs(np.asarray(b, dtype=float))
    internal = 0.0
    for j in range(k):
        if j == i or analysis.degenerate[j]:
            continue
        internal += (cfg.b_max + b[j]) * abs(T[i, j])
    external = T[i, k:][~analysis.degenerate[k:]]
    m = min(cfg.max_support - 1, external.shape[0])
    tail = 0.0
    if m > 0:
        largest = np.sort(np.abs(external))[::-1][:m]
        tail = cfg.b_max * float(np.sum(largest))
    return cfg.a_min - (internal + tail)


def coefficient_shares(b: np.ndarray, cfg: ExclusionConfig) -> np.ndarray:
    """tau_i = |b_i| / (sum_j |b_j| + eps) over the support coefficients."""
    mags = np.abs(np.asarray(b, dtype=float))
    return mags / (mags.sum() + cfg.epsilon)


def detect_redundant(
    b: np.ndarray,
    analysis: GramAnalysis,
    cfg: ExclusionConfig,
    mode: str = "ratio",
    implicit_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean flags over the support terms; True marks a redundant term.

    ``b`` holds the fitted support coefficients (1.0 for implicit-unit
    terms). Implicit-unit entries contribute to the tau denominator but are
    never flagged; degenerate entries are never flagged in theorem mode.
    """
    b = np.asarray(b, dtype=float)
    k = analysis.n_support
    if b.shape[0] != k:
        raise ValueError("coefficient count does not match support size")
    if implicit_mask is None:
        implicit_mask = np.zeros(k, dtype=bool)
    implicit_mask = np.asarray(implicit_mask, dtype=bool)
    if mode == "ratio":
        flags = coefficient_shares(b, cfg) <= cfg.rho
    elif mode == "theorem":
        flags = np.zeros(k, dtype=bool)
        for i in range(k):
            if analysis.degenerate[i]:
                continue
            flags[i] = abs(b[i]) < exclusion_bound(i, b, analysis, cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    flags &= ~implicit_mask
    return flags


def token_penalty(b_i: float, cfg: ExclusionConfig) -> float:
    """Per-token penalty for a redundant term: p * max(0, -ln(|b_i| + eps))."""
    return cfg.penalty_scale * max(0.0, -float(np.log(abs(b_i) + cfg.epsilon)))
