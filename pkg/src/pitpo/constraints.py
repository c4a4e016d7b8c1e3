"""Physical-consistency penalties, gating, and the turbulence plugin.

All penalties are computed raw and then gated: they only enter the reward
once a candidate's MSE drops below delta_gate, so bad equations are never
shaped by physics they don't yet approximate. The turbulence block evaluates
anisotropy reconstructions: realizability, wall decay, near-wall asymptotic
scaling and energy-budget consistency, plus the staged schedule that
reserves the expensive checks for candidates that improve on the best MSE.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from scipy.stats import qmc

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-8
DIFF_PROBES = 64
DIFF_STEP_SCALE = 1e-4
DIFF_JUMP_FACTOR = 1e6


@dataclass(frozen=True)
class ConstraintConfig:
    w_dim: float = 1.0
    w_diff: float = 0.5
    w_domain: float = 0.5
    delta_gate: float | None = None  # None: gate closed (no baseline MSE yet)


@dataclass(frozen=True)
class ConstraintReport:
    p_dim: float
    p_diff: float
    p_domain: dict[str, float]
    gate_open: bool

    def total(self, cfg: ConstraintConfig) -> float:
        """Weighted physical penalty; exactly 0.0 when the gate is closed."""
        if not self.gate_open:
            return 0.0
        weighted = cfg.w_dim * self.p_dim + cfg.w_diff * self.p_diff
        weighted += cfg.w_domain * sum(self.p_domain.values())
        return weighted


def gate_open(mse_value: float, cfg: ConstraintConfig) -> bool:
    """The physical gate opens once MSE beats delta_gate."""
    if cfg.delta_gate is None:
        return False
    return mse_value < cfg.delta_gate


def diff_penalty(
    predict: Callable[[np.ndarray], np.ndarray],
    X_train: np.ndarray,
    probes: int = DIFF_PROBES,
) -> float:
    """Fraction of quasi-random probe points where the model looks
    non-differentiable.

    Probes are unscrambled Halton points inside the axis-aligned bounding
    box of the training inputs. A probe fails when any central-difference
    neighbor evaluates non-finite or the one-sided jump exceeds
    DIFF_JUMP_FACTOR * h * (1 + |f(x)|) with h = 1e-4 * column range.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    d = X_train.shape[1]
    lo = X_train.min(axis=0)
    hi = X_train.max(axis=0)
    span = hi - lo
    h = DIFF_STEP_SCALE * np.where(span > 0, span, 1.0)

    sampler = qmc.Halton(d=d, scramble=False)
    points = lo + sampler.random(probes) * span

    with np.errstate(all="ignore"):
        f0 = np.asarray(predict(points), dtype=float)
        failures = ~np.isfinite(f0)
        allowance = DIFF_JUMP_FACTOR * (1.0 + np.abs(f0))
        for dim in range(d):
            for direction in (+1.0, -1.0):
                shifted = points.copy()
                shifted[:, dim] += direction * h[dim]
                fd = np.asarray(predict(shifted), dtype=float)
                bad = ~np.isfinite(fd)
                jump = np.abs(fd - f0) > h[dim] * allowance
                failures |= bad | np.where(np.isfinite(f0), jump, True)
    return float(np.count_nonzero(failures)) / probes


@runtime_checkable
class DomainConstraint(Protocol):
    """Pluggable domain-physics penalty.

    ``required_fields`` names the dataset extras the constraint needs; the
    engine skips the constraint (zero penalty, logged once) when a field is
    missing from the evaluation context.
    """

    name: str
    required_fields: tuple[str, ...]

    def evaluate(self, ctx: dict) -> float: ...


def apply_domain_constraints(constraints: list[DomainConstraint], ctx: dict) -> dict[str, float]:
    out: dict[str, float] = {}
    for constraint in constraints:
        missing = [f for f in constraint.required_fields if ctx.get(f) is None]
        if missing:
            log.info("constraint %s skipped: missing %s", constraint.name, missing)
            out[constraint.name] = 0.0
            continue
        out[constraint.name] = float(constraint.evaluate(ctx))
    return out


# ---------------------------------------------------------------------------
# turbulence block


@dataclass(frozen=True)
class TurbulenceSample:
    """One flow location: invariants, tensor bases, target anisotropy.

    Invariants arrive already squashed (tanh of half the raw value).
    ``grad_u``, ``y_plus`` and ``pk_ref`` are optional; constraints needing
    them are skipped when absent.
    """

    i1: float
    i2: float
    bases: tuple[np.ndarray, np.ndarray, np.ndarray]
    target_b: np.ndarray
    k: float
    y: float
    y_plus: float | None = None
    grad_u: np.ndarray | None = None
    pk_ref: float | None = None

    def __post_init__(self):
        for name, tensor in (("basis", self.bases[0]), ("basis", self.bases[1]),
                             ("basis", self.bases[2]), ("target_b", self.target_b)):
            _require_symmetric(np.asarray(tensor), name)

    @property
    def target_tau(self) -> np.ndarray:
        return self.k * np.asarray(self.target_b)


def _require_symmetric(tensor: np.ndarray, name: str, tol: float = SYMMETRY_TOL) -> None:
    if tensor.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {tensor.shape}")
    if np.max(np.abs(tensor - tensor.T)) > tol:
        raise ValueError(f"{name} is not symmetric within {tol}")


def turb_realizability(taus: list[np.ndarray]) -> float:
    """Mean over samples of max(0, -lambda_min(tau)); 0 for PSD fields."""
    if not taus:
        raise ValueError("no stress tensors given")
    total = 0.0
    for tau in taus:
        tau = np.asarray(tau, dtype=float)
        _require_symmetric(tau, "tau")
        lam_min = float(np.linalg.eigvalsh(tau)[0])
        total += max(0.0, -lam_min)
    return total / len(taus)


def turb_wall_decay(taus: list[np.ndarray], ys: np.ndarray, y0: float) -> float:
    """Mean Frobenius norm of tau over the wall band y < y0; 0 when the band
    is empty."""
    ys = np.asarray(ys, dtype=float)
    selected = [tau for tau, y in zip(taus, ys) if y < y0]
    if not selected:
        log.info("wall-decay band y < %g is empty; penalty 0", y0)
        return 0.0
    norms = [float(np.linalg.norm(np.asarray(tau))) for tau in selected]
    return float(np.mean(norms))


def turb_asymptotic_slope(
    tau_xy: np.ndarray,
    y_plus: np.ndarray,
    band: tuple[float, float] = (1.0, 5.0),
) -> float:
    """|OLS slope - 3| of log|tau_xy| against log(y+) inside the band.

    Fewer than 3 usable samples (in band, positive y+, nonzero finite
    tau_xy) yields 0 with a warning: the scaling law cannot be estimated.
    """
    tau_xy = np.asarray(tau_xy, dtype=float)
    y_plus = np.asarray(y_plus, dtype=float)
    usable = (
        (y_plus >= band[0])
        & (y_plus <= band[1])
        & (y_plus > 0)
        & np.isfinite(tau_xy)
        & (tau_xy != 0)
    )
    if int(np.count_nonzero(usable)) < 3:
        log.warning("asymptotic-slope band has <3 usable samples; penalty 0")
        return 0.0
    lx = np.log(y_plus[usable])
    ly = np.log(np.abs(tau_xy[usable]))
    lx_c = lx - lx.mean()
    slope = float((lx_c @ (ly - ly.mean())) / (lx_c @ lx_c))
    return abs(slope - 3.0)


def turb_energy_consistency(
    taus: list[np.ndarray],
    grad_us: list[np.ndarray],
    pk_ref: np.ndarray,
) -> float:
    """MSE between production P_k = -tau_ij dU_i/dx_j and the reference."""
    pk_ref = np.asarray(pk_ref, dtype=float)
    if len(taus) != len(grad_us) or len(taus) != pk_ref.shape[0]:
        raise ValueError("length mismatch between tensors and reference")
    pk = np.array(
        [-float(np.sum(np.asarray(tau) * np.asarray(grad))) for tau, grad in zip(taus, grad_us)]
    )
    diff = pk - pk_ref
    return float(np.mean(diff * diff))


def elite_schedule(batch_mses: list[float], best_so_far: float) -> tuple[list[str], float]:
    """Assign evaluation stages in batch order.

    A candidate goes to Stage-B (full constraint suite plus the extra
    fine-tune) only when its MSE strictly beats the running best, which
    updates immediately; everyone else stays in Stage-A.
    """
    stages: list[str] = []
    best = best_so_far
    for value in batch_mses:
        if value < best:
            stages.append("B")
            best = value
        else:
            stages.append("A")
    return stages, best
