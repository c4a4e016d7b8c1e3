"""Reward composition: fit term, complexity penalty, gated physical penalty.

r_global = r_fit - p_cplx - p_phy, held exactly (bitwise) so logs can be
audited. An infinite-MSE candidate bottoms out at the fit-reward floor
instead of -inf so group statistics stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    lambda_len: float = 5e-3
    epsilon: float = 1e-50
    floor: float = -1e6


@dataclass(frozen=True)
class RewardBreakdown:
    r_fit: float
    p_cplx: float
    p_phy: float

    @property
    def r_global(self) -> float:
        return self.r_fit - self.p_cplx - self.p_phy


def fit_reward(mse_value: float, cfg: RewardConfig) -> float:
    """-alpha * ln(mse + eps); the floor for non-finite or absurd MSE."""
    if not math.isfinite(mse_value):
        return cfg.floor
    value = -cfg.alpha * math.log(mse_value + cfg.epsilon)
    return max(value, cfg.floor)


def complexity_penalty(n_nodes: int, cfg: RewardConfig) -> float:
    """lambda_len * AST node count."""
    return cfg.lambda_len * n_nodes


def global_reward(r_fit: float, p_cplx: float, p_phy: float) -> RewardBreakdown:
    return RewardBreakdown(r_fit=r_fit, p_cplx=p_cplx, p_phy=p_phy)
