"""Self-check suites: exclusion soundness trials and policy gradient checks.

These back the `pitpo verify` subcommand and the randomized portions of the
test suite. Everything is deterministic for a given seed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import exclusion as _exclusion
from .exclusion import ExclusionConfig, GramAnalysis, detect_redundant, gram_matrix
from .policy import GrammarPolicy, GroupBatch, UpdateConfig, pitpo_loss

log = logging.getLogger(__name__)

# Basis catalog over a single column; everything finite on [-2, 2].
_BASIS_CATALOG = [
    ("x", lambda x: x),
    ("x^2", lambda x: x**2),
    ("x^3", lambda x: x**3),
    ("sin(x)", np.sin),
    ("cos(x)", np.cos),
    ("tanh(x)", np.tanh),
    ("exp(x)", np.exp),
    ("sin(2x)", lambda x: np.sin(2 * x)),
    ("cos(2x)", lambda x: np.cos(2 * x)),
    ("x*sin(x)", lambda x: x * np.sin(x)),
]


@dataclass(frozen=True)
class TrialReport:
    trials: int
    violations: int
    flagged_total: int


def _random_instance(rng: np.random.Generator, a_min: float, b_max: float, max_support: int):
    n = int(rng.integers(50, 201))
    dict_size = int(rng.integers(3, 9))
    picks = rng.choice(len(_BASIS_CATALOG), size=dict_size, replace=False)
    x = rng.uniform(-2.0, 2.0, size=n)
    columns = [np.asarray(_BASIS_CATALOG[p][1](x), dtype=float) for p in picks]

    support_size = int(rng.integers(1, min(max_support, dict_size) + 1))
    true_support = rng.choice(dict_size, size=support_size, replace=False)
    signs = rng.choice([-1.0, 1.0], size=support_size)
    mags = rng.uniform(a_min, b_max, size=support_size)
    y = np.zeros(n)
    for idx, coeff in zip(true_support, signs * mags):
        y = y + coeff * columns[idx]

    # K must share at least one index with the true support
    keep = rng.integers(1, support_size + 1)
    k_true = list(rng.choice(true_support, size=keep, replace=False))
    others = [j for j in range(dict_size) if j not in true_support]
    extra = [j for j in others if rng.random() < 0.5]
    K = sorted(set(k_true) | set(extra))
    return columns, y, list(true_support), K


def exclusion_soundness_trials(
    n_trials: int = 1000,
    seed: int = 0,
    a_min: float = 0.5,
    b_max: float = 2.0,
    max_support: int = 3,
) -> TrialReport:
    """Random noiseless instances: theorem-mode flags must never land on a
    true support index that is inside the fitted set K."""
    rng = np.random.default_rng(seed)
    cfg = ExclusionConfig(a_min=a_min, b_max=b_max, max_support=max_support)
    violations = 0
    flagged_total = 0
    for _ in range(n_trials):
        columns, y, true_support, K = _random_instance(rng, a_min, b_max, max_support)
        external = [j for j in range(len(columns)) if j not in K]
        ordered = [columns[j] for j in K] + [columns[j] for j in external]

        phi = np.column_stack([columns[j] for j in K])
        b, *_ = np.linalg.lstsq(phi, y, rcond=None)

        gram, degenerate = gram_matrix(ordered)
        analysis = GramAnalysis(
            gram=gram,
            projection=_exclusion.projection_matrix(gram, degenerate),
            degenerate=degenerate,
            n_support=len(K),
        )
        flags = detect_redundant(b, analysis, cfg, mode="theorem")
        flagged_total += int(flags.sum())
        for pos, j in enumerate(K):
            if flags[pos] and j in true_support:
                violations += 1
    return TrialReport(n_trials, violations, flagged_total)


@dataclass(frozen=True)
class GradientReport:
    batches: int
    max_rel_err: float
    components: int


def _random_gradient_batch(rng: np.random.Generator):
    """One small policy + group with perturbed logits, kept away from the
    clip kink so the loss is differentiable at the evaluation point."""
    variables = ("x",) if rng.random() < 0.5 else ("x", "y")
    policy = GrammarPolicy(
        variables,
        max_coeffs=4,
        max_depth=2,
        max_tokens=int(rng.integers(6, 17)),
        temperature=float(rng.uniform(0.7, 1.3)),
    )
    group = int(rng.integers(2, 5))
    samples = [policy.sample(rng=rng) for _ in range(group)]

    cfg = UpdateConfig()
    for _ in range(20):
        trial = {
            key: vec + rng.normal(0.0, 0.3, size=vec.shape)
            for key, vec in policy.logits.items()
        }
        saved = policy.logits
        policy.logits = trial
        near_kink = False
        for sample in samples:
            for k, step in enumerate(sample.steps):
                lps = policy.masked_logprobs(step.key, step.mask)
                ratio = float(np.exp(lps[step.mask.index(step.action)] - sample.logprobs[k]))
                if min(abs(ratio - (1 - cfg.clip_eps)), abs(ratio - (1 + cfg.clip_eps))) < 1e-3:
                    near_kink = True
        if not near_kink:
            break
        policy.logits = saved
    ref = policy.clone()
    for key in ref.logits:
        ref.logits[key] = ref.logits[key] + rng.normal(0.0, 0.3, size=ref.logits[key].shape)

    advantages = [rng.normal(0.0, 1.0, size=len(s.tokens)) for s in samples]
    batch = GroupBatch(
        context_bucket="-",
        samples=samples,
        rewards=np.zeros(group),
        advantages=advantages,
        token_penalties=[np.zeros(len(s.tokens)) for s in samples],
    )
    return policy, ref, batch, cfg


def gradient_check(
    n_batches: int = 100, seed: int = 0, tol: float = 1e-5, fd_step: float = 1e-5
) -> GradientReport:
    """Analytic loss gradients against central finite differences.

    For each random batch the full gradient vector is compared; the reported
    relative error is ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    components = 0
    for _ in range(n_batches):
        policy, ref, batch, cfg = _random_gradient_batch(rng)
        _, grads = pitpo_loss(policy, ref, batch, cfg)
        keys = sorted(grads)
        analytic = np.concatenate([grads[k] for k in keys]) if keys else np.zeros(0)
        numeric = np.zeros_like(analytic)
        pos = 0
        for key in keys:
            vec = policy.logits_for(key)
            for idx in range(vec.shape[0]):
                orig = vec[idx]
                vec[idx] = orig + fd_step
                up, _ = pitpo_loss(policy, ref, batch, cfg)
                vec[idx] = orig - fd_step
                down, _ = pitpo_loss(policy, ref, batch, cfg)
                vec[idx] = orig
                numeric[pos] = (up - down) / (2 * fd_step)
                pos += 1
        components += analytic.shape[0]
        denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
        rel = float(np.linalg.norm(analytic - numeric)) / denom
        worst = max(worst, rel)
    if worst >= tol:
        log.warning("gradient check worst relative error %.3e exceeds %.1e", worst, tol)
    return GradientReport(batches=n_batches, max_rel_err=worst, components=components)


def best_subset_oracle(
    columns: list[np.ndarray], y: np.ndarray, tol: float = 1e-18
) -> tuple[int, ...]:
    """Exhaustive best-subset least squares over a small dictionary.

    Returns the smallest subset (ties broken lexicographically) whose exact
    least-squares fit reaches an MSE within ``tol`` of the best achievable
    over all subsets. Practical only for dictionaries of ~10 bases.
    """
    d = len(columns)
    if d > 16:
        raise ValueError("dictionary too large for exhaustive search")
    n = y.shape[0]
    best_mse = float("inf")
    fits: dict[tuple[int, ...], float] = {}
    for size in range(0, d + 1):
        for subset in itertools.combinations(range(d), size):
            if subset:
                phi = np.column_stack([columns[j] for j in subset])
                coeffs, *_ = np.linalg.lstsq(phi, y, rcond=None)
                resid = y - phi @ coeffs
            else:
                resid = y
            value = float(resid @ resid / n)
            fits[subset] = value
            best_mse = min(best_mse, value)
    scale = float(y @ y / n) + 1e-30
    threshold = best_mse + tol * scale
    for size in range(0, d + 1):
        for subset in itertools.combinations(range(d), size):
            if fits[subset] <= threshold:
                return subset
    raise AssertionError("unreachable")
