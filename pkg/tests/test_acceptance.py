"""Acceptance gate: one test per primary engine guarantee.

Each test states its criterion, runs it at the stated tolerance and prints
one summary line; pytest -v therefore shows one pass/fail line per
criterion. Runtime-bounded criteria time themselves with a monotonic clock.
"""

import math
import time

import numpy as np

from pitpo import bench
from pitpo.exclusion import ExclusionConfig, build_analysis, detect_redundant, token_penalty
from pitpo.expr import parse
from pitpo.fitter import fit, nmse
from pitpo.policy import (
    GrammarPolicy,
    program_from_text,
    standardize_advantages,
    token_aware_advantages,
)
from pitpo.search import SearchConfig, _Runtime, evaluate_candidate, run_search
from pitpo.verify import best_subset_oracle, exclusion_soundness_trials, gradient_check


def _line(name: str, detail: str) -> None:
    print(f"[PASS] {name}: {detail}")


# criterion: 1000 randomized noiseless dictionary trials, theorem mode never
# flags a true-support index; total runtime under 60 s.
def test_exclusion_soundness_1000_trials():
    start = time.monotonic()
    report = exclusion_soundness_trials(n_trials=1000, seed=0)
    elapsed = time.monotonic() - start
    assert report.trials == 1000
    assert report.violations == 0
    assert elapsed < 60.0
    _line(
        "exclusion soundness",
        f"0 violations in 1000 trials ({report.flagged_total} flags raised), {elapsed:.1f}s",
    )


# criterion: on 100 dictionary tasks with one injected spurious term, ratio
# mode (rho=1e-2) flags the spurious term and never a true term in >=95% of
# trials, and the kept support matches the brute-force best-subset oracle in
# >=95% of trials.
def test_exclusion_usefulness_and_oracle_agreement():
    flag_hits = 0
    oracle_hits = 0
    cfg = ExclusionConfig(rho=1e-2)
    for seed in range(100):
        task = bench.gen_dictionary_task(seed)
        columns = bench.dictionary_columns(task)
        skeleton = parse(task.program_text, variables=("x",))
        result = fit(skeleton, task.dataset)
        analysis = build_analysis(columns, None, len(columns))
        flags = detect_redundant(result.coeffs, analysis, cfg, mode="ratio")
        if flags[task.spurious_index] and not any(flags[i] for i in task.support_indices):
            flag_hits += 1
        kept = tuple(i for i in range(len(columns)) if not flags[i])
        if kept == best_subset_oracle(columns, task.dataset.y):
            oracle_hits += 1
    assert flag_hits >= 95
    assert oracle_hits >= 95
    _line(
        "exclusion usefulness",
        f"spurious flagged cleanly in {flag_hits}/100, oracle agreement {oracle_hits}/100",
    )


# criterion: analytic loss gradient matches central finite differences with
# relative error < 1e-5 on 100 random batches; runtime under 30 s.
def test_gradient_fidelity_100_batches():
    start = time.monotonic()
    report = gradient_check(n_batches=100, seed=0, tol=1e-5)
    elapsed = time.monotonic() - start
    assert report.batches == 100
    assert report.max_rel_err < 1e-5
    assert elapsed < 30.0
    _line(
        "gradient fidelity",
        f"max relative error {report.max_rel_err:.2e} over {report.components} components, {elapsed:.1f}s",
    )


# criterion: group standardization gives |mean| < 1e-10 and |std-1| < 1e-10
# on non-degenerate groups; token penalties are strictly nonnegative and land
# only on redundant-term token spans (audited over 1000 sampled programs).
def test_advantage_contract_and_span_audit():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rewards = rng.normal(size=int(rng.integers(2, 9)))
        if float(np.std(rewards)) < 1e-6:
            continue
        adv = standardize_advantages(rewards)
        assert abs(float(adv.mean())) < 1e-10
        assert abs(float(adv.std()) - 1.0) < 1e-10

    policy = GrammarPolicy(("x",), max_tokens=16, seed=0)
    cfg = ExclusionConfig()
    audited = 0
    for _ in range(1000):
        sample = policy.sample("audit", rng=rng)
        if sample.skeleton is None or sample.term_token_map is None:
            continue
        n_terms = len(sample.skeleton.terms)
        flagged = {i for i in range(n_terms) if rng.random() < 0.5}
        term_penalties = {
            i: token_penalty(float(rng.uniform(1e-6, 2.0)), cfg) for i in flagged
        }
        adv_tokens, penalties = token_aware_advantages(0.7, sample, term_penalties)
        assert np.all(penalties >= 0.0)
        for tok_idx, term_idx in enumerate(sample.term_token_map):
            expected = term_penalties.get(term_idx, 0.0)
            assert penalties[tok_idx] == expected
            if term_idx not in flagged:
                assert penalties[tok_idx] == 0.0
            assert adv_tokens[tok_idx] == 0.7 - penalties[tok_idx]
        audited += 1
    assert audited >= 900
    _line("advantage contract", f"standardization exact, {audited} programs span-audited")


# criterion: evaluating each ground-truth program on its own simulated
# trajectory reproduces the target with NMSE < 1e-12.
def test_ground_truth_round_trips():
    worst = 0.0
    for make in (bench.make_oscillator1, bench.make_oscillator2):
        task = make()
        report = bench.evaluate_program_text(task, task.truth_text)
        assert report["nmse"] < 1e-12
        worst = max(worst, report["nmse"])
    _line("ground-truth round-trips", f"both oscillators, worst NMSE {worst:.2e}")


# criterion: with the built-in grammar policy at 4 islands x group 4, the
# engine recovers the exact 3-term support (NMSE < 1e-8 and support match)
# within 500 iterations in >=8/10 seeds; total runtime under 10 minutes.
def test_end_to_end_recovery_across_seeds():
    task = bench.make_recovery_task()
    start = time.monotonic()
    hits = []
    for seed in range(10):
        found = {"iter": None}

        def inspect(iteration, candidates):
            for cand in candidates:
                if cand.pure.nmse < 1e-8 and bench.recovered_support(
                    cand.pure.support_texts, task.expected_support
                ):
                    found["iter"] = iteration
                    return True
            return False

        config = SearchConfig(
            iters=500, islands=4, group=4, seed=seed,
            max_tokens=16, max_depth=1, restarts=4, fit_iters=60,
        )
        run_search(task.dataset, config, inspect_iteration=inspect)
        hits.append(found["iter"])
    elapsed = time.monotonic() - start
    recovered = sum(1 for h in hits if h is not None)
    assert recovered >= 8, f"recovered {recovered}/10 seeds: {hits}"
    assert elapsed < 600.0
    _line(
        "end-to-end recovery",
        f"{recovered}/10 seeds, iterations {hits}, {elapsed:.0f}s total",
    )


# criterion: on the injected-spurious-term task the median iterations until
# redundant spans leave the sampler is strictly lower with token-granular
# penalties than without, over 10 seeds.
def test_stagnation_ablation_over_10_seeds():
    results = bench.stagnation_experiment(seeds=range(10))
    med_on = float(np.median(results["on"]))
    med_off = float(np.median(results["off"]))
    assert med_on < med_off, f"median on={med_on} off={med_off}"
    _line(
        "stagnation ablation",
        f"median break iteration {med_on:.1f} (on) vs {med_off:.1f} (off)",
    )


# criterion: with the gate closed the physical contribution to the reward is
# exactly zero; flipping the gate changes only the physical penalty term
# (remaining reward fields bitwise identical).
def test_gating_exact_zero_and_bitwise_flip():
    task = bench.make_turbulence_task()
    config = SearchConfig(seed=0, restarts=4, fit_iters=60)
    rt = _Runtime(task.dataset, config, list(task.domain_constraints), task.domain_context_builder)
    program = program_from_text("c0*t1", task.dataset.variables)

    closed = evaluate_candidate(program, rt, None)
    open_ = evaluate_candidate(program, rt, float("inf"))

    assert closed.gate_open is False and open_.gate_open is True
    assert closed.p_phy == 0.0
    assert open_.p_phy > 0.0
    assert closed.pure.r_fit == open_.pure.r_fit
    assert closed.pure.p_cplx == open_.pure.p_cplx
    assert closed.reward == closed.pure.r_fit - closed.pure.p_cplx - 0.0
    assert open_.reward == open_.pure.r_fit - open_.pure.p_cplx - open_.p_phy
    _line(
        "gating semantics",
        f"closed p_phy exactly 0.0, open p_phy {open_.p_phy:.3e}, fit/complexity bitwise stable",
    )


# criterion: positive-semidefinite stress fields score a zero realizability
# penalty; an exact cubic wall scaling scores a zero slope penalty; oracle
# base weights reconstruct the anisotropy with zero selected-entry MSE
# (each within 1e-10).
def test_turbulence_evaluator_zero_penalties():
    from pitpo.constraints import turb_asymptotic_slope, turb_realizability

    rng = np.random.default_rng(0)
    taus = []
    for _ in range(50):
        a = rng.standard_normal((3, 3))
        taus.append(a @ a.T)
    p1 = turb_realizability(taus)
    assert abs(p1) < 1e-10

    y_plus = np.geomspace(1.0, 5.0, 40)
    tau_xy = 0.37 * y_plus**3
    p3 = turb_asymptotic_slope(tau_xy, y_plus, band=(1.0, 5.0))
    assert abs(p3) < 1e-10

    g = (-0.3, 0.05, -0.1)
    samples = bench.make_turbulence_samples(n=40, seed=0, g=g)
    selected = bench.turb_selected_mse(samples, "-0.3; 0.05; -0.1")
    assert abs(selected) < 1e-10
    _line(
        "turbulence evaluator",
        f"P1 {p1:.1e}, slope penalty {p3:.1e}, oracle selected-MSE {selected:.1e}",
    )


# criterion: the mean predictor scores NMSE exactly 1.0, and the relative
# accuracy fixture matches its hand-computed values.
def test_metrics_cross_check():
    rng = np.random.default_rng(0)
    y = rng.normal(size=200) * 3.0 + 1.5
    mean_pred = np.full_like(y, y.mean())
    assert nmse(mean_pred, y) == 1.0

    pred = np.array([1.05, 2.0, 5.0])
    target = np.array([1.0, 2.0, 4.0])
    acc_avg, acc_all = bench.accuracy_stats(pred, target, tol=0.1)
    assert acc_avg == 2.0 / 3.0
    assert acc_all == 0.0
    _line("metrics cross-check", "mean predictor NMSE exactly 1.0, accuracy fixture exact")
