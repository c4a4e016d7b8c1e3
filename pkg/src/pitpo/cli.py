"""Command-line surface for the engine.

Subcommands
  run          execute a search on a benchmark task or CSV dataset
  eval         fit one program against a task and print its full scorecard
  verify       run the redundancy-soundness and gradient property suites
  report       render trajectory figures and a CSV next to a run's output
  conformance  exercise a bridge adapter against the protocol checklist
  grammar      print the sampling automaton as JSON

Exit codes: 0 success; 2 configuration error; 3 task-load or runtime
failure; 4 program syntax error (eval); 1 verification or conformance
violations. Structured output is JSON on stdout; diagnostics go to stderr.
All commands are deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from . import PROTOCOL_VERSION, __version__
from .bench import evaluate_program_text, load_task
from .bridge import BridgeClient, BridgeError, open_transport, run_conformance
from .expr import ExprSyntaxError
from .policy import GrammarPolicy, export_automaton, program_from_text
from .search import SearchConfig, _Runtime, evaluate_candidate, run_search


def _fail(code: int, message: str) -> int:
    print(f"pitpo: {message}", file=sys.stderr)
    return code


def _print_json(payload: dict) -> None:
    def scrub(value):
        if isinstance(value, float):
            return value if math.isfinite(value) else None
        if isinstance(value, dict):
            return {k: scrub(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [scrub(v) for v in value]
        return value

    print(json.dumps(scrub(payload), indent=2, sort_keys=True))


def _flatten(payload: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows: list[tuple[str, object]] = []
    for key in sorted(payload):
        value = payload[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            rows.append((name, json.dumps(list(value))))
        else:
            rows.append((name, value))
    return rows


# -- run ----------------------------------------------------------------------


def _build_config(args: argparse.Namespace) -> SearchConfig:
    data: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        data.update(loaded)
    overrides = {
        "iters": args.iters,
        "islands": args.islands,
        "group": args.group,
        "seed": args.seed,
        "policy_spec": args.policy,
        "exclusion_mode": args.exclusion_mode,
        "out_dir": args.out,
        "stop_nmse": args.stop_nmse,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return SearchConfig.from_dict(data)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _build_config(args)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        return _fail(2, f"bad configuration: {exc}")
    if config.exclusion_mode not in ("ratio", "theorem"):
        return _fail(2, f"bad exclusion mode {config.exclusion_mode!r}")
    try:
        task = load_task(args.task)
    except (KeyError, OSError, ValueError) as exc:
        return _fail(3, f"cannot load task {args.task!r}: {exc}")
    try:
        result = run_search(
            task.dataset,
            config,
            domain_constraints=task.domain_constraints,
            domain_context_builder=task.domain_context_builder,
        )
    except (BridgeError, OSError, ValueError) as exc:
        return _fail(3, f"search failed: {exc}")
    _print_json(
        {
            "task": task.name,
            "best_program": result.best_text,
            "best_mse": result.best_mse,
            "best_nmse": result.best_nmse,
            "best_reward": result.best_reward,
            "iterations_run": result.iterations_run,
            "evals": result.evals,
            "elapsed_seconds": result.elapsed,
            "bridge_fallbacks": result.bridge_fallbacks,
            "out_dir": result.out_dir,
        }
    )
    return 0


# -- eval ----------------------------------------------------------------------


def _eval_payload(args: argparse.Namespace) -> dict:
    task = load_task(args.task)
    if task.samples is not None:
        return evaluate_program_text(task, args.program, tol=args.tol)

    config = SearchConfig(seed=args.seed, exclusion_mode=args.exclusion_mode)
    rt = _Runtime(task.dataset, config, task.domain_constraints, task.domain_context_builder)
    program = program_from_text(args.program, variables=task.dataset.variables)
    # standalone scoring has no search history to derive a gate threshold
    # from, so the physical penalties are reported as if the gate were open
    cand = evaluate_candidate(program, rt, float("inf"))
    metrics = evaluate_program_text(task, args.program, tol=args.tol)
    return {
        "task": task.name,
        "program": cand.text,
        "coeffs": list(cand.pure.coeffs),
        "metrics": {
            "mse": metrics["mse"],
            "nmse": metrics["nmse"],
            "acc_avg": metrics["acc_avg"],
            "acc_all": metrics["acc_all"],
            "complexity": cand.pure.complexity,
        },
        "reward": {
            "r_fit": cand.breakdown.r_fit,
            "p_cplx": cand.breakdown.p_cplx,
            "p_phy": cand.breakdown.p_phy,
            "r_global": cand.breakdown.r_global,
        },
        "constraints": {
            "p_dim": cand.pure.p_dim,
            "p_diff": cand.pure.p_diff,
            "p_domain": dict(cand.pure.p_domain),
            "gate_open": cand.gate_open,
        },
        "redundancy": {
            "mode": config.exclusion_mode,
            "terms": list(cand.pure.support_texts),
            "flags": [bool(f) for f in cand.pure.flags],
            "token_penalties": {str(k): v for k, v in cand.pure.token_penalties.items()},
        },
    }


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        payload = _eval_payload(args)
    except ExprSyntaxError as exc:
        return _fail(4, f"program does not parse: {exc}")
    except ValueError as exc:
        return _fail(4, f"program rejected: {exc}")
    except (KeyError, OSError) as exc:
        return _fail(3, f"cannot load task {args.task!r}: {exc}")
    if args.format == "csv":
        for key, value in _flatten(payload):
            print(f"{key},{value}")
    else:
        _print_json(payload)
    return 0


# -- verify ---------------------------------------------------------------------


def cmd_verify(args: argparse.Namespace) -> int:
    from .verify import exclusion_soundness_trials, gradient_check

    violations = 0
    if args.trials == 0:
        print("pitpo: --trials 0 makes the soundness suite vacuous", file=sys.stderr)
        print("soundness: PASS (vacuous, 0 trials)")
    else:
        report = exclusion_soundness_trials(n_trials=args.trials, seed=args.seed)
        status = "PASS" if report.violations == 0 else "FAIL"
        print(
            f"soundness: {status} ({report.trials} trials, "
            f"{report.flagged_total} flags, {report.violations} violations)"
        )
        violations += report.violations

    grad = gradient_check(n_batches=args.grad_batches, seed=args.seed, tol=args.grad_tol)
    grad_ok = grad.max_rel_err < args.grad_tol
    status = "PASS" if grad_ok else "FAIL"
    print(
        f"gradient: {status} ({grad.batches} batches, {grad.components} components, "
        f"max relative error {grad.max_rel_err:.3e})"
    )
    if not grad_ok:
        violations += 1
    return 0 if violations == 0 else 1


# -- report -----------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_report

    try:
        payload = render_report(args.run, args.out)
    except FileNotFoundError as exc:
        return _fail(3, str(exc))
    except ValueError as exc:
        return _fail(3, f"cannot read trajectory: {exc}")
    _print_json(payload)
    return 0


# -- conformance -------------------------------------------------------------------


def cmd_conformance(args: argparse.Namespace) -> int:
    variables = tuple(v.strip() for v in args.variables.split(",") if v.strip())
    try:
        transport = open_transport(args.adapter)
    except (BridgeError, OSError) as exc:
        return _fail(3, f"cannot reach adapter: {exc}")
    client = BridgeClient(transport, timeout=args.timeout)
    try:
        checks = run_conformance(client, variables=variables)
    finally:
        client.close()
    failed = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        detail = f" ({check.detail})" if check.detail else ""
        print(f"{status} {check.name}{detail}")
        failed += 0 if check.passed else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


# -- grammar -------------------------------------------------------------------------


def cmd_grammar(args: argparse.Namespace) -> int:
    variables = tuple(v.strip() for v in args.variables.split(",") if v.strip())
    if not variables:
        return _fail(2, "at least one variable is required")
    policy = GrammarPolicy(
        variables,
        max_coeffs=args.max_coeffs,
        max_depth=args.max_depth,
        max_tokens=args.max_tokens,
    )
    _print_json(export_automaton(policy))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pitpo",
        description="symbolic regression with token-level policy regularization",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"pitpo {__version__} (protocol {PROTOCOL_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a search on a task")
    run.add_argument("--task", required=True, help="registry task name or CSV path")
    run.add_argument("--iters", type=int, default=None)
    run.add_argument("--islands", type=int, default=None)
    run.add_argument("--group", type=int, default=None)
    run.add_argument("--policy", default=None, help='"grammar" or "bridge:<cmd|host:port>"')
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="run directory for artifacts")
    run.add_argument("--exclusion-mode", choices=("ratio", "theorem"), default=None)
    run.add_argument("--stop-nmse", type=float, default=None)
    run.add_argument("--config", default=None, help="JSON file mirroring all config keys")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score one program against a task")
    ev.add_argument("--task", required=True)
    ev.add_argument("--program", required=True, help="program text in the DSL")
    ev.add_argument("--tol", type=float, default=0.1, help="relative accuracy tolerance")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--exclusion-mode", choices=("ratio", "theorem"), default="ratio")
    ev.add_argument("--format", choices=("json", "csv"), default="json")
    ev.set_defaults(func=cmd_eval)

    ver = sub.add_parser("verify", help="run the property suites")
    ver.add_argument("--trials", type=int, default=1000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--grad-batches", type=int, default=20)
    ver.add_argument("--grad-tol", type=float, default=1e-5)
    ver.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="render figures and CSV for a run directory")
    rep.add_argument("--run", required=True, help="directory holding trajectory.jsonl")
    rep.add_argument("--out", default=None, help="where to write (default: the run dir)")
    rep.set_defaults(func=cmd_report)

    conf = sub.add_parser("conformance", help="check a bridge adapter")
    conf.add_argument("--adapter", required=True, help="adapter command or host:port")
    conf.add_argument("--timeout", type=float, default=30.0)
    conf.add_argument("--variables", default="x,v")
    conf.set_defaults(func=cmd_conformance)

    gram = sub.add_parser("grammar", help="print the sampling automaton as JSON")
    gram.add_argument("--variables", default="x")
    gram.add_argument("--max-tokens", type=int, default=24)
    gram.add_argument("--max-depth", type=int, default=2)
    gram.add_argument("--max-coeffs", type=int, default=8)
    gram.set_defaults(func=cmd_grammar)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
