"""Benchmark tasks, data generators and scoring helpers.

Everything here produces or consumes plain :class:`~pitpo.fitter.Dataset`
objects, so tasks plug into the search loop and the CLI without special
cases. The one structured exception is turbulence, where samples carry
tensor bases; those tasks keep the raw samples next to a flattened
regression view of the same data.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import qmc

from .constraints import (
    TurbulenceSample,
    turb_asymptotic_slope,
    turb_energy_consistency,
    turb_realizability,
    turb_wall_decay,
)
from .expr import eval_node, parse
from .fitter import Dataset, fit, nmse, predict_on, predictions
from .policy import (
    GrammarPolicy,
    UpdateConfig,
    context_bucket,
    imitation_update,
    sample_group,
    update_from_groups,
)
from .search import SearchConfig, _Runtime, build_group_batch, evaluate_candidate

log = logging.getLogger(__name__)

OMEGA = ((0, 0), (0, 1), (1, 1), (2, 2))


# ---------------------------------------------------------------------------
# metrics


def accuracy_stats(pred: np.ndarray, y: np.ndarray, tol: float) -> tuple[float, float]:
    """Relative-accuracy pair (mean hit rate, all-hit indicator).

    A row counts as a hit when |pred - y| / |y| <= tol. Rows with a zero
    target have no relative error and are excluded from both statistics.
    Returns (1.0, 1.0) when every row is excluded.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if pred.shape != y.shape:
        raise ValueError("prediction and target lengths differ")
    keep = y != 0
    if not np.any(keep):
        log.warning("accuracy_stats: all targets are zero; nothing to score")
        return 1.0, 1.0
    rel = np.abs(pred[keep] - y[keep]) / np.abs(y[keep])
    hits = rel <= tol
    acc_avg = float(np.mean(hits))
    acc_all = float(np.all(hits))
    return acc_avg, acc_all


# ---------------------------------------------------------------------------
# task container and registry


@dataclass
class TaskSpec:
    """A ready-to-run problem: data plus whatever ground truth is known.

    ``truth_text`` is a constant-folded program that generated the target
    (useful for round-trip checks); ``expected_support`` lists the canonical
    term texts a correct recovery should report. Turbulence tasks also keep
    their raw ``samples`` and wire in domain constraints.
    """

    name: str
    dataset: Dataset
    truth_text: str | None = None
    expected_support: tuple[str, ...] | None = None
    domain_constraints: tuple = ()
    domain_context_builder: Callable | None = None
    samples: tuple[TurbulenceSample, ...] | None = None
    notes: str = ""


def load_task(name_or_path: str) -> TaskSpec:
    """Resolve a registry name or a CSV path to a TaskSpec."""
    if name_or_path in TASKS:
        return TASKS[name_or_path]()
    path = Path(name_or_path)
    if path.suffix.lower() == ".csv":
        return load_csv_task(path)
    known = ", ".join(sorted(TASKS))
    raise KeyError(f"unknown task {name_or_path!r}; expected a CSV path or one of: {known}")


def evaluate_program_text(task: TaskSpec, text: str, tol: float = 0.1) -> dict:
    """Score a program against a task; the shared backend of ``pitpo eval``.

    Regression tasks fit any placeholders on the training rows and report
    mse/nmse plus relative-accuracy stats over all rows. Turbulence tasks
    instead expect three ';'-joined closed-form expressions in (i1, i2) and
    report the reconstruction error over the selected tensor entries.
    """
    if task.samples is not None:
        selected = turb_selected_mse(task.samples, text)
        return {"task": task.name, "selected_mse": selected}
    skeleton = parse(text, variables=task.dataset.variables)
    result = fit(skeleton, task.dataset)
    pred = predictions(skeleton, result.coeffs, task.dataset, split="all")
    mse_all = float(np.mean((pred - task.dataset.y) ** 2))
    acc_avg, acc_all = accuracy_stats(pred, task.dataset.y, tol)
    return {
        "task": task.name,
        "program": skeleton.text,
        "coeffs": [float(c) for c in result.coeffs],
        "mse": mse_all,
        "nmse": nmse(pred, task.dataset.y),
        "acc_avg": acc_avg,
        "acc_all": acc_all,
    }


# ---------------------------------------------------------------------------
# driven-oscillator regression targets

_OSC_SPAN = (0.0, 50.0)
_OSC_STATE0 = (0.5, 0.5)


def _oscillator1_dv(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return 0.8 * np.sin(x) - 0.5 * v**3 - 0.2 * x**3 - 0.5 * x * v - x * np.cos(x)


def _oscillator2_dv(t: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return 0.3 * np.sin(t) - 0.5 * v**3 - 1.0 * x * v - 5.0 * x * np.exp(0.5 * x)


def _integrate(rhs, n_points: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_eval = np.linspace(*_OSC_SPAN, n_points)
    sol = solve_ivp(
        rhs,
        _OSC_SPAN,
        _OSC_STATE0,
        method="DOP853",
        t_eval=t_eval,
        rtol=1e-9,
        atol=1e-11,
    )
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return sol.t, sol.y[0], sol.y[1]


def make_oscillator1(n_points: int = 400) -> TaskSpec:
    """Unforced nonlinear oscillator; the target is dv/dt on the trajectory."""
    _, x, v = _integrate(lambda t, s: (s[1], _oscillator1_dv(s[0], s[1])), n_points)
    y = _oscillator1_dv(x, v)
    return TaskSpec(
        name="oscillator1",
        dataset=Dataset(X=np.column_stack([x, v]), y=y, variables=("x", "v")),
        truth_text="0.8*sin(x) - 0.5*v^3 - 0.2*x^3 - 0.5*x*v - x*cos(x)",
        notes="dv/dt sampled along the integrated trajectory",
    )


def make_oscillator2(n_points: int = 400) -> TaskSpec:
    """Time-forced oscillator; time enters the target, so t is a variable."""
    t, x, v = _integrate(lambda t, s: (s[1], _oscillator2_dv(t, s[0], s[1])), n_points)
    y = _oscillator2_dv(t, x, v)
    return TaskSpec(
        name="oscillator2",
        dataset=Dataset(X=np.column_stack([x, v, t]), y=y, variables=("x", "v", "t")),
        truth_text="0.3*sin(t) - 0.5*v^3 - x*v - 5*x*exp(0.5*x)",
        notes="dv/dt sampled along the forced trajectory",
    )


# ---------------------------------------------------------------------------
# bacterial-growth response surface

_ECOLI_RANGES = (
    ("B", 0.01, 2.0),
    ("S", 0.01, 5.0),
    ("T", 20.0, 45.0),
    ("pH", 4.0, 10.0),
)


def _ecoli_rate(B, S, T, pH):
    monod = S / (1.0 + S)
    thermal = np.tanh(T - 30.0) / (1.0 + 1e-4 * (T - 40.0) ** 4)
    acidity = np.exp(-np.abs(pH - 7.0)) * np.sin((pH - 4.0) * (np.pi / 6.0)) ** 2
    return B * monod * thermal * acidity


def make_ecoli(n_points: int = 500, seed: int = 0) -> TaskSpec:
    """Growth-rate surface sampled with a Latin hypercube over 4 inputs."""
    sampler = qmc.LatinHypercube(d=len(_ECOLI_RANGES), seed=seed)
    unit = sampler.random(n_points)
    lo = np.array([r[1] for r in _ECOLI_RANGES])
    hi = np.array([r[2] for r in _ECOLI_RANGES])
    X = qmc.scale(unit, lo, hi)
    names = tuple(r[0] for r in _ECOLI_RANGES)
    y = _ecoli_rate(*(X[:, i] for i in range(len(names))))
    truth = (
        "B*(S/(1 + S))*(tanh(T - 30)/(1 + 0.0001*((T - 40)^2)^2))"
        "*exp(-abs(pH - 7))*sin((pH - 4)*0.5235987755982988)^2"
    )
    return TaskSpec(
        name="ecoli",
        dataset=Dataset(X=X, y=y, variables=names),
        truth_text=truth,
        notes="substrate, temperature and pH response of a growth rate",
    )


# ---------------------------------------------------------------------------
# sparse-recovery target used by the end-to-end check


def make_recovery_task(n_points: int = 240, seed: int = 0) -> TaskSpec:
    """Three-term target whose support the search should recover exactly."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.5, 2.5, n_points)
    y = 2.0 * x + 1.5 * np.sin(x) - 0.8 * x**2
    return TaskSpec(
        name="recovery",
        dataset=Dataset(X=x[:, None], y=y, variables=("x",)),
        truth_text="2*x + 1.5*sin(x) - 0.8*x^2",
        expected_support=("x", "sin(x)", "x^2"),
    )


def _unsigned_basis(text: str) -> str:
    """Drop a leading minus (and the parens it wrapped): the sign of a basis
    belongs to its fitted coefficient, so "-x^2" and "x^2" are one basis."""
    if not text.startswith("-"):
        return text
    text = text[1:]
    if text.startswith("(") and text.endswith(")"):
        depth = 0
        for pos, ch in enumerate(text):
            depth += (ch == "(") - (ch == ")")
            if depth == 0:
                return text[1:-1] if pos == len(text) - 1 else text
    return text


def recovered_support(support_texts: Sequence[str], expected: Sequence[str]) -> bool:
    """True when the reported support matches the expected set exactly,
    comparing bases up to coefficient sign."""
    return {_unsigned_basis(t) for t in support_texts} == {
        _unsigned_basis(t) for t in expected
    }


# ---------------------------------------------------------------------------
# dictionary tasks with one injected spurious term

DICTIONARY_BASES = (
    "x",
    "x^2",
    "x^3",
    "sin(x)",
    "cos(x)",
    "tanh(x)",
    "exp(x)",
    "x*sin(x)",
    "x*exp(x)",
    "1/(1 + x^2)",
)

_DICTIONARY_FNS = (
    lambda x: x,
    lambda x: x**2,
    lambda x: x**3,
    np.sin,
    np.cos,
    np.tanh,
    np.exp,
    lambda x: x * np.sin(x),
    lambda x: x * np.exp(x),
    lambda x: 1.0 / (1.0 + x**2),
)


@dataclass(frozen=True)
class DictionaryTask:
    """A known-support regression plus a candidate with one extra term.

    ``program_text`` lists every true term and exactly one basis that did
    not generate the data; ``spurious_index`` is that term's position.
    """

    dataset: Dataset
    program_text: str
    support_indices: tuple[int, ...]
    spurious_index: int
    basis_names: tuple[str, ...]


def gen_dictionary_task(seed: int, n_points: int = 200, support_size: int = 2) -> DictionaryTask:
    """Build one dictionary task; everything is determined by the seed."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, n_points)
    chosen = rng.choice(len(DICTIONARY_BASES), size=support_size + 1, replace=False)
    support, spurious = chosen[:-1], int(chosen[-1])
    weights = rng.uniform(0.5, 2.0, support_size) * rng.choice((-1.0, 1.0), support_size)
    y = np.zeros_like(x)
    for w, b in zip(weights, support):
        y = y + w * _DICTIONARY_FNS[b](x)

    order = list(support)
    order.insert(int(rng.integers(0, support_size + 1)), spurious)
    names = tuple(DICTIONARY_BASES[b] for b in order)
    text = " + ".join(f"c{i}*{name}" for i, name in enumerate(names))
    return DictionaryTask(
        dataset=Dataset(X=x[:, None], y=y, variables=("x",)),
        program_text=text,
        support_indices=tuple(i for i, b in enumerate(order) if b != spurious),
        spurious_index=order.index(spurious),
        basis_names=names,
    )


def dictionary_columns(task: DictionaryTask) -> list[np.ndarray]:
    """Design columns of the candidate's terms, in program order."""
    x = task.dataset.X[:, 0]
    index = {name: fn for name, fn in zip(DICTIONARY_BASES, _DICTIONARY_FNS)}
    return [np.asarray(index[name](x), dtype=float) for name in task.basis_names]


# ---------------------------------------------------------------------------
# turbulence: anisotropy reconstruction from tensor bases


def _deviatoric(m: np.ndarray) -> np.ndarray:
    return m - np.trace(m) / 3.0 * np.eye(3)


def make_turbulence_samples(
    n: int = 40,
    seed: int = 0,
    g: tuple = (-0.3, 0.05, -0.1),
) -> tuple[TurbulenceSample, ...]:
    """Synthetic flow locations with a known closure.

    Bases follow the usual construction from a random velocity gradient:
    the deviatoric strain rate, the strain/rotation commutator and the
    deviatoric squared strain. Each ``g`` entry is either a constant or a
    callable of the squashed invariants (i1, i2); the target anisotropy is
    the exact combination b = sum_m g_m(i1, i2) * T_m.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        grad = 0.5 * rng.standard_normal((3, 3))
        s = _deviatoric(0.5 * (grad + grad.T))
        w = 0.5 * (grad - grad.T)
        bases = (s, s @ w - w @ s, _deviatoric(s @ s))
        i1 = float(np.tanh(np.trace(s @ s) / 2.0))
        i2 = float(np.tanh(np.trace(w @ w) / 2.0))
        g_vals = [gk(i1, i2) if callable(gk) else float(gk) for gk in g]
        b = sum(gv * base for gv, base in zip(g_vals, bases))
        k = float(rng.uniform(0.5, 2.0))
        tau = k * b
        pk = -float(np.sum(tau * grad))
        out.append(
            TurbulenceSample(
                i1=i1,
                i2=i2,
                bases=bases,
                target_b=b,
                k=k,
                y=float(rng.uniform(0.01, 1.0)),
                grad_u=grad,
                pk_ref=pk,
            )
        )
    return tuple(out)


def turb_flatten(samples: Sequence[TurbulenceSample]) -> Dataset:
    """Regression view: one row per (sample, selected entry).

    Columns are the squashed invariants plus the leading base's entry at
    that tensor slot; the target is the matching anisotropy entry. Fitting
    a program of the shape g(i1, i2)*t1 on these rows minimises exactly the
    selected-entry reconstruction error of a single-base closure.
    """
    rows = []
    targets = []
    for s in samples:
        for i, j in OMEGA:
            rows.append((s.i1, s.i2, float(s.bases[0][i, j])))
            targets.append(float(s.target_b[i, j]))
    return Dataset(
        X=np.asarray(rows, dtype=float),
        y=np.asarray(targets, dtype=float),
        variables=("i1", "i2", "t1"),
    )


def turb_reconstruct(sample: TurbulenceSample, g_values: Sequence[float]) -> np.ndarray:
    """Predicted anisotropy tensor from per-base scalar weights."""
    if len(g_values) != 3:
        raise ValueError("expected one weight per tensor base")
    return sum(float(gv) * base for gv, base in zip(g_values, sample.bases))


def _parse_g_expressions(exprs) -> list:
    if isinstance(exprs, str):
        exprs = exprs.split(";")
    exprs = [e.strip() for e in exprs]
    if len(exprs) != 3:
        raise ValueError("expected three ';'-separated expressions, one per base")
    skeletons = [parse(e, variables=("i1", "i2")) for e in exprs]
    for sk in skeletons:
        if sk.coeff_count:
            raise ValueError(f"unfitted placeholders in {sk.text!r}; inline the constants")
    return skeletons


def turb_selected_mse(samples: Sequence[TurbulenceSample], exprs) -> float:
    """Reconstruction MSE over the selected tensor entries.

    ``exprs`` gives the three base weights as closed-form expressions in
    (i1, i2), either ';'-joined in one string or as a sequence of three.
    The score averages squared error over every sample and every entry in
    ``OMEGA``.
    """
    skeletons = _parse_g_expressions(exprs)
    i1 = np.array([s.i1 for s in samples])
    i2 = np.array([s.i2 for s in samples])
    env = {"i1": i1, "i2": i2}
    g_rows = [
        np.broadcast_to(np.asarray(eval_node(sk.ast, env, []), dtype=float), i1.shape)
        for sk in skeletons
    ]
    total = 0.0
    for idx, s in enumerate(samples):
        b_pred = turb_reconstruct(s, [g[idx] for g in g_rows])
        for i, j in OMEGA:
            diff = float(b_pred[i, j] - s.target_b[i, j])
            total += diff * diff
    return total / (len(samples) * len(OMEGA))


@dataclass(frozen=True)
class _TurbConstraint:
    name: str
    required_fields: tuple[str, ...]
    fn: Callable[[dict], float]

    def evaluate(self, ctx: dict) -> float:
        return self.fn(ctx)


def turbulence_constraints() -> list[_TurbConstraint]:
    """The four physical penalties, wrapped for the search loop.

    Realizability acts on k*(b + I/3), which is positive semidefinite
    exactly when the full Reynolds stress is; the other penalties act on
    the deviatoric part k*b, where the isotropic shift would only add a
    constant floor that no prediction could remove.
    """
    return [
        _TurbConstraint(
            "realizability", ("taus_shifted",), lambda c: turb_realizability(c["taus_shifted"])
        ),
        _TurbConstraint(
            "wall_decay", ("taus", "ys", "y0"), lambda c: turb_wall_decay(c["taus"], c["ys"], c["y0"])
        ),
        _TurbConstraint(
            "asymptotic_slope",
            ("tau_xy", "y_plus"),
            lambda c: turb_asymptotic_slope(c["tau_xy"], c["y_plus"]),
        ),
        _TurbConstraint(
            "energy_consistency",
            ("taus", "grad_us", "pk_ref"),
            lambda c: turb_energy_consistency(c["taus"], c["grad_us"], c["pk_ref"]),
        ),
    ]


def turbulence_context_builder(samples: Sequence[TurbulenceSample]) -> Callable:
    """Builds the constraint context for candidates on the flattened view.

    Predicted entries fill their slots in each sample's anisotropy tensor
    (symmetrically); entries outside the selected set keep their reference
    values, since the flattened regression never models them.
    """
    samples = tuple(samples)

    def build(skeleton, coeffs, dataset: Dataset) -> dict:
        pred = predict_on(skeleton, np.asarray(coeffs), dataset.X, dataset.variables)
        if not np.all(np.isfinite(pred)):
            return {}
        taus = []
        for idx, s in enumerate(samples):
            b_pred = np.array(s.target_b, dtype=float)
            for slot, (i, j) in enumerate(OMEGA):
                value = float(pred[idx * len(OMEGA) + slot])
                b_pred[i, j] = value
                b_pred[j, i] = value
            taus.append(s.k * b_pred)
        ys = np.array([s.y for s in samples])
        ctx = {
            "taus": taus,
            "taus_shifted": [tau + (s.k / 3.0) * np.eye(3) for tau, s in zip(taus, samples)],
            "ys": ys,
            "y0": 0.02 * float(ys.max()),
            "tau_xy": np.array([tau[0, 1] for tau in taus]),
        }
        if all(s.y_plus is not None for s in samples):
            ctx["y_plus"] = np.array([s.y_plus for s in samples])
        if all(s.grad_u is not None for s in samples) and all(
            s.pk_ref is not None for s in samples
        ):
            ctx["grad_us"] = [s.grad_u for s in samples]
            ctx["pk_ref"] = np.array([s.pk_ref for s in samples])
        return ctx

    return build


def make_turbulence_task(n: int = 40, seed: int = 0) -> TaskSpec:
    """Synthetic closure with an invariant-dependent leading weight."""
    samples = make_turbulence_samples(n, seed, g=(lambda i1, i2: -0.3 + 0.2 * i1, 0.0, 0.0))
    return TaskSpec(
        name="turbulence",
        dataset=turb_flatten(samples),
        domain_constraints=tuple(turbulence_constraints()),
        domain_context_builder=turbulence_context_builder(samples),
        samples=samples,
        notes="recover g1(i1, i2) = -0.3 + 0.2*i1; programs like (c0 + c1*i1)*t1 fit it",
    )


# ---------------------------------------------------------------------------
# CSV loaders

_TENSOR_SLOTS = ("xx", "xy", "xz", "yy", "yz", "zz")


def load_csv_task(path: str | Path) -> TaskSpec:
    """Generic table: header row names the columns, last column is the target."""
    path = Path(path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = list(data.dtype.names or ())
    if len(names) < 2:
        raise ValueError("need at least one input column and one target column")
    columns = np.column_stack([np.asarray(data[n], dtype=float) for n in names])
    keep = np.all(np.isfinite(columns), axis=1)
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        log.warning("%s: dropping %d rows with missing values", path.name, dropped)
    columns = columns[keep]
    return TaskSpec(
        name=path.stem,
        dataset=Dataset(X=columns[:, :-1], y=columns[:, -1], variables=tuple(names[:-1])),
        notes=f"loaded from {path.name}; target column {names[-1]!r}",
    )


def _sym_from_row(row, prefix: str) -> np.ndarray:
    vals = {slot: float(row[f"{prefix}_{slot}"]) for slot in _TENSOR_SLOTS}
    return np.array(
        [
            [vals["xx"], vals["xy"], vals["xz"]],
            [vals["xy"], vals["yy"], vals["yz"]],
            [vals["xz"], vals["yz"], vals["zz"]],
        ]
    )


def load_turbulence_csv(path: str | Path) -> tuple[TurbulenceSample, ...]:
    """Read flow samples from a CSV of per-location tensors.

    Required columns: raw invariants ``i1, i2`` (squashed on load with
    tanh(value / 2)), the scalars ``k, y``, and six entries (xx, xy, xz,
    yy, yz, zz) for each of ``t1, t2, t3, b``. Optional: ``y_plus``.
    """
    path = Path(path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    names = set(data.dtype.names or ())
    required = {"i1", "i2", "k", "y"} | {
        f"{p}_{slot}" for p in ("t1", "t2", "t3", "b") for slot in _TENSOR_SLOTS
    }
    missing = sorted(required - names)
    if missing:
        raise ValueError(f"{path.name}: missing columns {', '.join(missing)}")
    samples = []
    for row in data:
        samples.append(
            TurbulenceSample(
                i1=float(np.tanh(row["i1"] / 2.0)),
                i2=float(np.tanh(row["i2"] / 2.0)),
                bases=(
                    _sym_from_row(row, "t1"),
                    _sym_from_row(row, "t2"),
                    _sym_from_row(row, "t3"),
                ),
                target_b=_sym_from_row(row, "b"),
                k=float(row["k"]),
                y=float(row["y"]),
                y_plus=float(row["y_plus"]) if "y_plus" in names else None,
            )
        )
    return tuple(samples)


def write_turbulence_csv(samples: Sequence[TurbulenceSample], path: str | Path) -> None:
    """Inverse of the loader (invariants are written un-squashed)."""
    header = ["i1", "i2", "k", "y"]
    has_yplus = all(s.y_plus is not None for s in samples)
    if has_yplus:
        header.append("y_plus")
    for prefix in ("t1", "t2", "t3", "b"):
        header += [f"{prefix}_{slot}" for slot in _TENSOR_SLOTS]
    lines = [",".join(header)]
    for s in samples:
        row = [2.0 * np.arctanh(s.i1), 2.0 * np.arctanh(s.i2), s.k, s.y]
        if has_yplus:
            row.append(s.y_plus)
        for tensor in (*s.bases, s.target_b):
            row += [tensor[0, 0], tensor[0, 1], tensor[0, 2], tensor[1, 1], tensor[1, 2], tensor[2, 2]]
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# stagnation probe: how fast redundant constructions leave the sampler

_STAGNATION_ELITES = ("c0*x + c1*sin(x)", "c0*x + c1*cos(x)", "c0*x + c1*tanh(x)")
_STAGNATION_WINDOW = 5
_STAGNATION_GROUP = 8


def stagnation_break_iteration(seed: int, token_reg: bool, max_iters: int = 120) -> int:
    """Iterations until redundant spans stop dominating the samples.

    The target is y = 2x and the policy starts biased toward two-term
    programs whose second term is provably redundant (its fitted weight is
    zero, so the exclusion test flags it). Each iteration samples one group,
    applies one policy update, and records the fraction of samples carrying
    a flagged term. The run breaks when the trailing five-iteration rate
    falls to half of the opening baseline; returns ``max_iters`` when that
    never happens. Token-granular penalties are the only part of the update
    that can see which span is redundant, so this is their ablation probe.
    """
    data_rng = np.random.default_rng(zlib.crc32(b"stagnation"))
    x = data_rng.uniform(-2.0, 2.0, 160)
    dataset = Dataset(X=x[:, None], y=2.0 * x, variables=("x",))
    config = SearchConfig(seed=seed, token_reg=token_reg, max_tokens=12, restarts=2, fit_iters=40)
    rt = _Runtime(dataset, config, (), None)

    policy = GrammarPolicy(("x",), max_tokens=12, seed=seed)
    bucket = context_bucket(list(_STAGNATION_ELITES))
    for text in _STAGNATION_ELITES:
        imitation_update(policy, text, bucket, rounds=20, lr=0.25, include_eos=False)
    ref = policy.clone()
    rng = np.random.default_rng(seed)
    update_cfg = UpdateConfig(lr=0.1)

    rates: list[float] = []
    baseline = None
    for iteration in range(1, max_iters + 1):
        programs = sample_group(policy, bucket, _STAGNATION_GROUP, rng=rng)
        candidates = [evaluate_candidate(p, rt, None) for p in programs]
        batch = build_group_batch(bucket, candidates, token_reg)
        update_from_groups(policy, ref, [batch], update_cfg)
        rates.append(sum(1 for c in candidates if any(c.pure.flags)) / _STAGNATION_GROUP)
        if iteration == _STAGNATION_WINDOW:
            baseline = max(float(np.mean(rates)), 1.0 / _STAGNATION_GROUP)
        if iteration >= 2 * _STAGNATION_WINDOW:
            trailing = float(np.mean(rates[-_STAGNATION_WINDOW:]))
            if trailing <= baseline / 2.0:
                return iteration
    return max_iters


def stagnation_experiment(
    seeds: Sequence[int], max_iters: int = 120
) -> dict[str, list[int]]:
    """Break iterations per seed with token penalties on and off."""
    return {
        "on": [stagnation_break_iteration(s, token_reg=True, max_iters=max_iters) for s in seeds],
        "off": [stagnation_break_iteration(s, token_reg=False, max_iters=max_iters) for s in seeds],
    }


TASKS: dict[str, Callable[[], TaskSpec]] = {
    "oscillator1": make_oscillator1,
    "oscillator2": make_oscillator2,
    "ecoli": make_ecoli,
    "recovery": make_recovery_task,
    "turbulence": make_turbulence_task,
}
