"""Outer relax-round-refine loops and a-priori error bounds.

`run_algorithm1` alternates: solve the relaxed problem on the current grid,
round the multipliers by sum-up rounding, integrate the rounded system,
compare costs, bisect the grid. `run_algorithm2` rounds with the
budget-constrained min-max problem instead.

The relaxed solver only returns stationary points, so each iteration uses
whatever it found as the relaxed reference (no global optimality claim).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import __version__
from .combinatorial import (
    SwitchBudget,
    budget_violations,
    cell_averages,
    solve_minmax,
    switch_counts,
)
from .evolution.model import SemilinearModel, Trajectory, evaluate_cost, fixed_trajectory, integrate
from .relaxed import RelaxedSolveResult, solve_relaxed
from .rounding import (
    BinaryControl,
    DeviationReport,
    RelaxedControl,
    TimeGrid,
    accumulated_deviation,
    refine_bisect,
    sur_round,
)

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("step4", "step7", "step4'", "step7'", "cap")


def halving_schedule(eps0: float) -> Callable[[int], float]:
    """``k -> eps0 / 2**k``, tied to grid bisection."""
    def schedule(k):
        return eps0 / 2.0 ** k
    return schedule


@dataclass
class AlgorithmConfig:
    epsilon: float
    initial_grid: TimeGrid
    k_max: int = 2
    mode: str = "sur"
    budget: SwitchBudget | None = None
    eps0: float = 1e-2
    eps_schedule: Callable[[int], float] | None = None
    max_iters: int = 300
    integration_tol: float | None = None
    warm_start: bool = True
    node_limit: int = 2_000_000
    parametrization: str = "simplex"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if self.mode not in ("sur", "minmax"):
            raise ValueError(f"mode must be 'sur' or 'minmax', got {self.mode!r}")
        if self.eps_schedule is None:
            self.eps_schedule = halving_schedule(self.eps0)
        vals = [self.eps_schedule(k) for k in range(self.k_max + 2)]
        if any(v < 0 for v in vals) or any(b > a for a, b in zip(vals, vals[1:])):
            raise ValueError("eps_schedule must be non-negative and non-increasing")


@dataclass
class RunRecord:
    k: int
    dt_max: float
    eps_k: float
    J_rel: float
    J: float
    deviation: DeviationReport
    switches: dict
    j_sub: float | None = None
    minmax_optimal: bool | None = None
    term_reason: str = ""
    relaxed_iterations: int = 0
    kkt_residual: float = float("nan")


@dataclass
class MixedIntegerSolution:
    omega: np.ndarray
    beta: BinaryControl
    trajectory: Trajectory
    J: float
    relaxed: RelaxedSolveResult
    relaxed_trajectory: Trajectory


@dataclass
class RunResult:
    solution: MixedIntegerSolution
    history: list = field(default_factory=list)

    def __iter__(self):
        yield self.solution
        yield self.history


def _common_evaluation(model, relaxed: RelaxedSolveResult, beta: BinaryControl, tol):
    """Integrate relaxed and rounded systems with the same substep count."""
    ctl = relaxed.control
    z_int = integrate(model, ctl.omega, beta.beta, ctl.grid, tol)
    y_rel = relaxed.trajectory
    s = max(z_int.substeps, y_rel.substeps)
    if y_rel.substeps != s:
        y_rel = replace(fixed_trajectory(model, ctl.omega, ctl.alpha, ctl.grid, s),
                        accuracy=y_rel.accuracy)
    if z_int.substeps != s:
        z_int = replace(fixed_trajectory(model, ctl.omega, beta.beta, ctl.grid, s),
                        accuracy=z_int.accuracy)
    return y_rel, z_int


def _run(model: SemilinearModel, config: AlgorithmConfig, minmax: bool) -> RunResult:
    budget = config.budget if config.budget is not None else SwitchBudget()
    budget.check_modes(model.n_modes)
    grid = config.initial_grid
    start = None
    history: list[RunRecord] = []
    prev_jsub = None
    k = 0
    while True:
        target = config.eps_schedule(k)
        int_tol = config.integration_tol if config.integration_tol is not None else max(target, 1e-12)
        if start is not None and config.warm_start:
            start = start.inject(grid)
        else:
            start = None
        relaxed = solve_relaxed(model, grid, start, tol_kkt=target, max_iters=config.max_iters,
                                tol=int_tol, parametrization=config.parametrization)
        ctl = relaxed.control
        eps_k = relaxed.eps
        # step 4 / 4'
        if ctl.is_binary() and eps_k <= config.epsilon:
            beta = BinaryControl(grid, np.rint(ctl.alpha))
            if not minmax or not budget_violations(beta, budget):
                J_rel = relaxed.objective
                rec = RunRecord(k, grid.dt_max, eps_k, J_rel, J_rel, accumulated_deviation(ctl, beta),
                                switch_counts(beta), term_reason="step4'" if minmax else "step4",
                                relaxed_iterations=relaxed.iterations, kkt_residual=relaxed.kkt_residual)
                history.append(rec)
                sol = MixedIntegerSolution(ctl.omega, beta, relaxed.trajectory, J_rel, relaxed,
                                           relaxed.trajectory)
                return RunResult(sol, history)
        # step 5 / 5'
        j_sub = None
        mm_opt = None
        if minmax:
            mm = solve_minmax(cell_averages(ctl), grid, budget, node_limit=config.node_limit)
            beta = mm.to_binary(grid)
            j_sub, mm_opt = mm.objective, mm.optimal
            if not mm.optimal:
                log.warning("min-max search hit its node limit at k=%d; using incumbent", k)
        else:
            beta = sur_round(ctl)
        # step 6
        y_rel, z_int = _common_evaluation(model, relaxed, beta, int_tol)
        J_rel = evaluate_cost(model, y_rel, ctl.omega)
        J = evaluate_cost(model, z_int, ctl.omega)
        rec = RunRecord(k, grid.dt_max, eps_k, J_rel, J, accumulated_deviation(ctl, beta),
                        switch_counts(beta), j_sub=j_sub, minmax_optimal=mm_opt,
                        relaxed_iterations=relaxed.iterations, kkt_residual=relaxed.kkt_residual)
        history.append(rec)
        log.info("k=%d dt=%.4g J_rel=%.6g J=%.6g eps_k=%.3g", k, grid.dt_max, J_rel, J, eps_k)
        sol = MixedIntegerSolution(ctl.omega, beta, z_int, J, relaxed, y_rel)
        # step 7 / 7'
        if minmax:
            if prev_jsub is not None and abs(j_sub - prev_jsub) < config.epsilon:
                rec.term_reason = "step7'"
                return RunResult(sol, history)
            if k >= config.k_max:
                rec.term_reason = "cap"
                return RunResult(sol, history)
            prev_jsub = j_sub
        else:
            if abs(J_rel - J) <= config.epsilon / 2 and eps_k <= config.epsilon / 2:
                rec.term_reason = "step7"
                return RunResult(sol, history)
            if k >= config.k_max:
                rec.term_reason = "cap"
                return RunResult(sol, history)
        # step 8
        grid = refine_bisect(grid)
        start = ctl
        k += 1


def run_algorithm1(model: SemilinearModel, config: AlgorithmConfig) -> RunResult:
    """Relaxation with sum-up rounding. Returns ``RunResult(solution, history)``."""
    if config.mode != "sur":
        raise ValueError("run_algorithm1 requires mode='sur'")
    return _run(model, config, minmax=False)


def run_algorithm2(model: SemilinearModel, config: AlgorithmConfig) -> RunResult:
    """Relaxation with budget-constrained min-max rounding."""
    if config.mode != "minmax":
        raise ValueError("run_algorithm2 requires mode='minmax'")
    if config.budget is None:
        raise ValueError("run_algorithm2 requires a switch budget")
    return _run(model, config, minmax=True)


def relative_errors(history) -> list[float]:
    """``|J_rel^final - J^k| / |J_rel^final|`` for each record."""
    ref = history[-1].J_rel
    return [abs(ref - r.J) / abs(ref) if ref else float("inf") for r in history]


HISTORY_COLUMNS = ["k", "dt_max", "eps_k", "J_rel", "J_int", "rel_error", "term_reason"]


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec, err in zip(history, relative_errors(history)):
            writer.writerow([rec.k, repr(rec.dt_max), repr(rec.eps_k), repr(rec.J_rel),
                             repr(rec.J), repr(err), rec.term_reason])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["k"] = int(row["k"])
        for key in ("dt_max", "eps_k", "J_rel", "J_int", "rel_error"):
            row[key] = float(row[key])
    return rows


def write_manifest(path, config: AlgorithmConfig, model: SemilinearModel, history, extra=None):
    budget = config.budget or {}
    manifest = {
        "model": model.name,
        "model_params": model.params,
        "config": {
            "epsilon": config.epsilon,
            "k_max": config.k_max,
            "mode": config.mode,
            "eps0": config.eps0,
            "max_iters": config.max_iters,
            "integration_tol": config.integration_tol,
            "warm_start": config.warm_start,
            "initial_grid": [float(t) for t in config.initial_grid.nodes],
            "budget": [[i + 1, j + 1, K] for (i, j), K in sorted(budget.items())],
        },
        "history": [
            {
                "k": r.k, "dt_max": r.dt_max, "eps_k": r.eps_k, "J_rel": r.J_rel, "J": r.J,
                "deviation": r.deviation.overall_max, "deviation_bound": r.deviation.bound,
                "switches": {f"{i + 1}->{j + 1}": c for (i, j), c in sorted(r.switches.items())},
                "j_sub": r.j_sub, "term_reason": r.term_reason,
                "relaxed_iterations": r.relaxed_iterations, "kkt_residual": r.kkt_residual,
            }
            for r in history
        ],
        "versions": {
            "relaxround": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_strict_json(manifest), fh, indent=2, allow_nan=False)


def _strict_json(obj):
    """Plain JSON types; non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(obj, dict):
        return {str(k): _strict_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_strict_json(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return "nan" if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- a-priori bounds --------------------------------------------------------

@dataclass(frozen=True)
class EstimateConstants:
    """Constants of the Lipschitz / growth / stability hypotheses.

    `m_i` and `c_i` are per-mode sup-norm and derivative bounds; their sums
    are `M` and `C`. `m_bar` bounds the semigroup norm on ``[0, t_f]``.
    """

    eta: float
    xi: float
    L: float
    m_i: tuple
    c_i: tuple
    C_J: float
    m_bar: float
    t_f: float

    def __post_init__(self):
        vals = [self.eta, self.xi, self.L, self.C_J, self.m_bar, self.t_f, *self.m_i, *self.c_i]
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("estimate constants must be finite and non-negative")

    @property
    def M(self) -> float:
        return float(sum(self.m_i))

    @property
    def C(self) -> float:
        return float(sum(self.c_i))

    def constants(self, weak: bool = False) -> tuple[float, float, float, float]:
        """``(C1, C2, C3, C4)``.

        With `weak` the stationary-point variant is used: ``C1 = 2`` and no
        stability term.
        """
        growth = math.exp(self.t_f * self.m_bar * self.L)
        if weak:
            c1 = 2.0
        else:
            c1 = self.C_J * (self.M + 1) * (1 + self.eta + self.xi) * growth + 1
        c2 = (self.M + self.t_f * self.C) * growth
        lip = self.eta + self.t_f * self.xi
        c3 = lip * c1 + (0.0 if weak else self.t_f * self.xi * self.C_J)
        c4 = lip * c2
        return c1, c2, c3, c4


def bound_theorem23(c: EstimateConstants, eps_k: float, dt_k: float, n_modes: int,
                    weak: bool = False) -> tuple[float, float]:
    """State and cost deviation bounds after sum-up rounding.

    ``(C1 eps + C2 (N-1) dt, C3 eps + C4 (N-1) dt)``.
    """
    c1, c2, c3, c4 = c.constants(weak)
    r = (n_modes - 1) * dt_k
    return c1 * eps_k + c2 * r, c3 * eps_k + c4 * r


def bound_theorem31(c: EstimateConstants, eps_k: float, j_sub: float, dt_max: float,
                    weak: bool = False) -> tuple[float, float]:
    """Bounds after min-max rounding; the unobservable offset is replaced by `dt_max`."""
    c1, c2, c3, c4 = c.constants(weak)
    r = j_sub + dt_max
    return c1 * eps_k + c2 * r, c3 * eps_k + c4 * r


@dataclass(frozen=True)
class H2Check:
    holds: bool
    l_bar: np.ndarray
    c_bar: np.ndarray
    c_i: np.ndarray


def check_h2_linear(model: SemilinearModel, control: RelaxedControl, m_bar: float,
                    n_probe: int = 3) -> H2Check:
    """Estimate mode-regularity constants for state-independent modes ``g_i(t) = f_i(t, omega(t))``.

    ``l_bar[i] = max_t ||A_h g_i(t)||`` and ``c_bar[i] = max_t ||g_i'(t)||``
    (difference quotients at interior points of each cell, where the
    piecewise-constant control does not jump). Returns
    ``c_i = m_bar * (c_bar + l_bar)``.
    """
    if model.state_dependent:
        raise ValueError("modes depend on the state; the linear-system criterion does not apply")
    if m_bar < 0:
        raise ValueError("m_bar must be non-negative")
    grid = control.grid
    A = model.linear_op
    w = model.mass_weights
    zero = np.zeros(model.dim)
    N = model.n_modes
    l_bar = np.zeros(N)
    c_bar = np.zeros(N)

    def wnorm(v):
        return np.sqrt(np.sum(w * v * v, axis=-1))

    for c in range(grid.n_cells):
        t0, t1 = grid.nodes[c], grid.nodes[c + 1]
        probes = t0 + (t1 - t0) * (np.arange(1, n_probe + 1) / (n_probe + 1))
        vals = [model.modes(t, zero, control.omega[c]) for t in probes]
        for g in vals:
            l_bar = np.maximum(l_bar, wnorm(np.asarray((A @ g.T).T)))
        for (ta, ga), (tb, gb) in zip(zip(probes, vals), zip(probes[1:], vals[1:])):
            c_bar = np.maximum(c_bar, wnorm((gb - ga) / (tb - ta)))
    c_i = m_bar * (c_bar + l_bar)
    holds = bool(np.all(np.isfinite(c_i)))
    return H2Check(holds=holds, l_bar=l_bar, c_bar=c_bar, c_i=c_i)
