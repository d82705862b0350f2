"""Self-check suites with measured values, used by ``relaxround verify``.

Each suite returns a list of `CheckResult`; a suite passes when all of its
checks do.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .combinatorial import SwitchBudget, brute_force_minmax, solve_minmax
from .rounding import RelaxedControl, TimeGrid, accumulated_deviation, sur_round


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict

    def to_dict(self):
        return asdict(self)


def random_grid(rng, n_cells, t_final=None):
    widths = rng.uniform(0.1, 1.0, n_cells)
    if t_final is not None:
        widths *= t_final / widths.sum()
    return TimeGrid(np.concatenate([[0.0], np.cumsum(widths)]))


def random_simplex(rng, n, N):
    # mix of interior points and near-vertex rows
    a = rng.dirichlet(np.full(N, rng.choice([0.2, 1.0, 5.0])), size=n)
    return a


def check_rounding(seed=0, n_instances=1000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = -math.inf
    failures = 0
    for _ in range(n_instances):
        N = int(rng.integers(1, 7))
        n = int(rng.integers(1, 201))
        grid = random_grid(rng, n)
        ctl = RelaxedControl(grid, random_simplex(rng, n, N))
        beta = sur_round(ctl)
        rep = accumulated_deviation(ctl, beta)
        sos1 = np.all(beta.beta.sum(axis=1) == 1)
        slack = rep.overall_max - (rep.bound + 1e-10 * grid.t_final)
        worst = max(worst, slack)
        failures += int(not (sos1 and slack <= 0))
    elapsed = time.perf_counter() - t0
    return [CheckResult("sur_bound", failures == 0 and elapsed < 5.0,
                        {"instances": n_instances, "failures": failures,
                         "worst_slack": worst, "seconds": elapsed})]


def random_budget(rng, N):
    budget = SwitchBudget()
    for i in range(N):
        for j in range(N):
            if i != j and rng.random() < 0.5:
                budget[(i, j)] = int(rng.integers(0, 3))
    return budget


def check_minmax(seed=0, n_instances=200) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(n_instances):
        N = int(rng.integers(1, 4))
        n = int(rng.integers(1, 9))
        grid = random_grid(rng, n)
        q = random_simplex(rng, n, N)
        budget = random_budget(rng, N)
        a = solve_minmax(q, grid, budget)
        b = brute_force_minmax(q, grid, budget)
        if not (a.optimal and a.objective == b.objective):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    return [CheckResult("minmax_oracle", mismatches == 0 and elapsed < 60.0,
                        {"instances": n_instances, "mismatches": mismatches, "seconds": elapsed})]


def fd_relative_error(model, control, substeps, rng, n_probe=None, step=1e-6):
    """Max relative error of adjoint gradient entries against central differences."""
    from .relaxed import adjoint_gradient
    from .evolution.model import evaluate_cost, fixed_trajectory

    _, g_om, g_al = adjoint_gradient(model, control, substeps=substeps)

    def J(om, al):
        tr = fixed_trajectory(model, om, al, control.grid, substeps)
        return evaluate_cost(model, tr, om)

    entries = [("a", c, i) for c in range(control.grid.n_cells) for i in range(model.n_modes)]
    entries += [("u", c, i) for c in range(control.grid.n_cells) for i in range(model.n_controls)]
    if n_probe is not None and n_probe < len(entries):
        entries = [entries[k] for k in rng.choice(len(entries), n_probe, replace=False)]
    worst = 0.0
    scale = max(np.max(np.abs(g_al)), np.max(np.abs(g_om)) if g_om.size else 0.0)
    for kind, c, i in entries:
        om = control.omega.copy()
        al = control.alpha.copy()
        arr, g = (al, g_al) if kind == "a" else (om, g_om)
        base = arr[c, i]
        h = step * max(1.0, abs(base))
        arr[c, i] = base + h
        jp = J(om, al)
        arr[c, i] = base - h
        jm = J(om, al)
        fd = (jp - jm) / (2 * h)
        # relative to the entry, floored by the gradient scale to avoid 0/0
        denom = max(abs(fd), abs(g[c, i]), 1e-3 * scale)
        worst = max(worst, abs(fd - g[c, i]) / denom)
    return worst


def check_gradient(seed=0, n_instances=20, n_probe=6) -> list[CheckResult]:
    from .evolution import build_heat2d, build_lotka_volterra

    rng = np.random.default_rng(seed)
    out = []
    t0 = time.perf_counter()
    heat = build_heat2d(nx=10, ny=20)
    lv = build_lotka_volterra(h=0.15)
    # the reaction term is explicit, so LV needs substeps short enough to stay stable
    for name, model, t_f, h_max in (("heat", heat, heat.t_final, math.inf),
                                    ("lotka", lv, lv.t_final, 0.25)):
        worst = 0.0
        for _ in range(n_instances):
            n = int(rng.integers(2, 5))
            grid = random_grid(rng, n, t_final=t_f)
            alpha = random_simplex(rng, n, model.n_modes)
            omega = rng.uniform(-5, 5, (n, model.n_controls))
            ctl = RelaxedControl(grid, alpha, omega)
            substeps = max(4, math.ceil(grid.dt_max / h_max))
            worst = max(worst, fd_relative_error(model, ctl, substeps, rng, n_probe=n_probe))
        out.append(CheckResult(f"gradient_{name}", worst <= 1e-5,
                               {"instances": n_instances, "max_rel_error": float(worst),
                                "state_dim": model.dim}))
    elapsed = time.perf_counter() - t0
    for r in out:
        r.measured["seconds"] = elapsed
        r.passed = r.passed and elapsed < 120.0
    return out


def check_integrator() -> list[CheckResult]:
    import scipy.sparse as sp
    from .evolution import build_heat2d, build_lotka_volterra, fixed_trajectory
    from .evolution.model import SemilinearModel

    decay = SemilinearModel(
        linear_op=sp.csc_matrix(np.array([[-1.0]])), z0=np.array([1.0]), mass_weights=np.ones(1),
        n_modes=1, modes=lambda t, z, u: np.zeros((1, 1)), phi=lambda z: 0.0,
        phi_grad=lambda z: np.zeros(1), psi=lambda z, u: 0.0,
        psi_grad=lambda z, u: (np.zeros(1), np.zeros(0)), state_dependent=False, name="decay")
    grid = TimeGrid.uniform(1.0, 1)
    w = np.ones((1, 1))
    om = np.zeros((1, 0))
    errs = [abs(fixed_trajectory(decay, om, w, grid, s).final_state[0] - math.exp(-1.0))
            for s in (8, 16, 32, 64)]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    order = float(np.mean(orders))
    out = [CheckResult("integrator_order", 1.7 <= order <= 2.2, {"order": order, "errors": errs})]

    heat = build_heat2d()
    hg = TimeGrid.uniform(heat.t_final, 8)
    tr = fixed_trajectory(heat, np.zeros((8, 1)), np.full((8, heat.n_modes), 1 / heat.n_modes), hg, 8)
    norms = tr.norms(heat)
    out.append(CheckResult("heat_l2_decay", bool(np.all(np.diff(norms) < 0)),
                           {"initial": float(norms[0]), "final": float(norms[-1])}))

    lv = build_lotka_volterra()
    pure = SemilinearModel(
        linear_op=lv.linear_op, z0=lv.z0, mass_weights=lv.mass_weights, n_modes=1,
        modes=lambda t, z, u: np.zeros((1, z.size)), phi=lv.phi, phi_grad=lv.phi_grad,
        psi=lv.psi, psi_grad=lv.psi_grad, state_dependent=False, name="diffusion_only")
    lg = TimeGrid.uniform(lv.t_final, 8)
    tr = fixed_trajectory(pure, np.zeros((8, 0)), np.ones((8, 1)), lg, 8)
    n = lv.n_cells
    mass = np.column_stack([tr.states[:, :n] @ lv.mass_weights[:n], tr.states[:, n:] @ lv.mass_weights[n:]])
    drift = float(np.max(np.abs(mass - mass[0])))
    out.append(CheckResult("lotka_mass_conservation", drift <= 1e-10, {"max_drift": drift}))
    return out


@dataclass(frozen=True)
class AffineFamily:
    """Scalar ``y' = sum_i w_i (a_i y + b_i)``, ``y(0) = y0`` on ``[0, t_f]``.

    Solved in closed form cell by cell, so measured errors carry no
    integration error. `constants` returns valid a-priori constants: with
    ``|y| <= Y`` on the horizon, ``m_i = |a_i| Y + |b_i|``, ``L = max |a_i|``
    and ``c_i = |a_i| max_j m_j`` (since ``|y'| <= max_j m_j``).
    """

    a: tuple = (-0.5, 0.3)
    b: tuple = (1.0, -1.0)
    y0: float = 0.5
    t_f: float = 1.0

    def y_bound(self) -> float:
        A, B = max(map(abs, self.a)), max(map(abs, self.b))
        return (abs(self.y0) + B * self.t_f) * math.exp(A * self.t_f)

    def constants(self, eta=1.0, xi=1.0, C_J=1.0):
        from .driver import EstimateConstants
        Y = self.y_bound()
        m_i = tuple(abs(a) * Y + abs(b) for a, b in zip(self.a, self.b))
        c_i = tuple(abs(a) * max(m_i) for a in self.a)
        return EstimateConstants(eta=eta, xi=xi, L=max(map(abs, self.a)), m_i=m_i, c_i=c_i,
                                 C_J=C_J, m_bar=1.0, t_f=self.t_f)

    def solve(self, grid: TimeGrid, weights, per_cell: int = 40):
        """Times and states sampled `per_cell` times inside every cell (plus nodes)."""
        weights = np.asarray(weights, dtype=float)
        a = weights @ np.asarray(self.a)
        b = weights @ np.asarray(self.b)
        ts, ys = [0.0], [self.y0]
        y = self.y0
        for c in range(grid.n_cells):
            tau = grid.dt[c] * np.arange(1, per_cell + 1) / per_cell
            if abs(a[c]) < 1e-14:
                seg = y + b[c] * tau
            else:
                r = b[c] / a[c]
                seg = (y + r) * np.exp(a[c] * tau) - r
            ts.extend(grid.nodes[c] + tau)
            ys.extend(seg)
            y = seg[-1]
        return np.asarray(ts), np.asarray(ys)

    def relaxed(self, grid: TimeGrid) -> RelaxedControl:
        """Smooth multiplier ``w_1(t) = 0.5 + 0.4 sin(7 t)`` sampled at cell midpoints."""
        mid = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
        w1 = 0.5 + 0.4 * np.sin(7.0 * mid)
        return RelaxedControl(grid, np.column_stack([w1, 1.0 - w1]))

    def rounding_error(self, grid: TimeGrid) -> float:
        ctl = self.relaxed(grid)
        _, y = self.solve(grid, ctl.alpha)
        _, z = self.solve(grid, sur_round(ctl).beta)
        return float(np.max(np.abs(y - z)))


def check_estimate(seed=0, n_grids=50) -> list[CheckResult]:
    from .driver import bound_theorem23
    fam = AffineFamily()
    consts = fam.constants()
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for _ in range(n_grids):
        grid = random_grid(rng, int(rng.integers(4, 200)), t_final=fam.t_f)
        bound, _ = bound_theorem23(consts, 0.0, grid.dt_max, 2)
        worst_ratio = max(worst_ratio, fam.rounding_error(grid) / bound)
    ns = 2 ** np.arange(3, 11)
    dts = fam.t_f / ns
    errs = [fam.rounding_error(TimeGrid.uniform(fam.t_f, int(n))) for n in ns]
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return [
        CheckResult("estimate_state_bound", worst_ratio <= 1.0,
                    {"grids": n_grids, "max_error_over_bound": worst_ratio}),
        CheckResult("estimate_dt_slope", abs(slope - 1.0) <= 0.15,
                    {"slope": slope, "dt": dts.tolist(), "errors": errs}),
    ]


SUITES = {
    "rounding": check_rounding,
    "minmax": check_minmax,
    "gradient": check_gradient,
    "integrator": check_integrator,
    "estimate": check_estimate,
}
