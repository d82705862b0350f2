"""Direct solution of the convexified relaxed control problem.

Controls are piecewise constant on the grid. Gradients come from the exact
discrete adjoint of the IMEX recursion and trapezoidal cost used by
`relaxround.evolution.march`, and the problem is solved by projected
gradient descent over the product of control boxes and unit simplices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evolution.model import (
    SemilinearModel,
    Trajectory,
    _cache_for,
    evaluate_cost,
    integrate,
    march,
)
from .rounding import RelaxedControl, TimeGrid

log = logging.getLogger(__name__)


def simplex_project(v) -> np.ndarray:
    """Euclidean projection of each row of `v` onto ``{x >= 0, sum(x) = 1}``.

    Sort-based: the threshold is ``theta = (sum of the k largest - 1) / k``
    for the largest k keeping the k-th entry above it.
    """
    v = np.asarray(v, dtype=float)
    flat = v.reshape(-1, v.shape[-1])
    n = flat.shape[1]
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(flat.shape[0]), rho] / (rho + 1)
    return np.maximum(flat - theta[:, None], 0.0).reshape(v.shape)


def capped_simplex_project(v) -> np.ndarray:
    """Projection of rows onto ``{x >= 0, sum(x) <= 1}``."""
    v = np.asarray(v, dtype=float)
    clipped = np.maximum(v, 0.0)
    over = clipped.sum(axis=-1) > 1.0
    out = clipped.copy()
    if np.any(over):
        out[over] = simplex_project(v[over])
    return out


def adjoint_gradient(model: SemilinearModel, control: RelaxedControl, tol: float | None = None,
                     substeps: int | None = None):
    """Objective and its gradient with respect to every cell value.

    Exactly one of `tol` (substeps found by step doubling) or `substeps`
    should be given; the gradient is that of the fixed-step discretization.

    Returns
    -------
    value : float
    grad_omega : ndarray, shape (n_cells, n_controls)
    grad_alpha : ndarray, shape (n_cells, n_modes)
    """
    grid = control.grid
    if substeps is None:
        substeps = integrate(model, control.omega, control.alpha, grid, tol or 1e-6).substeps
    times, states, preds = march(model, control.omega, control.alpha, grid, substeps,
                                 return_predictors=True)
    traj = Trajectory(grid, times, states, substeps, float("nan"))
    value = evaluate_cost(model, traj, control.omega)
    g_om, g_al = _backward(model, control.omega, control.alpha, grid, substeps, states, preds)
    return value, g_om, g_al


def _backward(model, omega, alpha, grid, s, states, preds):
    """Reverse sweep through the CN/Heun steps.

    For one step with ``b = R z + h/2 (F(z) + F(z*))`` and
    ``z* = S^{-1}(R z + h F(z))``, an adjoint ``lam`` on ``z_{n+1}`` gives
    ``mu = S^{-T} lam`` and ``nu = S^{-T} (h/2 F_z(z*)^T mu)``; then
    ``lam_n = R^T (mu + nu) + F_z(z)^T (h/2 mu + h nu)`` plus cost terms.
    """
    cache = _cache_for(model)
    n = grid.n_cells
    m_ctl = model.n_controls
    g_om = np.zeros((n, m_ctl))
    g_al = np.zeros((n, model.n_modes))
    lam = np.array(model.phi_grad(states[-1]), dtype=float)
    for c in range(n - 1, -1, -1):
        t0 = grid.nodes[c]
        h = grid.dt[c] / s
        u, w = omega[c], alpha[c]
        for m in range(s - 1, -1, -1):
            k = c * s + m
            t = t0 + m * h
            z, z_next = states[k], states[k + 1]
            zp = preds[k] if preds is not None else z
            gz_r, gu_r = model.psi_grad(z_next, u)
            lam = lam + 0.5 * h * gz_r
            mu = cache.solve(h, lam, trans=True)
            # predictor branch, evaluated at t + h
            dz_p, du_p = model.modes_vjp(t + h, zp, u, w, mu)
            g_al[c] += 0.5 * h * (model.modes(t + h, zp, u) @ mu)
            if preds is not None:
                nu = cache.solve(h, 0.5 * h * dz_p, trans=True)
                mu_z = 0.5 * h * mu + h * nu
                back = cache.apply_explicit(h, mu + nu, trans=True)
            else:
                mu_z = 0.5 * h * mu
                back = cache.apply_explicit(h, mu, trans=True)
            dz, du = model.modes_vjp(t, z, u, w, mu_z)
            g_al[c] += model.modes(t, z, u) @ mu_z
            gz_l, gu_l = model.psi_grad(z, u)
            if m_ctl:
                g_om[c] += (np.asarray(du) + 0.5 * h * np.asarray(du_p)
                            + 0.5 * h * (np.asarray(gu_l) + np.asarray(gu_r)))
            lam = back + dz + 0.5 * h * gz_l
    return g_om, g_al


@dataclass
class RelaxedSolveResult:
    control: RelaxedControl
    trajectory: Trajectory
    objective: float
    kkt_residual: float
    iterations: int
    stalled: bool = False
    history: list = field(default_factory=list)

    @property
    def eps(self) -> float:
        """Achieved accuracy: stationarity residual plus integration accuracy."""
        acc = self.trajectory.accuracy
        return self.kkt_residual + (0.0 if np.isnan(acc) else acc)


def _kkt_x(model, om, a, g_om, g_a, dt, param, n_modes):
    """Sup-norm of ``x - P(x - grad)`` with the gradient in the L2(0, t_f) metric."""
    res = 0.0
    if om.size:
        res = float(np.max(np.abs(om - np.clip(om - g_om / dt[:, None], model.u_lower, model.u_upper))))
    if n_modes > 1:
        trial = a - g_a / dt[:, None]
        proj = capped_simplex_project(trial) if param == "eliminate" else simplex_project(trial)
        res = max(res, float(np.max(np.abs(a - proj))))
    return res


def solve_relaxed(model: SemilinearModel, grid: TimeGrid, start: RelaxedControl | None = None, *,
                  tol_kkt: float = 1e-6, max_iters: int = 500, tol: float = 1e-6,
                  substeps: int | None = None, armijo: float = 1e-4,
                  max_backtracks: int = 40, parametrization: str = "simplex") -> RelaxedSolveResult:
    """Projected gradient descent with Armijo backtracking.

    Iterates stay feasible: ``omega`` is clipped to the control box and each
    row of ``alpha`` is projected onto the unit simplex. The trial step uses
    Barzilai-Borwein lengths (one for the ``omega`` block, one for
    ``alpha``), scaled by halving until the Armijo condition
    ``J(x+) <= J(x) + armijo * grad . (x+ - x)`` holds. The gradient is taken
    in the L2(0, t_f) metric (cell gradients divided by cell widths), which
    keeps step sizes independent of the grid.

    With ``parametrization="eliminate"`` the last multiplier is carried
    implicitly as ``1 - sum(others)`` and the free ones are projected onto
    ``{x >= 0, sum(x) <= 1}``.
    """
    if parametrization not in ("simplex", "eliminate"):
        raise ValueError(f"unknown parametrization {parametrization!r}")
    if start is None:
        start = RelaxedControl(grid, np.full((grid.n_cells, model.n_modes), 1.0 / model.n_modes),
                               np.zeros((grid.n_cells, model.n_controls)))
    if start.grid != grid:
        raise ValueError("start control lives on a different grid")
    if not start.within_box(model.u_lower, model.u_upper):
        raise ValueError("start control violates the control box")
    if substeps is None:
        substeps = integrate(model, start.omega, start.alpha, grid, tol).substeps
    dt = grid.dt
    N = model.n_modes

    def to_x(om, al):
        return om.copy(), (al[:, :-1].copy() if parametrization == "eliminate" else al.copy())

    def to_alpha(a):
        if parametrization == "eliminate":
            return np.column_stack([a, 1.0 - a.sum(axis=1)])
        return a

    def grad_x(g_al):
        if parametrization == "eliminate":
            return g_al[:, :-1] - g_al[:, -1:]
        return g_al

    def proj(om, a):
        om = np.clip(om, model.u_lower, model.u_upper)
        if N == 1:
            return om, np.ones_like(a)
        return om, (capped_simplex_project(a) if parametrization == "eliminate" else simplex_project(a))

    def evaluate(om, a):
        ctl = RelaxedControl(grid, to_alpha(a), om)
        val, g_om, g_al = adjoint_gradient(model, ctl, substeps=substeps)
        return val, g_om, grad_x(g_al), ctl

    om, a = to_x(start.omega, start.alpha)
    J, g_om, g_a, ctl = evaluate(om, a)
    history = [J]
    kkt = _kkt_x(model, om, a, g_om, g_a, dt, parametrization, N)
    # separate BB lengths for the omega and alpha blocks (block-diagonal metric)
    steps = np.ones(2)
    prev = None
    iters = 0
    stalled = False
    w = dt[:, None]
    while kkt > tol_kkt and iters < max_iters:
        # L2-metric gradient
        d_om = g_om / w
        d_a = g_a / w
        if prev is not None:
            for b, (sv, yv) in enumerate(((om - prev[0], d_om - prev[2]), (a - prev[1], d_a - prev[3]))):
                sy = float(np.sum(sv * yv * w))
                ss = float(np.sum(sv * sv * w))
                if sy > 0 and ss > 0:
                    steps[b] = min(max(ss / sy, 1e-12), 1e12)
                elif ss > 0:
                    steps[b] = min(steps[b] * 4.0, 1e12)
        accepted = False
        scale = 1.0
        for _ in range(max_backtracks):
            n_om, n_a = proj(om - scale * steps[0] * d_om, a - scale * steps[1] * d_a)
            decrease = float(np.sum(g_om * (n_om - om)) + np.sum(g_a * (n_a - a)))
            if decrease >= 0:
                # projected step is not a descent direction at this size
                scale *= 0.5
                continue
            J_new, ng_om, ng_a, nctl = evaluate(n_om, n_a)
            if np.isfinite(J_new) and J_new <= J + armijo * decrease:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            stalled = True
            log.warning("line search stalled after %d iterations (kkt %.3e)", iters, kkt)
            break
        prev = (om, a, d_om, d_a)
        om, a, J, g_om, g_a, ctl = n_om, n_a, J_new, ng_om, ng_a, nctl
        iters += 1
        history.append(J)
        kkt = _kkt_x(model, om, a, g_om, g_a, dt, parametrization, N)

    traj = integrate(model, ctl.omega, ctl.alpha, grid, tol, substeps=max(1, substeps // 2))
    return RelaxedSolveResult(control=ctl, trajectory=traj, objective=evaluate_cost(model, traj, ctl.omega),
                              kkt_residual=kkt, iterations=iters, stalled=stalled, history=history)
