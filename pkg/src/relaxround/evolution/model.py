"""Semidiscretized semilinear models and their time integration.

A model represents ``z' = A_h z + sum_i w_i(t) f_i(t, z, u(t))`` where the
weights ``w`` are either relaxed multipliers or one-hot mode selections.
Time stepping is an IMEX theta scheme with theta = 1/2: Crank-Nicolson for
``A_h`` and an explicit trapezoidal (Heun) evaluation of the mode term F,

    S = I - h/2 A_h,   R = I + h/2 A_h
    S z*      = R z_n + h F(t_n, z_n)
    S z_{n+1} = R z_n + h/2 (F(t_n, z_n) + F(t_{n+1}, z*))

which is second order in h. When F does not depend on the state the
predictor solve is skipped (it cannot change the result).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..rounding import TimeGrid


class IntegrationError(RuntimeError):
    """Substep refinement failed to reach the requested accuracy."""


def _zero_grad_u(n_controls):
    def grad(t, z, u, w, mu):
        return np.zeros_like(z), np.zeros(n_controls)
    return grad


@dataclass(frozen=True, eq=False)
class SemilinearModel:
    """Contract for a semidiscretized control system.

    Parameters
    ----------
    linear_op : sparse matrix
        Discretized generator ``A_h``.
    z0 : ndarray
        Initial state.
    mass_weights : ndarray
        Quadrature weights; ``sum(w * z**2)`` is the squared state norm.
    n_modes : int
        Number of discrete modes N.
    modes : callable
        ``modes(t, z, u) -> (N, dim)`` array of the mode right-hand sides.
    modes_vjp : callable
        ``modes_vjp(t, z, u, w, mu) -> (dz, du)``: gradients of
        ``mu . sum_i w_i f_i(t, z, u)`` with respect to ``z`` and ``u``.
    phi, phi_grad : callable
        Terminal cost and its gradient.
    psi, psi_grad : callable
        Running cost ``psi(z, u)`` and ``psi_grad(z, u) -> (dz, du)``.
    """

    linear_op: sp.spmatrix
    z0: np.ndarray
    mass_weights: np.ndarray
    n_modes: int
    modes: Callable
    phi: Callable
    phi_grad: Callable
    psi: Callable
    psi_grad: Callable
    n_controls: int = 0
    modes_vjp: Callable | None = None
    u_lower: np.ndarray | None = None
    u_upper: np.ndarray | None = None
    state_dependent: bool = True
    t_final: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        A = sp.csc_matrix(self.linear_op, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError("linear_op must be square")
        object.__setattr__(self, "linear_op", A)
        z0 = np.array(self.z0, dtype=float).ravel()
        if z0.size != A.shape[0]:
            raise ValueError(f"z0 has size {z0.size}, operator has dimension {A.shape[0]}")
        z0.setflags(write=False)
        object.__setattr__(self, "z0", z0)
        w = np.broadcast_to(np.asarray(self.mass_weights, float), z0.shape).copy()
        if np.any(w <= 0):
            raise ValueError("mass weights must be strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "mass_weights", w)
        m = self.n_controls
        lo = np.full(m, -np.inf) if self.u_lower is None else np.broadcast_to(np.asarray(self.u_lower, float), (m,)).copy()
        hi = np.full(m, np.inf) if self.u_upper is None else np.broadcast_to(np.asarray(self.u_upper, float), (m,)).copy()
        if np.any(lo > hi):
            raise ValueError("empty control box")
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)
        if self.modes_vjp is None:
            object.__setattr__(self, "modes_vjp", _zero_grad_u(m))

    @property
    def dim(self) -> int:
        return self.z0.size

    def norm(self, z) -> float:
        return float(np.sqrt(np.sum(self.mass_weights * np.asarray(z) ** 2)))

    def rhs(self, t, z, u, w) -> np.ndarray:
        """Mode-weighted nonlinear term ``sum_i w_i f_i(t, z, u)``."""
        return np.asarray(w, float) @ self.modes(t, z, u)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at the integration nodes; `substeps` uniform steps per control cell."""

    grid: TimeGrid
    times: np.ndarray
    states: np.ndarray
    substeps: int
    accuracy: float

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def at_grid_nodes(self) -> np.ndarray:
        return self.states[::self.substeps]

    def norms(self, model: SemilinearModel) -> np.ndarray:
        return np.sqrt(np.sum(model.mass_weights * self.states ** 2, axis=1))


@dataclass(frozen=True)
class StateConstraint:
    """Pointwise constraint ``g(z, t) >= 0`` with Lipschitz modulus ``zeta(t)``."""

    g: Callable
    zeta: Callable = lambda t: 0.0


@dataclass(frozen=True)
class ConstraintReport:
    values: np.ndarray
    minimum: float
    argmin_time: float
    violated: bool
    deviation_bound: np.ndarray | None = None


class StepperCache:
    """LU factors of ``I - h/2 A_h`` keyed by step size."""

    def __init__(self, A):
        self.A = A
        self.eye = sp.identity(A.shape[0], format="csc")
        self._lu = {}
        self.zero_op = A.nnz == 0

    def factor(self, h):
        key = float(h)
        lu = self._lu.get(key)
        if lu is None:
            try:
                lu = splu(sp.csc_matrix(self.eye - 0.5 * h * self.A))
            except RuntimeError as exc:
                raise IntegrationError(f"implicit solve failed for h={h}: {exc}") from exc
            self._lu[key] = lu
        return lu

    def solve(self, h, rhs, trans=False):
        if self.zero_op:
            return rhs
        return self.factor(h).solve(rhs, trans="T" if trans else "N")

    def apply_explicit(self, h, z, trans=False):
        if self.zero_op:
            return z
        Az = (self.A.T @ z) if trans else (self.A @ z)
        return z + 0.5 * h * Az


def _cache_for(model: SemilinearModel) -> StepperCache:
    cache = model.__dict__.get("_stepper")
    if cache is None:
        cache = StepperCache(model.linear_op)
        object.__setattr__(model, "_stepper", cache)
    return cache


def _controls(grid, omega, weights, model):
    omega = np.zeros((grid.n_cells, 0)) if omega is None else np.asarray(omega, float).reshape(grid.n_cells, -1)
    weights = np.asarray(weights, float).reshape(grid.n_cells, -1)
    if omega.shape[1] != model.n_controls:
        raise ValueError(f"omega has {omega.shape[1]} columns, model expects {model.n_controls}")
    if weights.shape[1] != model.n_modes:
        raise ValueError(f"mode weights have {weights.shape[1]} columns, model has {model.n_modes} modes")
    return omega, weights


def march(model: SemilinearModel, omega, weights, grid: TimeGrid, substeps: int,
          return_predictors: bool = False):
    """Fixed-step IMEX integration; returns ``(times, states)``.

    With `return_predictors` the Heun predictor states are returned as well
    (needed by the adjoint).
    """
    omega, weights = _controls(grid, omega, weights, model)
    cache = _cache_for(model)
    s = int(substeps)
    n_steps = grid.n_cells * s
    states = np.empty((n_steps + 1, model.dim))
    preds = np.empty((n_steps, model.dim)) if model.state_dependent else None
    times = np.empty(n_steps + 1)
    states[0] = model.z0
    times[0] = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        ok = _march_cells(model, omega, weights, grid, s, cache, states, preds, times)
    if not ok:
        raise IntegrationError("non-finite state encountered")
    if return_predictors:
        return times, states, preds
    return times, states


def _march_cells(model, omega, weights, grid, s, cache, states, preds, times):
    z = states[0].copy()
    k = 0
    for c in range(grid.n_cells):
        t0, t1 = grid.nodes[c], grid.nodes[c + 1]
        h = (t1 - t0) / s
        u, w = omega[c], weights[c]
        for m in range(s):
            t = t0 + m * h
            base = cache.apply_explicit(h, z)
            f0 = model.rhs(t, z, u, w)
            if preds is not None:
                zp = cache.solve(h, base + h * f0)
                preds[k] = zp
            else:
                zp = z
            f1 = model.rhs(t + h, zp, u, w)
            z = cache.solve(h, base + 0.5 * h * (f0 + f1))
            k += 1
            states[k] = z
            times[k] = t0 + (m + 1) * h
            if not np.all(np.isfinite(z)):
                return False
        times[k] = t1
    return True


def integrate(model: SemilinearModel, omega, weights, grid: TimeGrid, tol: float = 1e-6, *,
              substeps: int = 4, max_substeps: int = 1024) -> Trajectory:
    """Integrate with step doubling until successive solutions agree to `tol`.

    The difference ``max |z_h - z_{h/2}|`` over the shared nodes is the
    reported accuracy; the finer solution is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = max(1, int(substeps))
    coarse = _try_march(model, omega, weights, grid, s)
    while True:
        fine = _try_march(model, omega, weights, grid, 2 * s)
        if fine is None or coarse is None:
            err = np.inf
        else:
            err = float(np.max(np.abs(fine[1][::2] - coarse[1])))
        if err <= tol:
            return Trajectory(grid, fine[0], fine[1], 2 * s, err)
        s *= 2
        if 2 * s > max_substeps:
            raise IntegrationError(
                f"step-halving estimate {err:.3e} > tol {tol:.3e} at {s} substeps per cell")
        coarse = fine


def _try_march(model, omega, weights, grid, s):
    try:
        return march(model, omega, weights, grid, s)
    except IntegrationError as exc:
        if "non-finite" in str(exc):
            return None
        raise


def fixed_trajectory(model, omega, weights, grid, substeps: int) -> Trajectory:
    """Single fixed-step solve; accuracy left undetermined (nan)."""
    times, states = march(model, omega, weights, grid, substeps)
    return Trajectory(grid, times, states, int(substeps), float("nan"))


def evaluate_cost(model: SemilinearModel, traj: Trajectory, omega=None) -> float:
    """Terminal cost plus trapezoidal quadrature of the running cost.

    Each integration step uses the control of the cell containing it at both
    of its endpoints.
    """
    grid = traj.grid
    omega = np.zeros((grid.n_cells, 0)) if omega is None else np.asarray(omega, float).reshape(grid.n_cells, -1)
    if omega.shape[1] != model.n_controls:
        raise ValueError("omega does not match the model's control dimension")
    s = traj.substeps
    if traj.states.shape[0] != grid.n_cells * s + 1:
        raise ValueError("trajectory does not match the control grid")
    total = 0.0
    for c in range(grid.n_cells):
        h = grid.dt[c] / s
        u = omega[c]
        vals = [model.psi(traj.states[c * s + m], u) for m in range(s + 1)]
        total += h * (0.5 * vals[0] + sum(vals[1:-1]) + 0.5 * vals[-1])
    return float(model.phi(traj.final_state) + total)


def check_state_constraint(traj: Trajectory, constraint: StateConstraint, *,
                           c1: float | None = None, c2: float | None = None,
                           eps_k: float = 0.0, dt_k: float = 0.0, n_modes: int = 1) -> ConstraintReport:
    """Evaluate ``g`` at every integration node.

    When `c1` and `c2` are supplied, the node-wise deviation bound
    ``zeta(t) * (c1 * eps_k + c2 * (n_modes - 1) * dt_k)`` is attached.
    """
    vals = np.array([constraint.g(z, t) for z, t in zip(traj.states, traj.times)], dtype=float)
    k = int(np.argmin(vals))
    bound = None
    if c1 is not None and c2 is not None:
        zeta = np.array([constraint.zeta(t) for t in traj.times], dtype=float)
        if np.any(zeta < 0):
            raise ValueError("zeta must be non-negative")
        bound = zeta * (c1 * eps_k + c2 * (n_modes - 1) * dt_k)
    return ConstraintReport(values=vals, minimum=float(vals[k]), argmin_time=float(traj.times[k]),
                            violated=bool(vals[k] < 0), deviation_bound=bound)


def write_trajectory(path, traj: Trajectory, model: SemilinearModel | None = None):
    """CSV with ``t,z_1..z_dim`` plus a JSON sidecar ``<path>.json``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"z_{k + 1}" for k in range(traj.states.shape[1])])
        for t, z in zip(traj.times, traj.states):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in z])
    meta = {
        "n_nodes": int(traj.times.size),
        "dim": int(traj.states.shape[1]),
        "substeps": traj.substeps,
        "accuracy": traj.accuracy,
        "grid": [float(t) for t in traj.grid.nodes],
    }
    if model is not None:
        meta["model"] = model.name
        meta["params"] = model.params
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=float)
