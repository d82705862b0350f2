"""Internally controlled heat equation on a rectangle with switched actuators.

``z_t = rho * Laplace(z) + B_sigma(t)(x) u(t)`` with homogeneous Dirichlet data;
one of nine Gaussian actuators is active at a time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .model import SemilinearModel


@dataclass(frozen=True)
class HeatParams:
    nx: int = 20
    ny: int = 40
    rho: float = 0.01
    lx: float = 1.0
    ly: float = 2.0
    t_final: float = 15.0
    lam1: float = 2.0
    lam2: float = 1.0 / 500.0
    actuator_width: float = 1e-3
    # "unit": 1/(2 pi eps) so each actuator has unit mass in 2-D;
    # "literal": 1/sqrt(2 pi eps) as in the one-dimensional formula
    normalization: str = "unit"
    # control box |u| <= u_max; the default leaves u unconstrained
    u_max: float = float("inf")


def actuator_positions(lx: float = 1.0, ly: float = 2.0) -> np.ndarray:
    """The 3x3 actuator layout ``((j + 0.005 lx)/4, (k + 0.005 ly)/4)``, j, k = 1..3."""
    pos = [((j + 0.005 * lx) / 4.0, (k + 0.005 * ly) / 4.0)
           for j in (1, 2, 3) for k in (1, 2, 3)]
    return np.array(pos)


def dirichlet_laplacian(nx: int, ny: int, hx: float, hy: float) -> sp.csr_matrix:
    """5-point Laplacian on interior nodes, x index fastest."""
    def lap1d(n, h):
        return sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h ** 2
    return (sp.kron(sp.identity(ny), lap1d(nx, hx)) + sp.kron(lap1d(ny, hy), sp.identity(nx))).tocsr()


def build_heat2d(params: HeatParams | None = None, **overrides) -> SemilinearModel:
    p = HeatParams(**{**asdict(params or HeatParams()), **overrides})
    if p.rho <= 0 or p.lx <= 0 or p.ly <= 0 or p.t_final <= 0:
        raise ValueError("rho, lx, ly and t_final must be positive")
    if p.lam1 < 0 or p.lam2 <= 0:
        raise ValueError("need lam1 >= 0 and lam2 > 0")
    if p.actuator_width <= 0:
        raise ValueError("actuator_width must be positive")
    if not p.u_max > 0:
        raise ValueError("u_max must be positive")
    hx = p.lx / (p.nx + 1)
    hy = p.ly / (p.ny + 1)
    # actuators sit 0.25 apart in both directions
    if hx > 0.125 or hy > 0.125:
        raise ValueError(
            f"grid {p.nx}x{p.ny} is too coarse to separate the actuators (need spacing <= 0.125)")
    x = hx * np.arange(1, p.nx + 1)
    y = hy * np.arange(1, p.ny + 1)
    X, Y = np.meshgrid(x, y)           # shape (ny, nx): ravel gives x fastest
    X, Y = X.ravel(), Y.ravel()

    A = p.rho * dirichlet_laplacian(p.nx, p.ny, hx, hy)
    weights = np.full(X.size, hx * hy)
    eps = p.actuator_width
    if p.normalization == "unit":
        scale = 1.0 / (2 * np.pi * eps)
    elif p.normalization == "literal":
        scale = 1.0 / np.sqrt(2 * np.pi * eps)
    else:
        raise ValueError(f"unknown normalization {p.normalization!r}")
    centers = actuator_positions(p.lx, p.ly)
    profiles = np.array([scale * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * eps))
                         for cx, cy in centers])
    profiles.setflags(write=False)
    z0 = 10 * np.sin(np.pi * X) * 10 * np.sin(np.pi * Y)
    lam1, lam2 = p.lam1, p.lam2

    def modes(t, z, u):
        return profiles * u[0]

    def modes_vjp(t, z, u, w, mu):
        return np.zeros_like(z), np.array([w @ (profiles @ mu)])

    def phi(z):
        return float(np.sum(weights * z * z))

    def phi_grad(z):
        return 2 * weights * z

    def psi(z, u):
        return float(lam1 * np.sum(weights * z * z) + lam2 * u[0] ** 2)

    def psi_grad(z, u):
        return 2 * lam1 * weights * z, 2 * lam2 * np.asarray(u, float)

    model = SemilinearModel(
        linear_op=A, z0=z0, mass_weights=weights, n_modes=len(centers), n_controls=1,
        modes=modes, modes_vjp=modes_vjp, phi=phi, phi_grad=phi_grad, psi=psi, psi_grad=psi_grad,
        u_lower=np.array([-p.u_max]), u_upper=np.array([p.u_max]),
        state_dependent=False, t_final=p.t_final, name="heat2d", params=asdict(p),
    )
    object.__setattr__(model, "profiles", profiles)
    object.__setattr__(model, "coords", np.column_stack([X, Y]))
    return model
