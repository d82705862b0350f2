"""Diffusive Lotka-Volterra system on a disc with a binary harvesting control.

    z1_t = d1 Laplace(z1) + z1 (a1 - b1 v - c1 z2)
    z2_t = d2 Laplace(z2) + z2 (-a2 - b2 v + c2 z1)

with homogeneous Neumann data. This predator-prey form has the periodic
uncontrolled dynamics around ``(a2/c2, a1/c1)``; ``interaction="competition"``
selects ``z2 (a2 - b2 v - c2 z1)`` instead, whose equilibrium is a saddle.
Modes are ``v = 0`` and ``v = 1``. Space is a Cartesian grid of square cells
masked to the disc; missing neighbours are reflected ghost cells, so the
discrete Laplacian conserves mass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .model import SemilinearModel


@dataclass(frozen=True)
class LotkaVolterraParams:
    h: float = 0.1
    center: tuple = (1.0, 1.0)
    radius: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    b1: float = 0.7
    b2: float = 0.5
    c1: float = 1.0
    c2: float = 1.0
    d1: float = 0.05
    d2: float = 0.01
    t_final: float = 15.0
    init_width: float = 0.5
    init_scale1: float = 0.5
    init_scale2: float = 0.7
    controls: tuple = (0.0, 1.0)
    interaction: str = "predator_prey"


def disc_mask(h: float, center, radius: float):
    """Cell centres of a square grid covering the disc and the inside mask."""
    n = int(np.ceil(2 * radius / h))
    x0 = center[0] - 0.5 * n * h
    y0 = center[1] - 0.5 * n * h
    xs = x0 + h * (np.arange(n) + 0.5)
    ys = y0 + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(xs, ys)
    inside = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius ** 2
    return X, Y, inside


def neumann_laplacian(inside: np.ndarray, h: float) -> sp.csr_matrix:
    """Graph Laplacian over active cells; absent neighbours contribute no flux."""
    ny, nx = inside.shape
    index = -np.ones(inside.shape, dtype=int)
    index[inside] = np.arange(np.count_nonzero(inside))
    rows, cols = [], []
    for di, dj in ((0, 1), (1, 0)):
        a = inside[: ny - di, : nx - dj] & inside[di:, dj:]
        i = index[: ny - di, : nx - dj][a]
        j = index[di:, dj:][a]
        rows += [i, j]
        cols += [j, i]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = int(inside.sum())
    off = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    deg = np.asarray(off.sum(axis=1)).ravel()
    return ((off - sp.diags(deg)) / h ** 2).tocsr()


def gaussian_bump(r2, width):
    return np.exp(-r2 / (2 * width)) / np.sqrt(2 * np.pi * width)


def build_lotka_volterra(params: LotkaVolterraParams | None = None, **overrides) -> SemilinearModel:
    p = LotkaVolterraParams(**{**asdict(params or LotkaVolterraParams()), **overrides})
    if p.h <= 0 or p.radius <= 0 or p.t_final <= 0:
        raise ValueError("h, radius and t_final must be positive")
    X, Y, inside = disc_mask(p.h, p.center, p.radius)
    n = int(inside.sum())
    if n == 0:
        raise ValueError("the disc mask contains no cells")
    L = neumann_laplacian(inside, p.h)
    A = sp.block_diag([p.d1 * L, p.d2 * L]).tocsr()
    xs, ys = X[inside], Y[inside]
    r2 = (xs - p.center[0]) ** 2 + (ys - p.center[1]) ** 2
    bump = gaussian_bump(r2, p.init_width)
    z0 = np.concatenate([p.init_scale1 * bump, p.init_scale2 * bump])
    weights = np.full(2 * n, p.h ** 2)
    vs = np.asarray(p.controls, float)
    # uncontrolled steady state
    zbar1 = p.a2 / p.c2 if p.c2 else 0.0
    zbar2 = p.a1 / p.c1 if p.c1 else 0.0
    target = np.concatenate([np.full(n, zbar1), np.full(n, zbar2)])
    a1, b1, c1 = p.a1, p.b1, p.c1
    if p.interaction == "predator_prey":
        a2, b2, c2 = -p.a2, p.b2, -p.c2
    elif p.interaction == "competition":
        a2, b2, c2 = p.a2, p.b2, p.c2
    else:
        raise ValueError(f"unknown interaction {p.interaction!r}")

    def modes(t, z, u):
        z1, z2 = z[:n], z[n:]
        out = np.empty((vs.size, 2 * n))
        for k, v in enumerate(vs):
            out[k, :n] = z1 * (a1 - b1 * v - c1 * z2)
            out[k, n:] = z2 * (a2 - b2 * v - c2 * z1)
        return out

    def modes_vjp(t, z, u, w, mu):
        # f is affine in v and sum(w) = 1, so the weighted field is f(z, w @ vs)
        v = float(w @ vs)
        z1, z2 = z[:n], z[n:]
        m1, m2 = mu[:n], mu[n:]
        g1 = m1 * (a1 - b1 * v - c1 * z2) - m2 * c2 * z2
        g2 = -m1 * c1 * z1 + m2 * (a2 - b2 * v - c2 * z1)
        return np.concatenate([g1, g2]), np.zeros(0)

    def phi(z):
        return 0.0

    def phi_grad(z):
        return np.zeros_like(z)

    def psi(z, u):
        d = z - target
        return float(np.sum(weights * d * d))

    def psi_grad(z, u):
        return 2 * weights * (z - target), np.zeros(0)

    model = SemilinearModel(
        linear_op=A, z0=z0, mass_weights=weights, n_modes=vs.size, n_controls=0,
        modes=modes, modes_vjp=modes_vjp, phi=phi, phi_grad=phi_grad, psi=psi, psi_grad=psi_grad,
        state_dependent=True, t_final=p.t_final, name="lotka_volterra", params=asdict(p),
    )
    object.__setattr__(model, "n_cells", n)
    object.__setattr__(model, "steady_state", (zbar1, zbar2))
    object.__setattr__(model, "coords", np.column_stack([xs, ys]))
    return model
