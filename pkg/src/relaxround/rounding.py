"""Sum-up rounding of relaxed mode multipliers on a time grid.

Controls are piecewise constant: every array has one row per grid cell.
Mode indices are 0-based in the Python API; the CSV format labels them
``mode_1 .. mode_N``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: accepted violation of sum(alpha) == 1 before a control is rejected
SIMPLEX_TOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Ordered partition ``0 = t_0 < t_1 < ... < t_n = t_f``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(self.nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a time grid needs at least two nodes")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("grid nodes must be finite")
        if nodes[0] != 0.0:
            raise ValueError(f"grid must start at 0, got {nodes[0]!r}")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t_final: float, n_cells: int) -> "TimeGrid":
        if n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        return cls(np.linspace(0.0, t_final, n_cells + 1))

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @property
    def t_final(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def dt_max(self) -> float:
        return float(np.max(self.dt))

    def contains(self, other: "TimeGrid") -> bool:
        """True if every node of `other` is a node of this grid."""
        return bool(np.all(np.isin(other.nodes, self.nodes)))

    def cell_index(self, t) -> np.ndarray:
        """Index of the cell ``[t_j, t_{j+1})`` holding each time (last cell is closed)."""
        idx = np.searchsorted(self.nodes, t, side="right") - 1
        return np.clip(idx, 0, self.n_cells - 1)

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.nodes.shape == other.nodes.shape and bool(
            np.array_equal(self.nodes, other.nodes))

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def __repr__(self):
        return (f"TimeGrid(n_cells={self.n_cells}, t_final={self.t_final:g}, "
                f"dt_max={self.dt_max:g})")


def _clean_simplex_rows(alpha: np.ndarray) -> np.ndarray:
    """Validate rows of `alpha` and push the tiny simplex residual into the largest entry."""
    if alpha.ndim != 2 or alpha.shape[1] < 1:
        raise ValueError("alpha must have shape (n_cells, n_modes)")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha contains non-finite values")
    if np.any(alpha < -SIMPLEX_TOL) or np.any(alpha > 1 + SIMPLEX_TOL):
        bad = int(np.argwhere((alpha < -SIMPLEX_TOL) | (alpha > 1 + SIMPLEX_TOL))[0, 0])
        raise ValueError(f"alpha outside [0, 1] on cell {bad}: {alpha[bad]}")
    resid = 1.0 - alpha.sum(axis=1)
    if np.any(np.abs(resid) > SIMPLEX_TOL):
        bad = int(np.argmax(np.abs(resid)))
        raise ValueError(
            f"alpha does not sum to 1 on cell {bad} (residual {resid[bad]:.3e})")
    out = np.clip(alpha, 0.0, 1.0)
    resid = 1.0 - out.sum(axis=1)
    rows = np.nonzero(resid)[0]
    if rows.size:
        cols = np.argmax(out[rows], axis=1)
        out[rows, cols] += resid[rows]
    return out


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Piecewise-constant ordinary controls `omega` and convex mode multipliers `alpha`."""

    grid: TimeGrid
    alpha: np.ndarray
    omega: np.ndarray = None

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        if alpha.shape[0] != self.grid.n_cells:
            raise ValueError(
                f"alpha has {alpha.shape[0]} rows for {self.grid.n_cells} cells")
        object.__setattr__(self, "alpha", _frozen(_clean_simplex_rows(alpha)))
        if self.omega is None:
            omega = np.zeros((self.grid.n_cells, 0))
        else:
            omega = np.asarray(self.omega, dtype=float)
            if omega.ndim == 1:
                omega = omega[:, None]
            if omega.shape[0] != self.grid.n_cells:
                raise ValueError(
                    f"omega has {omega.shape[0]} rows for {self.grid.n_cells} cells")
            if not np.all(np.isfinite(omega)):
                raise ValueError("omega contains non-finite values")
        object.__setattr__(self, "omega", _frozen(omega))

    @property
    def n_modes(self) -> int:
        return self.alpha.shape[1]

    @property
    def n_controls(self) -> int:
        return self.omega.shape[1]

    def is_binary(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.minimum(np.abs(self.alpha), np.abs(self.alpha - 1)) <= tol))

    def within_box(self, lower, upper, tol: float = 0.0) -> bool:
        lower = np.broadcast_to(np.asarray(lower, float), (self.n_controls,))
        upper = np.broadcast_to(np.asarray(upper, float), (self.n_controls,))
        return bool(np.all(self.omega >= lower - tol) and np.all(self.omega <= upper + tol))

    def inject(self, fine: TimeGrid) -> "RelaxedControl":
        """Copy cell values onto a refinement of the grid."""
        if not fine.contains(self.grid):
            raise ValueError("target grid is not a refinement of this control's grid")
        mid = 0.5 * (fine.nodes[:-1] + fine.nodes[1:])
        idx = self.grid.cell_index(mid)
        return RelaxedControl(fine, self.alpha[idx], self.omega[idx])


@dataclass(frozen=True, eq=False)
class BinaryControl:
    """One-hot mode selection per cell."""

    grid: TimeGrid
    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta))
        if beta.shape[0] != self.grid.n_cells:
            raise ValueError(f"beta has {beta.shape[0]} rows for {self.grid.n_cells} cells")
        if not np.all((beta == 0) | (beta == 1)):
            raise ValueError("beta entries must be 0 or 1")
        if not np.all(beta.sum(axis=1) == 1):
            raise ValueError("exactly one mode must be active on every cell")
        object.__setattr__(self, "beta", _frozen(beta, dtype=float))

    @classmethod
    def from_modes(cls, grid: TimeGrid, modes, n_modes: int) -> "BinaryControl":
        modes = np.asarray(modes, dtype=int)
        beta = np.zeros((modes.size, n_modes))
        beta[np.arange(modes.size), modes] = 1.0
        return cls(grid, beta)

    @property
    def n_modes(self) -> int:
        return self.beta.shape[1]

    @property
    def modes(self) -> np.ndarray:
        """Active mode index per cell."""
        return np.argmax(self.beta, axis=1)

    def as_relaxed(self, omega=None) -> RelaxedControl:
        return RelaxedControl(self.grid, self.beta, omega)


@dataclass(frozen=True)
class DeviationReport:
    """Worst accumulated mismatch ``sup_t |int_0^t (alpha_i - beta_i)|`` per mode."""

    per_mode_max: np.ndarray
    overall_max: float
    bound: float
    t_final: float = field(default=1.0)

    def within_bound(self, rtol: float = 1e-10) -> bool:
        return self.overall_max <= self.bound + rtol * self.t_final


def _check_same_grid(a: TimeGrid, b: TimeGrid):
    if a != b:
        raise ValueError("controls live on different grids")


def sur_round(control: RelaxedControl) -> BinaryControl:
    """Sum-up rounding of the mode multipliers.

    On cell ``j`` the mode with the largest accumulated deficit
    ``int_0^{t_{j+1}} alpha_i - sum_{l<j} p_{i,l} dt_l`` is switched on;
    ties go to the smallest mode index.
    """
    alpha = control.alpha
    dt = control.grid.dt
    n, n_modes = alpha.shape
    beta = np.zeros_like(alpha)
    # running int_0^{t_j} (alpha - beta), Kahan-compensated
    dev = np.zeros(n_modes)
    comp = np.zeros(n_modes)
    for j in range(n):
        inc = alpha[j] * dt[j]
        deficit = dev + inc
        winner = int(np.argmax(deficit))
        beta[j, winner] = 1.0
        inc[winner] -= dt[j]
        y = inc - comp
        t = dev + y
        comp = (t - dev) - y
        dev = t
    return BinaryControl(control.grid, beta)


def accumulated_deviation(control: RelaxedControl, binary: BinaryControl) -> DeviationReport:
    """Deviation of the integrated multipliers from the rounded controls.

    The integrand is piecewise constant, so the running integral is
    piecewise linear and its extrema sit on grid nodes.
    """
    _check_same_grid(control.grid, binary.grid)
    if control.n_modes != binary.n_modes:
        raise ValueError("mode counts differ")
    dt = control.grid.dt
    diff = (control.alpha - binary.beta) * dt[:, None]
    running = np.zeros(control.n_modes)
    comp = np.zeros(control.n_modes)
    peak = np.zeros(control.n_modes)
    for inc in diff:
        y = inc - comp
        t = running + y
        comp = (t - running) - y
        running = t
        np.maximum(peak, np.abs(running), out=peak)
    peak.setflags(write=False)
    return DeviationReport(
        per_mode_max=peak,
        overall_max=float(peak.max()),
        bound=(control.n_modes - 1) * control.grid.dt_max,
        t_final=control.grid.t_final,
    )


def refine_bisect(grid: TimeGrid) -> TimeGrid:
    """Split every cell at its midpoint."""
    nodes = np.empty(2 * grid.n_cells + 1)
    nodes[0::2] = grid.nodes
    nodes[1::2] = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
    return TimeGrid(nodes)


# -- CSV exchange -----------------------------------------------------------

class ControlsFormatError(ValueError):
    """Malformed controls CSV; `line` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def write_controls_csv(path, grid: TimeGrid, modes: np.ndarray, omega: np.ndarray | None = None):
    """Write one row per cell: ``t_start,t_end,mode_1..mode_N[,u_1..u_m]``.

    Values are written with ``repr`` so that a round trip is bit-exact.
    """
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    omega = np.zeros((grid.n_cells, 0)) if omega is None else np.asarray(omega, float).reshape(grid.n_cells, -1)
    header = ["t_start", "t_end"]
    header += [f"mode_{i + 1}" for i in range(modes.shape[1])]
    header += [f"u_{k + 1}" for k in range(omega.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(grid.n_cells):
            row = [grid.nodes[j], grid.nodes[j + 1], *modes[j], *omega[j]]
            writer.writerow([repr(float(v)) for v in row])


def read_controls_csv(path) -> tuple[TimeGrid, np.ndarray, np.ndarray]:
    """Parse a controls CSV into ``(grid, modes, omega)`` without simplex checks."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ControlsFormatError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["t_start", "t_end"]:
        raise ControlsFormatError("header must start with t_start,t_end", 1)
    n_modes = 0
    while 2 + n_modes < len(header) and header[2 + n_modes] == f"mode_{n_modes + 1}":
        n_modes += 1
    if n_modes == 0:
        raise ControlsFormatError("no mode_1.. columns", 1)
    rest = header[2 + n_modes:]
    if rest != [f"u_{k + 1}" for k in range(len(rest))]:
        raise ControlsFormatError(f"unexpected columns {rest}", 1)
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ControlsFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise ControlsFormatError(str(exc), lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ControlsFormatError("non-finite value", lineno)
        if body and vals[0] != body[-1][1][1]:
            raise ControlsFormatError("t_start does not match previous t_end", lineno)
        body.append((lineno, vals))
    if not body:
        raise ControlsFormatError("no data rows", len(rows))
    data = np.array([v for _, v in body])
    try:
        grid = TimeGrid(np.append(data[:, 0], data[-1, 1]))
    except ValueError as exc:
        raise ControlsFormatError(str(exc), body[0][0]) from None
    return grid, data[:, 2:2 + n_modes], data[:, 2 + n_modes:]
