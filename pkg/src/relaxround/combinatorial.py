"""Rounding under switching budgets.

The min-max rounding problem picks a one-hot mode sequence ``p`` that
minimizes the worst prefix mismatch

    J_sub(p) = max_i max_r | sum_{l<=r} (q_{i,l} - p_{i,l}) dt_l |

subject to caps on the number of ``i -> j`` transitions.  It is solved
exactly by depth-first branch and bound over the cells; the prefix
maximum never decreases along a branch, which makes it a valid bound.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

import numpy as np

from .rounding import BinaryControl, RelaxedControl, TimeGrid, sur_round


class SwitchBudget(dict):
    """Mapping ``(i, j) -> K`` capping the number of switches from mode i to mode j.

    Pairs that are absent are unconstrained. Modes are 0-based.
    """

    def __init__(self, entries=None, **kwargs):
        super().__init__()
        for key, cap in dict(entries or {}, **kwargs).items():
            self[key] = cap

    def __setitem__(self, key, cap):
        i, j = (int(k) for k in key)
        if i < 0 or j < 0:
            raise ValueError(f"mode indices must be non-negative, got {key}")
        if i == j:
            raise ValueError(f"({i}, {j}) is not a switch")
        if int(cap) != cap or cap < 0:
            raise ValueError(f"switch cap must be a non-negative integer, got {cap!r}")
        super().__setitem__((i, j), int(cap))

    def check_modes(self, n_modes: int):
        for i, j in self:
            if i >= n_modes or j >= n_modes:
                raise ValueError(f"budget pair {(i, j)} outside {n_modes} modes")

    @classmethod
    def uniform(cls, n_modes: int, cap: int) -> "SwitchBudget":
        return cls({(i, j): cap for i in range(n_modes) for j in range(n_modes) if i != j})


@dataclass(frozen=True)
class MinMaxSolution:
    p: np.ndarray
    objective: float
    optimal: bool
    nodes_explored: int

    @property
    def modes(self) -> np.ndarray:
        return np.argmax(self.p, axis=1)

    def to_binary(self, grid: TimeGrid) -> BinaryControl:
        return BinaryControl(grid, self.p)


def cell_averages(control: RelaxedControl) -> np.ndarray:
    """Per-cell mean of each multiplier, shape ``(n_cells, n_modes)``.

    Piecewise-constant multipliers are their own cell averages.
    """
    return np.array(control.alpha, dtype=float)


def _modes_of(beta) -> np.ndarray:
    if isinstance(beta, BinaryControl):
        return beta.modes
    arr = np.asarray(beta)
    return np.argmax(arr, axis=1) if arr.ndim == 2 else arr.astype(int)


def switch_count(beta, i: int, j: int) -> int:
    """Number of consecutive cells going from mode `i` to mode `j`.

    `beta` may be a BinaryControl, a one-hot matrix or a mode sequence.
    """
    if i == j:
        raise ValueError("i == j is not a switch")
    seq = _modes_of(beta)
    return int(np.count_nonzero((seq[:-1] == i) & (seq[1:] == j)))


def switch_counts(beta, n_modes: int | None = None) -> dict:
    """All nonzero transition counts ``{(i, j): count}``."""
    seq = _modes_of(beta)
    counts = {}
    for a, b in zip(seq[:-1], seq[1:]):
        if a != b:
            counts[(int(a), int(b))] = counts.get((int(a), int(b)), 0) + 1
    return counts


def budget_violations(beta, budget: SwitchBudget) -> dict:
    """``{(i, j): (count, cap)}`` for every pair whose cap is exceeded."""
    out = {}
    for (i, j), cap in budget.items():
        c = switch_count(beta, i, j)
        if c > cap:
            out[(i, j)] = (c, cap)
    return out


def _check_q(q, grid: TimeGrid) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != grid.n_cells:
        raise ValueError(f"q must have shape ({grid.n_cells}, n_modes), got {q.shape}")
    if not np.all(np.isfinite(q)) or np.any(q < -1e-9) or np.any(q > 1 + 1e-9):
        raise ValueError("q entries must lie in [0, 1]")
    if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows of q must sum to 1")
    return q


def minmax_objective(q, grid: TimeGrid, p) -> float:
    """J_sub of a one-hot matrix ``p``; prefix sums are accumulated left to right."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    dt = grid.dt
    running = np.zeros(q.shape[1])
    worst = 0.0
    for r in range(q.shape[0]):
        running = running + (q[r] - p[r]) * dt[r]
        worst = max(worst, float(np.max(np.abs(running))))
    return worst


def _onehot(modes, n_modes: int) -> np.ndarray:
    modes = np.asarray(modes, dtype=int)
    p = np.zeros((modes.size, n_modes))
    p[np.arange(modes.size), modes] = 1.0
    return p


def _feasible(seq, budget: SwitchBudget) -> bool:
    return not budget_violations(np.asarray(seq), budget)


def solve_minmax(q, grid: TimeGrid, budget: SwitchBudget | None = None, *,
                 node_limit: int = 2_000_000, time_limit: float | None = None) -> MinMaxSolution:
    """Exact min-max rounding under switching budgets by branch and bound.

    Among optimal sequences the lexicographically smallest mode sequence is
    returned (smallest mode index first, as in sum-up rounding). If
    `node_limit` or `time_limit` stops the search, the incumbent is returned
    with ``optimal=False``.
    """
    q = _check_q(q, grid)
    budget = SwitchBudget() if budget is None else budget
    n, n_modes = q.shape
    budget.check_modes(n_modes)
    dt = grid.dt
    eye = np.eye(n_modes)
    # per-cell, per-choice increment of the prefix deviation
    steps = (q[:, None, :] - eye[None, :, :]) * dt[:, None, None]

    # incumbent: SUR if it respects the budget, else the best constant sequence
    sur = sur_round(RelaxedControl(grid, q)).modes
    if _feasible(sur, budget):
        best_seq = tuple(int(m) for m in sur)
    else:
        consts = [(minmax_objective(q, grid, _onehot([a] * n, n_modes)), a) for a in range(n_modes)]
        best_seq = (min(consts)[1],) * n
    best = minmax_objective(q, grid, _onehot(best_seq, n_modes))

    capped = {pair: cap for pair, cap in budget.items()}
    used = dict.fromkeys(capped, 0)
    seq = [0] * n
    nodes = 0
    exhausted = True
    deadline = None if time_limit is None else time.monotonic() + time_limit

    def dfs(r, running, worst, last):
        nonlocal best, best_seq, nodes, exhausted
        if r == n:
            cand = tuple(seq)
            if worst < best or (worst == best and cand < best_seq):
                best, best_seq = worst, cand
            return
        for a in range(n_modes):
            pair = (last, a)
            if last is not None and pair in capped and used[pair] >= capped[pair]:
                continue
            nodes += 1
            if nodes > node_limit or (deadline is not None and nodes % 1024 == 0
                                      and time.monotonic() > deadline):
                exhausted = False
                return
            nxt = running + steps[r, a]
            w = max(worst, float(np.max(np.abs(nxt))))
            seq[r] = a
            if w > best:
                continue
            if w == best and tuple(seq[:r + 1]) > best_seq[:r + 1]:
                continue
            if last is not None and pair in capped:
                used[pair] += 1
                dfs(r + 1, nxt, w, a)
                used[pair] -= 1
            else:
                dfs(r + 1, nxt, w, a)
            if not exhausted:
                return

    limit = sys.getrecursionlimit()
    if n + 100 > limit:
        sys.setrecursionlimit(n + 100)
    try:
        dfs(0, np.zeros(n_modes), 0.0, None)
    finally:
        sys.setrecursionlimit(limit)

    p = _onehot(best_seq, n_modes)
    return MinMaxSolution(p=p, objective=minmax_objective(q, grid, p),
                          optimal=exhausted, nodes_explored=nodes)


#: guard on N**n for exhaustive enumeration
BRUTE_FORCE_LIMIT = 10 ** 7


def brute_force_minmax(q, grid: TimeGrid, budget: SwitchBudget | None = None) -> MinMaxSolution:
    """Enumerate every mode sequence; verification oracle for `solve_minmax`."""
    q = _check_q(q, grid)
    budget = SwitchBudget() if budget is None else budget
    n, n_modes = q.shape
    budget.check_modes(n_modes)
    if n_modes ** n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{n_modes}**{n} sequences exceed the enumeration limit")
    dt = grid.dt
    steps = (q[:, None, :] - np.eye(n_modes)[None, :, :]) * dt[:, None, None]
    total = n_modes ** n
    weights = n_modes ** np.arange(n - 1, -1, -1)
    best, best_idx = np.inf, None
    chunk = 1 << 15
    # integer k <-> base-N digits of k, so ascending k is lexicographic order
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        seqs = (idx[:, None] // weights[None, :]) % n_modes
        ok = np.ones(idx.size, dtype=bool)
        for (i, j), cap in budget.items():
            trans = np.count_nonzero((seqs[:, :-1] == i) & (seqs[:, 1:] == j), axis=1)
            ok &= trans <= cap
        if not ok.any():
            continue
        seqs, idx = seqs[ok], idx[ok]
        incs = steps[np.arange(n)[None, :], seqs]
        # cumsum accumulates left to right, matching minmax_objective bit for bit
        vals = np.abs(np.cumsum(incs, axis=1)).max(axis=(1, 2))
        k = int(np.argmin(vals))
        if vals[k] < best:
            best, best_idx = float(vals[k]), seqs[k]
    p = _onehot(best_idx, n_modes)
    return MinMaxSolution(p=p, objective=minmax_objective(q, grid, p), optimal=True,
                          nodes_explored=total)


# -- MILP form --------------------------------------------------------------

def minmax_milp(q, grid: TimeGrid, budget: SwitchBudget | None = None):
    """Slack-variable MILP equivalent of the min-max rounding problem.

    Variables, in order: ``p[r, i]`` (row-major, binary), ``y[(i,j), r]``
    (transition indicators for each budgeted pair and r < n-1, continuous in
    [0, 1]) and the slack ``s``. Returns ``(c, A, lb, ub, integrality, names)``
    with constraints ``lb <= A x <= ub``; the objective ``c @ x`` is ``s``.
    """
    q = _check_q(q, grid)
    budget = SwitchBudget() if budget is None else budget
    n, n_modes = q.shape
    dt = grid.dt
    pairs = sorted(budget)
    n_p = n * n_modes
    n_y = len(pairs) * max(n - 1, 0)
    n_var = n_p + n_y + 1
    s = n_var - 1
    names = [f"p_{i + 1}_{r + 1}" for r in range(n) for i in range(n_modes)]
    names += [f"y_{i + 1}_{j + 1}_{r + 1}" for (i, j) in pairs for r in range(n - 1)]
    names.append("s")

    rows, lo, hi = [], [], []

    def add(coefs, lower, upper):
        row = np.zeros(n_var)
        for k, v in coefs:
            row[k] += v
        rows.append(row)
        lo.append(lower)
        hi.append(upper)

    cum_q = np.cumsum(q * dt[:, None], axis=0)
    for i in range(n_modes):
        for r in range(n):
            terms = [(l * n_modes + i, -dt[l]) for l in range(r + 1)]
            # cum_q - sum p dt <= s  and  -(cum_q - sum p dt) <= s
            add(terms + [(s, -1.0)], -np.inf, -cum_q[r, i])
            add([(k, -v) for k, v in terms] + [(s, -1.0)], -np.inf, cum_q[r, i])
    for r in range(n):
        add([(r * n_modes + i, 1.0) for i in range(n_modes)], 1.0, 1.0)
    for k, (i, j) in enumerate(pairs):
        base = n_p + k * (n - 1)
        for r in range(n - 1):
            # y >= p_{i,r} + p_{j,r+1} - 1
            add([(base + r, 1.0), (r * n_modes + i, -1.0), ((r + 1) * n_modes + j, -1.0)],
                -1.0, np.inf)
        add([(base + r, 1.0) for r in range(n - 1)], -np.inf, budget[(i, j)])

    c = np.zeros(n_var)
    c[s] = 1.0
    lb_x = np.zeros(n_var)
    ub_x = np.ones(n_var)
    ub_x[s] = np.inf
    integrality = np.zeros(n_var, dtype=int)
    integrality[:n_p] = 1
    A = np.array(rows)
    return c, A, np.array(lo), np.array(hi), (lb_x, ub_x, integrality), names


def _fmt_terms(row, names) -> str:
    parts = []
    for k in np.nonzero(row)[0]:
        v = float(row[k])
        sign = "-" if v < 0 else "+"
        parts.append(f"{sign} {abs(v)!r} {names[k]}")
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def write_minmax_lp(path, q, grid: TimeGrid, budget: SwitchBudget | None = None):
    """Export the MILP in CPLEX LP text format for external cross-checks.

    Grammar: ``Minimize`` objective ``s``; ``Subject To`` one named linear
    row per constraint (``dev_*`` prefix bounds, ``onehot_r`` row sums,
    ``link_*`` transition indicators, ``budget_i_j`` caps); ``Bounds`` for
    the slack and indicators; ``Binary`` listing every ``p_i_r``; ``End``.
    """
    c, A, lo, hi, (lb_x, ub_x, integ), names = minmax_milp(q, grid, budget)
    lines = ["\\ min-max rounding", "Minimize", " obj: s", "Subject To"]
    for k, row in enumerate(A):
        expr = _fmt_terms(row, names)
        if lo[k] == hi[k]:
            lines.append(f" c{k}: {expr} = {float(lo[k])!r}")
        elif np.isinf(lo[k]):
            lines.append(f" c{k}: {expr} <= {float(hi[k])!r}")
        else:
            lines.append(f" c{k}: {expr} >= {float(lo[k])!r}")
    lines.append("Bounds")
    lines.append(" s >= 0")
    for k, name in enumerate(names):
        if name.startswith("y_"):
            lines.append(f" 0 <= {name} <= 1")
    lines.append("Binary")
    lines.extend(f" {names[k]}" for k in np.nonzero(integ)[0])
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
