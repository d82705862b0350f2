import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from relaxround.combinatorial import SwitchBudget, budget_violations, switch_count
from relaxround.driver import (
    AlgorithmConfig,
    EstimateConstants,
    bound_theorem23,
    bound_theorem31,
    check_h2_linear,
    halving_schedule,
    read_history_csv,
    relative_errors,
    run_algorithm1,
    run_algorithm2,
    write_history_csv,
    write_manifest,
)
from relaxround.evolution import SemilinearModel, build_heat2d, build_lotka_volterra
from relaxround.rounding import RelaxedControl, TimeGrid
from relaxround.verify import AffineFamily, random_grid

# Three constant sets with hand-computed (C1, C2, C3, C4).
# Set A: L = 0 so the growth factor is 1. M = 3, C = 1.
#   C1 = C_J (M+1)(1+eta+xi) + 1 = 2*4*2.5 + 1 = 21
#   C2 = M + t_f C = 3 + 2 = 5
#   C3 = (eta + t_f xi) C1 + t_f xi C_J = 2*21 + 2 = 44
#   C4 = (eta + t_f xi) C2 = 10
SET_A = EstimateConstants(eta=1.0, xi=0.5, L=0.0, m_i=(1.0, 2.0), c_i=(0.5, 0.5), C_J=2.0,
                          m_bar=1.0, t_f=2.0)
# Set B: t_f m_bar L = ln 2, growth 2. M = 1, C = 0, eta = xi = 0.
#   C1 = 1*2*1*2 + 1 = 5, C2 = 2, C3 = C4 = 0
SET_B = EstimateConstants(eta=0.0, xi=0.0, L=math.log(2.0), m_i=(1.0,), c_i=(0.0,), C_J=1.0,
                          m_bar=1.0, t_f=1.0)
# Set C: t_f = 2, m_bar = 0.5, L = ln 3 / 1 -> growth 3. M = 2, C = 1, eta = 1, xi = 0, C_J = 1.
#   C1 = 1*3*2*3 + 1 = 19, C2 = (2 + 2)*3 = 12, C3 = 1*19 + 0 = 19, C4 = 12
SET_C = EstimateConstants(eta=1.0, xi=0.0, L=math.log(3.0), m_i=(0.5, 1.5), c_i=(1.0, 0.0), C_J=1.0,
                          m_bar=0.5, t_f=2.0)


class TestBounds:
    @pytest.mark.parametrize("consts,expected", [
        (SET_A, (21.0, 5.0, 44.0, 10.0)),
        (SET_B, (5.0, 2.0, 0.0, 0.0)),
        (SET_C, (19.0, 12.0, 19.0, 12.0)),
    ])
    def test_hand_values(self, consts, expected):
        assert consts.constants() == pytest.approx(expected, rel=1e-14)

    def test_weak_variant(self):
        # C1 = 2, C3 = (eta + t_f xi) * 2 without the C_J term
        assert SET_A.constants(weak=True) == pytest.approx((2.0, 5.0, 4.0, 10.0))

    def test_sur_state_and_cost_bounds(self):
        # (21*0.1 + 5*(3-1)*0.5, 44*0.1 + 10*(3-1)*0.5)
        assert bound_theorem23(SET_A, 0.1, 0.5, 3) == pytest.approx((7.1, 14.4))

    def test_minmax_bounds(self):
        # r = j_sub + dt_max = 0.25 + 0.5
        assert bound_theorem31(SET_A, 0.0, 0.25, 0.5) == pytest.approx((3.75, 7.5))

    @pytest.mark.parametrize("consts", [SET_A, SET_B, SET_C])
    def test_zero_cases(self, consts):
        assert bound_theorem23(consts, 0.0, 0.0, 4) == (0.0, 0.0)
        assert bound_theorem23(consts, 0.0, 0.7, 1) == (0.0, 0.0)
        assert bound_theorem31(consts, 0.0, 0.0, 0.0) == (0.0, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            EstimateConstants(eta=-1, xi=0, L=0, m_i=(1,), c_i=(0,), C_J=1, m_bar=1, t_f=1)
        with pytest.raises(ValueError):
            EstimateConstants(eta=0, xi=0, L=math.inf, m_i=(1,), c_i=(0,), C_J=1, m_bar=1, t_f=1)


class TestAffineFamily:
    def test_closed_form_matches_ode_solver(self):
        fam = AffineFamily()
        g = TimeGrid([0.0, 0.3, 0.55, 1.0])
        w = np.array([[0.2, 0.8], [1.0, 0.0], [0.6, 0.4]])
        ts, ys = fam.solve(g, w, per_cell=5)
        a, b = w @ np.array(fam.a), w @ np.array(fam.b)
        y = fam.y0
        for c in range(g.n_cells):
            sol = solve_ivp(lambda t, v: a[c] * v + b[c], (g.nodes[c], g.nodes[c + 1]), [y],
                            rtol=1e-12, atol=1e-12)
            y = sol.y[0, -1]
            assert ys[(c + 1) * 5] == pytest.approx(y, abs=1e-9)

    def test_error_within_state_bound(self):
        fam = AffineFamily()
        consts = fam.constants()
        rng = np.random.default_rng(3)
        for _ in range(10):
            g = random_grid(rng, int(rng.integers(4, 60)), t_final=fam.t_f)
            assert fam.rounding_error(g) <= bound_theorem23(consts, 0.0, g.dt_max, 2)[0]


class TestModeRegularity:
    def test_heat(self):
        m = build_heat2d(nx=10, ny=20)
        g = TimeGrid.uniform(m.t_final, 3)
        ctl = RelaxedControl(g, np.full((3, m.n_modes), 1 / m.n_modes), [[1.0], [-2.0], [0.5]])
        res = check_h2_linear(m, ctl, m_bar=1.0)
        assert res.holds
        assert np.all(res.c_bar == 0.0)  # modes are constant in time within a cell
        assert np.all(res.l_bar > 0)
        assert np.allclose(res.c_i, res.l_bar)

    def test_state_dependent_rejected(self):
        m = build_lotka_volterra(h=0.25)
        g = TimeGrid.uniform(m.t_final, 2)
        with pytest.raises(ValueError):
            check_h2_linear(m, RelaxedControl(g, np.full((2, 2), 0.5)), m_bar=1.0)


def switching_toy(psi_kind):
    """z' = +1 (mode 0) or -1 (mode 1), z(0) = 0, t_f = 1."""
    psi = {"max": (lambda z, u: -float(z[0]), lambda z, u: (np.array([-1.0]), np.zeros(0))),
           "track": (lambda z, u: float(z[0] ** 2), lambda z, u: (2 * z, np.zeros(0)))}[psi_kind]
    return SemilinearModel(
        linear_op=sp.csc_matrix((1, 1)), z0=np.zeros(1), mass_weights=np.ones(1), n_modes=2,
        modes=lambda t, z, u: np.array([[1.0], [-1.0]]),
        phi=lambda z: 0.0, phi_grad=lambda z: np.zeros(1),
        psi=psi[0], psi_grad=psi[1], state_dependent=False, t_final=1.0, name=f"toy_{psi_kind}")


class TestConfig:
    def test_schedule(self):
        s = halving_schedule(0.1)
        assert [s(k) for k in range(3)] == [0.1, 0.05, 0.025]

    def test_validation(self):
        g = TimeGrid.uniform(1.0, 2)
        with pytest.raises(ValueError):
            AlgorithmConfig(epsilon=0.0, initial_grid=g)
        with pytest.raises(ValueError):
            AlgorithmConfig(epsilon=1e-3, initial_grid=g, mode="other")
        with pytest.raises(ValueError):
            AlgorithmConfig(epsilon=1e-3, initial_grid=g, eps_schedule=lambda k: 2.0 ** k)
        cfg = AlgorithmConfig(epsilon=1e-3, initial_grid=g)
        with pytest.raises(ValueError):
            run_algorithm2(switching_toy("max"), cfg)
        with pytest.raises(ValueError):
            run_algorithm2(switching_toy("max"), AlgorithmConfig(epsilon=1e-3, initial_grid=g, mode="minmax"))


class TestAlgorithms:
    def test_bang_bang_exits_at_step4(self):
        m = switching_toy("max")
        cfg = AlgorithmConfig(epsilon=1e-3, initial_grid=TimeGrid.uniform(1.0, 4), integration_tol=1e-8)
        sol, hist = run_algorithm1(m, cfg)
        assert len(hist) == 1 and hist[0].term_reason == "step4"
        assert np.all(sol.beta.modes == 0)
        assert sol.J == pytest.approx(-0.5, abs=1e-12)

    def test_singular_arc_step7(self):
        m = switching_toy("track")
        cfg = AlgorithmConfig(epsilon=0.1, initial_grid=TimeGrid.uniform(1.0, 8), integration_tol=1e-8)
        sol, hist = run_algorithm1(m, cfg)
        assert hist[-1].term_reason == "step7"
        assert hist[-1].J_rel == pytest.approx(0.0, abs=1e-12)
        # sawtooth of height dt: integral of z^2 is dt^2 / 3; the trapezoid rule
        # with s substeps per cell adds the factor 1 + 1 / (2 s^2)
        s = sol.trajectory.substeps
        assert sol.J == pytest.approx(0.125 ** 2 / 3 * (1 + 1 / (2 * s * s)), rel=1e-12)

    def test_cap_and_refinement(self):
        m = switching_toy("track")
        cfg = AlgorithmConfig(epsilon=1e-9, initial_grid=TimeGrid.uniform(1.0, 4), k_max=2,
                              integration_tol=1e-8)
        sol, hist = run_algorithm1(m, cfg)
        assert [r.k for r in hist] == [0, 1, 2]
        assert [r.dt_max for r in hist] == [0.25, 0.125, 0.0625]
        assert hist[-1].term_reason == "cap"
        assert all(r.deviation.overall_max <= r.deviation.bound for r in hist)
        errs = [r.J for r in hist]
        assert errs[0] > errs[1] > errs[2]

    @pytest.mark.parametrize("K", [0, 1, 2, 5])
    def test_algorithm2_budget(self, K):
        m = switching_toy("track")
        budget = SwitchBudget({(0, 1): K, (1, 0): K})
        cfg = AlgorithmConfig(epsilon=1e-9, initial_grid=TimeGrid.uniform(1.0, 8), k_max=2, mode="minmax",
                              budget=budget, integration_tol=1e-8)
        sol, hist = run_algorithm2(m, cfg)
        assert budget_violations(sol.beta, budget) == {}
        assert switch_count(sol.beta, 0, 1) <= K and switch_count(sol.beta, 1, 0) <= K
        assert all(r.j_sub is not None and r.minmax_optimal for r in hist)
        assert hist[-1].term_reason in ("step7'", "cap")

    def test_algorithm2_stops_when_jsub_stalls(self):
        # zero budgets force a constant mode, so J_sub = t_f / 2 on every grid
        m = switching_toy("track")
        budget = SwitchBudget.uniform(2, 0)
        cfg = AlgorithmConfig(epsilon=1e-3, initial_grid=TimeGrid.uniform(1.0, 4), k_max=4, mode="minmax",
                              budget=budget, integration_tol=1e-8)
        _, hist = run_algorithm2(m, cfg)
        assert [r.term_reason for r in hist] == ["", "step7'"]
        assert hist[0].j_sub == pytest.approx(0.5)


class TestHistoryIo:
    def make_history(self):
        m = switching_toy("track")
        cfg = AlgorithmConfig(epsilon=1e-9, initial_grid=TimeGrid.uniform(1.0, 4), k_max=1,
                              integration_tol=1e-8)
        return m, cfg, run_algorithm1(m, cfg).history

    def test_relative_errors(self):
        from types import SimpleNamespace as R
        hist = [R(J_rel=10.0, J=12.0), R(J_rel=8.0, J=9.0)]
        assert relative_errors(hist) == [0.5, 0.125]

    def test_csv_round_trip(self, tmp_path):
        _, _, hist = self.make_history()
        path = tmp_path / "h.csv"
        write_history_csv(path, hist)
        rows = read_history_csv(path)
        assert [r["k"] for r in rows] == [r.k for r in hist]
        assert [r["J_int"] for r in rows] == [r.J for r in hist]
        assert [r["rel_error"] for r in rows] == relative_errors(hist)
        assert rows[-1]["term_reason"] == "cap"

    def test_manifest_is_strict_json(self, tmp_path):
        m, cfg, hist = self.make_history()
        path = tmp_path / "manifest.json"
        write_manifest(path, cfg, m, hist, extra={"u_max": math.inf, "arr": np.arange(2)})
        data = json.loads(path.read_text())
        assert data["model"] == "toy_track"
        assert len(data["history"]) == 2
        assert "Infinity" not in path.read_text()
