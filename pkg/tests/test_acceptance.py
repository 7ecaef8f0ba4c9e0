"""Acceptance suite: ten end-to-end criteria, one verdict line each.

Criteria 5-7 average five seeded 8-day runs per preset, so this module
takes a few minutes. Criteria 5 and 6 each have two sub-claims; the
running-RMSE comparison holds, but the tight unknown-input band does not:
the per-step M-step increment carries the filter's full process-noise
scale (std sqrt(Q) = 6.3e-5 m, 2.1x the mismatch itself), so for any
step size large enough to converge within the horizon the estimate
fluctuates well outside the band. The band checks are asserted exactly as
stated and are expected to FAIL.
"""

import itertools

import mpmath as mp
import numpy as np
import pytest

from agrohydro import estimation as est
from agrohydro import placement, scenarios, soil
from agrohydro.cli import main as cli_main
from agrohydro.soil import LOAM, ColumnModel

REPORTED = [0, 5, 10, 15]  # rows of nodes 1, 6, 11, 16
SEEDS = range(5)
STEPS_PER_DAY = 720


def _verdict(number: int, ok: bool, detail: str):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="module")
def preset_runs():
    runs = {}
    for preset in (1, 2, 3):
        runs[preset] = [
            scenarios.run_comparison(scenarios.build_scenario(preset, seed=s))
            for s in SEEDS
        ]
    return runs


def _moisture_slope_oracle(h, p):
    """dtheta/dh by 50-digit differentiation of an independent theta."""
    alpha, n = mp.mpf(p.alpha), mp.mpf(p.n)
    span = mp.mpf(p.theta_s) - mp.mpf(p.theta_r)

    def theta(head):
        return span * (1 + (-alpha * head) ** n) ** (-(1 - 1 / n)) + mp.mpf(p.theta_r)

    with mp.workdps(50):
        return float(mp.diff(theta, mp.mpf(h)))


def test_criterion_1_closure_properties():
    rng = np.random.default_rng(101)
    worst_slope = 0.0
    ok = True
    for _ in range(1000):
        p = soil.SoilHydraulicParams(
            K_s=rng.uniform(1e-7, 1e-5),
            theta_s=rng.uniform(0.30, 0.50), theta_r=rng.uniform(0.02, 0.15),
            alpha=rng.uniform(0.5, 15.0), n=rng.uniform(1.2, 3.0))
        h = -10.0 ** rng.uniform(-2.5, 1.3)
        theta = soil.moisture_from_head(h, p)
        k = soil.hydraulic_conductivity(h, p)
        ok &= p.theta_r < theta < p.theta_s and 0.0 < k <= p.K_s
        wetter = h * 0.5
        ok &= soil.moisture_from_head(wetter, p) >= theta
        ok &= soil.hydraulic_conductivity(wetter, p) >= k
        slope = _moisture_slope_oracle(h, p)
        rel = abs(soil.capillary_capacity(h, p) - slope) / abs(slope)
        worst_slope = max(worst_slope, rel)
        ok &= rel <= 1e-5
    _verdict(1, ok, f"theta/K/c properties over 1000 samples, "
                    f"worst c vs dtheta/dh rel err {worst_slope:.2e} (<= 1e-5)")


def test_criterion_2_jacobians_match_finite_differences():
    column = ColumnModel.uniform(0.30, 16, LOAM, dt=120.0, substeps=12)
    rng = np.random.default_rng(102)
    worst_f = worst_h = 0.0
    for _ in range(100):
        x = rng.uniform(-2.0, -0.2, size=16)
        u = rng.uniform(0.0, 2e-6)
        jac = soil.state_jacobian(x, u, column)
        fd = np.empty_like(jac)
        for j in range(16):
            delta = np.zeros(16)
            delta[j] = 1e-6
            fd[:, j] = (soil.step_state(x + delta, u, column)
                        - soil.step_state(x - delta, u, column)) / 2e-6
        worst_f = max(worst_f,
                      np.linalg.norm(jac - fd) / np.linalg.norm(fd))
        sensors = [1, 4, 9, 16]
        h_jac = soil.output_jacobian(x, sensors, LOAM)
        h_fd = np.empty_like(h_jac)
        for j in range(16):
            delta = np.zeros(16)
            delta[j] = 1e-7
            h_fd[:, j] = (soil.output_map(x + delta, sensors, LOAM)
                          - soil.output_map(x - delta, sensors, LOAM)) / 2e-7
        worst_h = max(worst_h,
                      np.linalg.norm(h_jac - h_fd) / np.linalg.norm(h_fd))
    ok = worst_f <= 1e-3 and worst_h <= 1e-3
    _verdict(2, ok, f"100 random states: state-jacobian rel err "
                    f"{worst_f:.2e}, output-jacobian rel err {worst_h:.2e} "
                    f"(<= 1e-3)")


def test_criterion_3_mass_balance():
    # single-substep column so the integrator's internal increments are
    # the observable per-step increments
    column = ColumnModel.uniform(0.30, 16, LOAM, dt=10.0, substeps=1)
    h = np.full(16, -1.0)
    worst = 0.0
    for _ in range(1000):
        new = soil.step_state(h, 0.0, column)
        storage = np.sum(soil.capillary_capacity(h, LOAM)
                         * (new - h)) * column.dz
        outflow = soil.hydraulic_conductivity(h[-1], LOAM) * column.dt
        worst = max(worst, abs(storage + outflow) / outflow)
        h = new
    _verdict(3, worst <= 1e-6,
             f"1000 steps, q_T=0, sink off: worst relative residual "
             f"{worst:.2e} (<= 1e-6)")


def _grid_argmax_1d(evaluate, lo, hi, coarse):
    grid = np.arange(lo, hi, coarse)
    values = np.array([evaluate(g) for g in grid])
    i = int(np.argmax(values))
    i = min(max(i, 1), grid.size - 2)
    y0, y1, y2 = values[i - 1], values[i], values[i + 1]
    denom = y0 - 2 * y1 + y2
    if denom == 0.0:
        return grid[i]
    # exact vertex of the parabola through three equidistant samples;
    # the decayed Q-function is quadratic in a, so this is not an
    # approximation beyond the evaluations themselves
    return grid[i] + coarse * 0.5 * (y0 - y2) / denom


def test_criterion_4_mstep_matches_grid_search():
    column = ColumnModel.uniform(2 * 0.30 / 16, 2, LOAM, dt=120.0, substeps=12)
    noise = est.NoiseModel.isotropic(4e-9, 8e-7, 2, 1)
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(50):
        a = est.UnknownInputVector(rng.normal(scale=2e-5, size=2))
        ledger = est.RecursiveQLedger.initialize(a)
        x_prev = rng.uniform(-1.2, -0.6, size=2)
        for _ in range(rng.integers(2, 8)):
            gamma = rng.uniform(0.05, 0.8)
            d = rng.normal(scale=2e-5, size=2)
            x_now = soil.step_state(x_prev, 0.0, column) + d
            a = est.rem_mstep(a, x_now, x_prev, 0.0, gamma, column)
            ledger = ledger.decayed_and_accumulated(gamma, d, 0.0)
            x_prev = x_now
        for dim in range(2):
            def q_at(v, dim=dim):
                probe = a.a.copy()
                probe[dim] = v
                return est.evaluate_recursive_q(
                    ledger, est.UnknownInputVector(probe), noise)
            best = _grid_argmax_1d(q_at, -2e-4, 2e-4, 5e-6)
            worst = max(worst, abs(best - a.a[dim]))
    _verdict(4, worst <= 1e-6,
             f"50 random ledgers on a 2-node column: max |M-step - "
             f"grid argmax| {worst:.2e} (<= 1e-6)")


def _band_deviation(runs, after_day=6.0):
    a_avg = np.mean([r.a_rem for r in runs], axis=0)
    truth = runs[0].truth.a_true
    start = int(after_day * STEPS_PER_DAY)
    return np.abs(a_avg[start:, REPORTED] / truth[REPORTED] - 1.0).max(axis=0)


def _final_rmse(runs):
    ekf = np.mean([r.rmse_ekf[-1, REPORTED] for r in runs], axis=0)
    rem = np.mean([r.rmse_rem[-1, REPORTED] for r in runs], axis=0)
    return ekf, rem


def test_criterion_5_scenario_1(preset_runs):
    runs = preset_runs[1]
    dev = _band_deviation(runs)
    ekf, rem = _final_rmse(runs)
    band_ok = bool(np.all(dev <= 0.15))
    rmse_ok = bool(np.all(rem < ekf))
    _verdict(5, band_ok and rmse_ok,
             f"band max|a/3e-5 - 1| after day 6 per node {np.round(dev, 2)} "
             f"(need <= 0.15) -> {'ok' if band_ok else 'VIOLATED'}; "
             f"REM final RMSE < EKF at all reported nodes -> "
             f"{'ok' if rmse_ok else 'VIOLATED'}")


def test_criterion_6_scenario_2(preset_runs):
    runs = preset_runs[2]
    dev = _band_deviation(runs)
    ekf, rem = _final_rmse(runs)
    band_ok = bool(np.all(dev <= 0.20))
    rmse_ok = bool(np.all(rem < ekf))
    _verdict(6, band_ok and rmse_ok,
             f"band max|a/truth - 1| after day 6 per anchor {np.round(dev, 2)} "
             f"(need <= 0.20) -> {'ok' if band_ok else 'VIOLATED'}; "
             f"REM final RMSE < EKF at all anchors -> "
             f"{'ok' if rmse_ok else 'VIOLATED'}")


def test_criterion_7_scenario_3(preset_runs):
    runs = preset_runs[3]
    ekf, rem = _final_rmse(runs)
    ratio = rem / ekf
    ratio_ok = bool(np.all(ratio < 0.5))
    start = int(5 * STEPS_PER_DAY)
    worst_floor = 0.0
    for r in runs:
        truth = r.truth.states[start:, REPORTED]
        err = np.abs(r.h_rem[start:, REPORTED] - truth)
        floor = 3.0 * np.sqrt(r.config.r_var) / soil.capillary_capacity(
            truth, r.config.soil_params)
        worst_floor = max(worst_floor, float((err / floor).max()))
    floor_ok = worst_floor <= 1.0
    _verdict(7, ratio_ok and floor_ok,
             f"REM/EKF final RMSE per node {np.round(ratio, 3)} (< 0.5); "
             f"worst |h error| / (3 sigma measurement-equivalent) after "
             f"day 5 = {worst_floor:.2f} (<= 1)")


def test_criterion_8_sensor_placement():
    cfg = scenarios.build_scenario(1)
    column = cfg.model_column()

    def rollout(steps):
        xs, inputs = [cfg.x0_vector()], []
        for k in range(steps):
            u = cfg.irrigation.rate_at(k * cfg.dt)
            inputs.append(u)
            xs.append(soil.step_state(xs[-1], u, column))
        return xs, inputs

    xs, inputs = rollout(16)
    states_only = placement.select_sensors(column, xs, inputs, window=16,
                                           augmented=False)
    xs, inputs = rollout(32)
    augmented = placement.select_sensors(column, xs, inputs, window=32,
                                         augmented=True)

    toy = ColumnModel.uniform(3 * 0.30 / 16, 3, LOAM, dt=120.0, substeps=12)
    xs = [np.full(3, -1.0)]
    toy_inputs = []
    for k in range(6):
        u = cfg.irrigation.rate_at(k * cfg.dt)
        toy_inputs.append(u)
        xs.append(soil.step_state(xs[-1], u, toy))
    toy_greedy = placement.select_sensors(toy, xs, toy_inputs, window=6,
                                          augmented=True)
    sens = placement.sensitivity_matrix(xs, toy_inputs, 6, [1, 2, 3], toy,
                                        augmented=True)

    def rank_of(subset):
        matrix = sens.rows_for(list(subset))
        norms = np.linalg.norm(matrix, axis=0)
        scaled = matrix / np.where(norms > 0, norms, 1.0)
        sv = np.linalg.svd(scaled, compute_uv=False)
        return int(np.sum(sv >= 1e-8 * sv[0])) if sv[0] > 0 else 0

    exhaustive_min = next(
        size for size in range(1, 4)
        if any(rank_of(sub) == 6
               for sub in itertools.combinations([1, 2, 3], size)))

    ok = (states_only.achieved_rank == 16 and len(states_only.selected) <= 2
          and augmented.achieved_rank == 32
          and len(toy_greedy.selected) <= exhaustive_min)
    _verdict(8, ok,
             f"states-only: {len(states_only.selected)} sensors "
             f"{states_only.selected} at rank {states_only.achieved_rank}/16 "
             f"(<= 2); augmented: {len(augmented.selected)} sensors at rank "
             f"{augmented.achieved_rank}/32; toy greedy "
             f"{len(toy_greedy.selected)} vs exhaustive minimum "
             f"{exhaustive_min}")


def test_criterion_9_disabled_mstep_is_bit_identical_to_ekf():
    cfg = scenarios.build_scenario(1, horizon_days=1000 * 120.0 / 86400.0)
    sensors = list(cfg.sensors)
    truth = scenarios.simulate_truth(cfg, sensors)
    column = cfg.model_column()
    noise = est.NoiseModel.isotropic(cfg.q_var, cfg.r_var, 16, len(sensors))
    x_hat0 = cfg.guess_factor * cfg.x0_vector()

    ekf = est.StateBelief(x_hat0.copy(), cfg.p0_var * np.eye(16), 0)
    rem = est.StateBelief(x_hat0.copy(), cfg.p0_var * np.eye(16), 0)
    frozen = est.UnknownInputVector(cfg.a_guess_vector())
    a = est.UnknownInputVector(cfg.a_guess_vector())
    ledger = est.RecursiveQLedger.initialize(a)
    identical = True
    for k in range(truth.inputs.size):
        ekf = est.ekf_update(
            est.ekf_predict(ekf, truth.inputs[k], frozen, column, noise),
            truth.measurements[k], sensors, column, noise)
        rem, a, ledger = est.rem_step(
            rem, a, truth.measurements[k], truth.inputs[k], cfg.schedule,
            ledger, column, noise, sensors, mstep_enabled=False,
            diagnostics=False)
        identical &= (np.array_equal(ekf.mean, rem.mean)
                      and np.array_equal(ekf.covariance, rem.covariance))
    _verdict(9, identical,
             "1000 mismatched steps with the M-step disabled: REM and EKF "
             "trajectories bit-identical" if identical else
             "REM with disabled M-step diverged from the EKF")


def test_criterion_10_cli_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    code1 = cli_main(["scenario", "1", "--seed", "7", "--out", str(a)])
    code2 = cli_main(["scenario", "1", "--seed", "7", "--out", str(b)])
    same = all((a / name).read_bytes() == (b / name).read_bytes()
               for name in ("trajectory.csv", "rmse.csv"))
    ok = code1 == code2 == 0 and same
    _verdict(10, ok, "two `scenario 1 --seed 7` runs wrote byte-identical "
                     "CSV files" if ok else "CSV outputs differ across runs")
