"""End-to-end acceptance suite; each criterion prints one PASS/FAIL line in the summary.

Run alone with ``pytest tests/test_acceptance.py`` (or ``python3 tests/test_acceptance.py``).
"""

import hashlib
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lobmm.analytics import FRONTIER_GAMMAS, efficient_frontier
from lobmm.calibration import (
    estimate_exec_intensities,
    estimate_tick_clock,
    estimate_transition_matrix,
    extract_spread_jumps,
    series_from_states,
    symmetrize,
    tally_executions,
)
from lobmm.cli import main as cli_main
from lobmm.model import REF_CLOCK_RATES, REF_RHO, SpreadGrid, TickClock, normalize_rows, reference_model
from lobmm.simulator import SimConfig, benchmark_suite
from lobmm.solver import SolverParams, check_solution, solve_exponential, solve_mean_criterion, terminal_values
from lobmm.synthetic import simulate_jump_chain, simulate_quoted_executions, simulate_ticks
from oracles import expectimax

N_PATHS = 10_000
SEED = 20240901


def record(k, ok, detail):
    ACCEPTANCE_LINES[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[k])
    assert ok, detail


def test_c01_transition_matrix_round_trip():
    rho = normalize_rows(REF_RHO)
    t0 = time.perf_counter()
    path = simulate_jump_chain(rho, 1_000_000, np.random.default_rng(SEED))
    est = estimate_transition_matrix(series_from_states(path), 6)
    dt = time.perf_counter() - t0
    err = float(np.max(np.abs(est - rho)))
    record(1, err < 0.01 and dt < 10, f"max|rho_hat - rho| = {err:.5f} (< 0.01), runtime {dt:.2f} s (< 10 s)")


def test_c02_tick_clock_round_trip():
    bounds = [34200.0 + 3600.0 * k for k in range(8)]
    model = replace(reference_model(), tick_clock=TickClock(tuple(bounds), REF_CLOCK_RATES))
    ticks = simulate_ticks(model, np.random.default_rng(SEED), days=10, extra_records=0.0)
    series = extract_spread_jumps(ticks, SpreadGrid(0.005, 6))
    est = estimate_tick_clock(series, bounds, period=86400.0)
    rel = np.abs(est - np.array(REF_CLOCK_RATES)) / np.array(REF_CLOCK_RATES)
    record(2, bool(np.all(rel < 0.05)), f"max relative bucket error {rel.max():.4f} (< 0.05) over 10 days")


def test_c03_execution_intensity_round_trip():
    model = reference_model(symmetric=False)
    rng = np.random.default_rng(SEED)
    total = None
    horizon = 0.0
    target = 1e5
    while True:
        dur, state, qb, qa, nb, na = simulate_quoted_executions(model, 5e5, rng)
        part = tally_executions(dur, state, qb, qa, nb, na, 6)
        total = part if total is None else total + part
        horizon += 5e5
        occ = total.occupation.copy()
        occ[:, 1, 0] = np.inf  # improved quotes do not exist at a one-tick spread
        if occ.min() >= target:
            break
    bid, ask = estimate_exec_intensities(total)
    rel_b = np.abs(bid - model.exec_bid) / model.exec_bid
    rel_a = np.abs(ask - model.exec_ask) / model.exec_ask
    rel_b[0, 1] = rel_a[0, 1] = 0.0
    worst = float(max(rel_b.max(), rel_a.max()))
    record(3, worst < 0.10, f"max relative error {worst:.4f} (< 0.10), min cell occupation {occ.min():.0f} s, horizon {horizon:.0f} s")


@pytest.fixture(scope="module")
def exp_solution(ref_model, default_grid):
    params = SolverParams(objective="exponential", gamma=0.0, eta=0.01, sigma=ref_model.price.sigma)
    surf, pol = solve_exponential(ref_model, default_grid, params)
    return surf, pol, params


def test_c04_terminal_conditions(ref_model, default_grid, default_params, solved_star, exp_solution):
    surf, _ = solved_star
    e_surf, _, e_params = exp_solution
    err_m = float(np.max(np.abs(surf.values[-1] - terminal_values(ref_model, default_grid, default_params))))
    y = np.abs(default_grid.y)[:, None]
    half = np.arange(1, 7) * ref_model.delta / 2
    want_m = -y * half[None, :] - ref_model.fees.fixed_fee
    want_e = np.exp(e_params.eta * y * half[None, :])
    err_m = max(err_m, float(np.max(np.abs(surf.values[-1] - want_m))))
    err_e = float(np.max(np.abs(e_surf.values[-1] - want_e)))
    record(4, err_m == 0 and err_e == 0, f"terminal error mean {err_m:g}, exponential {err_e:g} (must be 0)")


def test_c05_obstacle(ref_model, default_grid, default_params, solved_star, exp_solution):
    d = check_solution(solved_star[0], ref_model, default_grid, default_params)
    e_surf, _, e_params = exp_solution
    de = check_solution(e_surf, ref_model, default_grid, e_params)
    ok = d["obstacle_violation"] <= 1e-9 and de["obstacle_violation"] <= 1e-9 and de["positive"]
    record(5, ok, f"max(M phi - phi) = {d['obstacle_violation']:.3g}, exponential relative {de['obstacle_violation']:.3g} (<= 1e-9)")


def test_c06_oracle_equivalence():
    from test_solver import ORACLE_GRID, two_state_model

    model = two_state_model()
    params = SolverParams(gamma=2e-4, lbar=10.0, ebar=10.0, inventory_unit=1.0)
    t0 = time.perf_counter()
    surf, _ = solve_mean_criterion(model, ORACLE_GRID, params)
    want = expectimax(model, ORACLE_GRID, params, surf.dtau, 2)
    dt = time.perf_counter() - t0
    diff = float(np.max(np.abs(surf.values[0] - want)))
    ok = diff <= 1e-12 and dt < 1.0 and surf.substeps == 1 and ORACLE_GRID.ny == 5
    record(6, ok, f"|DP - exhaustive| = {diff:.3g} (<= 1e-12), runtime {dt:.3f} s (< 1 s)")


def test_c07_monotonicity(ref_model, default_grid, default_params, solved_star, solved_womo):
    phi = solved_star[0].values
    womo = solved_womo[0].values
    low_gamma, _ = solve_mean_criterion(ref_model, default_grid, replace(default_params, gamma=0.049))
    a = float(np.max(womo - phi))
    b = float(np.max(phi - low_gamma.values))
    record(7, a <= 1e-9 and b <= 1e-9, f"max(phi_womo - phi) = {a:.3g}, max(phi_g5 - phi_g0.049) = {b:.3g} (<= 1e-9)")


def test_c08_symmetry(ref_model, default_grid, default_params, solved_star):
    surf, pol = solved_star
    assert np.array_equal(ref_model.exec_bid, symmetrize(ref_model).exec_bid)
    res = float(np.max(np.abs(surf.values - surf.values[:, ::-1, :])))
    mirrors = pol.mirrored().same_actions(pol)
    record(8, res <= 1e-9 and mirrors, f"symmetry residual {res:.3g} (<= 1e-9), policy mirrors exactly: {mirrors}")


@pytest.fixture(scope="module")
def suite(ref_model, solved_star, solved_womo):
    cfg = SimConfig(n_paths=N_PATHS, seed=SEED)
    t0 = time.perf_counter()
    res = benchmark_suite(solved_star[1], solved_womo[1], ref_model, cfg, keep_paths=True)
    return res, time.perf_counter() - t0


def test_c09_backtest_orderings(suite):
    res, dt = suite
    ir = {k: v.ir for k, v in res.items()}
    sig = {k: v.std["x_T"] for k, v in res.items()}
    my = {k: v.mean["max_abs_y"] for k, v in res.items()}
    ir_ok = ir["optimal"] > ir["womo"] > ir["constant"] > ir["random"]
    ratio = sig["constant"] / sig["optimal"]
    y_ok = my["womo"] < my["optimal"] < my["constant"] < my["random"]
    detail = (
        f"IR {ir['optimal']:.3f} > {ir['womo']:.3f} > {ir['constant']:.3f} > {ir['random']:.3f}: {ir_ok}; "
        f"sigma ratio {ratio:.2f} (> 2); m(sup|Y|) {my['womo']:.1f} < {my['optimal']:.1f} < {my['constant']:.1f} < {my['random']:.1f}: {y_ok}; "
        f"runtime {dt:.0f} s"
    )
    record(9, ir_ok and ratio > 2 and y_ok and dt < 120, detail)


def test_c10_symmetric_execution_counts(suite):
    res, _ = suite
    worst = 0.0
    parts = []
    for name, s in res.items():
        d = s.paths["n_bid"].astype(float) - s.paths["n_ask"]
        se = d.std() / np.sqrt(len(d))
        z = abs(d.mean()) / se
        worst = max(worst, z)
        parts.append(f"{name} {s.mean['n_bid']:.3f}/{s.mean['n_ask']:.3f}")
    record(10, worst < 3, f"max |m(N_b) - m(N_a)| / SE = {worst:.2f} (< 3); " + ", ".join(parts))


def test_c11_efficient_frontier(ref_model, default_grid):
    t0 = time.perf_counter()
    rows = efficient_frontier(ref_model, FRONTIER_GAMMAS, default_grid, SimConfig(n_paths=N_PATHS, seed=SEED))
    dt = time.perf_counter() - t0
    sig = np.array([r.sigma_star for r in rows])
    nir = np.array([r.nir for r in rows])
    inversions = int(np.sum(np.diff(sig) <= 0))
    peak = int(np.argmax(nir))
    ok = len(rows) == 14 and inversions <= 1 and 0 < peak < len(rows) - 1 and dt < 1800
    detail = (
        f"sigma* {sig[0]:.2f} -> {sig[-1]:.2f} with {inversions} inversion(s) (<= 1); "
        f"NIR peak {nir[peak]:.3f} at gamma={rows[peak].gamma} (interior); runtime {dt:.0f} s"
    )
    record(11, ok, detail)


def test_c12_martingale(ref_model, suite):
    res, _ = suite
    p_T = res["constant"].paths["p_T"]
    bound = 3 * ref_model.price.sigma * np.sqrt(300.0) / np.sqrt(len(p_T))
    dev = abs(p_T.mean() - ref_model.price.p0)
    record(12, dev < bound, f"|mean(P_T) - p0| = {dev:.2e} (< {bound:.2e})")


def _run_all(folder, threads):
    f = lambda name: str(folder / name)  # noqa: E731
    t = ["--threads", str(threads), "--seed", "7"]
    small = ["--T", "60", "--n-out", "20"]
    steps = [
        ["reference-model", "--out", f("model.json"), *t],
        ["solve", "--model", f("model.json"), *small, "--out", f("star.json"), "--dump-values", f("values.csv"), *t],
        ["solve", "--model", f("model.json"), *small, "--ebar", "0", "--out", f("womo.json"), *t],
        ["backtest", "--model", f("model.json"), "--policy", f("star.json"), "--policy-womo", f("womo.json"),
         "--T", "60", "--paths", "3000", "--out", f("stats.csv"), "--per-path", f("paths.csv"), *t],
        ["frontier", "--model", f("model.json"), *small, "--gammas", "4,1", "--paths", "1000", "--out", f("frontier.csv"), *t],
        ["export", "--policy", f("star.json"), "--slice", "30", "--out", f("heat.csv"), *t],
        ["export", "--stats", f("paths.optimal.csv"), "--hist", f("hist.csv"), *t],
    ]
    codes = [cli_main(s) for s in steps]
    return codes, {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_c13_determinism(tmp_path):
    (tmp_path / "t1").mkdir()
    (tmp_path / "t8").mkdir()
    (tmp_path / "t8b").mkdir()
    c1, h1 = _run_all(tmp_path / "t1", 1)
    c8, h8 = _run_all(tmp_path / "t8", 8)
    c8b, h8b = _run_all(tmp_path / "t8b", 8)
    ok = c1 == c8 == c8b == [0] * len(c1) and h1 == h8 == h8b and len(h1) >= 10
    record(13, ok, f"{len(h1)} output files byte-identical across --threads 1, 8, 8: {h1 == h8 == h8b}; exit codes {c1}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
