import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lobmm.calibration import (
    CalibrationError,
    ExecCounts,
    TickArrays,
    build_execution_proxies,
    calibrate,
    estimate_exec_intensities,
    estimate_tick_clock,
    estimate_transition_matrix,
    extract_spread_jumps,
    fill_missing,
    read_ticks_csv,
    series_from_states,
    symmetrize,
    unvisited_states,
    write_ticks_csv,
)
from lobmm.model import SpreadGrid, reference_model
from lobmm.synthetic import simulate_spread_path, simulate_ticks

DELTA = 0.005
G = SpreadGrid(DELTA, 6)


def ticks_from(states, ts=None, bid_sz=None, ask_sz=None, buy=None, sell=None, mid=45.0):
    s = np.asarray(states, dtype=float)
    n = len(s)
    col = lambda v, d: np.asarray(v if v is not None else [d] * n, dtype=float)  # noqa: E731
    return TickArrays(
        col(ts, None) if ts is not None else np.arange(n, dtype=float),
        mid - s * DELTA / 2,
        mid + s * DELTA / 2,
        col(bid_sz, 200.0),
        col(ask_sz, 200.0),
        col(buy, 0.0),
        col(sell, 0.0),
    )


def test_jump_extraction_example():
    s = extract_spread_jumps(ticks_from([1, 1, 2, 2, 1]), G)
    # jumps at the 3rd and 5th records
    assert s.theta.tolist() == [2.0, 4.0]
    assert s.shat.tolist() == [1, 2, 1]


def test_constant_spread_has_no_jumps():
    s = extract_spread_jumps(ticks_from([3, 3, 3, 3]), G)
    assert len(s.theta) == 0


def test_out_of_range_records_are_counted():
    s = extract_spread_jumps(ticks_from([1, 9, 9, 2]), G)
    assert s.skipped == 2
    assert s.shat.tolist() == [1, 0, 2]


def test_empty_and_unsorted_inputs_rejected():
    with pytest.raises(CalibrationError):
        extract_spread_jumps(ticks_from([]), G)
    with pytest.raises(CalibrationError):
        extract_spread_jumps(ticks_from([1, 2, 1], ts=[0.0, 2.0, 1.0]), G)


def test_jump_count_matches_generator():
    rng = np.random.default_rng(3)
    model = reference_model()
    starts, states = simulate_spread_path(model, 0.0, 2000.0, rng)
    s = extract_spread_jumps(ticks_from(states, ts=starts), G)
    assert len(s.theta) == len(starts) - 1
    assert np.array_equal(s.shat, states)


def test_transition_matrix_alternation():
    rho = estimate_transition_matrix(series_from_states([1, 2, 1, 2, 1]), 2)
    assert rho[0, 1] == 1.0 and rho[1, 0] == 1.0


def test_transition_matrix_unvisited_rows_uniform():
    ser = series_from_states([1, 2, 1, 2])
    rho = estimate_transition_matrix(ser, 4)
    assert unvisited_states(ser, 4) == [3, 4]
    assert np.allclose(rho[2], [1 / 3, 1 / 3, 0, 1 / 3])
    with pytest.raises(CalibrationError):
        estimate_transition_matrix(ser, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=3, max_size=200))
def test_transition_rows_sum_to_one(states):
    ser = series_from_states(states)
    if len(ser.shat) < 2:
        return
    rho = estimate_transition_matrix(ser, 5)
    assert np.all(np.diag(rho) == 0)
    assert np.allclose(rho.sum(axis=1), 1.0, atol=1e-12)


def test_tick_clock_count_over_length():
    n = 3600
    starts = np.concatenate([[0.0], (np.arange(n) + 0.5)])
    states = np.where(np.arange(n + 1) % 2 == 0, 1, 2)
    ser = series_from_states(states, starts, horizon=3600.0)
    assert estimate_tick_clock(ser, [0.0, 3600.0])[0] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(CalibrationError):
        estimate_tick_clock(ser, [0.0, 0.0, 3600.0])


def _proxy_case(sell_total):
    # state 1 for (0, 10], the jump to state 2 closes the interval
    t = ticks_from([1, 1, 2], ts=[0.0, 5.0, 10.0], bid_sz=[200, 999, 999], sell=[0, sell_total, 0])
    return build_execution_proxies(t, G, v0=100)


def test_proxy_hand_traces():
    c = _proxy_case(150)
    assert c.counts[0, 1, 0] == 1 and c.counts[0, 0, 0] == 0
    c = _proxy_case(0)
    assert c.counts[0].sum() == 0
    c = _proxy_case(350)
    assert c.counts[0, 1, 0] == 1 and c.counts[0, 0, 0] == 1
    assert c.occupation[0, 0, 0] == 10.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 4), st.integers(0, 300), st.integers(0, 300)), min_size=2, max_size=40),
    st.data(),
)
def test_proxy_invariant_to_splitting_records(rows, data):
    states = [r[0] for r in rows]
    buy = [float(r[1]) for r in rows]
    sell = [float(r[2]) for r in rows]
    ts = [float(k) for k in range(len(rows))]
    base = build_execution_proxies(ticks_from(states, ts=ts, buy=buy, sell=sell), G, v0=100)
    k = data.draw(st.integers(1, len(rows) - 1))
    # split record k into an earlier copy carrying part of the volume
    fb = data.draw(st.integers(0, int(buy[k])))
    fs = data.draw(st.integers(0, int(sell[k])))
    st2 = states[:k] + [states[k - 1]] + states[k:]
    ts2 = ts[:k] + [ts[k] - 0.5] + ts[k:]
    buy2 = buy[:k] + [float(fb)] + [buy[k] - fb] + buy[k + 1 :]
    sell2 = sell[:k] + [float(fs)] + [sell[k] - fs] + sell[k + 1 :]
    split = build_execution_proxies(ticks_from(st2, ts=ts2, buy=buy2, sell=sell2), G, v0=100)
    assert np.array_equal(base.counts, split.counts)
    assert np.allclose(base.occupation, split.occupation)


def test_occupation_sums_to_observed_span():
    rng = np.random.default_rng(5)
    t = simulate_ticks(reference_model(), rng, days=1)
    ser = extract_spread_jumps(t, G)
    c = build_execution_proxies(t, G, series=ser)
    span = ser.theta[-1] - ser.starts[0]
    assert c.occupation[0, 0].sum() == pytest.approx(span, abs=1e-9)


def test_exec_intensity_ratio_and_missing_marker():
    counts = np.zeros((2, 2, 3), dtype=np.int64)
    occ = np.zeros((2, 2, 3))
    counts[0, 0, 0] = 10
    occ[0, 0, 0] = 100.0
    bid, ask = estimate_exec_intensities(ExecCounts(counts, occ))
    assert bid[0, 0] == pytest.approx(0.1)
    assert np.isnan(bid[1, 0]) and np.isnan(ask[0, 0])
    with pytest.raises(CalibrationError):
        estimate_exec_intensities(ExecCounts(counts, np.zeros((2, 2, 3))))


def test_fill_missing_uses_nearest_state():
    tab = np.array([[0.1, 0.2], [np.nan, np.nan], [0.3, 0.4], [np.nan, np.nan]])
    out, missing = fill_missing(tab)
    assert missing == [2, 4]
    assert out[1].tolist() == [0.1, 0.2] and out[3].tolist() == [0.3, 0.4]


def test_symmetrize():
    raw = reference_model(symmetric=False)
    sym = symmetrize(raw)
    assert sym.exec_bid[0, 0] == pytest.approx(0.06285, abs=1e-12)
    assert sym.exec_ask[0, 0] == pytest.approx(0.06285, abs=1e-12)
    again = symmetrize(sym)
    assert np.array_equal(again.exec_bid, sym.exec_bid) and np.array_equal(again.exec_ask, sym.exec_ask)
    assert np.array_equal(sym.rho, raw.rho)


def test_calibrate_end_to_end(tmp_path):
    rng = np.random.default_rng(11)
    model = reference_model()
    t = simulate_ticks(model, rng, days=2)
    path = tmp_path / "ticks.csv"
    write_ticks_csv(path, t)
    back = read_ticks_csv(path)
    assert all(np.array_equal(a, b) for a, b in zip(t, back))
    bounds = [34200.0 + 3600 * k for k in range(8)]
    est, report = calibrate(back, G, bounds, period=86400.0)
    assert report.n_records == len(t.ts)
    assert np.allclose(est.rho.sum(axis=1), 1.0)
    assert np.max(np.abs(est.rho - model.rho)) < 0.05
    assert np.all(np.isfinite(est.exec_bid)) and np.all(np.isfinite(est.exec_ask))


def test_read_ticks_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(CalibrationError):
        read_ticks_csv(p)
    p.write_text("")
    with pytest.raises(CalibrationError):
        read_ticks_csv(p)
