import io

import numpy as np
import pytest

from ppde_nrde import problems, sde
from ppde_nrde.signatures import PiecewisePath


def make_path(spec, values):
    return PiecewisePath(spec.grid.fine_times(), values)


# --------------------------------------------------------------------------- #
# payoff                                                                      #
# --------------------------------------------------------------------------- #


def test_heat_payoff_zero_path():
    spec = problems.heat_problem(1)
    p = make_path(spec, np.zeros((101, 1)))
    assert problems.payoff(spec, p) == 0.0


def test_heat_payoff_constant_path():
    spec = problems.heat_problem(2)
    p = make_path(spec, np.ones((101, 2)))
    # integral of the coordinate sum (=2) over [0,1] by left sums is exactly 2
    assert problems.payoff(spec, p) == pytest.approx(4.0, rel=1e-12)


def test_lookback_payoff_increasing_path_is_zero():
    spec = problems.lookback_problem(2)
    t = spec.grid.fine_times()
    values = np.stack([t + 1.0, 2 * t + 1.0], axis=1)
    assert problems.payoff(spec, make_path(spec, values)) == 0.0


def test_lookback_payoff_peak_in_middle():
    spec = problems.lookback_problem(1)
    t = spec.grid.fine_times()
    values = (1.0 - np.abs(t - 0.5))[:, None]  # peaks at 1.0, ends at 0.5
    assert problems.payoff(spec, make_path(spec, values)) == pytest.approx(0.5)


def test_autocallable_payoff_cases():
    spec = problems.autocallable_problem()
    t = spec.grid.fine_times()
    flat = np.stack([np.full_like(t, 1.0), np.full_like(t, 0.3)], axis=1)

    # first observation date above the barrier -> first coupon
    v = flat.copy()
    v[:, 0] = np.where(np.abs(t - 1 / 6) < 0.03, 1.05, 1.0)
    assert problems.payoff(spec, make_path(spec, v)) == 1.1

    # below barrier throughout, S(T) = 1 -> redemption 0.9
    v = flat.copy()
    assert problems.payoff(spec, make_path(spec, v)) == pytest.approx(0.9)

    # only the second date above the barrier -> second coupon
    v = flat.copy()
    v[:, 0] = np.where(np.abs(t - 1 / 3) < 0.03, 1.2, 1.0)
    assert problems.payoff(spec, make_path(spec, v)) == 1.2


def test_autocallable_payoff_value_set():
    spec = problems.autocallable_problem()
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=300, seed=5)
    vals = problems.payoff_values(spec, batch.values)
    redemption = 0.9 * batch.values[:, -1, 0]
    ok = (vals == 1.1) | (vals == 1.2) | np.isclose(vals, redemption)
    assert np.all(ok)


def test_lookback_payoff_nonnegative():
    spec = problems.lookback_problem(3)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=500, seed=1)
    assert np.all(problems.payoff_values(spec, batch.values) >= 0)


def test_payoff_rejects_wrong_horizon():
    spec = problems.heat_problem(1)
    short = PiecewisePath(np.linspace(0, 0.5, 51), np.zeros((51, 1)))
    with pytest.raises(ValueError):
        problems.payoff(spec, short)


# --------------------------------------------------------------------------- #
# target_value                                                                #
# --------------------------------------------------------------------------- #


def test_target_equals_payoff_when_rate_zero():
    spec = problems.heat_problem(1)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=1, seed=0)
    p = batch[0]
    g = problems.payoff(spec, p)
    for t in spec.grid.coarse_times():
        assert problems.target_value(spec, p, t) == pytest.approx(g, rel=1e-14)


def test_target_at_horizon_is_payoff():
    spec = problems.lookback_problem(2)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=1, seed=3)
    p = batch[0]
    assert problems.target_value(spec, p, 1.0) == pytest.approx(problems.payoff(spec, p), rel=1e-14)


def test_target_discount_factor():
    spec = problems.lookback_problem(1, rate=0.05)
    t = spec.grid.fine_times()
    values = np.exp(t)[:, None] * 0 + 1.0
    values[-1, 0] = 0.0  # payoff = max(sum) - sum(T) = 1 - 0 = 1
    p = make_path(spec, values)
    assert problems.payoff(spec, p) == pytest.approx(1.0)
    got = problems.target_value(spec, p, 0.0)
    assert got == pytest.approx(np.exp(-0.05), rel=1e-12)
    with pytest.raises(ValueError):
        problems.target_value(spec, p, 0.123)


def test_target_nodes_matches_scalar_api():
    spec = problems.lookback_problem(2)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=4, seed=9)
    table = problems.target_nodes(spec, batch.values)
    for j, t in enumerate(spec.grid.coarse_times()):
        for i in range(4):
            assert table[i, j] == pytest.approx(problems.target_value(spec, batch[i], t), rel=1e-13)


# --------------------------------------------------------------------------- #
# heat_analytic                                                               #
# --------------------------------------------------------------------------- #


def test_heat_analytic_zero_prefix():
    # at t=0 only the (d/3) T^3 term survives
    assert problems.heat_analytic(([0.0], np.zeros((1, 1))), 1.0) == pytest.approx(1 / 3)


def test_heat_analytic_d3_zero_prefix():
    assert problems.heat_analytic(([0.0], np.zeros((1, 3))), 1.0) == pytest.approx(1.0)


def test_heat_analytic_terminal_equals_payoff():
    spec = problems.heat_problem(2)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=10, seed=21)
    for p in batch:
        assert problems.heat_analytic(p, 1.0) == pytest.approx(problems.payoff(spec, p), rel=1e-12)


def test_heat_analytic_nodes_matches_scalar():
    spec = problems.heat_problem(3)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=5, seed=2)
    table = problems.heat_analytic_nodes(batch.values, spec.grid)
    idx = spec.grid.coarse_indices()
    for i in range(5):
        for j, k in enumerate(idx):
            want = problems.heat_analytic((batch.times[: k + 1], batch.values[i, : k + 1]), 1.0)
            assert table[i, j] == pytest.approx(want, rel=1e-10, abs=1e-12)


# --------------------------------------------------------------------------- #
# mc_oracle                                                                   #
# --------------------------------------------------------------------------- #


def test_mc_oracle_agrees_with_heat_analytic():
    spec = problems.heat_problem(1)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=1, seed=33)
    prefix = PiecewisePath(batch.times[:51], batch.values[0, :51])
    mean, se = problems.mc_oracle(spec, prefix, n_sims=2000, seed=77)
    want = problems.heat_analytic(prefix, 1.0)
    assert abs(mean - want) < 3 * se


def test_mc_oracle_deterministic_case_has_zero_error():
    spec = problems.lookback_problem(1, rate=0.0, vols=0.0)
    t = spec.grid.fine_times()
    prefix = PiecewisePath(t[:11], np.ones((11, 1)))
    mean, se = problems.mc_oracle(spec, prefix, n_sims=16, seed=0)
    # constant path continues flat: running max equals terminal sum, payoff 0
    assert mean == 0.0 and se == 0.0


def test_mc_oracle_clt_scaling():
    spec = problems.heat_problem(1)
    prefix = PiecewisePath(spec.grid.fine_times()[:1 + 10], np.zeros((11, 1)))
    ratios = []
    for rep in range(10):
        _, se1 = problems.mc_oracle(spec, prefix, n_sims=400, seed=100 + rep)
        _, se2 = problems.mc_oracle(spec, prefix, n_sims=800, seed=500 + rep)
        ratios.append(se2 / se1)
    avg = np.mean(ratios)
    assert abs(avg - 1 / np.sqrt(2)) < 0.2 * (1 / np.sqrt(2))


def test_mc_oracle_unbiased_band_coverage():
    spec = problems.heat_problem(1)
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=1, seed=4)
    prefix = PiecewisePath(batch.times[:31], batch.values[0, :31])
    want = problems.heat_analytic(prefix, 1.0)
    inside = 0
    for rep in range(50):
        mean, se = problems.mc_oracle(spec, prefix, n_sims=500, seed=1000 + rep)
        if abs(mean - want) <= 3 * se:
            inside += 1
    assert inside >= 45


def test_mc_oracle_argument_validation():
    spec = problems.heat_problem(1)
    prefix = PiecewisePath(spec.grid.fine_times()[:11], np.zeros((11, 1)))
    with pytest.raises(ValueError):
        problems.mc_oracle(spec, prefix, n_sims=1, seed=0)
    bad = PiecewisePath(spec.grid.fine_times()[:12], np.zeros((12, 1)))
    with pytest.raises(ValueError):
        problems.mc_oracle(spec, bad, n_sims=10, seed=0)


def test_mc_oracle_heston_prefix_carries_volatility():
    spec = problems.autocallable_problem()
    batch = sde.simulate_batch(spec.dynamics, spec.init, spec.grid, batch=1, seed=8)
    prefix = PiecewisePath(batch.times[:21], batch.values[0, :21])
    mean, se = problems.mc_oracle(spec, prefix, n_sims=400, seed=3)
    assert np.isfinite(mean) and se >= 0


def test_oracle_cache_roundtrip():
    spec = problems.heat_problem(1)
    prefix = PiecewisePath(spec.grid.fine_times()[:11], np.zeros((11, 1)))
    cache = problems.OracleCache()
    mean, se = problems.mc_oracle(spec, prefix, n_sims=200, seed=0, cache=cache)
    again = problems.mc_oracle(spec, prefix, n_sims=200, seed=999, cache=cache)
    assert again == (mean, se)  # served from cache, seed ignored
    buf = io.StringIO()
    cache.save(buf)
    buf.seek(0)
    loaded = problems.OracleCache.load(buf)
    assert loaded.get(spec, prefix, 0.1) == (mean, se)
    with pytest.raises(ValueError):
        problems.OracleCache.load(io.StringIO("bad,header\n"))
