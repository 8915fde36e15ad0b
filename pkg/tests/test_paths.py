import numpy as np
import pytest

from smalldiff.models import make_builtin
from smalldiff.paths import (ObservationSet, ParseError, PathError,
                             load_observations, save_observations,
                             simulate_sde, solve_ode)


def test_ode_exponential_decay(ou_model):
    path = solve_ode(ou_model, (1.0,), steps=1000)
    assert path.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-9)
    assert path.states[0, 0] == 1.0


def test_ode_zero_drift_constant(ou_model):
    path = solve_ode(ou_model, (0.05,), steps=10)  # near-zero decay
    zero = solve_ode(make_builtin("model3", {
        "drift": lambda x, a: np.zeros_like(np.asarray(x, dtype=float)),
        "drift_jacobian_x": None}), np.full(6, 1.0), steps=50)
    np.testing.assert_allclose(zero.states, np.ones((51, 3)))
    assert path.grid.shape == (11,)


def test_ode_step_halving_consistency():
    sir = make_builtin("sir", {"T": 1.0})
    a = solve_ode(sir, (1.2, 1.0), steps=10_000).states
    b = solve_ode(sir, (1.2, 1.0), steps=20_000).states[::2]
    assert np.abs(a - b).max() <= 1e-8


def test_ode_fourth_order_ratio():
    m1 = make_builtin("model1")
    alpha = (3.0, 6.0, 5.0, 4.0)
    ref = solve_ode(m1, alpha, steps=4096).states[-1]
    e1 = np.abs(solve_ode(m1, alpha, steps=64).states[-1] - ref).max()
    e2 = np.abs(solve_ode(m1, alpha, steps=128).states[-1] - ref).max()
    assert 8.0 <= e1 / e2 <= 24.0  # 16 +- 50%


def test_ode_blowup_reported():
    m = make_builtin("model3", {
        "drift": lambda x, a: np.asarray(x, dtype=float) ** 3 * 1e3,
        "drift_jacobian_x": None})
    with pytest.raises(PathError, match="t="):
        solve_ode(m, np.full(6, 1.0), steps=100)


def test_sde_zero_noise_matches_euler_limit(ou_model):
    obs = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.0, n=20, refine=10, seed=1)
    path = solve_ode(ou_model, (1.0,), steps=2000)
    gap = np.abs(obs.values[:, 0] - path.states[::100, 0]).max()
    assert gap <= 5 * obs.h


def test_sde_determinism(ou_model):
    a = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.1, n=50, refine=5, seed=9, stream_id=3)
    b = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.1, n=50, refine=5, seed=9, stream_id=3)
    assert np.array_equal(a.values, b.values)
    c = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.1, n=50, refine=5, seed=9, stream_id=4)
    assert not np.array_equal(a.values, c.values)


def test_sde_increment_variance_matches_law():
    # pure noise model: increments are exactly N(0, eps^2 h) per step
    m = make_builtin("model3", {
        "d": 1, "r": 1, "x0": (0.0,),
        "p": 1, "q": 0, "box_alpha": [(0.1, 2.0)], "box_beta": [],
        "drift": lambda x, a: np.zeros_like(np.asarray(x, dtype=float)),
        "diffusion": lambda x, b: np.ones(np.asarray(x, dtype=float).shape[:-1] + (1, 1)),
        "drift_jacobian_x": None})
    eps, n = 0.3, 100_000
    obs = simulate_sde(m, (1.0,), eps=eps, n=n, refine=1, seed=4)
    incs = np.diff(obs.values[:, 0])
    assert abs(incs.var() / (eps ** 2 * obs.h) - 1.0) < 0.02


def test_sde_weak_error_ou(ou_model):
    # mean of X_T over many seeds matches the exponential decay within 3 SE
    n_rep, eps = 10_000, 0.1
    finals = np.empty(n_rep)
    for i in range(n_rep):
        obs = simulate_sde(ou_model, (1.0,), (1.0,), eps=eps, n=20, refine=10,
                           seed=77, stream_id=i + 1)
        finals[i] = obs.values[-1, 0]
    target = np.exp(-1.0)
    se = finals.std(ddof=1) / np.sqrt(n_rep)
    assert abs(finals.mean() - target) <= 3 * se + 1.5e-3  # Euler bias allowance


def test_observation_set_invariants():
    with pytest.raises(ValueError, match="increasing"):
        ObservationSet(times=[0.0, 0.2, 0.1], values=np.zeros((3, 1)), epsilon=0.1, T=0.2)
    with pytest.raises(ValueError, match="uniform"):
        ObservationSet(times=[0.0, 0.1, 0.4], values=np.zeros((3, 1)), epsilon=0.1, T=0.4)


def test_csv_round_trip(tmp_path, ou_model):
    obs = simulate_sde(ou_model, (1.0,), (0.5,), eps=0.01, n=25, refine=3, seed=11)
    f = tmp_path / "obs.csv"
    save_observations(obs, f)
    back = load_observations(f)
    assert np.array_equal(back.values, obs.values)
    assert np.array_equal(back.times, obs.times)
    assert back.epsilon == obs.epsilon and back.T == obs.T and back.seed == 11


def test_csv_missing_eps_rejected(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("# n=1 T=1 d=1\nt,x1\n0,0\n1,1\n")
    with pytest.raises(ParseError, match="eps"):
        load_observations(f)


def test_csv_non_monotone_times_rejected(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("# n=2 T=1 eps=0.1 d=1\nt,x1\n0,0\n0.7,1\n0.3,2\n")
    with pytest.raises(ParseError, match="increasing"):
        load_observations(f)


def test_csv_bad_row_names_line(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("# n=2 T=1 eps=0.1 d=1\nt,x1\n0,0\n0.5,oops\n1,2\n")
    with pytest.raises(ParseError, match="line 4"):
        load_observations(f)
