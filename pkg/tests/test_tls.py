import numpy as np
import pytest
from scipy.integrate import quad

from photoclick.errors import DegeneratePosteriorError
from photoclick.tls import (
    density_normalisation,
    density_via_expm,
    exact_log_likelihood_tls,
    exact_posterior_tls,
    log_waiting_time_density,
    sample_tls_records,
    tls_grid,
    true_rmse_map,
    waiting_time_density,
)
from photoclick.trajectories import PhotoclickRecord

# 40-digit matrix-exponential values, frozen
ORACLE = [
    ((0.0, 1.0, 1.0, 0.7), 0.083712783014456155905),
    ((1.3, 0.2, 1.0, 5.0), 0.0041839058548831139333),
    ((2.0, 2.0, 1.0, 30.0), 0.001676967660870000473),
    ((1.0, 1.0, 1.0, 1e-4), 2.499874999479297113e-9),
    ((0.5, 1.5, 1.0, 2.0), 0.36770061286935705522),
]


@pytest.mark.parametrize("args,expected", ORACLE)
def test_density_matches_oracle(args, expected):
    assert waiting_time_density(*args) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("args,expected", ORACLE)
def test_expm_reference_matches_oracle(args, expected):
    assert density_via_expm(*args) == pytest.approx(expected, rel=1e-9)


def test_density_starts_at_zero_and_is_finite_in_log_space():
    assert waiting_time_density(1.0, 1.0, 1.0, 0.0) == 0.0
    # far out the density underflows but its log stays finite
    lw = log_waiting_time_density(0.3, 1.0, 1.0, 5e4)
    assert np.isfinite(lw) and lw < -700


@pytest.mark.parametrize("delta,omega", [(0.0, 1.0), (1.0, 1.0), (2.0, 0.3), (0.5, 2.0), (2.0, 2.0)])
def test_density_normalisation(delta, omega):
    total, tail = density_normalisation(delta, omega)
    assert tail < 1e-10
    assert total == pytest.approx(1.0, abs=1e-9)


def test_density_even_in_detuning():
    tau = np.linspace(0.01, 20, 50)
    assert np.allclose(waiting_time_density(1.3, 0.8, 1.0, tau), waiting_time_density(-1.3, 0.8, 1.0, tau), rtol=1e-12)


def test_likelihood_factorises_over_waits():
    waits = [0.4, 1.7, 3.2]
    ll = exact_log_likelihood_tls(PhotoclickRecord(waits), 0.7, 1.1)
    assert ll == pytest.approx(sum(np.log(waiting_time_density(0.7, 1.1, 1.0, t)) for t in waits), rel=1e-13)


def test_empty_record_and_dark_atom():
    assert exact_log_likelihood_tls(PhotoclickRecord([]), 1.0, 1.0) == 0.0
    assert exact_log_likelihood_tls(PhotoclickRecord([1.0]), 1.0, 0.0) == -np.inf


def test_posterior_ignores_grid_cells_with_zero_drive():
    rec = sample_tls_records((0.5, 1.0), 1, 20, seed=3)[0]
    post = exact_posterior_tls(rec, tls_grid(11))
    assert post.marginal("omega")[0] == 0.0
    assert post.weights.sum() == pytest.approx(1.0)


def test_posterior_on_dark_grid_is_degenerate():
    rec = PhotoclickRecord([1.0, 2.0])
    grid = tls_grid(3, 0.0, 0.0 + 1e-9, names=("omega",))
    with pytest.raises(DegeneratePosteriorError):
        exact_posterior_tls(rec, grid.__class__([("omega", [0.0])]), delta=0.0)


def test_long_record_posterior_mean_near_truth():
    # 200 clicks give a posterior sd near 0.08; averaging 8 records keeps the check far from chance
    recs = sample_tls_records((1.0, 1.0), 8, 200, seed=0)
    means = np.array([exact_posterior_tls(r, tls_grid(41)).mean().as_array() for r in recs])
    assert np.all(np.abs(means.mean(axis=0) - 1.0) < 0.15)
    assert np.all(np.abs(means - 1.0) < 0.3)


def test_grid_refinement_moves_mean_less_than_a_cell():
    rec = sample_tls_records((0.8, 1.2), 1, 50, seed=9)[0]
    coarse = exact_posterior_tls(rec, tls_grid(21)).mean().as_array()
    fine = exact_posterior_tls(rec, tls_grid(41)).mean().as_array()
    assert np.all(np.abs(coarse - fine) < 0.1)


def test_true_rmse_map_shrinks_with_more_clicks():
    grid = tls_grid(11, names=("delta",))
    short = true_rmse_map([(1.0, 1.0)], grid, n_clicks=10, n_mc=30, seed=1)
    long = true_rmse_map([(1.0, 1.0)], grid, n_clicks=80, n_mc=30, seed=1)
    assert long[0] < short[0]
    assert np.isnan(true_rmse_map([(1.0, 0.0)], grid, n_mc=2)[0])


def test_sampled_waits_follow_density():
    rec = sample_tls_records((0.0, 1.0), 1, 4000, seed=2)[0]
    edges = np.linspace(0, 15, 31)
    counts, _ = np.histogram(rec.waiting_times, edges)
    probs = np.array([quad(lambda t: waiting_time_density(0.0, 1.0, 1.0, t), a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    tv = 0.5 * np.abs(counts / len(rec) - probs).sum()
    assert tv < 0.04
