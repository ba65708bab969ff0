import numpy as np
import pytest

from calibflow import gaussim
from calibflow.numcore import RngStream


@pytest.mark.parametrize("D", [1, 4])
def test_sufficient_statistics_match_full_vectors(D):
    """The (projection, orthogonal norm) draws reproduce the full-vector distance law."""
    r = RngStream(3)
    delta = np.zeros(D)
    delta[0] = 1.3
    z = r.normal((200000, D))
    full = np.linalg.norm(0.7 * z - delta, axis=1)
    a, rest = gaussim._hypothesis_stats(r, 200000, D)
    fast = np.sqrt(0.49 * (a * a + rest) - 2 * 0.7 * a * 1.3 + 1.69)
    for q in (0.1, 0.5, 0.9):
        assert np.quantile(full, q) == pytest.approx(np.quantile(fast, q), rel=0.01, abs=0.01)


def test_overconfident_at_pose_scale():
    fit = gaussim.optimize_sigma_minmpjpe(45, 200, 0.5, rng=RngStream(0), steps=600)
    assert fit.sigma_hat < 0.5


def test_underconfident_in_one_dimension():
    fit = gaussim.optimize_sigma_minmpjpe(1, 200, 0.5, rng=RngStream(0), steps=600)
    assert fit.sigma_hat > 0.5


def test_single_hypothesis_collapses_toward_zero():
    # brute-force oracle: E|x - s z| over a sigma grid is smallest at the smallest s
    r = RngStream(8)
    x = r.normal(100000) * 0.5
    z = r.normal(100000)
    grid = np.linspace(0.0, 1.0, 21)
    risk = [np.mean(np.abs(x - s * z)) for s in grid]
    assert int(np.argmin(risk)) == 0
    fit = gaussim.optimize_sigma_minmpjpe(3, 1, 0.5, rng=RngStream(1), steps=800)
    assert fit.sigma_hat < 0.05


@pytest.mark.parametrize("init", [0.25, 1.0])
def test_fit_basin_independent_of_init(init):
    a = gaussim.optimize_sigma_minmpjpe(5, 10, 0.5, rng=RngStream(2), steps=1500, init_sigma=init)
    b = gaussim.optimize_sigma_minmpjpe(5, 10, 0.5, rng=RngStream(2), steps=1500)
    assert a.sigma_hat == pytest.approx(b.sigma_hat, rel=0.05)


def test_fit_rejects_bad_sizes():
    with pytest.raises(ValueError):
        gaussim.optimize_sigma_minmpjpe(0, 5)


def test_grid_study_small():
    res = gaussim.grid_study([1, 20], [2, 50], seeds=[0], steps=500)
    tab = res.sigma_table()
    assert tab.shape == (2, 2)
    assert np.all(tab > 0)
    assert res.trend_violations() == []
    assert len(res.rows) == 4 and {"D", "N", "seed", "sigma_hat", "iterations", "converged"} <= set(res.rows[0])


def test_trend_violations_detects_inversion():
    rows = [{"D": 1, "N": 2, "sigma_hat": 1.0}, {"D": 1, "N": 5, "sigma_hat": 0.5}]
    res = gaussim.GridStudyResult([1], [2, 5], 0.5, [0], rows)
    assert len(res.trend_violations()) == 1


def test_oracle_identity_case():
    out = gaussim.oracle_comparison(D=5, N=20, true_sigma=0.5, sigma_hat=0.5, M=2000, rng=RngStream(4))
    assert out["min_mpjpe_fit"] == pytest.approx(out["min_mpjpe_oracle"], abs=1e-12)
    assert out["nll_fit"] == pytest.approx(out["nll_oracle"], abs=1e-12)


def test_gaussian_nll_closed_form():
    x = np.array([[0.0, 0.0]])
    assert gaussim.gaussian_nll(x, 0.0, 1.0) == pytest.approx(np.log(2 * np.pi))


def test_collapse_curve():
    out = gaussim.mpjpe_collapse_check(np.linspace(0, 2, 20), M=20000, N=5, true_sigma=1.0,
                                       rng=RngStream(0))
    assert out["monotone"]
    assert out["argmin_sigma"] == 0.0
    assert out["loss"][0] == pytest.approx(out["data_variance"], rel=1e-12)
    assert out["data_variance"] == pytest.approx(1.0, rel=0.03)
    # brute-force oracle of the decomposition: loss = Var[x] + sigma^2
    assert np.allclose(out["loss"], out["data_variance"] + out["sigma"] ** 2, rtol=0.02)


@pytest.mark.parametrize("N", [1, 3])
def test_mean_converges_for_normal_data(N):
    res = gaussim.mean_convergence_check(N=N, dist="normal", steps=1500, rng=RngStream(5))
    assert res.error < 0.05


def test_mean_profile_vanishes_at_the_data_mean():
    ez = gaussim.expected_winner(0.0, "normal", 5, 1.0, RngStream(6), M=200000)
    assert abs(ez) < 0.01


def test_sigmoid_fit_on_normal_data():
    res = gaussim.mean_convergence_check(N=5, dist="normal", steps=300, rng=RngStream(7))
    assert res.sigmoid_rmse < 0.05
    assert res.sigmoid_amp > 0


def test_skewed_data_optimum_matches_brute_force():
    res = gaussim.mean_convergence_check(N=5, dist="exponential", steps=2000, rng=RngStream(3))
    grid = np.linspace(0.8, 1.8, 51)
    oracle = gaussim.brute_force_mean("exponential", 5, 1.0, grid, RngStream(9))
    assert res.mu_hat == pytest.approx(oracle, abs=0.05)


def test_skewed_data_single_hypothesis_hits_mean():
    res = gaussim.mean_convergence_check(N=1, dist="exponential", steps=1500, rng=RngStream(3))
    assert res.error < 0.02


@pytest.fixture(scope="module")
def small_landscape():
    return gaussim.landscape(np.linspace(-2, 2, 21), np.linspace(2.0, 6.0, 21), N=5, M=20000,
                             n_calib_data=1000, seed=3)


def test_landscape_shapes_and_determinism(small_landscape):
    s = small_landscape
    assert s.min_mpjpe.shape == s.ece.shape == (21, 21)
    assert np.all(np.isfinite(s.min_mpjpe)) and np.all(np.isfinite(s.ece))
    again = gaussim.landscape(np.linspace(-4, 4, 5), np.linspace(0.4, 8.4, 5), N=5, M=8000,
                              n_calib_data=1000, seed=3)
    assert np.array_equal(again.ece, gaussim.landscape(again.mu_grid, again.sigma_grid, N=5, M=8000,
                                                       n_calib_data=1000, seed=3).ece)


def test_landscape_minmpjpe_finds_mean_not_sigma(small_landscape):
    mu, sigma = small_landscape.argmin_min_mpjpe()
    assert abs(mu) <= 0.2 and sigma < 4.0


def test_landscape_ece_manifold(small_landscape):
    s = small_landscape
    assert 3.6 <= s.ece_argmin_sigma(0.0) <= 4.4
    manifold = s.ece_manifold()
    row_min = s.ece.min(axis=1)
    assert np.sum(row_min < 0.05) >= 3
    # the ECE-optimal sigma grows as the mean moves away from the truth
    assert manifold[0] > manifold[10] and manifold[-1] > manifold[10]


def test_constrained_optimum(small_landscape):
    s = small_landscape
    # brute force over the grid
    cells = [(s.min_mpjpe[i, j], s.mu_grid[i], s.sigma_grid[j])
             for i in range(21) for j in range(21) if s.ece[i, j] <= 0.05]
    _, mu_bf, sig_bf = min(cells)
    assert gaussim.ece_constrained_minmpjpe(s, 0.05) == (mu_bf, sig_bf)
    assert gaussim.ece_constrained_minmpjpe(s, 1.0) == s.argmin_min_mpjpe()
    with pytest.raises(ValueError, match="larger budget"):
        gaussim.ece_constrained_minmpjpe(s, s.ece.min() / 2)


def test_landscape_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        gaussim.landscape([0.0], [0.0, 1.0])


def test_landscape_roundtrip(small_landscape):
    back = gaussim.LandscapeSurface.from_dict(small_landscape.to_dict())
    assert np.array_equal(back.ece, small_landscape.ece)
