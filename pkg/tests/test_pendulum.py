import numpy as np
import pytest

from calibflow.numcore import RngStream
from calibflow.pendulum import (MODELS, AuditError, IntegratorError, PendulumConfig, audit_conditions,
                                energy, energy_drift, fit_sigma_minmpjpe, fit_sigma_nll, make_datasets,
                                observe, positions, read_datasets, simulate, training_masks,
                                write_datasets)
from calibflow.pendulum.sim import accelerations, rest_energy


def test_rest_configuration_is_stationary():
    cfg = PendulumConfig(n_pendulums=2)
    tr = simulate(cfg, RngStream(0), omega0=np.zeros((2, 3)))
    assert np.array_equal(tr.theta, np.zeros_like(tr.theta))
    assert np.allclose(tr.positions[:, :, 1:, 1], [-1, -2, -3])


def test_energy_conserved_over_25_frames():
    cfg = PendulumConfig(max_energy_drift=1.0)
    tr = simulate(cfg, RngStream(3))
    assert energy_drift(tr.energy, cfg).max() < 1e-4


def test_energy_oracle_single_link_limit():
    # with negligible outer masses the first link obeys the simple pendulum equation
    cfg = PendulumConfig(n_pendulums=1, masses=(1.0, 1e-9, 1e-9), lengths=(1.0, 1e-3, 1e-3))
    a = accelerations(np.array([[0.01, 0.01, 0.01]]), np.zeros((1, 3)), cfg)
    assert a[0, 0] == pytest.approx(-9.81 * np.sin(0.01), rel=1e-3)
    assert rest_energy(PendulumConfig()) == pytest.approx(-9.81 * 6)


def test_fixed_node_and_link_lengths():
    cfg = PendulumConfig(n_pendulums=5)
    tr = simulate(cfg, RngStream(1))
    assert np.all(tr.positions[:, :, 0] == 0)
    links = np.linalg.norm(np.diff(tr.positions, axis=2), axis=-1)
    assert np.abs(links - 1.0).max() < 1e-12


def test_simulation_deterministic_and_prefix_stable():
    a = simulate(PendulumConfig(n_pendulums=4), RngStream(2))
    b = simulate(PendulumConfig(n_pendulums=4), RngStream(2))
    c = simulate(PendulumConfig(n_pendulums=6), RngStream(2))
    assert a.theta.tobytes() == b.theta.tobytes()
    assert np.array_equal(c.theta[:4], a.theta)


def test_integrator_blow_up_is_reported():
    cfg = PendulumConfig(n_pendulums=3, velocity_var=400.0, substeps=1, dt=0.05)
    with pytest.raises(IntegratorError, match="drift|non-finite"):
        simulate(cfg, RngStream(0))


def test_energy_matches_positions():
    cfg = PendulumConfig()
    th = np.array([[0.3, -0.2, 1.0]])
    pos = positions(th, cfg)
    pot = 9.81 * pos[0, 1:, 1].sum()
    assert energy(th, np.zeros((1, 3)), cfg)[0] == pytest.approx(pot)


def test_observation_noise():
    x = np.zeros((100000, 3, 2))
    c, m = observe(x, 0.0, RngStream(0))
    assert np.array_equal(c, x) and m.all()
    cfg = PendulumConfig()
    c, _ = observe(x, cfg.noise_std, RngStream(1))
    assert c.var() == pytest.approx(0.05, rel=0.05)
    assert PendulumConfig(noise=0.05, noise_is_std=True).noise_std == 0.05
    c, m = observe(np.zeros((4, 3, 2)), 0.1, RngStream(2), mask=[1, 0, 1])
    assert np.isnan(c[:, 1]).all() and not np.isnan(c[:, [0, 2]]).any()


@pytest.fixture(scope="module")
def datasets():
    return make_datasets(PendulumConfig(), RngStream(4))


def test_dataset_counts_and_disjoint_splits(datasets):
    total = sum(len(s) for s in datasets.splits.values())
    assert total == 50 * 25
    ids = [set(s.pendulum.tolist()) for s in datasets.splits.values()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_model_conditions_audit(datasets):
    report = audit_conditions(datasets, RngStream(0))
    assert report["I"] == [3] and report["II"] == [1]
    assert max(report["III"]) <= 2 and 0 in report["III"]
    assert training_masks(datasets, "III", RngStream(1)).sum(axis=1).max() <= 2
    b = datasets.model_batch("train", "II")
    assert np.all(b.context[:, 1:] == 0) and np.all(b.mask == [1, 0, 0])


def test_audit_rejects_full_observation_for_masked_context_model(datasets, monkeypatch):
    monkeypatch.setitem(MODELS, "III", {**MODELS["III"], "fractions": (0.2, 1.0)})
    with pytest.raises(AuditError, match="all three"):
        audit_conditions(datasets, RngStream(0))


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        make_datasets(PendulumConfig(n_pendulums=4), RngStream(0), split=(0.5, 0.5, 0.5))


def test_dataset_files_roundtrip(tmp_path, datasets):
    write_datasets(tmp_path, datasets)
    back = read_datasets(tmp_path)
    for k in datasets.splits:
        assert np.array_equal(back.splits[k].x, datasets.splits[k].x)
        assert np.array_equal(back.splits[k].pendulum, datasets.splits[k].pendulum)
    assert back.config == datasets.config


def test_sigma_fits_on_isotropic_gaussian_residuals():
    # 6 equal-scale dimensions: NLL recovers the scale, minMPJPE with N=200 shrinks it
    res = RngStream(0).normal((4000, 3, 2), std=0.3)
    snll = fit_sigma_nll(res)
    assert np.allclose(snll, 0.3, rtol=0.05)
    smm, _ = fit_sigma_minmpjpe(res, 200, RngStream(1), steps=800)
    assert np.all(smm < snll)
