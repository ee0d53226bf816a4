import numpy as np
import pytest

from latentupdate.errors import ValidationError
from latentupdate.simulate import SimConfig, append_observations, sim_params, simulate_cohort, simulate_patient


def test_deterministic_and_prefix_stable():
    a, la = simulate_cohort(SimConfig(n_patients=30, seed=4))
    b, lb = simulate_cohort(SimConfig(n_patients=10, seed=4))
    assert a[:10] == b and la[:10] == lb
    c, _ = simulate_cohort(SimConfig(n_patients=10, seed=5))
    assert c != b


def test_record_structure():
    cfg = SimConfig(n_patients=500, seed=1)
    recs, lats = simulate_cohort(cfg)
    assert len({r.id for r in recs}) == 500
    assert all(len(r.psa) >= 1 for r in recs)
    frac = np.mean([r.observed_class is not None for r in recs])
    assert abs(frac - cfg.frac_class_observed) < 3 * np.sqrt(0.2 * 0.8 / 500)
    for r, l in zip(recs, lats):
        if r.observed_class is not None:
            assert r.observed_class == l.eta
    eta = np.array([l.eta for l in lats])
    assert abs(eta.mean() - cfg.params.rho) < 3 * np.sqrt(0.3 * 0.7 / 500)


def test_psa_follows_latent_trajectory():
    cfg = sim_params(SimConfig(seed=2, psa_mean_count=30), sigma2=1e-8)
    rec, lat = simulate_patient(cfg, 0)
    mean = cfg.params.beta_age * rec.age_std + lat.u[0] + lat.u[1] * rec.psa_times
    np.testing.assert_allclose(rec.psa_values, mean, atol=1e-3)


def test_append_observations():
    cfg = SimConfig(seed=3)
    rec, lat = simulate_patient(cfg, 1)
    t = max(rec.last_psa_time, rec.last_biopsy_time) + 1
    ext = append_observations(rec, lat, cfg.params, [t, t + 0.5], ["psa", "biopsy"], seed=0)
    assert len(ext.psa) == len(rec.psa) + 1 and len(ext.biopsies) == len(rec.biopsies) + 1
    assert append_observations(rec, lat, cfg.params, [], [], seed=0) is rec
    with pytest.raises(ValidationError):
        append_observations(rec, lat, cfg.params, [t], ["mri"], seed=0)


def test_config_validation_and_round_trip():
    with pytest.raises(ValidationError):
        SimConfig(n_patients=0)
    with pytest.raises(ValidationError):
        SimConfig.from_dict({"n_patients": 3, "bogus": 1})
    cfg = SimConfig(n_patients=7, seed=9)
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
