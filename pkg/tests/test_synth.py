import numpy as np
import pandas as pd
import pytest

from actihist.design import assemble, variant_spec
from actihist.fitting import penalized_fit
from actihist.profiles import CleaningConfig, clean_cohort
from actihist.summaries import hist1d
from actihist.synth import (
    TruthSpec,
    f_true,
    gen_histograms,
    gen_outcomes,
    gen_profiles,
    read_truth,
    write_truth,
)


def test_default_profiles_mostly_clean():
    c = gen_profiles(TruthSpec(n=100), 2024)
    assert len(c.histograms) >= 95
    assert np.isnan(c.y).sum() == 100 - len(c.histograms)


def test_stuck_sedentary_chain_is_invalid():
    c = gen_profiles(TruthSpec(n=3, sedentary_persistence=1.0), 1)
    cleaned, _ = clean_cohort(c.profiles)
    assert not any(p.valid for p in cleaned)
    assert np.isnan(c.y).all() and not c.histograms


def test_no_nonwear_gives_full_days():
    t = TruthSpec(n=4, night_off=False, nonwear_blocks_per_day=0, spike_rate=0.0, sedentary_zero_prob=0.0)
    c = gen_profiles(t, 3)
    # no zero minutes, so nothing is marked as non-wear
    cleaned, _ = clean_cohort(c.profiles, CleaningConfig())
    for p in cleaned:
        assert [d.weartime for d in p.day_records] == [1440] * 7


def test_constant_outcome():
    t = TruthSpec(n=20, sigma=0.0, f_kind="zero", beta={"sex": 0.0, "weartime": 0.0, "m_obese": 0.0},
                  f2_slope=0.0, f2_curve=0.0, alpha=float(np.log(10.0)))
    c = gen_histograms(t, 5)
    assert np.allclose(c.y, 10.0, rtol=1e-14)
    y = gen_outcomes(c.histograms, c.covariates, t, 99)
    assert np.allclose(y, 10.0, rtol=1e-14)


def test_outcome_matches_linear_predictor():
    t = TruthSpec(n=30, sigma=0.0)
    c = gen_histograms(t, 8)
    cov = c.covariates
    eta = np.full(len(cov), t.alpha)
    eta += t.beta["sex"] * (cov.sex == "male") + t.beta["m_obese"] * cov.m_obese
    u = (cov.height - 150) / 10
    eta += t.f2_slope * u + t.f2_curve * u**2
    eta += [f_true(c.grid.midpoints, t) @ c.histograms[s].z for s in cov.subject_id]
    assert np.allclose(np.log(c.y), eta, rtol=0, atol=1e-12)


def test_noiseless_recovery():
    t = TruthSpec(n=300, sigma=0.0)
    c = gen_histograms(t, 1)
    D = assemble(variant_spec("hist"), c.covariates, c.histograms)
    term = D.term("f(p)")
    pts = term.eval_points
    truth = f_true(pts, t) - f_true(c.grid.midpoints[0], t)
    est = penalized_fit(D, lam=1e-8).term_function("f(p)")
    L = term.coef_map(pts)
    # best the basis can do on the included bins
    proj = L @ np.linalg.lstsq(L, truth, rcond=None)[0]
    approx = np.sqrt(np.mean((proj - truth) ** 2))
    err = np.sqrt(np.mean((est - truth) ** 2))
    assert err <= 3 * approx and err <= 0.05 * np.std(truth)


def test_deterministic_under_seed():
    a = gen_profiles(TruthSpec(n=10), 7)
    b = gen_profiles(TruthSpec(n=10), 7)
    assert all(np.array_equal(p.counts, q.counts, equal_nan=True) for p, q in zip(a.profiles, b.profiles))
    pd.testing.assert_frame_equal(a.covariates, b.covariates)
    h1, h2 = gen_histograms(TruthSpec(n=10), 7), gen_histograms(TruthSpec(n=10), 8)
    assert not np.array_equal(h1.y, h2.y)


def test_histograms_survive_pipeline():
    c = gen_profiles(TruthSpec(n=20), 4)
    cleaned, _ = clean_cohort(c.profiles)
    for p in cleaned:
        if p.valid:
            h = hist1d(p, c.grid)
            assert np.array_equal(h.z, c.histograms[p.subject_id].z)
            assert abs(h.z.sum() - 1) <= 1e-12 and h.z.min() >= 0


def test_truth_roundtrip(tmp_path):
    t = TruthSpec(n=7, f_kind="linear", beta={"sex": 0.1, "weartime": 0.0, "m_obese": 0.0})
    write_truth(t, tmp_path / "t.json", seed=3)
    assert read_truth(tmp_path / "t.json") == t


@pytest.mark.parametrize("level", ["hist", "profiles"])
def test_cohort_write(tmp_path, level):
    c = gen_histograms(TruthSpec(n=5), 1) if level == "hist" else gen_profiles(TruthSpec(n=5), 1)
    paths = c.write(tmp_path)
    assert all(p.exists() for p in paths.values())
    assert len(pd.read_csv(paths["covariates"])) == 5
