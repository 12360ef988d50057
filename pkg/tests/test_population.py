import copy

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st
from scipy import stats

from mortgagesim.errors import ValidationError
from mortgagesim.money import to_cents
from mortgagesim.population import (
    Group,
    assign_group,
    default_calibration_path,
    load_calibration,
    parse_calibration,
    sample_borrower,
    sample_population,
)


@pytest.fixture(scope="module")
def raw():
    return yaml.safe_load(default_calibration_path().read_text())


def test_bundled_calibration_loads(calibration):
    assert calibration.synthetic
    assert len(calibration.digest) == 64
    assert abs(calibration.bin_probabilities.sum() - 1.0) < 1e-12
    assert calibration.original_term_months == 360


def test_bin_probabilities_must_sum_to_one(raw):
    bad = copy.deepcopy(raw)
    bad["income_bins"][0]["probability"] += 0.01
    with pytest.raises(ValidationError) as err:
        parse_calibration(bad)
    assert err.value.field == "income_bins"


def test_bad_conditional_names_its_field(raw):
    bad = copy.deepcopy(raw)
    bad["income_bins"][3]["assets_given_income"]["probabilities"] = [0.5, 0.5, 0.5]
    with pytest.raises(ValidationError) as err:
        parse_calibration(bad)
    assert err.value.field == "income_bins[3].assets_given_income"


def test_missing_field(raw):
    bad = copy.deepcopy(raw)
    del bad["ami"]
    with pytest.raises(ValidationError, match="ami"):
        parse_calibration(bad)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.yaml"
    with pytest.raises(ValidationError, match="nope.yaml"):
        load_calibration(p)


def test_group_boundary_is_exact(calibration):
    # the cut is 80% of AMI = 64000 a year, i.e. 533333.33 cents a month
    assert assign_group(533333, calibration) is Group.LOW_INCOME
    assert assign_group(533334, calibration) is Group.OTHER


@given(st.integers(0, 2**32 - 1))
def test_sampled_profile_invariants(seed):
    cal = load_calibration()
    p = sample_borrower(cal, np.random.default_rng(seed))
    n = cal.original_term_months
    assert 1 <= p.term_remaining <= n
    assert p.total_loan == p.monthly_payment_m * n
    assert p.paid_to_date == p.monthly_payment_m * (n - p.term_remaining)
    assert p.income0 * 12 >= to_cents(cal.min_income) - 12
    assert min(p.monthly_payment_m, p.nonhousing_expenses0, p.savings0) >= 0
    assert 0.0 <= p.liquidity_preference_gamma <= 1.0
    assert p.group is assign_group(p, cal)
    ib = cal.income_bins[p.income_bin]
    assert p.monthly_payment_m in {to_cents(v) for v in ib.mortgage.values}


def test_population_is_seed_determined(calibration):
    a = sample_population(calibration, 30, np.random.default_rng(4))
    b = sample_population(calibration, 30, np.random.default_rng(4))
    assert a == b
    fixed = sample_population(calibration, 30, np.random.default_rng(4), gamma=0.5)
    assert {p.liquidity_preference_gamma for p in fixed} == {0.5}


def test_bin_frequencies_follow_marginal(calibration):
    pop = sample_population(calibration, 4000, np.random.default_rng(0), gamma=0.5)
    counts = np.bincount([p.income_bin for p in pop], minlength=len(calibration.income_bins))
    expected = calibration.bin_probabilities * len(pop)
    assert stats.chisquare(counts, expected).pvalue > 0.001


def test_low_income_share_is_substantial(calibration):
    pop = sample_population(calibration, 2000, np.random.default_rng(1))
    share = np.mean([p.group is Group.LOW_INCOME for p in pop])
    assert 0.2 < share < 0.6
