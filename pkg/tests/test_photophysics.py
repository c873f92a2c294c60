import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.constants import c as SPEED, physical_constants

from ybspin.photophysics import (
    AbsorptionRecord,
    OpticalMedium,
    absorption_table,
    aggregate_radiative_rate,
    branching_ratio,
    emission_oscillator_strength,
    local_field_factor,
    oscillator_strength,
    radiative_rate,
    records_from_adjacency,
)
from ybspin.spectra import ZERO_FIELD_ADJACENCY, boltzmann_populations
from ybspin.spinham import manifold_levels

from .conftest import GROUND

# CODATA r_e and the value implied by eps0, e, m_e, c agree to ~1e-11, hence 1e-9 below
R_E = physical_constants["classical electron radius"][0]
MEDIUM = OpticalMedium()
DENSITY = 1.24e18

# label: (pol, integrated absorption GHz/cm, f / 1e-6, rate / kHz) as printed
TABLE1 = {
    "A": ("pi", 97.3, 5.4, 1.3),
    "C": ("sigma", 16.4, 1.0, 0.3),
    "E": ("pi", 102.7, 5.5, 1.4),
    "F": ("sigma", 17.4, 1.1, 0.4),
    "G": ("sigma", 20.2, 2.6, 0.2),
    "H": ("sigma", 19.9, 2.6, 0.2),
    "I": ("pi", 189.7, 4.9, 1.2),
}


def populations():
    return boltzmann_populations(manifold_levels(GROUND), 2.0)


def table_rows():
    rows = [(k, v[0], v[1]) for k, v in TABLE1.items()]
    records = records_from_adjacency(rows, ZERO_FIELD_ADJACENCY)
    return records, absorption_table(records, populations(), DENSITY, MEDIUM)


def f_via_electron_radius(pol, alpha_ghz_cm, n_level_cm3):
    """Same relation written with r_e = e^2/(4 pi eps0 m c^2): f = sum_pol L(n) int(alpha) / (pi r_e c N)."""
    if pol == "pi":
        pol_sum = local_field_factor(MEDIUM.n_parallel)
    else:
        pol_sum = 2 * local_field_factor(MEDIUM.n_perpendicular)
    return pol_sum * alpha_ghz_cm * 1e11 / (np.pi * R_E * SPEED * n_level_cm3 * 1e6)


def rate_via_electron_radius(f_em, n):
    return 8 * np.pi**2 * R_E * SPEED / local_field_factor(n) * n**2 / MEDIUM.wavelength0**2 * f_em / 3


def test_transition_a_oscillator_strength():
    rec = AbsorptionRecord("A", "pi", 97.3, originating_level=3)
    p3 = populations()[2]
    f = oscillator_strength(rec, DENSITY, p3, MEDIUM)
    assert f == pytest.approx(5.4e-6, rel=0.10)
    assert f == pytest.approx(f_via_electron_radius("pi", 97.3, DENSITY * p3), rel=1e-9)


def test_zero_absorption_and_density_scaling():
    rec0 = AbsorptionRecord("x", "pi", 0.0, 1)
    assert oscillator_strength(rec0, DENSITY, 0.25, MEDIUM) == 0.0
    rec = AbsorptionRecord("x", "sigma", 10.0, 1)
    f1 = oscillator_strength(rec, DENSITY, 0.25, MEDIUM)
    assert oscillator_strength(rec, 2 * DENSITY, 0.25, MEDIUM) == pytest.approx(f1 / 2, rel=1e-14)


@pytest.mark.parametrize("pop", [0.0, -0.1, 1.5])
def test_population_outside_unit_interval_rejected(pop):
    with pytest.raises(ValueError):
        oscillator_strength(AbsorptionRecord("x", "pi", 1.0, 1), DENSITY, pop, MEDIUM)


def test_negative_absorption_rejected():
    with pytest.raises(ValueError):
        AbsorptionRecord("x", "pi", -1.0, 1)


def test_emission_oscillator_strength():
    assert emission_oscillator_strength(3e-6, 1, 1) == 3e-6
    assert emission_oscillator_strength(1e-6, 2, 1) == pytest.approx(2e-6)
    assert emission_oscillator_strength(emission_oscillator_strength(1.7e-6, 2, 1), 1, 2) == pytest.approx(1.7e-6)
    with pytest.raises(ValueError):
        emission_oscillator_strength(1e-6, 0, 1)


def test_radiative_rate_transition_a():
    rate = radiative_rate(5.4e-6, MEDIUM, "parallel")
    assert rate == pytest.approx(1.3e3, rel=0.10)
    assert rate == pytest.approx(rate_via_electron_radius(5.4e-6, 2.17), rel=1e-9)
    assert radiative_rate(0.0, MEDIUM, "parallel") == 0.0


@given(st.floats(0, 1e-3), st.sampled_from(["parallel", "perpendicular"]))
def test_rate_linear_in_f(f, axis):
    assert radiative_rate(2 * f, MEDIUM, axis) == pytest.approx(2 * radiative_rate(f, MEDIUM, axis), rel=1e-14)


@given(st.floats(1e-3, 500), st.sampled_from(list(TABLE1)))
def test_unit_coherence(alpha, label):
    pol = TABLE1[label][0]
    entry = ZERO_FIELD_ADJACENCY[label]
    recs = [AbsorptionRecord(label, pol, a, min(entry.ground), len(entry.ground), len(entry.excited), min(entry.excited)) for a in (alpha, 2 * alpha)]
    t1, t2 = absorption_table(recs, populations(), DENSITY, MEDIUM)
    assert t2.f_abs == pytest.approx(2 * t1.f_abs, rel=1e-12)
    assert t2.rate == pytest.approx(2 * t1.rate, rel=1e-12)


def test_table1_oscillator_strengths_and_rates():
    _, table = table_rows()
    for row in table:
        _, _, f_paper, rate_paper = TABLE1[row.label]
        assert row.f_abs == pytest.approx(f_paper * 1e-6, rel=0.10), row.label
        assert row.rate == pytest.approx(rate_paper * 1e3, rel=0.15), row.label


def test_table1_independent_route():
    records, table = table_rows()
    pops = populations()
    for rec, row in zip(records, table):
        start = rec.originating_level - 1
        pop = pops[start : start + rec.originating_degeneracy].sum()
        f = f_via_electron_radius(rec.pol, rec.integrated_alpha, DENSITY * pop)
        assert row.f_abs == pytest.approx(f, rel=1e-12)
        n = MEDIUM.n_parallel if rec.pol == "pi" else MEDIUM.n_perpendicular
        f_em = f * rec.originating_degeneracy / rec.excited_degeneracy
        assert row.rate == pytest.approx(rate_via_electron_radius(f_em, n), rel=1e-9)


def test_aggregate_reproduces_radiative_lifetime():
    records, table = table_rows()
    _, tau = aggregate_radiative_rate([(r, t.rate) for r, t in zip(records, table)])
    assert tau == pytest.approx(590e-6, rel=0.15)


def test_aggregate_from_printed_rate_column():
    records, _ = table_rows()
    printed = [(r, TABLE1[r.label][3] * 1e3) for r in records]
    _, tau = aggregate_radiative_rate(printed)
    assert tau == pytest.approx(590e-6, rel=0.15)


def test_aggregate_trivial_cases():
    rec = AbsorptionRecord("x", "pi", 1.0, 1, excited_level=1)
    assert aggregate_radiative_rate([(rec, 1234.0)])[0] == pytest.approx(1234.0)
    recs = [AbsorptionRecord(str(k), "pi", 1.0, 1, excited_level=k) for k in (1, 2, 3)]
    rate, tau = aggregate_radiative_rate([(r, 500.0) for r in recs])
    assert rate == pytest.approx(500.0) and tau == pytest.approx(1 / 500.0)
    assert aggregate_radiative_rate([(r, 500.0) for r in recs], mode="mean")[0] == pytest.approx(500.0)
    with pytest.raises(ValueError):
        aggregate_radiative_rate([])
    with pytest.raises(ValueError):
        aggregate_radiative_rate([(rec, 1.0)], mode="median")


def test_branching_ratio():
    assert branching_ratio(267e-6, 590e-6) == pytest.approx(0.452, abs=1e-3)
    assert branching_ratio(1.0, 1.0) == 1.0
    for bad in ((0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)):
        with pytest.raises(ValueError):
            branching_ratio(*bad)


def test_branching_ratio_above_one_warns():
    with pytest.warns(UserWarning):
        assert branching_ratio(2.0, 1.0) == 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        branching_ratio(0.5, 1.0)


def test_medium_validation():
    with pytest.raises(ValueError):
        OpticalMedium(n_parallel=0.9)
    with pytest.raises(ValueError):
        OpticalMedium(wavelength0=5e-6)


def test_adjacency_polarization_mismatch():
    with pytest.raises(ValueError):
        records_from_adjacency([("A", "sigma", 1.0)], ZERO_FIELD_ADJACENCY)
    with pytest.raises(KeyError):
        records_from_adjacency([("Z", "pi", 1.0)], ZERO_FIELD_ADJACENCY)
