"""Oscillator strengths, radiative rates and branching ratios.

Integrated absorption is given in GHz/cm and number densities in cm^-3, as
in spectroscopy tables; everything is converted to SI before use.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .constants import (
    ELECTRON_MASS,
    ELEMENTARY_CHARGE,
    EPSILON_0,
    SPEED_OF_LIGHT,
    ghz_per_cm_to_si,
    per_cm3_to_si,
)
from .spectra import AdjacencyEntry

Axis = Literal["parallel", "perpendicular"]

# 4 pi eps0 m_e c / (pi e^2), units s m^-2
ABSORPTION_PREFACTOR = 4 * EPSILON_0 * ELECTRON_MASS * SPEED_OF_LIGHT / ELEMENTARY_CHARGE**2
# 2 pi e^2 / (eps0 m_e c), units m^2 s^-1
EMISSION_PREFACTOR = 2 * np.pi * ELEMENTARY_CHARGE**2 / (EPSILON_0 * ELECTRON_MASS * SPEED_OF_LIGHT)


@dataclass(frozen=True)
class OpticalMedium:
    """Uniaxial host: refractive indices for E || c and E perp c, vacuum wavelength in m."""

    n_parallel: float = 2.17
    n_perpendicular: float = 1.96
    wavelength0: float = 984.5e-9

    def __post_init__(self):
        if not (self.n_parallel > 1 and self.n_perpendicular > 1):
            raise ValueError("refractive indices must exceed 1")
        if not 0.3e-6 < self.wavelength0 < 3e-6:
            raise ValueError(f"wavelength {self.wavelength0} m outside 0.3-3 um")

    def index(self, axis: Axis) -> float:
        if axis == "parallel":
            return self.n_parallel
        if axis == "perpendicular":
            return self.n_perpendicular
        raise ValueError(f"unknown axis {axis!r}")


def axis_for(pol: str) -> Axis:
    return "parallel" if pol == "pi" else "perpendicular"


@dataclass(frozen=True)
class AbsorptionRecord:
    """One measured line. Levels are 1-based zero-field indices."""

    label: str
    pol: Literal["pi", "sigma"]
    integrated_alpha: float
    originating_level: int
    originating_degeneracy: int = 1
    excited_degeneracy: int = 1
    excited_level: int | None = None

    def __post_init__(self):
        if self.pol not in ("pi", "sigma"):
            raise ValueError(f"polarization must be 'pi' or 'sigma', got {self.pol!r}")
        if self.integrated_alpha < 0:
            raise ValueError("integrated absorption must be nonnegative")
        if self.originating_degeneracy < 1 or self.excited_degeneracy < 1:
            raise ValueError("degeneracies must be >= 1")


def local_field_factor(n: float) -> float:
    """9n / (n^2 + 2)^2."""
    return 9 * n / (n**2 + 2) ** 2


def oscillator_strength(
    rec: AbsorptionRecord,
    number_density: float,
    level_population: float,
    medium: OpticalMedium,
) -> float:
    """Absorption oscillator strength from a polarized integrated absorption.

    The polarization sum runs over (c, a, a): a pi line is seen along c only,
    a sigma line along both perpendicular axes, so it counts twice.
    ``level_population`` is the fraction of ``number_density`` (cm^-3) sitting
    in the originating level (summed over a degenerate group).
    """
    if not number_density > 0:
        raise ValueError("number density must be positive")
    if not 0 < level_population <= 1:
        raise ValueError(f"level population must be in (0, 1], got {level_population}")
    n_level = per_cm3_to_si(number_density) * level_population
    if rec.pol == "pi":
        pol_sum = local_field_factor(medium.n_parallel)
    else:
        pol_sum = 2 * local_field_factor(medium.n_perpendicular)
    return ABSORPTION_PREFACTOR * pol_sum * ghz_per_cm_to_si(rec.integrated_alpha) / n_level


def emission_oscillator_strength(f_abs: float, gi: int, gj: int) -> float:
    """f_ji = (g_i / g_j) f_ij."""
    if gi < 1 or gj < 1:
        raise ValueError("degeneracies must be >= 1")
    return gi / gj * f_abs


def radiative_rate(f_em: float, medium: OpticalMedium, axis: Axis) -> float:
    """Spontaneous emission rate (s^-1) for emission oscillator strength ``f_em``."""
    if f_em < 0:
        raise ValueError("oscillator strength must be nonnegative")
    n = medium.index(axis)
    return EMISSION_PREFACTOR / local_field_factor(n) * n**2 / medium.wavelength0**2 * f_em / 3


def aggregate_radiative_rate(
    records_with_rates: Sequence[tuple[AbsorptionRecord, float]],
    mode: Literal["per_level", "mean"] = "per_level",
) -> tuple[float, float]:
    """Average radiative rate (s^-1) and the corresponding lifetime (s).

    ``per_level`` sums the rates out of each excited level and averages the
    totals over excited states (a degenerate level counts once per state).
    ``mean`` is the plain arithmetic mean of the rates.
    """
    if not records_with_rates:
        raise ValueError("no records to aggregate")
    if mode == "mean":
        rate = float(np.mean([r for _, r in records_with_rates]))
    elif mode == "per_level":
        totals: dict[int, float] = {}
        degeneracy: dict[int, int] = {}
        for rec, r in records_with_rates:
            if rec.excited_level is None:
                raise ValueError(f"record {rec.label!r} has no excited level; use mode='mean'")
            totals[rec.excited_level] = totals.get(rec.excited_level, 0.0) + r
            if degeneracy.setdefault(rec.excited_level, rec.excited_degeneracy) != rec.excited_degeneracy:
                raise ValueError(f"inconsistent degeneracy for excited level {rec.excited_level}")
        weights = np.array([degeneracy[k] for k in totals], dtype=float)
        rate = float(np.dot(weights, list(totals.values())) / weights.sum())
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return rate, (1 / rate if rate > 0 else float("inf"))


def branching_ratio(tau_f: float, tau_rad: float) -> float:
    """beta = tau_f / tau_rad; warns when the inputs give beta > 1."""
    if not (tau_f > 0 and tau_rad > 0):
        raise ValueError("lifetimes must be positive")
    beta = tau_f / tau_rad
    if beta > 1:
        warnings.warn(f"branching ratio {beta:.3f} > 1: fluorescence and radiative lifetimes are inconsistent")
    return beta


def records_from_adjacency(
    rows: Sequence[tuple[str, str, float]],
    adjacency: Mapping[str, AdjacencyEntry],
) -> list[AbsorptionRecord]:
    """Attach level assignments from the adjacency table to (label, pol, alpha) rows."""
    out = []
    for label, pol, alpha in rows:
        if label not in adjacency:
            raise KeyError(f"line {label!r} is not in the adjacency table")
        entry = adjacency[label]
        if entry.pol != pol:
            raise ValueError(f"line {label}: polarization {pol} disagrees with adjacency ({entry.pol})")
        out.append(
            AbsorptionRecord(
                label=label,
                pol=pol,
                integrated_alpha=float(alpha),
                originating_level=min(entry.ground),
                originating_degeneracy=len(entry.ground),
                excited_degeneracy=len(entry.excited),
                excited_level=min(entry.excited),
            )
        )
    return out


@dataclass(frozen=True)
class TableRow:
    label: str
    pol: str
    integrated_alpha: float
    f_abs: float
    f_em: float
    rate: float


def absorption_table(
    records: Sequence[AbsorptionRecord],
    populations: Sequence[float],
    number_density: float,
    medium: OpticalMedium,
) -> list[TableRow]:
    """Oscillator strength and radiative rate for each record.

    ``populations`` are the fractional populations of the four ground levels.
    """
    if not records:
        raise ValueError("no absorption records")
    pops = np.asarray(populations, dtype=float)
    rows = []
    for rec in records:
        start = rec.originating_level - 1
        pop = float(pops[start : start + rec.originating_degeneracy].sum())
        f = oscillator_strength(rec, number_density, pop, medium)
        f_em = emission_oscillator_strength(f, rec.originating_degeneracy, rec.excited_degeneracy)
        rate = radiative_rate(f_em, medium, axis_for(rec.pol))
        rows.append(TableRow(rec.label, rec.pol, rec.integrated_alpha, f, f_em, rate))
    return rows
