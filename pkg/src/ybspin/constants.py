"""Physical constants and unit conversions.

Spin-Hamiltonian matrix elements are kept in GHz (E/h). Photophysical
quantities use SI internally; the helpers at the bottom convert the
spectroscopic units (GHz/cm, cm^-3) used in tables and CSV files.
"""

from __future__ import annotations

from dataclasses import dataclass

import scipy.constants as sc

# SI, CODATA via scipy
EPSILON_0 = sc.epsilon_0
ELECTRON_MASS = sc.m_e
ELEMENTARY_CHARGE = sc.e
SPEED_OF_LIGHT = sc.c


@dataclass(frozen=True)
class PhysicalConstants:
    """Magneton and Boltzmann constants divided by h.

    Units are GHz/T for the magnetons and GHz/K for Boltzmann.
    """

    bohr_magneton_over_h: float = 13.9962449
    nuclear_magneton_over_h: float = 7.6225932e-3
    boltzmann_over_h: float = 20.836619

    def __post_init__(self):
        for name in ("bohr_magneton_over_h", "nuclear_magneton_over_h", "boltzmann_over_h"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")


DEFAULT_CONSTANTS = PhysicalConstants()


def ghz_per_cm_to_si(value: float) -> float:
    """Integrated absorption GHz/cm -> s^-1 m^-1."""
    return value * 1e9 * 1e2


def per_cm3_to_si(value: float) -> float:
    """Number density cm^-3 -> m^-3."""
    return value * 1e6
