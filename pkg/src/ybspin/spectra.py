"""Optical-hyperfine transition catalogs and absorption spectrum synthesis."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy.signal import find_peaks, peak_widths

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .spinham import FieldVector, LevelSet, ManifoldParams, manifold_levels

Polarization = Literal["pi", "sigma"]

MERGE_TOL = 1e-3  # GHz
FORBIDDEN_REL = 1e-12
MIN_SAMPLES_PER_FWHM = 8
# relative sigma:pi dipole strength; sqrt of the sigma/pi ratio of summed
# integrated absorption over the zero-field lines (73.9 / 389.7 GHz/cm)
DEFAULT_SIGMA_STRENGTH = float(np.sqrt(73.9 / 389.7))


class GridError(ValueError):
    """Detuning grid is unusable for the requested lineshape."""


@dataclass(frozen=True)
class TransitionMoment:
    """Electron pseudo-spin transition operator for one polarization.

    ``m[s_e, s_g]`` maps ground doublet state ``s_g`` to excited doublet
    state ``s_e`` (index 0 = up, 1 = down). It acts as ``m (x) 1`` on the
    nuclear spin.
    """

    pol: Polarization
    m: np.ndarray

    def __post_init__(self):
        if self.pol not in ("pi", "sigma"):
            raise ValueError(f"polarization must be 'pi' or 'sigma', got {self.pol!r}")
        m = np.asarray(self.m, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError("transition moment must be a 2x2 matrix")
        if not np.any(m != 0):
            raise ValueError(f"{self.pol} transition moment is identically zero")
        object.__setattr__(self, "m", m)

    def operator(self) -> np.ndarray:
        return np.kron(self.m, np.eye(2))


def default_moments(pi_strength: float = 1.0, sigma_strength: float = DEFAULT_SIGMA_STRENGTH) -> list[TransitionMoment]:
    """Electron-spin-conserving pi and electron-spin-flipping sigma moments."""
    return [
        TransitionMoment("pi", pi_strength * np.eye(2)),
        TransitionMoment("sigma", sigma_strength * np.array([[0, 1], [1, 0]])),
    ]


@dataclass(frozen=True)
class AdjacencyEntry:
    """Zero-field level pair(s) behind one lettered absorption line (1-based levels)."""

    pol: Polarization
    ground: tuple[int, ...]
    excited: tuple[int, ...]


# Lettered zero-field lines. Degenerate pairs are listed together. C/F are the
# sigma lines starting in the degenerate ground pair, G/H end in the excited
# pair; this is what the degeneracy ratios of the oscillator-strength and
# radiative-rate columns require.
ZERO_FIELD_ADJACENCY: dict[str, AdjacencyEntry] = {
    "A": AdjacencyEntry("pi", (3,), (1,)),
    "C": AdjacencyEntry("sigma", (1, 2), (1,)),
    "E": AdjacencyEntry("pi", (4,), (2,)),
    "F": AdjacencyEntry("sigma", (1, 2), (2,)),
    "G": AdjacencyEntry("sigma", (4,), (3, 4)),
    "H": AdjacencyEntry("sigma", (3,), (3, 4)),
    "I": AdjacencyEntry("pi", (1, 2), (3, 4)),
}


@dataclass(frozen=True)
class TransitionLine:
    """One optical-hyperfine line.

    ``freq`` is (E_e + offset_e) - (E_g + offset_g) in GHz. Level indices are
    1-based; for merged lines they are the lowest index of each degenerate
    group and ``ground_levels``/``excited_levels`` list the whole group.
    """

    freq: float
    pol: Polarization
    amplitude: float
    gi: int
    gj: int
    ground_index: int
    excited_index: int
    label: str = ""
    forbidden: bool = False
    ground_levels: tuple[int, ...] = ()
    excited_levels: tuple[int, ...] = ()


@dataclass(frozen=True)
class LineshapeParams:
    kind: Literal["gaussian", "lorentzian"] = "gaussian"
    fwhm: float = 0.275
    overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("gaussian", "lorentzian"):
            raise ValueError(f"unknown lineshape {self.kind!r}")
        if not self.fwhm > 0 or any(not v > 0 for v in self.overrides.values()):
            raise ValueError("FWHM must be positive")

    def width(self, label: str = "") -> float:
        return float(self.overrides.get(label, self.fwhm)) if label else self.fwhm

    @property
    def min_width(self) -> float:
        return min([self.fwhm, *self.overrides.values()])


@dataclass(frozen=True)
class Spectrum:
    """Absorption coefficient (cm^-1) sampled on a detuning grid (GHz)."""

    detunings: np.ndarray
    alpha: np.ndarray
    pol: Polarization
    metadata: dict = field(default_factory=dict)


def _clusters(energies: np.ndarray, tol: float) -> list[tuple[int, ...]]:
    out, current = [], [0]
    for k in range(1, len(energies)):
        if energies[k] - energies[k - 1] < tol:
            current.append(k)
        else:
            out.append(tuple(current))
            current = [k]
    out.append(tuple(current))
    return out


def _same_field(a: FieldVector, b: FieldVector) -> bool:
    return bool(np.allclose(a.as_array(), b.as_array(), rtol=0, atol=1e-12))


def transition_catalog(
    ground: LevelSet,
    excited: LevelSet,
    moments: Sequence[TransitionMoment],
    *,
    merge: bool = True,
    merge_tol: float = MERGE_TOL,
    forbidden_rel: float = FORBIDDEN_REL,
    adjacency: Mapping[str, AdjacencyEntry] | None = None,
) -> list[TransitionLine]:
    """All ground->excited lines for each polarization, sorted by (pol, freq).

    With ``merge`` the sub-lines between degenerate level groups are
    combined into one line with summed amplitude. ``adjacency`` letters are
    attached only at zero field.
    """
    if not _same_field(ground.field, excited.field):
        raise ValueError("ground and excited level sets were computed at different fields")
    g_clusters = _clusters(ground.energies, merge_tol)
    e_clusters = _clusters(excited.energies, merge_tol)
    g_group = {k: c for c in g_clusters for k in c}
    e_group = {k: c for c in e_clusters for k in c}
    zero_field = ground.field.magnitude == 0 and adjacency is not None

    lines: list[TransitionLine] = []
    for moment in moments:
        op = moment.operator()
        # amp[j, i] = |<e_j| M |g_i>|^2
        amp = np.abs(excited.states.conj() @ op @ ground.states.T) ** 2
        raw = []
        if merge:
            for gc in g_clusters:
                for ec in e_clusters:
                    # reported at the lowest index of each group, so freq is
                    # exactly E_e[excited_index] - E_g[ground_index]
                    freq = excited.energies[ec[0]] + excited.offset - (ground.energies[gc[0]] + ground.offset)
                    total = float(sum(amp[j, i] for i in gc for j in ec))
                    raw.append((freq, total, gc, ec, gc[0], ec[0]))
        else:
            for i in range(4):
                for j in range(4):
                    freq = excited.energies[j] + excited.offset - (ground.energies[i] + ground.offset)
                    raw.append((freq, float(amp[j, i]), g_group[i], e_group[j], i, j))
        peak = max(r[1] for r in raw)
        for freq, a, gc, ec, i, j in raw:
            gl = tuple(k + 1 for k in gc)
            el = tuple(k + 1 for k in ec)
            label = ""
            if zero_field:
                for name, entry in adjacency.items():
                    if entry.pol != moment.pol:
                        continue
                    if merge and set(entry.ground) == set(gl) and set(entry.excited) == set(el):
                        label = name
                    elif not merge and i + 1 in entry.ground and j + 1 in entry.excited:
                        label = name
            lines.append(
                TransitionLine(
                    freq=float(freq),
                    pol=moment.pol,
                    amplitude=a,
                    gi=len(gc),
                    gj=len(ec),
                    ground_index=i + 1,
                    excited_index=j + 1,
                    label=label,
                    forbidden=bool(peak == 0 or a < forbidden_rel * peak),
                    ground_levels=gl,
                    excited_levels=el,
                )
            )
    lines.sort(key=lambda ln: (ln.pol, ln.freq, ln.ground_index, ln.excited_index))
    return lines


def allowed_lines(catalog: Iterable[TransitionLine], pol: Polarization | None = None) -> list[TransitionLine]:
    return [ln for ln in catalog if not ln.forbidden and (pol is None or ln.pol == pol)]


def distinct_frequencies(lines: Iterable[TransitionLine], tol: float = MERGE_TOL) -> list[float]:
    freqs = sorted(ln.freq for ln in lines)
    out: list[float] = []
    for f in freqs:
        if not out or f - out[-1] >= tol:
            out.append(f)
    return out


def boltzmann_populations(
    levels: LevelSet, temperature: float, consts: PhysicalConstants = DEFAULT_CONSTANTS
) -> np.ndarray:
    """Thermal populations of the four levels at ``temperature`` kelvin."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    e = np.asarray(levels.energies, dtype=float)
    w = np.exp(-(e - e.min()) / (consts.boltzmann_over_h * temperature))
    return w / w.sum()


def lineshape(x: np.ndarray, kind: str, fwhm: float) -> np.ndarray:
    """Unit-area profile evaluated at detuning ``x`` from the line center."""
    x = np.asarray(x, dtype=float)
    if kind == "gaussian":
        return (2 / fwhm) * np.sqrt(np.log(2) / np.pi) * np.exp(-4 * np.log(2) * (x / fwhm) ** 2)
    if kind == "lorentzian":
        hw = fwhm / 2
        return (hw / np.pi) / (x**2 + hw**2)
    raise ValueError(f"unknown lineshape {kind!r}")


def check_grid(detunings: np.ndarray, min_fwhm: float) -> np.ndarray:
    d = np.asarray(detunings, dtype=float)
    if d.ndim != 1 or d.size < 2:
        raise GridError("detuning grid needs at least two points")
    step = np.diff(d)
    if np.any(step <= 0):
        raise GridError("detuning grid must be strictly increasing")
    if min_fwhm / step.max() < MIN_SAMPLES_PER_FWHM:
        raise GridError(
            f"grid too coarse: {min_fwhm / step.max():.2f} samples per FWHM "
            f"(need {MIN_SAMPLES_PER_FWHM})"
        )
    return d


def default_grid(
    catalog: Sequence[TransitionLine],
    shape: LineshapeParams,
    pol: Polarization | None = None,
    margin: float = 4.0,
    samples_per_fwhm: int = 20,
) -> np.ndarray:
    lines = allowed_lines(catalog, pol) or list(catalog)
    if not lines:
        raise ValueError("empty catalog")
    widest = max(shape.width(ln.label) for ln in lines)
    lo = min(ln.freq for ln in lines) - margin * widest
    hi = max(ln.freq for ln in lines) + margin * widest
    step = shape.min_width / samples_per_fwhm
    n = int(np.ceil((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def synth_spectrum(
    catalog: Sequence[TransitionLine],
    populations: Sequence[float],
    shape: LineshapeParams,
    detunings: np.ndarray,
    scale: float = 1.0,
    pol: Polarization | None = None,
    line_areas: Mapping[str, float] | None = None,
    extra_lines: Sequence[tuple[float, float]] = (),
    check_coverage: bool = True,
    metadata: dict | None = None,
) -> Spectrum:
    """Sum of unit-area profiles weighted by amplitude x ground population x scale.

    ``line_areas`` switches lettered lines to a fixed integrated area
    (GHz/cm), e.g. measured values. ``extra_lines`` injects (freq, area)
    pairs that are not part of the catalog (isotope impurities).
    """
    pols = {ln.pol for ln in catalog}
    if pol is None:
        if len(pols) > 1:
            raise ValueError("catalog mixes polarizations; pass pol")
        pol = next(iter(pols)) if pols else "pi"
    lines = [ln for ln in catalog if ln.pol == pol]
    d = check_grid(detunings, shape.min_width)
    pops = np.asarray(populations, dtype=float)
    line_areas = line_areas or {}

    alpha = np.zeros_like(d)
    for ln in lines:
        if ln.label and ln.label in line_areas:
            weight = float(line_areas[ln.label])
        else:
            weight = scale * ln.amplitude * pops[ln.ground_index - 1]
        if weight == 0:
            continue
        w = shape.width(ln.label)
        if check_coverage and not ln.forbidden and not (d[0] <= ln.freq - 3 * w and ln.freq + 3 * w <= d[-1]):
            raise GridError(f"grid does not cover line at {ln.freq:.4f} GHz +/- 3 FWHM")
        alpha += weight * lineshape(d - ln.freq, shape.kind, w)
    for freq, area in extra_lines:
        alpha += area * lineshape(d - freq, shape.kind, shape.fwhm)
    meta = {"lineshape": shape.kind, "fwhm": shape.fwhm}
    meta.update(metadata or {})
    return Spectrum(d, alpha, pol, meta)


@dataclass(frozen=True)
class RampMap:
    """Absorption vs (field, detuning) with the catalog of every row."""

    b_values: np.ndarray
    orientation: np.ndarray
    detunings: np.ndarray
    alpha: np.ndarray
    pol: Polarization
    catalogs: tuple[tuple[TransitionLine, ...], ...]


def field_ramp_map(
    p_g: ManifoldParams,
    p_e: ManifoldParams,
    orientation: Sequence[float],
    b_values: Sequence[float],
    moments: Sequence[TransitionMoment],
    shape: LineshapeParams,
    temperature: float,
    detunings: np.ndarray,
    pol: Polarization = "sigma",
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    scale: float = 1.0,
    nuclear_zeeman: str = "folded",
    workers: int | None = None,
) -> RampMap:
    """Synthesize one spectrum per field magnitude along ``orientation``.

    Rows are independent; ``workers`` > 1 evaluates them in a thread pool
    and the result is identical to sequential evaluation.
    """
    b_values = np.asarray(b_values, dtype=float)
    if b_values.size == 0:
        raise ValueError("field range is empty")
    u = np.asarray(orientation, dtype=float)
    norm = np.linalg.norm(u)
    if not norm > 0:
        raise ValueError("orientation must be a nonzero vector")
    u = u / norm
    d = check_grid(detunings, shape.min_width)

    def row(b: float):
        field_ = FieldVector.from_array(b * u)
        lg = manifold_levels(p_g, field_, consts, nuclear_zeeman)
        le = manifold_levels(p_e, field_, consts, nuclear_zeeman)
        cat = transition_catalog(lg, le, [m for m in moments if m.pol == pol])
        pops = boltzmann_populations(lg, temperature, consts)
        spec = synth_spectrum(cat, pops, shape, d, scale=scale, pol=pol, check_coverage=False)
        return spec.alpha, tuple(cat)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, b_values))
    else:
        rows = [row(b) for b in b_values]
    alpha = np.vstack([r[0] for r in rows])
    return RampMap(b_values, u, d, alpha, pol, tuple(r[1] for r in rows))


@dataclass(frozen=True)
class Peak:
    center: float
    height: float
    fwhm: float


def peak_find(s: Spectrum, min_prominence: float) -> list[Peak]:
    """Local maxima above ``min_prominence`` with parabolic-interpolated centers."""
    x, y = np.asarray(s.detunings), np.asarray(s.alpha)
    if x.size == 0:
        raise ValueError("empty spectrum")
    if x.size < 3:
        return []
    step = np.diff(x)
    if not np.allclose(step, step[0], rtol=1e-6, atol=0):
        raise ValueError("peak_find needs a uniformly sampled spectrum")
    dx = step[0]
    idx, _ = find_peaks(y, prominence=min_prominence)
    if idx.size == 0:
        return []
    widths = peak_widths(y, idx, rel_height=0.5)[0] * dx
    peaks = []
    for k, w in zip(idx, widths):
        center, height = x[k], y[k]
        if 0 < k < y.size - 1:
            ym, y0, yp = y[k - 1], y[k], y[k + 1]
            denom = ym - 2 * y0 + yp
            if denom != 0:
                delta = 0.5 * (ym - yp) / denom
                center = x[k] + delta * dx
                height = y0 - 0.25 * (ym - yp) * delta
        peaks.append(Peak(float(center), float(height), float(w)))
    return peaks
