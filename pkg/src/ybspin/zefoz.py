"""Field derivatives of transition frequencies and ZEFOZ point search.

Level indices are 1-based positions in the sorted eigenvalue list at the
evaluation field. Sorted-index tracking is only meaningful away from level
crossings, so every derivative stencil is checked for near-degenerate
neighbours of the two levels involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .spinham import FieldVector, Manifold, ManifoldParams, hamiltonian_stack

DEFAULT_STEP = 1e-3  # T
DEGENERACY_GAP = 1e-5  # GHz, 10 kHz
DEFAULT_THRESHOLD = 1e-4  # GHz/T
DEDUPE_RADIUS = 1e-3  # T


class DegeneracyError(ValueError):
    """A level of the transition is (nearly) degenerate with a neighbour inside the stencil."""


@dataclass(frozen=True)
class TransitionSpec:
    manifold_a: Manifold
    level_a: int
    manifold_b: Manifold
    level_b: int

    def __post_init__(self):
        for m, lv in ((self.manifold_a, self.level_a), (self.manifold_b, self.level_b)):
            if m not in ("ground", "excited"):
                raise ValueError(f"manifold must be 'ground' or 'excited', got {m!r}")
            if not 1 <= lv <= 4:
                raise ValueError(f"level index must be in 1..4, got {lv}")
        if (self.manifold_a, self.level_a) == (self.manifold_b, self.level_b):
            raise ValueError("transition endpoints must be distinct levels")

    @classmethod
    def parse(cls, text: str) -> "TransitionSpec":
        """``"g3-g4"`` or ``"e1-e2"`` or ``"g1-e3"``."""
        names = {"g": "ground", "e": "excited"}
        try:
            a, b = text.strip().lower().split("-")
            return cls(names[a[0]], int(a[1:]), names[b[0]], int(b[1:]))
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"cannot parse transition {text!r}; expected e.g. 'g3-g4'") from exc

    def __str__(self) -> str:
        return f"{self.manifold_a[0]}{self.level_a}-{self.manifold_b[0]}{self.level_b}"


@dataclass(frozen=True)
class ParamSet:
    ground: ManifoldParams
    excited: ManifoldParams
    consts: PhysicalConstants = DEFAULT_CONSTANTS
    nuclear_zeeman: str = "folded"

    def manifold(self, name: Manifold) -> ManifoldParams:
        return self.ground if name == "ground" else self.excited


@dataclass(frozen=True)
class ZefozReport:
    field: FieldVector
    freq: float
    gradient: np.ndarray
    hessian: np.ndarray
    gradient_norm: float


def _energies(params: ParamSet, manifold: Manifold, fields: np.ndarray) -> np.ndarray:
    p = params.manifold(manifold)
    e = np.linalg.eigvalsh(hamiltonian_stack(p, fields, params.consts, params.nuclear_zeeman))
    return e + p.optical_offset


def _frequencies(spec: TransitionSpec, params: ParamSet, fields: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies at each field and the smallest gap adjacent to either level."""
    fields = np.atleast_2d(fields)
    ea = _energies(params, spec.manifold_a, fields)
    eb = ea if spec.manifold_b == spec.manifold_a else _energies(params, spec.manifold_b, fields)
    gaps = []
    for e, lv in ((ea, spec.level_a - 1), (eb, spec.level_b - 1)):
        if lv > 0:
            gaps.append(e[:, lv] - e[:, lv - 1])
        if lv < 3:
            gaps.append(e[:, lv + 1] - e[:, lv])
    return eb[:, spec.level_b - 1] - ea[:, spec.level_a - 1], np.min(gaps, axis=0)


def transition_frequency(spec: TransitionSpec, params: ParamSet, b: FieldVector) -> float:
    """E_b - E_a (GHz) at field ``b``; optical offsets included for cross-manifold pairs."""
    f, _ = _frequencies(spec, params, b.as_array()[None, :])
    return float(f[0])


def _stencil(b: np.ndarray, step: float) -> np.ndarray:
    pts = [b]
    for h in (step, step / 2):
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            pts += [b + d, b - d]
    return np.array(pts)


def _gradient(spec: TransitionSpec, params: ParamSet, b: np.ndarray, step: float) -> tuple[np.ndarray, float]:
    f, gap = _frequencies(spec, params, _stencil(b, step))
    d_full = (f[1:7:2] - f[2:7:2]) / (2 * step)
    d_half = (f[7:13:2] - f[8:13:2]) / step
    return (4 * d_half - d_full) / 3, float(gap.min())


def frequency_gradient(
    spec: TransitionSpec, params: ParamSet, b: FieldVector, step: float = DEFAULT_STEP
) -> np.ndarray:
    """d(freq)/dB (GHz/T) by central differences with Richardson extrapolation.

    Raises :class:`DegeneracyError` if either level comes within 10 kHz of a
    neighbour anywhere on the stencil.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    grad, gap = _gradient(spec, params, b.as_array(), step)
    if gap < DEGENERACY_GAP:
        raise DegeneracyError(f"transition {spec} has a level gap of {gap:.3g} GHz near B={tuple(b.as_array())}")
    return grad


def frequency_hessian(
    spec: TransitionSpec, params: ParamSet, b: FieldVector, step: float = DEFAULT_STEP
) -> np.ndarray:
    """Symmetrised Jacobian of the gradient (GHz/T^2), Richardson-extrapolated like the gradient."""
    x = b.as_array()

    def central(h):
        cols = []
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            gp, _ = _gradient(spec, params, x + d, step)
            gm, _ = _gradient(spec, params, x - d, step)
            cols.append((gp - gm) / (2 * h))
        return np.column_stack(cols)

    hess = (4 * central(step / 2) - central(step)) / 3
    return (hess + hess.T) / 2


def _domain_array(domain: Sequence[Sequence[float]]) -> np.ndarray:
    box = np.asarray(domain, dtype=float)
    if box.shape != (3, 2):
        raise ValueError("domain must be three (low, high) pairs in tesla")
    if np.any(box[:, 0] > box[:, 1]) or not np.all(np.isfinite(box)):
        raise ValueError(f"domain is empty: {box.tolist()}")
    return box


def zefoz_search(
    spec: TransitionSpec,
    params: ParamSet,
    domain: Sequence[Sequence[float]],
    seeds: int = 8,
    *,
    rng_seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    step: float = DEFAULT_STEP,
) -> list[ZefozReport]:
    """Local minima of |grad f| inside ``domain`` with |grad f| < ``threshold``.

    The first start is the box centre, the rest are uniform draws from a
    generator seeded with ``rng_seed``. Candidates on a degenerate stencil,
    or failing a re-check at an independent step, are discarded. Results are
    deduplicated within 1 mT and sorted by gradient norm.
    """
    box = _domain_array(domain)
    if seeds < 1:
        raise ValueError("need at least one start")
    lo, hi = box[:, 0], box[:, 1]
    free = hi > lo
    rng = np.random.default_rng(rng_seed)
    starts = [(lo + hi) / 2] + [rng.uniform(lo, hi) for _ in range(seeds - 1)]

    def residual(x):
        b = lo.copy()
        b[free] = x
        return _gradient(spec, params, b, step)[0]

    found = []
    for x0 in starts:
        if np.any(free):
            res = least_squares(
                residual, x0[free], bounds=(lo[free], hi[free]), method="trf", x_scale=1e-2, xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200
            )
            b = lo.copy()
            b[free] = res.x
        else:
            b = lo.copy()
        grad, gap = _gradient(spec, params, b, step)
        if gap < DEGENERACY_GAP:
            continue
        norm = float(np.linalg.norm(grad))
        if norm >= threshold:
            continue
        check, gap2 = _gradient(spec, params, b, step / 3)
        if gap2 < DEGENERACY_GAP or np.linalg.norm(check) >= threshold:
            continue
        found.append((norm, tuple(b), grad))

    found.sort(key=lambda c: (c[0], c[1]))
    reports: list[ZefozReport] = []
    for norm, b, grad in found:
        if any(np.linalg.norm(np.subtract(b, r.field.as_array())) < DEDUPE_RADIUS for r in reports):
            continue
        fv = FieldVector(*b)
        reports.append(
            ZefozReport(
                field=fv,
                freq=transition_frequency(spec, params, fv),
                gradient=grad,
                hessian=frequency_hessian(spec, params, fv, step),
                gradient_norm=norm,
            )
        )
    return reports
