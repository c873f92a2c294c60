"""Effective spin Hamiltonian of a Kramers doublet coupled to an I = 1/2 nucleus.

The product basis is fixed as |up,Up>, |up,Down>, |down,Up>, |down,Down>,
electron pseudo-spin first, nuclear spin second. All energies are E/h in GHz,
fields in tesla, and z is the crystal c axis.

    H/h = muB/h (g_perp (Bx Sx + By Sy) + g_par Bz Sz)
          + A_par Iz Sz + A_perp (Ix Sx + Iy Sy)
          - mun/h gn (B . I)

By default the nuclear Zeeman term is folded into the effective electronic
g values (i.e. left out of the matrix); pass ``nuclear_zeeman="explicit"``
to keep it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .constants import DEFAULT_CONSTANTS, PhysicalConstants

Manifold = Literal["ground", "excited"]

BASIS_LABELS = ("|up,Up>", "|up,Down>", "|down,Up>", "|down,Down>")

HERMITIAN_TOL = 1e-10


class UnsupportedLabelingError(ValueError):
    """Tensor signs fall outside the orderings the state tables describe."""


class LabelingError(ValueError):
    """High-field labels cannot be assigned unambiguously."""


@dataclass(frozen=True)
class AxialTensor:
    """Principal values of a tensor with uniaxial symmetry about c."""

    parallel: float
    perpendicular: float

    def __post_init__(self):
        if not (np.isfinite(self.parallel) and np.isfinite(self.perpendicular)):
            raise ValueError("tensor components must be finite")

    def matrix(self) -> np.ndarray:
        return np.diag([self.perpendicular, self.perpendicular, self.parallel]).astype(float)

    def scaled(self, factor: float) -> "AxialTensor":
        return AxialTensor(self.parallel * factor, self.perpendicular * factor)


@dataclass(frozen=True)
class ManifoldParams:
    """Spin-Hamiltonian parameters of one Kramers doublet.

    ``g`` is unitless, ``a`` in GHz, ``optical_offset`` in GHz (centroid
    position of the manifold on the common optical axis).
    """

    g: AxialTensor
    a: AxialTensor
    gn: float = 0.987
    optical_offset: float = 0.0
    label: Manifold = "ground"

    def __post_init__(self):
        if not abs(self.gn) < 10:
            raise ValueError(f"nuclear g-factor {self.gn} is not of order unity")
        if self.label not in ("ground", "excited"):
            raise ValueError(f"label must be 'ground' or 'excited', got {self.label!r}")

    def replace(self, **changes) -> "ManifoldParams":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class FieldVector:
    """Magnetic field in tesla; z is the crystal c axis."""

    bx: float = 0.0
    by: float = 0.0
    bz: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("field components must be finite")

    @classmethod
    def from_array(cls, b: Sequence[float]) -> "FieldVector":
        bx, by, bz = (float(v) for v in b)
        return cls(bx, by, bz)

    @classmethod
    def from_spherical(cls, magnitude: float, theta: float, phi: float = 0.0) -> "FieldVector":
        """``theta`` is the polar angle from c, ``phi`` the azimuth (radians)."""
        st = np.sin(theta)
        return cls(magnitude * st * np.cos(phi), magnitude * st * np.sin(phi), magnitude * np.cos(theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by, self.bz], dtype=float)

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    @property
    def theta(self) -> float:
        return float(np.arctan2(np.hypot(self.bx, self.by), self.bz))

    @property
    def phi(self) -> float:
        return float(np.arctan2(self.by, self.bx))

    def __neg__(self) -> "FieldVector":
        return FieldVector(-self.bx, -self.by, -self.bz)


ZERO_FIELD = FieldVector()


@dataclass(frozen=True)
class LevelSet:
    """Eigenvalues (ascending, GHz) and eigenvectors of one manifold.

    ``states[i]`` is the eigenvector of ``energies[i]`` in the fixed product
    basis. ``offset`` is the manifold's optical offset, carried along so that
    transition frequencies can be formed without the parameter object.
    """

    energies: np.ndarray
    states: np.ndarray
    labels: tuple[str, ...]
    field: FieldVector = ZERO_FIELD
    manifold: Manifold | None = None
    offset: float = 0.0

    def degeneracy(self, index: int, tol: float = 1e-3) -> int:
        """Number of levels within ``tol`` GHz of level ``index`` (0-based)."""
        return int(np.sum(np.abs(self.energies - self.energies[index]) < tol))

    def degenerate_group(self, index: int, tol: float = 1e-3) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(np.abs(self.energies - self.energies[index]) < tol))


def _pauli() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    return sx, sy, sz


def spin_operators() -> tuple[np.ndarray, ...]:
    """Return (Sx, Sy, Sz, Ix, Iy, Iz) as 4x4 matrices on the product space."""
    eye = np.eye(2, dtype=complex)
    s = tuple(np.kron(p / 2, eye) for p in _pauli())
    i = tuple(np.kron(eye, p / 2) for p in _pauli())
    return s + i


_SX, _SY, _SZ, _IX, _IY, _IZ = spin_operators()
_S = np.stack([_SX, _SY, _SZ])
_I = np.stack([_IX, _IY, _IZ])
_IS = np.einsum("aij,ajk->aik", _I, _S)  # I_a S_a, components commute
_FZ = (_SZ + _IZ).real
for _op in (_S, _I, _IS):
    _op.setflags(write=False)


def _nuclear_mode(mode: str) -> bool:
    if mode not in ("folded", "explicit"):
        raise ValueError(f"nuclear_zeeman must be 'folded' or 'explicit', got {mode!r}")
    return mode == "explicit"


def hamiltonian_stack(
    p: ManifoldParams,
    fields: np.ndarray,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    nuclear_zeeman: str = "folded",
) -> np.ndarray:
    """Vectorised Hamiltonians for an (n, 3) array of fields -> (n, 4, 4)."""
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    g = np.array([p.g.perpendicular, p.g.perpendicular, p.g.parallel])
    a = np.array([p.a.perpendicular, p.a.perpendicular, p.a.parallel])
    zeeman = consts.bohr_magneton_over_h * fields * g
    h = np.einsum("na,aij->nij", zeeman.astype(complex), _S)
    h = h + np.einsum("a,aij->ij", a.astype(complex), _IS)
    if _nuclear_mode(nuclear_zeeman):
        nuc = consts.nuclear_magneton_over_h * p.gn * fields
        h = h - np.einsum("na,aij->nij", nuc.astype(complex), _I)
    return h


def build_hamiltonian(
    p: ManifoldParams,
    b: FieldVector = ZERO_FIELD,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    nuclear_zeeman: str = "folded",
) -> np.ndarray:
    """Hermitian 4x4 Hamiltonian (GHz) of one manifold at field ``b``."""
    return hamiltonian_stack(p, b.as_array()[None, :], consts, nuclear_zeeman)[0]


def _fix_phase(v: np.ndarray) -> np.ndarray:
    mags = np.abs(v)
    # first component within rounding of the maximum, so ties resolve stably
    k = int(np.flatnonzero(mags >= mags.max() - 1e-12)[0])
    return v * (np.conj(v[k]) / mags[k])


def eigensolve(
    h: np.ndarray,
    manifold: Manifold | None = None,
    field: FieldVector = ZERO_FIELD,
    offset: float = 0.0,
) -> LevelSet:
    """Diagonalise a Hermitian 4x4 Hamiltonian.

    Degenerate subspaces are rotated to diagonalise Sz + Iz, ordered by
    descending eigenvalue of that operator, which reproduces the
    conventional zero-field labels (e.g. |up,Up> before |down,Down>).
    Each eigenvector's largest component is made real and positive.
    """
    h = np.asarray(h, dtype=complex)
    if h.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {h.shape}")
    if np.max(np.abs(h - h.conj().T)) > HERMITIAN_TOL:
        raise ValueError("Hamiltonian is not Hermitian")
    h = 0.5 * (h + h.conj().T)
    energies, vecs = np.linalg.eigh(h)
    scale = max(1.0, float(np.max(np.abs(energies))))
    tol = 1e-12 * scale

    start = 0
    while start < 4:
        stop = start + 1
        while stop < 4 and energies[stop] - energies[stop - 1] < tol:
            stop += 1
        if stop - start > 1:
            sub = vecs[:, start:stop]
            fz = sub.conj().T @ _FZ @ sub
            w, u = np.linalg.eigh(fz)
            vecs[:, start:stop] = sub @ u[:, ::-1]
        start = stop

    states = np.array([_fix_phase(vecs[:, k]) for k in range(4)])
    suffix = {"ground": "_g", "excited": "_e"}.get(manifold or "", "")
    labels = tuple(f"|{k + 1}>{suffix}" for k in range(4))
    energies = energies.copy()
    energies.setflags(write=False)
    states.setflags(write=False)
    return LevelSet(energies, states, labels, field, manifold, offset)


def manifold_levels(
    p: ManifoldParams,
    b: FieldVector = ZERO_FIELD,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    nuclear_zeeman: str = "folded",
) -> LevelSet:
    """Shortcut for ``eigensolve(build_hamiltonian(p, b))`` with metadata filled in."""
    h = build_hamiltonian(p, b, consts, nuclear_zeeman)
    return eigensolve(h, manifold=p.label, field=b, offset=p.optical_offset)


def zero_field_levels(a: AxialTensor) -> np.ndarray:
    """Analytic zero-field eigenvalues, ascending."""
    ap, ar = a.parallel, a.perpendicular
    return np.sort([ap / 4, ap / 4, (-ap + 2 * ar) / 4, (-ap - 2 * ar) / 4])


_SQ = 1 / np.sqrt(2)
_UU, _UD, _DU, _DD = np.eye(4, dtype=complex)
_ANTI = _SQ * (_UD - _DU)
_SYM = _SQ * (_UD + _DU)


def zero_field_states(manifold: Manifold, a: AxialTensor) -> LevelSet:
    """Tabulated zero-field eigenstates for the two supported sign patterns.

    ground:  A_par < 0 < A_perp < |A_par|  ->  |up,Up>, |down,Down>, anti, sym
    excited: 0 < A_perp < A_par            ->  anti, sym, |up,Up>, |down,Down>

    where anti/sym = (|up,Down> -/+ |down,Up>)/sqrt(2).
    """
    ap, ar = a.parallel, a.perpendicular
    if manifold == "ground":
        if not (ap < 0 < ar < -ap):
            raise UnsupportedLabelingError(
                f"ground labels need A_par < 0 < A_perp < |A_par|; got ({ap}, {ar})"
            )
        states = [_UU, _DD, _ANTI, _SYM]
        energies = [ap / 4, ap / 4, (-ap - 2 * ar) / 4, (-ap + 2 * ar) / 4]
    elif manifold == "excited":
        if not (0 < ar < ap):
            raise UnsupportedLabelingError(
                f"excited labels need 0 < A_perp < A_par; got ({ap}, {ar})"
            )
        states = [_ANTI, _SYM, _UU, _DD]
        energies = [(-ap - 2 * ar) / 4, (-ap + 2 * ar) / 4, ap / 4, ap / 4]
    else:
        raise ValueError(f"unknown manifold {manifold!r}")
    suffix = "_g" if manifold == "ground" else "_e"
    return LevelSet(
        np.array(energies),
        np.array([_fix_phase(s) for s in states]),
        tuple(f"|{k + 1}>{suffix}" for k in range(4)),
        ZERO_FIELD,
        manifold,
    )


# product-basis index -> primed high-field label number
_HIGH_FIELD_TABLE = {
    "ground": {0: 1, 1: 2, 3: 3, 2: 4},
    "excited": {2: 1, 3: 2, 1: 3, 0: 4},
}

DOMINANCE_FACTOR = 5.0
MIN_OVERLAP = 0.8


def high_field_labels(
    levels: LevelSet,
    p: ManifoldParams,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
) -> list[str]:
    """Label eigenstates by their dominant product state, e.g. ``|1'>_g``.

    Requires a field along c large enough that the electronic Zeeman energy
    exceeds ``DOMINANCE_FACTOR`` times the largest hyperfine component.
    """
    b = levels.field
    if np.hypot(b.bx, b.by) > 1e-9 * max(b.magnitude, 1e-300) or b.bz == 0:
        raise LabelingError("high-field labels need a nonzero field along the c axis")
    zeeman = abs(p.g.parallel * consts.bohr_magneton_over_h * b.bz)
    hyperfine = max(abs(p.a.parallel), abs(p.a.perpendicular))
    if zeeman <= DOMINANCE_FACTOR * hyperfine:
        raise LabelingError(
            f"Zeeman energy {zeeman:.4g} GHz does not dominate hyperfine {hyperfine:.4g} GHz "
            f"(need factor {DOMINANCE_FACTOR})"
        )
    table = _HIGH_FIELD_TABLE[p.label]
    suffix = "_g" if p.label == "ground" else "_e"
    labels = []
    for k, state in enumerate(levels.states):
        probs = np.abs(state) ** 2
        j = int(np.argmax(probs))
        if probs[j] < MIN_OVERLAP:
            raise LabelingError(
                f"level {k + 1}: max product-state overlap {probs[j]:.3f} < {MIN_OVERLAP}"
            )
        labels.append(f"|{table[j]}'>{suffix}")
    return labels


def scale_hyperfine_isotope(a: AxialTensor, moment_ratio: float) -> AxialTensor:
    """Estimate another isotope's hyperfine tensor by nuclear-moment scaling.

    Only a splitting estimate: both components are multiplied by
    ``moment_ratio``. No I > 1/2 Hamiltonian is built.
    """
    if not np.isfinite(moment_ratio) or moment_ratio == 0:
        raise ValueError("moment_ratio must be finite and nonzero")
    return a.scaled(moment_ratio)
