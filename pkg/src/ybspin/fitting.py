"""Least-squares fits: fluorescence decay, Mims echo decay, Lorentzian line,
and excited-state spin-Hamiltonian parameters from optical line positions.

All fitters share one driver: scipy's trust-region reflective least squares
fed with a central-difference Jacobian from :func:`central_jacobian`.
Positive scale parameters (lifetimes, widths) are fitted as logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import least_squares

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .spectra import (
    ZERO_FIELD_ADJACENCY,
    AdjacencyEntry,
    Polarization,
    TransitionLine,
    TransitionMoment,
    default_moments,
    transition_catalog,
)
from .spinham import AxialTensor, FieldVector, ManifoldParams, hamiltonian_stack, manifold_levels

MAX_ITERATIONS = 200
GTOL = 1e-10
# a returned optimum counts as converged when every Jacobian column is this
# close to orthogonal to the residual vector
CONVERGED_COSINE = 1e-6
RANK_RTOL = 1e-10
MIMS_X_BOUNDS = (0.5, 4.0)


class FitError(RuntimeError):
    """A fit could not produce a trustworthy result."""

    def __init__(self, message: str, diagnostics: Mapping | None = None):
        self.diagnostics = dict(diagnostics or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class ConvergenceError(FitError):
    pass


@dataclass(frozen=True)
class DecayTrace:
    """Sampled decay: times in s (strictly increasing), values, optional sigma."""

    times: np.ndarray
    values: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if t.shape != y.shape or t.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if t.size < 5:
            raise ValueError(f"need at least 5 points, got {t.size}")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError("trace contains non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if self.sigma is not None:
            s = np.broadcast_to(np.asarray(self.sigma, dtype=float), t.shape).copy()
            if np.any(s <= 0):
                raise ValueError("sigma must be positive")
            object.__setattr__(self, "sigma", s)


@dataclass
class FitResult:
    params: dict[str, float]
    covariance: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    gradient_norm: float = 0.0
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def uncertainties(self) -> dict[str, float]:
        diag = np.diag(self.covariance)
        return {k: float(np.sqrt(v)) if v >= 0 else float("nan") for k, v in zip(self.params, diag)}

    def to_text(self, fmt: str = "{:.8e}") -> str:
        lines = []
        for name, value in self.params.items():
            lines.append(f"{name} = {fmt.format(value)}")
            lines.append(f"{name}_err = {fmt.format(self.uncertainties[name])}")
        lines.append(f"residual_norm = {fmt.format(self.residual_norm)}")
        lines.append(f"iterations = {self.iterations}")
        lines.append(f"converged = {str(self.converged).lower()}")
        lines.append(f"flags = {';'.join(self.flags)}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> list[str]:
        cols = []
        for name in self.params:
            cols += [name, f"{name}_err"]
        return cols + ["residual_norm", "iterations", "converged", "flags"]

    def csv_row(self, fmt: str = "{:.8e}") -> list[str]:
        row = []
        for name, value in self.params.items():
            row += [fmt.format(value), fmt.format(self.uncertainties[name])]
        return row + [fmt.format(self.residual_norm), str(self.iterations), str(self.converged).lower(), ";".join(self.flags)]


def central_jacobian(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: float = 6e-6,
) -> np.ndarray:
    """Jacobian of a vector function by second-order central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        h = rel_step * max(abs(x[k]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h))
    return np.column_stack(cols)


@dataclass(frozen=True)
class _Param:
    name: str
    log: bool = False
    lower: float = -np.inf
    upper: float = np.inf


def _to_internal(params: Sequence[_Param], values: Sequence[float]) -> np.ndarray:
    return np.array([np.log(v) if p.log else v for p, v in zip(params, values)], dtype=float)


def _to_natural(params: Sequence[_Param], phi: np.ndarray) -> np.ndarray:
    return np.array([np.exp(v) if p.log else v for p, v in zip(params, phi)], dtype=float)


def _gradient_cosine(jac: np.ndarray, r: np.ndarray, scale: float) -> float:
    rn = np.linalg.norm(r)
    if rn <= 1e-10 * max(scale, 1e-300):  # exact fit to round-off; direction is noise
        return 0.0
    cn = np.linalg.norm(jac, axis=0)
    cn[cn == 0] = np.inf
    return float(np.max(np.abs(jac.T @ r) / (cn * rn)))


def _covariance(jac: np.ndarray, r: np.ndarray, absolute_sigma: bool) -> tuple[np.ndarray, bool]:
    _, s, vt = np.linalg.svd(jac, full_matrices=False)
    keep = s > RANK_RTOL * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    rank_deficient = not np.all(keep)
    inv = (vt[keep].T / s[keep] ** 2) @ vt[keep]
    if rank_deficient:
        # unconstrained directions get infinite variance
        inv = inv + np.diag(np.where(np.abs(vt[~keep]).sum(axis=0) > 0, np.inf, 0.0))
    dof = max(r.size - int(keep.sum()), 1)
    if not absolute_sigma:
        inv = inv * float(r @ r) / dof
    return inv, rank_deficient


def _run(
    residual: Callable[[np.ndarray], np.ndarray],
    params: Sequence[_Param],
    start: Sequence[float],
    absolute_sigma: bool,
    data_scale: float,
    rel_step: float = 6e-6,
    loss: str = "linear",
    f_scale: float = 1.0,
):
    """Minimise ||residual||^2 over internal parameters; return (phi, result pieces)."""
    phi0 = _to_internal(params, start)
    lower = np.array([np.log(p.lower) if p.log and p.lower > 0 else (-np.inf if p.log else p.lower) for p in params])
    upper = np.array([np.log(p.upper) if p.log and np.isfinite(p.upper) else (np.inf if p.log else p.upper) for p in params])
    bounded = np.isfinite(lower) & np.isfinite(upper)
    margin = np.where(bounded, 1e-6 * (upper - lower), 0.0)
    phi0 = np.where(bounded, np.clip(phi0, lower + margin, upper - margin), phi0)
    jac = lambda phi: central_jacobian(residual, phi, rel_step)  # noqa: E731
    res = least_squares(
        residual,
        phi0,
        jac=jac,
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        gtol=GTOL,
        ftol=1e-12,
        xtol=1e-12,
        max_nfev=MAX_ITERATIONS,
        loss=loss,
        f_scale=f_scale,
    )
    r0 = np.linalg.norm(residual(phi0))
    r = res.fun
    j = jac(res.x)
    # parameters held on a bound are stationary only in the projected sense
    pinned = (res.active_mask != 0) | (bounded & (np.minimum(res.x - lower, upper - res.x) <= 1e-9 * (upper - lower)))
    cosine = _gradient_cosine(j[:, ~pinned], r, data_scale) if np.any(~pinned) else 0.0
    cov_phi, rank_def = _covariance(j, r, absolute_sigma)
    theta = _to_natural(params, res.x)
    d = np.array([t if p.log else 1.0 for p, t in zip(params, theta)])
    with np.errstate(invalid="ignore"):
        cov = cov_phi * np.outer(d, d)
    converged = bool(res.status > 0 and cosine < CONVERGED_COSINE and np.linalg.norm(r) <= r0 * (1 + 1e-12))
    return {
        "theta": theta,
        "cov": cov,
        "residual_norm": float(np.linalg.norm(r)),
        "initial_norm": float(r0),
        "iterations": int(res.nfev),
        "converged": converged,
        "cosine": cosine,
        "rank_deficient": rank_def,
        "status": int(res.status),
        "message": res.message,
    }


def _finish(names, out, flags=None, extra=None, raise_on_failure=True) -> FitResult:
    flags = list(flags or [])
    if out["rank_deficient"]:
        flags.append("rank_deficient")
    if raise_on_failure and (not out["converged"] or out["rank_deficient"]):
        raise ConvergenceError(
            "fit did not converge to a well-determined optimum",
            {
                "status": out["status"],
                "message": out["message"],
                "iterations": out["iterations"],
                "gradient_cosine": f"{out['cosine']:.3g}",
                "rank_deficient": out["rank_deficient"],
            },
        )
    return FitResult(
        params={n: float(v) for n, v in zip(names, out["theta"])},
        covariance=out["cov"],
        residual_norm=out["residual_norm"],
        iterations=out["iterations"],
        converged=out["converged"],
        gradient_norm=out["cosine"],
        flags=flags,
        extra=dict(extra or {}, initial_residual_norm=out["initial_norm"]),
    )


def _weights(trace: DecayTrace) -> np.ndarray:
    return np.ones_like(trace.values) if trace.sigma is None else 1.0 / trace.sigma


def _require_signal(y: np.ndarray):
    spread = np.ptp(y)
    if spread <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        raise ConvergenceError("trace is constant; decay parameters are undetermined", {"ptp": spread})


# -- exponential -------------------------------------------------------------


def exponential_model(t, amplitude, tau, offset):
    return amplitude * np.exp(-t / tau) + offset


def fit_exponential(trace: DecayTrace) -> FitResult:
    """Fit ``A exp(-t/tau) + c``."""
    t, y = trace.times, trace.values
    _require_signal(y)
    w = _weights(trace)
    c0 = y[-1]
    a0 = (y[0] - c0) * np.exp(t[0] / max(t[-1] - t[0], 1e-300))
    area = trapezoid(y - c0, t)
    tau0 = abs(area / (y[0] - c0)) if y[0] != c0 else (t[-1] - t[0]) / 3
    tau0 = min(max(tau0, (t[-1] - t[0]) / 50), 10 * (t[-1] - t[0]))
    a0 = (y[0] - c0) * np.exp(t[0] / tau0)
    spec = [_Param("amplitude"), _Param("tau", log=True), _Param("offset")]

    def residual(phi):
        a, tau, c = _to_natural(spec, phi)
        return (exponential_model(t, a, tau, c) - y) * w

    out = _run(residual, spec, [a0, tau0, c0], trace.sigma is not None, np.linalg.norm(y * w))
    flags = []
    tau = out["theta"][1]
    if t[-1] - t[0] < 2 * tau:
        flags.append("short_trace")
    return _finish(["amplitude", "tau", "offset"], out, flags)


# -- Mims stretched exponential ----------------------------------------------


def mims_model(t, e0, tm, x, mode: str = "field"):
    """Echo field ``E0 exp(-(2t/Tm)^x)``; intensity mode squares it."""
    field_ = e0 * np.exp(-((2 * t / tm) ** x))
    if mode == "field":
        return field_
    if mode == "intensity":
        return field_**2
    raise ValueError(f"mode must be 'field' or 'intensity', got {mode!r}")


def _mims_guess(t, y, mode):
    e = np.sqrt(np.clip(y, 0, None)) if mode == "intensity" else y
    e0 = e[0] if e[0] > 0 else np.max(np.abs(e))
    ratio = e / e0
    sel = (ratio > 0.05) & (ratio < 0.95) & (t > 0)
    if sel.sum() >= 2:
        slope, icpt = np.polyfit(np.log(2 * t[sel]), np.log(-np.log(ratio[sel])), 1)
        x0 = float(np.clip(slope, 0.6, 3.9))
        tm0 = float(np.exp(-icpt / slope)) if slope > 0 else 2 * np.median(t)
    else:
        x0, tm0 = 1.0, 2 * np.median(t[t > 0]) if np.any(t > 0) else 1.0
    return e0, tm0, x0


def fit_mims(trace: DecayTrace, mode: Literal["field", "intensity"] = "field", fix_x: float | None = None) -> FitResult:
    """Fit the Mims decay ``E0 exp(-(2 t12/Tm)^x)`` to echo amplitude vs delay t12.

    ``x`` is bounded to [0.5, 4]; ``fix_x`` holds it constant instead.
    A result with ``x`` on a bound carries the ``x_at_bound`` flag.
    """
    t, y = trace.times, trace.values
    if np.any(t < 0):
        raise ValueError("Mims delays must be nonnegative")
    if mode not in ("field", "intensity"):
        raise ValueError(f"mode must be 'field' or 'intensity', got {mode!r}")
    _require_signal(y)
    w = _weights(trace)
    e0, tm0, x0 = _mims_guess(t, y, mode)
    if fix_x is not None:
        spec = [_Param("E0"), _Param("Tm", log=True)]

        def residual(phi):
            a, tm = _to_natural(spec, phi)
            return (mims_model(t, a, tm, fix_x, mode) - y) * w

        out = _run(residual, spec, [e0, tm0], trace.sigma is not None, np.linalg.norm(y * w))
        res = _finish(["E0", "Tm"], out)
        cov = np.zeros((3, 3))
        cov[:2, :2] = res.covariance
        res.params["x"] = float(fix_x)
        res.covariance = cov
        res.flags.append("x_fixed")
        return res

    lo, hi = MIMS_X_BOUNDS
    spec = [_Param("E0"), _Param("Tm", log=True), _Param("x", lower=lo, upper=hi)]

    def residual(phi):
        a, tm, x = _to_natural(spec, phi)
        return (mims_model(t, a, tm, x, mode) - y) * w

    out = _run(residual, spec, [e0, tm0, x0], trace.sigma is not None, np.linalg.norm(y * w))
    flags = []
    x = out["theta"][2]
    if min(x - lo, hi - x) < 1e-6:
        flags.append("x_at_bound")
    return _finish(["E0", "Tm", "x"], out, flags)


def effective_linewidth(tm: float) -> float:
    """Effective homogeneous linewidth 1/(pi Tm) in Hz for Tm in s."""
    if not tm > 0:
        raise ValueError("Tm must be positive")
    return 1.0 / (np.pi * tm)


# -- Lorentzian --------------------------------------------------------------


def lorentzian_model(x, center, fwhm, height, offset):
    hw2 = (fwhm / 2) ** 2
    return height * hw2 / ((x - center) ** 2 + hw2) + offset


def fit_lorentzian(xs, ys, sigma=None) -> FitResult:
    """Fit ``h (G/2)^2 / ((x - x0)^2 + (G/2)^2) + c``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.size < 7:
        raise ValueError("need at least 7 (x, y) points")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)[order]
    _require_signal(y)
    base = np.median(y)
    k = int(np.argmax(np.abs(y - base)))
    if y[k] >= base:
        c0 = float(np.min(y))
    else:
        c0 = float(np.max(y))
    h0 = y[k] - c0
    half = np.abs(y - c0) >= abs(h0) / 2
    fwhm0 = max(np.ptp(x[half]) if half.sum() > 1 else 0.0, 2 * np.min(np.diff(x)))
    spec = [_Param("center"), _Param("fwhm", log=True), _Param("height"), _Param("offset")]

    def residual(phi):
        x0, g, h, c = _to_natural(spec, phi)
        return (lorentzian_model(x, x0, g, h, c) - y) * w

    out = _run(residual, spec, [x[k], fwhm0, h0, c0], sigma is not None, np.linalg.norm(y * w))
    return _finish(["center", "fwhm", "height", "offset"], out)


# -- spin-Hamiltonian parameters from optical lines ---------------------------


@dataclass(frozen=True)
class PeakObservation:
    """Measured optical line position (GHz) at a given field.

    Level indices (1-based, sorted-energy order at that field) may be given
    directly; at zero field a lettered ``label`` is resolved through the
    adjacency table. Otherwise the line is assigned by frequency.
    """

    field: FieldVector
    pol: Polarization
    freq: float
    uncertainty: float
    label: str | None = None
    ground_index: int | None = None
    excited_index: int | None = None

    def __post_init__(self):
        if not self.uncertainty > 0:
            raise ValueError("observation uncertainty must be positive")
        if self.pol not in ("pi", "sigma"):
            raise ValueError(f"polarization must be 'pi' or 'sigma', got {self.pol!r}")

    def sort_key(self):
        return (self.field.bx, self.field.by, self.field.bz, self.pol, self.freq, self.uncertainty)

    def unlabeled(self) -> "PeakObservation":
        return PeakObservation(self.field, self.pol, self.freq, self.uncertainty)


def field_key(b: FieldVector) -> tuple[float, float, float]:
    return tuple(round(float(v), 12) for v in b.as_array())


@dataclass
class Assignment:
    """obs index -> matched line; plus indices left unmatched or flagged ambiguous."""

    matches: dict[int, TransitionLine]
    unmatched: list[int]
    ambiguous: list[int]


def line_assignment(
    observations: Sequence[PeakObservation],
    predicted: Mapping[tuple[float, float, float], Sequence[TransitionLine]],
    gate_factor: float = 3.0,
) -> Assignment:
    """Greedy one-to-one nearest-frequency matching within ``gate_factor`` sigma.

    ``predicted`` maps :func:`field_key` of each field to its candidate lines.
    Processing order depends only on observation content, so the result is
    invariant under reordering of ``observations``.
    """
    candidates = []
    ambiguous = set()
    for k, obs in enumerate(observations):
        lines = [ln for ln in predicted.get(field_key(obs.field), ()) if ln.pol == obs.pol]
        gate = gate_factor * obs.uncertainty
        close = 0
        for ln in lines:
            dist = abs(ln.freq - obs.freq)
            if dist <= 2 * obs.uncertainty:
                close += 1
            if dist <= gate:
                line_key = (ln.pol, ln.ground_index, ln.excited_index)
                candidates.append((dist, obs.sort_key(), line_key, k, ln))
        if close > 1:
            ambiguous.add(k)

    # two observations inside one line's gate
    by_line: dict = {}
    for _, _, line_key, k, _ in candidates:
        by_line.setdefault((field_key(observations[k].field), line_key), set()).add(k)
    for ks in by_line.values():
        if len(ks) > 1:
            ambiguous.update(ks)

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    matches: dict[int, TransitionLine] = {}
    used = set()
    for dist, _, line_key, k, ln in candidates:
        key = (field_key(observations[k].field), line_key)
        if k in matches or key in used:
            continue
        matches[k] = ln
        used.add(key)
    unmatched = sorted(set(range(len(observations))) - set(matches))
    return Assignment(matches, unmatched, sorted(ambiguous))


HAM_PARAMS = ("a_parallel", "a_perpendicular", "g_parallel", "g_perpendicular", "optical_offset")


def excited_from_vector(v: Sequence[float], template: ManifoldParams) -> ManifoldParams:
    return ManifoldParams(
        g=AxialTensor(v[2], v[3]),
        a=AxialTensor(v[0], v[1]),
        gn=template.gn,
        optical_offset=v[4],
        label="excited",
    )


def _vector_from_excited(p: ManifoldParams) -> np.ndarray:
    return np.array([p.a.parallel, p.a.perpendicular, p.g.parallel, p.g.perpendicular, p.optical_offset])


def predicted_lines(
    known: ManifoldParams,
    excited: ManifoldParams,
    fields: Sequence[FieldVector],
    moments: Sequence[TransitionMoment],
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    nuclear_zeeman: str = "folded",
    min_rel_amplitude: float = 1e-3,
) -> dict[tuple[float, float, float], list[TransitionLine]]:
    """Allowed lines (amplitude >= ``min_rel_amplitude`` of the strongest per pol) per field."""
    out = {}
    for b in fields:
        lg = manifold_levels(known, b, consts, nuclear_zeeman)
        le = manifold_levels(excited, b, consts, nuclear_zeeman)
        cat = transition_catalog(lg, le, moments)
        keep = []
        for pol in ("pi", "sigma"):
            sub = [ln for ln in cat if ln.pol == pol]
            if not sub:
                continue
            peak = max(ln.amplitude for ln in sub)
            keep += [ln for ln in sub if peak > 0 and ln.amplitude >= min_rel_amplitude * peak]
        out[field_key(b)] = keep
    return out


def _labeled_indices(obs: PeakObservation, adjacency: Mapping[str, AdjacencyEntry]):
    if obs.ground_index is not None and obs.excited_index is not None:
        return obs.ground_index, obs.excited_index
    if obs.label and obs.field.magnitude == 0 and obs.label in adjacency:
        entry = adjacency[obs.label]
        return min(entry.ground), min(entry.excited)
    return None


def fit_spin_hamiltonian(
    observations: Sequence[PeakObservation],
    known: ManifoldParams,
    initial: ManifoldParams,
    *,
    moments: Sequence[TransitionMoment] | None = None,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    nuclear_zeeman: str = "folded",
    adjacency: Mapping[str, AdjacencyEntry] = ZERO_FIELD_ADJACENCY,
    gate_factor: float = 3.0,
    weighted: bool = True,
    max_rounds: int = 8,
    n_starts: int = 1,
    jitter: float = 0.1,
    seed: int = 0,
) -> FitResult:
    """Fit excited-state (A_par, A_perp, g_par, g_perp, offset) to line positions.

    The ground manifold ``known`` is held fixed. Unlabeled observations are
    assigned to predicted lines by nearest frequency, refitting and
    reassigning until the assignment is stable; fields enter in order of
    increasing magnitude so each stage starts from a good prediction.
    With ``n_starts`` > 1 extra starts are drawn around ``initial`` (relative
    ``jitter``, generator ``seed``). The start leaving the fewest observations
    unmatched wins, then the lowest residual, ties going to the earliest start.
    """
    obs = list(observations)
    n_fields = len({field_key(o.field) for o in obs})
    n_zero = sum(1 for o in obs if o.field.magnitude == 0)
    if len(obs) < 5 or not (n_fields >= 2 or n_zero >= 4):
        raise ValueError("need >= 5 observations spanning >= 2 fields (or >= 4 zero-field lines)")
    moments = list(moments) if moments is not None else default_moments()

    rng = np.random.default_rng(seed)
    base = _vector_from_excited(initial)
    starts = [base]
    for _ in range(n_starts - 1):
        starts.append(base * (1 + jitter * rng.uniform(-1, 1, size=base.size)))

    best = None
    errors = []
    for k, start in enumerate(starts):
        try:
            res = _fit_ham_from(obs, known, initial, start, moments, consts, nuclear_zeeman, adjacency, gate_factor, weighted, max_rounds)
        except FitError as exc:
            errors.append(exc)
            continue
        res.extra["start_index"] = k
        if best is None or _ham_score(res) < _ham_score(best):
            best = res
    if best is None:
        raise errors[0]
    best.extra["failed_starts"] = len(errors)
    return best


def _ham_score(res: FitResult) -> tuple[int, float]:
    # fewer unmatched observations first, then lower residual
    return len(res.extra["unmatched"]), res.residual_norm


def _fit_ham_from(obs, known, template, start, moments, consts, nuclear_zeeman, adjacency, gate_factor, weighted, max_rounds):
    order = sorted(range(len(obs)), key=lambda k: obs[k].sort_key())
    obs = [obs[k] for k in order]
    keys = sorted({field_key(o.field) for o in obs})
    fields = {key: FieldVector(*key) for key in keys}
    field_arr = np.array([fields[key].as_array() for key in keys])
    key_index = {key: n for n, key in enumerate(keys)}
    eg = np.linalg.eigvalsh(hamiltonian_stack(known, field_arr, consts, nuclear_zeeman))
    freq = np.array([o.freq for o in obs])
    sigma = np.array([o.uncertainty for o in obs])
    w = 1.0 / sigma if weighted else np.ones_like(sigma)
    fidx = np.array([key_index[field_key(o.field)] for o in obs])
    fixed_idx = {k: _labeled_indices(o, adjacency) for k, o in enumerate(obs)}

    def model(v: np.ndarray, rows: np.ndarray, gi: np.ndarray, ei: np.ndarray) -> np.ndarray:
        pe = excited_from_vector(v, template)
        used = np.unique(fidx[rows])
        ee = np.zeros((len(keys), 4))
        ee[used] = np.linalg.eigvalsh(hamiltonian_stack(pe, field_arr[used], consts, nuclear_zeeman))
        f = fidx[rows]
        return ee[f, ei] + v[4] - (eg[f, gi] + known.optical_offset)

    def assign(v, subset, gate):
        pe = excited_from_vector(v, template)
        free = [k for k in subset if fixed_idx[k] is None]
        pred = predicted_lines(known, pe, [fields[key] for key in {field_key(obs[k].field) for k in free}], moments, consts, nuclear_zeeman) if free else {}
        a = line_assignment([obs[k] for k in free], pred, gate)
        pairs = {}
        for k in subset:
            if fixed_idx[k] is not None:
                pairs[k] = fixed_idx[k]
        for local, ln in a.matches.items():
            pairs[free[local]] = (ln.ground_index, ln.excited_index)
        return pairs, [free[i] for i in a.unmatched], [free[i] for i in a.ambiguous]

    def solve(v, pairs, free_mask, robust=False):
        rows = np.array(sorted(pairs), dtype=int)
        gi = np.array([pairs[k][0] - 1 for k in rows])
        ei = np.array([pairs[k][1] - 1 for k in rows])
        spec = [_Param(n) for n, m in zip(HAM_PARAMS, free_mask) if m]
        v = v.copy()

        def residual(phi):
            full = v.copy()
            full[free_mask] = phi
            return (model(full, rows, gi, ei) - freq[rows]) * w[rows]

        # the ungated first pass may hold gross mismatches; soft-L1 on the MAD scale
        # of the starting residuals keeps them from dominating
        loss = ("linear", 1.0)
        if robust:
            mad = 1.4826 * float(np.median(np.abs(residual(v[free_mask]))))
            floor = gate_factor * (1.0 if weighted else float(np.median(sigma[rows])))
            loss = ("soft_l1", max(3 * mad, floor))
        out = _run(residual, spec, v[free_mask], weighted, np.linalg.norm(freq[rows] * w[rows]), 1e-5, *loss)
        v[free_mask] = out["theta"]
        return v, out, residual

    def identifiable(v, pairs):
        # parameters with no influence on the assigned lines (e.g. g at zero field)
        rows = np.array(sorted(pairs), dtype=int)
        gi = np.array([pairs[k][0] - 1 for k in rows])
        ei = np.array([pairs[k][1] - 1 for k in rows])
        jac = central_jacobian(lambda x: model(x, rows, gi, ei), v, 1e-5)
        col = np.linalg.norm(jac, axis=0)
        return col > 1e-9 * col.max()

    v = np.asarray(start, dtype=float).copy()
    mags = sorted({round(fields[key].magnitude, 9) for key in keys})
    for stage_mag in mags:
        subset = [k for k in range(len(obs)) if round(obs[k].field.magnitude, 9) <= stage_mag]
        previous = None
        for rnd in range(max_rounds):
            gate = np.inf if rnd == 0 else gate_factor
            pairs, _, _ = assign(v, subset, gate)
            if not pairs or pairs == previous:
                break
            mask = identifiable(v, pairs)
            if len(pairs) < int(mask.sum()):
                break
            v, _, _ = solve(v, pairs, mask, robust=rnd == 0)
            previous = pairs

    pairs, unmatched, ambiguous = assign(v, list(range(len(obs))), gate_factor)
    if not pairs:
        raise FitError("no observation could be assigned to a predicted line", {"observations": len(obs)})
    free_mask = identifiable(v, pairs)
    if len(pairs) < int(free_mask.sum()):
        raise FitError("too few observations could be assigned to predicted lines", {"assigned": len(pairs)})
    v, out, _ = solve(v, pairs, free_mask)
    pairs2, unmatched, ambiguous = assign(v, list(range(len(obs))), gate_factor)
    if pairs2 != pairs and pairs2:
        pairs = pairs2
        free_mask = identifiable(v, pairs)
        v, out, _ = solve(v, pairs, free_mask)

    flags = [f"unidentifiable:{n}" for n, m in zip(HAM_PARAMS, free_mask) if not m]
    flags += [f"unmatched:{order[k]}" for k in unmatched]
    flags += [f"ambiguous:{order[k]}" for k in ambiguous]
    if out["rank_deficient"]:
        flags.append("rank_deficient")

    cov = np.full((5, 5), np.nan)
    cov[np.ix_(free_mask, free_mask)] = out["cov"]
    for k in np.flatnonzero(~free_mask):
        cov[k, k] = np.inf
    return FitResult(
        params={n: float(x) for n, x in zip(HAM_PARAMS, v)},
        covariance=cov,
        residual_norm=out["residual_norm"],
        iterations=out["iterations"],
        converged=out["converged"],
        gradient_norm=out["cosine"],
        flags=flags,
        extra={
            "assignment": {order[k]: pairs[k] for k in sorted(pairs)},
            "unmatched": sorted(order[k] for k in unmatched),
            "ambiguous": sorted(order[k] for k in ambiguous),
            "initial_residual_norm": out["initial_norm"],
        },
    )


def synthesize_observations(
    known: ManifoldParams,
    excited: ManifoldParams,
    fields: Sequence[FieldVector],
    noise: float = 0.0,
    uncertainty: float | None = None,
    rng: np.random.Generator | None = None,
    moments: Sequence[TransitionMoment] | None = None,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    min_rel_amplitude: float = 0.05,
    min_separation: float = 0.3,
    adjacency: Mapping[str, AdjacencyEntry] = ZERO_FIELD_ADJACENCY,
) -> list[PeakObservation]:
    """Line positions a spectrum would show: strong, resolved lines plus Gaussian noise.

    Lines weaker than ``min_rel_amplitude`` of the strongest line of the
    same polarization, or closer than ``min_separation`` GHz to another kept
    line, are dropped. Observations carry their level indices; use
    :meth:`PeakObservation.unlabeled` to strip them.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    moments = list(moments) if moments is not None else default_moments()
    sigma = uncertainty if uncertainty is not None else (noise if noise > 0 else 0.01)
    out = []
    for b in fields:
        lg = manifold_levels(known, b, consts)
        le = manifold_levels(excited, b, consts)
        cat = transition_catalog(lg, le, moments, adjacency=adjacency)
        for pol in ("pi", "sigma"):
            sub = [ln for ln in cat if ln.pol == pol]
            peak = max(ln.amplitude for ln in sub)
            strong = [ln for ln in sub if ln.amplitude >= min_rel_amplitude * peak]
            for ln in strong:
                if any(o is not ln and abs(o.freq - ln.freq) < min_separation for o in strong):
                    continue
                out.append(
                    PeakObservation(
                        field=b,
                        pol=pol,
                        freq=ln.freq + (rng.normal(0, noise) if noise > 0 else 0.0),
                        uncertainty=sigma,
                        label=ln.label or None,
                        ground_index=ln.ground_index,
                        excited_index=ln.excited_index,
                    )
                )
    return out
