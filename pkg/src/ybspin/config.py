"""Run configuration: a TOML file with one section per physical ingredient.

Parsing is strict. Unknown sections or keys, missing keys and type errors
raise :class:`ConfigError` with the offending line when it can be located.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .constants import PhysicalConstants
from .photophysics import OpticalMedium
from .spectra import AdjacencyEntry, LineshapeParams, TransitionMoment, default_moments
from .spinham import AxialTensor, ManifoldParams, scale_hyperfine_isotope


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    constants: PhysicalConstants
    nuclear_zeeman: str
    ground: ManifoldParams
    excited: ManifoldParams
    medium: OpticalMedium
    number_density: float  # cm^-3
    temperature: float
    fluorescence_lifetime: float | None
    rate_aggregation: str
    moments: list[TransitionMoment]
    lineshape: LineshapeParams
    adjacency: dict[str, AdjacencyEntry]
    isotope_ratio: float | None = None
    source: str = field(default="<default>", compare=False)


_MANIFOLD_KEYS = {"g_parallel", "g_perpendicular", "a_parallel", "a_perpendicular", "gn", "optical_offset"}

# section -> (required keys, optional keys)
_SCHEMA: dict[str, tuple[set[str], set[str]]] = {
    "constants": (set(), {"bohr_magneton_over_h", "nuclear_magneton_over_h", "boltzmann_over_h", "nuclear_zeeman"}),
    "ground": ({"g_parallel", "g_perpendicular", "a_parallel", "a_perpendicular"}, {"gn", "optical_offset"}),
    "excited": ({"g_parallel", "g_perpendicular", "a_parallel", "a_perpendicular"}, {"gn", "optical_offset"}),
    "medium": ({"n_parallel", "n_perpendicular", "wavelength_nm", "number_density_cm3"}, set()),
    "conditions": ({"temperature_k"}, {"fluorescence_lifetime_s", "rate_aggregation"}),
    "moments": (set(), {"pi_strength", "sigma_strength"}),
    "lineshape": ({"kind", "fwhm_ghz"}, {"overrides"}),
    "adjacency": (set(), set()),
    "isotope": ({"moment_ratio"}, set()),
}
_REQUIRED_SECTIONS = ("constants", "ground", "excited", "medium", "conditions", "moments", "lineshape", "adjacency")


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``[section]`` (or of ``key`` inside it)."""
    lines = text.splitlines()
    header = re.compile(r"^\s*\[\s*" + re.escape(section) + r"\s*\]")
    any_header = re.compile(r"^\s*\[")
    key_re = re.compile(r"^\s*" + re.escape(key) + r"\s*=") if key else None
    inside = False
    for n, line in enumerate(lines, 1):
        if header.match(line):
            if key_re is None:
                return n
            inside = True
            continue
        if inside and any_header.match(line):
            inside = False
        if inside and key_re.match(line):
            return n
    return None


def _where(text: str, section: str, key: str | None = None) -> str:
    n = _line_of(text, section, key)
    return f" (line {n})" if n else ""


def _number(text, section, key, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}{_where(text, section, key)}")
    return float(value)


def _check_keys(text: str, section: str, table: Mapping[str, Any]):
    required, optional = _SCHEMA[section]
    for key in table:
        if key not in required | optional:
            raise ConfigError(f"unknown key {key!r} in [{section}]{_where(text, section, key)}")
    for key in sorted(required - set(table)):
        raise ConfigError(f"missing key {key!r} in [{section}]{_where(text, section)}")


def _manifold(text: str, section: str, table: Mapping[str, Any]) -> ManifoldParams:
    _check_keys(text, section, table)
    v = {k: _number(text, section, k, table[k]) for k in table}
    try:
        return ManifoldParams(
            g=AxialTensor(v["g_parallel"], v["g_perpendicular"]),
            a=AxialTensor(v["a_parallel"], v["a_perpendicular"]),
            gn=v.get("gn", 0.987),
            optical_offset=v.get("optical_offset", 0.0),
            label=section,
        )
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}{_where(text, section)}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    for section in data:
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]{_where(text, section)}")
    for section in _REQUIRED_SECTIONS:
        if section not in data:
            raise ConfigError(f"{source}: missing section [{section}]")
        if not isinstance(data[section], dict):
            raise ConfigError(f"{source}: {section} must be a table")

    try:
        c = data["constants"]
        _check_keys(text, "constants", c)
        nz = c.get("nuclear_zeeman", "folded")
        if nz not in ("folded", "explicit"):
            raise ConfigError(f"[constants] nuclear_zeeman must be 'folded' or 'explicit'{_where(text, 'constants', 'nuclear_zeeman')}")
        consts = PhysicalConstants(**{k: _number(text, "constants", k, v) for k, v in c.items() if k != "nuclear_zeeman"})

        ground = _manifold(text, "ground", data["ground"])
        excited = _manifold(text, "excited", data["excited"])

        m = data["medium"]
        _check_keys(text, "medium", m)
        medium = OpticalMedium(
            n_parallel=_number(text, "medium", "n_parallel", m["n_parallel"]),
            n_perpendicular=_number(text, "medium", "n_perpendicular", m["n_perpendicular"]),
            wavelength0=_number(text, "medium", "wavelength_nm", m["wavelength_nm"]) * 1e-9,
        )
        density = _number(text, "medium", "number_density_cm3", m["number_density_cm3"])
        if not density > 0:
            raise ConfigError(f"[medium] number_density_cm3 must be positive{_where(text, 'medium', 'number_density_cm3')}")

        cond = data["conditions"]
        _check_keys(text, "conditions", cond)
        temperature = _number(text, "conditions", "temperature_k", cond["temperature_k"])
        if not temperature > 0:
            raise ConfigError(f"[conditions] temperature_k must be positive{_where(text, 'conditions', 'temperature_k')}")
        tau_f = cond.get("fluorescence_lifetime_s")
        tau_f = None if tau_f is None else _number(text, "conditions", "fluorescence_lifetime_s", tau_f)
        aggregation = cond.get("rate_aggregation", "per_level")
        if aggregation not in ("per_level", "mean"):
            raise ConfigError(f"[conditions] rate_aggregation must be 'per_level' or 'mean'{_where(text, 'conditions', 'rate_aggregation')}")

        mom = data["moments"]
        _check_keys(text, "moments", mom)
        moments = default_moments(
            **{k: _number(text, "moments", k, v) for k, v in mom.items()}
        )

        ls = data["lineshape"]
        _check_keys(text, "lineshape", ls)
        overrides = ls.get("overrides", {})
        if not isinstance(overrides, dict):
            raise ConfigError(f"[lineshape] overrides must be a table{_where(text, 'lineshape', 'overrides')}")
        lineshape = LineshapeParams(
            kind=str(ls["kind"]),
            fwhm=_number(text, "lineshape", "fwhm_ghz", ls["fwhm_ghz"]),
            overrides={k: _number(text, "lineshape.overrides", k, v) for k, v in overrides.items()},
        )

        adjacency = {}
        for letter, entry in data["adjacency"].items():
            sec = f"adjacency.{letter}"
            if not isinstance(entry, dict):
                raise ConfigError(f"[{sec}] must be a table{_where(text, 'adjacency', letter)}")
            unknown = set(entry) - {"pol", "ground", "excited"}
            if unknown:
                key = sorted(unknown)[0]
                raise ConfigError(f"unknown key {key!r} in [{sec}]{_where(text, sec, key)}")
            missing = {"pol", "ground", "excited"} - set(entry)
            if missing:
                raise ConfigError(f"missing key {sorted(missing)[0]!r} in [{sec}]{_where(text, sec)}")
            if entry["pol"] not in ("pi", "sigma"):
                raise ConfigError(f"[{sec}] pol must be 'pi' or 'sigma'{_where(text, sec, 'pol')}")
            levels = []
            for side in ("ground", "excited"):
                lv = entry[side]
                if not (isinstance(lv, list) and lv and all(isinstance(i, int) and 1 <= i <= 4 for i in lv)):
                    raise ConfigError(f"[{sec}] {side} must be a nonempty list of levels 1..4{_where(text, sec, side)}")
                levels.append(tuple(lv))
            adjacency[letter] = AdjacencyEntry(entry["pol"], *levels)

        ratio = None
        if "isotope" in data:
            _check_keys(text, "isotope", data["isotope"])
            ratio = _number(text, "isotope", "moment_ratio", data["isotope"]["moment_ratio"])
            ground = ground.replace(a=scale_hyperfine_isotope(ground.a, ratio))
            excited = excited.replace(a=scale_hyperfine_isotope(excited.a, ratio))
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    return RunConfig(
        constants=consts,
        nuclear_zeeman=nz,
        ground=ground,
        excited=excited,
        medium=medium,
        number_density=density,
        temperature=temperature,
        fluorescence_lifetime=tau_f,
        rate_aggregation=aggregation,
        moments=moments,
        lineshape=lineshape,
        adjacency=adjacency,
        isotope_ratio=ratio,
        source=source,
    )


def default_config_text() -> str:
    return resources.files("ybspin.data").joinpath("default.toml").read_text(encoding="utf-8")


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse ``path``, or the bundled default when ``path`` is None."""
    if path is None:
        return parse_config(default_config_text(), "<default>")
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))


def default_table1_path():
    return resources.files("ybspin.data").joinpath("table1_absorption.csv")
