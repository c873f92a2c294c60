import csv
import subprocess
import sys

import numpy as np
import pytest
from scipy.signal import find_peaks

from ybspin.cli import main
from ybspin.config import default_config_text, load_config
from ybspin.fitting import exponential_model, lorentzian_model, mims_model, synthesize_observations
from ybspin.spectra import field_ramp_map
from ybspin.spinham import FieldVector, manifold_levels, spin_operators

from .conftest import EXCITED, FIT_FIELDS, GROUND

MU_B = 13.9962449


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def first_row(path):
    header, rows = read_csv(path)
    return dict(zip(header, rows[0]))


def run(*argv):
    return main([str(a) for a in argv])


def write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def perturbed_config(tmp_path):
    text = default_config_text()
    for old, new in [
        ("g_parallel = 2.51", "g_parallel = 2.6"),
        ("g_perpendicular = 1.7", "g_perpendicular = 1.65"),
        ("a_parallel = 4.86", "a_parallel = 4.7"),
        ("a_perpendicular = 3.37", "a_perpendicular = 3.45"),
    ]:
        assert old in text
        text = text.replace(old, new)
    p = tmp_path / "start.toml"
    p.write_text(text)
    return p


def observation_csv(path, fields, noise, seed):
    obs = synthesize_observations(GROUND, EXCITED, fields, noise=noise, rng=np.random.default_rng(seed))
    rows = [(o.field.bx, o.field.by, o.field.bz, o.pol, repr(o.freq), o.uncertainty) for o in obs]
    return write(path, ["bx", "by", "bz", "pol", "freq", "uncertainty"], rows)


# -- levels ------------------------------------------------------------------


def test_levels_zero_field_ground(tmp_path):
    out = tmp_path / "levels.csv"
    assert run("levels", "--out", out) == 0
    header, rows = read_csv(out)
    assert header == ["index", "label", "energy_ghz"]
    e = np.array([float(r[2]) for r in rows])
    distinct = np.unique(np.round(e, 6))
    assert distinct.size == 3
    assert np.sum(np.isclose(e, -1.205)) == 2


def test_levels_excited_one_tesla_along_c(tmp_path):
    out = tmp_path / "levels.csv"
    assert run("levels", "--manifold", "excited", "--field", "0,0,1", "--out", out) == 0
    e = np.array([float(r[2]) for r in read_csv(out)[1]])
    assert np.unique(np.round(e, 6)).size == 4
    # the two electron branches are each a hyperfine pair; compare their centres
    split = e[2:].mean() - e[:2].mean()
    assert split == pytest.approx(35.1, abs=0.15)
    # exact: the {up-Down, down-Up} block adds A_perp mixing to one state per branch
    z = 2.51 * MU_B
    assert split == pytest.approx(z / 2 + 0.5 * np.hypot(z, 3.37), rel=1e-9)


@pytest.mark.parametrize("content", ["[ground\n", "[medium]\nfoo = 1\n", ""])
def test_malformed_config_fails_without_output(tmp_path, content, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(content)
    out = tmp_path / "levels.csv"
    assert run("levels", "--config", cfg, "--out", out) != 0
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_names_line(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(default_config_text().replace("[medium]\n", "[medium]\ncolour = 1\n"))
    assert run("levels", "--config", cfg) == 1
    assert "line" in capsys.readouterr().err


def test_bad_field_is_usage_error():
    with pytest.raises(SystemExit) as info:
        run("levels", "--field", "1,2")
    assert info.value.code == 2


# -- spectrum ----------------------------------------------------------------


@pytest.mark.parametrize("pol, count", [("pi", 3), ("sigma", 4)])
def test_zero_field_peak_count(tmp_path, pol, count):
    out = tmp_path / "spec.csv"
    assert run("spectrum", "--pol", pol, "--out", out) == 0
    header, rows = read_csv(out)
    assert header == ["detuning_ghz", "alpha"]
    alpha = np.array([float(r[1]) for r in rows])
    peaks, _ = find_peaks(alpha, prominence=0.01 * alpha.max())
    assert len(peaks) == count


def test_spectrum_coarse_grid_errors(tmp_path, capsys):
    out = tmp_path / "spec.csv"
    assert run("spectrum", "--range=-5:5:11", "--out", out) == 1
    assert not out.exists()
    assert "grid" in capsys.readouterr().err.lower()


def test_spectrum_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("spectrum", "--pol", "sigma", "--field", "0.1,0,0.2", "--out", a) == 0
    assert run("spectrum", "--pol", "sigma", "--field", "0.1,0,0.2", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


# -- ramp --------------------------------------------------------------------


def test_ramp_rows_and_zero_field_row(tmp_path):
    ramp = tmp_path / "ramp.csv"
    spec = tmp_path / "spec.csv"
    assert run("ramp", "--range=-0.2:0.2:9", "--detuning=-6:6:601", "--pol", "sigma", "--out", ramp) == 0
    assert run("spectrum", "--pol", "sigma", "--range=-6:6:601", "--out", spec) == 0
    header, rows = read_csv(ramp)
    assert len(rows) == 9
    assert len(header) == 602
    zero = next(r for r in rows if float(r[0]) == 0.0)
    assert zero[1:] == [r[1] for r in read_csv(spec)[1]]


def test_ramp_workers_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    common = ["ramp", "--range", "0:0.5:6", "--orientation", "0.3,0,1", "--detuning=-8:8:801"]
    assert run(*common, "--out", a) == 0
    assert run(*common, "--workers", "3", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_ramp_line_drift_follows_perturbation_sign():
    cfg = load_config()
    b_values = np.linspace(0.02, 0.6, 30)
    ramp = field_ramp_map(cfg.ground, cfg.excited, (0, 0, 1), b_values, cfg.moments, cfg.lineshape, 2.0, np.linspace(-6, 6, 601), pol="pi")
    sz = spin_operators()[2]
    freqs, slopes = [], []
    for b, cat in zip(b_values, ramp.catalogs):
        ln = next(x for x in cat if x.ground_index == 1 and x.excited_index == 4)
        freqs.append(ln.freq)
        field = FieldVector(0, 0, b)
        lg, le = manifold_levels(cfg.ground, field), manifold_levels(cfg.excited, field)
        dg = MU_B * cfg.ground.g.parallel * np.vdot(lg.states[0], sz @ lg.states[0]).real
        de = MU_B * cfg.excited.g.parallel * np.vdot(le.states[3], sz @ le.states[3]).real
        slopes.append(de - dg)
    drift = np.sign(np.diff(freqs))
    assert np.all(drift == drift[0]) and drift[0] != 0
    assert np.all(np.sign(slopes) == drift[0])


def test_ramp_bad_orientation_usage_error():
    with pytest.raises(SystemExit) as info:
        run("ramp", "--range", "0:1:3", "--orientation", "0,0,0")
    assert info.value.code == 2


# -- fit-ham -----------------------------------------------------------------


def test_fit_ham_round_trip_and_bit_exact(tmp_path):
    obs = observation_csv(tmp_path / "obs.csv", FIT_FIELDS, 0.01, 2)
    cfg = perturbed_config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("fit-ham", "--config", cfg, "--input", obs, "--seed", 3, "--out", a) == 0
    assert run("fit-ham", "--config", cfg, "--input", obs, "--seed", 3, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    got = first_row(a)
    truth = {"a_parallel": 4.86, "a_perpendicular": 3.37, "g_parallel": 2.51, "g_perpendicular": 1.7}
    for name, value in truth.items():
        assert float(got[name]) == pytest.approx(value, rel=0.01), name
    assert got["converged"] == "true" and got["flags"] == ""


def test_fit_ham_zero_field_only_flagged(tmp_path, capsys):
    obs = observation_csv(tmp_path / "obs.csv", [FieldVector()], 0.0, 0)
    out = tmp_path / "fit.csv"
    assert run("fit-ham", "--config", perturbed_config(tmp_path), "--input", obs, "--out", out) == 3
    assert out.exists()
    flags = first_row(out)["flags"]
    assert "unidentifiable:g_parallel" in flags
    assert "unidentifiable" in capsys.readouterr().err


def test_fit_ham_too_few_observations(tmp_path):
    path = write(tmp_path / "obs.csv", ["bx", "by", "bz", "pol", "freq", "uncertainty"], [(0, 0, 0, "pi", -3.77, 0.01)] * 3)
    out = tmp_path / "fit.csv"
    assert run("fit-ham", "--input", path, "--out", out) == 1
    assert not out.exists()


def test_fit_ham_bad_row_reports_line(tmp_path, capsys):
    rows = [(0, 0, 0, "pi", -3.77, 0.01), (0, 0, 0, "pi", -1.07, -0.01)]
    path = write(tmp_path / "obs.csv", ["bx", "by", "bz", "pol", "freq", "uncertainty"], rows)
    assert run("fit-ham", "--input", path) == 1
    assert "line 3" in capsys.readouterr().err


# -- fit-decay ---------------------------------------------------------------


def test_fit_decay_exponential(tmp_path):
    t = np.linspace(0, 1.5e-3, 300)
    path = write(tmp_path / "trace.csv", ["time", "value"], zip(t, exponential_model(t, 1.0, 267e-6, 0.0)))
    out = tmp_path / "fit.csv"
    assert run("fit-decay", "--input", path, "--model", "exp", "--out", out) == 0
    got = first_row(out)
    assert float(got["tau"]) == pytest.approx(267e-6, rel=1e-4)


def test_fit_decay_mims_intensity_and_fixed_x(tmp_path):
    t = np.linspace(0, 150e-6, 200)
    path = write(tmp_path / "echo.csv", ["time", "value"], zip(t, mims_model(t, 1.0, 106e-6, 1.7, "intensity")))
    out = tmp_path / "fit.csv"
    assert run("fit-decay", "--input", path, "--model", "mims", "--mode", "intensity", "--out", out) == 0
    got = first_row(out)
    assert float(got["Tm"]) == pytest.approx(106e-6, rel=1e-3)
    assert float(got["x"]) == pytest.approx(1.7, rel=1e-3)
    # x_fixed is informational and does not change the exit code
    path = write(tmp_path / "e1.csv", ["time", "value"], zip(t, mims_model(t, 1.0, 106e-6, 1.0)))
    assert run("fit-decay", "--input", path, "--model", "mims", "--fix-x", "1", "--out", out) == 0


def test_fit_decay_lorentzian_with_shuffled_rows(tmp_path, rng):
    x = np.linspace(-1.5e6, 1.5e6, 81)
    y = lorentzian_model(x, 1e5, 250e3, 2.0, 0.1)
    perm = rng.permutation(x.size)
    path = write(tmp_path / "line.csv", ["frequency", "value"], zip(x[perm], y[perm]))
    out = tmp_path / "fit.csv"
    assert run("fit-decay", "--input", path, "--model", "lorentzian", "--out", out) == 0
    got = first_row(out)
    assert float(got["fwhm"]) == pytest.approx(250e3, rel=1e-4)


def test_fit_decay_unknown_model_usage_error(tmp_path):
    path = write(tmp_path / "t.csv", ["time", "value"], [(0, 1)])
    with pytest.raises(SystemExit) as info:
        run("fit-decay", "--input", path, "--model", "gaussian")
    assert info.value.code == 2


def test_fit_decay_missing_column_named(tmp_path, capsys):
    path = write(tmp_path / "t.csv", ["time", "signal"], [(k, 1.0 / (k + 1)) for k in range(10)])
    out = tmp_path / "fit.csv"
    assert run("fit-decay", "--input", path, "--model", "exp", "--out", out) == 1
    assert "'value'" in capsys.readouterr().err
    assert not out.exists()


def test_fit_decay_constant_trace_errors(tmp_path):
    path = write(tmp_path / "t.csv", ["time", "value"], [(k, 2.0) for k in range(10)])
    assert run("fit-decay", "--input", path, "--model", "exp") == 1


# -- table1 ------------------------------------------------------------------

TABLE1 = {"A": (5.4, 1.3), "C": (1.0, 0.3), "E": (5.5, 1.4), "F": (1.1, 0.4), "G": (2.6, 0.2), "H": (2.6, 0.2), "I": (4.9, 1.2)}


def test_table1_reproduces_printed_columns(tmp_path, capsys):
    out = tmp_path / "t1.csv"
    assert run("table1", "--out", out) == 0
    header, rows = read_csv(out)
    assert header[0] == "label"
    for r in rows:
        row = dict(zip(header, r))
        f_ref, rate_ref = TABLE1[row["label"]]
        assert float(row["oscillator_strength"]) == pytest.approx(f_ref * 1e-6, rel=0.10)
        assert float(row["radiative_rate_per_s"]) == pytest.approx(rate_ref * 1e3, rel=0.15)
    text = capsys.readouterr().out
    assert "radiative lifetime" in text and "branching ratio" in text


def test_table1_empty_input_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("label,pol,integrated_absorption_ghz_per_cm\n")
    out = tmp_path / "t1.csv"
    assert run("table1", "--input", empty, "--out", out) == 1
    assert not out.exists()


def test_table1_unknown_letter_errors(tmp_path):
    path = write(tmp_path / "t.csv", ["label", "pol", "integrated_absorption_ghz_per_cm"], [("Z", "pi", 10.0)])
    assert run("table1", "--input", path) == 1


# -- zefoz -------------------------------------------------------------------


def test_zefoz_finds_zero_field(tmp_path):
    out = tmp_path / "z.csv"
    assert run("zefoz", "--transition", "g3-g4", "--out", out) == 0
    header = read_csv(out)[0]
    first = first_row(out)
    assert max(abs(float(first[k])) for k in ("bx", "by", "bz")) < 1e-3
    assert float(first["freq_ghz"]) == pytest.approx(0.675, abs=1e-6)
    assert len(header) == 17


def test_zefoz_empty_domain_errors(tmp_path):
    out = tmp_path / "z.csv"
    assert run("zefoz", "--domain", "0.1:-0.1,0:0,0:0", "--out", out) == 1
    assert not out.exists()


def test_zefoz_threshold_respected(tmp_path):
    out = tmp_path / "z.csv"
    assert run("zefoz", "--domain", "0.2:0.3,0:0,0.2:0.3", "--out", out) == 0
    assert read_csv(out)[1] == []
    assert run("zefoz", "--domain", "0.2:0.3,0:0,0.2:0.3", "--threshold", "1e3", "--out", out) == 0
    rows = read_csv(out)[1]
    assert rows and all(float(r[7]) < 1e3 for r in rows)


def test_zefoz_degenerate_transition_reports_no_zero_field_point(tmp_path):
    out = tmp_path / "z.csv"
    assert run("zefoz", "--transition", "g1-g2", "--out", out) == 0
    for r in read_csv(out)[1]:
        assert np.linalg.norm([float(v) for v in r[:3]]) > 1e-3


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "levels.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "ybspin.cli", "levels", "--out", str(out)], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
