"""CSV reading and atomic writing with a fixed float format."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

FLOAT_FORMAT = "{:.8e}"  # 9 significant digits


class CsvError(ValueError):
    pass


def fmt(value) -> str:
    if isinstance(value, (bool, str)):
        return str(value).lower() if isinstance(value, bool) else value
    if isinstance(value, int):
        return str(value)
    return FLOAT_FORMAT.format(float(value))


def read_table(path: str | Path, required: Sequence[str], optional: Sequence[str] = ()) -> dict[str, list[str]]:
    """Columns of a headed CSV file as lists of strings.

    Missing required columns raise :class:`CsvError` naming them; optional
    columns absent from the file are left out of the result.
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise CsvError(f"cannot read {p}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise CsvError(f"{p}: file is empty (a header row is required)")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise CsvError(f"{p}: missing column(s) {', '.join(repr(c) for c in missing)}; header is {header}")
    if len(rows) == 1:
        raise CsvError(f"{p}: no data rows")
    out = {}
    for col in list(required) + [c for c in optional if c in header]:
        k = header.index(col)
        values = []
        for n, row in enumerate(rows[1:], 2):
            if k >= len(row):
                raise CsvError(f"{p}: line {n} has no value for column {col!r}")
            values.append(row[k].strip())
        out[col] = values
    return out


def floats(path, column: str, values: Iterable[str]) -> list[float]:
    out = []
    for n, v in enumerate(values, 2):
        try:
            out.append(float(v))
        except ValueError as exc:
            raise CsvError(f"{path}: line {n}, column {column!r}: not a number: {v!r}") from exc
    return out


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    p = Path(path)
    directory = p.parent if str(p.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, p)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    write_atomic(path, render_csv(header, rows))
