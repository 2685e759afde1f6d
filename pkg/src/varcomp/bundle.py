"""Reading and writing problem bundles and JSON results.

A bundle is a directory holding ``y.csv`` (one column, or one column per
response for multivariate data), an optional ``X.csv`` and a
``manifest.txt`` listing the covariance basis files, one relative path per
line, in component order. Blank lines and lines starting with ``#`` in the
manifest are ignored.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
RESPONSE = "y.csv"
DESIGN = "X.csv"


class BundleError(ValueError):
    """Malformed input files."""


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv_matrix(path) -> tuple[np.ndarray, list | None]:
    """Numeric CSV as a 2-D array plus the header row when present.

    The first row is treated as a header when any of its cells is not a
    number. Rows must all have the same length and every value must be
    finite.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise BundleError(f"cannot read {path}: {exc.strerror}") from None
    header = None
    if rows and not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise BundleError(f"{path} has no data rows")
    width = len(rows[0])
    if header is not None and len(header) != width:
        raise BundleError(f"{path}: header has {len(header)} fields, data has {width}")
    try:
        data = np.array([[float(c) for c in r] for r in rows if len(r) == width])
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from None
    if data.shape[0] != len(rows):
        raise BundleError(f"{path}: rows have differing numbers of fields")
    if not np.all(np.isfinite(data)):
        raise BundleError(f"{path}: non-finite values")
    return data, header


def write_csv_matrix(path, A, header=None):
    """Write with ``repr`` formatting so values round-trip exactly."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in A:
            w.writerow([repr(float(v)) for v in row])


def read_manifest(path) -> list[Path]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise BundleError(f"cannot read manifest {path}: {exc.strerror}") from None
    entries = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
    if not entries:
        raise BundleError(f"manifest {path} lists no covariance files")
    return [path.parent / e for e in entries]


@dataclass
class Bundle:
    """Arrays loaded from a bundle directory."""

    y: np.ndarray
    X: np.ndarray | None
    V: list
    names: list

    @property
    def d(self) -> int:
        return self.y.shape[1]


def load_bundle(directory=None, y=None, X=None, manifest=None) -> Bundle:
    """Load a bundle; explicit paths override the directory defaults."""
    base = Path(directory) if directory is not None else None

    def resolve(given, default):
        if given is not None:
            return Path(given)
        if base is None:
            return None
        return base / default

    y_path = resolve(y, RESPONSE)
    man_path = resolve(manifest, MANIFEST)
    if y_path is None or man_path is None:
        raise BundleError("need a bundle directory or explicit response and manifest paths")
    x_path = resolve(X, DESIGN)
    Y, _ = read_csv_matrix(y_path)
    Xm = None
    if x_path is not None and (X is not None or x_path.exists()):
        Xm, _ = read_csv_matrix(x_path)
    files = read_manifest(man_path)
    V = []
    for f in files:
        Vi, _ = read_csv_matrix(f)
        V.append(Vi)
    return Bundle(Y, Xm, V, [f.stem for f in files])


def write_bundle(directory, y, X, V, names=None):
    """Write a bundle that :func:`load_bundle` reads back bit for bit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    y = np.asarray(y, dtype=float)
    write_csv_matrix(directory / RESPONSE, y.reshape(y.shape[0], -1))
    if X is not None:
        write_csv_matrix(directory / DESIGN, X)
    names = list(names or [f"V{i + 1}" for i in range(len(V))])
    for name, Vi in zip(names, V):
        write_csv_matrix(directory / f"{name}.csv", Vi)
    (directory / MANIFEST).write_text("".join(f"{name}.csv\n" for name in names))
    return directory


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    """JSON text with shortest round-trip floats and ``null`` for non-finite values."""
    return json.dumps(_plain(obj), indent=2, allow_nan=False) + "\n"
