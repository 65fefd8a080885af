"""Reading and writing counts, models, bias estimates and CSV reports."""
import csv
import io
import json
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .bias import BiasEstimate
from .errors import DomainError, ParseError
from .model import CountMatrix, GroundTruthModel

FLOAT_FMT = "%.17g"


def _locate_mm_error(path):
    """First line number that breaks the coordinate format, or None."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        return 1, "missing %%MatrixMarket banner"
    head = lines[0].split()
    if len(head) != 5 or head[1].lower() != "matrix" or head[2].lower() != "coordinate":
        return 1, "expected a 'matrix coordinate' banner"
    i = 1
    while i < len(lines) and (lines[i].startswith("%") or not lines[i].strip()):
        i += 1
    if i == len(lines):
        return i, "missing size line"
    size = lines[i].split()
    try:
        m, n, nnz = (int(x) for x in size)
    except ValueError:
        return i + 1, f"bad size line {lines[i]!r}"
    entries = 0
    for j in range(i + 1, len(lines)):
        parts = lines[j].split()
        if not parts:
            continue
        try:
            r, c = int(parts[0]), int(parts[1])
            float(parts[2])
            if len(parts) != 3:
                raise ValueError
        except (ValueError, IndexError):
            return j + 1, f"bad entry {lines[j]!r}"
        if not (1 <= r <= m and 1 <= c <= n):
            return j + 1, f"index ({r}, {c}) outside {m}x{n}"
        entries += 1
    if entries != nnz:
        return len(lines), f"expected {nnz} entries, found {entries}"
    return None


def read_matrix_market(path):
    try:
        Z = scipy.io.mmread(str(path))
    except Exception as e:
        loc = _locate_mm_error(path)
        if loc is None:
            raise ParseError(f"{path}: {e}") from e
        raise ParseError(f"{path}: {loc[1]}", line=loc[0]) from e
    if not sp.issparse(Z):
        Z = sp.csr_matrix(Z)
    if Z.nnz and np.any(Z.data < 0):
        raise DomainError(f"{path}: negative counts")
    return CountMatrix(Z)


def write_matrix_market(path, counts):
    Z = sp.coo_matrix(counts.Z)
    scipy.io.mmwrite(str(path), Z, field="integer", symmetry="general")


def read_count_csv(path):
    """Dense integer CSV, one matrix row per line, no header."""
    rows = []
    with open(path, newline="") as f:
        for lineno, rec in enumerate(csv.reader(f), start=1):
            if not rec:
                continue
            try:
                vals = [int(x) for x in rec]
            except ValueError:
                raise ParseError(f"{path}: non-integer entry in {rec!r}", line=lineno) from None
            if rows and len(vals) != len(rows[0]):
                raise ParseError(f"{path}: expected {len(rows[0])} columns, got {len(vals)}", line=lineno)
            if any(v < 0 for v in vals):
                raise DomainError(f"{path}: negative count on line {lineno}")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: empty file", line=1)
    return CountMatrix(sp.csr_matrix(np.array(rows, dtype=np.int64)))


def write_count_csv(path, counts):
    np.savetxt(path, counts.toarray(), fmt="%d", delimiter=",")


def read_counts(path, fmt=None):
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "matrix-market")
    if fmt == "csv":
        return read_count_csv(path)
    if fmt == "matrix-market":
        return read_matrix_market(path)
    raise ParseError(f"unknown count format {fmt!r}")


def write_counts(path, counts, fmt=None):
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "matrix-market")
    if fmt == "csv":
        write_count_csv(path, counts)
    else:
        write_matrix_market(path, counts)


def _load_matrix(path, ndim):
    try:
        X = np.loadtxt(path, delimiter=",", ndmin=ndim)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e
    return X


def write_model(directory, model):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "U.csv", model.U, fmt=FLOAT_FMT, delimiter=",")
    np.savetxt(d / "V.csv", model.V, fmt=FLOAT_FMT, delimiter=",")
    np.savetxt(d / "s_u.csv", model.s_u, fmt=FLOAT_FMT)
    np.savetxt(d / "s_v.csv", model.s_v, fmt=FLOAT_FMT)
    seed = model.seed if isinstance(model.seed, (int, type(None))) else int(model.seed)
    manifest = dict(m=model.m, n=model.n, d=model.d, lambda0=model.lambda0, seed=seed)
    (d / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_model(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / "model.json").read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{d / 'model.json'}: {e.msg}", line=e.lineno) from e
    U = _load_matrix(d / "U.csv", 2)
    V = _load_matrix(d / "V.csv", 2)
    s_u = _load_matrix(d / "s_u.csv", 1)
    s_v = _load_matrix(d / "s_v.csv", 1)
    if U.shape != (manifest["m"], manifest["d"]) or V.shape != (manifest["n"], manifest["d"]):
        raise ParseError(f"{d}: factor shapes do not match the manifest")
    return GroundTruthModel(U, V, s_u, s_v, float(manifest["lambda0"]), manifest.get("seed"))


def write_bias(directory, est):
    """bias_u.csv / bias_v.csv with (index, r_hat, s_hat) and bias.json with the count level."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for side, r in (("u", est.r_u_hat), ("v", est.r_v_hat)):
        rows = [dict(index=i, r_hat=float(x), s_hat=float(np.log(x))) for i, x in enumerate(r)]
        write_rows(d / f"bias_{side}.csv", rows)
    (d / "bias.json").write_text(json.dumps(dict(z_tot=est.z_tot, lambda0_hat=est.lambda0_hat), indent=2) + "\n")


def read_bias(directory):
    d = Path(directory)
    meta = json.loads((d / "bias.json").read_text())
    sides = []
    for side in ("u", "v"):
        rows = read_rows(d / f"bias_{side}.csv")
        sides.append(np.array([float(r["r_hat"]) for r in rows]))
    return BiasEstimate(sides[0], sides[1], meta["z_tot"], float(meta["lambda0_hat"]))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def rows_to_csv(rows, columns=None):
    """CSV text with a header; columns default to the keys of the first row."""
    if not rows:
        return ""
    columns = list(rows[0]) if columns is None else list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_rows(path, rows, columns=None):
    Path(path).write_text(rows_to_csv(rows, columns))


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def flatten(prefix, X):
    """Entries of a d x d matrix as {prefix_i_j: value} in row-major order."""
    X = np.asarray(X)
    return {f"{prefix}_{i}_{j}": float(X[i, j]) for i in range(X.shape[0]) for j in range(X.shape[1])}
