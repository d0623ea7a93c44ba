"""Readers and writers: point clouds (PLY, OBJ, XYZ), the JSON model
format, synthetic scans with their truth sidecar, and run reports."""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import ParseError, UnsupportedFormat
from .model import ModelParams, TemplateModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

POINT_FORMATS = (".ply", ".obj", ".xyz")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props = []     # (name, dtype) or (name, (count dtype, item dtype))

    @property
    def has_list(self):
        return any(isinstance(t, tuple) for _, t in self.props)


def _ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or 'end_header')", f"{path}: line 1")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        where = f"{path}: line {lineno}"
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unknown PLY format {line!r}", where)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"bad element line {line!r}", where)
            elements.append(_Element(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", where)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"bad list property {line!r}", where)
                elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"bad property {line!r}", where)
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", where)
    if fmt is None:
        raise ParseError("PLY header has no format line", f"{path}: line 1")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat(f"{path}: big-endian PLY is not supported")
    return fmt, elements, body_start, len(lines) + 1


def _ply_ascii_body(text_lines, elements, first_line, path):
    out = {}
    pos = 0
    for el in elements:
        rows = []
        for _ in range(el.count):
            lineno = first_line + pos + 1
            if pos >= len(text_lines):
                raise ParseError(f"file ends inside element '{el.name}'", f"{path}: line {lineno}")
            tok = text_lines[pos].split()
            pos += 1
            vals, i = [], 0
            try:
                for _, t in el.props:
                    if isinstance(t, tuple):
                        n = int(tok[i])
                        vals.append([float(v) for v in tok[i + 1:i + 1 + n]])
                        if len(vals[-1]) != n:
                            raise IndexError
                        i += 1 + n
                    else:
                        vals.append(float(tok[i]))
                        i += 1
            except (IndexError, ValueError):
                raise ParseError(f"malformed '{el.name}' row {text_lines[pos - 1]!r}",
                                 f"{path}: line {lineno}") from None
            rows.append(vals)
        out[el.name] = rows
    return out


def _ply_binary_body(data, offset, elements, path):
    out = {}
    for el in elements:
        if not el.has_list:
            dt = np.dtype([(n, "<" + t) for n, t in el.props])
            need = dt.itemsize * el.count
            if offset + need > len(data):
                raise ParseError(
                    f"truncated binary PLY: element '{el.name}' needs {need} bytes, "
                    f"{len(data) - offset} left", f"{path}: byte offset {len(data)}")
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=offset)
            out[el.name] = arr
            offset += need
            continue
        rows = []
        for _ in range(el.count):
            vals = []
            for _, t in el.props:
                if isinstance(t, tuple):
                    ct, it = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if offset + ct.itemsize > len(data):
                        raise ParseError("truncated binary PLY list", f"{path}: byte offset {offset}")
                    n = int(np.frombuffer(data, ct, 1, offset)[0])
                    offset += ct.itemsize
                    if offset + n * it.itemsize > len(data):
                        raise ParseError("truncated binary PLY list", f"{path}: byte offset {offset}")
                    vals.append(np.frombuffer(data, it, n, offset).tolist())
                    offset += n * it.itemsize
                else:
                    dt = np.dtype("<" + t)
                    if offset + dt.itemsize > len(data):
                        raise ParseError("truncated binary PLY row", f"{path}: byte offset {offset}")
                    vals.append(float(np.frombuffer(data, dt, 1, offset)[0]))
                    offset += dt.itemsize
            rows.append(vals)
        out[el.name] = rows
    return out


def _column(body, el, name):
    rows = body[el.name]
    if isinstance(rows, np.ndarray):
        return rows[name].astype(np.float64)
    idx = [n for n, _ in el.props].index(name)
    return np.array([r[idx] for r in rows], dtype=np.float64)


def read_ply(path):
    """Returns ``(points, normals or None, faces or None)``."""
    path = Path(path)
    data = path.read_bytes()
    fmt, elements, body_start, header_lines = _ply_header(data, path)
    if fmt == "ascii":
        lines = [ln for ln in data[body_start:].decode("ascii", errors="replace").splitlines()
                 if ln.strip()]
        body = _ply_ascii_body(lines, elements, header_lines, path)
    else:
        body = _ply_binary_body(data, body_start, elements, path)
    verts = next((e for e in elements if e.name == "vertex"), None)
    if verts is None:
        raise ParseError("PLY file has no vertex element", f"{path}: header")
    names = [n for n, _ in verts.props]
    if not all(c in names for c in "xyz"):
        raise ParseError("vertex element lacks x, y, z", f"{path}: header")
    points = np.stack([_column(body, verts, c) for c in "xyz"], axis=1).reshape(-1, 3)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack([_column(body, verts, c) for c in ("nx", "ny", "nz")], axis=1).reshape(-1, 3)
    faces = None
    face_el = next((e for e in elements if e.name == "face"), None)
    if face_el is not None and face_el.count:
        rows = body["face"]
        lists = [r[0] for r in rows]
        if any(len(f) != 3 for f in lists):
            raise UnsupportedFormat(f"{path}: only triangle faces are supported")
        faces = np.array(lists, dtype=np.int64).reshape(-1, 3)
    return points, normals, faces


def write_ply(path, points, normals=None, faces=None, binary: bool = False):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = ["x", "y", "z"]
    data = points
    if normals is not None:
        cols += ["nx", "ny", "nz"]
        data = np.hstack([points, np.asarray(normals, dtype=np.float64).reshape(-1, 3)])
    faces = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(points)}"]
    header += [f"property double {c}" for c in cols]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                rec["n"] = 3
                rec["v"] = faces
                fh.write(rec.tobytes())
        else:
            # repr-precision floats round-trip exactly
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# --------------------------------------------------------------------------
# OBJ / XYZ
# --------------------------------------------------------------------------

def _read_obj(path):
    pts, normals = [], []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0] not in ("v", "vn"):
                continue
            try:
                vals = [float(v) for v in tok[1:4]]
            except ValueError:
                raise ParseError(f"bad coordinate in {line.strip()!r}", f"{path}: line {lineno}") from None
            if len(vals) != 3:
                raise ParseError(f"expected 3 coordinates in {line.strip()!r}", f"{path}: line {lineno}")
            (pts if tok[0] == "v" else normals).append(vals)
    pts = np.array(pts, dtype=np.float64).reshape(-1, 3)
    nrm = np.array(normals, dtype=np.float64).reshape(-1, 3)
    return pts, (nrm if len(nrm) == len(pts) and len(pts) else None)


def _read_xyz(path):
    pts = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.replace(",", " ").split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                vals = [float(v) for v in tok]
            except ValueError:
                raise ParseError(f"non-numeric value in {line.strip()!r}", f"{path}: line {lineno}") from None
            if len(vals) not in (3, 6):
                raise ParseError(f"expected 3 or 6 columns, got {len(vals)}", f"{path}: line {lineno}")
            pts.append(vals)
    widths = {len(p) for p in pts}
    if len(widths) > 1:
        raise ParseError("rows mix 3 and 6 columns", f"{path}")
    arr = np.array(pts, dtype=np.float64).reshape(len(pts), -1) if pts else np.zeros((0, 3))
    return arr[:, :3], (arr[:, 3:6] if arr.shape[1] == 6 else None)


def _check_finite(points, path):
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise ParseError("non-finite coordinate", f"{path}: point {int(bad[0])}")


def read_point_cloud(path) -> PointCloud:
    """Load a cloud in meters from PLY (ascii or binary little-endian), OBJ
    (``v``/``vn`` lines only) or whitespace XYZ text."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        pts, normals, _ = read_ply(path)
    elif ext == ".obj":
        pts, normals = _read_obj(path)
    elif ext in (".xyz", ".txt"):
        pts, normals = _read_xyz(path)
    else:
        raise UnsupportedFormat(f"{path}: unknown point cloud extension {ext!r}")
    _check_finite(pts, path)
    return PointCloud(pts, normals)


def write_point_cloud(path, cloud: PointCloud, binary: bool = False):
    path = Path(path)
    ext = path.suffix.lower()
    pts, normals = cloud.points, cloud.normals
    if ext == ".ply":
        write_ply(path, pts, normals, binary=binary)
    elif ext == ".obj":
        with open(path, "w", encoding="utf-8") as fh:
            for p in pts:
                fh.write("v " + " ".join(repr(float(v)) for v in p) + "\n")
            if normals is not None:
                for n in normals:
                    fh.write("vn " + " ".join(repr(float(v)) for v in n) + "\n")
    elif ext in (".xyz", ".txt"):
        data = pts if normals is None else np.hstack([pts, normals])
        with open(path, "w", encoding="utf-8") as fh:
            for row in data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    else:
        raise UnsupportedFormat(f"{path}: unknown point cloud extension {ext!r}")


# --------------------------------------------------------------------------
# Model JSON
# --------------------------------------------------------------------------

def _triplets(mat):
    r, c = np.nonzero(mat)
    return [[int(i), int(j), float(mat[i, j])] for i, j in zip(r, c)]


def _dense(triplets, shape, what):
    out = np.zeros(shape)
    for t in triplets:
        if len(t) != 3:
            raise ParseError(f"{what} entries must be [row, col, value]", what)
        i, j, v = int(t[0]), int(t[1]), float(t[2])
        if not (0 <= i < shape[0] and 0 <= j < shape[1]):
            raise ParseError(f"{what} index ({i}, {j}) outside {shape}", what)
        out[i, j] += v
    return out


def model_to_dict(model: TemplateModel) -> dict:
    d = {
        "rest_vertices": model.rest_vertices.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "joint_regressor": _triplets(model.joint_regressor),
        "parents": [int(p) for p in model.parents],
        "skin_weights": _triplets(model.skin_weights),
        "hinge_joints": [list(h) for h in model.hinge_joints],
    }
    if model.faces is not None:
        d["faces"] = model.faces.tolist()
    if model.joint_names is not None:
        d["joint_names"] = list(model.joint_names)
    return d


def model_from_dict(d: dict, source="model") -> TemplateModel:
    missing = [k for k in ("rest_vertices", "shape_basis", "joint_regressor", "parents",
                           "skin_weights", "hinge_joints") if k not in d]
    if missing:
        raise ParseError(f"model is missing fields {missing}", str(source))
    rest = np.asarray(d["rest_vertices"], dtype=np.float64).reshape(-1, 3)
    m, j = rest.shape[0], len(d["parents"])
    basis = np.asarray(d["shape_basis"], dtype=np.float64)
    if basis.size == 0:
        basis = np.zeros((m, 3, 0))
    return TemplateModel(
        rest_vertices=rest,
        shape_basis=basis,
        joint_regressor=_dense(d["joint_regressor"], (j, m), "joint_regressor"),
        parents=np.asarray(d["parents"], dtype=np.int64),
        skin_weights=_dense(d["skin_weights"], (m, j), "skin_weights"),
        hinge_joints=tuple(tuple(int(v) for v in h) for h in d["hinge_joints"]),
        faces=None if d.get("faces") is None else np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
        joint_names=None if d.get("joint_names") is None else tuple(d["joint_names"]),
    )


def read_model(path) -> TemplateModel:
    return model_from_dict(read_json(path), path)


def write_model(path, model: TemplateModel):
    write_json(path, model_to_dict(model))


# --------------------------------------------------------------------------
# JSON / TOML / CSV helpers
# --------------------------------------------------------------------------

def read_json(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}: line {exc.lineno} column {exc.colno}") from None


def write_json(path, obj):
    # sorted keys and a trailing newline keep output byte-stable
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_config(path) -> dict:
    """Read a TOML or JSON run configuration."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return read_json(path)
    if path.suffix.lower() != ".toml":
        raise UnsupportedFormat(f"{path}: config must be .toml or .json")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc), str(path)) from None


def write_trace_csv(path, trace):
    """One row per EM iteration."""
    fields = ["iteration", "energy", "sigma2", "sigma2_itr", "steps",
              "l_unsup", "l_theta", "l_a", "l_beta", "total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for rec in trace:
            d = rec.to_dict()
            loss = d.pop("loss")
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (d["iteration"], d["energy"], d["sigma2"], d["sigma2_itr"],
                                  d["steps"], loss["l_unsup"], loss["l_theta"], loss["l_a"],
                                  loss["l_beta"], loss["total"])])


def write_rows_csv(path, rows):
    """Rows of dicts sharing the keys of the first row."""
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# --------------------------------------------------------------------------
# Synthetic scans
# --------------------------------------------------------------------------

def write_scan(path, scan) -> Path:
    """Write ``<stem>.ply`` plus a ``<stem>.json`` sidecar with the truth."""
    path = Path(path)
    write_point_cloud(path, scan.cloud)
    side = {
        "truth_params": scan.truth_params.to_dict(),
        "truth_joints": scan.truth_joints.tolist(),
        "outlier_mask": [bool(b) for b in scan.outlier_mask],
        "spec": None if scan.spec is None else scan.spec.to_dict(),
    }
    sidecar = path.with_suffix(".json")
    write_json(sidecar, side)
    return sidecar


def read_scan_truth(path) -> dict:
    """Load the sidecar next to a scan file.  Returns ``truth_params``
    as ModelParams and the outlier mask as a boolean array."""
    side = read_json(Path(path).with_suffix(".json"))
    try:
        return {"truth_params": ModelParams.from_dict(side["truth_params"]),
                "truth_joints": np.asarray(side["truth_joints"], dtype=np.float64),
                "outlier_mask": np.asarray(side["outlier_mask"], dtype=bool),
                "spec": side.get("spec")}
    except (KeyError, TypeError) as exc:
        raise ParseError(f"scan sidecar lacks {exc}", str(path)) from None


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
