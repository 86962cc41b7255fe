"""PLY point files and the versioned JSON documents of a dataset directory.

Every per-point JSON array is aligned with the point order of the scene's
``cloud.ply``. Binary PLY round-trips doubles bit-exactly; ASCII PLY uses
``repr`` formatting, which is also exact for doubles.
"""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path

import numpy as np

from .encoding import ImplicitEncoding
from .evaluation import EvalReport
from .geometry import OrientedBox, PointCloud, RotXY
from .pose import PoseEstimate
from .segmentation import Segmentation
from .synthesis import MushroomGT, SceneAnnotation

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected layout."""


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_KNOWN = {"x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "r", "g", "b"}


def write_ply(path, cloud: PointCloud, colors=None, binary: bool = True) -> None:
    """Write x,y,z doubles, optional normals and optional uchar colors."""
    n = len(cloud)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(colors) != n:
            raise ValueError("colors and points differ in length")
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.zeros(n, dtype=np.dtype([(k, "<" + t) for k, t in fields]))
    for j, k in enumerate("xyz"):
        data[k] = cloud.points[:, j]
    if cloud.normals is not None:
        for j, k in enumerate(("nx", "ny", "nz")):
            data[k] = cloud.normals[:, j]
    if colors is not None:
        for j, k in enumerate(("red", "green", "blue")):
            data[k] = colors[:, j]
    names = {"f8": "double", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {names[t]} {k}" for k, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(repr(float(v)) if t == "f8" else str(int(v))
                                  for v, (_, t) in zip(row, fields)) + "\n").encode("ascii"))


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file: missing 'ply' magic or 'end_header' (byte offset 0)")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    fmt = None
    elements = []
    offset = 0
    for line in raw[:end].decode("ascii", errors="replace").split("\n"):
        tokens = line.strip().split()
        here = offset
        offset += len(line) + 1
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) != 3 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unsupported PLY format {line.strip()!r} (byte offset {here})")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise FormatError(f"malformed element line {line.strip()!r} (byte offset {here})")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise FormatError(f"property before any element (byte offset {here})")
            if len(tokens) == 5 and tokens[1] == "list":
                elements[-1][2].append((tokens[4], "list", tokens[2], tokens[3]))
            elif len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            else:
                raise FormatError(f"malformed property line {line.strip()!r} (byte offset {here})")
        else:
            raise FormatError(f"unexpected header line {line.strip()!r} (byte offset {here})")
    if fmt is None:
        raise FormatError("PLY header lacks a format line (byte offset 0)")
    return fmt, elements, body_start


def read_ply(path, with_colors: bool = False):
    """Read the vertex element of an ASCII or binary little-endian PLY.

    Returns a ``PointCloud`` (normals re-normalised), or ``(cloud, colors)``
    when ``with_colors`` is set. Unknown vertex properties are skipped with a
    warning.
    """
    raw = Path(path).read_bytes()
    fmt, elements, pos = _parse_header(raw)
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if fmt == "binary_little_endian" and any(p[1] == "list" for p in props):
            raise FormatError(f"cannot skip list element {name!r} preceding the vertices")
        if fmt == "ascii":
            for _ in range(count):
                nl = raw.find(b"\n", pos)
                pos = len(raw) if nl < 0 else nl + 1
        else:
            pos += count * np.dtype([(p[0], "<" + p[1]) for p in props]).itemsize
    if vertex is None:
        raise FormatError("PLY has no vertex element")
    count, props = vertex
    if any(p[1] == "list" for p in props):
        raise FormatError("list properties on vertices are not supported")
    names = [p[0] for p in props]
    for req in "xyz":
        if req not in names:
            raise FormatError(f"required vertex property {req!r} missing")
    unknown = [k for k in names if k not in _KNOWN]
    if unknown:
        warnings.warn(f"ignoring unknown PLY vertex properties {unknown}")
    dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
    if fmt == "binary_little_endian":
        need = count * dtype.itemsize
        if len(raw) - pos < need:
            raise FormatError(f"truncated PLY payload: expected {need} bytes from byte offset {pos}, "
                              f"found {len(raw) - pos}")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    else:
        data = np.zeros(count, dtype=dtype)
        lines = raw[pos:].split(b"\n")
        offset = pos
        for i in range(count):
            if i >= len(lines) or not lines[i].strip():
                raise FormatError(f"truncated PLY payload at vertex {i} (byte offset {offset})")
            vals = lines[i].split()
            if len(vals) < len(props):
                raise FormatError(f"vertex {i} has {len(vals)} values, expected {len(props)} "
                                  f"(byte offset {offset})")
            try:
                data[i] = tuple(float(v) if dtype[k].kind == "f" else int(v) for k, v in enumerate(vals[:len(props)]))
            except ValueError as exc:
                raise FormatError(f"bad number in vertex {i} (byte offset {offset}): {exc}") from exc
            offset += len(lines[i]) + 1
    points = np.stack([data[k].astype(float) for k in "xyz"], axis=1)
    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        normals = np.stack([data[k].astype(float) for k in ("nx", "ny", "nz")], axis=1)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.divide(normals, norm, out=np.tile([0.0, 0.0, 1.0], (len(normals), 1)), where=norm > 0)
    cloud = PointCloud(points, normals)
    if not with_colors:
        return cloud
    colors = None
    for keys in (("red", "green", "blue"), ("r", "g", "b")):
        if all(k in names for k in keys):
            colors = np.stack([data[k].astype(np.uint8) for k in keys], axis=1)
            break
    return cloud, colors


# ---------------------------------------------------------------------------
# JSON documents


def _reject_constant(name):
    raise FormatError(f"non-finite number {name} in JSON")


def dump_json(path, doc: dict, compact: bool = False) -> None:
    with open(path, "w") as f:
        if compact:
            json.dump(doc, f, allow_nan=False, separators=(",", ":"))
        else:
            json.dump(doc, f, allow_nan=False, indent=1)
        f.write("\n")


def load_json(path, kind: str) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if "schema_version" not in doc:
        raise FormatError(f"{path}: missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {doc['schema_version']}")
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def _check_len(doc, field, n, path):
    if n is not None and len(doc[field]) != n:
        raise FormatError(f"{path}: field {field!r} has length {len(doc[field])}, cloud has {n} points")


def _array(doc, field, path, shape_tail=()):
    try:
        arr = np.asarray(doc[field], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: field {field!r} missing or malformed") from exc
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        if not (arr.size == 0 and shape_tail):
            raise FormatError(f"{path}: field {field!r} has shape {arr.shape}")
        arr = arr.reshape((0, *shape_tail))
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: field {field!r} holds non-finite values")
    return arr


def _box_doc(b: OrientedBox) -> dict:
    return {"center": list(b.center), "theta_x": b.rot.theta_x, "theta_y": b.rot.theta_y,
            "theta_z": b.theta_z, "half_extents": list(b.half_extents)}


def _box_from(d) -> OrientedBox:
    return OrientedBox(d["center"], RotXY(d["theta_x"], d["theta_y"]), d["half_extents"], d["theta_z"])


def annotation_to_doc(ann: SceneAnnotation, info=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "annotation",
        "n_points": len(ann.point_label),
        "point_label": ann.point_label.tolist(),
        "seg_label": ann.seg_label.tolist(),
        "mushrooms": [
            {"id": m.id, "center": np.asarray(m.center).tolist(), "theta_x": m.rot.theta_x,
             "theta_y": m.rot.theta_y, "scale_s": m.scale_s, "scale_z": m.scale_z,
             "per_axis_scales": np.asarray(m.per_axis_scales).tolist(),
             "cap_point_indices": np.asarray(m.cap_point_indices).tolist(), "obb": _box_doc(m.obb),
             "spin": m.spin}
            for m in ann.mushrooms
        ],
        "scene": info or {},
    }


def annotation_from_doc(doc, path="annotation", n_points=None) -> SceneAnnotation:
    _check_len(doc, "point_label", n_points, path)
    _check_len(doc, "seg_label", len(doc["point_label"]), path)
    mushrooms = []
    for m in doc["mushrooms"]:
        idx = np.asarray(m["cap_point_indices"], dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(doc["point_label"])):
            raise FormatError(f"{path}: mushroom {m['id']} indexes outside the cloud")
        mushrooms.append(MushroomGT(
            id=int(m["id"]), center=np.asarray(m["center"], dtype=float),
            rot=RotXY(m["theta_x"], m["theta_y"]), scale_s=float(m["scale_s"]),
            scale_z=float(m["scale_z"]), per_axis_scales=np.asarray(m["per_axis_scales"], dtype=float),
            cap_point_indices=idx, obb=_box_from(m["obb"]), spin=float(m.get("spin", 0.0))))
    return SceneAnnotation(mushrooms, np.asarray(doc["point_label"], dtype=np.int64),
                           np.asarray(doc["seg_label"], dtype=np.int64))


def encoding_to_doc(enc: ImplicitEncoding, kind: str = "encoding") -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "n_points": len(enc),
            "existence": enc.existence.tolist(), "residual": enc.residual.tolist(),
            "orientation": enc.orientation.tolist()}


def encoding_from_doc(doc, path="encoding", n_points=None) -> ImplicitEncoding:
    for field in ("existence", "residual", "orientation"):
        if field not in doc:
            raise FormatError(f"{path}: missing field {field!r}")
        _check_len(doc, field, n_points, path)
    n = len(doc["existence"])
    for field in ("residual", "orientation"):
        _check_len(doc, field, n, path)
    return ImplicitEncoding(_array(doc, "existence", path), _array(doc, "residual", path, (3,)),
                            _array(doc, "orientation", path))


def segmentation_to_doc(seg: Segmentation) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "segmentation", "n_points": len(seg.instance_id),
            "n_instances": seg.n_instances, "instance_id": seg.instance_id.tolist()}


def segmentation_from_doc(doc, path="segmentation", n_points=None) -> Segmentation:
    _check_len(doc, "instance_id", n_points, path)
    ids = np.asarray(doc["instance_id"], dtype=np.int64)
    n = int(doc["n_instances"])
    if len(ids) and (ids.max() >= n or ids.min() < -1):
        raise FormatError(f"{path}: instance ids outside [-1, {n - 1}]")
    return Segmentation(ids, n)


def _num(v):
    return float(v) if math.isfinite(v) else None


def poses_to_doc(poses) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "poses",
        "poses": [
            {"instance": k, "center": np.asarray(p.center).tolist(), "theta_x": p.rot.theta_x,
             "theta_y": p.rot.theta_y, "scale_s": _num(p.scale_s), "scale_z": _num(p.scale_z),
             "lambda": [_num(v) for v in p.lam], "confidence": p.confidence, "n_points": p.n_points,
             "flags": list(p.flags), "diagnostics": p.diagnostics}
            for k, p in enumerate(poses)
        ],
    }


def poses_from_doc(doc, path="poses") -> list:
    out = []
    for d in doc["poses"]:
        flags = tuple(d.get("flags", ()))
        scale = d["scale_s"]
        if scale is None and "degenerate" not in flags:
            raise FormatError(f"{path}: pose {d.get('instance')} lacks a scale but is not flagged degenerate")
        nan = float("nan")
        out.append(PoseEstimate(
            center=np.asarray(d["center"], dtype=float), rot=RotXY(d["theta_x"], d["theta_y"]),
            scale_s=nan if scale is None else float(scale),
            scale_z=nan if d["scale_z"] is None else float(d["scale_z"]),
            lam=np.array([nan if v is None else v for v in d["lambda"]], dtype=float),
            confidence=float(d["confidence"]), n_points=int(d["n_points"]), flags=flags,
            diagnostics=dict(d.get("diagnostics", {}))))
    return out


def report_to_doc(report: EvalReport) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "report", **report.to_dict()}


def report_from_doc(doc) -> EvalReport:
    return EvalReport(
        map_per_threshold={float(k): v for k, v in doc["map_per_threshold"].items()},
        mean_scale_rel_err=doc["mean_scale_rel_err"], mean_cosine_sim=doc["mean_cosine_sim"],
        mean_theta_err_deg=doc["mean_theta_err_deg"], n_gt=doc["n_gt"], n_pred=doc["n_pred"],
        n_matched=doc["n_matched"], error_threshold=doc["error_threshold"], table=doc["table"])
