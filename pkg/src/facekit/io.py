"""Readers and writers for meshes, float maps, model containers and manifests.

Every reader takes ``bytes`` and every writer returns ``bytes``; the ``load_*``
and ``save_*`` helpers wrap them for paths. Parsers never return partial
data: truncated or malformed input raises :class:`~facekit.errors.ParseError`.

File layouts
------------
``.fmap`` float map::

    FMAP\\n
    <width> <height> <channels>\\n
    -1.0\\n                       (negative scale: little-endian payload)
    width*height*channels float32, row-major, row 0 first

``.fsbm`` bilinear model (all integers little-endian uint32, floats float32)::

    b"FSBM" version n_vertices n_expressions n_identities exp_rank id_rank
    n_faces has_uv n_canonical
    core (3V*exp_rank*id_rank) exp_basis (E*exp_rank) id_basis (I*id_rank)
    canonical (n_canonical*exp_rank) faces (int32, n_faces*3) [uv (V*2)]
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import CameraParams
from .errors import ParseError, ValidationError
from .mesh import Mesh, RasterMap

# ---------------------------------------------------------------------------
# meshes


def parse_mesh(data: bytes, format: str) -> Mesh:
    fmt = format.lower().lstrip(".")
    if fmt == "obj":
        return _parse_obj(data)
    if fmt == "ply":
        return _parse_ply(data)
    raise ValidationError(f"unsupported mesh format {format!r}")


def write_mesh(mesh: Mesh, format: str, binary: bool = True, comments=()) -> bytes:
    """Serialise a mesh. ``binary`` only applies to PLY (OBJ is always ASCII).

    ``comments`` are single-line strings stored as PLY ``comment`` / OBJ ``#`` lines.
    """
    fmt = format.lower().lstrip(".")
    comments = [str(c).replace("\n", " ").replace("\r", " ") for c in comments]
    if fmt == "obj":
        head = "".join(f"# {c}\n" for c in comments).encode("utf-8")
        return head + _write_obj(mesh)
    if fmt == "ply":
        return _write_ply(mesh, binary, comments)
    raise ValidationError(f"unsupported mesh format {format!r}")


def _parse_obj(data: bytes) -> Mesh:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("OBJ must be ASCII", exc.start) from None
    verts, tex, corners = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError
                tex.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) != 4:
                    raise ParseError(f"only triangles are supported, got {len(parts) - 1}-gon",
                                     lineno)
                face = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else None
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    if ti is not None:
                        ti = ti - 1 if ti > 0 else len(tex) + ti
                    face.append((vi, ti))
                corners.append(face)
        except ParseError:
            raise
        except ValueError:
            raise ParseError(f"malformed {tag!r} record", lineno) from None
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array([[c[0] for c in f] for f in corners], dtype=np.int64).reshape(-1, 3)
    uv = None
    has_tex = [c[1] is not None for f in corners for c in f]
    if tex and corners and all(has_tex):
        tex = np.array(tex, dtype=np.float64)
        t_idx = np.array([[c[1] for c in f] for f in corners], dtype=np.int64)
        if t_idx.min() < 0 or t_idx.max() >= len(tex):
            raise ValidationError("texture coordinate index out of range")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise ValidationError("face references a vertex that does not exist")
        uv = np.full((len(vertices), 2), np.nan)
        # vertices carrying more than one UV (seams) are split
        extra_v, extra_uv = [], []
        seen = {}
        for fi in range(len(faces)):
            for k in range(3):
                v, t = faces[fi, k], t_idx[fi, k]
                if np.isnan(uv[v, 0]):
                    uv[v] = tex[t]
                    seen[(v, t)] = v
                elif (v, t) in seen:
                    faces[fi, k] = seen[(v, t)]
                elif np.array_equal(uv[v], tex[t]):
                    seen[(v, t)] = v
                else:
                    new = len(vertices) + len(extra_v)
                    extra_v.append(vertices[v])
                    extra_uv.append(tex[t])
                    seen[(v, t)] = new
                    faces[fi, k] = new
        if extra_v:
            vertices = np.concatenate([vertices, np.array(extra_v)])
            uv = np.concatenate([uv, np.array(extra_uv)])
        uv[np.isnan(uv[:, 0])] = 0.0
    elif tex and not corners:
        if len(tex) == len(vertices):
            uv = np.array(tex, dtype=np.float64)
    return Mesh(vertices, faces, uv)


def _fmt(x):
    return "%.9g" % x


def _write_obj(mesh: Mesh) -> bytes:
    lines = ["# facekit mesh"]
    lines += ["v %s %s %s" % tuple(_fmt(c) for c in p) for p in mesh.vertices]
    if mesh.uv is not None:
        lines += ["vt %s %s" % tuple(_fmt(c) for c in t) for t in mesh.uv]
        lines += ["f %d/%d %d/%d %d/%d" % (a + 1, a + 1, b + 1, b + 1, c + 1, c + 1)
                  for a, b, c in mesh.faces]
    else:
        lines += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.faces]
    return ("\n".join(lines) + "\n").encode("ascii")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_UV_NAMES = (("u", "v"), ("s", "t"), ("texture_u", "texture_v"), ("texture_s", "texture_t"))


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, count_dtype, item_dtype)


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("missing PLY header", 0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("truncated PLY header", end)
    header = data[:end].decode("ascii", "replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append(_PlyElement(parts[1], int(parts[2])))
            except (IndexError, ValueError):
                raise ParseError("malformed element line", lineno) from None
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno)
            try:
                if parts[1] == "list":
                    elements[-1].props.append(
                        (parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (IndexError, KeyError):
                raise ParseError("unsupported property declaration", lineno) from None
        else:
            raise ParseError(f"unknown header keyword {parts[0]!r}", lineno)
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}", 1)
    return fmt, elements, nl + 1


def _parse_ply(data: bytes) -> Mesh:
    fmt, elements, offset = _parse_ply_header(data)
    values = {}
    if fmt == "ascii":
        tokens = data[offset:].split()
        pos = 0
        for el in elements:
            rows = []
            for r in range(el.count):
                row = []
                for prop in el.props:
                    if pos >= len(tokens):
                        raise ParseError(f"truncated {el.name} data", f"element {el.name}[{r}]")
                    try:
                        if len(prop) == 3:
                            n = int(tokens[pos])
                            item = [float(t) for t in tokens[pos + 1:pos + 1 + n]]
                            if len(item) != n:
                                raise ParseError(f"truncated {el.name} list",
                                                 f"element {el.name}[{r}]")
                            row.append(item)
                            pos += 1 + n
                        else:
                            row.append(float(tokens[pos]))
                            pos += 1
                    except ValueError:
                        raise ParseError(f"bad number {tokens[pos]!r}",
                                         f"element {el.name}[{r}]") from None
                rows.append(row)
            values[el.name] = (el, rows)
    else:
        for el in elements:
            if all(len(p) == 2 for p in el.props):
                dtype = np.dtype([(p[0], "<" + p[1]) for p in el.props])
                size = dtype.itemsize * el.count
                if offset + size > len(data):
                    raise ParseError(f"truncated {el.name} data", offset)
                arr = np.frombuffer(data, dtype, el.count, offset)
                offset += size
                values[el.name] = (el, arr)
            else:
                arr, offset = _read_binary_lists(data, el, offset)
                values[el.name] = (el, arr)
    if "vertex" not in values:
        raise ParseError("PLY has no vertex element", 0)
    el, raw = values["vertex"]
    names = [p[0] for p in el.props]

    def column(name):
        if isinstance(raw, np.ndarray):
            return raw[name].astype(np.float64)
        i = names.index(name)
        return np.array([r[i] for r in raw], dtype=np.float64)

    if not {"x", "y", "z"} <= set(names):
        raise ParseError("vertex element lacks x/y/z", 0)
    vertices = np.stack([column("x"), column("y"), column("z")], 1) if el.count else \
        np.zeros((0, 3))
    uv = None
    for a, b in _UV_NAMES:
        if a in names and b in names:
            uv = np.stack([column(a), column(b)], 1) if el.count else np.zeros((0, 2))
            break
    faces = np.zeros((0, 3), np.int64)
    if "face" in values:
        fel, fraw = values["face"]
        lists = [i for i, p in enumerate(fel.props) if len(p) == 3]
        if not lists:
            raise ParseError("face element has no index list", 0)
        li = lists[0]
        if isinstance(fraw, np.ndarray):
            faces = fraw
        else:
            polys = [r[li] for r in fraw]
            if any(len(p) != 3 for p in polys):
                raise ParseError("only triangles are supported", "face element")
            faces = np.array(polys, dtype=np.int64).reshape(-1, 3)
    return Mesh(vertices, faces, uv)


def _read_binary_lists(data, el, offset):
    # fast path: a face element holding exactly one list, all triangles
    if el.name == "face" and len(el.props) == 1:
        _, cdt, idt = el.props[0]
        dtype = np.dtype([("n", "<" + cdt), ("idx", "<" + idt, (3,))])
        size = dtype.itemsize * el.count
        if offset + size <= len(data):
            arr = np.frombuffer(data, dtype, el.count, offset)
            if (arr["n"] == 3).all():
                return arr["idx"].astype(np.int64), offset + size
    rows = []
    for r in range(el.count):
        row = []
        for prop in el.props:
            if len(prop) == 3:
                cdt, idt = np.dtype("<" + prop[1]), np.dtype("<" + prop[2])
                if offset + cdt.itemsize > len(data):
                    raise ParseError(f"truncated {el.name} data", offset)
                n = int(np.frombuffer(data, cdt, 1, offset)[0])
                offset += cdt.itemsize
                if offset + n * idt.itemsize > len(data):
                    raise ParseError(f"truncated {el.name} data", offset)
                row.append(np.frombuffer(data, idt, n, offset).tolist())
                offset += n * idt.itemsize
            else:
                dt = np.dtype("<" + prop[1])
                if offset + dt.itemsize > len(data):
                    raise ParseError(f"truncated {el.name} data", offset)
                row.append(float(np.frombuffer(data, dt, 1, offset)[0]))
                offset += dt.itemsize
        rows.append(row)
    if el.name == "face":
        li = [i for i, p in enumerate(el.props) if len(p) == 3][0]
        if any(len(r[li]) != 3 for r in rows):
            raise ParseError("only triangles are supported", "face element")
        return np.array([r[li] for r in rows], dtype=np.int64).reshape(-1, 3), offset
    return rows, offset


def _write_ply(mesh: Mesh, binary: bool, comments=()) -> bytes:
    has_uv = mesh.uv is not None
    vtype = "double"
    header = ["ply", "format %s 1.0" % ("binary_little_endian" if binary else "ascii")]
    header += [f"comment {c}" for c in comments]
    header += ["element vertex %d" % mesh.n_vertices,
              f"property {vtype} x", f"property {vtype} y", f"property {vtype} z"]
    if has_uv:
        header += [f"property {vtype} u", f"property {vtype} v"]
    header += ["element face %d" % mesh.n_faces, "property list uchar int vertex_indices",
               "end_header"]
    head = ("\n".join(header) + "\n").encode("utf-8")
    cols = [mesh.vertices] + ([mesh.uv] if has_uv else [])
    vdata = np.concatenate(cols, axis=1) if mesh.n_vertices else np.zeros((0, 5 if has_uv else 3))
    if binary:
        vbytes = np.ascontiguousarray(vdata, dtype="<f8").tobytes()
        fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        farr = np.empty(mesh.n_faces, fdt)
        farr["n"] = 3
        farr["idx"] = mesh.faces
        return head + vbytes + farr.tobytes()
    lines = [" ".join(_fmt(c) for c in row) for row in vdata]
    lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    return head + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


def load_mesh(path) -> Mesh:
    path = Path(path)
    mesh = parse_mesh(path.read_bytes(), path.suffix)
    side = landmark_sidecar_path(path)
    if side.exists():
        mesh = mesh.replace(landmark_indices=load_landmark_indices(side))
    return mesh


def save_mesh(mesh: Mesh, path, binary=True, comments=()):
    path = Path(path)
    path.write_bytes(write_mesh(mesh, path.suffix, binary=binary, comments=comments))
    if mesh.landmark_indices is not None:
        save_landmark_indices(mesh.landmark_indices, landmark_sidecar_path(path))


def landmark_sidecar_path(mesh_path):
    mesh_path = Path(mesh_path)
    return mesh_path.with_name(mesh_path.stem + ".landmarks.json")


def load_landmark_indices(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad landmark JSON: {exc.msg}", exc.lineno) from None
    if isinstance(data, dict):
        data = data.get("landmark_indices")
    if not isinstance(data, list) or not all(isinstance(i, int) for i in data):
        raise ValidationError("landmark side-car must be a JSON list of vertex indices")
    return np.array(data, dtype=np.int64)


def save_landmark_indices(indices, path):
    Path(path).write_text(json.dumps([int(i) for i in indices]))


# ---------------------------------------------------------------------------
# float maps

_FMAP_MAGIC = b"FMAP"


def write_float_map(m: RasterMap) -> bytes:
    header = b"%s\n%d %d %d\n-1.0\n" % (_FMAP_MAGIC, m.width, m.height, m.channels)
    return header + np.ascontiguousarray(m.data, dtype="<f4").tobytes()


def read_float_map(data: bytes) -> RasterMap:
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0] != _FMAP_MAGIC:
        raise ParseError("not an FMAP file", 0)
    try:
        w, h, c = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise ParseError("malformed FMAP header", 2) from None
    if w <= 0 or h <= 0 or c <= 0:
        raise ParseError("FMAP dimensions must be positive", 2)
    offset = len(data) - len(lines[3])
    n = w * h * c
    if len(lines[3]) != 4 * n:
        raise ParseError(f"FMAP payload holds {len(lines[3])} bytes, expected {4 * n}", offset)
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(lines[3], dt, n).reshape(h, w, c).astype(np.float32)
    return RasterMap(arr)


def load_float_map(path) -> RasterMap:
    return read_float_map(Path(path).read_bytes())


def save_float_map(m: RasterMap, path):
    Path(path).write_bytes(write_float_map(m))


# ---------------------------------------------------------------------------
# bilinear model container

_FSBM_MAGIC = b"FSBM"
_FSBM_VERSION = 1
_FSBM_HEADER = struct.Struct("<4s10I")


def write_model(model) -> bytes:
    has_uv = model.uv is not None
    head = _FSBM_HEADER.pack(_FSBM_MAGIC, _FSBM_VERSION, model.vertex_count,
                             model.expression_count, model.identity_count, model.exp_rank,
                             model.id_rank, len(model.faces), int(has_uv),
                             len(model.canonical_exp_params), 0)
    parts = [head]
    for arr in (model.core, model.exp_basis, model.id_basis, model.canonical_exp_params):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.faces, dtype="<i4").tobytes())
    if has_uv:
        parts.append(np.ascontiguousarray(model.uv, dtype="<f4").tobytes())
    return b"".join(parts)


def read_model_header(data: bytes) -> dict:
    if len(data) < _FSBM_HEADER.size:
        raise ParseError("truncated FSBM header", len(data))
    magic, version, nv, ne, ni, re_, ri, nf, has_uv, ncan, _ = _FSBM_HEADER.unpack_from(data)
    if magic != _FSBM_MAGIC:
        raise ParseError("not an FSBM model container", 0)
    if version != _FSBM_VERSION:
        raise ParseError(f"unsupported FSBM version {version}", 4)
    return dict(vertex_count=nv, coordinate_count=3 * nv, expression_count=ne,
                identity_count=ni, exp_rank=re_, id_rank=ri, face_count=nf,
                has_uv=bool(has_uv), canonical_count=ncan)


def read_model(data: bytes):
    from .morphable import BilinearModel

    h = read_model_header(data)
    nv, ne, ni = h["vertex_count"], h["expression_count"], h["identity_count"]
    re_, ri, nf, ncan = h["exp_rank"], h["id_rank"], h["face_count"], h["canonical_count"]
    if min(nv, re_, ri) == 0:
        raise ValidationError("model dimensions must be non-zero")
    if re_ > ne or ri > ni:
        raise ValidationError("model ranks exceed training dimensions")
    sizes = [3 * nv * re_ * ri, ne * re_, ni * ri, ncan * re_]
    expected = _FSBM_HEADER.size + 4 * (sum(sizes) + 3 * nf + (2 * nv if h["has_uv"] else 0))
    if len(data) != expected:
        raise ParseError(f"FSBM payload is {len(data)} bytes, dimensions imply {expected}",
                         _FSBM_HEADER.size)
    offset = _FSBM_HEADER.size
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, "<f4", n, offset).astype(np.float64))
        offset += 4 * n
    faces = np.frombuffer(data, "<i4", 3 * nf, offset).astype(np.int64).reshape(-1, 3)
    offset += 12 * nf
    uv = None
    if h["has_uv"]:
        uv = np.frombuffer(data, "<f4", 2 * nv, offset).astype(np.float64).reshape(-1, 2)
    core, exp_b, id_b, can = arrays
    return BilinearModel(core.reshape(3 * nv, re_, ri), exp_b.reshape(ne, re_),
                         id_b.reshape(ni, ri), faces, uv,
                         can.reshape(ncan, re_) if ncan else None)


def load_model(path):
    return read_model(Path(path).read_bytes())


def save_model(model, path):
    Path(path).write_bytes(write_model(model))


# ---------------------------------------------------------------------------
# albedo basis (same container style, different tag)

_ALB_MAGIC = b"FSAL"


def write_albedo(albedo) -> bytes:
    n, k = albedo.basis.shape[0] // 3, albedo.basis.shape[1]
    head = struct.pack("<4s3I", _ALB_MAGIC, 1, n, k)
    return (head + np.ascontiguousarray(albedo.mean, "<f4").tobytes()
            + np.ascontiguousarray(albedo.basis, "<f4").tobytes())


def read_albedo(data: bytes):
    from .shading import AlbedoBasis

    if len(data) < 16:
        raise ParseError("truncated albedo header", len(data))
    magic, version, n, k = struct.unpack_from("<4s3I", data)
    if magic != _ALB_MAGIC or version != 1:
        raise ParseError("not an albedo container", 0)
    if len(data) != 16 + 4 * (3 * n + 3 * n * k):
        raise ParseError("albedo payload size mismatch", 16)
    mean = np.frombuffer(data, "<f4", 3 * n, 16).astype(np.float64).reshape(n, 3)
    basis = np.frombuffer(data, "<f4", 3 * n * k, 16 + 12 * n).astype(np.float64)
    return AlbedoBasis(mean, basis.reshape(3 * n, k))


# ---------------------------------------------------------------------------
# images (binary PPM/PGM only; decoding compressed formats is out of scope)


def read_ppm(data: bytes) -> np.ndarray:
    """Decode P5/P6 into float ``(H, W, 3)`` in [0, 1]."""
    m = re.match(rb"(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s", data)
    if not m:
        raise ParseError("not a binary PPM/PGM image", 0)
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    ch = 3 if kind == b"P6" else 1
    dt = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    payload = data[m.end():]
    if len(payload) < n * np.dtype(dt).itemsize:
        raise ParseError("truncated image payload", m.end())
    img = np.frombuffer(payload, dt, n).reshape(h, w, ch).astype(np.float64) / maxval
    return np.repeat(img, 3, axis=2) if ch == 1 else img


def write_ppm(image) -> bytes:
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.round(img * 255).astype("u1").tobytes()


# ---------------------------------------------------------------------------
# benchmark manifest

POSE_BUCKETS = ("0-5", "5-30", "30-60", "60-90", "0", "30", "60")
FOCAL_BUCKETS = {"long": 1200.0, "mid": 600.0, "short": 300.0}


@dataclass
class ManifestEntry:
    sample_id: str
    gt_mesh_path: Path
    prediction_path: Path
    pose_bucket: str
    camera: CameraParams
    focal_bucket: Optional[str] = None
    up: Optional[np.ndarray] = None


@dataclass
class BenchmarkManifest:
    entries: list
    root: Path = Path(".")

    def to_dict(self, root=None):
        """JSON document with paths relative to ``root`` (default: the manifest root)."""
        root = Path(self.root if root is None else root).resolve()
        out = []
        for e in self.entries:
            d = {"sample_id": e.sample_id,
                 "gt_mesh": os.path.relpath(Path(e.gt_mesh_path).resolve(), root),
                 "prediction": os.path.relpath(Path(e.prediction_path).resolve(), root),
                 "pose_bucket": e.pose_bucket, "camera": e.camera.to_dict()}
            if e.focal_bucket is not None:
                d["focal_bucket"] = e.focal_bucket
            if e.up is not None:
                d["up"] = [float(x) for x in e.up]
            out.append(d)
        return {"version": 1, "entries": out}


_ENTRY_KEYS = {"sample_id", "gt_mesh", "prediction", "pose_bucket", "focal_bucket", "camera", "up"}


def parse_manifest(data: bytes, root=".", check_files=True) -> BenchmarkManifest:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad manifest JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ValidationError("manifest must be an object with an 'entries' list")
    root = Path(root)
    entries, seen = [], set()
    for i, raw in enumerate(doc["entries"]):
        unknown = set(raw) - _ENTRY_KEYS
        if unknown:
            raise ValidationError(f"entry {i}: unknown keys {sorted(unknown)}")
        try:
            sid = str(raw["sample_id"])
            gt = root / raw["gt_mesh"]
            pred = root / raw["prediction"]
            pose = str(raw["pose_bucket"])
            cam = CameraParams.from_dict(raw["camera"])
        except KeyError as exc:
            raise ValidationError(f"entry {i}: missing key {exc.args[0]!r}") from None
        if sid in seen:
            raise ValidationError(f"duplicate sample_id {sid!r}")
        seen.add(sid)
        if pose not in POSE_BUCKETS:
            raise ValidationError(f"entry {sid}: pose bucket {pose!r} not in {POSE_BUCKETS}")
        focal = raw.get("focal_bucket")
        if focal is not None and focal not in FOCAL_BUCKETS:
            raise ValidationError(f"entry {sid}: focal bucket {focal!r} not in "
                                  f"{tuple(FOCAL_BUCKETS)}")
        if check_files and not gt.exists():
            raise ValidationError(f"entry {sid}: ground-truth mesh {gt} does not exist")
        up = raw.get("up")
        entries.append(ManifestEntry(sid, gt, pred, pose, cam, focal,
                                     None if up is None else np.asarray(up, float)))
    return BenchmarkManifest(entries, root)


def load_manifest(path, check_files=True) -> BenchmarkManifest:
    path = Path(path)
    return parse_manifest(path.read_bytes(), path.parent, check_files)


def save_manifest(manifest: BenchmarkManifest, path):
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(root=path.parent), indent=2))
