"""PLY / OBJ / XYZ readers and writers.

PLY: ascii and binary_little_endian, vertex x/y/z plus optional face lists
(polygons fan-triangulated). OBJ: ``v`` and ``f`` records, 1-based or negative
indices, ``v/vt/vn`` tokens accepted.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import TriMesh, as_points

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _fan(poly) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_ply_header(f):
    if f.readline().strip() != b"ply":
        raise InputError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop, dtype | ('list', count_t, item_t))])
    while True:
        line = f.readline()
        if not line:
            raise InputError("truncated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise InputError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(vertices, triangles)``; triangles is ``(0, 3)`` for point clouds."""
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        body = f.read()
    verts = None
    tris: list[tuple[int, int, int]] = []
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        k = int(tokens[pos]); pos += 1
                        row[pname] = [int(x) for x in tokens[pos:pos + k]]; pos += k
                    else:
                        row[pname] = float(tokens[pos]); pos += 1
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64).reshape(-1, 3)
            elif name == "face":
                key = props[0][0] if props else None
                for r in rows:
                    tris += _fan(r[key])
    else:
        pos = 0
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, "<" + t) for p, t in props])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            # list-bearing element: walk records
            for _ in range(count):
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        _, ct, it = ptype
                        k = int(np.frombuffer(body, dtype="<" + ct, count=1, offset=pos)[0])
                        pos += np.dtype(ct).itemsize
                        items = np.frombuffer(body, dtype="<" + it, count=k, offset=pos)
                        pos += np.dtype(it).itemsize * k
                        if name == "face":
                            tris += _fan([int(x) for x in items])
                    else:
                        pos += np.dtype(ptype).itemsize
    if verts is None:
        raise InputError(f"{path}: PLY file has no vertex element")
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_ply(path, vertices, triangles=None, binary: bool = True) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    t = None if triangles is None else np.asarray(triangles, dtype=np.int32).reshape(-1, 3)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(v)}", "property double x", "property double y", "property double z"]
    if t is not None and len(t):
        head += [f"element face {len(t)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            f.write(v.astype("<f8").tobytes())
            if t is not None and len(t):
                rec = np.zeros(len(t), dtype=[("n", "u1"), ("i", "<i4", 3)])
                rec["n"] = 3
                rec["i"] = t
                f.write(rec.tobytes())
        else:
            for p in v:
                f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n".encode())
            if t is not None:
                for a, b, c in t:
                    f.write(f"3 {a} {b} {c}\n".encode())


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts = []
    tris: list[tuple[int, int, int]] = []
    with open(path, "r") as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                poly = []
                for item in tok[1:]:
                    i = int(item.split("/")[0])
                    poly.append(i - 1 if i > 0 else len(verts) + i)
                tris += _fan(poly)
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def format_obj(vertices, triangles) -> str:
    lines = [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles)]
    return "\n".join(lines) + "\n"


def write_obj(path, vertices, triangles) -> None:
    Path(path).write_text(format_obj(vertices, triangles))


def read_xyz(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)[:, :3]


def write_xyz(path, points) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g")


def load_mesh(path) -> TriMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if not os.path.exists(path):
        raise InputError(f"mesh file not found: {path}")
    if ext == ".obj":
        v, t = read_obj(path)
    elif ext == ".ply":
        v, t = read_ply(path)
    else:
        raise InputError(f"unsupported mesh format: {path}")
    if len(t) == 0:
        raise InputError(f"{path} contains no faces")
    return TriMesh(v, t)


def load_points(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if not os.path.exists(path):
        raise InputError(f"point file not found: {path}")
    if ext == ".ply":
        pts, _ = read_ply(path)
    elif ext in (".xyz", ".txt", ".pts"):
        pts = read_xyz(path)
    else:
        raise InputError(f"unsupported point cloud format: {path}")
    return as_points(pts, str(path))


def save_mesh(path, mesh: TriMesh) -> None:
    if str(path).lower().endswith(".ply"):
        write_ply(path, mesh.vertices, mesh.triangles)
    else:
        write_obj(path, mesh.vertices, mesh.triangles)
