"""Indexed triangle meshes: storage, OBJ/PLY I/O, normalization, diagnostics."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

# 1 model unit = 100 cm once a shape is normalized to the unit box.
DEFAULT_UNITS_PER_CM = 0.01


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    units_per_cm: float = DEFAULT_UNITS_PER_CM
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = _frozen(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3), np.float64)
        f = _frozen(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3), np.int64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if not np.all(np.isfinite(v)):
            raise ValidationError("mesh has non-finite vertex coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError(
                f"face index out of range (max {int(f.max())}, {len(v)} vertices)")
        if not (self.units_per_cm > 0 and np.isfinite(self.units_per_cm)):
            raise ValidationError("units_per_cm must be a positive finite scalar")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        if "tri" not in self._cache:
            t = self.vertices[self.faces]
            t.setflags(write=False)
            self._cache["tri"] = t
        return self._cache["tri"]

    def _cross(self):
        if "cross" not in self._cache:
            t = self.triangles()
            c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
            c.setflags(write=False)
            self._cache["cross"] = c
        return self._cache["cross"]

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals; zero for faces with area <= 1e-12."""
        if "normals" not in self._cache:
            c = self._cross()
            n2 = np.linalg.norm(c, axis=1)
            out = np.zeros_like(c)
            ok = 0.5 * n2 > 1e-12
            out[ok] = c[ok] / n2[ok, None]
            out.setflags(write=False)
            self._cache["normals"] = out
        return self._cache["normals"]

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def with_vertices(self, vertices, units_per_cm=None) -> "TriMesh":
        return TriMesh(vertices, self.faces,
                       self.units_per_cm if units_per_cm is None else units_per_cm)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Area-weighted uniform surface samples; returns (points, face ids)."""
        if self.is_empty():
            raise ValidationError("cannot sample an empty mesh")
        areas = self.face_areas()
        cdf = np.cumsum(areas)
        cdf /= cdf[-1]
        fid = np.searchsorted(cdf, rng.random(n), side="right")
        fid = np.minimum(fid, self.n_faces - 1)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = self.triangles()[fid]
        pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
               + (r1 * r2)[:, None] * t[:, 2])
        return pts, fid


@dataclass(frozen=True)
class Transform:
    """x_normalized = scale * x + offset."""

    scale: float
    offset: np.ndarray

    def apply(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + self.offset

    def inverse(self, y):
        return (np.asarray(y, dtype=np.float64) - self.offset) / self.scale

    def is_identity(self, tol=1e-12) -> bool:
        return abs(self.scale - 1.0) <= tol and bool(np.all(np.abs(self.offset) <= tol))


def normalize_to_unit(mesh: TriMesh):
    """Center the bounding box at the origin and scale its longest side to 1."""
    if mesh.n_vertices == 0:
        raise ValidationError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise ValidationError("degenerate mesh: zero extent")
    scale = 1.0 / extent
    center = 0.5 * (lo + hi)
    if abs(scale - 1.0) < 1e-12 and np.all(np.abs(center) < 1e-12):
        return mesh, Transform(1.0, np.zeros(3))
    xf = Transform(scale, -scale * center)
    return mesh.with_vertices(xf.apply(mesh.vertices), mesh.units_per_cm * scale), xf


# ---------------------------------------------------------------------------
# topology diagnostics


@dataclass
class WatertightReport:
    closed: bool
    oriented: bool
    edge_manifold: bool
    n_boundary_edges: int
    n_nonmanifold_edges: int

    @property
    def ok(self) -> bool:
        return self.closed and self.oriented and self.edge_manifold


def edge_face_counts(faces):
    """Unique undirected edges (sorted pairs) and how many faces use each."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def check_watertight(mesh: TriMesh) -> WatertightReport:
    f = mesh.faces
    if len(f) == 0:
        return WatertightReport(False, False, False, 0, 0)
    _, counts = edge_face_counts(f)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    n_boundary = int(np.sum(counts == 1))
    n_nonmanifold = int(np.sum(counts > 2))
    return WatertightReport(
        closed=n_boundary == 0 and n_nonmanifold == 0,
        oriented=bool(np.all(dcounts == 1)),
        edge_manifold=n_nonmanifold == 0,
        n_boundary_edges=n_boundary,
        n_nonmanifold_edges=n_nonmanifold,
    )


def compact(vertices, faces, units_per_cm=DEFAULT_UNITS_PER_CM) -> TriMesh:
    """Drop unreferenced vertices and renumber."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(np.asarray(vertices)[used], remap[faces], units_per_cm)


# ---------------------------------------------------------------------------
# primitives


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron; 20 * 4**s faces, 10 * 4**s + 2 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        midpoint = {}
        nf = []

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                midpoint[key] = len(v) - 1
            return midpoint[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius, np.array(f), units_per_cm=1.0)


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[lo[0] if i & 1 == 0 else hi[0],
                   lo[1] if i & 2 == 0 else hi[1],
                   lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
    f = np.array([[0, 2, 1], [1, 2, 3],   # z-
                  [4, 5, 6], [5, 7, 6],   # z+
                  [0, 1, 4], [1, 5, 4],   # y-
                  [2, 6, 3], [3, 6, 7],   # y+
                  [0, 4, 2], [2, 4, 6],   # x-
                  [1, 3, 5], [3, 7, 5]])  # x+
    return TriMesh(v, f, units_per_cm=1.0)


# ---------------------------------------------------------------------------
# file I/O


def load_mesh(path, units_per_cm: float = DEFAULT_UNITS_PER_CM) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = _read_obj(path)
    elif suffix == ".ply":
        v, f = _read_ply(path)
    else:
        raise FormatError(f"unsupported mesh format {suffix!r}", path=path)
    return TriMesh(v, f, units_per_cm)


def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() != ".obj":
        raise FormatError("only OBJ output is supported", path=path)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n")


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(path):
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    faces.extend(_fan(idx))
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno, path=path) from None
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{path}: non-finite vertex coordinate")
    return v, np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply(path):
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("missing PLY header", line=1, path=path)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body_start = data.index(b"\n", end) + 1
    fmt = None
    elements = []  # (name, count, [(prop name, type, list count type)])
    for lineno, line in enumerate(header_lines, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property before element", line=lineno, path=path)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}", line=2, path=path)

    verts, faces = None, []
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").splitlines()
        lineno = len(header_lines) + 1
        pos = 0
        for name, count, props in elements:
            vals = []
            for _ in range(count):
                while pos < len(rows) and not rows[pos].strip():
                    pos += 1
                if pos >= len(rows):
                    raise FormatError("unexpected end of file", line=lineno + pos, path=path)
                toks = rows[pos].split()
                try:
                    rec, k = {}, 0
                    for pname, ptype, ltype in props:
                        if ltype is not None:
                            n = int(toks[k])
                            rec[pname] = [int(t) for t in toks[k + 1:k + 1 + n]]
                            k += 1 + n
                        else:
                            rec[pname] = float(toks[k])
                            k += 1
                except (ValueError, IndexError):
                    raise FormatError("malformed element row", line=lineno + pos,
                                      path=path) from None
                vals.append(rec)
                pos += 1
            if name == "vertex":
                verts = [[r["x"], r["y"], r["z"]] for r in vals]
            elif name == "face":
                key = props[0][0]
                for r in vals:
                    faces.extend(_fan(r[key]))
    else:
        off = body_start
        for name, count, props in elements:
            if all(lt is None for _, _, lt in props):
                dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t, _ in props])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
                off += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            for _ in range(count):
                rec = {}
                for pname, ptype, ltype in props:
                    if ltype is not None:
                        lfmt, ifmt = _PLY_TYPES[ltype], _PLY_TYPES[ptype]
                        (n,) = struct.unpack_from("<" + lfmt, data, off)
                        off += struct.calcsize(lfmt)
                        rec[pname] = list(struct.unpack_from(f"<{n}{ifmt}", data, off))
                        off += n * struct.calcsize(ifmt)
                    else:
                        (rec[pname],) = struct.unpack_from("<" + _PLY_TYPES[ptype], data, off)
                        off += struct.calcsize(_PLY_TYPES[ptype])
                if name == "face":
                    faces.extend(_fan(rec[props[0][0]]))
    if verts is None:
        raise FormatError("PLY has no vertex element", path=path)
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{path}: non-finite vertex coordinate")
    return v, np.array(faces, dtype=np.int64).reshape(-1, 3)
