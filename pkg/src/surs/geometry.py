"""Inside/outside queries and closest-point search over triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import TriMesh

BOUNDARY_BAND = 1e-3

# (points x faces) pairs evaluated per winding-number block
_BLOCK = 1 << 20
_WN_BLOCK = 1 << 16


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def winding_number(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number: exact sum of signed solid angles / 4pi."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(pts))
    if mesh.is_empty() or len(pts) == 0:
        return out
    V, F = mesh.vertices, mesh.faces
    step = max(1, _WN_BLOCK // mesh.n_faces)
    for s in range(0, len(pts), step):
        # vertex offsets and lengths once per vertex, then gathered per face
        D = V[None] - pts[s:s + step, None, :]
        L = np.sqrt(_dot(D, D))
        a, b, c = D[:, F[:, 0]], D[:, F[:, 1]], D[:, F[:, 2]]
        la, lb, lc = L[:, F[:, 0]], L[:, F[:, 1]], L[:, F[:, 2]]
        ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
        bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
        cx, cy, cz = c[..., 0], c[..., 1], c[..., 2]
        det = ax * (by * cz - bz * cy) + ay * (bz * cx - bx * cz) + az * (bx * cy - by * cx)
        den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
               + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
        # coplanar queries (det == 0) contribute nothing, so points exactly on
        # a closed surface get w = 0.5 and fall to the outside
        ang = np.where(det == 0.0, 0.0, np.arctan2(det, den))
        out[s:s + step] = np.sum(ang, axis=1)
    return out * (2.0 / (4.0 * np.pi))


def occupancy(mesh: TriMesh, points, return_winding=False):
    """1 where the winding number exceeds 0.5, else 0 (exactly 0.5 is outside)."""
    w = winding_number(mesh, points)
    lab = (w > 0.5).astype(np.uint8)
    if np.ndim(points) == 1:
        lab, w = lab[0], w[0]
    return (lab, w) if return_winding else lab


def boundary_flags(winding) -> np.ndarray:
    """Points whose winding number sits within the ambiguity band around 0.5."""
    return np.abs(np.asarray(winding) - 0.5) < BOUNDARY_BAND


# ---------------------------------------------------------------------------
# closest point on triangles


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to p; all arrays (..., 3).

    Region classification follows the Voronoi-region walk from Ericson,
    Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        e = (d4 - d3) + (d5 - d6)
        t_bc = np.where(e != 0, (d4 - d3) / e, 0.0)
        s = va + vb + vc
        denom = np.where(s != 0, 1.0 / s, 0.0)
    v = vb * denom
    w = vc * denom

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [
        a,
        b,
        a + t_ab[..., None] * ab,
        c,
        a + t_ac[..., None] * ac,
        b + t_bc[..., None] * (c - b),
    ]
    interior = a + ab * v[..., None] + ac * w[..., None]
    cond3 = [np.broadcast_to(k[..., None], interior.shape) for k in conds]
    return np.select(cond3, [np.broadcast_to(x, interior.shape) for x in choices], interior)


def _pair_sqdist(points, tri, pidx, fidx):
    q = closest_point_on_triangles(points[pidx], tri[fidx, 0], tri[fidx, 1], tri[fidx, 2])
    d = points[pidx] - q
    return _dot(d, d), q


# ---------------------------------------------------------------------------
# bounding volume hierarchy


@dataclass(frozen=True, eq=False)
class Bvh:
    """Median-split AABB tree. Leaves own the slice order[start:start+count]."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    n_faces: int

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def is_leaf(self, node) -> np.ndarray:
        return self.left[node] < 0

    def leaves(self):
        return np.nonzero(self.left < 0)[0]


def build_bvh(mesh: TriMesh, leaf_size: int = 8) -> Bvh:
    if mesh.is_empty():
        raise ValidationError("cannot build a BVH over an empty mesh")
    tri = mesh.triangles()
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    cen = tri.mean(axis=1)
    order = np.arange(mesh.n_faces)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        ids = order[s:e]
        lo.append(tlo[ids].min(axis=0))
        hi.append(thi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    root = new_node(0, len(order))
    stack = [root]
    while stack:
        node = stack.pop()
        s, n = start[node], count[node]
        if n <= leaf_size:
            continue
        ids = order[s:s + n]
        c = cen[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        perm = np.argsort(c[:, axis], kind="stable")
        order[s:s + n] = ids[perm]
        mid = s + n // 2
        l_ = new_node(s, mid)
        r_ = new_node(mid, s + n)
        left[node], right[node] = l_, r_
        count[node] = 0
        stack += [r_, l_]
    return Bvh(np.array(lo), np.array(hi), np.array(left), np.array(right),
               np.array(start), np.array(count), order, mesh.n_faces)


def _box_sqdist(points, lo, hi):
    d = np.maximum(np.maximum(lo - points, 0.0), points - hi)
    return _dot(d, d)


def _better(d_new, f_new, d_old, f_old):
    return (d_new < d_old) | ((d_new == d_old) & (f_new < f_old))


def _reduce_best(n, pidx, d2, fid, q, best_d2, best_f, best_q):
    # smallest distance wins; ties go to the lowest face index
    key = np.lexsort((fid, d2, pidx))
    pidx, d2, fid, q = pidx[key], d2[key], fid[key], q[key]
    first = np.ones(len(pidx), dtype=bool)
    first[1:] = pidx[1:] != pidx[:-1]
    pidx, d2, fid, q = pidx[first], d2[first], fid[first], q[first]
    upd = _better(d2, fid, best_d2[pidx], best_f[pidx])
    u = pidx[upd]
    best_d2[u], best_f[u], best_q[u] = d2[upd], fid[upd], q[upd]


def point_to_surface(mesh: TriMesh, bvh: Bvh, points):
    """Exact closest point on the mesh for each query.

    Returns (distance, closest point, face index); scalar-shaped for a single
    3-vector query.
    """
    if mesh.is_empty():
        raise ValidationError("point_to_surface on an empty mesh")
    single = np.ndim(points) == 1
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    tri = mesh.triangles()
    best_d2 = np.full(n, np.inf)
    best_f = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    best_q = np.zeros((n, 3))

    # greedy descent to a nearby leaf gives each query a tight initial bound
    node = np.zeros(n, dtype=np.int64)
    active = ~bvh.is_leaf(node)
    while np.any(active):
        idx = np.nonzero(active)[0]
        l_, r_ = bvh.left[node[idx]], bvh.right[node[idx]]
        dl = _box_sqdist(pts[idx], bvh.lo[l_], bvh.hi[l_])
        dr = _box_sqdist(pts[idx], bvh.lo[r_], bvh.hi[r_])
        node[idx] = np.where(dl <= dr, l_, r_)
        active[idx] = ~bvh.is_leaf(node[idx])
    _eval_leaves(pts, tri, bvh, np.arange(n), node, best_d2, best_f, best_q)

    # breadth-first traversal of (query, node) pairs with pruning
    fp = np.arange(n)
    fn = np.zeros(n, dtype=np.int64)
    while len(fp):
        lb = _box_sqdist(pts[fp], bvh.lo[fn], bvh.hi[fn])
        keep = lb <= best_d2[fp]
        fp, fn = fp[keep], fn[keep]
        leaf = bvh.is_leaf(fn)
        if np.any(leaf):
            _eval_leaves(pts, tri, bvh, fp[leaf], fn[leaf], best_d2, best_f, best_q)
        inner = ~leaf
        fp = np.concatenate([fp[inner], fp[inner]])
        fn = np.concatenate([bvh.left[fn[inner]], bvh.right[fn[inner]]])

    dist = np.sqrt(best_d2)
    if single:
        return float(dist[0]), best_q[0], int(best_f[0])
    return dist, best_q, best_f


def _eval_leaves(pts, tri, bvh, qidx, nodes, best_d2, best_f, best_q):
    cnt = bvh.count[nodes]
    if cnt.sum() == 0:
        return
    pidx = np.repeat(qidx, cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    fid = bvh.order[np.repeat(bvh.start[nodes], cnt) + offs]
    d2, q = _pair_sqdist(pts, tri, pidx, fid)
    _reduce_best(len(pts), pidx, d2, fid, q, best_d2, best_f, best_q)


def point_to_surface_bruteforce(mesh: TriMesh, points):
    """O(|F|) scan per query; reference for the BVH path."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    n, f = len(pts), mesh.n_faces
    best_d2 = np.full(n, np.inf)
    best_f = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    best_q = np.zeros((n, 3))
    step = max(1, _BLOCK // f)
    for s in range(0, n, step):
        idx = np.arange(s, min(n, s + step))
        pidx = np.repeat(idx, f)
        fid = np.tile(np.arange(f), len(idx))
        d2, q = _pair_sqdist(pts, tri, pidx, fid)
        _reduce_best(n, pidx, d2, fid, q, best_d2, best_f, best_q)
    return np.sqrt(best_d2), best_q, best_f
