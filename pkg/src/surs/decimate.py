"""Quadric-error edge-collapse decimation (Garland & Heckbert style)."""

from __future__ import annotations

import heapq
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import TriMesh, check_watertight, compact

log = logging.getLogger(__name__)

BOUNDARY_WEIGHT = 1000.0
MAX_CONDITION = 1e8
MIN_FACES = 4


@dataclass
class DecimationInfo:
    faces_in: int
    faces_out: int
    collapses: int
    rejected: int
    reached_target: bool
    watertight: bool

    @property
    def warning(self) -> bool:
        return not self.reached_target or not self.watertight


def _plane_quadric(n, d):
    p = np.append(n, d)
    return np.outer(p, p)


def _initial_quadrics(v, f):
    Q = np.zeros((len(v), 4, 4))
    t = v[f]
    c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    ln = np.linalg.norm(c, axis=1)
    ok = ln > 1e-300
    n = np.zeros_like(c)
    n[ok] = c[ok] / ln[ok, None]
    d = -np.einsum("ij,ij->i", n, t[:, 0])
    p = np.concatenate([n, d[:, None]], axis=1)
    K = p[:, :, None] * p[:, None, :]
    for k in range(3):
        np.add.at(Q, f[:, k], K)

    # boundary edges: penalize motion away from a plane perpendicular to the face
    edges = {}
    for fi, (a, b, cc) in enumerate(f.tolist()):
        for x, y in ((a, b), (b, cc), (cc, a)):
            key = (x, y) if x < y else (y, x)
            edges.setdefault(key, []).append(fi)
    for (x, y), fs in edges.items():
        if len(fs) != 1:
            continue
        e = v[y] - v[x]
        m = np.cross(e, n[fs[0]])
        lm = np.linalg.norm(m)
        if lm < 1e-300:
            continue
        m /= lm
        Kb = BOUNDARY_WEIGHT * _plane_quadric(m, -m @ v[x])
        Q[x] += Kb
        Q[y] += Kb
    return Q


def _optimal(Q, pu, pv):
    A = Q[:3, :3]
    b = Q[:3, 3]
    x = None
    if np.linalg.cond(A) < MAX_CONDITION:
        x = np.linalg.solve(A, -b)
        if not np.all(np.isfinite(x)):
            x = None
    if x is None:
        x = 0.5 * (pu + pv)
    h = np.append(x, 1.0)
    return max(float(h @ Q @ h), 0.0), x


def decimate(mesh: TriMesh, target_faces: int, return_info: bool = False):
    """Greedily collapse the cheapest edges until at most ``target_faces`` remain."""
    if target_faces < MIN_FACES:
        raise ValidationError(f"target_faces must be >= {MIN_FACES}")
    n_in = mesh.n_faces
    if target_faces >= n_in:
        info = DecimationInfo(n_in, n_in, 0, 0, True, check_watertight(mesh).ok)
        return (mesh, info) if return_info else mesh

    V = np.array(mesh.vertices, dtype=np.float64)
    F = np.array(mesh.faces, dtype=np.int64)
    Q = _initial_quadrics(V, F)
    alive_f = np.ones(len(F), dtype=bool)
    alive_v = np.ones(len(V), dtype=bool)
    vfaces = [set() for _ in range(len(V))]
    for fi, tri in enumerate(F.tolist()):
        for x in tri:
            vfaces[x].add(fi)
    version = np.zeros(len(V), dtype=np.int64)

    def neighbors(x):
        out = set()
        for fi in vfaces[x]:
            out.update(F[fi].tolist())
        out.discard(x)
        return out

    def face_normal(tri_pos):
        c = np.cross(tri_pos[1] - tri_pos[0], tri_pos[2] - tri_pos[0])
        return c

    heap = []

    def push(u, v):
        if u > v:
            u, v = v, u
        cost, x = _optimal(Q[u] + Q[v], V[u], V[v])
        heapq.heappush(heap, (cost, u, v, int(version[u]), int(version[v]), tuple(x)))

    seen = set()
    for a, b, c in F.tolist():
        for x, y in ((a, b), (b, c), (c, a)):
            key = (x, y) if x < y else (y, x)
            if key not in seen:
                seen.add(key)
                push(*key)

    n_faces = n_in
    collapses = rejected = 0
    while n_faces > target_faces and heap:
        cost, u, v, vu, vv, x = heapq.heappop(heap)
        if not (alive_v[u] and alive_v[v]) or version[u] != vu or version[v] != vv:
            continue
        shared = vfaces[u] & vfaces[v]
        if not shared:
            continue
        opposite = set()
        for fi in shared:
            opposite.update(F[fi].tolist())
        opposite -= {u, v}
        # link condition keeps the collapse a topological no-op
        if (neighbors(u) & neighbors(v)) != opposite:
            rejected += 1
            continue
        if n_faces - len(shared) < MIN_FACES:
            rejected += 1
            continue
        x = np.asarray(x)
        flip = False
        for w in (u, v):
            for fi in vfaces[w] - shared:
                tri = F[fi]
                pos = V[tri].copy()
                before = face_normal(pos)
                pos[tri == w] = x
                after = face_normal(pos)
                if before @ after <= 0.0 or np.linalg.norm(after) < 1e-14:
                    flip = True
                    break
            if flip:
                break
        if flip:
            rejected += 1
            continue

        for fi in shared:
            alive_f[fi] = False
            for w in F[fi].tolist():
                vfaces[w].discard(fi)
        for fi in vfaces[v]:
            F[fi][F[fi] == v] = u
            vfaces[u].add(fi)
        vfaces[v] = set()
        alive_v[v] = False
        V[u] = x
        Q[u] = Q[u] + Q[v]
        version[u] += 1
        n_faces -= len(shared)
        collapses += 1
        for w in neighbors(u):
            push(u, w)

    out = compact(V, F[alive_f], mesh.units_per_cm)
    wt = check_watertight(out)
    info = DecimationInfo(n_in, out.n_faces, collapses, rejected,
                          out.n_faces <= target_faces, wt.ok)
    if not info.reached_target:
        warnings.warn(f"decimation stopped at {out.n_faces} faces (target {target_faces})")
    if not wt.ok and check_watertight(mesh).ok:
        log.warning("decimated mesh is no longer watertight: %s", wt)
    return (out, info) if return_info else out


def make_lr_ladder(mesh: TriMesh, targets) -> list:
    """Decimate the same source once per target (no chaining)."""
    targets = list(targets)
    if any(b >= a for a, b in zip(targets, targets[1:])):
        raise ValidationError("ladder targets must be strictly decreasing")
    return [decimate(mesh, t) for t in targets]
