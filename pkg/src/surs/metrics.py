"""Chamfer, point-to-surface and normal reprojection errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import build_bvh, point_to_surface
from .mesh import TriMesh
from .render import OrthoCamera, rasterize

DEFAULT_SAMPLES = 10000


def _check(a: TriMesh, b: TriMesh, n_samples: int):
    if a.is_empty() or b.is_empty():
        raise ValidationError("metrics need two non-empty meshes")
    if n_samples < 1000:
        raise ValidationError("n_samples must be >= 1000")
    if not np.isclose(a.units_per_cm, b.units_per_cm, rtol=1e-12, atol=0):
        raise ValidationError(
            f"meshes disagree on units per cm ({a.units_per_cm} vs {b.units_per_cm})")


def directed_distances(src: TriMesh, dst: TriMesh, n_samples: int, seed: int = 0) -> np.ndarray:
    """Distances (mesh units) from area-weighted samples of ``src`` to ``dst``.

    The samples depend only on ``src`` and ``seed``.
    """
    pts, _ = src.sample_surface(n_samples, np.random.default_rng(seed))
    d, _, _ = point_to_surface(dst, build_bvh(dst), pts)
    return d


def directed_distance(src: TriMesh, dst: TriMesh, n_samples: int, seed: int = 0) -> float:
    return float(np.mean(directed_distances(src, dst, n_samples, seed)))


def chamfer(a: TriMesh, b: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Symmetric mean point-to-surface distance with a 1/2 factor, in cm."""
    _check(a, b, n_samples)
    dab = directed_distance(a, b, n_samples, seed)
    dba = directed_distance(b, a, n_samples, seed)
    return 0.5 * (dab + dba) / a.units_per_cm


def chamfer_stderr(a: TriMesh, b: TriMesh, n_samples: int = DEFAULT_SAMPLES,
                   seed: int = 0):
    """Chamfer distance and its Monte-Carlo standard error, both in cm."""
    _check(a, b, n_samples)
    dab = directed_distances(a, b, n_samples, seed)
    dba = directed_distances(b, a, n_samples, seed)
    cd = 0.5 * (dab.mean() + dba.mean()) / a.units_per_cm
    se = 0.5 * np.sqrt(dab.var(ddof=1) / len(dab) + dba.var(ddof=1) / len(dba)) / a.units_per_cm
    return float(cd), float(se)


def p2s(reconstructed: TriMesh, ground_truth: TriMesh, n_samples: int = DEFAULT_SAMPLES,
        seed: int = 0) -> float:
    """One-directional: reconstruction samples to the ground-truth surface, in cm."""
    _check(reconstructed, ground_truth, n_samples)
    return directed_distance(reconstructed, ground_truth, n_samples, seed) / ground_truth.units_per_cm


def normal_reprojection_error(reconstructed: TriMesh, ground_truth: TriMesh,
                              camera: OrthoCamera) -> float:
    """Mean L2 normal difference over pixels covered by both renders."""
    ra = rasterize(reconstructed, camera)
    rb = rasterize(ground_truth, camera)
    both = ra.mask & rb.mask
    if not both.any():
        raise ValidationError("rendered masks do not overlap")
    return float(np.mean(np.linalg.norm(ra.normal[both] - rb.normal[both], axis=1)))


@dataclass
class EvalReport:
    cd_cm: float
    p2s_cm: float
    normal_err: float
    n_samples: int
    seed: int
    cd_se_cm: float = 0.0   # Monte-Carlo standard error of cd_cm
    per_model: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)


def evaluate_pair(rec: TriMesh, gt: TriMesh, camera: OrthoCamera,
                  n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> dict:
    """All three metrics for one shape. An empty reconstruction scores inf."""
    if rec.is_empty():
        return {"cd_cm": float("inf"), "cd_se_cm": 0.0, "p2s_cm": float("inf"), "normal_err": 2.0}
    cd, se = chamfer_stderr(rec, gt, n_samples, seed)
    return {"cd_cm": cd, "cd_se_cm": se,
            "p2s_cm": p2s(rec, gt, n_samples, seed),
            "normal_err": normal_reprojection_error(rec, gt, camera)}


def evaluate(pairs, camera: OrthoCamera, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             names=None) -> EvalReport:
    """Average metrics over (reconstruction, ground truth) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("nothing to evaluate")
    names = names or [str(i) for i in range(len(pairs))]
    rows = []
    for name, (rec, gt) in zip(names, pairs):
        row = {"name": name, **evaluate_pair(rec, gt, camera, n_samples, seed)}
        rows.append(row)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("cd_cm", "p2s_cm", "normal_err")}
    # samples are independent across shapes, so variances add
    se = float(np.sqrt(np.sum([r["cd_se_cm"] ** 2 for r in rows]))) / len(rows)
    return EvalReport(**mean, n_samples=n_samples, seed=seed, cd_se_cm=se, per_model=rows)
