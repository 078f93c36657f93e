"""Single-image inference: dense field evaluation and iso-surface extraction."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .mcubes import FieldGrid, marching_cubes
from .mesh import DEFAULT_UNITS_PER_CM, TriMesh
from .model import Model
from .render import OrthoCamera, project

DEFAULT_EXTENT = 0.55   # half-width of the evaluated cube, world units
CHUNK = 65536


def _check_params(model: Model):
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise ValidationError(f"parameter {name} is not finite; model is untrained or diverged")


def grid_points(resolution: int, camera: OrthoCamera, extent: float = DEFAULT_EXTENT):
    """World positions of an R^3 lattice laid out along the camera axes."""
    g = FieldGrid(np.zeros((resolution,) * 3), (-extent,) * 3, 2 * extent / (resolution - 1))
    return g, g.points().reshape(-1, 3) @ camera.basis()


def evaluate_field(lr_image, model: Model, resolution: int, camera: OrthoCamera,
                   extent: float = DEFAULT_EXTENT, chunk: int = CHUNK) -> FieldGrid:
    """Occupancy of every lattice point, in f64; points outside the image get 0.

    The encoder runs once; grid points are pushed through the heads in chunks.
    """
    if resolution < 8:
        raise ValidationError("grid resolution must be >= 8")
    _check_params(model)
    m = model.astype(np.float64)
    for p in m.params.values():
        p.requires_grad = False
    n_i = m.encoder_cfg.n_i
    cam = camera.resized(n_i)
    grid, pts = grid_points(resolution, camera, extent)
    emb = m.encode(np.asarray(lr_image, dtype=np.float64)[None])
    out = np.zeros(len(pts))
    for s in range(0, len(pts), chunk):
        pix, z = project(pts[s:s + chunk], cam)
        feat, valid = m.features(emb, np.zeros(len(pix), np.int64), pix)
        vals = m.field(feat, z).data
        out[s:s + chunk] = np.where(valid, vals, 0.0)
    grid.values = out.reshape((resolution,) * 3)
    return grid


def reconstruct(lr_image, model: Model, resolution: int, camera: OrthoCamera,
                extent: float = DEFAULT_EXTENT, units_per_cm: float = DEFAULT_UNITS_PER_CM,
                iso: float = 0.5) -> TriMesh:
    """LR image -> world-space mesh of the 0.5 level set."""
    grid = evaluate_field(lr_image, model, resolution, camera, extent)
    mesh = marching_cubes(grid, iso, units_per_cm)
    if mesh.is_empty():
        return mesh
    return mesh.with_vertices(mesh.vertices @ camera.basis())
