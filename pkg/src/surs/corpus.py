"""Procedural desk-scale training shapes: bumpy, stretched icospheres."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import TriMesh, icosphere, normalize_to_unit, save_mesh

MANIFEST = "manifest.json"


@dataclass
class BumpConfig:
    subdivisions: int = 4
    amplitude: float = 0.08      # total radial displacement budget, fraction of radius
    frequencies: tuple = (3.0, 7.0, 13.0)
    waves_per_frequency: int = 3
    stretch: tuple = (0.6, 1.0)  # per-axis scale range before normalization

    def __post_init__(self):
        if self.subdivisions < 0 or self.amplitude < 0 or self.amplitude >= 0.5:
            raise ValidationError("need subdivisions >= 0 and 0 <= amplitude < 0.5")
        self.frequencies = tuple(float(f) for f in self.frequencies)
        self.stretch = tuple(float(s) for s in self.stretch)


def bump_shape(rng: np.random.Generator, cfg: BumpConfig = BumpConfig(),
               units_per_cm: float = 0.01) -> TriMesh:
    """Radially displaced icosphere; star-shaped, so always closed and embedded."""
    base = icosphere(cfg.subdivisions, 1.0)
    u = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    r = np.ones(len(u))
    n_waves = len(cfg.frequencies) * cfg.waves_per_frequency
    for f in cfg.frequencies:
        for _ in range(cfg.waves_per_frequency):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            phase = rng.uniform(0, 2 * np.pi)
            # higher frequencies get smaller amplitude
            r += cfg.amplitude / n_waves * (cfg.frequencies[0] / f) ** 0.5 \
                * len(cfg.frequencies) ** 0.5 * np.sin(f * (u @ d) + phase)
    scale = rng.uniform(*cfg.stretch, size=3)
    v = u * r[:, None] * scale
    mesh, _ = normalize_to_unit(TriMesh(v, base.faces, units_per_cm))
    return TriMesh(mesh.vertices, mesh.faces, units_per_cm)


def synth_corpus(out_dir, n_shapes: int, seed: int = 0, cfg: BumpConfig = BumpConfig(),
                 n_test: int = None, units_per_cm: float = 0.01) -> dict:
    """Write shape_XXX.obj files plus a train/test manifest; returns the manifest."""
    if n_shapes < 1:
        raise ValidationError("n_shapes must be >= 1")
    if n_test is None:
        n_test = n_shapes // 5
    if not 0 <= n_test < n_shapes:
        raise ValidationError("test split must leave at least one training shape")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for k in range(n_shapes):
        name = f"shape_{k:03d}"
        save_mesh(bump_shape(rng, cfg, units_per_cm), out / f"{name}.obj")
        names.append(name)
    manifest = {"train": names[:n_shapes - n_test], "test": names[n_shapes - n_test:],
                "seed": seed, "units_per_cm": units_per_cm,
                "bumps": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in asdict(cfg).items()}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise ValidationError(f"no manifest in {corpus_dir}")
    return json.loads(path.read_text())
