import json

import numpy as np
import pytest

from surs.corpus import BumpConfig, bump_shape, read_manifest, synth_corpus
from surs.errors import ValidationError
from surs.mesh import TriMesh, check_watertight, icosphere, load_mesh
from surs.metrics import chamfer


def test_twenty_watertight_shapes(tmp_path):
    m = synth_corpus(tmp_path, 20, seed=7)
    assert len(m["train"]) == 16 and len(m["test"]) == 4
    for name in m["train"] + m["test"]:
        mesh = load_mesh(tmp_path / f"{name}.obj")
        assert check_watertight(mesh).ok
        lo, hi = mesh.bounds()
        assert np.max(np.abs(np.r_[lo, hi])) <= 0.5 + 1e-9
    assert read_manifest(tmp_path) == json.loads((tmp_path / "manifest.json").read_text())


def test_zero_amplitude_is_sphere():
    cfg = BumpConfig(amplitude=0.0, stretch=(1.0, 1.0))
    mesh = bump_shape(np.random.default_rng(0), cfg)
    r = np.linalg.norm(mesh.vertices - mesh.vertices.mean(axis=0), axis=1)
    np.testing.assert_allclose(r, r[0], rtol=1e-12)
    ref = icosphere(6, r[0])
    ref = TriMesh(ref.vertices + mesh.vertices.mean(axis=0), ref.faces, mesh.units_per_cm)
    # facet tolerance of a 4-subdivision icosphere is well under 1% of the radius
    assert chamfer(mesh, ref, 2000) * mesh.units_per_cm < 0.01 * r[0]


def test_bumps_move_vertices():
    mesh = bump_shape(np.random.default_rng(0), BumpConfig(stretch=(1.0, 1.0)))
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert r.std() / r.mean() > 0.01


def test_deterministic(tmp_path):
    synth_corpus(tmp_path / "a", 3, seed=11)
    synth_corpus(tmp_path / "b", 3, seed=11)
    for k in range(3):
        a = (tmp_path / "a" / f"shape_{k:03d}.obj").read_bytes()
        assert a == (tmp_path / "b" / f"shape_{k:03d}.obj").read_bytes()


def test_validation(tmp_path):
    with pytest.raises(ValidationError):
        synth_corpus(tmp_path, 0)
    with pytest.raises(ValidationError):
        synth_corpus(tmp_path, 2, n_test=2)
    with pytest.raises(ValidationError):
        BumpConfig(amplitude=0.7)
    with pytest.raises(ValidationError):
        read_manifest(tmp_path / "nowhere")
