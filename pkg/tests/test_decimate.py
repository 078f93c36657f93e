import warnings

import numpy as np
import pytest

from surs.corpus import bump_shape
from surs.decimate import _initial_quadrics, decimate, make_lr_ladder
from surs.errors import ValidationError
from surs.mesh import check_watertight, icosphere
from surs.metrics import chamfer


@pytest.fixture(scope="module")
def sphere1280():
    return icosphere(3, 1.0)


def test_target_320_close_to_input(sphere1280):
    out, info = decimate(sphere1280, 320, return_info=True)
    assert 4 <= out.n_faces <= 320
    assert info.reached_target and info.watertight and not info.warning
    cd = chamfer(out, sphere1280, 5000, seed=0)
    assert cd < 0.02 * sphere1280.bbox_diagonal()


def test_identity_when_target_not_below_count(sphere1280):
    assert decimate(sphere1280, 1280) is sphere1280
    assert decimate(sphere1280, 5000) is sphere1280


def test_target_below_minimum():
    with pytest.raises(ValidationError):
        decimate(icosphere(1), 3)


def test_large_mesh_to_1000_faces():
    # 20480-face sphere standing in for a dense scan
    out = decimate(icosphere(5, 1.0), 1000)
    assert out.n_faces <= 1000
    assert check_watertight(out).ok


def test_ladder(sphere1280):
    assert make_lr_ladder(sphere1280, []) == []
    (one,) = make_lr_ladder(sphere1280, [320])
    assert one.n_faces <= 320
    with pytest.raises(ValidationError):
        make_lr_ladder(sphere1280, [320, 640])


def test_coarser_is_farther():
    hr = bump_shape(np.random.default_rng(3))
    ladder = make_lr_ladder(hr, [2560, 640, 160])
    cds = [chamfer(m, hr, 4000, seed=1) for m in ladder]
    assert all(m.n_faces <= t for m, t in zip(ladder, [2560, 640, 160]))
    assert cds[0] <= cds[1] <= cds[2]


def test_quadrics_symmetric_psd(sphere1280):
    Q = _initial_quadrics(np.array(sphere1280.vertices), np.array(sphere1280.faces))
    np.testing.assert_allclose(Q, np.transpose(Q, (0, 2, 1)), atol=1e-12)
    assert np.linalg.eigvalsh(Q).min() > -1e-9


def test_no_foldover_against_input(sphere1280):
    out = decimate(sphere1280, 80)
    c = out.triangles().mean(axis=1)
    # star-shaped input: every output face must still face away from the center
    assert np.all(np.einsum("ij,ij->i", out.face_normals(), c) > 0)


def test_unreachable_target_warns():
    tetra = icosphere(0)  # 20 faces; 4 is reachable only through degenerate collapses
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out, info = decimate(tetra, 4, return_info=True)
    if not info.reached_target:
        assert info.warning and any("decimation stopped" in str(x.message) for x in w)
    assert out.n_faces >= 4
