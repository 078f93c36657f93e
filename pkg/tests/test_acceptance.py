"""Acceptance checks. Each test records a PASS/FAIL line shown in the terminal summary.

The end-to-end checks train real models on the 20-shape synthetic corpus and
take about an hour and a half in total on one core; they are marked slow.
"""

import time

import numpy as np
import pytest

from surs.corpus import bump_shape
from surs.decimate import decimate
from surs.geometry import build_bvh, occupancy, point_to_surface
from surs.mcubes import FieldGrid, marching_cubes
from surs.mesh import TriMesh, icosphere
from surs.metrics import chamfer, normal_reprojection_error, p2s
from surs.pipeline import PipelineConfig, run_pipeline, share_upstream
from surs.render import OrthoCamera
from surs.sampler import build_sample_set
from surs.train import (TrainConfig, grad_check_all, loss_diff, tiny_batch, tiny_model, train)

from oracles import ray_parity

EPOCHS = 200
EVAL_SAMPLES = 40000
NOISE_SIGMAS = 3.0
LADDER = (80, 2560)   # coarsest and finest decimation targets; HR meshes have 5120 faces


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    return ok


def test_gradient_correctness(acceptance_log):
    t = time.perf_counter()
    reps = grad_check_all(tolerance=1e-3)
    dt = time.perf_counter() - t
    worst = {k: max(r.max_rel_error.values()) for k, r in reps.items()}
    ok = all(r.passed for r in reps.values()) and dt < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"  ({dt:.0f} s)"
    assert verdict(acceptance_log, 1, ok, detail)


def test_occupancy_oracle(acceptance_log, sphere4):
    t = time.perf_counter()
    pts = np.random.default_rng(0).uniform(-1.3, 1.3, (10000, 3))
    d, _, _ = point_to_surface(sphere4, build_bvh(sphere4), pts)
    far = d > 1e-4
    ref = ray_parity(sphere4, pts[far], [[0.31, 0.72, 0.62], [-0.55, 0.12, 0.83],
                                         [0.66, -0.71, 0.24]])
    agree = float(np.mean(occupancy(sphere4, pts[far]) == ref))
    dt = time.perf_counter() - t
    ok = agree >= 0.999 and dt < 30 and sphere4.n_vertices == 2562
    assert verdict(acceptance_log, 2, ok, f"agreement {agree:.5f} on {far.sum()} points ({dt:.1f} s)")


def test_sr_labeling(acceptance_log):
    t = time.perf_counter()
    cam = OrthoCamera(size=128)
    hr = bump_shape(np.random.default_rng(3))
    lr = decimate(hr, 80)
    ss = build_sample_set(hr, lr, cam, 2400, 600, seed=0)
    flipped = ss.lr.positions[ss.flips()]
    probe, _ = hr.sample_surface(50000, np.random.default_rng(1))
    probe = np.concatenate([probe, hr.vertices])
    h, _, _ = point_to_surface(lr, build_bvh(lr), probe)
    hausdorff = float(h.max())
    dist, _, _ = point_to_surface(lr, build_bvh(lr), flipped)
    same = build_sample_set(hr, hr, cam, 2400, 600, seed=0)
    dt = time.perf_counter() - t
    ok = (len(flipped) > 0 and bool(np.all(dist <= 2 * hausdorff))
          and not same.flips().any() and dt < 60)
    detail = (f"{len(flipped)} flips, max dist {dist.max() if len(dist) else 0:.4f} "
              f"<= 2 x {hausdorff:.4f}; identical surfaces: {int(same.flips().sum())} flips ({dt:.0f} s)")
    assert verdict(acceptance_log, 3, ok, detail)


def test_marching_cubes_accuracy(acceptance_log):
    r0, k = 0.35, 1e4

    def field(p):
        return 1 / (1 + np.exp(np.clip(-k * (r0 - np.linalg.norm(p, axis=-1)), -700, 700)))

    errs, voxels = [], []
    for res in (64, 128):
        g = FieldGrid.from_function(field, res)
        m = marching_cubes(g)
        errs.append(np.abs(np.linalg.norm(m.vertices, axis=1) - r0))
        voxels.append(g.voxel)
    worst = errs[0].max() / voxels[0]
    ratio = errs[0].mean() / errs[1].mean()
    ok = worst < 1.5 and 1.5 <= ratio <= 2.5
    assert verdict(acceptance_log, 4, ok,
                   f"max error {worst:.3f} voxels at R=64; mean error ratio R=64/R=128 {ratio:.3f}")


def test_metric_oracles(acceptance_log):
    a, b = icosphere(5, 1.0), icosphere(5, 1.1)
    a, b = TriMesh(a.vertices, a.faces, 1.0), TriMesh(b.vertices, b.faces, 1.0)
    cd, ps = chamfer(a, b), p2s(a, b)
    ident = max(chamfer(a, a), p2s(a, a))
    sq = np.array([[-0.4, -0.4, 0], [0.4, -0.4, 0], [0.4, 0.4, 0], [-0.4, 0.4, 0.0]])
    c, s = np.cos(np.pi / 3), np.sin(np.pi / 3)
    tilt = sq @ np.array([[1, 0, 0], [0, c, -s], [0, s, c]]).T
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    ne = normal_reprojection_error(TriMesh(sq, faces), TriMesh(tilt, faces), OrthoCamera())
    ok = abs(cd - 0.1) <= 0.005 and abs(ps - 0.1) <= 0.005 and ident < 1e-9 and abs(ne - 1) <= 0.01
    assert verdict(acceptance_log, 5, ok,
                   f"chamfer {cd:.5f}, p2s {ps:.5f}, identity {ident:.1e}, tilted normal {ne:.4f}")


def test_loss_algebra(acceptance_log):
    hand = loss_diff([1, 0], [1, 0], [1, 0], [1, 1])
    sums, zeros = [], []
    for arch, off in (("full", ()), ("only_mr", (3, 4)), ("only_sr", (2, 4)),
                      ("no_unet", (1,)), ("no_ldiff", (4,))):
        m = tiny_model(arch, dtype=np.float32)
        res = train(tiny_batch(m, n_points=12), TrainConfig(arch=arch, epochs=2, batch_size=2,
                                                          points_per_image=8), m)
        for row in res.log:
            sums.append(abs(row[5] - sum(row[1:5])))
            zeros += [row[c] == 0.0 for c in off]
    ok = hand == 0.5 and max(sums) <= 1e-6 and all(zeros)
    assert verdict(acceptance_log, 6, ok,
                   f"hand case {hand}, max |total - sum| {max(sums):.1e}, "
                   f"{sum(zeros)}/{len(zeros)} disabled terms exactly zero")


# -- end to end ---------------------------------------------------------------

def _config(root, name, arch="full", target=320):
    return PipelineConfig(work_dir=str(root / name), decimation_target=target,
                          eval_samples=EVAL_SAMPLES, train={"epochs": EPOCHS, "arch": arch})


def run_ablation(root):
    t = time.perf_counter()
    full = _config(root, "full")
    out = {"full": run_pipeline(full)}
    for arch in ("only_mr", "no_ldiff"):
        cfg = _config(root, arch, arch)
        share_upstream(full, cfg, "sample")
        out[arch] = run_pipeline(cfg)
    return out, time.perf_counter() - t


def run_ladder(root, corpus_from):
    t = time.perf_counter()
    out = {}
    for target in LADDER:
        cfg = _config(root, f"ladder_{target}", target=target)
        share_upstream(corpus_from, cfg, "synth-corpus")
        out[target] = run_pipeline(cfg)
    return out, time.perf_counter() - t


@pytest.fixture(scope="session")
def e2e_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def ablation(e2e_root):
    return run_ablation(e2e_root / "first")


@pytest.fixture(scope="session")
def ladder(e2e_root, ablation):
    return run_ladder(e2e_root / "first", _config(e2e_root / "first", "full"))


@pytest.mark.slow
def test_ablation_ordering(acceptance_log, ablation):
    reps, dt = ablation
    full = reps["full"]
    ok, parts = dt < 45 * 60, []
    for arch in ("only_mr", "no_ldiff"):
        other = reps[arch]
        margin = other.cd_cm - full.cd_cm
        band = NOISE_SIGMAS * float(np.hypot(full.cd_se_cm, other.cd_se_cm))
        ok &= margin > band
        parts.append(f"{arch} {other.cd_cm:.4f} (margin {margin:+.4f}, noise band {band:.4f})")
    detail = f"CD full {full.cd_cm:.4f} cm; " + "; ".join(parts) + f" ({dt / 60:.1f} min)"
    assert verdict(acceptance_log, 7, ok, detail)


@pytest.mark.slow
def test_decimation_ladder(acceptance_log, ladder):
    reps, dt = ladder
    coarse, fine = reps[LADDER[0]].cd_cm, reps[LADDER[1]].cd_cm
    ok = coarse <= fine and dt < 90 * 60
    assert verdict(acceptance_log, 8, ok,
                   f"CD with {LADDER[0]}-face S_LR {coarse:.4f} cm vs {LADDER[1]}-face "
                   f"{fine:.4f} cm ({dt / 60:.1f} min)")


@pytest.mark.slow
def test_determinism(acceptance_log, e2e_root, ablation, ladder):
    root = e2e_root / "second"
    again, _ = run_ablation(root)
    again_ladder, _ = run_ladder(root, _config(root, "full"))
    first = [r.to_json() for r in (*ablation[0].values(), *ladder[0].values())]
    second = [r.to_json() for r in (*again.values(), *again_ladder.values())]
    names = [*ablation[0], *(f"ladder_{t}" for t in ladder[0])]
    models = [(e2e_root / "first" / n / "model.bin").read_bytes()
              == (root / n / "model.bin").read_bytes() for n in names]
    same = sum(a == b for a, b in zip(first, second))
    ok = same == len(first) and all(models)
    assert verdict(acceptance_log, 9, ok,
                   f"{same}/{len(first)} reports and {sum(models)}/{len(models)} checkpoints identical")
