"""Training point sets: HR occupancy labels and super-resolution labels.

HR samples are balanced against the HR surface itself. LR samples are balanced
against the decimated surface but labeled by the HR surface, so points near
the coarse surface can carry the "wrong" side - that is the detail signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SamplingError, ValidationError
from .geometry import boundary_flags, occupancy
from .mesh import TriMesh
from .render import OrthoCamera, project

MAGIC = b"SURSSAMP"
VERSION = 1

DEFAULT_SIGMA = 0.03
DEFAULT_UNIFORM_RATIO = 1.0 / 16.0


@dataclass
class FieldSamples:
    positions: np.ndarray  # (N, 3)
    pixels: np.ndarray     # (N, 2) continuous (col, row) in the input image
    depths: np.ndarray     # (N,)
    labels: np.ndarray     # (N,) uint8

    def __len__(self):
        return len(self.labels)


@dataclass
class SampleSet:
    hr: FieldSamples
    lr: FieldSamples
    n_pool: int
    seed: int
    pool: np.ndarray = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.hr)

    def lr_side(self) -> np.ndarray:
        """Side of each LR sample w.r.t. the LR surface (inside first by construction)."""
        h = self.n // 2
        return np.r_[np.ones(h, np.uint8), np.zeros(self.n - h, np.uint8)]

    def flips(self) -> np.ndarray:
        return self.lr.labels != self.lr_side()


def sample_pool(mesh_hr: TriMesh, n_total: int, rng: np.random.Generator,
                sigma: float = DEFAULT_SIGMA,
                uniform_ratio: float = DEFAULT_UNIFORM_RATIO) -> np.ndarray:
    """Uniform points in the unit cube mixed with Gaussian-perturbed surface points."""
    if n_total < 1:
        raise ValidationError("pool size must be >= 1")
    n_uni = int(np.floor(uniform_ratio * n_total))
    n_surf = n_total - n_uni
    uni = rng.uniform(-0.5, 0.5, size=(n_uni, 3))
    if n_surf:
        surf, _ = mesh_hr.sample_surface(n_surf, rng)
        surf = surf + rng.normal(0.0, sigma, size=surf.shape)
    else:
        surf = np.zeros((0, 3))
    return np.concatenate([surf, uni])


def _in_window(pixels, size):
    return np.all((pixels >= 0) & (pixels < size), axis=1)


def _pick_balanced(side, usable, n, rng, what):
    half = n // 2
    ins = np.nonzero(usable & (side == 1))[0]
    out = np.nonzero(usable & (side == 0))[0]
    if len(ins) < half or len(out) < n - half:
        raise SamplingError(
            f"{what}: need {half} inside / {n - half} outside, pool has "
            f"{len(ins)} / {len(out)}")
    return np.r_[rng.choice(ins, half, replace=False), rng.choice(out, n - half, replace=False)]


def _fill(pool, idx, labels, camera):
    pos = pool[idx]
    pix, z = project(pos, camera)
    return FieldSamples(pos, pix, z, labels.astype(np.uint8))


def label_hr(pool, mesh_hr: TriMesh, n: int, camera: OrthoCamera, rng,
             occ_hr=None, winding_hr=None):
    """N/2 samples inside and N/2 outside the HR surface, inside first."""
    if occ_hr is None:
        occ_hr, winding_hr = occupancy(mesh_hr, pool, return_winding=True)
    pix, _ = project(pool, camera)
    usable = _in_window(pix, camera.size) & ~boundary_flags(winding_hr)
    idx = _pick_balanced(occ_hr, usable, n, rng, "hr labeling")
    return _fill(pool, idx, occ_hr[idx], camera), idx


def label_sr(pool, mesh_lr: TriMesh, mesh_hr: TriMesh, n: int, camera: OrthoCamera, rng,
             occ_hr=None, winding_hr=None, occ_lr=None, winding_lr=None):
    """Balance against the LR surface, label against the HR surface."""
    if occ_hr is None:
        occ_hr, winding_hr = occupancy(mesh_hr, pool, return_winding=True)
    if occ_lr is None:
        occ_lr, winding_lr = occupancy(mesh_lr, pool, return_winding=True)
    pix, _ = project(pool, camera)
    usable = (_in_window(pix, camera.size) & ~boundary_flags(winding_lr)
              & ~boundary_flags(winding_hr))
    idx = _pick_balanced(occ_lr, usable, n, rng, "sr labeling")
    return _fill(pool, idx, occ_hr[idx], camera), idx


def build_sample_set(mesh_hr: TriMesh, mesh_lr: TriMesh, camera: OrthoCamera, n_total: int,
                     n: int, seed: int, sigma: float = DEFAULT_SIGMA,
                     uniform_ratio: float = DEFAULT_UNIFORM_RATIO,
                     max_regrow: int = 4) -> SampleSet:
    """Pool, then both labelings; the pool doubles on a SamplingError."""
    if n < 2 or n % 2:
        raise ValidationError("N must be a positive even integer")
    rng = np.random.default_rng(seed)
    size = n_total
    for attempt in range(max_regrow + 1):
        pool = sample_pool(mesh_hr, size, rng, sigma, uniform_ratio)
        occ_hr, w_hr = occupancy(mesh_hr, pool, return_winding=True)
        if mesh_lr is mesh_hr:
            occ_lr, w_lr = occ_hr, w_hr
        else:
            occ_lr, w_lr = occupancy(mesh_lr, pool, return_winding=True)
        try:
            hr, hr_idx = label_hr(pool, mesh_hr, n, camera, rng, occ_hr, w_hr)
            lr, lr_idx = label_sr(pool, mesh_lr, mesh_hr, n, camera, rng,
                                  occ_hr, w_hr, occ_lr, w_lr)
        except SamplingError:
            if attempt == max_regrow:
                raise
            size *= 2
            continue
        n_uni = int(np.floor(uniform_ratio * size))
        is_uni = np.arange(size) >= size - n_uni
        meta = {
            "pool_size": size,
            "hr_uniform_fraction": float(is_uni[hr_idx].mean()),
            "lr_uniform_fraction": float(is_uni[lr_idx].mean()),
            "lr_n_inside": int(lr.labels.sum()),
            "lr_n_outside": int(n - lr.labels.sum()),
        }
        return SampleSet(hr, lr, size, seed, pool, meta)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# binary file

_HEADER = struct.Struct("<8sIIIQ")


def _block_bytes(s: FieldSamples) -> bytes:
    return (np.asarray(s.positions, "<f4").tobytes() + np.asarray(s.pixels, "<f4").tobytes()
            + np.asarray(s.depths, "<f4").tobytes() + np.asarray(s.labels, "u1").tobytes())


def save_samples(path, ss: SampleSet) -> None:
    """Little-endian: header, then positions/pixels/depths (f32) and labels (u8), hr then lr."""
    head = _HEADER.pack(MAGIC, VERSION, ss.n_pool, ss.n, ss.seed)
    Path(path).write_bytes(head + _block_bytes(ss.hr) + _block_bytes(ss.lr))


def _read_block(data, off, n):
    def take(count, dt):
        nonlocal off
        a = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off += a.nbytes
        return a

    pos = take(3 * n, "<f4").reshape(n, 3).astype(np.float64)
    pix = take(2 * n, "<f4").reshape(n, 2).astype(np.float64)
    dep = take(n, "<f4").astype(np.float64)
    lab = take(n, "u1").copy()
    return FieldSamples(pos, pix, dep, lab), off


def load_samples(path) -> SampleSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated sample file", path=path)
    magic, version, n_pool, n, seed = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad sample-file magic", path=path)
    if version != VERSION:
        raise FormatError(f"unsupported sample-file version {version}", path=path)
    expected = _HEADER.size + 2 * n * (6 * 4 + 1)
    if len(data) != expected:
        raise FormatError(f"sample file size {len(data)} != {expected}", path=path)
    hr, off = _read_block(data, _HEADER.size, n)
    lr, _ = _read_block(data, off, n)
    return SampleSet(hr, lr, n_pool, seed)
