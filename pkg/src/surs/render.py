"""Orthographic camera, z-buffer rasterizer, bicubic degradation, image files."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError
from .mesh import TriMesh

DEPTH_MAGIC = b"SURSDEPTH"[:8]

# camera-space directional lights: (direction toward light, RGB intensity)
LIGHTS = (
    ((0.4, 0.5, 1.0), (1.0, 0.9, 0.8)),
    ((-0.6, -0.2, 0.5), (0.3, 0.4, 0.6)),
)
AMBIENT = 0.08


@dataclass(frozen=True)
class OrthoCamera:
    view: tuple = (0.0, 0.0, -1.0)
    up: tuple = (0.0, 1.0, 0.0)
    size: int = 128
    window: float = 1.2

    def __post_init__(self):
        v = np.asarray(self.view, dtype=np.float64)
        u = np.asarray(self.up, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1) > 1e-6 or abs(np.linalg.norm(u) - 1) > 1e-6:
            raise ValidationError("camera view/up must be unit vectors")
        if abs(v @ u) > 1e-6:
            raise ValidationError("camera view must be perpendicular to up")
        if self.size < 8 or self.size % 2:
            raise ValidationError("image size must be even and >= 8")
        if not self.window > 0:
            raise ValidationError("world window must be positive")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.view, self.up)

    def basis(self) -> np.ndarray:
        """Rows: right, up, toward-viewer. Maps world vectors to camera space."""
        return np.stack([self.right, np.asarray(self.up, float), -np.asarray(self.view, float)])

    def resized(self, size: int) -> "OrthoCamera":
        return OrthoCamera(self.view, self.up, size, self.window)

    def to_json(self) -> str:
        return json.dumps({"view": list(self.view), "up": list(self.up),
                           "size": self.size, "window": self.window})

    @classmethod
    def from_dict(cls, d) -> "OrthoCamera":
        return cls(tuple(d.get("view", (0, 0, -1))), tuple(d.get("up", (0, 1, 0))),
                   int(d.get("size", 128)), float(d.get("window", 1.2)))


def project(x, camera: OrthoCamera):
    """World points -> (continuous pixel (col, row), depth along the view)."""
    x = np.asarray(x, dtype=np.float64)
    half = camera.window / 2
    s = camera.size / camera.window
    col = (x @ camera.right + half) * s
    row = (half - x @ np.asarray(camera.up, float)) * s
    z = x @ np.asarray(camera.view, float)
    return np.stack([col, row], axis=-1), z


def unproject(p, z, camera: OrthoCamera):
    p = np.asarray(p, dtype=np.float64)
    half = camera.window / 2
    s = camera.window / camera.size
    a = p[..., 0] * s - half
    b = half - p[..., 1] * s
    return (a[..., None] * camera.right + b[..., None] * np.asarray(camera.up, float)
            + np.asarray(z)[..., None] * np.asarray(camera.view, float))


@dataclass
class Raster:
    color: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    face: np.ndarray = field(repr=False, default=None)


def shade(normals_cam) -> np.ndarray:
    n = np.asarray(normals_cam, dtype=np.float64)
    col = np.full(n.shape[:-1] + (3,), AMBIENT)
    for d, rgb in LIGHTS:
        d = np.asarray(d) / np.linalg.norm(d)
        col = col + np.maximum(n @ d, 0.0)[..., None] * np.asarray(rgb)
    return np.clip(col, 0.0, 1.0)


def rasterize(mesh: TriMesh, camera: OrthoCamera, chunk: int = 4096) -> Raster:
    """Flat-shaded z-buffer render sampled at pixel centers."""
    H = W = camera.size
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    if not mesh.is_empty():
        p, z = project(mesh.vertices, camera)
        tp = p[mesh.faces]  # (F, 3, 2)
        tz = z[mesh.faces]
        best_key = np.full(H * W, np.inf)
        best_face = np.full(H * W, -1, dtype=np.int64)
        for s in range(0, mesh.n_faces, chunk):
            _raster_chunk(tp[s:s + chunk], tz[s:s + chunk], s, H, W, best_key, best_face)
        depth = best_key.reshape(H, W)
        face_id = best_face.reshape(H, W)
    mask = np.isfinite(depth)
    normal = np.zeros((H, W, 3))
    color = np.zeros((H, W, 3))
    if mask.any():
        n_cam = mesh.face_normals() @ camera.basis().T
        normal[mask] = n_cam[face_id[mask]]
        color[mask] = shade(normal[mask])
    return Raster(color, normal, depth, mask, face_id)


def _raster_chunk(tp, tz, base, H, W, best_key, best_face):
    x0, y0 = tp[:, 0, 0], tp[:, 0, 1]
    x1, y1 = tp[:, 1, 0], tp[:, 1, 1]
    x2, y2 = tp[:, 2, 0], tp[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    cmin = np.clip(np.ceil(tp[:, :, 0].min(axis=1) - 0.5), 0, W).astype(np.int64)
    cmax = np.clip(np.floor(tp[:, :, 0].max(axis=1) - 0.5), -1, W - 1).astype(np.int64)
    rmin = np.clip(np.ceil(tp[:, :, 1].min(axis=1) - 0.5), 0, H).astype(np.int64)
    rmax = np.clip(np.floor(tp[:, :, 1].max(axis=1) - 0.5), -1, H - 1).astype(np.int64)
    nc = np.maximum(cmax - cmin + 1, 0)
    nr = np.maximum(rmax - rmin + 1, 0)
    ok = (np.abs(area) > 1e-14) & (nc > 0) & (nr > 0)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return
    cnt = nc[idx] * nr[idx]
    fi = np.repeat(idx, cnt)
    k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    col = cmin[fi] + k % nc[fi]
    row = rmin[fi] + k // nc[fi]
    px, py = col + 0.5, row + 0.5
    inv = 1.0 / area[fi]
    w0 = ((x1[fi] - px) * (y2[fi] - py) - (x2[fi] - px) * (y1[fi] - py)) * inv
    w1 = ((x2[fi] - px) * (y0[fi] - py) - (x0[fi] - px) * (y2[fi] - py)) * inv
    w2 = 1.0 - w0 - w1
    eps = -1e-9
    inside = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
    fi, w0, w1, w2 = fi[inside], w0[inside], w1[inside], w2[inside]
    pix = row[inside] * W + col[inside]
    zz = w0 * tz[fi, 0] + w1 * tz[fi, 1] + w2 * tz[fi, 2]
    gf = fi + base
    # nearest depth wins; equal depth goes to the lowest face index
    order = np.lexsort((gf, zz, pix))
    pix, zz, gf = pix[order], zz[order], gf[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, zz, gf = pix[first], zz[first], gf[first]
    better = (zz < best_key[pix]) | ((zz == best_key[pix]) & (gf < best_face[pix]))
    best_key[pix[better]] = zz[better]
    best_face[pix[better]] = gf[better]


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x, a=-0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def _reflect(j, n):
    if n == 1:
        return np.zeros_like(j)
    period = 2 * (n - 1)
    j = np.mod(j, period)
    return np.where(j < n, j, period - j)


def _resample_matrix(n_in, n_out):
    """Row i holds the weights of output sample i over the input samples."""
    scale = n_in / n_out
    stretch = max(scale, 1.0)  # widen the kernel when minifying
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - 2 * stretch)) + 1
        taps = np.arange(lo, int(np.floor(center + 2 * stretch)) + 1)
        w = cubic_kernel((taps - center) / stretch)
        w = w / w.sum()
        np.add.at(M[i], _reflect(taps, n_in), w)
    return M


def _check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValidationError(f"expected an H x W x C image, got shape {img.shape}")
    return img


def _separable(R, img, C):
    rows = np.tensordot(R, img, axes=(1, 0))             # (Ho, W, ch)
    return np.tensordot(C, rows, axes=(1, 1)).transpose(1, 0, 2)


def bicubic_downscale(image, factor: int = 2) -> np.ndarray:
    """Catmull-Rom (a = -0.5) antialiased downscale with reflect borders."""
    img = _check_image(image)
    H, W = img.shape[:2]
    if factor != 2:
        raise ValidationError("only factor 2 is supported")
    if H % 2 or W % 2:
        raise ValidationError(f"image dimensions must be even, got {H}x{W}")
    R = _resample_matrix(H, H // 2)
    C = _resample_matrix(W, W // 2)
    return np.clip(_separable(R, img, C), 0.0, 1.0)


def bicubic_upscale(image, factor: int = 2) -> np.ndarray:
    img = _check_image(image)
    H, W = img.shape[:2]
    R = _resample_matrix(H, H * factor)
    C = _resample_matrix(W, W * factor)
    return _separable(R, img, C)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ImageTriple:
    """Ground-truth render, its degraded input, and an optional SR prediction."""

    gt: np.ndarray
    lr: np.ndarray
    sr: np.ndarray = None


def render_dataset(meshes, camera: OrthoCamera, n_i: int) -> list:
    cam = camera.resized(2 * n_i)
    out = []
    for m in meshes:
        gt = rasterize(m, cam).color
        out.append(ImageTriple(gt=gt, lr=bicubic_downscale(gt)))
    return out


# ---------------------------------------------------------------------------
# files


def srgb_encode(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y <= 0.04045, y / 12.92, np.power((y + 0.055) / 1.055, 2.4))


def save_color_png(path, color) -> None:
    q = np.round(srgb_encode(color) * 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def load_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        q = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(q)


def _png_chunk(tag, data):
    return (struct.pack(">I", len(data)) + tag + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))


def save_normal_png(path, normal) -> None:
    """16-bit linear RGB PNG with n -> (n + 1) / 2."""
    n = np.asarray(normal, dtype=np.float64)
    H, W = n.shape[:2]
    q = np.round(np.clip((n + 1) / 2, 0, 1) * 65535).astype(">u2")
    raw = b"".join(b"\x00" + q[r].tobytes() for r in range(H))
    ihdr = struct.pack(">IIBBBBB", W, H, 16, 2, 0, 0, 0)
    Path(path).write_bytes(b"\x89PNG\r\n\x1a\n" + _png_chunk(b"IHDR", ihdr)
                           + _png_chunk(b"IDAT", zlib.compress(raw, 9))
                           + _png_chunk(b"IEND", b""))


def load_normal_png(path) -> np.ndarray:
    """Reader for files written by save_normal_png (16-bit RGB, filter 0)."""
    data = Path(path).read_bytes()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError("not a PNG file", path=path)
    pos, idat = 8, b""
    W = H = None
    while pos < len(data):
        (ln,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + ln]
        if tag == b"IHDR":
            W, H, depth, ctype = struct.unpack(">IIBB", body[:10])
            if depth != 16 or ctype != 2:
                raise FormatError("expected a 16-bit RGB PNG", path=path)
        elif tag == b"IDAT":
            idat += body
        pos += 12 + ln
    raw = zlib.decompress(idat)
    stride = 1 + W * 6
    rows = []
    for r in range(H):
        line = raw[r * stride:(r + 1) * stride]
        if line[0] != 0:
            raise FormatError("unsupported PNG filter", path=path)
        rows.append(np.frombuffer(line[1:], dtype=">u2").reshape(W, 3))
    return np.stack(rows).astype(np.float64) / 65535 * 2 - 1


def save_depth(path, depth) -> None:
    """8-byte magic, u32 height, u32 width, then little-endian f32 rows."""
    d = np.asarray(depth, dtype="<f4")
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", *d.shape) + d.tobytes())


def load_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != DEPTH_MAGIC:
        raise FormatError("bad depth magic", path=path)
    H, W = struct.unpack_from("<II", data, 8)
    return np.frombuffer(data, dtype="<f4", offset=16, count=H * W).reshape(H, W).copy()
