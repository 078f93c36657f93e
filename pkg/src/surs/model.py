"""Dual-resolution image encoder, reconstruction head, and the two occupancy MLPs."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ValidationError

LEAKY_SLOPE = 0.01
ARCHS = ("full", "no_unet", "only_mr", "only_sr", "no_ldiff")

CKPT_MAGIC = b"SURSCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_i: int = 64
    c_hi: int = 16
    c_lo: int = 32
    stacks: int = 2
    width: int = 16

    def __post_init__(self):
        if self.n_i % 8 or self.n_i < 8:
            raise ValidationError("N_I must be a positive multiple of 8")
        if min(self.c_hi, self.c_lo, self.width) < 1 or self.stacks < 0:
            raise ValidationError("encoder channel counts must be positive")

    @property
    def embed_dim(self) -> int:
        return self.c_hi + self.c_lo

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(n_i=256, c_hi=64, c_lo=256, stacks=3, width=64)


@dataclass(frozen=True)
class MlpConfig:
    widths: tuple
    skips: tuple = ()

    def __post_init__(self):
        w = tuple(int(x) for x in self.widths)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "skips", tuple(sorted(int(s) for s in self.skips)))
        if len(w) < 2 or w[-1] != 1:
            raise ValidationError("MLP widths need an input width and a final width of 1")
        if any(s < 2 or s > len(w) - 1 for s in self.skips):
            raise ValidationError(f"skip layers must lie in 2..{len(w) - 1}")

    def layer_inputs(self):
        """Effective input width of each linear layer (1-based layer k = index k-1)."""
        return [self.widths[k - 1] + (self.widths[0] if k in self.skips else 0)
                for k in range(1, len(self.widths))]

    @classmethod
    def full_scale_mr(cls):
        return cls((321, 1024, 512, 256, 128, 1), (3, 4, 5))

    @classmethod
    def full_scale_sr(cls):
        return cls((322, 1024, 512, 256, 128, 1), (3, 4, 5))


def desk_mlps(enc: EncoderConfig, hidden=(128, 64, 32, 16), skips=(3, 4, 5)):
    d = enc.embed_dim
    return MlpConfig((d + 1, *hidden, 1), skips), MlpConfig((d + 2, *hidden, 1), skips)


@dataclass
class Embedding:
    hi: ad.Tensor
    lo: ad.Tensor
    hi_scale: int

    @property
    def batch(self) -> int:
        return self.hi.shape[0]


class Model:
    """All trainable parameters plus the forward computations that use them.

    ``params`` is an ordered name -> Tensor map; names are prefixed with their
    group (``encoder``, ``recon``, ``mr``, ``sr``).
    """

    def __init__(self, encoder: EncoderConfig, mr: MlpConfig, sr: MlpConfig,
                 arch: str = "full", seed: int = 0, dtype=np.float32):
        if arch not in ARCHS:
            raise ValidationError(f"unknown arch {arch!r}")
        self.encoder_cfg = encoder
        self.arch = arch
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        d = encoder.embed_dim
        if arch == "only_sr":
            sr = MlpConfig((d + 1, *sr.widths[1:]), sr.skips)
        self.mr_cfg = mr
        self.sr_cfg = sr
        if mr.widths[0] != d + 1:
            raise ValidationError(f"MR-MLP input width {mr.widths[0]} != {d} + 1")
        if sr.widths[0] != d + (1 if arch == "only_sr" else 2):
            raise ValidationError(f"SR-MLP input width {sr.widths[0]} does not match embedding")
        self.params = {}
        self._build(np.random.default_rng(self.seed))

    # -- construction -----------------------------------------------------

    @property
    def unet(self) -> bool:
        return self.arch != "no_unet"

    @property
    def has_mr(self) -> bool:
        return self.arch != "only_sr"

    @property
    def has_sr(self) -> bool:
        return self.arch != "only_mr"

    def _add(self, name, shape, fan_in, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)
        self.params[name] = ad.parameter(w, name)

    def _zeros(self, name, shape):
        self.params[name] = ad.parameter(np.zeros(shape, dtype=self.dtype), name)

    def _conv(self, name, cin, cout, rng, k=3):
        self._add(name + ".w", (cout, cin, k, k), cin * k * k, rng)
        self._zeros(name + ".b", (cout,))

    def _build(self, rng):
        e = self.encoder_cfg
        w = e.width
        self._conv("encoder.conv_in", 3, w, rng)
        self._conv("encoder.down", w, 2 * w, rng)
        self._conv("encoder.lo_in", 2 * w, e.c_lo, rng)
        for s in range(e.stacks):
            self._conv(f"encoder.block{s}.a", e.c_lo, e.c_lo, rng)
            self._conv(f"encoder.block{s}.b", e.c_lo, e.c_lo, rng)
        self._conv("encoder.up1", 3 * w, w, rng)
        if self.unet:
            self._conv("encoder.up2", w, e.c_hi, rng)
        else:
            self._conv("encoder.flat", w, e.c_hi, rng)
        self._conv("encoder.hi_out", e.c_hi, e.c_hi, rng)
        if self.unet:
            self._conv("recon.conv", e.c_hi, 3, rng)
        for tag, cfg, present in (("mr", self.mr_cfg, self.has_mr), ("sr", self.sr_cfg, self.has_sr)):
            if not present:
                continue
            for k, (fin, fout) in enumerate(zip(cfg.layer_inputs(), cfg.widths[1:]), 1):
                self._add(f"{tag}.l{k}.w", (fin, fout), fin, rng)
                self._zeros(f"{tag}.l{k}.b", (fout,))

    def groups(self):
        out = {}
        for name in self.params:
            out.setdefault(name.split(".")[0], []).append(name)
        return out

    def group_params(self, *groups):
        return {n: p for n, p in self.params.items() if n.split(".")[0] in groups}

    def astype(self, dtype) -> "Model":
        m = Model.__new__(Model)
        m.__dict__.update(self.__dict__)
        m.dtype = np.dtype(dtype)
        m.params = {n: ad.parameter(p.data.astype(dtype), n) for n, p in self.params.items()}
        return m

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder_cfg),
            "mr": {"widths": list(self.mr_cfg.widths), "skips": list(self.mr_cfg.skips)},
            "sr": {"widths": list(self.sr_cfg.widths), "skips": list(self.sr_cfg.skips)},
            "arch": self.arch,
            "seed": self.seed,
        }

    # -- forward ----------------------------------------------------------

    def _c(self, x, name, stride=1):
        P = self.params
        return ad.conv2d(x, P[name + ".w"], P[name + ".b"], stride)

    def encode(self, images) -> Embedding:
        """images: (B, N_I, N_I, 3) in [0, 1] -> hi (2N_I or N_I) and lo (N_I/2) grids."""
        img = np.asarray(images)
        if img.ndim == 3:
            img = img[None]
        n = self.encoder_cfg.n_i
        if img.shape[1:] != (n, n, 3):
            raise ValidationError(f"expected images of shape (B, {n}, {n}, 3), got {img.shape}")
        lrelu = ad.leaky_relu
        x = ad.constant(np.ascontiguousarray(img.transpose(0, 3, 1, 2)), dtype=self.dtype)
        f0 = lrelu(self._c(x, "encoder.conv_in"), LEAKY_SLOPE)
        f1 = lrelu(self._c(f0, "encoder.down", stride=2), LEAKY_SLOPE)

        lo = lrelu(self._c(f1, "encoder.lo_in"), LEAKY_SLOPE)
        for s in range(self.encoder_cfg.stacks):
            h = lrelu(self._c(lo, f"encoder.block{s}.a"), LEAKY_SLOPE)
            lo = lrelu(ad.add(lo, self._c(h, f"encoder.block{s}.b")), LEAKY_SLOPE)

        u = ad.concat([ad.upsample2x(f1), f0], axis=1)
        u = lrelu(self._c(u, "encoder.up1"), LEAKY_SLOPE)
        if self.unet:
            u = lrelu(self._c(ad.upsample2x(u), "encoder.up2"), LEAKY_SLOPE)
        else:
            u = lrelu(self._c(u, "encoder.flat"), LEAKY_SLOPE)
        hi = self._c(u, "encoder.hi_out")
        return Embedding(hi, lo, 2 if self.unet else 1)

    def decode_recon(self, emb: Embedding) -> ad.Tensor:
        """(B, 3, 2N_I, 2N_I) image predicted from the hi features."""
        if not self.unet:
            raise ValidationError("the no_unet architecture has no reconstruction head")
        return self._c(emb.hi, "recon.conv")

    def features(self, emb: Embedding, batch, pixels):
        """Pixel-aligned embedding rows (hi then lo) and an in-view mask."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        batch = np.broadcast_to(np.asarray(batch), (len(pixels),))
        n = self.encoder_cfg.n_i
        valid = np.all((pixels >= 0) & (pixels < n), axis=1)
        vm = valid.astype(np.float64)
        s = emb.hi_scale
        fh = ad.bilinear_sample(emb.hi, batch, pixels[:, 0] * s - 0.5, pixels[:, 1] * s - 0.5, vm)
        fl = ad.bilinear_sample(emb.lo, batch, pixels[:, 0] * 0.5 - 0.5, pixels[:, 1] * 0.5 - 0.5, vm)
        return ad.concat([fh, fl], axis=1), valid

    def _mlp(self, tag, cfg, x):
        raw = x
        h = x
        n_layers = len(cfg.widths) - 1
        for k in range(1, n_layers + 1):
            if k in cfg.skips:
                h = ad.concat([h, raw], axis=1)
            h = ad.linear(h, self.params[f"{tag}.l{k}.w"], self.params[f"{tag}.l{k}.b"])
            h = ad.leaky_relu(h, LEAKY_SLOPE) if k < n_layers else ad.sigmoid(h)
        return ad.reshape(h, (h.shape[0],))

    def _col(self, z):
        z = z if isinstance(z, ad.Tensor) else ad.constant(np.asarray(z), dtype=self.dtype)
        return ad.reshape(z, (z.shape[0], 1))

    def mr_forward(self, feat, z) -> ad.Tensor:
        if not self.has_mr:
            raise ValidationError("architecture has no MR-MLP")
        x = ad.concat([feat, self._col(z)], axis=1)
        if x.shape[1] != self.mr_cfg.widths[0]:
            raise ValidationError(f"MR-MLP input width {x.shape[1]} != {self.mr_cfg.widths[0]}")
        return self._mlp("mr", self.mr_cfg, x)

    def sr_forward(self, feat, z, s_mr=None) -> ad.Tensor:
        if not self.has_sr:
            raise ValidationError("architecture has no SR-MLP")
        cols = [feat, self._col(z)]
        if self.arch != "only_sr":
            if s_mr is None:
                raise ValidationError("SR-MLP needs the MR estimate")
            cols.append(self._col(s_mr))
        x = ad.concat(cols, axis=1)
        if x.shape[1] != self.sr_cfg.widths[0]:
            raise ValidationError(f"SR-MLP input width {x.shape[1]} != {self.sr_cfg.widths[0]}")
        return self._mlp("sr", self.sr_cfg, x)

    def field(self, feat, z) -> ad.Tensor:
        """The final occupancy estimate for this architecture."""
        if self.arch == "only_mr":
            return self.mr_forward(feat, z)
        if self.arch == "only_sr":
            return self.sr_forward(feat, z)
        return self.sr_forward(feat, z, self.mr_forward(feat, z))


def index_embedding(hi, lo, p, n_i, hi_scale=2):
    """Bilinear lookup of one (H, W, C) hi grid and one lo grid at an input-image pixel.

    Returns (feature vector, in_view flag); out-of-view pixels give zeros.
    """
    p = np.asarray(p, dtype=np.float64)
    if not (0 <= p[0] < n_i and 0 <= p[1] < n_i):
        return np.zeros(hi.shape[-1] + lo.shape[-1]), False
    out = []
    for grid, s in ((hi, hi_scale), (lo, 0.5)):
        g = ad.Tensor(np.asarray(grid, dtype=np.float64).transpose(2, 0, 1)[None])
        out.append(ad.bilinear_sample(g, [0], [p[0] * s - 0.5], [p[1] * s - 0.5]).data[0])
    return np.concatenate(out), True


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: dict = None) -> None:
    """Magic, u32 version, u32 config length + UTF-8 JSON, u32 array count, arrays.

    Each array: u16 name length, name, u8 rank, u32 dims, little-endian f32 data.
    """
    cfg = model.config_dict()
    if extra:
        cfg["extra"] = extra
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        a = np.asarray(p.data, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
                     + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float32) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", path=path)
    version, n = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path)
    cfg = json.loads(data[16:16 + n].decode("utf-8"))
    off = 16 + n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + ln].decode("utf-8")
        off += 2 + ln
        (rank,) = struct.unpack_from("<B", data, off)
        dims = struct.unpack_from(f"<{rank}I", data, off + 1)
        off += 1 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(data, "<f4", size, off).reshape(dims)
        off += 4 * size
    model = Model(EncoderConfig(**cfg["encoder"]), MlpConfig(**cfg["mr"]), MlpConfig(**cfg["sr"]),
                  cfg["arch"], cfg["seed"], dtype)
    if set(arrays) != set(model.params):
        raise FormatError("checkpoint parameters do not match its config", path=path)
    for name, a in arrays.items():
        if a.shape != model.params[name].shape:
            raise FormatError(f"shape mismatch for {name}", path=path)
        model.params[name] = ad.parameter(a.astype(dtype), name)
    if not all(np.all(np.isfinite(p.data)) for p in model.params.values()):
        raise ValidationError(f"{path}: checkpoint has non-finite parameters")
    return model
