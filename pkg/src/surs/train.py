"""Losses, training schedules, and finite-difference gradient verification."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, ValidationError
from .model import ARCHS, EncoderConfig, MlpConfig, Model, desk_mlps

log = logging.getLogger(__name__)

TERMS = ("rec", "mr", "sr", "diff")
SCHEDULES = ("end_to_end", "sep_all", "rec_then_mlps", "recmr_then_sr")

# (loss terms optimized, parameter groups updated) per phase
_PHASES = {
    "end_to_end": [({"rec", "mr", "sr", "diff"}, {"encoder", "recon", "mr", "sr"})],
    "sep_all": [({"rec"}, {"encoder", "recon"}), ({"mr"}, {"mr"}), ({"sr", "diff"}, {"sr"})],
    "rec_then_mlps": [({"rec"}, {"encoder", "recon"}),
                      ({"mr", "sr", "diff"}, {"mr", "sr"})],
    "recmr_then_sr": [({"rec", "mr"}, {"encoder", "recon", "mr"}), ({"sr", "diff"}, {"sr"})],
}

_ARCH_TERMS = {
    "full": set(TERMS),
    "no_unet": {"mr", "sr", "diff"},
    "only_mr": {"rec", "mr"},
    "only_sr": {"rec", "sr"},
    "no_ldiff": {"rec", "mr", "sr"},
}


# ---------------------------------------------------------------------------
# losses


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def _const_like(x, like):
    return ad.constant(np.asarray(x), dtype=like.dtype)


def _result(t, tensors_in):
    return t if tensors_in else float(t.data)


def _check_same(a, b, what):
    if tuple(np.shape(a.data)) != tuple(np.shape(b)):
        raise ValidationError(f"{what}: shape mismatch {np.shape(a.data)} vs {np.shape(b)}")


def loss_rec(i_sr, i_gt):
    """Mean absolute error over every pixel and channel."""
    tin = isinstance(i_sr, ad.Tensor)
    s = _as_tensor(i_sr)
    _check_same(s, i_gt, "loss_rec")
    return _result(ad.mean(ad.absolute(ad.sub(s, _const_like(i_gt, s)))), tin)


def _mse(pred, labels, what):
    tin = isinstance(pred, ad.Tensor)
    p = _as_tensor(pred)
    _check_same(p, labels, what)
    return _result(ad.mean(ad.square(ad.sub(p, _const_like(labels, p)))), tin)


def loss_mr(s_mr, f_hr):
    return _mse(s_mr, f_hr, "loss_mr")


def loss_sr(s_sr, f_sr):
    return _mse(s_sr, f_sr, "loss_sr")


def loss_diff(s_mr, s_sr, f_hr, f_sr):
    """Mean squared mismatch between label difference and prediction difference."""
    tin = isinstance(s_mr, ad.Tensor) or isinstance(s_sr, ad.Tensor)
    a, b = _as_tensor(s_mr), _as_tensor(s_sr)
    n = a.shape[0]
    if not (b.shape[0] == n == len(f_hr) == len(f_sr)):
        raise ValidationError("loss_diff: all four vectors must have equal length")
    target = np.asarray(f_hr, dtype=np.float64) - np.asarray(f_sr, dtype=np.float64)
    out = ad.mean(ad.square(ad.sub(_const_like(target, a), ad.sub(a, b))))
    return _result(out, tin)


@dataclass
class LossBreakdown:
    l_rec: float = 0.0
    l_mr: float = 0.0
    l_sr: float = 0.0
    l_diff: float = 0.0

    @property
    def total(self) -> float:
        return self.l_rec + self.l_mr + self.l_sr + self.l_diff

    def row(self):
        return [self.l_rec, self.l_mr, self.l_sr, self.l_diff, self.total]


# ---------------------------------------------------------------------------
# configuration and data


@dataclass
class TrainConfig:
    schedule: str = "end_to_end"
    arch: str = "full"
    epochs: int = 200
    batch_size: int = 4
    points_per_image: int = 600
    lr: float = 1e-3
    lr_decay: str = "cosine"     # per-epoch schedule within each phase: "cosine" or "none"
    seed: int = 0
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    diff_pairing: str = "index"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown arch {self.arch!r}")
        if self.lr_decay not in ("cosine", "none"):
            raise ValidationError("lr_decay must be 'cosine' or 'none'")
        if self.diff_pairing not in ("index", "colocated"):
            raise ValidationError("diff_pairing must be 'index' or 'colocated'")
        if min(self.epochs, self.batch_size, self.points_per_image) < 1 or not self.lr > 0:
            raise ValidationError("epochs, batch size, points and lr must be positive")
        w = {t: 1.0 for t in TERMS}
        w.update(self.weights or {})
        self.weights = w

    def lr_at(self, k: int) -> float:
        """Learning rate for epoch k (0-based) of a phase."""
        if self.lr_decay == "none":
            return self.lr
        return self.lr * 0.5 * (1 + np.cos(np.pi * k / self.epochs))

    def enabled_terms(self):
        return set(_ARCH_TERMS[self.arch])

    def phases(self):
        out = []
        for terms, groups in _PHASES[self.schedule]:
            t = terms & self.enabled_terms()
            if t:
                out.append((t, groups))
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainItem:
    """One training shape: LR input, GT image, and its sample set."""

    lr_image: np.ndarray   # (N_I, N_I, 3)
    gt_image: np.ndarray   # (2N_I, 2N_I, 3)
    hr_pixels: np.ndarray
    hr_depths: np.ndarray
    hr_labels: np.ndarray
    lr_pixels: np.ndarray
    lr_depths: np.ndarray
    lr_labels: np.ndarray

    @classmethod
    def from_samples(cls, lr_image, gt_image, ss):
        return cls(np.asarray(lr_image), np.asarray(gt_image),
                   ss.hr.pixels, ss.hr.depths, ss.hr.labels.astype(np.float64),
                   ss.lr.pixels, ss.lr.depths, ss.lr.labels.astype(np.float64))


# ---------------------------------------------------------------------------
# one forward pass


def forward_losses(model: Model, items, point_idx, terms, weights=None, pairing="index"):
    """Weighted loss terms (as Tensors) for a batch of items.

    ``point_idx[b]`` selects the sample rows used for item b; the same rows are
    taken from the HR and LR sets so that Eq.-9 pairs stay index-aligned.
    """
    weights = weights or {t: 1.0 for t in TERMS}
    need_mr_hr = bool(terms & {"mr"}) or ("diff" in terms and pairing == "index")
    need_sr = bool(terms & {"sr", "diff"})
    emb = model.encode(np.stack([it.lr_image for it in items]))
    out = {}
    if "rec" in terms:
        gt = np.stack([it.gt_image for it in items]).transpose(0, 3, 1, 2)
        out["rec"] = loss_rec(model.decode_recon(emb), gt)

    def gather(prefix):
        b = np.concatenate([np.full(len(ix), k) for k, ix in enumerate(point_idx)])
        pix = np.concatenate([getattr(it, prefix + "_pixels")[ix] for it, ix in zip(items, point_idx)])
        z = np.concatenate([getattr(it, prefix + "_depths")[ix] for it, ix in zip(items, point_idx)])
        lab = np.concatenate([getattr(it, prefix + "_labels")[ix] for it, ix in zip(items, point_idx)])
        feat, _ = model.features(emb, b, pix)
        return feat, z, lab

    s_mr_hr = None
    if need_mr_hr and model.has_mr:
        feat_hr, z_hr, f_hr = gather("hr")
        s_mr_hr = model.mr_forward(feat_hr, z_hr)
        if "mr" in terms:
            out["mr"] = loss_mr(s_mr_hr, f_hr)
    if need_sr and model.has_sr:
        feat_lr, z_lr, f_sr = gather("lr")
        s_mr_lr = model.mr_forward(feat_lr, z_lr) if model.arch != "only_sr" else None
        s_sr = model.sr_forward(feat_lr, z_lr, s_mr_lr)
        if "sr" in terms:
            out["sr"] = loss_sr(s_sr, f_sr)
        if "diff" in terms and model.has_mr:
            if pairing == "index":
                out["diff"] = loss_diff(s_mr_hr, s_sr, f_hr, f_sr)
            else:
                # both ground truths evaluated on the LR points
                out["diff"] = loss_diff(s_mr_lr, s_sr, f_sr, f_sr)
    weighted = {t: (ad.scale(v, weights[t]) if weights[t] != 1.0 else v) for t, v in out.items()}
    return weighted


def _sum(ts):
    ts = list(ts)
    acc = ts[0]
    for t in ts[1:]:
        acc = ad.add(acc, t)
    return acc


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                continue
            m, v, t = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            g = p.grad
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** t)
            vh = v / (1 - self.b2 ** t)
            p.data = (p.data - self.lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)
            self.state[name] = (m, v, t)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log: list  # rows: (epoch, l_rec, l_mr, l_sr, l_diff, total, wall_seconds)
    phase_bounds: list = field(default_factory=list)


def build_model(config: TrainConfig, encoder: EncoderConfig, mr: MlpConfig = None,
                sr: MlpConfig = None, dtype=np.float32) -> Model:
    if mr is None or sr is None:
        mr, sr = desk_mlps(encoder)
    return Model(encoder, mr, sr, config.arch, config.seed, dtype)


def train(items, config: TrainConfig, model: Model, on_epoch=None) -> TrainResult:
    """Run every phase of the schedule; deterministic given config.seed."""
    if not items:
        raise ValidationError("training set is empty")
    if model.arch != config.arch:
        raise ValidationError("model and config disagree on the architecture")
    rng = np.random.default_rng(config.seed + 1)
    rows, bounds = [], []
    epoch = 0
    t0 = time.perf_counter()
    n_pts = len(items[0].hr_labels)
    ppi = min(config.points_per_image, n_pts)
    for terms, groups in config.phases():
        trainable = model.group_params(*groups)
        for n, p in model.params.items():
            p.requires_grad = n in trainable
        opt = Adam(config.lr)
        bounds.append(epoch)
        for k in range(config.epochs):
            opt.lr = config.lr_at(k)
            last_good = {n: p.data.copy() for n, p in model.params.items()}
            epoch += 1
            order = rng.permutation(len(items))
            sums = dict.fromkeys(TERMS, 0.0)
            for s in range(0, len(order), config.batch_size):
                batch = [items[i] for i in order[s:s + config.batch_size]]
                idx = [np.sort(rng.choice(n_pts, ppi, replace=False)) if ppi < n_pts
                       else np.arange(n_pts) for _ in batch]
                model.zero_grad()
                losses = forward_losses(model, batch, idx, terms, config.weights,
                                        config.diff_pairing)
                loss = _sum(losses.values())
                if not np.isfinite(loss.data):
                    _restore(model, last_good)
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                try:
                    ad.backward(loss, trainable)
                except DivergenceError:
                    _restore(model, last_good)
                    raise
                opt.step(trainable)
                for t, v in losses.items():
                    sums[t] += float(v.data) * len(batch)
            br = LossBreakdown(*(sums[t] / len(items) for t in TERMS))
            row = [epoch, *br.row(), time.perf_counter() - t0]
            rows.append(row)
            log.info("epoch %d rec %.4f mr %.4f sr %.4f diff %.4f total %.4f",
                     epoch, *br.row())
            if on_epoch is not None:
                on_epoch(row)
    for p in model.params.values():
        p.requires_grad = True
    return TrainResult(model, rows, bounds)


def _restore(model, snapshot):
    for n, a in snapshot.items():
        model.params[n].data = a
    for p in model.params.values():
        p.requires_grad = True


LOG_HEADER = ["epoch", "l_rec", "l_mr", "l_sr", "l_diff", "total", "wall_seconds"]


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def read_log_csv(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        next(rd)
        return [[int(r[0])] + [float(x) for x in r[1:]] for r in rd]


# ---------------------------------------------------------------------------
# gradient verification


TINY_ENCODER = EncoderConfig(n_i=16, c_hi=4, c_lo=8, stacks=1, width=4)


def tiny_model(arch="full", seed=0, dtype=np.float64) -> Model:
    mr = MlpConfig((13, 16, 8, 1), (2,))
    sr = MlpConfig((14, 16, 8, 1), (2,))
    return Model(TINY_ENCODER, mr, sr, arch, seed, dtype)


def tiny_batch(model: Model, n_items=2, n_points=4, seed=0, zero_loss=False):
    """Random images and sample points for a tiny model.

    GT images are kept >= 0.2 away from the initial reconstruction so the L1
    kink is never crossed by a finite-difference step.
    """
    rng = np.random.default_rng(seed)
    n = model.encoder_cfg.n_i
    items = []
    for _ in range(n_items):
        lr = rng.random((n, n, 3))
        px = lambda: rng.uniform(0.5, n - 0.5, (n_points, 2))  # noqa: E731
        items.append(TrainItem(lr, np.zeros((2 * n, 2 * n, 3)),
                               px(), rng.uniform(-0.5, 0.5, n_points),
                               rng.integers(0, 2, n_points).astype(np.float64),
                               px(), rng.uniform(-0.5, 0.5, n_points),
                               rng.integers(0, 2, n_points).astype(np.float64)))
    emb = model.encode(np.stack([it.lr_image for it in items]))
    if model.unet:
        sr_img = model.decode_recon(emb).data.transpose(0, 2, 3, 1)
        for k, it in enumerate(items):
            if zero_loss:
                it.gt_image = sr_img[k].astype(np.float64)
            else:
                off = rng.uniform(0.2, 0.5, sr_img[k].shape) * rng.choice([-1, 1], sr_img[k].shape)
                it.gt_image = sr_img[k] + off
    if zero_loss:
        for k, it in enumerate(items):
            b = np.zeros(n_points, dtype=np.int64)
            e1 = model.encode(it.lr_image[None])
            fh, _ = model.features(e1, b, it.hr_pixels)
            fl, _ = model.features(e1, b, it.lr_pixels)
            if model.has_mr:
                it.hr_labels = model.mr_forward(fh, it.hr_depths).data.astype(np.float64)
            s_mr = model.mr_forward(fl, it.lr_depths) if model.arch != "only_sr" else None
            if model.has_sr:
                it.lr_labels = model.sr_forward(fl, it.lr_depths, s_mr).data.astype(np.float64)
    return items


@dataclass
class GradCheckReport:
    terms: tuple
    max_rel_error: dict          # group -> max relative error
    checked: dict                # group -> number of coordinates compared
    tolerance: float = 1e-3
    atol: float = 1e-8

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def failures(self):
        return [g for g, e in self.max_rel_error.items() if not e < self.tolerance]


def analytic_gradients(model, items, terms, pairing="index"):
    idx = [np.arange(len(it.hr_labels)) for it in items]
    model.zero_grad()
    for p in model.params.values():
        p.requires_grad = True
    losses = forward_losses(model, items, idx, terms, pairing=pairing)
    if not losses:
        return 0.0, {n: np.zeros_like(p.data) for n, p in model.params.items()}
    loss = _sum(losses.values())
    ad.backward(loss, model.params)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
             for n, p in model.params.items()}
    return float(loss.data), grads


def _loss_value(model, items, terms, pairing):
    idx = [np.arange(len(it.hr_labels)) for it in items]
    losses = forward_losses(model, items, idx, terms, pairing=pairing)
    return float(sum(float(v.data) for v in losses.values())) if losses else 0.0


def grad_check(model: Model = None, items=None, terms=TERMS, h=1e-5, coords_per_group=64,
               seed=0, tolerance=1e-3, atol=1e-8, pairing="index") -> GradCheckReport:
    """Compare analytic gradients with f64 central differences.

    Per coordinate the error is |a - n| / max(|a|, |n|), or 0 when both are
    below ``atol``.
    """
    model = (model or tiny_model()).astype(np.float64)
    items = items if items is not None else tiny_batch(model, seed=seed)
    terms = set(terms) & _ARCH_TERMS[model.arch]
    _, grads = analytic_gradients(model, items, terms, pairing)
    for p in model.params.values():
        p.requires_grad = False
    rng = np.random.default_rng(seed + 17)
    errs, counts = {}, {}
    for group, names in model.groups().items():
        sizes = np.array([model.params[n].data.size for n in names])
        total_size = int(sizes.sum())
        k = min(coords_per_group, total_size)
        flat = rng.choice(total_size, k, replace=False)
        worst = 0.0
        for f in np.sort(flat):
            j = int(np.searchsorted(np.cumsum(sizes), f, side="right"))
            name = names[j]
            off = f - (np.cumsum(sizes)[j] - sizes[j])
            p = model.params[name]
            orig = p.data.flat[off]
            p.data.flat[off] = orig + h
            fp = _loss_value(model, items, terms, pairing)
            p.data.flat[off] = orig - h
            fm = _loss_value(model, items, terms, pairing)
            p.data.flat[off] = orig
            num = (fp - fm) / (2 * h)
            ana = grads[name].flat[off]
            scale_ = max(abs(num), abs(ana))
            err = 0.0 if scale_ < atol else abs(num - ana) / scale_
            worst = max(worst, err)
        errs[group], counts[group] = worst, k
    for p in model.params.values():
        p.requires_grad = True
    return GradCheckReport(tuple(sorted(terms)), errs, counts, tolerance, atol)


def grad_check_all(seed=0, **kw):
    """Full loss plus every term in isolation; returns {label: report}."""
    out = {"total": grad_check(terms=TERMS, seed=seed, **kw)}
    for t in TERMS:
        out[t] = grad_check(terms=(t,), seed=seed, **kw)
    return out
