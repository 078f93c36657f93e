"""File-based pipeline stages: every stage reads and writes documented artifacts.

Layout under ``work_dir``::

    corpus/            shape_XXX.obj + manifest.json (synthetic corpus)
    meshes/hr, lr/     normalized HR meshes and their decimations; prepare.json
    images/            <name>_gt.png (2 N_I) and <name>_lr.png (N_I)
    samples/           <name>.bin sample sets (training shapes only)
    model.bin          checkpoint; train_log.csv
    recon/             <name>.obj reconstructions of the test shapes
    report.json        EvalReport
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import BumpConfig, read_manifest, synth_corpus
from .decimate import decimate
from .errors import SursError, ValidationError
from .mesh import check_watertight, load_mesh, normalize_to_unit, save_mesh
from .metrics import EvalReport, evaluate
from .model import EncoderConfig, desk_mlps, load_checkpoint, save_checkpoint
from .reconstruct import DEFAULT_EXTENT, reconstruct
from .render import (OrthoCamera, bicubic_downscale, load_color_png, rasterize,
                     save_color_png)
from .sampler import DEFAULT_SIGMA, DEFAULT_UNIFORM_RATIO, build_sample_set, load_samples, save_samples
from .train import TrainConfig, TrainItem, build_model, train, write_log_csv

log = logging.getLogger(__name__)

STAGES = ("synth-corpus", "prepare", "render-dataset", "sample", "train", "reconstruct", "evaluate")


class StageError(SursError):
    def __init__(self, stage, path, cause):
        self.stage, self.path, self.cause = stage, path, cause
        super().__init__(f"stage {stage} failed ({path}): {cause}")


@dataclass
class PipelineConfig:
    work_dir: str = "work"
    mesh_dir: str = None          # external OBJ directory with manifest.json; None = synthesize
    n_shapes: int = 20
    n_test: int = 4
    bumps: dict = field(default_factory=dict)
    camera: dict = field(default_factory=lambda: {"view": [0, 0, -1], "up": [0, 1, 0], "window": 1.2})
    n_i: int = 64
    decimation_target: int = 320
    n_total: int = 2400
    n_points: int = 600
    sigma: float = DEFAULT_SIGMA
    uniform_ratio: float = DEFAULT_UNIFORM_RATIO
    encoder: dict = field(default_factory=dict)
    mlp_hidden: list = field(default_factory=lambda: [128, 64, 32, 16])
    mlp_skips: list = field(default_factory=lambda: [3, 4, 5])
    train: dict = field(default_factory=dict)
    resolution: int = 64
    extent: float = DEFAULT_EXTENT
    eval_samples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.n_i % 8:
            raise ValidationError("N_I must be divisible by 8")
        if min(self.n_shapes, self.n_total, self.n_points, self.decimation_target,
               self.resolution, self.eval_samples) < 1:
            raise ValidationError("all counts must be positive")
        if self.n_points > self.n_total:
            raise ValidationError("N must not exceed N_T")

    # -- derived objects ---------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.work_dir)

    def cam(self) -> OrthoCamera:
        c = dict(self.camera)
        c["size"] = 2 * self.n_i
        return OrthoCamera.from_dict(c)

    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig(**{"n_i": self.n_i, **self.encoder})

    def mlp_cfgs(self):
        return desk_mlps(self.encoder_cfg(), tuple(self.mlp_hidden), tuple(self.mlp_skips))

    def train_cfg(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, "points_per_image": self.n_points,
                                      **self.train})

    def corpus_dir(self) -> Path:
        return Path(self.mesh_dir) if self.mesh_dir else self.root / "corpus"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self, keys) -> str:
        d = asdict(self)
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# which config fields each stage depends on (directly or through earlier stages)
_DEPS = {
    "synth-corpus": ["mesh_dir", "n_shapes", "n_test", "bumps", "seed"],
    "prepare": ["decimation_target"],
    "render-dataset": ["camera", "n_i"],
    "sample": ["n_total", "n_points", "sigma", "uniform_ratio"],
    "train": ["encoder", "mlp_hidden", "mlp_skips", "train"],
    "reconstruct": ["resolution", "extent"],
    "evaluate": ["eval_samples"],
}


def _stage_key(cfg: PipelineConfig, stage: str) -> str:
    keys = []
    for s in STAGES[:STAGES.index(stage) + 1]:
        keys += _DEPS[s]
    return cfg.digest(keys)


def _done(cfg, stage) -> bool:
    marker = cfg.root / ".stages" / stage
    return marker.exists() and marker.read_text() == _stage_key(cfg, stage)


def _mark(cfg, stage):
    d = cfg.root / ".stages"
    d.mkdir(parents=True, exist_ok=True)
    (d / stage).write_text(_stage_key(cfg, stage))


def _names(cfg, split=None):
    m = read_manifest(cfg.corpus_dir())
    if split is None:
        return m["train"] + m["test"]
    return m[split]


# ---------------------------------------------------------------------------
# stages


def stage_synth_corpus(cfg: PipelineConfig) -> dict:
    if cfg.mesh_dir:
        return read_manifest(cfg.mesh_dir)
    return synth_corpus(cfg.corpus_dir(), cfg.n_shapes, cfg.seed, BumpConfig(**cfg.bumps),
                        cfg.n_test)


def stage_prepare(cfg: PipelineConfig) -> dict:
    """Normalize each HR mesh into the unit cube and decimate it."""
    manifest = read_manifest(cfg.corpus_dir())
    upc = manifest.get("units_per_cm", 0.01)
    hr_dir, lr_dir = cfg.root / "meshes" / "hr", cfg.root / "meshes" / "lr"
    hr_dir.mkdir(parents=True, exist_ok=True)
    lr_dir.mkdir(parents=True, exist_ok=True)
    info = {}
    for name in _names(cfg):
        src = cfg.corpus_dir() / f"{name}.obj"
        mesh, xf = normalize_to_unit(load_mesh(src, upc))
        wt = check_watertight(mesh)
        if not wt.ok:
            log.warning("%s is not watertight: %s", src, wt)
        lr, dinfo = decimate(mesh, cfg.decimation_target, return_info=True)
        save_mesh(mesh, hr_dir / f"{name}.obj")
        save_mesh(lr, lr_dir / f"{name}.obj")
        info[name] = {"units_per_cm": mesh.units_per_cm, "scale": xf.scale,
                      "hr_faces": mesh.n_faces, "lr_faces": lr.n_faces,
                      "lr_watertight": bool(dinfo.watertight)}
    (cfg.root / "meshes" / "prepare.json").write_text(json.dumps(info, indent=2))
    return info


def _prepared(cfg):
    return json.loads((cfg.root / "meshes" / "prepare.json").read_text())


def _mesh(cfg, kind, name):
    return load_mesh(cfg.root / "meshes" / kind / f"{name}.obj",
                     _prepared(cfg)[name]["units_per_cm"])


def stage_render_dataset(cfg: PipelineConfig):
    cam = cfg.cam()
    out = cfg.root / "images"
    out.mkdir(parents=True, exist_ok=True)
    for name in _names(cfg):
        gt = rasterize(_mesh(cfg, "hr", name), cam).color
        save_color_png(out / f"{name}_gt.png", gt)
        save_color_png(out / f"{name}_lr.png", bicubic_downscale(gt))


def stage_sample(cfg: PipelineConfig):
    cam = cfg.cam().resized(cfg.n_i)
    out = cfg.root / "samples"
    out.mkdir(parents=True, exist_ok=True)
    for k, name in enumerate(_names(cfg, "train")):
        ss = build_sample_set(_mesh(cfg, "hr", name), _mesh(cfg, "lr", name), cam,
                              cfg.n_total, cfg.n_points, cfg.seed * 1000 + k,
                              cfg.sigma, cfg.uniform_ratio)
        save_samples(out / f"{name}.bin", ss)


def load_items(cfg: PipelineConfig, names=None):
    names = names or _names(cfg, "train")
    img = cfg.root / "images"
    return [TrainItem.from_samples(load_color_png(img / f"{n}_lr.png"),
                                   load_color_png(img / f"{n}_gt.png"),
                                   load_samples(cfg.root / "samples" / f"{n}.bin"))
            for n in names]


def stage_train(cfg: PipelineConfig, on_epoch=None):
    tc = cfg.train_cfg()
    mr, sr = cfg.mlp_cfgs()
    model = build_model(tc, cfg.encoder_cfg(), mr, sr)
    res = train(load_items(cfg), tc, model, on_epoch)
    save_checkpoint(cfg.root / "model.bin", res.model, {"train": json.loads(tc.to_json())})
    write_log_csv(cfg.root / "train_log.csv", res.log)
    return res


def stage_reconstruct(cfg: PipelineConfig):
    """Only the LR image and the checkpoint are read here."""
    model = load_checkpoint(cfg.root / "model.bin")
    out = cfg.root / "recon"
    out.mkdir(parents=True, exist_ok=True)
    for name in _names(cfg, "test"):
        lr = load_color_png(cfg.root / "images" / f"{name}_lr.png")
        mesh = reconstruct(lr, model, cfg.resolution, cfg.cam(), cfg.extent)
        save_mesh(mesh, out / f"{name}.obj")


def stage_evaluate(cfg: PipelineConfig) -> EvalReport:
    names = _names(cfg, "test")
    pairs = []
    for name in names:
        gt = _mesh(cfg, "hr", name)
        rec = load_mesh(cfg.root / "recon" / f"{name}.obj", gt.units_per_cm)
        pairs.append((rec, gt))
    rep = evaluate(pairs, cfg.cam(), cfg.eval_samples, cfg.seed, names)
    (cfg.root / "report.json").write_text(rep.to_json())
    return rep


_RUN = {
    "synth-corpus": stage_synth_corpus,
    "prepare": stage_prepare,
    "render-dataset": stage_render_dataset,
    "sample": stage_sample,
    "train": stage_train,
    "reconstruct": stage_reconstruct,
    "evaluate": stage_evaluate,
}

_OUTPUT = {
    "synth-corpus": "corpus", "prepare": "meshes", "render-dataset": "images",
    "sample": "samples", "train": "model.bin", "reconstruct": "recon", "evaluate": "report.json",
}


def run_stage(cfg: PipelineConfig, stage: str, resume: bool = True):
    """Run one stage unless a marker shows it already ran with this configuration."""
    if resume and _done(cfg, stage):
        log.info("stage %s up to date", stage)
        return None
    log.info("stage %s", stage)
    try:
        result = _RUN[stage](cfg)
    except SursError as e:
        if isinstance(e, StageError):
            raise
        path = cfg.corpus_dir() if stage == "synth-corpus" else cfg.root / _OUTPUT[stage]
        raise StageError(stage, path, e) from e
    _mark(cfg, stage)
    return result


def run_pipeline(cfg: PipelineConfig, resume: bool = True) -> EvalReport:
    cfg.root.mkdir(parents=True, exist_ok=True)
    (cfg.root / "config.json").write_text(cfg.to_json())
    for stage in STAGES[:-1]:
        run_stage(cfg, stage, resume)
    rep = run_stage(cfg, "evaluate", resume)
    if rep is None:
        rep = EvalReport.from_dict(json.loads((cfg.root / "report.json").read_text()))
    return rep


def share_upstream(src: PipelineConfig, dst: PipelineConfig, upto: str):
    """Reuse ``src``'s artifacts for the stages up to ``upto`` inside ``dst``'s work dir."""
    for stage in STAGES[:STAGES.index(upto) + 1]:
        if _stage_key(src, stage) != _stage_key(dst, stage) or not _done(src, stage):
            return
        out = _OUTPUT[stage]
        s, d = src.root / out, dst.root / out
        if stage == "synth-corpus" and src.mesh_dir:
            _mark(dst, stage)
            continue
        if s.is_dir():
            shutil.copytree(s, d, dirs_exist_ok=True)
        else:
            d.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(s, d)
        _mark(dst, stage)

