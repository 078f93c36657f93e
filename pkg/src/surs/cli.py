"""Command-line entry point: ``surs <subcommand> [options]``.

Exit codes: 0 success, 2 validation error, 3 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


def _set_threads(n):
    # must happen before numpy loads its BLAS
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _parser():
    p = argparse.ArgumentParser(prog="surs", description="Single-image super-resolution shape reconstruction.")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth-corpus", help="generate bumpy closed meshes and a split manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-shapes", type=int, default=20)
    s.add_argument("--n-test", type=int)
    s.add_argument("--amplitude", type=float)

    for name, hlp in (("prepare", "normalize and decimate the corpus"),
                      ("render-dataset", "render GT images and their bicubic LR inputs"),
                      ("sample", "build labeled point sets"),
                      ("train", "train the network")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--work", help="work directory (overrides the config)")
        s.add_argument("--force", action="store_true", help="rerun even if up to date")
        if name == "prepare":
            s.add_argument("--target-faces", type=int, help="decimation target (overrides the config)")

    s = sub.add_parser("reconstruct", help="LR image + checkpoint -> mesh")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--camera", help="camera JSON (default: front view, window 1.2)")

    s = sub.add_parser("evaluate", help="compare a reconstruction with its ground truth")
    s.add_argument("--rec", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--camera", help="camera JSON")
    s.add_argument("--samples", type=int, default=10000)
    s.add_argument("--units-per-cm", type=float, default=0.01)
    s.add_argument("--out", help="write the report here as well as to stdout")

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    s.add_argument("--tol", type=float, default=1e-3)

    s = sub.add_parser("pipeline", help="run every stage and print the report")
    s.add_argument("--work", help="work directory (overrides the config)")
    s.add_argument("--arch")
    s.add_argument("--force", action="store_true")
    return p


def _camera(path):
    from .render import OrthoCamera
    if not path:
        return OrthoCamera()
    return OrthoCamera.from_dict(json.loads(Path(path).read_text()))


def _pipeline_config(args):
    from .pipeline import PipelineConfig
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "work", None):
        d["work_dir"] = args.work
    if getattr(args, "target_faces", None):
        d["decimation_target"] = args.target_faces
    if getattr(args, "arch", None):
        d["train"] = {**d.get("train", {}), "arch": args.arch}
    return PipelineConfig.from_dict(d)


def _run(args) -> int:
    from . import pipeline as pl
    if args.cmd == "synth-corpus":
        from .corpus import BumpConfig, synth_corpus
        bumps = {} if args.amplitude is None else {"amplitude": args.amplitude}
        m = synth_corpus(args.out, args.n_shapes, args.seed or 0, BumpConfig(**bumps), args.n_test)
        print(json.dumps({"train": len(m["train"]), "test": len(m["test"])}))
    elif args.cmd in ("prepare", "render-dataset", "sample", "train"):
        cfg = _pipeline_config(args)
        cfg.root.mkdir(parents=True, exist_ok=True)
        if args.cmd == "prepare":
            pl.run_stage(cfg, "synth-corpus")
        pl.run_stage(cfg, args.cmd, resume=not args.force)
    elif args.cmd == "reconstruct":
        from .mesh import save_mesh
        from .model import load_checkpoint
        from .reconstruct import reconstruct
        from .render import load_color_png
        cam = _camera(args.camera)
        mesh = reconstruct(load_color_png(args.image), load_checkpoint(args.ckpt), args.res, cam)
        save_mesh(mesh, args.out)
        print(json.dumps({"vertices": mesh.n_vertices, "faces": mesh.n_faces}))
    elif args.cmd == "evaluate":
        from .mesh import load_mesh
        from .metrics import evaluate
        rec = load_mesh(args.rec, args.units_per_cm)
        gt = load_mesh(args.gt, args.units_per_cm)
        rep = evaluate([(rec, gt)], _camera(args.camera), args.samples, args.seed or 0,
                       [Path(args.gt).stem])
        if args.out:
            Path(args.out).write_text(rep.to_json())
        print(rep.to_json())
    elif args.cmd == "gradcheck":
        from .train import grad_check_all
        ok = True
        for label, rep in grad_check_all(seed=args.seed or 0, tolerance=args.tol).items():
            worst = max(rep.max_rel_error.values())
            ok &= rep.passed
            print(f"{label:6s} {'PASS' if rep.passed else 'FAIL'} max rel err {worst:.2e} "
                  + " ".join(f"{g}={e:.1e}" for g, e in rep.max_rel_error.items()))
        return EXIT_OK if ok else EXIT_FAIL
    elif args.cmd == "pipeline":
        rep = pl.run_pipeline(_pipeline_config(args), resume=not args.force)
        print(rep.to_json())
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import DivergenceError, ValidationError
    from .pipeline import StageError
    try:
        return _run(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e.cause, DivergenceError):
            return EXIT_DIVERGED
        return EXIT_INVALID if isinstance(e.cause, ValidationError) else EXIT_FAIL
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
