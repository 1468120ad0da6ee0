"""Command-line entry point: ``headsplat <command> ...``.

Exit codes: 0 success, 2 invalid input, 1 internal failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .headmodel import HeadModelError, HeadParams
from .io import read_json, write_json, write_png
from .rasterizer import Camera, CameraError

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _load_avatar(path):
    from .trainer import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _load_dataset(path):
    from .synth import read_dataset

    root = Path(path)
    for name in ("cams.json", "params_init.json", "split.json", "head.ghm"):
        if not (root / name).is_file():
            raise UsageError(f"dataset {root} is missing {name}")
    return read_dataset(root)


def cmd_gen_data(args):
    from .synth import SceneSpec, generate_scene, render_dataset, spec_from_json, write_dataset

    spec = spec_from_json(read_json(args.spec)) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    ds = render_dataset(generate_scene(spec))
    write_dataset(ds, args.out)
    print(f"wrote {ds.frames.shape[0]} timestamps x {ds.frames.shape[1]} views to {args.out}")


def cmd_train(args):
    from .trainer import TrainConfig, load_config, save_checkpoint, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    cfg.validate()
    ds = _load_dataset(args.data)
    log = args.log or str(Path(args.out).with_suffix(".csv"))
    every = max(1, cfg.iterations // 20)

    def progress(row):
        if not args.quiet and row["iteration"] % every == 0:
            print(f"iter {row['iteration']:6d}  t={row['t']:3d} view={row['view']}  total={row['total']:.5f}",
                  flush=True)

    av, _ = train(cfg, ds, log_path=log, progress=progress)
    save_checkpoint(av, args.out)
    print(f"checkpoint {args.out}; loss log {log}")


def cmd_render(args):
    from .trainer import render_novel_view

    av = _load_avatar(args.ckpt)
    if not 0 <= args.view < len(av.cameras):
        raise UsageError(f"view {args.view} outside 0..{len(av.cameras) - 1}")
    if not 0 <= args.t < av.timestamps:
        raise UsageError(f"timestamp {args.t} outside 0..{av.timestamps - 1}")
    img = render_novel_view(av, args.t, av.cameras[args.view], view=args.view)
    write_png(args.out, img)
    print(f"wrote {args.out}")


def cmd_reenact(args):
    from .trainer import reenact

    av = _load_avatar(args.ckpt)
    driving = read_json(args.driving)
    if isinstance(driving, dict):
        driving = [driving]
    params = []
    for i, d in enumerate(driving):
        try:
            p = HeadParams.from_dict(d)
            p.shape = av.params[0].shape.copy()
            p.check(av.model)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"driving entry {i} is malformed: {exc}") from None
        params.append(p)
    cams = [Camera.from_dict(c) for c in read_json(args.cams)]
    frames = reenact(av, params, cams)
    out = Path(args.out)
    for k in range(frames.shape[0]):
        for v in range(frames.shape[1]):
            write_png(out / f"f{k:03d}" / f"v{v:02d}.png", frames[k, v])
    print(f"wrote {frames.shape[0]} x {frames.shape[1]} frames to {out}")


def cmd_eval(args):
    from .evaluation import evaluate

    av = _load_avatar(args.ckpt)
    ds = _load_dataset(args.data)
    report = evaluate(av, ds, args.protocol)
    jp, cp = report.write(args.out)
    print(f"{args.protocol}: PSNR {report.psnr:.3f} dB  SSIM {report.ssim:.4f}  ({len(report.frames)} frames)")
    print(f"wrote {jp} and {cp}")


def cmd_inspect_bank(args):
    av = _load_avatar(args.ckpt)
    if av.bank is None:
        print(json.dumps({"bank": None, "note": "checkpoint was trained without the expression bank"}))
        return
    rows = av.bank.summary()
    for r in rows:
        mean = np.asarray(r["mean"])
        print(f"t={r['t']:3d}  |mean|={np.linalg.norm(mean):.5f}  inter-view variance={r['inter_view_variance']:.3e}")
    if args.json:
        write_json(args.json, rows)


def build_parser():
    p = argparse.ArgumentParser(prog="headsplat", description="Mesh-bound Gaussian head avatars")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    g.add_argument("--spec", help="scene spec JSON (defaults to the bundled acceptance scene)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="optimize an avatar")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=["freeze", "single-view", "multi-view-o", "multi-view-m",
                                          "multi-view-t", "full"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--log", help="loss log CSV (defaults next to the checkpoint)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one timestamp from one rig camera")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--t", type=int, required=True)
    r.add_argument("--view", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("reenact", help="drive the avatar with a parameter sequence")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--driving", required=True, help="JSON list of parameter dicts")
    e.add_argument("--cams", required=True, help="camera list JSON")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_reenact)

    v = sub.add_parser("eval", help="PSNR / SSIM report for one protocol")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--protocol", required=True, choices=["novel_view", "self_reenact", "self_reenact_novel_view"])
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("inspect-bank", help="print per-timestamp bank statistics")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--json", help="also write the summary as JSON")
    b.set_defaults(func=cmd_inspect_bank)

    for sp in (g, t, r, e, v, b):
        sp.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        args.func(args)
    except (UsageError, ValueError, CameraError, CheckpointError, HeadModelError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
