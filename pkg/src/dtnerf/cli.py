"""Command line entry point: ``dtnerf {gen-data,train,render,eval,ablate,gradcheck,schema}``.

Exit codes: 0 success, 1 validation or acceptance failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import __version__
from .checkpoint import CheckpointError
from .config import ABLATION_ROWS, RunConfig, load_config, save_config, schema

log = logging.getLogger("dtnerf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "DTNERF_THREADS"
ABLATE_FLAGS = {"no-transformer": "transformer", "no-fusion": "fusion", "no-finetune": "finetune"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def resolve_threads(flag: Optional[int], cfg: RunConfig) -> RunConfig:
    """``--threads`` wins over the environment variable, which wins over the config value."""
    n = flag
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if n is None:
        n = cfg.threads
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return cfg.replace(threads=n)


def write_config_snapshot(cfg: RunConfig, out_dir: Path) -> None:
    save_config(cfg, out_dir / "config.json")
    (out_dir / "config_hash.txt").write_text(cfg.config_hash() + "\n")


def parse_frames(spec: str, n_frames: int) -> list[int]:
    """``"0..5"`` (inclusive), ``"3"``, ``"1,4,7"`` or ``"all"``."""
    if spec == "all":
        return list(range(n_frames))
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise UsageError(f"empty frame range {part!r}")
            out.extend(range(lo, hi + 1))
        elif re.fullmatch(r"-?\d+", part):
            out.append(int(part))
        else:
            raise UsageError(f"cannot parse frame selection {spec!r}")
    bad = [i for i in out if not 0 <= i < n_frames]
    if bad:
        raise UsageError(f"frame index {bad[0]} out of range; valid frames are 0..{n_frames - 1}")
    return out


def checkpoint_config(ckpt: Path) -> RunConfig:
    path = ckpt.parent / "config.json"
    if not path.exists():
        raise UsageError(f"no config.json next to {ckpt}; it is written by `dtnerf train`")
    return load_config(path)


def _load_data(path: str):
    from .synth import load_dataset
    root = Path(path)
    if not (root / "dataset.json").exists():
        raise UsageError(f"{root} is not a dataset directory (dataset.json missing)")
    return load_dataset(root)


def _check_resolution(cfg: RunConfig, data) -> None:
    if data.resolution != cfg.data.resolution:
        raise UsageError(f"checkpoint was configured for {cfg.data.resolution}px frames, "
                         f"dataset has {data.resolution}px")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .synth import SceneParams, dir_hash, gen_dataset
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(data={"seed": args.seed})
    d = cfg.data
    out = Path(args.out)
    t0 = time.perf_counter()
    gen_dataset(SceneParams(), d.n_frames, d.resolution, d.orbit_deg, d.seed, out, d.steps_per_ray,
                d.holdout_every)
    write_config_snapshot(cfg, out)
    log.info("wrote %d frames to %s in %.1fs", d.n_frames, out, time.perf_counter() - t0)
    print(f"dataset_hash,{dir_hash(out)}")
    return EXIT_OK


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.ablate:
        cfg = cfg.replace(ablation={ABLATE_FLAGS[a]: False for a in args.ablate})
    return resolve_threads(args.threads, cfg)


def cmd_train(args) -> int:
    from .report import plot_training_curve
    from .trainer import TrainingAborted, train
    cfg = _train_config(args)
    data = _load_data(args.data)
    if data.resolution != cfg.data.resolution:
        cfg = cfg.replace(data={"resolution": data.resolution})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_snapshot(cfg, out)
    try:
        result = train(cfg, data, out, resume=args.resume, progress=log.info)
    except TrainingAborted as exc:
        log.error("training aborted: %s (last good state in %s)", exc, out / "last_good.ckpt")
        return EXIT_FAIL
    result.final_report.write(out, "eval")
    plot_training_curve(out / "metrics.csv", out / "training_curve.png", result.row_name)
    info = {"row": result.row_name, "config_hash": cfg.config_hash(), "dataset_hash": data.content_hash(),
            "steps": result.trainer.step, "wall_clock_s": result.wall_clock, **result.final_report.summary()}
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n")
    rep = result.final_report
    print("row,psnr,mouth_psnr,lmd,wall_clock_s")
    print(f"{result.row_name},{rep.mean_psnr:.4f},{rep.mean_mouth_psnr:.4f},{rep.mean_lmd:.4f},"
          f"{result.wall_clock:.1f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .report import plot_triptych_grid, save_png, triptych
    from .trainer import load_model, render_frame
    ckpt = Path(args.checkpoint)
    cfg = resolve_threads(args.threads, checkpoint_config(ckpt))
    data = _load_data(args.data)
    _check_resolution(cfg, data)
    frames = parse_frames(args.frames, len(data.cameras))
    import torch
    torch.set_num_threads(cfg.threads)
    model = load_model(ckpt, cfg, data.mouth_box)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = []
    for i in frames:
        pred = render_frame(model, cfg, data.cameras[i], float(data.audio[i]), float(data.blink[i]))
        gt = data.images[i].astype(float)
        img = triptych(gt, pred) if args.side_by_side else pred
        print(save_png(img, out / f"frame_{i:04d}.png"))
        grid.append((i, gt, pred))
    if args.side_by_side:
        plot_triptych_grid(grid, out / "triptychs.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_model, load_model
    ckpt = Path(args.checkpoint)
    cfg = resolve_threads(args.threads, checkpoint_config(ckpt))
    data = _load_data(args.data)
    _check_resolution(cfg, data)
    import torch
    torch.set_num_threads(cfg.threads)
    model = load_model(ckpt, cfg, data.mouth_box)
    ids = data.holdout_ids if args.split == "holdout" else data.train_ids
    report = evaluate_model(model, cfg, data, ids, cfg.config_hash())
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    report.write(out, "eval")
    s = report.summary()
    print("frames,psnr,mouth_psnr,lmd,lpips,fid")
    print(f"{s['frames']},{s['psnr']:.4f},{s['mouth_psnr']:.4f},{s['lmd']:.4f},{s['lpips']},{s['fid']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .report import plot_ablation, write_ablation_table
    from .trainer import train
    base = resolve_threads(args.threads, load_config(args.config))
    names = [r.strip() for r in args.rows.split(",")] if args.rows else list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise UsageError(f"unknown ablation row {unknown[0]!r}; choose from {list(ABLATION_ROWS)}")
    data = _load_data(args.data)
    base = base.replace(data={"resolution": data.resolution})
    data_hash = data.content_hash()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_snapshot(base, out)
    rows = []
    for name in names:
        cfg = base.replace(ablation=ABLATION_ROWS[name])
        run_dir = out / re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")
        run_dir.mkdir(exist_ok=True)
        write_config_snapshot(cfg, run_dir)
        res = train(cfg, data, run_dir, progress=log.info)
        res.final_report.write(run_dir, "eval")
        rep = res.final_report
        rows.append({"row": name, **ABLATION_ROWS[name], "psnr": rep.mean_psnr, "mouth_psnr": rep.mean_mouth_psnr,
                     "lmd": rep.mean_lmd, "lpips": "n/a", "fid": "n/a", "wall_clock_s": res.wall_clock,
                     "steps": res.trainer.step, "dataset_hash": data_hash, "config_hash": cfg.config_hash()})
    csv_path, md_path = write_ablation_table(rows, out)
    plot_ablation(rows, out / "ablation.png")
    sys.stdout.write(md_path.read_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .diffcore import gradcheck
    cfg = resolve_threads(args.threads, load_config(args.config))
    import torch
    torch.set_num_threads(cfg.threads)
    t0 = time.perf_counter()
    try:
        reports = gradcheck(args.ops, n_samples=args.samples, eps=args.eps, tol=args.tol, seed=cfg.schedule.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "n_checked", "max_rel_err", "tol", "failures", "passed"])
        for r in reports:
            w.writerow([r.op_name, r.n_checked, repr(r.max_rel_err), r.tol, len(r.failures), r.passed])
    detail = {"elapsed_s": elapsed, "ops": [
        {"op": r.op_name, "n_checked": r.n_checked, "max_rel_err": r.max_rel_err, "tol": r.tol,
         "failures": [{"index": i, "analytic": a, "numeric": n} for i, a, n in r.failures[:20]]}
        for r in reports]}
    (out / "gradcheck.json").write_text(json.dumps(detail, indent=2) + "\n")
    sys.stdout.write((out / "gradcheck.csv").read_text())
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        log.error("gradient check failed for %s", ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(schema(), indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtnerf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help=f"torch intra-op threads (default: ${THREADS_ENV}, else the config value)")

    g = sub.add_parser("gen-data", help="render the synthetic talking-head dataset")
    g.add_argument("--config", help="run config JSON (its data section is used)")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--seed", type=int, help="override data.seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="coarse-to-fine training; writes model.ckpt and metrics.csv")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATE_FLAGS), default=[],
                   help="disable a component; may be repeated")
    t.add_argument("--resume", help="checkpoint to continue from")
    threads(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint to PNG")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frames", default="all", help='e.g. "0..5" (inclusive), "3", "1,4,7" or "all"')
    r.add_argument("--out", required=True)
    r.add_argument("--side-by-side", action="store_true", help="write GT | pred | abs-diff triptychs")
    threads(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR, mouth PSNR and LMD of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["holdout", "train"], default="holdout")
    e.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    threads(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation rows on one dataset and tabulate them")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--rows", help=f"comma separated subset of: {', '.join(ABLATION_ROWS)}")
    threads(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--config")
    c.add_argument("--out", default="gradcheck", help="report directory")
    c.add_argument("--ops", default="all", help="op name or prefix")
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    threads(c)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("schema", help="print the run-config JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except jsonschema.ValidationError as exc:
        print(f"error: invalid config: {exc.message}", file=sys.stderr)
        return EXIT_FAIL
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
