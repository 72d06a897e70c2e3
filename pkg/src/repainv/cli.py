"""Command line entry point: ``repainv <subcommand> [options]``.

Exit codes: 0 success, 1 config error, 2 numerical abort, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, config_hash, load_config, override, str_list
from .diffcore import NonFiniteError
from .pipeline import Workspace, bench_images, ensure_ae, ensure_flow, heldout_images, make_encoder, make_task
from .solve import Problem, SolverAbort, solve
from .train import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3

log = logging.getLogger("repainv")


class AcceptanceFailure(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="INI config file (defaults apply to missing keys)")
    p.add_argument("--workdir", type=Path, default=Path("runs/work"), help="checkpoint directory")
    p.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repainv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic image set")
    _common(p)
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--count", type=int, default=100)

    p = sub.add_parser("train-ae", help="train (or reuse) the autoencoder")
    _common(p)
    p.add_argument("--retrain", action="store_true")

    p = sub.add_parser("train-flow", help="train (or reuse) a velocity model and head")
    _common(p)
    p.add_argument("--space", choices=("latent", "pixel"), default="latent")
    p.add_argument("--w-repa", type=float)
    p.add_argument("--retrain", action="store_true")

    p = sub.add_parser("solve", help="solve one benchmark image and write image, trace and summary")
    _common(p)
    p.add_argument("--task", choices=("superres", "boxinpaint", "gaussblur", "motionblur"))
    p.add_argument("--method", default="latent_dps_repa")
    p.add_argument("--image", type=int, default=0, help="benchmark image index")
    p.add_argument("--steps", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--schedule", choices=("snr", "inverse-norm"), help="measurement step-size rule")
    p.add_argument("--seed", type=int, help="solver seed (initial noise, resampling)")
    p.add_argument("--input", type=Path, help="clean image (.pgm or .f64) to degrade and solve "
                                              "instead of a benchmark image")

    p = sub.add_parser("sweep-steps", help="feature-MMD versus number of solver steps")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--method", default="latent_dps", choices=("latent_dps", "resample", "pixel_dps"))
    p.add_argument("--images", type=int)
    p.add_argument("--check", action="store_true", help="exit 3 unless the aligned curve dominates")

    p = sub.add_parser("verify-theory", help="numerical checks of the alignment and contraction bounds")
    _common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--triples", type=int, default=200)

    p = sub.add_parser("robustness", help="encoder similarity under increasing degradation")
    _common(p)
    p.add_argument("--images", type=int, default=100)

    p = sub.add_parser("report", help="benchmark table over tasks and methods")
    _common(p)
    p.add_argument("--tasks")
    p.add_argument("--methods")
    p.add_argument("--images", type=int)
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--ab", action="store_true", help="also run the tap-vs-feature comparison")
    return ap


def cmd_gen_data(args, cfg):
    from .harness import gen_dataset
    man = gen_dataset(args.seed, args.count, args.out / f"data_seed{args.seed}", cfg["data"]["image_size"])
    print(f"wrote {args.count} images, files hash {man['files_hash'][:16]}")


def cmd_train_ae(args, cfg):
    ws = Workspace(args.workdir)
    ensure_ae(ws, cfg, retrain=args.retrain)
    print(f"autoencoder: {ws.ae()}")


def cmd_train_flow(args, cfg):
    ws = Workspace(args.workdir)
    w = cfg["flow"]["w_repa"] if args.w_repa is None else args.w_repa
    ensure_flow(ws, cfg, args.space, w, retrain=args.retrain)
    print(f"flow model: {ws.flow(args.space, w)}")


def cmd_solve(args, cfg):
    from .harness import _space, load_models, measurements, provenance, solver_config
    from .metrics import psnr, ssim
    from .theory import pair_feature_mmd
    cfg = override(cfg, "solver", steps=args.steps)
    task = args.task or cfg["task"]["name"]
    ws = Workspace(args.workdir)
    models = load_models(ws, cfg, _space(args.method))
    op = make_task(cfg, task)
    if args.input is not None:
        img = io.read_pgm(args.input) if args.input.suffix == ".pgm" else io.read_raw(args.input)
        if img.shape != op.image_shape:
            raise ValueError(f"input image is {img.shape}, task expects {op.image_shape}")
        x = img[None]
        y = measurements(op, x, cfg["data"]["bench_seed"])
        name = args.input.stem
    else:
        x = np.asarray(bench_images(cfg, args.image + 1))[args.image:args.image + 1]
        y = measurements(op, np.asarray(bench_images(cfg, args.image + 1)), cfg["data"]["bench_seed"])
        y = y[args.image:args.image + 1]
        name = f"{args.image:04d}"
    scfg = solver_config(cfg, args.method, task=task)
    if args.lam is not None and scfg.lam > 0:
        scfg.lam = args.lam
    if args.kappa is not None:
        scfg.kappa = args.kappa
    if args.schedule is not None:
        scfg.step_schedule = args.schedule
    if args.seed is not None:
        scfg.seed = args.seed
    scfg.validate()
    tr = solve(scfg, Problem(models.model, op, y, models.decoder, models.head, models.encoder,
                             indices=np.array([args.image])))
    stem = args.out / f"{task}_{args.method}_{name}"
    io.write_image(stem, tr.reconstruction[0])
    io.write_image(stem.with_name(stem.name + "_proxy"), np.clip(op.proxy_image(y)[0], 0, 1))
    prov = provenance(cfg, {_space(args.method): models})
    io.write_csv(stem.with_name(stem.name + "_trace.csv"), tr.rows(0), prov)
    summary = {"provenance": prov, "task": task, "method": args.method, "solver": scfg.to_dict(),
               "psnr": float(psnr(x[0], tr.reconstruction[0])),
               "ssim": float(ssim(x[0], tr.reconstruction[0])),
               "feat_mmd": float(pair_feature_mmd(x, tr.reconstruction, models.encoder)[0]),
               "trace_digest": tr.digest()}
    io.write_json(stem.with_name(stem.name + "_summary.json"), summary)
    print(f"{task} {args.method} image {name}: PSNR {summary['psnr']:.2f} dB, "
          f"SSIM {summary['ssim']:.3f}, feature-MMD {summary['feat_mmd']:.4g}")


def cmd_sweep(args, cfg):
    from .harness import step_sweep, sweep_dominance
    rows = step_sweep(cfg, Workspace(args.workdir), args.out, args.task, args.method, n_images=args.images)
    for r in rows:
        print(f"T={r['steps']:4d}  base {r['base_feat_mmd']:.5g}  +align {r['repa_feat_mmd']:.5g}")
    dom = sweep_dominance(rows)
    print(f"aligned curve at or below base at {dom}/{len(rows)} points")
    if args.check and dom < len(rows) - 1:
        raise AcceptanceFailure("step sweep dominance")


def cmd_verify_theory(args, cfg):
    from .harness import verify_theory
    ws = Workspace(args.workdir)
    res = verify_theory(cfg, ws, args.instances, args.triples)
    io.write_json(args.out / "theory.json", {"config_hash": config_hash(cfg), **res})
    for k, v in res["checks"].items():
        print(f"{'PASS' if v['pass'] else 'FAIL'}  {k}: {v['detail']}")
    if not all(v["pass"] for v in res["checks"].values()):
        raise AcceptanceFailure("theory checks")


def cmd_robustness(args, cfg):
    from .theory import ROBUSTNESS_THRESHOLD, curve_is_monotone, robustness_curve
    imgs = np.asarray(heldout_images(cfg))[:args.images]
    rows = robustness_curve(imgs, make_encoder(cfg))
    io.write_csv(args.out / "robustness.csv", rows, {"config_hash": config_hash(cfg)})
    for r in rows:
        print(f"{r['family']:10s} {r['severity']:5g}  {r['similarity']:.4f}")
    default = {"superres": cfg["task"]["sr_factor"], "gaussblur": cfg["task"]["blur_sigma"]}
    ok = curve_is_monotone(rows)
    for fam, sev in default.items():
        sims = [r["similarity"] for r in rows if r["family"] == fam and r["severity"] == sev]
        ok &= bool(sims) and sims[0] > ROBUSTNESS_THRESHOLD[fam]
    print("monotone and above threshold" if ok else "robustness check FAILED")
    if not ok:
        raise AcceptanceFailure("robustness")


def cmd_report(args, cfg):
    from .harness import ab_feature_vs_tap, run_experiment
    ws = Workspace(args.workdir)
    tasks = str_list(args.tasks) if args.tasks else None
    methods = str_list(args.methods) if args.methods else None
    rows = run_experiment(cfg, ws, args.out, tasks, methods, args.images, save_images=args.save_images)
    hdr = f"{'task':10s} {'method':16s} {'PSNR':>7s} {'SSIM':>6s} {'featMMD':>9s} {'Frechet':>9s} fail"
    print(hdr)
    for r in rows:
        print(f"{r['task']:10s} {r['method']:16s} {r['psnr_mean']:7.2f} {r['ssim_mean']:6.3f} "
              f"{r['feat_mmd_mean']:9.4g} {r['frechet']:9.4g} {r['failures']:4d}")
    if args.ab:
        ab_feature_vs_tap(cfg, ws, args.out, tasks[0] if tasks else None, args.images or 20)


COMMANDS = {"gen-data": cmd_gen_data, "train-ae": cmd_train_ae, "train-flow": cmd_train_flow,
            "solve": cmd_solve, "sweep-steps": cmd_sweep, "verify-theory": cmd_verify_theory,
            "robustness": cmd_robustness, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.cmd](args, cfg)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverAbort, NonFiniteError, DivergenceError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except AcceptanceFailure as e:
        print(f"acceptance check failed: {e}", file=sys.stderr)
        return EXIT_ACCEPT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
