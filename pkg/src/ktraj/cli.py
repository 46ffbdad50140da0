"""Command-line entry point: ``ktraj <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import KtrajError, UndefinedTestError

__all__ = ["main", "run", "build_parser"]

KINDS = ("cartesian", "radial", "spiral")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(suppress):
    # the subcommand copy must not overwrite values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = _Parser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None), help="random seed (overrides the config)")
    g.add_argument("--out-dir", default=d("out"), help="output directory (default: out)")
    g.add_argument("--config", default=d(None), help="TrainConfig JSON file")
    g.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="config override with dotted keys; repeatable, last one wins")
    return g


def build_parser():
    common = _global_flags(suppress=True)
    p = _Parser(prog="ktraj", description="Physics-constrained k-space trajectory learning.",
                parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("init-traj", parents=[common], help="write an initial trajectory file")
    s.add_argument("--kind", choices=KINDS, default="radial")
    s.add_argument("--shots", type=int, default=8)
    s.add_argument("--samples", type=int, default=1000, help="samples per shot")

    s = sub.add_parser("train", parents=[common], help="train trajectory field and recon net")
    s.add_argument("--method", choices=("learned", "fixed", "both"), default="learned")

    s = sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints on the test split")
    s.add_argument("--learned", default=None, help="checkpoint directory (default: OUT/learned)")
    s.add_argument("--fixed", default=None, help="checkpoint directory (default: OUT/fixed)")

    s = sub.add_parser("psf", parents=[common], help="PSF images of fixed and learned trajectories")
    s.add_argument("--learned", default=None, help="checkpoint directory (default: OUT/learned)")

    s = sub.add_parser("export-gradients", parents=[common], help="write gradient/slew waveforms")
    s.add_argument("--trajectory", default=None, help="trajectory file (default: initializer)")
    s.add_argument("--checkpoint", default=None, help="checkpoint directory of a trained model")

    s = sub.add_parser("plot", parents=[common], help="trajectory overlays and training curves")
    s.add_argument("--learned", default=None, help="checkpoint directory (default: OUT/learned)")

    s = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suites")
    s.add_argument("--suite", action="append", default=None, help="run only the named suite(s)")
    return p


def _config(args):
    from .trainer import TrainConfig
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _say(msg):
    print(msg, flush=True)


def _cmd_init_traj(args):
    from .geometry import make_initial, save_trajectory
    cfg = _config(args)
    traj = make_initial(args.kind, args.shots, args.samples, cfg.grid, cfg.physics.dwell)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"{args.kind}_{args.shots}.ktraj")
    save_trajectory(traj, path, cfg.physics)
    _say(f"wrote {path} ({traj.shots} x {traj.samples_per_shot} points)")


def _cmd_train(args):
    from .trainer import build_dataset, train_joint
    cfg = _config(args)
    data = build_dataset(cfg)
    methods = ("learned", "fixed") if args.method == "both" else (args.method,)
    for m in methods:
        mcfg = dataclasses.replace(cfg, method=m)
        out = os.path.join(args.out_dir, m)
        res = train_joint(data, mcfg, out_dir=out, log=_say)
        with open(os.path.join(out, "config.json"), "w") as fh:
            fh.write(mcfg.to_json() + "\n")
        _say(f"{m}: best epoch {res.best_epoch}, checkpoints in {out}")


def _load(dirname, what):
    from .trainer import load_state
    if not os.path.isfile(os.path.join(dirname, "field.ckpt")):
        raise FileNotFoundError(f"no {what} checkpoint in {dirname}")
    return load_state(dirname)


def _cmd_eval(args):
    from .trainer import build_dataset, evaluate, write_eval
    learned = _load(args.learned or os.path.join(args.out_dir, "learned"), "learned")
    fixed = _load(args.fixed or os.path.join(args.out_dir, "fixed"), "fixed")
    data = build_dataset(learned[1])
    rep = evaluate({"learned": learned, "fixed": fixed}, data["test"])
    write_eval(rep, args.out_dir)
    s = rep.summary
    _say(f"learned {s['learned']['mean_psnr']:.2f} dB / fixed {s['fixed']['mean_psnr']:.2f} dB, "
         f"gain {s['psnr_gain_db']:.2f} dB, Wilcoxon p = {s['wilcoxon_psnr'][1]:.4g}")


def _trained_points(dirname):
    from .trainer import Pipeline, trajectory_of
    state, cfg = _load(dirname, "trained")
    pipe = Pipeline(cfg)
    return trajectory_of(state, pipe)[0], cfg, pipe


def _cmd_psf(args):
    from .datakit import heatmap_svg, save_raw
    from .nufft import psf, sidelobe_max
    from .trainer import Pipeline, wrap_band
    cfg = _config(args)
    ldir = args.learned or os.path.join(args.out_dir, "learned")
    sets = {}
    if os.path.isfile(os.path.join(ldir, "field.ckpt")):
        pts, cfg, _ = _trained_points(ldir)
        sets["learned"] = pts
    sets["fixed"] = Pipeline(cfg).initial.points
    os.makedirs(args.out_dir, exist_ok=True)
    for name, pts in sets.items():
        img = psf(wrap_band(pts).reshape(-1, 2), cfg.grid, cfg.gridding)
        base = os.path.join(args.out_dir, f"psf_{name}")
        save_raw(base + ".raw", img)
        heatmap_svg(base + ".svg", np.log10(np.maximum(img, 1e-4)), vmin=-4, vmax=0,
                    title=f"PSF ({name}), log10 magnitude")
        _say(f"{name}: max side lobe {sidelobe_max(img):.4f}, wrote {base}.svg")


def _cmd_export_gradients(args):
    from .geometry import Trajectory, export_waveforms, load_trajectory
    cfg = _config(args)
    if args.checkpoint:
        pts, cfg, pipe = _trained_points(args.checkpoint)
        traj = Trajectory(pts, pipe.limits.dwell)
    elif args.trajectory:
        traj = load_trajectory(args.trajectory)
    else:
        from .trainer import Pipeline
        traj = Pipeline(cfg).initial
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "waveforms.csv")
    export_waveforms(traj, cfg.physics, path)
    _say(f"wrote {path}")


def _read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cmd_plot(args):
    from .datakit import curves_svg, polyline_svg
    from .trainer import Pipeline
    cfg = _config(args)
    ldir = args.learned or os.path.join(args.out_dir, "learned")
    groups, labels = [], []
    if os.path.isfile(os.path.join(ldir, "field.ckpt")):
        pts, cfg, _ = _trained_points(ldir)
        groups.append(list(pts))
        labels.append("learned")
    groups.insert(0, list(Pipeline(cfg).initial.points))
    labels.insert(0, "initial")
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "trajectory.svg")
    polyline_svg(out, groups, labels=labels, title="k-space trajectories")
    _say(f"wrote {out}")
    for method in ("learned", "fixed"):
        hist = os.path.join(args.out_dir, method, "history.csv")
        if not os.path.isfile(hist):
            continue
        rows = _read_history(hist)
        series = {f"{split} {key}": [float(r[key]) for r in rows if r["split"] == split]
                  for split in ("train", "val") for key in ("total",)}
        series["val psnr/100"] = [float(r["psnr"]) / 100 for r in rows if r["split"] == "val"]
        out = os.path.join(args.out_dir, f"curves_{method}.svg")
        curves_svg(out, series, title=f"training curves ({method})")
        _say(f"wrote {out}")


def _cmd_gradcheck(args):
    from .gradcheck import SUITES, run_all
    names = args.suite or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise UsageError(f"unknown suite {bad[0]!r}; choose from {', '.join(SUITES)}")
    seed = 0 if args.seed is None else args.seed
    results = run_all(seed, names)
    for r in results:
        _say(r.line())
    return 0 if all(r.passed for r in results) else 2


_COMMANDS = {
    "init-traj": _cmd_init_traj,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "psf": _cmd_psf,
    "export-gradients": _cmd_export_gradients,
    "plot": _cmd_plot,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None):
    """Execute one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return _COMMANDS[args.command](args) or 0
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (KtrajError, OSError, ValueError, UndefinedTestError, json.JSONDecodeError) as exc:
        print(f"ktraj: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
