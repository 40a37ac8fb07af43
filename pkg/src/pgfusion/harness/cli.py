"""Command line interface.

Subcommands: gen (write scene files), run (full pipeline to metrics),
eval (stored detections against stored scenes), ablate (guidance toggle
ladder), gradcheck (finite-difference audit of the analytic gradients).

Exit codes: 0 success, 1 bad arguments or config, 2 a numeric property
check failed (gradcheck tolerance breach).
"""

import argparse
import dataclasses
import datetime
import glob
import json
import math
import os
import sys

import numpy as np

from ..detection import FocalLossOp, SmoothL1Op
from ..scene import load_scene, save_scene, save_scene_csv, generate_scene
from ..seeding import derive_rng
from ..tensorops import (
    ActivationOp,
    Conv2dOp,
    ConvParams,
    MlpOp,
    MlpParams,
    grad_check,
)
from .pipeline import (
    RunConfig,
    Toggles,
    ablate,
    ablation_payload,
    config_echo,
    config_from_dict,
    run_pipeline,
    save_ablation_csv,
    scene_seed,
    synth_v1,
)
from .serialize import (
    detections_payload,
    load_detections_csv,
    load_detections_json,
    metrics_payload,
    save_detections_csv,
    save_json,
    save_pgm16,
)
from .metrics import evaluate

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; keep 2 reserved for numeric
    property failures and use 1 for every argument problem."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _build_parser():
    parser = _Parser(prog="pgfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_toggles=True):
        p.add_argument("--config", help="JSON run config; flags override its keys")
        p.add_argument("--seed", type=int, help="base seed (config key: seed)")
        p.add_argument(
            "--scenes", type=int, help="number of scenes (config key: n_scenes)"
        )
        if with_toggles:
            p.add_argument(
                "--toggles",
                help="comma list of guidance stages: mba,cfa,cdh (or 'none')",
            )
        p.add_argument(
            "--workers", type=int, help="parallel scene workers (config key: workers)"
        )
        p.add_argument("--out", help="output directory (config key: out_dir)")

    p_gen = sub.add_parser("gen", help="write synthetic scene files")
    common(p_gen)
    p_gen.add_argument("--csv", action="store_true", help="also write CSV twins")

    p_run = sub.add_parser("run", help="run the pipeline and write metrics")
    common(p_run)
    p_run.add_argument(
        "--dump-heatmaps",
        action="store_true",
        help="write one 16-bit PGM per scene (max over class heatmaps)",
    )

    p_eval = sub.add_parser("eval", help="evaluate stored detections")
    p_eval.add_argument("--dets", required=True, help="detections .csv or .json")
    p_eval.add_argument(
        "--scene-dir", required=True, help="directory of scene_*.pgf files"
    )
    p_eval.add_argument("--out", help="output directory for metrics.json")

    p_abl = sub.add_parser("ablate", help="run the guidance toggle ladder")
    common(p_abl, with_toggles=False)
    p_abl.add_argument(
        "--seeds",
        default="0,1,2,3,4",
        help="comma list of run seeds (>= 3, default 0,1,2,3,4)",
    )

    p_gc = sub.add_parser("gradcheck", help="audit analytic gradients")
    p_gc.add_argument(
        "--instances", type=int, default=8, help="instances per operator (default 8)"
    )
    return parser


def _load_config(args, default=None):
    config = default if default is not None else RunConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            config = config_from_dict(json.load(f))
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "scenes", None) is not None:
        updates["n_scenes"] = args.scenes
    if getattr(args, "toggles", None) is not None:
        updates["toggles"] = Toggles.from_names(args.toggles)
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if updates:
        config = dataclasses.replace(config, **updates)
    return config


def _require_out(config, command):
    if not config.out_dir:
        raise ValueError("%s needs an output directory (--out or out_dir)" % command)
    os.makedirs(config.out_dir, exist_ok=True)
    return config.out_dir


def _timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _cmd_gen(args):
    config = _load_config(args)
    out = _require_out(config, "gen")
    for i in range(config.n_scenes):
        scene = generate_scene(config.scene, scene_seed(config.seed, i))
        stem = os.path.join(out, "scene_%04d" % i)
        save_scene(stem + ".pgf", scene)
        if args.csv:
            save_scene_csv(stem, scene)
    print("wrote %d scenes to %s" % (config.n_scenes, out))
    return 0


def _cmd_run(args):
    config = _load_config(args)
    out = _require_out(config, "run")
    result, artifacts = run_pipeline(config)
    save_json(
        os.path.join(out, "metrics.json"),
        metrics_payload(
            result,
            config_echo=config_echo(config),
            extra={"n_scenes": config.n_scenes, "seed": config.seed},
            timestamp=_timestamp(),
        ),
    )
    save_detections_csv(os.path.join(out, "detections.csv"), artifacts["detections"])
    save_json(
        os.path.join(out, "detections.json"),
        detections_payload(artifacts["detections"]),
    )
    if args.dump_heatmaps:
        for i, heat in enumerate(artifacts["heatmaps"]):
            save_pgm16(os.path.join(out, "heat_%04d.pgm" % i), heat.max(axis=0))
    print("mean AP %.4f over %d scenes -> %s" % (result.mean_ap, config.n_scenes, out))
    return 0


def _cmd_eval(args):
    paths = sorted(glob.glob(os.path.join(args.scene_dir, "scene_*.pgf")))
    if not paths:
        raise ValueError("no scene_*.pgf files under %r" % args.scene_dir)
    scenes = [load_scene(p) for p in paths]
    n_classes = scenes[0].n_classes
    if any(s.n_classes != n_classes for s in scenes):
        raise ValueError("scenes disagree on n_classes")
    if args.dets.endswith(".json"):
        dets = load_detections_json(args.dets)
    else:
        dets = load_detections_csv(args.dets, n_scenes=len(scenes))
    if len(dets) != len(scenes):
        raise ValueError(
            "detections cover %d scenes, directory has %d" % (len(dets), len(scenes))
        )
    result = evaluate(dets, [s.boxes for s in scenes], n_classes)
    payload = metrics_payload(
        result, extra={"n_scenes": len(scenes)}, timestamp=_timestamp()
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_json(os.path.join(args.out, "metrics.json"), payload)
    print("mean AP %.4f over %d scenes" % (result.mean_ap, len(scenes)))
    return 0


def _cmd_ablate(args):
    config = _load_config(args, default=synth_v1())
    out = _require_out(config, "ablate")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    result = ablate(config, seeds)
    save_ablation_csv(os.path.join(out, "ablation.csv"), result)
    save_json(
        os.path.join(out, "ablation.json"), ablation_payload(result, config=config)
    )
    header = "%-14s %10s %10s" % ("row", "mean mAP", "delta")
    print(header)
    for row in result.rows:
        print("%-14s %10.4f %+10.4f" % (row.name, row.mean, row.delta))
    print("monotonic: %s" % result.monotonic)
    return 0


def _gradcheck_cases(instances):
    rng = derive_rng(20240501)
    for i in range(instances):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        w = rng.normal(0.0, 0.5, (cout, cin, k, k))
        b = rng.normal(0.0, 0.5, cout)
        p = ConvParams(w, b, stride=1, padding=k // 2)
        yield "conv2d", Conv2dOp(p), rng.normal(0.0, 1.0, (cin, 6, 7)), 1e-5
    for i in range(instances):
        n_in, n_h, n_out = (int(rng.integers(2, 6)) for _ in range(3))
        p = MlpParams(
            rng.normal(0.0, 0.7, (n_h, n_in)),
            rng.normal(0.0, 0.2, n_h),
            rng.normal(0.0, 0.7, (n_out, n_h)),
            rng.normal(0.0, 0.2, n_out),
        )
        # keep pre-activations away from relu kinks
        v = rng.normal(0.0, 1.0, n_in)
        yield "mlp", MlpOp(p), v, 1e-5
    for kind in ("sigmoid", "tanh", "relu"):
        for i in range(instances):
            x = rng.normal(0.0, 1.5, (2, 5, 5))
            if kind == "relu":
                x = np.where(np.abs(x) < 0.05, 0.2, x)
            yield kind, ActivationOp(kind), x, 1e-5
    for i in range(instances):
        target = np.zeros((2, 5, 5))
        target[tuple(rng.integers(0, s) for s in target.shape)] = 1.0
        pred = rng.uniform(0.05, 0.95, target.shape)
        yield "focal", FocalLossOp(target), pred, 1e-6
    for i in range(instances):
        target = rng.normal(0.0, 1.0, (3, 5, 5))
        mask = rng.random((5, 5)) < 0.5
        diff = rng.uniform(0.05, 0.8, target.shape) * rng.choice([-1.0, 1.0], target.shape)
        yield "smooth_l1", SmoothL1Op(target, mask), target + diff, 1e-6


def _cmd_gradcheck(args):
    if args.instances < 1:
        raise ValueError("--instances must be >= 1")
    worst = {}
    for name, op, x, eps in _gradcheck_cases(args.instances):
        err = grad_check(op, x, epsilon=eps)
        worst[name] = max(worst.get(name, 0.0), err)
    failed = False
    for name in sorted(worst):
        ok = worst[name] < GRADCHECK_TOL
        failed = failed or not ok
        print(
            "%-10s max rel err %.3e  %s" % (name, worst[name], "ok" if ok else "FAIL")
        )
    if failed:
        print("gradcheck FAILED (tolerance %g)" % GRADCHECK_TOL, file=sys.stderr)
        return 2
    print("gradcheck passed (%d operators, tolerance %g)" % (len(worst), GRADCHECK_TOL))
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
