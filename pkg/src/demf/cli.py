"""Command-line entry point: ``demf {gradcheck,train,eval,ablate,synth}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 checkpoint mismatch.
"""

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import gradsuite
from .config import ConfigInvalid, load_config
from .diffcore import CheckpointMismatch, default_dtype, load_checkpoint, save_checkpoint
from .evaluation import format_record
from .geometry import save_camera
from .toydet.scene import SpecInvalid, synth_scene
from .toydet.train import NonFiniteLoss, build, format_metrics, prepare_scenes, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4

ABLATION_AXES = {
    "scales": ("levels", (1, 2, 3)),
    "samples": ("samples", (1, 2, 4)),
    "heads": ("heads", (1, 2, 4, 8)),
    "offset-mode": ("offset_mode", ("grid", "learned")),
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows, comment=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {comment}"] if comment else []
    lines.append(",".join(header))
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _dtype(cfg):
    return np.float32 if cfg.precision == "float32" else np.float64


# -- commands ----------------------------------------------------------------


def cmd_gradcheck(cfg, args):
    g = cfg.gradcheck
    f32 = cfg.precision == "float32"
    h = g.h_float32 if f32 else g.h
    tol = args.tol if args.tol is not None else (g.tol_float32 if f32 else g.tol)
    seeds = range(args.seeds if args.seeds is not None else g.seeds)
    ops = list(args.ops or g.ops or gradsuite.BUILDERS)
    unknown = [op for op in ops if op not in gradsuite.BUILDERS]
    if unknown:
        raise ConfigInvalid(f"unknown gradcheck ops {unknown}; choose from {list(gradsuite.BUILDERS)}")
    print(f"gradcheck precision={cfg.precision} h={h!r} tol={tol!r} seeds={len(seeds)}")
    if f32:
        print(f"note: float32 uses the relaxed tolerance gradcheck.tol_float32={tol!r} from the config")
    with default_dtype(_dtype(cfg)):
        results = gradsuite.run_suite(ops, seeds, h=h, tol=tol)
    rows = []
    first_fail = None
    for op in ops:
        mine = [r for r in results if r.op == op]
        worst = max(r.max_rel_error for r in mine)
        ok = all(r.passed for r in mine)
        print(f"{'PASS' if ok else 'FAIL'} {op:16s} max_rel_error={worst:.3e} seeds={len(mine)}")
        if not ok and first_fail is None:
            first_fail = op
        rows += [(r.op, r.seed, r.checked, r.max_rel_error, r.tol, r.passed) for r in mine]
    out = Path(args.csv) if args.csv else cfg.paths.out_dir / "gradcheck.csv"
    _write_csv(out, ["op", "seed", "checked", "max_rel_error", "tol", "passed"], rows,
               comment=f"demf-gradcheck v1 precision={cfg.precision} h={h!r}")
    if first_fail is not None:
        print(f"gradcheck failed: first failing op is {first_fail}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _train(cfg, model_cfg=None):
    with default_dtype(_dtype(cfg)):
        return train(model_cfg or cfg.model, cfg.train, cfg.scene)


def cmd_train(cfg, args):
    result = _train(cfg)
    cfg.paths.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cfg.paths.checkpoint, result.model.named_parameters())
    cfg.paths.metrics.parent.mkdir(parents=True, exist_ok=True)
    cfg.paths.metrics.write_text(format_metrics(result.rows, cfg.model.layers))
    final = result.final
    print(f"trained {cfg.train.steps} steps: loss {result.initial_loss:.4f} -> {result.last_loss:.4f}")
    print(f"ambiguous_acc={final['ambiguous_acc']:.4f} map_25={final['map'].get(0.25, math.nan):.4f}")
    print(f"checkpoint {cfg.paths.checkpoint}\nmetrics {cfg.paths.metrics}")
    return EXIT_OK


def cmd_eval(cfg, args):
    from .toydet.train import eval_seeds, evaluate

    train_cfg = dataclasses.replace(cfg.train, ensemble=args.ensemble or cfg.train.ensemble)
    with default_dtype(_dtype(cfg)):
        model = build(cfg.model, train_cfg)
        if not args.untrained:
            ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.checkpoint
            if not ckpt.is_file():
                raise CheckpointMismatch(f"checkpoint {ckpt} does not exist")
            load_checkpoint(ckpt, model)
        eval_set = prepare_scenes(model, cfg.scene, eval_seeds(train_cfg))
        ev = evaluate(model, eval_set, cfg.model.num_classes, train_cfg)
    header = ["ensemble", "ambiguous_objects", "ambiguous_acc", "accuracy"]
    row = [train_cfg.ensemble, ev["ambiguous_objects"], ev["ambiguous_acc"], ev["accuracy"]]
    for t in sorted(ev["map"]):
        header.append(f"map_{int(round(t * 100))}")
        row.append(ev["map"][t])
    out_dir = Path(args.out) if args.out else cfg.paths.out_dir
    _write_csv(out_dir / "eval.csv", header, [row], comment="demf-eval v1 ap=all-point")
    (out_dir / "confusion.csv").write_text(ev["confusion"].to_csv())
    for name, value in zip(header, row):
        print(f"{name}={_fmt(value)}")
    return EXIT_OK


def ablation_settings(cfg, axis, values=None):
    """``[(value, DeMFConfig)]`` for one knob; other dims stay as configured.

    Grid sampling needs a square sample count, so the offset-mode axis rounds
    ``samples`` up to the next square for both settings.
    """
    if axis not in ABLATION_AXES:
        raise ConfigInvalid(f"unknown ablation axis {axis!r}; choose from {list(ABLATION_AXES)}")
    field_name, default_values = ABLATION_AXES[axis]
    out = []
    for value in values or default_values:
        value = type(default_values[0])(value)
        model_cfg = dataclasses.replace(cfg.model, **{field_name: value})
        if axis == "offset-mode":
            side = math.isqrt(model_cfg.samples - 1) + 1 if model_cfg.samples > 1 else 1
            model_cfg = dataclasses.replace(model_cfg, samples=side * side)
        try:
            out.append((value, model_cfg.validate()))
        except ValueError as err:
            raise ConfigInvalid(f"{axis}={value}: {err}") from err
    return out


def cmd_ablate(cfg, args):
    values = args.values.split(",") if args.values else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = []
    for value, model_cfg in ablation_settings(cfg, args.axis, values):
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, seed=seed))
            result = _train(run_cfg, model_cfg)
            f = result.final
            row = [args.axis, value, seed, model_cfg.levels, model_cfg.samples, model_cfg.heads,
                   model_cfg.offset_mode, f["ambiguous_acc"], f["accuracy"],
                   f["map"].get(0.25, math.nan), f["map"].get(0.5, math.nan), result.last_loss]
            rows.append(row)
            print(f"{args.axis}={value} seed={seed} ambiguous_acc={f['ambiguous_acc']:.4f} "
                  f"map_25={f['map'].get(0.25, math.nan):.4f}")
    header = ["axis", "value", "seed", "levels", "samples", "heads", "offset_mode",
              "ambiguous_acc", "accuracy", "map_25", "map_50", "final_loss"]
    out = Path(args.csv) if args.csv else cfg.paths.out_dir / f"ablate_{args.axis}.csv"
    _write_csv(out, header, rows, comment=f"demf-ablation v1 steps={cfg.train.steps}")
    print(f"table {out}")
    return EXIT_OK


def cmd_synth(cfg, args):
    out = Path(args.out) if args.out else cfg.paths.out_dir / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in range(args.start, args.start + args.count):
        scene = synth_scene(seed, cfg.scene)
        records += [format_record(seed, g) for g in scene.gts]
        with open(out / f"scene_{seed}.xyz", "w") as fh:
            fh.writelines(" ".join(repr(float(v)) for v in p) + "\n" for p in scene.points)
        np.save(out / f"scene_{seed}_image.npy", scene.image)
    (out / "gts.txt").write_text("\n".join(records) + "\n")
    camera = cfg.paths.camera or out / "camera.txt"
    save_camera(camera, cfg.scene.camera())
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="demf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="run-config TOML file (defaults apply when omitted)")
        return p

    p = add("gradcheck", "finite-difference gradient checks of every differentiable op")
    p.add_argument("--tol", type=float, help="override the configured tolerance")
    p.add_argument("--seeds", type=int, help="number of random instances per op")
    p.add_argument("--ops", nargs="+", help=f"subset of {', '.join(gradsuite.BUILDERS)}")
    p.add_argument("--csv", help="report path (default: <out_dir>/gradcheck.csv)")

    add("train", "train the toy detector; writes a checkpoint and a metrics CSV")

    p = add("eval", "held-out metrics and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path (default: paths.checkpoint)")
    p.add_argument("--untrained", action="store_true", help="evaluate the seeded initialization")
    p.add_argument("--ensemble", action="store_true", help="average predictions over all layer heads")
    p.add_argument("--out", help="output directory (default: paths.out_dir)")

    p = add("ablate", "train once per setting of one knob and tabulate the results")
    p.add_argument("--axis", required=True, choices=list(ABLATION_AXES))
    p.add_argument("--values", help="comma-separated settings (default: a small sweep)")
    p.add_argument("--seeds", help="comma-separated run seeds (default: the config seed)")
    p.add_argument("--csv", help="table path (default: <out_dir>/ablate_<axis>.csv)")

    p = add("synth", "dump toy scenes: boxes, points, images and the camera")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <out_dir>/scenes)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigInvalid, SpecInvalid) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointMismatch as err:
        print(f"checkpoint mismatch: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
