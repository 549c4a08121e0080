"""Command-line entry point: ``tatdet <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every flag may
also be set in a ``key=value`` file passed with ``--config``; flags given on
the command line win over the file. Model-structure keys (``use_fru`` etc.)
in that file select the network configuration.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import flops as flops_mod
from . import tensor as T
from .network import ConfigError, Model, ModelConfig, build_graph, parse_kv

log = logging.getLogger("tatdet")

MODEL_KEYS = {f.name for f in fields(ModelConfig)}


class UsageError(Exception):
    pass


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return w, h


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def resolve_config_path(name: str) -> Path:
    """A path on disk, or the name of a bundled config such as ``table6-row5.cfg``."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("tatdet") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"config file {name} not found")


def bundled_configs() -> list[str]:
    return sorted(p.name for p in (resources.files("tatdet") / "configs").iterdir() if p.name.endswith(".cfg"))


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tatdet", description="Lightweight scene-text detector toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value file; bundled names like table6-row5.cfg also work")
        return p

    p = add("train", "train a detector and write checkpoints plus history.csv")
    p.add_argument("--dataset", required=True, help="dataset root, or 'synth' for rendered rectangles")
    p.add_argument("--format", default="icdar2015", choices=("icdar2015", "icdar2013", "td500"))
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0, help="steps between checkpoints (0: end only)")
    p.add_argument("--synth-count", type=_positive_int, default=20)
    p.add_argument("--synth-size", type=_positive_int, default=256)
    p.add_argument("--crop-size", type=_positive_int, default=640, help="augmented patch size for real datasets")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("--float64", action="store_true", help="train in double precision")

    p = add("infer", "detect text in images and write one detection file per image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="image files or directories")
    p.add_argument("--out", default="detections")
    p.add_argument("--model-config", help="network config (default: model.cfg beside the checkpoint run)")
    p.add_argument("--resolution", type=parse_resolution, help="resize to WxH before inference")
    p.add_argument("--score-thresh", type=_probability, default=0.8)
    p.add_argument("--nms-thresh", type=_probability, default=0.2)

    p = add("eval", "score detection files against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth directory (or dataset root)")
    p.add_argument("--det", required=True, help="directory of res_<id>.txt detection files")
    p.add_argument("--format", default="icdar2015", choices=("icdar2015", "icdar2013", "td500"))
    p.add_argument("--iou", type=_probability, default=0.5)
    p.add_argument("--report", default="eval_report.json")

    p = add("flops", "count parameters and FLOPs of a network configuration")
    p.add_argument("--resolution", type=parse_resolution, default=(1280, 720))
    p.add_argument("--csv", help="write the per-node CSV here")
    p.add_argument("--top", type=_positive_int, help="only list the N most expensive nodes")
    p.add_argument("--ablation", action="store_true", help="print the bundled ablation configs side by side")

    p = add("augment-preview", "write augmented patches with boxes drawn")
    p.add_argument("--dataset", required=True, help="dataset root, or 'synth'")
    p.add_argument("--format", default="icdar2015", choices=("icdar2015", "icdar2013", "td500"))
    p.add_argument("--out", default="augment_preview")
    p.add_argument("--count", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop-size", type=_positive_int, default=640)

    p = add("plot-data", "emit FLOPs-per-pixel vs F-score CSV for plotting")
    p.add_argument("--out", default="plot_data.csv")
    p.add_argument("--resolution", type=parse_resolution, default=(1280, 720))
    return parser


def _prescan(argv: list[str]) -> tuple[str | None, str | None]:
    """Find the subcommand and ``--config`` value without full validation."""
    command = config = None
    it = iter(range(len(argv)))
    for i in it:
        tok = argv[i]
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
            next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> tuple[argparse.Namespace, dict]:
    """Parse argv, folding in ``--config`` values as defaults; returns (args, model keys)."""
    command, config = _prescan(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if config is None or command not in subparsers:
        return parser.parse_args(argv), {}
    sub = subparsers[command]
    try:
        kv = parse_kv(resolve_config_path(config).read_text())
    except (FileNotFoundError, ConfigError) as exc:
        sub.error(str(exc))
    actions = {a.dest: a for a in sub._actions}
    model_kv, defaults = {}, {}
    for key, raw in kv.items():
        dest = key.replace("-", "_")
        if key in MODEL_KEYS:
            model_kv[key] = raw
        elif dest in actions and dest not in ("help", "config"):
            act = actions[dest]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[dest] = act.type(raw) if act.type else raw
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    sub.error(f"config key {key}: {exc}")
                if act.nargs == "+":
                    defaults[dest] = [defaults[dest]]
                if act.choices and defaults[dest] not in act.choices:
                    sub.error(f"config key {key}: {raw!r} not in {list(act.choices)}")
        else:
            sub.error(f"unknown config key {key!r} for {command}")
    for dest in defaults:
        actions[dest].required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv), model_kv


# -- subcommands -------------------------------------------------------------------------------

def _model_config(model_kv: dict) -> ModelConfig:
    return ModelConfig.from_mapping(model_kv) if model_kv else ModelConfig()


def _load_samples(dataset: str, fmt: str, seed: int, count: int = 20, size: int = 256):
    from .data import load_dataset, render_synthetic

    if dataset == "synth":
        return render_synthetic(count, size, seed=seed)
    if not Path(dataset).is_dir():
        raise FileNotFoundError(f"dataset path {dataset} does not exist")
    ds = load_dataset(dataset, fmt)
    if not len(ds):
        raise RuntimeError(f"no annotated images found under {dataset}")
    return ds.samples


def cmd_train(args, model_kv) -> int:
    from .data import AugmentConfig, augment, rasterize_batch
    from .serialize import atomic_write_text
    from .training import AdadeltaState, TrainConfig, latest_checkpoint, load_checkpoint, train, train_stream

    cfg = _model_config(model_kv)
    samples = _load_samples(args.dataset, args.format, args.seed, args.synth_count, args.synth_size)
    dtype = np.float64 if args.float64 else np.float32
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "model.cfg", cfg.to_text())
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                     checkpoint_every=args.checkpoint_every)
    with T.default_dtype(dtype):
        model = Model.create(cfg, seed=args.seed, dtype=dtype)
        state = AdadeltaState(rho=tc.rho, lr=tc.lr, weight_decay=tc.weight_decay)
        if args.resume:
            ckpt = latest_checkpoint(out / "ckpt")
            if ckpt is None:
                raise FileNotFoundError(f"--resume given but no checkpoint under {out / 'ckpt'}")
            load_checkpoint(ckpt, model, state)
            log.info("resumed from %s at step %d", ckpt, state.step)

        def report(step, rep):
            log.info("step %d loss %.5f", step, rep.total.item())

        if args.dataset == "synth":
            x, labels = rasterize_batch(samples)
            result = train(model, x.astype(dtype), labels, tc, out, state, on_step=report)
        else:
            aug = AugmentConfig(crop_size=args.crop_size)

            def batch_fn(idx, epoch):
                patches = [augment(samples[i], aug, np.random.default_rng([args.seed, epoch, int(i)]))
                           for i in idx]
                x, labels = rasterize_batch(patches)
                return x.astype(dtype), labels

            result = train_stream(model, len(samples), batch_fn, tc, out, state, on_step=report)
    if result.history:
        print(f"final loss {result.history[-1][1]:.6f} after {result.history[-1][0]} steps")
    print(f"checkpoint {result.checkpoint}")
    return 0


def _image_paths(items: list[str]) -> list[Path]:
    from .data import IMAGE_SUFFIXES

    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"image {item} does not exist")
    return paths


def cmd_infer(args, model_kv) -> int:
    from .data import read_image
    from .geometry import format_detections
    from .inference import detect
    from .serialize import atomic_write_text, load

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    if args.model_config:
        cfg = ModelConfig.load(resolve_config_path(args.model_config))
    elif model_kv:
        cfg = _model_config(model_kv)
    else:
        beside = ckpt.parent.parent / "model.cfg"
        cfg = ModelConfig.load(beside) if beside.exists() else ModelConfig()
    arrays = load(ckpt)
    dtype = next(iter(arrays.values())).dtype
    model = Model.create(cfg, seed=0, dtype=dtype)
    model.load_state_arrays(arrays)
    paths = _image_paths(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        dets = detect(model, read_image(p), args.score_thresh, args.nms_thresh, args.resolution)
        atomic_write_text(out / f"res_{p.stem}.txt", format_detections(dets))
        print(f"{p.name}: {len(dets)} detections")
    return 0


def cmd_eval(args, model_kv) -> int:
    from .data import load_ground_truth
    from .evaluation import evaluate, load_detections_dir, write_report

    gts = load_ground_truth(args.gt, args.format)
    if not gts:
        raise RuntimeError(f"no ground-truth files found under {args.gt}")
    if not Path(args.det).is_dir():
        raise FileNotFoundError(f"detection directory {args.det} does not exist")
    dets = load_detections_dir(args.det, list(gts))
    report = evaluate(gts, dets, args.iou)
    write_report(args.report, report)
    sys.stdout.write(report.format_table())
    print(f"P={report.precision:.4f} R={report.recall:.4f} F={report.f_score:.4f}")
    return 0


def ablation_reports(resolution: tuple[int, int]):
    """(label, report-or-fixture, F) for each bundled ablation config."""
    w, h = resolution
    rows = []
    for (m, fru, tau, raw, rec, prec, f, total), name in zip(flops_mod.TABLE6_ROWS, bundled_configs()):
        kv = parse_kv(resolve_config_path(name).read_text())
        try:
            rep = flops_mod.analyze(build_graph(ModelConfig.from_mapping(kv)), h, w)
        except ConfigError:
            rep = total / (w * h)  # baseline exists only as a published number
        rows.append((name.removesuffix(".cfg"), rep, f))
    return rows


def cmd_flops(args, model_kv) -> int:
    from .serialize import atomic_write_text

    w, h = args.resolution
    if args.ablation:
        sys.stdout.write(flops_mod.format_table(flops_mod.compare(ablation_reports(args.resolution))))
        return 0
    report = flops_mod.analyze(build_graph(_model_config(model_kv)), h, w)
    sys.stdout.write(flops_mod.format_report(report, args.top))
    print(f"total FLOPs: {report.total_flops / 1e9:.3f}G  params: {report.total_params}")
    if args.csv:
        atomic_write_text(args.csv, report.to_csv())
    return 0


def cmd_augment_preview(args, model_kv) -> int:
    from .data import AugmentConfig, augment, draw_boxes, write_image

    samples = _load_samples(args.dataset, args.format, args.seed)
    cfg = AugmentConfig(crop_size=args.crop_size, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        src = samples[k % len(samples)]
        patch = augment(src, cfg, rng)
        write_image(out / f"preview_{k:03d}.png", draw_boxes(patch.image, patch.annotations))
        m = patch.meta
        print(f"preview_{k:03d}.png angle={m['angle_deg']:.2f} k={m['k']:.3f} boxes={len(patch.annotations)}")
    return 0


def cmd_plot_data(args, model_kv) -> int:
    from .serialize import atomic_write_text

    w, h = args.resolution
    entries = [(label, fpp, f) for label, fpp, f in flops_mod.TABLE5_BASELINES]
    rep = flops_mod.analyze(build_graph(_model_config(model_kv)), h, w)
    entries.append(("this-config", rep, None))
    entries += [(f"published:{label}", fpp, f) for label, fpp, f in flops_mod.TABLE5_OURS]
    csv_text = flops_mod.plot_data_csv(flops_mod.compare(entries))
    atomic_write_text(args.out, csv_text)
    sys.stdout.write(csv_text)
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "augment-preview": cmd_augment_preview,
    "plot-data": cmd_plot_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, model_kv = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, model_kv)
    except UsageError as exc:
        print(f"tatdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not re-raised: the exit code carries failure
        print(f"tatdet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
