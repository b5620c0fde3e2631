"""``imrseg`` command line: synth | maskinit | train | eval | predict.

Every command writes its artifacts under ``--out`` together with
``config.json`` (the resolved configuration, loadable again via
``--config``) and ``run.json`` (provenance).  Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .data import SyntheticSpec, generate_synthetic_dataset, load_dataset
from .embeddings import TOY_CLASSES, build_provider
from .errors import ConfigError, IMRSegError, UnknownClassError
from .evaluation import evaluate
from .mask_init import binarize, initial_mask
from .pipeline import PipelineConfig, aggregate_k_shot, predict_query, predict_zero_shot
from .plotting import plot_step_miou, plot_trajectory
from .tensorio import config_hash, tree_digest, write_tensor
from .training import load_model, save_model, train

log = logging.getLogger("imrseg")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, overrides):
    """Apply ``a.b.c=value`` overrides to a nested dict (values parsed as JSON when possible)."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a config section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = _parse_value(value)
    return config


def _read_config_file(path):
    if path is None:
        return {}, {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "pipeline" in raw or "args" in raw:
        return raw.get("pipeline", {}), raw.get("args", {})
    return raw, {}


# flag name -> PipelineConfig field, for the training knobs exposed directly
PIPELINE_FLAGS = {
    "steps": "steps", "cell_variant": "cell_variant", "update_schedule": "update_schedule",
    "lambda_schedule": "lambda_schedule", "w_s": "w_s", "init_method": "init_method",
    "lr": "lr", "batch_size": "batch_size", "episodes": "episodes", "fold": "fold",
    "seed": "seed", "hue_augment": "hue_augment",
}


def resolve_pipeline(args, base):
    cfg = PipelineConfig().to_dict()
    cfg = _deep_update(cfg, base)
    for flag, key in PIPELINE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    apply_overrides(cfg, getattr(args, "set", None))
    return PipelineConfig.from_dict(cfg)


def _deep_update(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
    return dst


# ---------------------------------------------------------------------------
# output helpers

def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out {out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _record_run(out, command, args, pipeline=None, extra=None):
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v

    arg_dict = {k: plain(v) for k, v in vars(args).items() if k not in ("func", "config", "out", "force")}
    resolved = {"command": command, "args": arg_dict}
    if pipeline is not None:
        resolved["pipeline"] = pipeline.to_dict()
    _write_json(out / "config.json", resolved)
    run = {"command": command, "version": __version__, "torch": torch.__version__,
           "seed": pipeline.seed if pipeline is not None else arg_dict.get("seed"),
           "config_hash": config_hash(resolved)}
    if extra:
        run.update(extra)
    _write_json(out / "run.json", run)


def _load_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise IMRSegError(f"cannot read image {path}: {exc}") from exc


def _fit(image, size):
    if image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def _save_mask(mask, path, size=None):
    arr = np.asarray(mask.detach().cpu() if torch.is_tensor(mask) else mask).astype(np.uint8) * 255
    im = Image.fromarray(arr, mode="L")
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.NEAREST)
    im.save(path)


def _save_soft(soft, path):
    arr = np.clip(np.round(soft.detach().cpu().numpy() * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    out = _prepare_out(args.out, args.force)
    # object radii scale with the canvas (defaults are tuned for 64 px)
    scale = args.resolution / 64
    spec = SyntheticSpec(n_classes=args.n_classes, images_per_class=args.images_per_class,
                         resolution=args.resolution, min_radius=9.0 * scale, max_radius=20.0 * scale,
                         distractor_count=args.distractors, seed=args.seed)
    if not 1 <= spec.n_classes <= len(TOY_CLASSES):
        raise ConfigError(f"--n-classes must be in [1, {len(TOY_CLASSES)}]")
    index = generate_synthetic_dataset(spec, out_dir=out)
    _record_run(out, "synth", args)
    print(f"wrote {len(index.all_records())} images in {len(index.classes)} classes to {out}")
    return 0


def cmd_maskinit(args):
    base, _ = _read_config_file(args.config)
    cfg = resolve_pipeline(args, base)
    provider = build_provider(cfg.provider)
    out = _prepare_out(args.out, args.force)
    for path in args.image:
        image = _load_image(path)
        est = initial_mask(provider, image.astype(np.float32) / 255.0, args.class_label,
                           method=cfg.init_method, mode="soft", template=cfg.template)
        hard = binarize(est, cfg.threshold).binary
        stem = Path(path).stem
        _save_mask(hard, out / f"{stem}_mask.png")
        _save_soft(est.soft, out / f"{stem}_soft.png")
        write_tensor(out / f"{stem}_soft.imrt", est.soft.numpy())
        print(f"{path}: foreground fraction {float(hard.float().mean()):.3f}")
    _record_run(out, "maskinit", args, cfg)
    return 0


def cmd_train(args):
    base, _ = _read_config_file(args.config)
    cfg = resolve_pipeline(args, base)
    index = load_dataset(args.data)
    if tuple(index.resolution) != (cfg.arch.image_size, cfg.arch.image_size):
        raise ConfigError(f"dataset resolution {index.resolution} != arch.image_size {cfg.arch.image_size}")
    out = _prepare_out(args.out, args.force)
    _record_run(out, "train", args, cfg)
    model, records = train(index, cfg, log_path=out / "train_log.jsonl")
    save_model(model, out / "checkpoint")
    _write_json(out / "run.json", {**json.loads((out / "run.json").read_text()),
                                   "checkpoint_digest": tree_digest(out / "checkpoint"),
                                   "final_loss": records[-1]["loss"]})
    print(f"trained {len(records) and records[-1]['step']} steps; final loss {records[-1]['loss']:.4f}; "
          f"checkpoint in {out / 'checkpoint'}")
    return 0


def cmd_eval(args):
    model, _ = load_model(args.checkpoint)
    index = load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    report = evaluate(model, index, fold=args.fold, episodes=args.episodes, k=args.k, mode=args.mode,
                      seed=args.seed, averaging=args.averaging, workers=args.workers)
    report.to_json(out / "report.json")
    report.to_csv(out / "episodes.csv")
    table = report.render_table()
    (out / "report.txt").write_text(table + "\n")
    if args.plot:
        plot_step_miou(report, out / "step_miou.png")
    _record_run(out, "eval", args, model.config, {"report_config_hash": report.config_hash, "seed": args.seed,
                                                   "training_seed": model.config.seed})
    print(table)
    return 0


def cmd_predict(args):
    model, _ = load_model(args.checkpoint)
    cfg = model.config
    provider = build_provider(cfg.provider)
    if args.class_label not in getattr(provider, "classes", (args.class_label,)):
        raise UnknownClassError(f"unknown class {args.class_label!r}")
    out = _prepare_out(args.out, args.force)
    size = cfg.arch.image_size
    query_raw = _load_image(args.query)
    query = _fit(query_raw, size)
    if args.mode == "zero-shot":
        if args.support:
            raise UsageError("--support is not used in zero-shot mode")
        final, traj = predict_zero_shot(model, provider, query, args.class_label)
        steps = [est.soft[0] >= cfg.threshold for est in traj.query]
    else:
        if not args.support:
            raise UsageError("few-shot prediction needs at least one --support image")
        supports = [_fit(_load_image(p), size) for p in args.support]
        runs = [predict_query(model, provider, s, query, args.class_label) for s in supports]
        per_support = [[est.soft[0] >= cfg.threshold for est in traj.query] for _, traj in runs]
        if len(runs) == 1:
            steps = per_support[0]
        else:
            steps = [binarize(aggregate_k_shot([p[t] for p in per_support]), cfg.threshold).binary
                     for t in range(len(per_support[0]))]
        final = steps[-1]
    _save_mask(final, out / "mask.png", query_raw.shape[:2])
    if args.trace:
        trace = out / "trace"
        trace.mkdir(exist_ok=True)
        for t, m in enumerate(steps):
            _save_mask(m, trace / f"step_{t}.png", query_raw.shape[:2])
        plot_trajectory(query, [np.asarray(m) for m in steps], out / "trajectory.png")
    _record_run(out, "predict", args, cfg)
    print(f"foreground fraction {float(np.asarray(final).mean()):.3f}; mask in {out / 'mask.png'}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _bool(text):
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_common(p, out_required=True):
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty --out")
    p.add_argument("--config", type=Path, help="JSON config (a previous config.json also works)")


def _add_pipeline_flags(p):
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-path config override, e.g. arch.corr_channels=32 (repeatable)")
    p.add_argument("--steps", type=int)
    p.add_argument("--cell-variant", choices=("none", "plain_conv", "group_conv"))
    p.add_argument("--update-schedule", choices=("parallel", "alternating"))
    p.add_argument("--lambda-schedule", choices=("none", "linear", "same"))
    p.add_argument("--w-s", type=float)
    p.add_argument("--init-method", choices=("gradcam", "cosine"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--episodes", type=int, help="training episodes")
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hue-augment", type=_bool)


def build_parser():
    parser = argparse.ArgumentParser(prog="imrseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"imrseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=12)
    p.add_argument("--images-per-class", type=int, default=40)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--distractors", type=int, default=2, help="max distractor objects per image")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("maskinit", help="write initial masks for images and a class label")
    _add_common(p)
    _add_pipeline_flags(p)
    p.add_argument("--image", action="append", required=True, help="PNG image (repeatable)")
    p.add_argument("--class", dest="class_label", required=True)
    p.set_defaults(func=cmd_maskinit)

    p = sub.add_parser("train", help="episodic training on a dataset directory")
    _add_common(p)
    _add_pipeline_flags(p)
    p.add_argument("--data", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--fold", type=int, help="defaults to the training fold")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--mode", choices=("few-shot", "zero-shot"), default="few-shot")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--averaging", choices=("class", "episode"), default="class")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", type=_bool, default=True, help="write step_miou.png (default true)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one query image")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--query", type=Path)
    p.add_argument("--support", action="append", type=Path, default=None, help="support image (repeatable)")
    p.add_argument("--class", dest="class_label")
    p.add_argument("--mode", choices=("few-shot", "zero-shot"), default="few-shot")
    p.add_argument("--trace", action="store_true", help="write the mask after every step")
    p.set_defaults(func=cmd_predict)
    return parser


REQUIRED = {"train": ("data",), "eval": ("checkpoint", "data"), "predict": ("checkpoint", "query", "class_label")}


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        # arguments stored in a resolved config act as defaults; explicit flags win
        _, stored = _read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in stored.items() if k in known and k not in ("out", "force", "config")})
        args = parser.parse_args(argv)
        for k in ("data", "checkpoint", "query"):
            if isinstance(getattr(args, k, None), str):
                setattr(args, k, Path(getattr(args, k)))
        if isinstance(getattr(args, "support", None), list):
            args.support = [Path(s) for s in args.support]
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing " + ", ".join("--" + m.replace("_label", "") for m in missing))
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:          # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    except ConfigError as exc:
        print(f"imrseg: configuration error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnknownClassError) as exc:
        print(f"imrseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except (IMRSegError, OSError) as exc:
        print(f"imrseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
