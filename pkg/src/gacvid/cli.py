"""Command-line entry point: ``gacvid <subcommand> ...``.

Subcommands run the pipeline stage by stage:

    synth-data -> preprocess -> train-layout -> train-appearance -> generate -> evaluate

Every stage writes its artifacts plus a ``run_manifest.json`` recording the
command, config hash and input hashes. Logs go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core_types import TrainingConfig
from .errors import (
    ConfigError,
    FormatError,
    GacError,
    InsufficientPersons,
    InvalidSpec,
    MissingArtifact,
    NonFinite,
    OddLength,
)

log = logging.getLogger("gacvid")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5

SYNTH_DEFAULTS = {"n_train": 12, "n_test": 4, "n_frames": 48, "frame_size": [128, 96], "seed": 0}
CONFIG_VERSION = 1


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, sort_keys=True)


class _JsonHandler(logging.StreamHandler):
    pass


def setup_logging(level: str) -> None:
    """Send JSON lines to stderr, replacing a handler from an earlier call."""
    handler = _JsonHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [h for h in root.handlers if not isinstance(h, _JsonHandler)] + [handler]
    root.setLevel(level.upper())


def emit(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


# -- config and provenance -------------------------------------------------------

def read_json_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return obj


def load_synth_config(path: str | None, seed: int | None) -> dict:
    cfg = dict(SYNTH_DEFAULTS)
    if path is not None:
        obj = read_json_file(path)
        if obj.pop("version", None) != CONFIG_VERSION:
            raise ConfigError(f"{path}: missing or unsupported \"version\" (expected {CONFIG_VERSION})")
        unknown = sorted(set(obj) - set(SYNTH_DEFAULTS))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        cfg.update(obj)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["n_frames"] % 2:
        raise OddLength(f"n_frames={cfg['n_frames']} is odd; clips are split into equal motion and appearance halves")
    if cfg["n_train"] < 0 or cfg["n_test"] < 0:
        raise ConfigError("clip counts must be >= 0")
    return cfg


def load_training_config(path: str | None, seed: int | None) -> TrainingConfig:
    cfg = TrainingConfig() if path is None else TrainingConfig.from_json(read_json_file(path))
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict | None, inputs: dict[str, str], extra=None) -> None:
    manifest = {
        "gacvid_version": __version__,
        "command": command,
        "config": config,
        "config_hash": sha256_bytes(json.dumps(config, sort_keys=True).encode()) if config is not None else None,
        "inputs": inputs,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def require_dataset(root: str | Path) -> Path:
    root = Path(root)
    if not (root / "manifest.json").is_file():
        raise MissingArtifact(f"no dataset at {root} (run `gacvid synth-data` first)")
    return root


def cache_dir() -> Path:
    return Path(os.environ.get("GACVID_CACHE", Path.home() / ".cache" / "gacvid"))


def default_conditions_dir(data: Path) -> Path:
    key = sha256_bytes((data / "manifest.json").read_bytes())[:16]
    return cache_dir() / "conditions" / key


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# -- subcommands -------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .toy_data import synth_corpus, write_dataset

    cfg = load_synth_config(args.config, args.seed)
    corpus = synth_corpus(cfg["n_train"], cfg["n_test"], cfg["n_frames"], tuple(cfg["frame_size"]), cfg["seed"])
    out = Path(args.out)
    write_dataset(corpus, out)
    write_manifest(out, "synth-data", cfg, {})
    emit("dataset written", path=str(out), clips=cfg["n_train"] + cfg["n_test"])
    return EXIT_OK


def _preprocess_clip(item):
    from .preprocessing import AppearanceLibrary, make_condition_record, save_conditions
    from .toy_data import split_clip

    clip, sigma, out = item
    motion, appearance = split_clip(clip)
    library = AppearanceLibrary.from_frames(appearance, clip.person)
    records = [make_condition_record(f.frame_id, f.pose, library, sigma) for f in motion]
    save_conditions(records, out / clip.name, {"clip": clip.name, "person": clip.person, "sigma": sigma})
    return clip.name


def cmd_preprocess(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .toy_data import read_dataset

    data = require_dataset(args.data)
    cfg = load_training_config(args.config, args.seed)
    out = Path(args.out) if args.out else default_conditions_dir(data)
    clips = read_dataset(data)
    items = [(c, cfg.pose_sigma, out) for c in clips]
    with ThreadPoolExecutor(max_workers=max(1, args.workers or 1)) as pool:
        for name in pool.map(_preprocess_clip, items):
            emit("conditions written", clip=name)
    write_manifest(out, "preprocess", cfg.to_json(), {"dataset": sha256_bytes((data / "manifest.json").read_bytes())})
    emit("preprocessing done", path=str(out), clips=len(clips))
    return EXIT_OK


def _load_train_clips(args, cfg):
    from .preprocessing import load_conditions
    from .training import prepare_training_set
    from .toy_data import read_dataset

    data = require_dataset(args.data)
    clips = read_dataset(data, split="train")
    if not clips:
        raise MissingArtifact(f"dataset {data} has no training clips")
    cond_dir = Path(args.conditions) if args.conditions else default_conditions_dir(data)
    records = {}
    for c in clips:
        if (cond_dir / c.name / "index.json").is_file():
            records[c.name], _ = load_conditions(cond_dir / c.name)
        elif args.conditions:
            raise MissingArtifact(f"no conditions for {c.name} in {cond_dir} (run `gacvid preprocess`)")
    if args.clips:
        wanted = set(args.clips)
        missing = wanted - {c.name for c in clips}
        if missing:
            raise ConfigError(f"unknown training clips {sorted(missing)}")
    train = [c for c in clips if not args.clips or c.name in args.clips]
    return data, prepare_training_set(clips, cfg, records), {c.name for c in train}


def cmd_train_layout(args) -> int:
    from .training import train_layout_gan

    cfg = load_training_config(args.config, args.seed)
    seed_everything(cfg.seed)
    data, clips, names = _load_train_clips(args, cfg)
    out = Path(args.out)
    res = train_layout_gan([c for c in clips if c.name in names], cfg, out, resume=args.resume, steps=args.steps)
    write_manifest(out, "train-layout", cfg.to_json(),
                   {"dataset": sha256_bytes((data / "manifest.json").read_bytes())},
                   {"checkpoint": str(res.checkpoint)})
    last = res.reports[-1].terms if res.reports else {}
    emit("layout training done", checkpoint=str(res.checkpoint), steps=res.trainer.step_count, **last)
    return EXIT_OK


def cmd_train_appearance(args) -> int:
    from .training import train_appearance_gan

    cfg = load_training_config(args.config, args.seed)
    seed_everything(cfg.seed)
    data, clips, names = _load_train_clips(args, cfg)
    train = [c for c in clips if c.name in names]
    pool = [c for c in clips if c.name not in names]
    out = Path(args.out)
    source = "layout_checkpoint" if args.layout_source == "generated" else "ground_truth"
    res = train_appearance_gan(train, cfg, source, args.layout_checkpoint, out, pair_pool=pool,
                               resume=args.resume, steps=args.steps)
    inputs = {"dataset": sha256_bytes((data / "manifest.json").read_bytes())}
    if args.layout_checkpoint:
        from .inference import file_sha256, resolve_checkpoint
        inputs["layout_checkpoint"] = file_sha256(resolve_checkpoint(args.layout_checkpoint))
    write_manifest(out, "train-appearance", cfg.to_json(), inputs, {"checkpoint": str(res.checkpoint)})
    last = res.reports[-1].terms if res.reports else {}
    emit("appearance training done", checkpoint=str(res.checkpoint), steps=res.trainer.step_count, **last)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .inference import generate_video, resolve_checkpoint
    from .preprocessing import AppearanceLibrary
    from .toy_data import extract_background, read_dataset, read_rgb_png, split_clip, write_rgb_png

    for flag, value in (("--layout-checkpoint", args.layout_checkpoint),
                        ("--appearance-checkpoint", args.appearance_checkpoint)):
        if value is None:
            raise MissingArtifact(f"{flag} is required")
        resolve_checkpoint(value)
    seed_everything(args.seed or 0)
    data = require_dataset(args.data)
    clips = {c.name: c for c in read_dataset(data)}
    if args.clip:
        unknown = [n for n in args.clip if n not in clips]
        if unknown:
            raise ConfigError(f"unknown clips {unknown}")
        motion_names = args.clip
    else:
        motion_names = [c.name for c in read_dataset(data, split=args.split)]
    if args.appearance_clip and args.appearance_clip not in clips:
        raise ConfigError(f"unknown appearance clip {args.appearance_clip}")
    background = read_rgb_png(args.background) if args.background else None
    out = Path(args.out)
    for name in motion_names:
        motion, _ = split_clip(clips[name])
        app_clip = clips[args.appearance_clip or name]
        _, appearance = split_clip(app_clip)
        library = AppearanceLibrary.from_frames(appearance, app_clip.person)
        bg = background if background is not None else extract_background(app_clip)
        cdir = out / name
        generate_video([f.pose for f in motion], library, bg, args.layout_checkpoint,
                       args.appearance_checkpoint, cdir, erode=args.erode)
        if app_clip.person == clips[name].person:
            gt = cdir / "ground_truth"
            gt.mkdir(parents=True, exist_ok=True)
            for k, f in enumerate(motion):
                write_rgb_png(gt / f"frame_{k:04d}.png", f.image)
        emit("clip generated", clip=name, appearance=app_clip.name, frames=len(motion))
    write_manifest(out, "generate", {"erode": args.erode, "clips": motion_names, "appearance_clip": args.appearance_clip},
                   {"dataset": sha256_bytes((data / "manifest.json").read_bytes()),
                    "background": sha256_bytes(Path(args.background).read_bytes()) if args.background else None})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_run, list_frames, report_markdown

    gen = Path(args.generated)
    if not gen.is_dir():
        raise MissingArtifact(f"no generated frames at {gen}")
    plugins = {}
    for spec in args.plugin or []:
        name, sep, cmd = spec.partition("=")
        if not sep or not name or not cmd:
            raise ConfigError(f"plugin must look like name=command, got {spec!r}")
        plugins[name] = cmd
    if list_frames(gen):
        gt = Path(args.ground_truth) if args.ground_truth else gen / "ground_truth"
        if not gt.is_dir():
            raise MissingArtifact(f"no ground-truth frames at {gt}")
        report = evaluate_run(gen, gt, plugins)
    else:
        runs = sorted(d for d in gen.iterdir() if d.is_dir() and list_frames(d))
        if not runs:
            raise MissingArtifact(f"no generated frames under {gen}")
        per_clip = {}
        for d in runs:
            gt = d / "ground_truth"
            if not gt.is_dir():
                emit("skipping clip without ground truth", clip=d.name)
                continue
            per_clip[d.name] = evaluate_run(d, gt, plugins)
        if not per_clip:
            raise MissingArtifact(f"no clip under {gen} has ground truth")
        report = {"n_clips": len(per_clip), "clips": {k: {m: v[m] for m in v if m != "frames"}
                                                     for k, v in per_clip.items()}}
        for m in ("ssim", "psnr", "temporal_stability", "lpips", "vfid", *plugins):
            vals = [v.get(m) for v in per_clip.values()]
            report[m] = None if any(x is None for x in vals) else float(np.mean(vals))
        report["n_frames"] = sum(v["n_frames"] for v in per_clip.values())
        (gen / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        (gen / "report.md").write_text(report_markdown(report))
    emit("evaluation done", ssim=report["ssim"], psnr=report["psnr"])
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gacvid", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"gacvid {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random generator (overrides config)")
    common.add_argument("--workers", type=int, default=None,
                        help="worker threads for preprocessing and torch ops (default: torch's choice)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"],
                        help="stderr log level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", parents=[common], help="render a toy dataset",
                       description="Render a synthetic dataset of toy clips (frames, layouts, poses, shadows).")
    s.add_argument("--config", help="JSON config with version, n_train, n_test, n_frames, frame_size, seed")
    s.add_argument("--out", required=True, help="dataset directory to write")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("preprocess", parents=[common], help="build per-frame condition tensors",
                       description="Select and normalise appearance conditions for every motion frame.")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="training config JSON (for pose_sigma)")
    s.add_argument("--out", help="conditions directory (default: $GACVID_CACHE/conditions/<dataset hash>)")
    s.set_defaults(func=cmd_preprocess)

    for name, func, text in (("train-layout", cmd_train_layout, "train the layout GAN"),
                             ("train-appearance", cmd_train_appearance, "train the appearance GAN")):
        s = sub.add_parser(name, parents=[common], help=text, description=text[0].upper() + text[1:] + " on the training split.")
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--config", help="training config JSON (must contain \"version\")")
        s.add_argument("--conditions", help="preprocessed conditions directory (default: cache, else computed)")
        s.add_argument("--out", required=True, help="run directory for checkpoints and loss logs")
        s.add_argument("--steps", type=int, help="number of steps (default: configured budget)")
        s.add_argument("--resume", help="checkpoint step directory to resume from")
        s.add_argument("--clips", nargs="+", help="train on these clips only (others serve as pair partners)")
        if name == "train-appearance":
            s.add_argument("--layout-source", choices=["ground-truth", "generated"], default="ground-truth",
                           help="feed true layouts or layouts from --layout-checkpoint")
            s.add_argument("--layout-checkpoint", help="layout checkpoint (file, step or stage directory)")
        s.set_defaults(func=func)

    s = sub.add_parser("generate", parents=[common], help="render motion-transfer videos",
                       description="Generate frames for motion clips using trained checkpoints.")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--layout-checkpoint", help="layout checkpoint (file, step or stage directory)")
    s.add_argument("--appearance-checkpoint", help="appearance checkpoint (file, step or stage directory)")
    s.add_argument("--clip", nargs="+", help="motion clips (default: every clip in --split)")
    s.add_argument("--split", default="test", help="split used when --clip is absent")
    s.add_argument("--appearance-clip", help="clip providing the target appearance (default: the motion clip)")
    s.add_argument("--background", help="background PNG (default: background extracted from the appearance clip)")
    s.add_argument("--erode", type=int, default=0, help="erode the foreground mask by this many pixels")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="score generated frames",
                       description="Compute SSIM, PSNR and temporal stability against ground truth.")
    s.add_argument("--generated", required=True, help="generated clip directory, or a generate output directory")
    s.add_argument("--ground-truth", help="ground-truth frames (default: <generated>/ground_truth)")
    s.add_argument("--plugin", action="append", help="extra metric as name=command, run as `command GEN GT`")
    s.set_defaults(func=cmd_evaluate)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NonFinite):
        return EXIT_NUMERIC
    if isinstance(exc, MissingArtifact):
        return EXIT_MISSING
    if isinstance(exc, (ConfigError, InvalidSpec, OddLength, InsufficientPersons)):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if args.workers:
        torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except (GacError, OSError) as exc:
        code = exit_code_for(exc)
        log.error(str(exc), extra={"fields": {"error": type(exc).__name__, "exit_code": code}})
        return code


if __name__ == "__main__":
    sys.exit(main())
