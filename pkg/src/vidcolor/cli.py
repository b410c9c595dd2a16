"""Command line entry point: ``vidcolor <command> [--flags]``.

Every command accepts ``--workdir`` (all relative paths resolve against it),
``--config`` (a ``key = value`` file; explicit flags win) and ``--seed``.
Commands that produce artifacts write ``run.cfg`` next to them, which can be
fed back through ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, coerce, read_config, write_config

log = logging.getLogger("vidcolor")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# key -> (type, default, help); default None means required
_TRAIN_COMMON = {
    "data": (str, "data/train", "training dataset directory"),
    "models": (str, "models", "checkpoint directory"),
    "seed": (int, 0, "seed for every random choice"),
}

SCHEMAS: dict[str, dict[str, tuple]] = {
    "make-toy-data": {
        "output": (str, "data/train", "dataset directory to create"),
        "clips": (int, 512, "number of clips"),
        "frames": (int, 8, "frames per clip"),
        "height": (int, 32, "frame height"),
        "width": (int, 32, "frame width"),
        "seed": (int, 0, "dataset seed"),
    },
    "train-ae": {
        **_TRAIN_COMMON,
        "steps": (int, 4000, "optimizer steps"),
        "batch_size": (int, 16, "frames per batch"),
        "lr": (float, 2e-3, "peak learning rate"),
        "adversarial": (bool, False, "add the patch discriminator loss"),
    },
    "train-decoder": {
        **_TRAIN_COMMON,
        "steps": (int, 2000, "optimizer steps"),
        "clips_per_batch": (int, 2, "clips per batch"),
        "lr": (float, 1e-3, "peak learning rate"),
        "latent_noise": (float, 0.0, "std of Gaussian noise added to input latents"),
    },
    "train-base": {
        **_TRAIN_COMMON,
        "steps": (int, 8000, "optimizer steps"),
        "batch_size": (int, 64, "latents per batch"),
        "lr": (float, 1e-3, "peak learning rate"),
        "ema_decay": (float, 0.999, "EMA decay, 0 disables"),
    },
    "train-coordinator": {
        **_TRAIN_COMMON,
        "steps": (int, 6000, "optimizer steps"),
        "batch_size": (int, 32, "frame pairs per batch"),
        "lr": (float, 1e-3, "peak learning rate"),
        "stage1_fraction": (float, 0.5, "share of steps with clean references"),
        "max_gap": (int, 2, "largest frame distance between target and reference"),
        "ema_decay": (float, 0.999, "EMA decay, 0 disables"),
    },
    "colorize": {
        "input": (str, None, "grayscale (or RGB) clip or dataset directory"),
        "output": (str, None, "output directory"),
        "models": (str, "models", "checkpoint directory"),
        "steps": (int, 50, "sampling steps"),
        "strategy": (str, "alternated", "alternated | unidirectional | autoregressive | single_frame"),
        "guidance": (float, 1.0, "classifier-free guidance scale"),
        "prompt": (str, "", "caption; empty uses each clip's caption.txt"),
        "negative_prompt": (str, "", "caption for the unconditional branch"),
        "decoder": (str, "video", "video | per-frame"),
        "seed": (int, 0, "sampling seed"),
    },
    "evaluate": {
        "pred": (str, None, "colorized clips"),
        "gt": (str, None, "ground-truth clips"),
        "metrics": (str, "psnr,ssim,colorfulness,cdc", "comma-separated metric list (may be empty)"),
        "output": (str, "report.txt", "report path"),
    },
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidcolor", description="Toy reference-propagating video colorization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--workdir", default=".", help="base directory for relative paths")
        p.add_argument("--config", default=None, help="key = value settings file")
        for key, (kind, default, text) in schema.items():
            if kind is bool:
                p.add_argument(_flag(key), dest=key, default=None, choices=("true", "false"), help=text)
            else:
                shown = "required" if default is None else f"default {default!r}"
                p.add_argument(_flag(key), dest=key, default=None, type=kind, help=f"{text} ({shown})")
    return parser


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags; missing required keys are usage errors."""
    schema = SCHEMAS[command]
    types = {k: v[0] for k, v in schema.items()}
    defaults = {k: v[1] for k, v in schema.items()}
    settings = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_absolute():
            path = Path(args.workdir) / path
        settings.update(coerce(read_config(path), types))
    for key in schema:
        value = getattr(args, key)
        if value is not None:
            settings[key] = coerce({key: str(value)}, types)[key] if types[key] is bool else value
    missing = [_flag(k) for k, v in settings.items() if v is None]
    if missing:
        raise UsageError(f"vidcolor {command}: missing required {', '.join(missing)}")
    return settings


def _path(workdir: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else workdir / p


def _record(directory: Path, command: str, settings: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_config(directory / "run.cfg", settings, header=f"vidcolor {command}")


def run(command: str, settings: dict, workdir: Path) -> None:
    torch.set_num_threads(1)
    s = settings
    if command == "make-toy-data":
        from .toy_data import generate_dataset

        out = _path(workdir, s["output"])
        generate_dataset(s["seed"], s["clips"], s["frames"], s["height"], s["width"], out)
        _record(out, command, s)
        return
    if command == "evaluate":
        from .metrics import METRICS, evaluate_report

        metrics = [m.strip() for m in s["metrics"].split(",") if m.strip()]
        unknown = [m for m in metrics if m not in METRICS]
        if unknown:
            raise UsageError(f"unknown metrics {unknown}; choose from {METRICS}")
        report = evaluate_report(_path(workdir, s["pred"]), _path(workdir, s["gt"]), metrics, config=s)
        out = _path(workdir, s["output"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_text(), encoding="utf-8")
        return
    if command == "colorize":
        from .diffusion import make_schedule
        from .pipeline import DECODERS, colorize_dir, load_models
        from .sampler import SamplingConfig

        if s["decoder"] not in DECODERS:
            raise UsageError(f"--decoder must be one of {DECODERS}")
        try:
            cfg = SamplingConfig(s["strategy"], s["steps"], s["guidance"], s["seed"], schedule=make_schedule())
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        models = load_models(_path(workdir, s["models"]), need_video_decoder=s["decoder"] == "video")
        out = _path(workdir, s["output"])
        colorize_dir(_path(workdir, s["input"]), out, models, cfg, s["prompt"] or None,
                     s["negative_prompt"], s["decoder"])
        _record(out, command, s)
        return

    from . import pipeline

    data, models = _path(workdir, s["data"]), _path(workdir, s["models"])
    if command == "train-ae":
        from .autoencoder import AETrainConfig

        cfg = AETrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
                            adversarial=s["adversarial"], seed=s["seed"])
        pipeline.train_ae_stage(data, models, cfg)
    elif command == "train-decoder":
        from .autoencoder import VideoDecoderTrainConfig

        cfg = VideoDecoderTrainConfig(steps=s["steps"], clips_per_batch=s["clips_per_batch"], lr=s["lr"],
                                      latent_noise=s["latent_noise"], seed=s["seed"])
        pipeline.train_decoder_stage(data, models, cfg)
    elif command == "train-base":
        from .diffusion import BaseTrainConfig

        cfg = BaseTrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
                              ema_decay=s["ema_decay"], seed=s["seed"])
        pipeline.train_base_stage(data, models, cfg)
    elif command == "train-coordinator":
        from .coordinator import CoordinatorTrainConfig

        cfg = CoordinatorTrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
                                     stage1_fraction=s["stage1_fraction"], max_gap=s["max_gap"],
                                     ema_decay=s["ema_decay"], seed=s["seed"])
        pipeline.train_coordinator_stage(data, models, cfg)
    else:  # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown command {command!r}")
    _record(models, command, s)
    # stages share the models directory; keep a per-stage copy as well
    write_config(models / f"{command}.run.cfg", s, header=f"vidcolor {command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = resolve_settings(args.command, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"vidcolor: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        run(args.command, settings, Path(args.workdir))
    except UsageError as exc:
        print(f"vidcolor {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"vidcolor {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
