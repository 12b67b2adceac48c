"""Command-line entry point: gen-data, train, ablate, predict, eval, inspect.

Settings resolve in order: built-in defaults (the ``benchmark`` preset),
``--preset``, ``--config FILE`` (JSON object of flag names), then explicit
flags. Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import presets
from .flowest import BlockParams, FlowProviderKind
from .formats import FormatError, decode_flo, read_checkpoint_header, read_pgm, write_pgm
from .infereval import evaluate, predict_frames, render_grid
from .model import load_bundle
from .synthdata import SynthConfig, dataset_digest, generate_dataset, read_dataset, read_manifest, to_uint8, write_dataset
from .trainer import STAGES, TrainingError, evaluate_order_accuracy, latest_checkpoint, prepare_data, run_schedule

log = logging.getLogger("shufflepred")

# Resolvable settings and their built-in defaults; presets and config files may set any of these.
DEFAULTS = {
    **presets.PRESETS["benchmark"],
    "clips": 100, "seed": 0, "flow": "analytic", "bm_patch": 5, "bm_radius": 4, "stage": "all",
    "grid_format": "pgm",
}
RESOLVED = {
    "gen-data": ("clips", "frames", "size", "sprites", "speed_min", "speed_max", "sprite_size", "seed"),
    "train": ("stage", "epochs", "stage_epochs", "lr", "batch_size", "seed", "flow", "bm_patch", "bm_radius",
              "context", "horizon", "channels", "latent_dim", "lstm_hidden", "early_stop", *presets.WEIGHT_KEYS),
    "predict": ("context", "horizon", "flow", "bm_patch", "bm_radius", "grid_format"),
    "eval": ("context", "horizon", "flow", "bm_patch", "bm_radius"),
    "inspect": (),
}
RESOLVED["ablate"] = RESOLVED["train"]


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative number, got {text}")
    return value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of settings (keys are flag names with underscores)")
    p.add_argument("--preset", choices=sorted(presets.PRESETS), help="named base configuration")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_flow(p: argparse.ArgumentParser) -> None:
    p.add_argument("--flow", choices=[k.value for k in FlowProviderKind], help="flow provider (default analytic)")
    p.add_argument("--bm-patch", type=_positive(int), help="block-matching patch size (odd, default 5)")
    p.add_argument("--bm-radius", type=_positive(int), help="block-matching search radius (default 4)")


def _add_horizon(p: argparse.ArgumentParser) -> None:
    p.add_argument("--context", type=_positive(int), help="observed frames t (default 10)")
    p.add_argument("--horizon", type=_positive(int), help="predicted frames k (default 10)")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory (one subdirectory per stage)")
    p.add_argument("--stage", choices=("all",) + STAGES,
                   help="stage to run; earlier stages are loaded from --ckpt (default all)")
    p.add_argument("--epochs", type=_positive(int), help="epoch budget for every stage")
    p.add_argument("--lr", type=_positive(float), help="ADAM learning rate (default 1e-5)")
    p.add_argument("--batch-size", type=_positive(int))
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=_positive(int), help="base conv width")
    p.add_argument("--latent-dim", type=_positive(int), help="feature size d")
    p.add_argument("--lstm-hidden", type=_positive(int))
    p.add_argument("--no-early-stop", dest="early_stop", action="store_const", const=False,
                   help="always run the full epoch budget")
    p.add_argument("--retrain", action="store_true", help="retrain requested stages even if checkpoints exist")
    for key in presets.WEIGHT_KEYS:
        p.add_argument(f"--{key}", type=_nonneg_float, help=f"loss weight {key}")
    _add_horizon(p)
    _add_flow(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shufflepred", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bouncing-sprite dataset", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=int, help="number of clips (default 100)")
    p.add_argument("--frames", type=_positive(int), help="frames per clip (default 20)")
    p.add_argument("--size", type=_positive(int), help="frame height and width (default 64)")
    p.add_argument("--sprites", type=_positive(int), help="sprites per clip (default 2)")
    p.add_argument("--speed-min", type=_positive(int))
    p.add_argument("--speed-max", type=_positive(int))
    p.add_argument("--sprite-size", type=_positive(int), help="sprite side in pixels (default size // 4)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run the staged training schedule", allow_abbrev=False)
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("ablate", help="train with the shuffle discriminator switched off", allow_abbrev=False)
    _add_common(p)
    _add_train(p)
    p.add_argument("--no-shuffle", action="store_true", help="set lambda3 = 0")

    p = sub.add_parser("predict", help="roll out future frames from a checkpoint", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory (a stage or the run root)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid-format", choices=["pgm", "png"])
    _add_horizon(p)
    _add_flow(p)

    p = sub.add_parser("eval", help="per-horizon PSNR/SSIM against ground truth", allow_abbrev=False)
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", type=Path, help="directory written by predict")
    src.add_argument("--ckpt", type=Path, help="checkpoint to roll out")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_horizon(p)
    _add_flow(p)

    p = sub.add_parser("inspect", help="describe a dataset, checkpoint, .flo or .pgm", allow_abbrev=False)
    _add_common(p)
    p.add_argument("path", type=Path)
    return parser


# ---------------------------------------------------------------- settings

def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    obj = {k.replace("-", "_"): v for k, v in obj.items()}
    unknown = sorted(set(obj) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    return obj


def resolve(args: argparse.Namespace) -> dict:
    values = dict(DEFAULTS)
    if args.preset:
        values.update(presets.preset_values(args.preset))
    values.update(_load_config(args.config))
    keys = RESOLVED[args.command]
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
            if key == "epochs":
                values["stage_epochs"] = None
    if args.command == "ablate" and args.no_shuffle:
        values["lambda3"] = 0.0
    return {k: values[k] for k in keys}


def _announce(command: str, settings: dict) -> None:
    print(json.dumps({"command": command, "seed": settings.get("seed"), "config": settings},
                     indent=2, sort_keys=True), flush=True)


def _load_data(path: Path, settings: dict):
    clips, flows, manifest = read_dataset(path)
    gen = manifest.generator
    bound = SynthConfig(**gen).flow_bound if gen else 4.0
    block = BlockParams(settings["bm_patch"], settings["bm_radius"])
    block.validate()
    return prepare_data(clips, flows, settings["flow"], bound, block), manifest


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, settings) -> None:
    if settings["clips"] < 1:
        raise UsageError(f"--clips must be at least 1, got {settings['clips']}")
    cfg = presets.synth_config(settings)
    cfg.validate()
    clips, flows, manifest = generate_dataset(cfg, settings["clips"], settings["seed"])
    write_dataset(clips, flows, manifest, args.out)
    print(json.dumps({"dataset": str(args.out), "clips": len(clips), "digest": dataset_digest(args.out)}))


def cmd_train(args, settings) -> None:
    data, manifest = _load_data(args.data, settings)
    t, k = settings["context"], settings["horizon"]
    if manifest.frames < t + k:
        raise UsageError(f"clips have {manifest.frames} frames; context {t} + horizon {k} needs {t + k}")
    net = presets.net_config(settings, manifest.height, manifest.width)
    cfg = presets.train_config(settings)
    cfg.validate()
    if args.command == "ablate" and args.no_shuffle:
        log.info("ablation: shuffle discriminator disabled (lambda3 = 0)")
    stages = STAGES if settings["stage"] == "all" else (settings["stage"],)
    bundle, tlog = run_schedule(data, cfg, net, args.ckpt, stages=stages, resume=not args.retrain)
    result = {"checkpoint": str(latest_checkpoint(args.ckpt)), "stages_done": bundle.stages_done}
    if "motion" in bundle.stages_done:
        result["order_accuracy"] = evaluate_order_accuracy(bundle, data, t, k, seed=settings["seed"])
    print(json.dumps(result, sort_keys=True))


def _checkpoint(path: Path, settings: dict):
    bundle, _ = load_bundle(latest_checkpoint(path))
    if settings["context"] != bundle.cfg.context:
        log.info("using the checkpoint's context length %d", bundle.cfg.context)
        settings["context"] = bundle.cfg.context
    return bundle


def cmd_predict(args, settings) -> None:
    bundle = _checkpoint(args.ckpt, settings)
    data, _ = _load_data(args.data, settings)
    t, k = settings["context"], settings["horizon"]
    preds = predict_frames(bundle, data, t, k)
    grids = args.out / "grids"
    grids.mkdir(parents=True, exist_ok=True)
    for i, cid in enumerate(data.clip_ids):
        cdir = args.out / "clips" / str(cid)
        cdir.mkdir(parents=True, exist_ok=True)
        for h in range(k):
            write_pgm(cdir / f"pred_{h:03d}.pgm", to_uint8(preds[i, h]))
        frames = data.frames[i, :, 0].numpy()
        render_grid(frames[:t], preds[i], frames[t : t + k], grids / f"{cid}.{settings['grid_format']}")
    (args.out / "predictions.json").write_text(json.dumps(
        {"clips": [int(c) for c in data.clip_ids], "context": t, "horizon": k}, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"predictions": str(args.out), "clips": len(data), "horizon": k}))


def _stored_predictions(root: Path, clip_ids, k: int) -> dict:
    stored = {}
    for cid in clip_ids:
        cdir = root / "clips" / str(cid)
        files = [cdir / f"pred_{h:03d}.pgm" for h in range(k)]
        missing = [f for f in files if not f.is_file()]
        if missing:
            raise FormatError(f"{missing[0]}: missing predicted frame")
        stored[cid] = np.stack([read_pgm(f) for f in files]).astype(np.float64) / 255.0
    return stored


def cmd_eval(args, settings) -> None:
    if args.ckpt is not None:
        source = _checkpoint(args.ckpt, settings)
    data, _ = _load_data(args.data, settings)
    t, k = settings["context"], settings["horizon"]
    if args.pred is not None:
        source = _stored_predictions(args.pred, data.clip_ids, k)
    series = evaluate(source, data, t, k, out_dir=args.out)
    for row in series.per_horizon():
        print(f"horizon {row['horizon']:3d}  psnr {row['psnr_mean']:8.4f} dB  ssim {row['ssim_mean']:.4f}")


def cmd_inspect(args, settings) -> None:
    path = args.path
    if (path / "manifest.json").is_file():
        m = read_manifest(path)
        info = {"kind": "dataset", "clips": m.clip_count, "frames": m.frames, "size": [m.height, m.width],
                "sprites": m.sprites_per_clip, "seed": m.seed, "version": m.version, "digest": dataset_digest(path)}
    elif path.is_dir():
        ck = latest_checkpoint(path)
        header = read_checkpoint_header(ck)
        config = json.loads((ck / "config.json").read_text(encoding="utf-8"))
        info = {"kind": "checkpoint", "path": str(ck), "seed": header.seed, "tensors": len(header.entries),
                "parameters": sum(int(np.prod(e.shape)) for e in header.entries),
                "config_digest": header.config_digest, "meta": header.meta, "net": config.get("net")}
    elif path.suffix == ".flo":
        u, v = decode_flo(path.read_bytes(), str(path))
        info = {"kind": "flow", "size": list(u.shape), "u_range": [float(u.min()), float(u.max())],
                "v_range": [float(v.min()), float(v.max())]}
    elif path.suffix == ".pgm":
        img = read_pgm(path)
        info = {"kind": "image", "size": list(img.shape), "range": [int(img.min()), int(img.max())]}
    else:
        raise FormatError(f"{path}: not a dataset, checkpoint, .flo or .pgm")
    print(json.dumps(info, indent=2, sort_keys=True))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        settings = resolve(args)
        if args.command != "inspect":
            _announce(args.command, settings)
        COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
