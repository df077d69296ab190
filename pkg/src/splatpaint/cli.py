"""Command-line front end: synthesize benchmark scenes, train, select
objects, stylize them, and render checkpoints to images.  One binary with
subcommands; flags beat config-file values beat built-in defaults."""

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from . import core, featnet, raster, scene_io, segsel, styler, synth, trainer
from .errors import DataError, DivergenceError, SplatError, ValidationError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    """Bad flags or flag values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract wants 1
    def error(self, message):
        raise UsageError(message)


SHARED = {
    "seed": 0,
    "threads": 0,      # 0 = hardware parallelism
    "verbose": False,
}

DEFAULTS = {
    "synth": {
        **SHARED,
        "objects": 3,
        "gaussians_per_object": 40,
        "background_gaussians": 60,
        "cameras": 20,
        "size": 64,
        "sh_degree": 1,
        "perturbation": 0.05,
        "mask_noise": 0.0,
        "cluster_radius": 0.45,
        "focal": 0.0,  # 0 = derived from image size
    },
    "train": {
        **SHARED,
        "iters": 30000,
        "lambda_ce": 1.0,
        "lambda_3d": 1.0,
        "snapshot_every": 0,
        "log": "",
        "prune": False,
    },
    "select": {
        **SHARED,
        "threshold": segsel.DEFAULT_THRESHOLD,
        "k": segsel.DEFAULT_KNN,
        "std_factor": segsel.DEFAULT_STD_FACTOR,
        "out": "",
    },
    "stylize": {
        **SHARED,
        "layers": "11,13,15",
        "style_scale": 1.0,
        "lr": styler.DEFAULT_LEARNING_RATE,
        "iters": styler.DEFAULT_ITERATIONS,
        "views_frac": styler.DEFAULT_VIEW_FRACTION,
        "threshold": segsel.DEFAULT_THRESHOLD,
        "weights": "",
        "log": "",
        "raw_dot": False,
    },
    "render": {
        **SHARED,
        "camera_index": -1,
        "orbit": 0,
    },
}

REQUIRED = {
    "synth": ("out",),
    "train": ("scene", "out"),
    "select": ("ckpt", "object_ids"),
    "stylize": ("ckpt", "scene", "object_ids", "style", "out"),
    "render": ("ckpt", "scene", "out"),
}


def _id_list(text):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip() != "")
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="splatpaint",
                     description="Gaussian-splat reconstruction, object "
                                 "segmentation, and localized stylization.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        # add_parser reuses the parent parser class, so the subparser
        # inherits the exit-code discipline of _Parser.error
        p = sub.add_parser(name, help=help_text,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="TOML file merged under flags")
        p.add_argument("--seed", type=int, help="global RNG seed (0)")
        p.add_argument("--threads", type=int,
                       help="worker threads; 0 = hardware count")
        p.add_argument("--verbose", action="store_true",
                       help="chatty progress on stderr")
        return p

    p = add("synth", "generate a synthetic benchmark scene")
    p.add_argument("--out", help="output scene directory")
    p.add_argument("--objects", type=int, help="object clusters (3)")
    p.add_argument("--gaussians-per-object", type=int, dest="gaussians_per_object")
    p.add_argument("--background-gaussians", type=int, dest="background_gaussians")
    p.add_argument("--cameras", type=int, help="ring cameras (20)")
    p.add_argument("--size", type=int, help="square image size (64)")
    p.add_argument("--sh-degree", type=int, dest="sh_degree")
    p.add_argument("--perturbation", type=float,
                   help="initialization noise magnitude (0.05)")
    p.add_argument("--mask-noise", type=float, dest="mask_noise",
                   help="fraction of mask pixels scrambled (0)")
    p.add_argument("--cluster-radius", type=float, dest="cluster_radius")
    p.add_argument("--focal", type=float, help="focal px; 0 derives it")

    p = add("train", "jointly reconstruct and segment a scene")
    p.add_argument("--scene", help="scene directory")
    p.add_argument("--out", help="checkpoint file to write")
    p.add_argument("--iters", type=int, help="optimizer steps (30000)")
    p.add_argument("--lambda-ce", type=float, dest="lambda_ce")
    p.add_argument("--lambda-3d", type=float, dest="lambda_3d")
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p.add_argument("--log", help="loss log JSONL path")
    p.add_argument("--prune", action="store_true",
                   help="drop near-transparent Gaussians periodically")

    p = add("select", "classify Gaussians and report an object selection")
    p.add_argument("--ckpt", help="trained checkpoint")
    p.add_argument("--object-ids", dest="object_ids",
                   help="comma-separated mask IDs, e.g. 2,5")
    p.add_argument("--threshold", type=float,
                   help="probability cutoff (0.6)")
    p.add_argument("--k", type=int, help="outlier-removal neighbors (20)")
    p.add_argument("--std-factor", type=float, dest="std_factor")
    p.add_argument("--out", help="write selection JSON here")

    p = add("stylize", "restyle selected objects against a style image")
    p.add_argument("--ckpt", help="trained checkpoint")
    p.add_argument("--scene", help="scene directory providing the views")
    p.add_argument("--object-ids", dest="object_ids")
    p.add_argument("--style", help="style image (PNG)")
    p.add_argument("--layers", help="feature layers (11,13,15)")
    p.add_argument("--style-scale", type=float, dest="style_scale")
    p.add_argument("--lr", type=float, help="SH learning rate (0.05)")
    p.add_argument("--iters", type=int, help="style steps (800)")
    p.add_argument("--views-frac", type=float, dest="views_frac")
    p.add_argument("--threshold", type=float)
    p.add_argument("--weights", help="extractor weight file; empty = seeded")
    p.add_argument("--out", help="checkpoint file to write")
    p.add_argument("--log", help="style loss JSONL path")
    p.add_argument("--raw-dot", action="store_true", dest="raw_dot",
                   help="match features by raw dot product, not cosine")

    p = add("render", "render a checkpoint to PNG images")
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--scene", help="scene directory providing cameras")
    p.add_argument("--out", help="output image directory")
    p.add_argument("--camera-index", type=int, dest="camera_index",
                   help="render this training view only")
    p.add_argument("--orbit", type=int,
                   help="render N views orbiting the scene")
    return parser


def resolve_config(command: str, explicit: dict) -> dict:
    """defaults < config file < explicit flags, with unknown keys and
    missing required flags treated as usage errors."""
    known = dict(DEFAULTS[command])
    merged = dict(known)
    path = explicit.pop("config", None)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                from_file = tomllib.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise DataError(f"config file {path}: {e}")
        for key, value in from_file.items():
            key = key.replace("-", "_")
            if key not in known and key not in REQUIRED[command]:
                raise UsageError(f"unknown config key {key!r} for "
                                 f"'{command}'")
            merged[key] = value
    merged.update(explicit)
    for key in REQUIRED[command]:
        if key not in merged:
            raise UsageError(f"'{command}' requires --{key.replace('_', '-')}")
    if int(merged["threads"]) < 0:
        raise UsageError("--threads must be >= 0")
    return merged


def _echo_config(command: str, conf: dict) -> None:
    printable = {k: conf[k] for k in sorted(conf)}
    print(f"splatpaint {command} config: "
          + json.dumps(printable, default=str), file=sys.stderr)


def _threads(conf) -> int:
    t = int(conf["threads"])
    return t if t > 0 else (os.cpu_count() or 1)


def cmd_synth(conf) -> int:
    if conf["objects"] < 1:
        raise UsageError("--objects must be >= 1")
    if conf["cameras"] < 1:
        raise UsageError("--cameras must be >= 1")
    spec = synth.SynthSpec(
        num_objects=conf["objects"],
        gaussians_per_object=conf["gaussians_per_object"],
        background_gaussians=conf["background_gaussians"],
        num_cameras=conf["cameras"],
        image_size=conf["size"],
        sh_degree=conf["sh_degree"],
        seed=conf["seed"],
        perturbation=conf["perturbation"],
        mask_noise=conf["mask_noise"],
        cluster_radius=conf["cluster_radius"],
        focal=conf["focal"] or None,
    )
    res = synth.generate(spec, conf["out"])
    print(f"scene written to {res.out_dir} "
          f"({len(res.gaussians)} Gaussians, {len(res.cameras)} views)",
          file=sys.stderr)
    return EXIT_OK


def cmd_train(conf) -> int:
    if conf["iters"] < 1:
        raise UsageError("--iters must be >= 1")
    scene = scene_io.load_scene(conf["scene"])
    out = Path(conf["out"])
    config = trainer.TrainConfig(
        iterations=conf["iters"],
        lambda_ce=conf["lambda_ce"],
        lambda_3d=conf["lambda_3d"],
        seed=conf["seed"],
        snapshot_every=conf["snapshot_every"],
        out_dir=out.parent if conf["snapshot_every"] else None,
        log_path=Path(conf["log"]) if conf["log"] else None,
        threads=_threads(conf),
        prune_opacity=conf["prune"],
    )
    result = trainer.train(scene, config)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_io.save_checkpoint(out, result.to_checkpoint())
    final = result.log[-1] if result.log else {}
    print(f"checkpoint written to {out} after {result.iterations} iters "
          f"(final losses: {json.dumps(final, default=str)})",
          file=sys.stderr)
    return EXIT_OK


def _load_selection(conf, ckpt):
    clf = trainer.LinearClassifier(ckpt.classifier_weight,
                                   ckpt.classifier_bias)
    ids = _id_list(conf["object_ids"])
    if not ids:
        raise UsageError("--object-ids must name at least one ID")
    return clf, segsel.select_object(
        ckpt.gaussians, clf, ids,
        threshold=conf["threshold"],
        k=conf.get("k", segsel.DEFAULT_KNN),
        std_factor=conf.get("std_factor", segsel.DEFAULT_STD_FACTOR))


def cmd_select(conf) -> int:
    ckpt = scene_io.load_checkpoint(conf["ckpt"])
    clf, sel = _load_selection(conf, ckpt)
    probs = segsel.classify_gaussians(ckpt.gaussians, clf)
    assigned = np.argmax(probs, axis=1)
    lines = [f"selection for IDs {list(sel.object_ids)} "
             f"at threshold {conf['threshold']}:"]
    for oid in sel.object_ids:
        total = int((assigned == oid).sum())
        kept = int(np.sum(assigned[sel.indices] == oid))
        lines.append(f"  id {oid}: {kept} selected "
                     f"({total} argmax to this id)")
    lines.append(f"  below threshold: {sel.filtered_by_threshold}")
    lines.append(f"  outliers removed: {sel.removed_as_outliers}")
    if sel.outlier_check_skipped:
        lines.append("  outlier check skipped: selection smaller than k")
    if sel.empty:
        lines.append("  warning: selection is empty")
    report = "\n".join(lines)
    print(report)
    if conf["out"]:
        payload = {
            "object_ids": list(sel.object_ids),
            "threshold": conf["threshold"],
            "indices": [int(i) for i in sel.indices],
            "probabilities": [float(p) for p in sel.probabilities],
            "filtered_by_threshold": sel.filtered_by_threshold,
            "removed_as_outliers": sel.removed_as_outliers,
            "empty": sel.empty,
        }
        with open(conf["out"], "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"selection written to {conf['out']}", file=sys.stderr)
    return EXIT_OK


def cmd_stylize(conf) -> int:
    if conf["iters"] < 1:
        raise UsageError("--iters must be >= 1")
    ckpt = scene_io.load_checkpoint(conf["ckpt"])
    scene = scene_io.load_scene(conf["scene"])
    try:
        style = scene_io.load_image(conf["style"])
    except FileNotFoundError:
        raise DataError(f"style image not found: {conf['style']}")
    _, sel = _load_selection(conf, ckpt)
    if sel.empty:
        raise ValidationError("selection is empty; nothing to stylize")
    if conf["weights"]:
        extractor = featnet.load_weights(conf["weights"])
    else:
        extractor = featnet.random_extractor(conf["seed"])
    layers = _id_list(conf["layers"])
    job = styler.StyleJob(
        selection=sel,
        style_image=style,
        style_scale=conf["style_scale"],
        layer_indices=layers,
        learning_rate=conf["lr"],
        iterations=conf["iters"],
        view_fraction=conf["views_frac"],
        seed=conf["seed"],
        raw_dot=conf["raw_dot"],
    )
    views = [(scene.frames[i].camera, scene.image(i))
             for i in range(len(scene.frames))]
    styled, log = styler.stylize(ckpt.gaussians, views, job, extractor,
                                 threads=_threads(conf))
    out = Path(conf["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_io.save_checkpoint(out, scene_io.Checkpoint(
        gaussians=styled,
        classifier_weight=ckpt.classifier_weight,
        classifier_bias=ckpt.classifier_bias,
        iterations=ckpt.iterations,
        seed=ckpt.seed,
        config_hash=ckpt.config_hash))
    if conf["log"]:
        with open(conf["log"], "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
    print(f"stylized {len(sel.indices)} Gaussians over {len(log)} steps; "
          f"final loss {log[-1]['total']:.4f}; wrote {out}", file=sys.stderr)
    return EXIT_OK


def _orbit_cameras(base, count):
    """Spin the first camera's pose rigidly around the world up-axis, so
    frame 0 reproduces the base view exactly."""
    cams = []
    for i in range(count):
        a = 2.0 * math.pi * i / count
        c, s = math.cos(a), math.sin(a)
        spin = np.array([[c, 0.0, s, 0.0],
                         [0.0, 1.0, 0.0, 0.0],
                         [-s, 0.0, c, 0.0],
                         [0.0, 0.0, 0.0, 1.0]], np.float32)
        cams.append(core.Camera(
            width=base.width, height=base.height, fx=base.fx, fy=base.fy,
            cx=base.cx, cy=base.cy,
            world_to_camera=base.world_to_camera @ spin))
    return cams


def cmd_render(conf) -> int:
    ckpt = scene_io.load_checkpoint(conf["ckpt"])
    scene = scene_io.load_scene(conf["scene"])
    if conf["camera_index"] >= 0 and conf["orbit"] > 0:
        raise UsageError("--camera-index and --orbit are mutually exclusive")
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(conf)
    if conf["orbit"] > 0:
        cams = _orbit_cameras(scene.frames[0].camera, conf["orbit"])
        names = [f"orbit_{i:03d}.png" for i in range(len(cams))]
    elif conf["camera_index"] >= 0:
        i = conf["camera_index"]
        if i >= len(scene.frames):
            raise ValidationError(
                f"camera index {i} out of range; scene has "
                f"{len(scene.frames)} views")
        cams = [scene.frames[i].camera]
        names = [f"view_{i:03d}.png"]
    else:
        cams = [f.camera for f in scene.frames]
        names = [f"view_{i:03d}.png" for i in range(len(cams))]
    background = np.zeros(3, np.float32)
    for cam, name in zip(cams, names):
        render = raster.render_color(ckpt.gaussians, cam, background,
                                     threads=threads)
        scene_io.save_image(out / name, render.color)
    print(f"wrote {len(cams)} image(s) to {out}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "select": cmd_select,
    "stylize": cmd_stylize,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command = getattr(args, "command", None)
        if command is None:
            raise UsageError("a subcommand is required "
                             "(synth, train, select, stylize, render)")
        explicit = {k: v for k, v in vars(args).items() if k != "command"}
        conf = resolve_config(command, explicit)
        _echo_config(command, conf)
        return COMMANDS[command](conf)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
