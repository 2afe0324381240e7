"""Command-line entry points.

Subcommands cover the whole workflow: synthesize a dataset, train the two
models, decompose single images with any of the guidance interfaces
(sampled, estimated from adjacent video frames, user annotation, or a label
map file), run the exact solver on a stored scene, evaluate, and serve the
HTTP API. Every job echoes its effective configuration into the output
directory so a run can be reproduced from its artifacts alone.

Errors print a single `error: ...` line on stderr and exit nonzero.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import dataio
from .decomposer import (DecomposerConfig, load_decomposer, save_decomposer,
                         train_decomposer, write_history)
from .guidance import (GuidanceConfig, MotionGuidance, parse_annotation,
                       guidance_from_adjacent, rasterize_annotation)
from .predictor import (PredictorConfig, load_predictor, predict_multimodal,
                        save_predictor, train_predictor)
from .scenegen import BlurryImage, build_triplet, generate_roll_scene, \
    generate_static_scene
from . import evalkit, linsolve


class _Parser(argparse.ArgumentParser):
    """ArgumentParser with the one-line error contract."""

    def error(self, message):
        self.exit(2, "error: %s\n" % message)


def _write_job_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _apply_overrides(config_dict, overrides):
    """Apply key=value (or guidance.key=value) pairs; unknown keys rejected."""
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError("override %r must look like key=value" % item)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = config_dict
        if "." in key:
            outer, key = key.split(".", 1)
            if outer not in config_dict or not isinstance(config_dict[outer], dict):
                raise ValueError("unknown config section %r" % outer)
            target = config_dict[outer]
        if key not in target:
            raise ValueError("unknown config key %r" % key)
        target[key] = value
    return config_dict


def _build_config(config_cls, args, defaults=None):
    """Merge defaults, an optional config file, and --set overrides."""
    base = config_cls().to_dict()
    for key, value in (defaults or {}).items():
        base[key] = value
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_dict = json.load(fh)
        for key, value in file_dict.items():
            if key not in base:
                raise ValueError("unknown config key %r in %s" % (key, args.config))
            base[key] = value
    _apply_overrides(base, getattr(args, "set", None))
    try:
        return config_cls.from_dict(base)
    except TypeError as exc:
        raise ValueError("bad config: %s" % exc)


def _load_blurry(path):
    return BlurryImage(dataio.load_image(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    rng_shift = [(args.step, args.step), (args.step, -args.step),
                 (-args.step, args.step), (-args.step, -args.step)]
    gconf = GuidanceConfig(num_directions=args.directions)
    splits = [("train", args.scenes, 0), ("val", args.val_scenes, 10_000)]
    for split, count, offset in splits:
        for i in range(count):
            seed = args.seed * 100_000 + offset + i
            static = args.static_every > 0 and i % args.static_every == 0
            if static:
                frames, flows = generate_static_scene(
                    args.size, args.size, n_frames=args.t, seed=seed)
            else:
                shift = rng_shift[int(np.random.default_rng(seed).integers(4))]
                frames, flows = generate_roll_scene(
                    args.size, args.size, shift=shift, n_frames=args.t,
                    seed=seed, cell=args.cell, fine_mix=args.fine_mix)
            triplet = build_triplet(frames, flows, t=args.t,
                                    guidance_config=gconf, wrap=not static)
            scene_dir = os.path.join(args.out, split, "scene_%04d" % i)
            dataio.save_triplet(scene_dir, triplet,
                                meta={"wrap": not static, "seed": seed})
    _write_job_config(args.out, {
        "subcommand": "synth", "seed": args.seed, "scenes": args.scenes,
        "val_scenes": args.val_scenes, "size": args.size, "t": args.t,
        "step": args.step, "cell": args.cell, "fine_mix": args.fine_mix,
        "static_every": args.static_every, "directions": args.directions,
    })
    print("wrote %d train / %d val scenes under %s"
          % (args.scenes, args.val_scenes, args.out))
    return 0


def _load_training_data(args):
    train, _ = dataio.load_split(args.data, "train")
    val, _ = dataio.load_split(args.data, "val")
    if not train:
        raise ValueError("no train split under %s" % args.data)
    return train, val


def cmd_train_decomposer(args):
    train, val = _load_training_data(args)
    # the dataset dictates frame count and guidance layout unless the
    # config file or overrides say otherwise
    config = _build_config(DecomposerConfig, args, defaults={
        "guidance": train[0].guidance.config.to_dict(),
        "t": len(train[0].sharp)})
    model, history = train_decomposer(train, config, val_triplets=val or None,
                                      quiet=args.quiet)
    os.makedirs(args.out, exist_ok=True)
    save_decomposer(os.path.join(args.out, "decomposer.ckpt"), model)
    write_history(os.path.join(args.out, "history.csv"), history)
    _write_job_config(args.out, {"subcommand": "train-decomposer",
                                 "data": args.data,
                                 "config": config.to_dict()})
    last = history[-1]
    print("trained %d epochs, final train loss %.3g, val loss %.3g"
          % (config.epochs, last["train_loss"], last["val_loss"]))
    return 0


def cmd_train_predictor(args):
    train, val = _load_training_data(args)
    config = _build_config(PredictorConfig, args, defaults={
        "guidance": train[0].guidance.config.to_dict()})
    model, history = train_predictor(train, config, val_triplets=val or None,
                                     quiet=args.quiet)
    os.makedirs(args.out, exist_ok=True)
    save_predictor(os.path.join(args.out, "predictor.ckpt"), model)
    write_history(os.path.join(args.out, "history.csv"), history)
    _write_job_config(args.out, {"subcommand": "train-predictor",
                                 "data": args.data,
                                 "config": config.to_dict()})
    print("trained %d epochs, final ce %.3g, kl %.3g"
          % (config.epochs, history[-1]["ce"], history[-1]["kl"]))
    return 0


def _guidance_for_decompose(args, blurry, model):
    """Build the guidance maps requested by --guidance; returns a list."""
    gconf = model.config.guidance
    if args.guidance == "predict":
        if not args.predictor:
            raise ValueError("--guidance predict needs --predictor")
        predictor = load_predictor(args.predictor)
        if predictor.config.guidance.to_dict() != gconf.to_dict():
            raise ValueError("predictor guidance config does not match the "
                             "decomposer checkpoint")
        return predict_multimodal(blurry, args.n, predictor, seed=args.seed)
    if args.guidance == "video":
        if not (args.video_prev and args.video_next):
            raise ValueError("--guidance video needs --video-prev and --video-next")
        prev_img = dataio.load_image(args.video_prev)
        next_img = dataio.load_image(args.video_next)
        return [guidance_from_adjacent(prev_img, next_img, gconf)]
    if args.guidance == "annotation":
        if not args.annotation:
            raise ValueError("--guidance annotation needs --annotation")
        with open(args.annotation) as fh:
            overlay = parse_annotation(fh.read())
        guid = rasterize_annotation(overlay, gconf)
        if guid.labels.shape != blurry.image.shape[:2]:
            raise ValueError("annotation canvas %s does not match image %s"
                             % (guid.labels.shape, blurry.image.shape[:2]))
        return [guid]
    if not args.labels:
        raise ValueError("--guidance file needs --labels")
    labels = dataio.load_label_map(args.labels)
    if labels.max() > gconf.num_directions:
        raise ValueError("label map values exceed the %d-direction config"
                         % gconf.num_directions)
    return [MotionGuidance(labels, gconf)]


def cmd_decompose(args):
    model = load_decomposer(args.model)
    blurry = _load_blurry(args.input)
    guidances = _guidance_for_decompose(args, blurry, model)
    os.makedirs(args.out, exist_ok=True)
    for k, guid in enumerate(guidances):
        dataio.save_label_map(os.path.join(args.out, "guidance_%03d.png" % k),
                              guid.labels)
        sequence = model.decompose(blurry, guid)
        frame_dir = os.path.join(args.out, "frames_%03d" % k)
        os.makedirs(frame_dir, exist_ok=True)
        for t in range(len(sequence)):
            dataio.save_image(os.path.join(frame_dir, "frame_%03d.png" % t),
                              sequence.frames[t])
    _write_job_config(args.out, {
        "subcommand": "decompose", "model": args.model, "input": args.input,
        "guidance_mode": args.guidance, "n": len(guidances),
        "seed": args.seed, "config": model.config.to_dict(),
    })
    print("wrote %d decomposition(s) of %s under %s"
          % (len(guidances), args.input, args.out))
    return 0


def cmd_oracle(args):
    triplet, meta = dataio.load_triplet(args.scene)
    wrap = bool(meta.get("wrap", False)) or args.wrap
    sequence, report = linsolve.decompose_exact(triplet.blurry, triplet.flows,
                                                wrap=wrap, method=args.method)
    os.makedirs(args.out, exist_ok=True)
    for t in range(len(sequence)):
        dataio.save_image(os.path.join(args.out, "frame_%03d.png" % t),
                          sequence.frames[t])
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    _write_job_config(args.out, {"subcommand": "oracle", "scene": args.scene,
                                 "method": args.method, "wrap": wrap})
    print(report.to_text())
    return 0


def cmd_eval(args):
    model = load_decomposer(args.model)
    dataset, _ = dataio.load_split(args.data, args.split)
    if not dataset:
        raise ValueError("no %s split under %s" % (args.split, args.data))
    if args.protocol == "oracle":
        reports = [evalkit.evaluate_oracle(model, dataset)]
    elif args.protocol == "forward-reverse":
        reports = [evalkit.evaluate_forward_reverse(model, dataset)]
    elif args.protocol == "best-of":
        if not args.predictor:
            raise ValueError("--protocol best-of needs --predictor")
        predictor = load_predictor(args.predictor)
        reports = [evalkit.evaluate_best_of(model, predictor, dataset,
                                            args.n, seed=args.seed)]
    else:
        radii = [int(r) for r in args.radii.split(",")]
        sweep = evalkit.robustness_sweep(model, dataset, radii)
        reports = [sweep[key] for key in sorted(sweep)]
    os.makedirs(args.out, exist_ok=True)
    evalkit.write_reports(os.path.join(args.out, "reports.json"), reports)
    text = "\n\n".join(r.to_text() for r in reports)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    _write_job_config(args.out, {
        "subcommand": "eval", "model": args.model, "data": args.data,
        "split": args.split, "protocol": args.protocol, "n": args.n,
        "seed": args.seed, "radii": args.radii,
    })
    print(text)
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    decomposer = load_decomposer(args.decomposer)
    predictor = load_predictor(args.predictor) if args.predictor else None
    app = create_app(decomposer, predictor, store_dir=args.store)
    listen = os.environ.get("BLURDECOMP_LISTEN", "127.0.0.1:8765")
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError("BLURDECOMP_LISTEN must look like host:port, got %r"
                         % listen)
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="blurdecomp",
                     description="Motion-guided blur decomposition tools.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="synthesize a toy triplet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=32)
    p.add_argument("--val-scenes", type=int, default=6)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--step", type=int, default=3)
    p.add_argument("--cell", type=int, default=12)
    p.add_argument("--fine-mix", type=float, default=0.0)
    p.add_argument("--static-every", type=int, default=0,
                   help="every k-th scene is static (0 disables)")
    p.add_argument("--directions", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, fn in (("train-decomposer", cmd_train_decomposer),
                     ("train-predictor", cmd_train_predictor)):
        p = sub.add_parser(name, help="train on a synthesized dataset")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=fn)

    p = sub.add_parser("decompose", help="decompose one blurry image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--guidance", required=True,
                   choices=["predict", "video", "annotation", "file"])
    p.add_argument("--predictor")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--annotation")
    p.add_argument("--labels")
    p.add_argument("--video-prev")
    p.add_argument("--video-next")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("oracle", help="exact solve of one stored scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["elim", "lsq"], default="elim")
    p.add_argument("--wrap", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--protocol", required=True,
                   choices=["oracle", "forward-reverse", "best-of", "sweep"])
    p.add_argument("--predictor")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radii", default="0,2,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the HTTP API")
    p.add_argument("--decomposer", required=True)
    p.add_argument("--predictor")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, RuntimeError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
