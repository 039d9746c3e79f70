"""Command-line entry point: ``headfit <command> ...``.

Exit codes: 0 success, 1 gradient check failed, 2 invalid input or usage, 3 numerical abort.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, synth
from .config import RunConfig
from .engine import FitState, fit_sequence, gradcheck, initial_state, report_digest
from .deform import DetailFields
from .errors import DivergenceError, NumericalError, ValidationError
from .model import FrameParams, read_frames, write_frames

log = logging.getLogger("headfit")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _stamp(report, cfg_hash, seed):
    report["config_hash"] = cfg_hash
    report["seed"] = seed
    return report


# -- fit directories ---------------------------------------------------------------

def save_fit(out, state: FitState, meta):
    arrays = {"delta_g": io.f32(state.fields.delta_g), "delta_f": io.f32(state.fields.delta_f),
              "psi": io.f32(state.psi), "omega": io.f32(state.omega)}
    io.write_hhm(Path(out) / "checkpoint.hhm", arrays, meta=meta)


def load_fit(fit_dir):
    """Returns ``(scene, checkpoint arrays, checkpoint meta)`` for a directory written by ``fit``."""
    fit_dir = Path(fit_dir)
    arrays, meta = io.read_hhm(fit_dir / "checkpoint.hhm")
    scene, _ = synth.load_dataset(meta["data"])
    return scene, arrays, meta


def _identity(fit_dir):
    from .transfer import Identity
    scene, arrays, meta = load_fit(fit_dir)
    return Identity(scene.model, scene.topo, scene.beta, arrays["delta_g"]), scene, arrays, meta


def _fit_frames(scene, arrays):
    return [FrameParams(arrays["psi"][i], arrays["omega"][i], fp.global_rot, fp.global_trans)
            for i, fp in enumerate(scene.prior)]


# -- commands ------------------------------------------------------------------------

def cmd_synth(args):
    params = synth.SynthParams()
    if args.params:
        params = synth.SynthParams.from_dict({**params.__dict__, **io.read_json(args.params)})
    overrides = {"frames": args.frames, "seed": args.seed, "width": args.width, "height": args.height,
                 "levels": args.levels, "noise_landmark": args.noise_landmark, "noise_normal": args.noise_normal,
                 "noise_depth": args.noise_depth}
    params = synth.SynthParams.from_dict({**params.__dict__, **{k: v for k, v in overrides.items() if v is not None}})
    _, manifest = synth.synth_generate(params, args.out)
    print(json.dumps({"out": str(args.out), "frames": params.frames, "config_hash": manifest["config_hash"],
                      "seed": params.seed}))
    return EXIT_OK


def _run_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.check_paths()
    if getattr(args, "iters", None) is not None:
        cfg.schedule.iters = args.iters
    if getattr(args, "seed", None) is not None:
        cfg.seed = cfg.schedule.seed = args.seed
    return cfg


def cmd_fit(args):
    cfg = _run_config(args)
    scene, manifest = synth.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    meta = {"data": str(Path(args.data).resolve()), "config_hash": cfg_hash, "seed": cfg.seed}
    try:
        state, report = fit_sequence(scene, cfg.weights, cfg.schedule)
    except DivergenceError as exc:
        io.write_json(out / "report.json", _stamp(exc.report, cfg_hash, cfg.seed))
        raise
    save_fit(out, state, meta)
    write_frames(out / "frames_fit.json", _fit_frames(scene, {"psi": state.psi, "omega": state.omega}))
    report = _stamp(report, cfg_hash, cfg.seed)
    report["digest"] = io.config_hash({"digest": report_digest(report)})
    io.write_json(out / "report.json", report)
    io.write_json(out / "config.json", cfg.to_dict())
    print(json.dumps({"out": str(out), "initial_loss": report["initial_loss"], "final_loss": report["final"]["total"],
                      "config_hash": cfg_hash, "seed": cfg.seed}))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _run_config(args)
    scene, _ = synth.load_dataset(args.data)
    if args.frames:
        scene.prior = scene.prior[: args.frames]
        scene.supervision = scene.supervision[: args.frames]
    blocks = ("psi", "omega", "delta_g", "delta_f") if args.blocks == "all" else tuple(args.blocks.split(","))
    state = initial_state(scene, cfg.schedule)
    rng = np.random.default_rng(cfg.seed)
    # probe at a generic point: small random offsets so no coordinate sits on a symmetric zero
    fields = DetailFields(state.fields.delta_g + rng.normal(size=state.fields.delta_g.shape) * 1e-4,
                          rng.normal(size=state.fields.delta_f.shape) * 1e-4, state.fields.facial_mask)
    report = gradcheck(scene, state.psi, state.omega, fields, cfg.weights, h=args.h, tol=args.tol,
                       n_probe=args.probes, seed=cfg.seed, blocks=blocks, render=not args.smooth_only)
    report = _stamp(report, cfg.hash(), cfg.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        io.write_json(args.out, report)
    print(text)
    return EXIT_OK if report["pass"] else EXIT_CHECK_FAILED


def cmd_transfer_train(args):
    from .transfer import TransferConfig, TransferSample, split_samples, train_transfer
    tcfg = TransferConfig.from_dict(io.read_json(args.config)) if args.config else TransferConfig()
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.synthetic_corpus:
        _, samples, _, _ = synth.make_transfer_corpus(args.synthetic_corpus, args.corpus_frames, seed=tcfg.seed)
    else:
        if not args.fit:
            raise ValidationError("give --fit directories or --synthetic-corpus N")
        samples = []
        for k, d in enumerate(args.fit):
            ident, scene, arrays, _ = _identity(d)
            samples.append(TransferSample(ident.neutral(), arrays["psi"], arrays["omega"], arrays["delta_f"],
                                          name=Path(d).name or f"fit{k}"))
    train, val = split_samples(samples, args.val or [])
    if not train:
        raise ValidationError("validation split leaves no training identities")
    net, report = train_transfer(train, val, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = io.config_hash(tcfg.__dict__)
    net.save(out / "net.hhm", meta={"config_hash": cfg_hash, "seed": tcfg.seed})
    io.write_json(out / "report.json", _stamp(report, cfg_hash, tcfg.seed))
    print(json.dumps({k: report.get(k) for k in ("train_error", "train_baseline", "val_error", "val_baseline")}))
    return EXIT_OK


def cmd_transfer_apply(args):
    from .transfer import TransferNet, apply_transfer
    net = TransferNet.load(args.net)
    target, _, _, meta = _identity(args.target)
    if args.driving_frames:
        driving = read_frames(args.driving_frames)
    else:
        dscene, darrays, _ = load_fit(args.driving)
        driving = _fit_frames(dscene, darrays)
    detailed, posed, report = apply_transfer(net, target, driving)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = meta.get("seed", 0)
    cfg_hash = io.config_hash({"net": str(args.net), "target": meta.get("config_hash"), "frames": len(driving)})
    io.write_hhm(out / "transfer.hhm", {"detailed": io.f32(detailed), "posed": io.f32(posed)},
                 meta={"target": str(Path(args.target).resolve()), "config_hash": cfg_hash, "seed": seed})
    if args.obj:
        for i, v in enumerate(posed):
            io.write_obj(out / f"posed_{i:03d}.obj", v, target.topo.faces)
    write_frames(out / "driving.json", driving)
    io.write_json(out / "report.json", _stamp(report, cfg_hash, seed))
    print(json.dumps(report))
    return EXIT_OK


def cmd_export_control(args):
    from .transfer import export_control
    target, scene, _, meta = _identity(args.target)
    arrays, tmeta = io.read_hhm(args.meshes)
    cam = scene.cam if not args.width else scene.cam.resized(args.width, args.height or args.width)
    _, manifest = export_control(target, arrays["posed"], cam, args.out,
                                 meta={"config_hash": tmeta.get("config_hash"), "seed": tmeta.get("seed", 0)})
    print(json.dumps({"out": str(args.out), "frames": len(manifest["frames"])}))
    return EXIT_OK


def cmd_render(args):
    from .engine import forward_frame
    scene, _ = synth.load_dataset(args.data)
    if not 0 <= args.frame < scene.n_frames:
        raise ValidationError(f"frame {args.frame} outside [0, {scene.n_frames})")
    if args.fit:
        _, arrays, _ = load_fit(args.fit)
        psi, omega, g, f = arrays["psi"][args.frame], arrays["omega"][args.frame], arrays["delta_g"], arrays["delta_f"][args.frame]
    else:
        fp = scene.prior[args.frame]
        psi, omega, g, f = fp.psi, fp.omega, np.zeros((scene.topo.n_dense, 3)), np.zeros((scene.topo.n_dense, 3))
    cache = forward_frame(scene, args.frame, psi, omega, g, f)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = cache.buffers
    io.write_pfm(out / "normal.pfm", b.normal)
    io.write_pfm(out / "depth.pfm", b.depth)
    io.write_pgm(out / "mask.pgm", b.coverage)
    seed = 0
    io.write_json(out / "render.json", {"frame": args.frame, "covered_pixels": int(b.coverage.sum()),
                                        "config_hash": io.config_hash({"data": str(args.data), "fit": str(args.fit),
                                                                       "frame": args.frame}), "seed": seed})
    print(json.dumps({"out": str(out), "covered_pixels": int(b.coverage.sum())}))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="headfit", description="Personalized head fitting, expression transfer and control-map export.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--frames", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--levels", type=int)
    s.add_argument("--noise-landmark", type=float)
    s.add_argument("--noise-normal", type=float)
    s.add_argument("--noise-depth", type=float)
    s.add_argument("--params", type=Path, help="JSON file of scene parameters")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit detail fields and expressions to a dataset")
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--config", type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--iters", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradient")
    g.add_argument("--data", required=True, type=Path)
    g.add_argument("--config", type=Path)
    g.add_argument("--blocks", default="all")
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--probes", type=int, default=32)
    g.add_argument("--frames", type=int, default=0, help="check only the first N frames (0 = all)")
    g.add_argument("--smooth-only", action="store_true", help="landmark and regularizer terms only")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("transfer-train", help="train the expression transfer networks")
    t.add_argument("--fit", action="append", type=Path, help="fit directory (repeatable)")
    t.add_argument("--synthetic-corpus", type=int, default=0, metavar="N", help="train on N synthetic identities")
    t.add_argument("--corpus-frames", type=int, default=16)
    t.add_argument("--val", action="append", help="identity name held out for validation (repeatable)")
    t.add_argument("--config", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, type=Path)
    t.set_defaults(func=cmd_transfer_train)

    a = sub.add_parser("transfer-apply", help="drive a fitted identity with another sequence")
    a.add_argument("--net", required=True, type=Path)
    a.add_argument("--target", required=True, type=Path, help="fit directory of the target identity")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--driving", type=Path, help="fit directory of the driving sequence")
    src.add_argument("--driving-frames", type=Path, help="JSON frame records")
    a.add_argument("--obj", action="store_true", help="also write posed meshes as OBJ")
    a.add_argument("--out", required=True, type=Path)
    a.set_defaults(func=cmd_transfer_apply)

    e = sub.add_parser("export-control", help="render reference and driving normal maps")
    e.add_argument("--target", required=True, type=Path)
    e.add_argument("--meshes", required=True, type=Path, help="transfer.hhm from transfer-apply")
    e.add_argument("--width", type=int)
    e.add_argument("--height", type=int)
    e.add_argument("--out", required=True, type=Path)
    e.set_defaults(func=cmd_export_control)

    r = sub.add_parser("render", help="render normal/depth/mask buffers for one frame")
    r.add_argument("--data", required=True, type=Path)
    r.add_argument("--fit", type=Path)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True, type=Path)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"headfit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"headfit {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"headfit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
