"""Command-line entry point: ``brite <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (Cell, ConfigError, ExperimentConfig, foreground_mask, evaluation_indices, report,
                      run_experiment, run_method, scale_preset, score, simulate_cell, write_metrics)
from .tagseq import TagSeqFormatError, load_displacements, load_sequence, save_sequence

log = logging.getLogger("brite")

MOTIONS = ("static", "rotation", "nonrigid", "translation")


def build_config(args) -> ExperimentConfig:
    """Scale preset, then the JSON config file, then explicit flags."""
    d = scale_preset(getattr(args, "scale", None) or "desk")
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        opts = {**d.get("method_options", {})}
        for method, o in file_cfg.get("method_options", {}).items():
            opts[method] = {**opts.get(method, {}), **o}
        d.update(file_cfg)
        d["method_options"] = opts
    if getattr(args, "seed", None) is not None:
        d["master_seed"] = args.seed
    if getattr(args, "out", None):
        d["output_dir"] = str(args.out)
    if getattr(args, "frames_every", None):
        d["frames_every"] = args.frames_every
    if getattr(args, "workers", None):
        d["workers"] = args.workers
    return ExperimentConfig.from_dict(d)


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    suite = {"static": False, "rotation_deg": None, "nonrigid_seeds": 0, "translation_fraction": None}
    if args.motion == "static":
        suite["static"] = True
    elif args.motion == "rotation":
        suite["rotation_deg"] = args.angle
    elif args.motion == "translation":
        suite["translation_fraction"] = args.fraction
    else:
        suite["nonrigid_seeds"] = 1
    cfg.motion_suite = suite
    cfg.validate()
    cell = Cell(float(args.tag_period), args.preset, cfg.motion_ids()[0], (0, 0, 0))
    seq = simulate_cell(cfg, cell)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = save_sequence(seq, out / "sequence.tgsq")
    print(path)
    return 0


def _method_options(args, method):
    return build_config(args).method_options.get(method, {})


def cmd_disentangle(args) -> int:
    from .disentangle import disentangle, options_from_dict
    seq = load_sequence(args.input)
    opts = options_from_dict(_method_options(args, "brite").get("disentangle"))
    res = disentangle(seq.frame(0, "h"), seq.frame(0, "v"), opts=opts,
                      tag_period_hint_mm=args.tag_period or seq.tag_period_mm)
    res.save(args.out)
    print(json.dumps(res.params.to_dict()))
    return 0


def cmd_track(args) -> int:
    from .disentangle import DisentangleResult
    from .tracker import options_from_dict, track_sequence
    seq = load_sequence(args.input)
    dis = DisentangleResult.load(args.disentangled)
    opts = options_from_dict(_method_options(args, "brite").get("track"))

    def progress(t, res):
        log.info("frame %d loss %.6g A=%.4f B=%.4f", t, res.loss, res.fading.A, res.fading.B)

    res = track_sequence(seq, dis, opts, progress=progress)
    res.save(args.out)
    print(Path(args.out) / "displacements.tgsq")
    return 0


def cmd_baseline(args) -> int:
    from .baselines import run_baseline
    seq = load_sequence(args.input)
    res = run_baseline(args.method, seq, _method_options(args, args.method))
    res.save(args.out)
    print(Path(args.out) / "displacements.tgsq")
    return 0


def cmd_evaluate(args) -> int:
    seq = load_sequence(args.input)
    if seq.motion is None or seq.anatomy is None:
        raise TagSeqFormatError(f"{args.input}: evaluation needs ground-truth motion and anatomy")
    est = load_displacements(args.displacements, seq.spacing_mm)
    motion_id = seq.extra.get("motion_id", "unknown")
    records = score(args.method, seq, est, foreground_mask(seq.anatomy),
                    evaluation_indices(seq.n_frames, args.frames_every or 5), motion_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(write_metrics(records, out / "metrics.csv"))
    return 0


def cmd_report(args) -> int:
    files = report(args.csv, args.out)
    for path in files.values():
        print(path)
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    path = run_experiment(cfg, progress=lambda c: log.info("done %s", c.name))
    print(path)
    if not args.no_report:
        report(path, Path(cfg.output_dir) / "report")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brite", description="Tagged-image motion tracking experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
        sp.add_argument("--frames-every", type=int, dest="frames_every")

    sp = sub.add_parser("simulate", help="write a synthetic tagged sequence with ground truth")
    common(sp)
    sp.add_argument("--motion", choices=MOTIONS, default="nonrigid")
    sp.add_argument("--tag-period", type=float, default=18.0)
    sp.add_argument("--preset", default="FA5")
    sp.add_argument("--angle", type=float, default=15.0)
    sp.add_argument("--fraction", type=float, default=0.6, help="translation as a fraction of the tag period")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("disentangle", help="estimate anatomy and tag parameters from frame 0")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--tag-period", type=float, help="nominal tag period hint (default: from metadata)")
    sp.set_defaults(func=cmd_disentangle)

    sp = sub.add_parser("track", help="track a sequence given a disentanglement result")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--disentangled", required=True, help="directory written by 'disentangle'")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("baseline", help="run HARP or SinMod")
    common(sp)
    sp.add_argument("--method", choices=("harp", "sinmod"), required=True)
    sp.add_argument("--input", required=True)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("evaluate", help="score displacement fields against ground truth")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--displacements", required=True)
    sp.add_argument("--method", default="brite")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="summary tables and plots from metrics.csv")
    common(sp, out_required=False)
    sp.add_argument("--csv", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="full experiment grid")
    common(sp)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--no-report", action="store_true")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TagSeqFormatError, FileNotFoundError, ValueError) as exc:
        print(f"brite: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
