"""Command-line entry points: simulate | train | separate | localize | evaluate.

Config files are YAML with optional sections (generator, training,
pipeline); command-line flags win over config values. All randomness flows
from --seed. Exit codes: 0 success, 1 validation/config error, 2 runtime
failure. The LOCSEP_OUT_ROOT environment variable re-roots relative output
paths.
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import yaml

from . import dsp
from .errors import ConfigError, ValidationError
from .rooms import ArrayGeometry


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    with open(p) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def _resolve_out(path):
    root = os.environ.get("LOCSEP_OUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_resolved_config(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def cmd_simulate(args):
    from .scenes import GeneratorConfig, generate_dataset

    section = _load_config(args.config).get("generator", {})
    overrides = {}
    if args.anechoic:
        overrides["anechoic"] = True
    if args.noise_dir:
        overrides["noise_dir"] = args.noise_dir
    if args.max_utterance_s is not None:
        overrides["max_utterance_s"] = args.max_utterance_s
    if args.rt60 is not None:
        overrides["rt60_range"] = tuple(args.rt60)
    if args.snr is not None:
        overrides["snr_db_range"] = tuple(args.snr)
    if args.splits is not None:
        fracs = [part.split("=") for part in args.splits.split(",")]
        overrides["split_fractions"] = tuple((name, float(v)) for name, v in fracs)
    merged = {k: _tuplify(v) for k, v in {**section, **overrides}.items()}
    cfg = GeneratorConfig(**merged)

    out_dir = _resolve_out(args.out)
    manifest = generate_dataset(args.corpus, out_dir, cfg, args.count, args.seed,
                                jobs=args.jobs)
    _write_resolved_config(out_dir, {"command": "simulate", "seed": args.seed,
                                     "count": args.count, "generator": asdict(cfg)})
    print(manifest)
    return 0


def cmd_train(args):
    from .training import STAGES, TrainConfig, train_sequence

    section = _load_config(args.config).get("training", {})
    merged = dict(section)
    for key in ("hidden", "lr", "max_epochs", "patience", "p_aug",
                "aug_eps_deg", "dropout_p"):
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    cfg = TrainConfig(seed=args.seed, **merged)
    stages = STAGES if args.stage == "all" else (args.stage,)
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out_dir, {"command": "train", "seed": args.seed,
                                     "stages": list(stages),
                                     "training": {k: v for k, v in asdict(cfg).items()
                                                  if k != "stft"}})
    paths = train_sequence(args.manifest, out_dir, cfg, stages=stages,
                           log=print, resume=args.resume)
    for stage, path in paths.items():
        print(f"{stage}: {path}")
    return 0


def _pipeline_config(args):
    from .pipeline import PipelineConfig
    from .training import load_dataset_geometry

    section = _load_config(args.config).get("pipeline", {})
    geometry = None
    if getattr(args, "manifest", None):
        geometry = load_dataset_geometry(args.manifest)
    if geometry is None:
        spacings = section.get("mic_spacings_m")
        geometry = (ArrayGeometry.linear(spacings) if spacings
                    else ArrayGeometry.kinect_like())
    return PipelineConfig(
        geometry=geometry,
        alpha=args.alpha if args.alpha is not None else section.get("alpha", 0.95),
        mu=args.mu if args.mu is not None else section.get("mu", 1.0),
        doa_source=args.doa,
        mask_source=args.mask,
        checkpoint_dir=args.checkpoints,
        beamforming_mode=args.bf_mode,
    )


def cmd_separate(args):
    from .pipeline import Separator, mode_matrix_run, save_result, separate_manifest

    out_dir = _resolve_out(args.out)
    if args.modes:
        modes = [tuple(m.split(":")) for m in args.modes.split(",")]
        cfg = _pipeline_config(args)
        table = mode_matrix_run(args.manifest, modes, cfg, out_dir,
                                split=args.split, jobs=args.jobs, log=print)
        _write_resolved_config(out_dir, {"command": "separate", "modes": args.modes,
                                         "seed": args.seed, "split": args.split,
                                         "alpha": cfg.alpha, "mu": cfg.mu})
        for row in table:
            print(f"{row['mode']}: median SI-SDR "
                  f"{row['si_sdr_median'] if row['si_sdr_median'] is not None else 'n/a'}")
        return 0

    cfg = _pipeline_config(args)
    if args.input:
        mixture = dsp.read_wav(args.input)
        separator = Separator(cfg)
        result = separator.separate(mixture)
        save_result(result, out_dir / Path(args.input).stem)
    else:
        if not args.manifest:
            raise ConfigError("need --manifest or --input")
        separate_manifest(args.manifest, cfg, out_dir, split=args.split,
                          jobs=args.jobs, log=print if args.verbose else None)
    _write_resolved_config(out_dir, {"command": "separate", "seed": args.seed,
                                     "doa": args.doa, "mask": args.mask,
                                     "alpha": cfg.alpha, "mu": cfg.mu,
                                     "bf_mode": cfg.beamforming_mode,
                                     "split": args.split})
    return 0


def cmd_localize(args):
    from .localization import gcc_phat, pool_posterior
    from .models import doa_net_forward, load_net

    mixture = dsp.read_wav(args.input)
    spec = dsp.stft(mixture, dsp.StftConfig(sample_rate=mixture.sample_rate))
    section = _load_config(args.config).get("pipeline", {})
    spacings = section.get("mic_spacings_m")
    geometry = ArrayGeometry.linear(spacings) if spacings else ArrayGeometry.kinect_like()
    if args.method == "gcc-phat":
        doa = gcc_phat(spec, geometry)
    else:
        if not args.checkpoints:
            raise ConfigError("neural localization needs --checkpoints")
        from .features import csipd, magnitude

        net, _ = load_net(Path(args.checkpoints) / "doa1.ckpt")
        post = doa_net_forward(net, csipd(spec), magnitude(spec))
        doa = pool_posterior(post)
    print(json.dumps({"doa_deg": doa, "method": args.method}))
    return 0


def cmd_evaluate(args):
    from .evaluation import evaluate_split, write_report

    out_dir = _resolve_out(args.out)
    report = evaluate_split(args.results, args.manifest, args.split)
    write_report(report, out_dir, emit_plot_data=args.emit_plot_data)
    _write_resolved_config(out_dir, {"command": "evaluate", "split": args.split,
                                     "results": str(args.results)})
    agg = report.aggregates
    print(json.dumps({"split": args.split, "scenes": agg["scenes"],
                      "si_sdr_median": agg["si_sdr"]["median"],
                      "missing": len(report.missing)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="locsep",
                                     description="location-guided speech separation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a simulated two-speaker dataset")
    p.add_argument("--corpus", required=True, help="dir of per-speaker wav folders")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--noise-dir")
    p.add_argument("--anechoic", action="store_true")
    p.add_argument("--max-utterance-s", type=float)
    p.add_argument("--rt60", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--snr", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--splits", help="e.g. train=0.7,dev=0.15,test=0.15")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the four networks sequentially")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="all",
                   choices=["all", "doa1", "mask1", "doa2", "mask2"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--p-aug", type=float, dest="p_aug")
    p.add_argument("--aug-eps-deg", type=float, dest="aug_eps_deg")
    p.add_argument("--dropout-p", type=float, dest="dropout_p")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate mixtures")
    p.add_argument("--manifest")
    p.add_argument("--input", help="single multichannel wav instead of a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--doa", default="neural", choices=["neural", "gcc-phat", "oracle"])
    p.add_argument("--mask", default="neural", choices=["neural", "oracle"])
    p.add_argument("--modes", help="comma list like oracle:oracle,gcc-phat:oracle")
    p.add_argument("--checkpoints")
    p.add_argument("--alpha", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--bf-mode", default="batch", choices=["batch", "streaming"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("localize", help="estimate the dominant DOA of a recording")
    p.add_argument("--input", required=True)
    p.add_argument("--method", default="gcc-phat", choices=["gcc-phat", "neural"])
    p.add_argument("--checkpoints")
    p.add_argument("--config")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score separation outputs against truth")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--emit-plot-data", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
