"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then the YAML file given
with ``--config``, then explicit flags. Every command writes ``manifest.json``
(resolved settings, seed, versions, input digests) into its output directory.
Exit codes: 0 success, 1 failed check, 2 usage, 3 configuration, 4 data.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigurationError, RawVidError

DATA_ROOT_ENV = "RAWVID_DATA_ROOT"
EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind, message, code):
    print(json.dumps({"error": kind, "message": " ".join(str(message).split()), "exit": code}), file=sys.stderr)
    return code


# -- shared helpers --------------------------------------------------------------


def _digest(path):
    """SHA-256 of a file, or of a directory's files in name order."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out, command, settings, seed, inputs=()):
    import torch

    doc = {
        "command": command,
        "settings": {k: v for k, v in settings.items() if k != "func"},
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and Path(p).exists()},
    }
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return doc


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


def _load_yaml(path):
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    return doc


def _existing(path, role):
    if path is None or not Path(path).exists():
        raise ConfigurationError(f"{role} path {path} does not exist")
    return Path(path)


def _noise_params(path, iso):
    from .noise import load_noise_table, lookup_params

    if path is None:
        return None
    path = Path(path)
    if path.is_dir():
        path = path / "noise_params.json"
    return lookup_params(load_noise_table(_existing(path, "noise parameter")), iso)


def _isp_config(path):
    from .isp import ReferenceISPConfig

    return ReferenceISPConfig.load(_existing(path, "ISP config")) if path else ReferenceISPConfig()


def _data_root(value):
    value = value or os.environ.get(DATA_ROOT_ENV)
    if not value:
        raise ConfigurationError(f"no data root: pass --data or set {DATA_ROOT_ENV}")
    return _existing(value, "data root")


# -- data commands ---------------------------------------------------------------


def cmd_scenes(args):
    """Synthetic clean raw scenes, one directory per scene."""
    from .data import clean_raw_sequence
    from .raw import save_sequence

    rng = np.random.default_rng(args.seed)
    cfg = _isp_config(args.isp_config)
    out = Path(args.out)
    for i in range(args.count):
        seq = clean_raw_sequence(rng, args.frames, (args.size, args.size), args.pattern, cfg)
        save_sequence(seq, out / f"scene_{i:03d}" / "clean")
    write_manifest(out, "scenes", vars(args), args.seed, [args.isp_config])
    return {"scenes": args.count, "out": str(out)}


def _load_stack(path, kind, index):
    from .noise import CalibrationStack
    from .raw import load_frames

    frames, _ = load_frames(_existing(path, f"{kind} stack"))
    return CalibrationStack(tuple(frames), kind, index)


def cmd_calibrate(args):
    from .noise import fit_noise_params, save_noise_table

    flats = [_load_stack(p, "flat_field", i) for i, p in enumerate(args.flat)]
    fit = fit_noise_params(flats, _load_stack(args.bias, "bias", -1), args.iso)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_noise_table([fit.params], out / "noise_params.json")
    _write_json(out / "fit.json", {"sigma_s_sq": fit.params.sigma_s_sq, "sigma_r": fit.params.sigma_r,
                                   "means": fit.means, "corrected_variances": fit.corrected_variances,
                                   "intercept": fit.intercept})
    write_manifest(out, "calibrate", vars(args), None, [*args.flat, args.bias])
    return {"sigma_s_sq": fit.params.sigma_s_sq, "sigma_r": fit.params.sigma_r, "iso": args.iso}


def cmd_synthesize(args):
    from .noise import synthesize_pairs
    from .raw import load_sequence, normalize_sequence, save_sequence

    params = _noise_params(_existing(args.params, "noise parameter"), args.iso)
    clean = normalize_sequence(load_sequence(_existing(args.clean, "clean sequence")))
    out = Path(args.out)
    save_sequence(clean, out / "clean")
    for k in range(args.takes):
        noisy, _ = synthesize_pairs(clean, params, seed=[args.seed, k])
        save_sequence(noisy, out / f"noisy_{k:02d}")
    write_manifest(out, "synthesize", vars(args), args.seed, [args.clean, args.params])
    return {"takes": args.takes, "frames": len(clean), "out": str(out)}


def cmd_unprocess(args):
    from .noise import unprocess_srgb
    from .raw import Sequence, load_srgb_dir, save_sequence

    cfg = _isp_config(args.isp_config)
    if args.jitter:
        cfg = cfg.jittered(np.random.default_rng(args.seed))
    frames = [unprocess_srgb(f, cfg, args.pattern, bit_depth=args.bit_depth, black_level=args.black_level,
                             white_level=args.white_level)
              for f in load_srgb_dir(_existing(args.srgb, "sRGB frame directory"))]
    seq = Sequence(tuple(frames), frame_rate=args.frame_rate, role="clean",
                   meta={"source": "unprocessed", "isp": cfg.to_dict()})
    out = Path(args.out)
    save_sequence(seq, out / "clean")
    write_manifest(out, "unprocess", vars(args), args.seed, [args.srgb, args.isp_config])
    return {"frames": len(seq), "out": str(out)}


def cmd_isp(args):
    from .isp import learned_isp_apply, reference_isp_forward
    from .raw import frame_name, load_sequence, normalize_sequence, write_ppm

    seq = normalize_sequence(load_sequence(_existing(args.input, "raw sequence")))
    if args.mode == "learned":
        from .training import load_checkpoint

        model = load_checkpoint(_existing(args.model, "ISP checkpoint"), kind="isp").model
        render = lambda f: learned_isp_apply(f, model)  # noqa: E731
    else:
        cfg = _isp_config(args.isp_config)
        render = lambda f: reference_isp_forward(f, cfg)  # noqa: E731
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_ppm(out / frame_name(i, "ppm"), render(f))
    write_manifest(out, "isp", vars(args), None, [args.input, args.model, args.isp_config])
    return {"frames": len(seq), "mode": args.mode, "out": str(out)}


# -- training and evaluation ------------------------------------------------------

TRAIN_FLAGS = ("stage", "seed", "lr", "epochs", "steps_per_epoch", "batch_size", "patch_size", "schedule",
               "pair_mode", "channels", "res_blocks")
RUN_KEYS = ("data", "params", "iso", "predenoiser", "isp", "init", "isp_config", "eval_data")


def _run_settings(args):
    """Merge the YAML file and flags into (TrainConfig, run paths)."""
    from .training import TrainConfig

    doc = _load_yaml(args.config)
    train_doc = dict(doc.get("train", {}))
    unknown = set(doc) - {"train", *RUN_KEYS}
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    for key in TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            train_doc[key] = value
    config = TrainConfig.from_dict(train_doc)
    run = {k: doc.get(k) for k in RUN_KEYS}
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    return config, run


def _sources(root, run):
    from .data import load_sources

    return load_sources(_data_root(root), _noise_params(run["params"], run["iso"]))


def _helper(path, kind):
    from .training import load_checkpoint

    return load_checkpoint(_existing(path, f"{kind} checkpoint"), kind=kind).model if path else None


def cmd_train(args):
    from .training import load_checkpoint, save_checkpoint, train

    config, run = _run_settings(args)
    sources = _sources(run["data"], run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(_existing(run["init"], "initial checkpoint")).model if run["init"] else None
    state = train(config, sources, model=model, predenoiser=_helper(run["predenoiser"], "predenoiser"),
                  isp=_helper(run["isp"], "isp"), log_path=out / "log.jsonl",
                  checkpoint_dir=out / "checkpoints", isp_config=_isp_config(run["isp_config"]))
    save_checkpoint(state, out / "final.pt")
    summary = {"stage": config.stage, "steps": state.step, "final_loss": state.log[-1]["loss"]}
    _write_json(out / "summary.json", summary)
    write_manifest(out, "train", {"train": config.to_dict(), **run}, config.seed,
                   [run["data"] or os.environ.get(DATA_ROOT_ENV), run["params"], run["predenoiser"], run["isp"],
                    run["init"], args.config])
    return summary


def _noisy_for(source, seed, index):
    if source.noisy:
        return source.noisy[0]
    return source.draw(np.random.default_rng([seed, index]), list(range(source.frames)), source.full_window())


def cmd_evaluate(args):
    from .data import load_sources
    from .training import evaluate_sequence, load_checkpoint

    model = load_checkpoint(_existing(args.model, "model checkpoint"), kind="rvidenet").model
    sources = load_sources(_data_root(args.data), _noise_params(args.params, args.iso))
    scenes = []
    for i, src in enumerate(sources):
        rep = evaluate_sequence(model, _noisy_for(src, args.seed, i), src.clean, src.pattern)
        scenes.append({k: rep[k] for k in ("centres", "frames", "raw", "noisy_raw", "srgb") if k in rep})
    summary = {d: {m: float(np.mean([s[d][m] for s in scenes])) for m in ("psnr", "ssim")}
               for d in ("raw", "noisy_raw", "srgb") if all(d in s for s in scenes)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", {"scenes": scenes, "mean": summary})
    write_manifest(out, "evaluate", vars(args), args.seed,
                   [args.model, args.data or os.environ.get(DATA_ROOT_ENV), args.params])
    return summary


def cmd_denoise(args):
    from .raw import Sequence, frame_name, load_sequence, normalize_sequence, save_sequence, write_ppm
    from .training import denoise_sequence, load_checkpoint

    model = load_checkpoint(_existing(args.model, "model checkpoint"), kind="rvidenet").model
    seq = normalize_sequence(load_sequence(_existing(args.input, "noisy sequence")))
    pattern = seq[0].pattern
    centres, raw, srgb = denoise_sequence(model, seq.stack(), pattern)
    out = Path(args.out)
    if raw is not None:
        frames = tuple(seq[t].replace(data=np.clip(r, 0, 1)) for t, r in zip(centres, raw))
        if len(frames) >= 3:
            save_sequence(Sequence(frames, seq.iso, seq.frame_rate, "clean",
                                   {"centres": centres}), out / "raw")
        else:
            from .raw import denormalize, write_pgm

            (out / "raw").mkdir(parents=True, exist_ok=True)
            for i, f in enumerate(frames):
                write_pgm(out / "raw" / frame_name(i), denormalize(f).data)
    if srgb and srgb[0] is not None:
        (out / "srgb").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(srgb):
            write_ppm(out / "srgb" / frame_name(i, "ppm"), np.clip(s, 0, 1))
    write_manifest(out, "denoise", vars(args), None, [args.model, args.input])
    return {"centres": centres, "out": str(out)}


def cmd_ablate(args):
    from .data import load_sources
    from .training import format_table, run_ablation

    config, run = _run_settings(args)
    sources = _sources(run["data"], run)
    eval_root = run["eval_data"]
    eval_sources = (load_sources(_existing(eval_root, "evaluation data"),
                                 _noise_params(run["params"], run["iso"])) if eval_root else sources)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_ablation(config, sources, eval_sources, _helper(run["predenoiser"], "predenoiser"),
                          _helper(run["isp"], "isp"), log_dir=out)
    _write_json(out / "ablation.json", report)
    table = format_table(report)
    (out / "ablation.txt").write_text(table + "\n")
    write_manifest(out, "ablate", {"train": config.to_dict(), **run}, config.seed,
                   [run["data"] or os.environ.get(DATA_ROOT_ENV), eval_root, run["params"], run["predenoiser"],
                    run["isp"], args.config])
    print(table, file=sys.stderr)
    return {"rows": len(report["rows"]), "out": str(out)}


def cmd_gradcheck(args):
    from . import gradcheck

    reports = gradcheck.run(args.op, args.trials, args.seed)
    passed = all(r.passed for r in reports)
    result = {"op": args.op, "trials": len(reports), "passed": passed,
              "max_error": max(max(r.errors.values()) for r in reports), "reports": [r.to_dict() for r in reports]}
    if args.out:
        write_manifest(args.out, "gradcheck", vars(args), args.seed)
        _write_json(Path(args.out) / "gradcheck.json", result)
    result.pop("reports")
    return result if passed else (result, EXIT_FAILED)


# -- parser --------------------------------------------------------------------------


def build_parser():
    p = Parser(prog="rawvid", description="Raw video denoising laboratory.")
    p.add_argument("--version", action="version", version=f"rawvid {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    s = sub.add_parser("scenes", help="generate synthetic clean raw scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--frames", type=int, default=7)
    s.add_argument("--size", type=int, default=128, help="full-resolution side length (even)")
    s.add_argument("--pattern", default="RGGB")
    s.add_argument("--isp-config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scenes)

    s = sub.add_parser("calibrate", help="fit noise parameters from flat-field and bias stacks")
    s.add_argument("--flat", action="append", required=True, help="flat-field stack directory (repeat per level)")
    s.add_argument("--bias", required=True)
    s.add_argument("--iso", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("synthesize", help="noisy takes of a clean raw sequence")
    s.add_argument("--clean", required=True)
    s.add_argument("--params", required=True, help="noise table file or calibrate output directory")
    s.add_argument("--iso", type=int)
    s.add_argument("--takes", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("unprocess", help="sRGB PPM frames to a clean raw sequence")
    s.add_argument("--srgb", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pattern", default="RGGB")
    s.add_argument("--isp-config")
    s.add_argument("--jitter", action="store_true", help="jitter white-balance gains once per sequence")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bit-depth", type=int, default=16)
    s.add_argument("--black-level", type=float, default=0.0)
    s.add_argument("--white-level", type=float)
    s.add_argument("--frame-rate", type=float, default=25.0)
    s.set_defaults(func=cmd_unprocess)

    s = sub.add_parser("isp", help="render a raw sequence to sRGB PPM frames")
    s.add_argument("mode", choices=("reference", "learned"))
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="learned ISP checkpoint")
    s.add_argument("--isp-config")
    s.set_defaults(func=cmd_isp)

    for name, func, helptext in (("train", cmd_train, "run one training stage"),
                                 ("ablate", cmd_ablate, "train and score the five ablation configurations")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="YAML file with a 'train' mapping and run paths")
        s.add_argument("--out", required=True)
        s.add_argument("--data", help=f"data root (default ${DATA_ROOT_ENV})")
        s.add_argument("--params", help="noise table for drawing fresh noise")
        s.add_argument("--iso", type=int)
        s.add_argument("--predenoiser")
        s.add_argument("--isp")
        s.add_argument("--isp-config", dest="isp_config")
        if name == "train":
            s.add_argument("--init", help="checkpoint to continue from")
            s.add_argument("--stage")
        else:
            s.add_argument("--eval-data", dest="eval_data")
        s.add_argument("--seed", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--epochs", type=int)
        s.add_argument("--steps", dest="steps_per_epoch", type=int)
        s.add_argument("--batch-size", dest="batch_size", type=int)
        s.add_argument("--patch-size", dest="patch_size", type=int)
        s.add_argument("--schedule")
        s.add_argument("--pair-mode", dest="pair_mode")
        s.add_argument("--channels", type=int)
        s.add_argument("--res-blocks", dest="res_blocks", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="raw and sRGB metrics of a denoiser")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--params")
    s.add_argument("--iso", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("denoise", help="denoise a noisy raw sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--op", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _emit_error("UsageError", e, EXIT_USAGE)
    try:
        result = args.func(args)
    except ConfigurationError as e:
        return _emit_error(type(e).__name__, e, EXIT_CONFIG)
    except RawVidError as e:
        return _emit_error(type(e).__name__, e, EXIT_DATA)
    code = EXIT_OK
    if isinstance(result, tuple):
        result, code = result
    print(json.dumps(result, sort_keys=True, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
