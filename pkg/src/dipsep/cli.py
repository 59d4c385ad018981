"""``dipsep`` command-line entry point."""
from __future__ import annotations

import argparse
import datetime as _dt
import difflib
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional

from . import __version__
from . import config as cfgmod
from .errors import ConfigError, DataError, DipsepError

log = logging.getLogger("dipsep")

SIMULATE_DEFAULTS = {"num_mixtures": 100, "snr_low": -5.0, "snr_high": 5.0, "peak": 0.9, "seed": 0}
ANALYZE_DEFAULTS = {"num_systems": 1000, "seed": 0}


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="JSON config file (field names mirror the config dataclasses)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted or leaf name); repeatable")
    p.add_argument("--out-dir", required=out_required, help="run directory (created if absent)")
    p.add_argument("--force", action="store_true", help="allow reusing a run directory that already holds a run")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="dipsep", description="Domain-invariant pretraining and speech separation toolkit.")
    top.add_argument("--version", action="version", version=f"dipsep {__version__}")
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="mix pairs of source files at random SNRs",
                       description="Create two-speaker mixtures with a manifest.")
    p.add_argument("--sources-dir", required=True, help="directory of single-speaker .wav files")
    p.add_argument("--num-mixtures", type=int, help="number of mixtures (default 100)")
    p.add_argument("--snr-low", type=float, help="lowest relative SNR in dB (default -5)")
    p.add_argument("--snr-high", type=float, help="highest relative SNR in dB (default 5)")
    p.add_argument("--seed", type=int, help="root seed")
    _common(p)

    p = sub.add_parser("pretrain", help="MIC/MPC pretraining of the frontend",
                       description="Siamese pretraining of the frontend on a real and a synthetic manifest.")
    p.add_argument("--real-manifest", required=True, help="manifest of the real (target) domain")
    p.add_argument("--syn-manifest", required=True, help="manifest of the synthetic domain")
    p.add_argument("--real-val-manifest", help="validation manifest, real domain (default: tail holdout)")
    p.add_argument("--syn-val-manifest", help="validation manifest, synthetic domain (default: tail holdout)")
    p.add_argument("--preset", choices=["toy", "paper"], default="paper", help="default hyperparameter preset")
    p.add_argument("--alpha", type=float, help="MMD weight (0 gives plain MPC)")
    p.add_argument("--K", type=int, help="distractors per cue for the probability estimate")
    p.add_argument("--max-epochs", type=int, help="epoch budget")
    p.add_argument("--seed", type=int, help="root seed")
    _common(p)

    p = sub.add_parser("train-sep", help="train a separator on top of a frozen frontend",
                       description="Train a separator with PIT; the frontend stays frozen.")
    p.add_argument("--frontend", required=True, help="frontend checkpoint, or 'none' for the baseline")
    p.add_argument("--train-manifest", required=True, help="manifest with source_paths")
    p.add_argument("--val-manifest", help="validation manifest with source_paths (default: training set)")
    p.add_argument("--max-steps", type=int, help="optimizer step budget")
    p.add_argument("--max-epochs", type=int, help="epoch budget")
    p.add_argument("--seed", type=int, help="root seed")
    _common(p)

    p = sub.add_parser("separate", help="separate one mixture file",
                       description="Write s1.wav, s2.wav, ... (16-bit PCM) for one mixture.")
    p.add_argument("--frontend", required=True, help="frontend checkpoint, or 'none'")
    p.add_argument("--separator", required=True, help="separator checkpoint")
    p.add_argument("--in", dest="input", required=True, help="mixture .wav")
    _common(p)

    p = sub.add_parser("evaluate", help="score a separator on a test manifest",
                       description="Per-utterance SI-SDR/SI-SDRi/SDRi with a JSON report.")
    p.add_argument("--separator", required=True, help="separator checkpoint")
    p.add_argument("--frontend", required=True, help="frontend checkpoint, or 'none'")
    p.add_argument("--test-manifest", required=True, help="manifest with source_paths")
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--hist", help="output SI-SDRi histogram CSV (1 dB bins)")
    _common(p, out_required=False)

    p = sub.add_parser("analyze", help="information-theoretic analyses",
                       description="Information-theoretic analyses.")
    asub = p.add_subparsers(dest="analysis", metavar="ANALYSIS", parser_class=_Parser)
    asub.required = True
    q = asub.add_parser("mi-bound", help="audit the mixture mutual-information bound on random systems",
                        description="Exact audit of the mixture MI bound on random discrete systems.")
    q.add_argument("--num-systems", type=int, help="number of random systems (default 1000)")
    q.add_argument("--seed", type=int, help="root seed")
    q.add_argument("--report", help="output JSON report (default OUT_DIR/mi_bound_report.json)")
    _common(q, out_required=False)
    return top


def _all_options(parser: argparse.ArgumentParser, path) -> list:
    node = parser
    for name in path:
        sp = next(a for a in node._actions if isinstance(a, argparse._SubParsersAction))
        node = sp.choices[name]
    return [o for a in node._actions for o in a.option_strings if o.startswith("--")], node


def _parse(parser, argv):
    args, extra = parser.parse_known_args(argv)
    if extra:
        path = [args.command] + ([args.analysis] if args.command == "analyze" else [])
        options, node = _all_options(parser, path)
        flag = next((e.split("=", 1)[0] for e in extra if e.startswith("--")), None)
        hint = ""
        if flag:
            close = difflib.get_close_matches(flag, options, n=1, cutoff=0.5)
            hint = f"; did you mean {close[0]}?" if close else ""
        node.error(f"unrecognized arguments: {' '.join(extra)}{hint}")
    return args


# ------------------------------------------------------------------ helpers


def _existing(path: Optional[str], flag: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise DataError(f"{flag}: file not found: {path}")
    return p


def _manifest(path, flag):
    from .mixkit import Manifest

    p = _existing(path, flag)
    if p is None:
        return None
    try:
        return Manifest.load(p)
    except DataError as exc:
        raise DataError(f"{flag}: {exc}") from exc


def _prepare_out_dir(out_dir: Path, force: bool):
    if (out_dir / "config.resolved").exists() and not force:
        raise ConfigError(f"{out_dir} already holds a run (config.resolved present); pass --force to reuse it")
    out_dir.mkdir(parents=True, exist_ok=True)


def _flag_overrides(args, mapping: dict) -> dict:
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    return out


def _resolve(args, defaults: dict, flags: dict) -> dict:
    """defaults < --config file < --set overrides < dedicated flags."""
    overrides = cfgmod.parse_overrides(args.overrides)
    overrides.update(_flag_overrides(args, flags))
    return cfgmod.load_config(args.config, overrides, defaults)


class _Run:
    """Writes config.resolved up front and metadata.json on completion."""

    def __init__(self, args, out_dir: Path, resolved: dict, inputs: dict):
        self.out_dir = out_dir
        self.meta = {
            "artifact": "dipsep",
            "artifact_version": __version__,
            "command": args.command if args.command != "analyze" else f"analyze {args.analysis}",
            "seed": resolved.get("seed"),
            "inputs": {k: (str(v) if v is not None else None) for k, v in inputs.items()},
            "threads": args.threads,
            "start_time": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        (out_dir / "config.resolved").write_text(cfgmod.dumps(resolved))

    def finish(self, outputs: dict):
        from .kernels import BACKEND

        self.meta["end_time"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.meta["outputs"] = {k: str(v) for k, v in outputs.items()}
        self.meta["kernel_backend"] = BACKEND
        (self.out_dir / "metadata.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")


def _load_frontend(arg: str):
    from . import frontend as fe

    if arg.lower() == "none":
        return None
    p = _existing(arg, "--frontend")
    try:
        model, _ = fe.load_checkpoint(p)
    except (ConfigError, DataError) as exc:
        raise type(exc)(f"--frontend: {exc}") from exc
    return model


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    from .mixkit import simulate_mixtures

    src = _existing(args.sources_dir, "--sources-dir")
    resolved = _resolve(args, SIMULATE_DEFAULTS, {
        "num_mixtures": "num_mixtures", "snr_low": "snr_low", "snr_high": "snr_high", "seed": "seed"})
    out = Path(args.out_dir)
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {"sources_dir": src})
    simulate_mixtures(src, out, int(resolved["num_mixtures"]), float(resolved["snr_low"]),
                      float(resolved["snr_high"]), int(resolved["seed"]), peak=float(resolved["peak"]))
    run.finish({"manifest": out / "manifest.jsonl"})
    return 0


def cmd_pretrain(args) -> int:
    from .pretrainer import PretrainConfig, pretrain

    real = _manifest(args.real_manifest, "--real-manifest")
    syn = _manifest(args.syn_manifest, "--syn-manifest")
    real_val = _manifest(args.real_val_manifest, "--real-val-manifest")
    syn_val = _manifest(args.syn_val_manifest, "--syn-val-manifest")
    defaults = PretrainConfig.preset(args.preset).to_dict()
    resolved = _resolve(args, defaults, {
        "alpha": "mmd.alpha", "K": "mmd.K", "max_epochs": "max_epochs", "seed": "seed"})
    cfg = PretrainConfig.from_dict(resolved)
    resolved = cfg.to_dict()
    out = Path(args.out_dir)
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {"real_manifest": args.real_manifest, "syn_manifest": args.syn_manifest,
                                     "real_val_manifest": args.real_val_manifest,
                                     "syn_val_manifest": args.syn_val_manifest, "preset": args.preset})
    res = pretrain(cfg, real, syn, out, real_val, syn_val)
    summary = {"best_val_mic": res.best_val, "epochs_run": res.epochs_run, "steps": res.steps,
               "stopped_early": res.stopped_early, "best_checkpoint": res.best_checkpoint.name}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.finish({"best_checkpoint": res.best_checkpoint, "last_checkpoint": res.last_checkpoint,
                "metrics_log": res.metrics_log})
    return 0


def cmd_train_sep(args) -> int:
    from .separator import SepTrainConfig, train_separator

    frontend = _load_frontend(args.frontend)
    train = _manifest(args.train_manifest, "--train-manifest")
    val = _manifest(args.val_manifest, "--val-manifest")
    resolved = _resolve(args, SepTrainConfig().to_dict(), {
        "max_steps": "max_steps", "max_epochs": "max_epochs", "seed": "seed"})
    cfg = SepTrainConfig.from_dict(resolved)
    resolved = cfg.to_dict()
    out = Path(args.out_dir)
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {"frontend": args.frontend, "train_manifest": args.train_manifest,
                                     "val_manifest": args.val_manifest})
    ckpt, _, history = train_separator(cfg, train, frontend, out, val)
    run.finish({"separator": ckpt, "train_log": out / "train_log.jsonl"})
    return 0


def cmd_separate(args) -> int:
    from .mixkit import read_wav, write_wav
    from .separator import load_separator, separate

    frontend = _load_frontend(args.frontend)
    sep_path = _existing(args.separator, "--separator")
    wav_path = _existing(args.input, "--in")
    resolved = _resolve(args, {}, {})
    out = Path(args.out_dir)
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {"frontend": args.frontend, "separator": sep_path, "in": wav_path})
    model = load_separator(sep_path, frontend)
    res = separate(model, read_wav(wav_path))
    outputs = {}
    for i, est in enumerate(res.estimates, start=1):
        outputs[f"s{i}"] = out / f"s{i}.wav"
        write_wav(outputs[f"s{i}"], est)
    run.finish(outputs)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_set
    from .separator import load_separator

    frontend = _load_frontend(args.frontend)
    sep_path = _existing(args.separator, "--separator")
    test = _manifest(args.test_manifest, "--test-manifest")
    resolved = _resolve(args, {}, {})
    report = Path(args.report)
    out = Path(args.out_dir) if args.out_dir else report.parent
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {"frontend": args.frontend, "separator": sep_path,
                                     "test_manifest": args.test_manifest})
    rep = evaluate_set(load_separator(sep_path, frontend), test)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(rep.to_json() + "\n")
    outputs = {"report": report}
    if args.hist:
        rep.write_histogram_csv(args.hist)
        outputs["hist"] = args.hist
    run.finish(outputs)
    return 0


def cmd_analyze_mi_bound(args) -> int:
    from .infoanalysis import audit_mi_bound, dumps_report

    resolved = _resolve(args, ANALYZE_DEFAULTS, {"num_systems": "num_systems", "seed": "seed"})
    if int(resolved["num_systems"]) < 1:
        raise ConfigError("--num-systems must be >= 1")
    out = Path(args.out_dir) if args.out_dir else Path(f"mi-bound-n{resolved['num_systems']}-seed{resolved['seed']}")
    report = Path(args.report) if args.report else out / "mi_bound_report.json"
    _prepare_out_dir(out, args.force)
    run = _Run(args, out, resolved, {})
    rep = audit_mi_bound(int(resolved["num_systems"]), int(resolved["seed"]))
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(dumps_report(rep))
    run.finish({"report": report})
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "train-sep": cmd_train_sep,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    ("analyze", "mi-bound"): cmd_analyze_mi_bound,
}


def _origin(exc: BaseException) -> str:
    """Name of the innermost dipsep module in the traceback."""
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "dipsep" in parts and Path(frame.filename).stem not in ("errors", "__init__"):
            name = Path(frame.filename).stem
    return name


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(max(1, args.threads))
    key = ("analyze", args.analysis) if args.command == "analyze" else args.command
    try:
        return COMMANDS[key](args)
    except DipsepError as exc:
        print(f"dipsep {args.command}: {_origin(exc)}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"dipsep {args.command}: {_origin(exc)}: {exc}", file=sys.stderr)
        return DataError.exit_code
    except ValueError as exc:
        print(f"dipsep {args.command}: {_origin(exc)}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
