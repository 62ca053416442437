"""Command line entry points.

    discovr synth-data --out DIR [...]      render a synthetic corpus
    discovr pretrain --data DIR --out DIR   run self-supervised pretraining
    discovr eval --checkpoint CKPT ...      evaluate a checkpoint

Exit codes: 0 success, 1 runtime failure (divergence, corrupt or missing
files), 2 usage errors. Set DISCOVR_DETERMINISTIC=1 (or pass
--deterministic) to force single-threaded deterministic kernels.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .backbone import ConfigError
from .data import SyntheticConfig, generate_dataset
from .evaluation import EvalError
from .tensorio import ContainerError
from .trainer import (DivergenceError, TrainConfig, maybe_enable_determinism, train)


def code_version() -> str:
    """Hash of the installed package sources, stamped into run manifests."""
    here = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(here.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} is not empty; pass --force to write into it")
    out_dir.mkdir(parents=True, exist_ok=True)


def _write_run_manifest(out_dir: Path, command: str, config: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "code_version": code_version(),
        "package_version": __version__,
        "layout": {"metrics": "metrics.jsonl", "checkpoint": "checkpoint.dsct"}
        if command == "pretrain" else {"report": "report.json"},
    }
    manifest.update(extra or {})
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# argument wiring

def _flat_defaults() -> dict:
    return TrainConfig().to_mapping()


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration overrides")
    for key, default in _flat_defaults().items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            group.add_argument(flag, dest=f"cfg_{key}", default=None,
                               action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(flag, dest=f"cfg_{key}", default=None,
                               type=type(default), metavar=str(default))


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    mapping = _flat_defaults()
    if args.config is not None:
        loaded = yaml.safe_load(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config file must hold a mapping")
        for key, val in loaded.items():
            if key not in mapping:
                raise ConfigError(f"{args.config}: unknown config key {key!r}")
            mapping[key] = val
    for key in list(mapping):
        override = getattr(args, f"cfg_{key}", None)
        if override is not None:
            mapping[key] = override
    return TrainConfig.from_mapping(mapping)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discovr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"discovr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="render a synthetic echo-like dataset")
    sd.add_argument("--out", required=True, type=Path)
    sd.add_argument("--force", action="store_true")
    sd.add_argument("--n-per-class", type=int, default=None,
                    help="videos per class in every split (overrides the six count flags)")
    sd.add_argument("--geometry", default=None, metavar="TxHxW",
                    help="frames x height x width, e.g. 60x112x112")
    for f in dataclasses.fields(SyntheticConfig):
        if f.name in ("ef_normal", "ef_abnormal"):
            continue
        sd.add_argument("--" + f.name.replace("_", "-"), dest=f"syn_{f.name}",
                        type=type(f.default), default=f.default, metavar=str(f.default))

    pt = sub.add_parser("pretrain", help="self-supervised pretraining")
    pt.add_argument("--data", required=True, type=Path, help="directory with manifest.csv")
    pt.add_argument("--out", required=True, type=Path)
    pt.add_argument("--config", type=Path, default=None, help="YAML file of flat config keys")
    pt.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    pt.add_argument("--force", action="store_true")
    pt.add_argument("--deterministic", action="store_true")
    pt.add_argument("--quiet", action="store_true")
    _add_config_flags(pt)

    ev = sub.add_parser("eval", help="evaluate a pretraining checkpoint")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--protocol", default="knn,probe",
                    help="comma list from: knn, probe, segment, regress-ef")
    ev.add_argument("--report", required=True, type=Path,
                    help="where to write the JSON report (a .csv row lands next to it)")
    ev.add_argument("--encoder", choices=("teacher", "student"), default="teacher")
    ev.add_argument("--clip-len", type=int, default=None)
    ev.add_argument("--clip-stride", type=int, default=None)
    ev.add_argument("--f1-average", choices=("macro", "binary"), default="macro")
    ev.add_argument("--force", action="store_true")
    ev.add_argument("--deterministic", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_synth_data(args) -> int:
    kwargs = {f.name: getattr(args, f"syn_{f.name}")
              for f in dataclasses.fields(SyntheticConfig)
              if f.name not in ("ef_normal", "ef_abnormal")}
    if args.n_per_class is not None:
        if args.n_per_class < 1:
            raise ConfigError(f"--n-per-class must be at least 1, got {args.n_per_class}")
        for key in ("n_train_normal", "n_train_abnormal", "n_val_normal",
                    "n_val_abnormal", "n_test_normal", "n_test_abnormal"):
            kwargs[key] = args.n_per_class
    if args.geometry is not None:
        parts = args.geometry.lower().split("x")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ConfigError(f"--geometry wants TxHxW like 60x112x112, got {args.geometry!r}")
        kwargs["frames_per_video"], kwargs["height"], kwargs["width"] = map(int, parts)
    cfg = SyntheticConfig(**kwargs)
    _prepare_out_dir(args.out, args.force)
    manifest = generate_dataset(cfg, args.out)
    _write_run_manifest(args.out, "synth-data", dataclasses.asdict(cfg),
                        extra={"layout": {"manifest": "manifest.csv", "videos": "videos/"}})
    print(f"wrote {manifest}")
    return 0


def _cmd_pretrain(args) -> int:
    if args.deterministic:
        os.environ["DISCOVR_DETERMINISTIC"] = "1"
    maybe_enable_determinism()
    cfg = _resolve_config(args)
    _prepare_out_dir(args.out, args.force or args.resume is not None)
    _write_run_manifest(args.out, "pretrain", cfg.to_mapping(),
                        extra={"data": str(args.data), "seed": cfg.seed})
    log = None if args.quiet else print
    try:
        summary = train(cfg, args.data, args.out, resume=args.resume, log=log)
    except DivergenceError as exc:
        (args.out / "divergence.json").write_text(json.dumps({"error": str(exc)}) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"done: {summary['steps']} steps, checkpoint at {summary['checkpoint']}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import PROTOCOLS, evaluate_checkpoint

    if args.deterministic:
        os.environ["DISCOVR_DETERMINISTIC"] = "1"
    maybe_enable_determinism()
    protocols = tuple(p.strip() for p in args.protocol.split(",") if p.strip())
    bad = [p for p in protocols if p not in PROTOCOLS]
    if bad:
        raise ConfigError(f"unknown protocols {bad}; choose from {', '.join(PROTOCOLS)}")
    if not protocols:
        raise ConfigError("--protocol must name at least one protocol")
    if args.report.exists() and not args.force:
        raise FileExistsError(f"{args.report} exists; pass --force to overwrite")
    args.report.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate_checkpoint(args.checkpoint, args.data, protocols=protocols,
                                 encoder=args.encoder, out_path=args.report,
                                 clip_len=args.clip_len, stride=args.clip_stride,
                                 f1_average=args.f1_average)
    for proto in protocols:
        if proto == "knn":
            print(f"knn: k={report['knn']['k']} "
                  f"test balanced accuracy {report['knn']['test']['balanced_accuracy']:.2f}")
        elif proto == "probe":
            print(f"probe: test balanced accuracy {report['probe']['test']['balanced_accuracy']:.2f}")
        elif proto == "segment":
            print(f"segment: mean dice {report['segment']['dice_mean']:.4f}")
        elif proto == "regress-ef":
            print(f"regress-ef: probe mae {report['regress-ef']['probe']['mae']:.2f} "
                  f"finetune mae {report['regress-ef']['finetune_last_k']['mae']:.2f}")
    print(f"report written to {args.report}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "eval":
            return _cmd_eval(args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, EvalError) as exc:
        parser.exit(2, f"error: {exc}\n")
    except (ValueError, FileExistsError, FileNotFoundError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
