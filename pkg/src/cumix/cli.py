"""Command-line entry point: ``cumix {train,eval,synth,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import logging
import socket
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import BundleError, SynthConfig, generate_synthetic, load_bundle, write_bundle
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .numerics import DimensionError
from .train import (
    ABLATION_GRID,
    ConfigError,
    Mode,
    RunConfig,
    epoch_csv,
    evaluate,
    load_preset,
    train_run,
)

log = logging.getLogger("cumix")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3

# keys a config file may carry besides the RunConfig ones
PATH_KEYS = ("data", "out")


class DataError(Exception):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
        node = child
    node[parts[-1]] = value


def build_config(args) -> tuple[RunConfig, dict]:
    """Merge defaults < preset < config file < flags, key by key."""
    merged = RunConfig().to_dict()

    def overlay(src: dict, prefix=""):
        for k, v in src.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                overlay(v, key + ".")
            else:
                set_dotted(merged, key, v)

    if getattr(args, "preset", None):
        overlay(load_preset(args.preset))
    paths = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"--config: no such file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"--config {args.config}: top level must be an object")
        for key in PATH_KEYS:
            if key in doc:
                paths[key] = doc.pop(key)
        overlay(doc)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_dotted(merged, key.strip(), _parse_value(raw))
    if getattr(args, "mode", None):
        merged["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    return RunConfig.from_dict(merged), paths


def _data_dir(args, paths) -> Path:
    data = args.data or paths.get("data")
    if not data:
        raise DataError("--data is required (no dataset directory given on the command line or in --config)")
    return Path(data)


def _load(data_dir: Path):
    try:
        return load_bundle(data_dir)
    except (BundleError, OSError) as exc:
        raise DataError(str(exc)) from None


def _report_json(report, deterministic: bool) -> str:
    doc = report.to_dict()
    if deterministic:
        doc["wall_clock_seconds"] = None
    else:
        doc["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        doc["host"] = socket.gethostname()
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_train(args) -> int:
    cfg, paths = build_config(args)
    data_dir = _data_dir(args, paths)
    out = Path(args.out or paths.get("out") or "")
    if not (args.out or paths.get("out")):
        raise ConfigError("--out is required")
    bundle, split = _load(data_dir)
    params, report = train_run(bundle, split, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.bin")
    (out / "report.json").write_text(_report_json(report, args.deterministic))
    (out / "epochs.csv").write_text(epoch_csv(report))
    target = report.evaluations[report.target_split]
    print(f"{report.mode} seed={report.seed} {report.target_split}: "
          f"per-class {target['per_class_accuracy']:.4f} top-1 {target['top1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    if not args.data:
        raise DataError("--data is required")
    try:
        params = load_checkpoint(args.model)
    except FileNotFoundError:
        raise DataError(f"--model: no such file {args.model}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    bundle, split = _load(Path(args.data))
    if bundle.feature_dim != params.config.input_dim:
        raise ConfigError(f"checkpoint expects {params.config.input_dim} input features, dataset has {bundle.feature_dim}")
    if not params.config.omega_trainable and bundle.embed_dim != params.config.embed_dim:
        raise ConfigError(f"checkpoint embed_dim {params.config.embed_dim} vs dataset embeddings {bundle.embed_dim}")
    classes = split.seen_classes if args.classes == "seen" else split.unseen_classes
    domains = split.train_domains if args.domains == "train" else split.test_domains
    if not classes or not domains:
        raise ConfigError(f"split has no {args.classes} classes or no {args.domains} domains")
    try:
        result = evaluate(params, bundle, classes, domains)
    except DimensionError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None

    print(f"{args.classes}@{args.domains}: per-class accuracy {result.per_class_accuracy:.4f}, top-1 {result.top1:.4f}")
    for row in result.table:
        print(f"  {row['class_id']:>4} {row['name']:<20} {row['correct']:>6}/{row['count']:<6} {row['accuracy']:.4f}")
    out = Path(args.out) if args.out else Path(args.model).with_name(f"eval_{args.classes}_{args.domains}.json")
    doc = {"classes": args.classes, "domains": args.domains, **result.to_dict()}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_synth(args) -> int:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config {args.config}: {exc}") from None
    else:
        raw = load_preset("synthetic_data")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic config: {exc}") from None
    bundle, split = generate_synthetic(cfg)
    try:
        write_bundle(bundle, split, args.out, force=args.force)
    except FileExistsError:
        print(f"error: {args.out} exists and is not empty; pass --force to overwrite", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(bundle)} samples ({len(bundle.class_names)} classes, {len(bundle.domain_names)} domains) to {args.out}")
    return 0


ABLATION_FLAGS = {
    Mode.AGG: ("x", "", "", ""),
    Mode.MIXUP: ("x", "pair", "", ""),
    Mode.CUMIX_INPUT_ONLY: ("x", "x", "", ""),
    Mode.CUMIX_FEATURE_ONLY: ("x", "", "x", ""),
    Mode.CUMIX_NO_CURRICULUM: ("x", "x", "x", ""),
    Mode.CUMIX: ("x", "x", "x", "x"),
}


def run_ablation(bundle, split, base: RunConfig, seeds: list[int]):
    """Train every ablation mode for every seed; returns {mode: [RunReport, ...]}."""
    results = {}
    for mode in ABLATION_GRID:
        results[mode] = []
        for seed in seeds:
            cfg = replace(base, mode=mode, seed=seed)
            log.info("ablation %s seed %d", mode.value, seed)
            results[mode].append(train_run(bundle, split, cfg)[1])
    return results


def ablation_table(results) -> str:
    splits = list(next(iter(results.values()))[0].evaluations)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["mode", "L_AGG", "L_M-IMG", "L_M-F", "curriculum"]
    for s in splits:
        header += [f"{s} mean", f"{s} std"]
    header += ["seeds", "batch_hash"]
    w.writerow(header)
    for mode, reports in results.items():
        row = [mode.value, *ABLATION_FLAGS[mode]]
        for s in splits:
            accs = np.array([r.evaluations[s]["per_class_accuracy"] for r in reports]) * 100
            row += [f"{accs.mean():.2f}", f"{accs.std():.2f}"]
        row += [len(reports), "-".join(r.batch_hash for r in reports)]
        w.writerow(row)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    base, paths = build_config(args)
    data_dir = _data_dir(args, paths)
    if not (args.out or paths.get("out")):
        raise ConfigError("--out is required")
    out = Path(args.out or paths["out"])
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    bundle, split = _load(data_dir)
    seeds = [base.seed + i for i in range(args.seeds)]
    results = run_ablation(bundle, split, base, seeds)
    out.mkdir(parents=True, exist_ok=True)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    for mode, reports in results.items():
        for r in reports:
            (runs / f"{mode.value}_seed{r.seed}.json").write_text(_report_json(r, args.deterministic))
    table = ablation_table(results)
    (out / "ablation.csv").write_text(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cumix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at debug level")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON run config; may also carry 'data' and 'out' paths")
        sp.add_argument("--preset", help="start from a shipped preset (synthetic, cub, flo, awa, sun)")
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--mode", choices=[m.value for m in Mode], help="training mode")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key by dotted name, e.g. loss.eta_img=0 (repeatable)")
        sp.add_argument("--deterministic", action="store_true",
                        help="omit timestamps, hostnames and wall-clock times from reports")

    t = sub.add_parser("train", help="train one model and write checkpoint, report and epoch CSV")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--model", required=True, help="checkpoint written by 'train'")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--classes", choices=["seen", "unseen"], default="unseen", help="class subset to predict among")
    e.add_argument("--domains", choices=["train", "test"], default="test", help="domain subset to evaluate on")
    e.add_argument("--out", help="where to write the JSON result (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate the synthetic benchmark")
    s.add_argument("--config", help="JSON synthetic-data config (default: the shipped calibrated one)")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--seed", type=int, help="generator seed")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="run the mode grid over several seeds and tabulate accuracies")
    run_flags(a)
    a.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds, starting at the config seed")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
