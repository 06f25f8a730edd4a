#!/usr/bin/env python3
"""
dyns - command-line entry point for the dynamic-graph / selective-SSM /
frozen-LM pipeline.

    python dyns.py generate-data --seed 1 --out data
    python dyns.py train --config configs/desk.toml --data data
    python dyns.py evaluate --run run/20240101-120000-1
    python dyns.py ablate --config configs/desk.toml --seeds 0,1,2,3,4
    python dyns.py scan-bench --out scan_bench.csv
    python dyns.py gradcheck --seed 7
    python dyns.py report run/ --out report.csv

Exit codes: 0 ok, 1 usage/configuration, 2 data, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import data_pipeline as dp
import selective_ssm as ssm
import tensor_autodiff as ta
import token_align as tk
import training_eval as te
from errors import ConfigError, ContractError, DataError, DynsError, NumericalError

logger = logging.getLogger("dyns")

# -----------------------------
# Config
# -----------------------------
VERSION = "dyns 1.0.0"
SEED_ENV = "DYNS_SEED"
RESOLVED_NAME = "config.resolved"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Every tunable, flat. Defaults are the module-level constants."""

    # latent graph
    d_lat: int = te.ModelConfig.d_lat
    conv_channels: int = te.ModelConfig.conv_channels
    kernel_size: int = te.ModelConfig.kernel_size
    attention_heads: int = te.ModelConfig.attention_heads
    graph_attention: bool = True
    filter_mode: str = te.ModelConfig.filter_mode
    # temporal
    d_h: int = te.ModelConfig.d_h
    block_count: int = te.ModelConfig.block_count
    backend: str = te.ModelConfig.backend
    # alignment
    d_k: int = te.ModelConfig.d_k
    token_count: int = te.ModelConfig.token_count
    lora_rank: int = te.ModelConfig.lora_rank
    lora_alpha: float = te.ModelConfig.lora_alpha
    lora_dropout: float = te.ModelConfig.lora_dropout
    lora_targets: Tuple[str, ...] = te.ModelConfig.lora_targets
    brain_positions: bool = False
    surrogate_seed: int = te.ModelConfig.surrogate_seed
    surrogate_blocks: int = te.ModelConfig.surrogate_blocks
    surrogate_heads: int = te.ModelConfig.surrogate_heads
    vocab_size: int = te.ModelConfig.vocab_size
    context_cap: int = te.ModelConfig.context_cap
    prompt_ids: Tuple[int, ...] = te.ModelConfig.prompt_ids
    # training
    learning_rate: float = te.LEARNING_RATE
    epochs: int = te.EPOCHS
    batch_size: int = te.BATCH_SIZE
    accumulation_steps: int = te.ACCUMULATION_STEPS
    beta1: float = te.ADAM_BETA1
    beta2: float = te.ADAM_BETA2
    eps: float = te.ADAM_EPS
    variant: str = "full"
    validation_fraction: float = te.VALIDATION_FRACTION
    # data
    train_fraction: float = dp.TRAIN_FRACTION
    n_rois: int = dp.SYNTH_ROIS
    length: int = dp.SYNTH_LENGTH
    subjects_per_class: int = dp.SYNTH_SUBJECTS_PER_CLASS
    regimes: int = dp.SYNTH_REGIMES
    separation: float = dp.SYNTH_SEPARATION
    switch_rate: float = dp.SYNTH_SWITCH_RATE
    noise_std: float = dp.SYNTH_NOISE_STD
    autocorrelation: float = dp.SYNTH_AUTOCORRELATION
    null_signal: bool = False
    # run
    seed: int = 0
    threads: int = 1
    precision: int = ta.DEFAULT_PRECISION
    data_dir: str = "data"
    run_root: str = "run"
    variants: Tuple[str, ...] = te.ABLATION_VARIANTS
    ablation_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    bench_lengths: Tuple[int, ...] = ssm.BENCH_LENGTHS
    bench_repeats: int = ssm.BENCH_REPEATS

    def model_config(self) -> te.ModelConfig:
        values = {f.name: getattr(self, f.name) for f in fields(te.ModelConfig) if f.name != "scan_workers"}
        return te.ModelConfig(scan_workers=self.threads, **values)

    def train_config(self) -> te.TrainConfig:
        values = {f.name: getattr(self, f.name) for f in fields(te.TrainConfig) if f.name != "workers"}
        return te.TrainConfig(workers=self.threads, **values)

    def synth_spec(self) -> dp.SynthSpec:
        return dp.default_synth_spec(self.n_rois, self.length, self.subjects_per_class, self.regimes,
                                     self.separation, self.switch_rate, self.noise_std, self.seed,
                                     self.null_signal, self.autocorrelation)

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        for variant in self.variants:
            te.parse_variant(variant)
        self.model_config().validate()
        self.train_config().validate()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    default = _FIELDS[key].default
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if type(value) is not type(default):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


def load_config_file(path) -> Dict[str, object]:
    """Flat TOML table, or the sorted JSON written as config.resolved."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                values = tomllib.load(f)
        else:
            with open(path) as f:
                values = json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values.pop("version", None)
    return values


def apply_values(cfg: RunConfig, values: Dict[str, object], source: str) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {source}: {', '.join(unknown)}")
    updates = {key: _coerce(key, value) for key, value in values.items()}
    return RunConfig(**{**asdict(cfg), **updates})


def _parse_override(text: str) -> Tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# flag dest -> RunConfig key
FLAG_KEYS = {
    "seed": "seed", "epochs": "epochs", "lr": "learning_rate", "batch_size": "batch_size",
    "variant": "variant", "backend": "backend", "threads": "threads", "precision": "precision",
    "accumulation_steps": "accumulation_steps",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < DYNS_SEED (seed only) < flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_values(cfg, load_config_file(args.config), str(args.config))
    if getattr(args, "seed", None) is None and os.environ.get(SEED_ENV):
        try:
            cfg = apply_values(cfg, {"seed": int(os.environ[SEED_ENV])}, SEED_ENV)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    flags.update(dict(_parse_override(item) for item in getattr(args, "set", None) or []))
    cfg = apply_values(cfg, flags, "command line")
    cfg.validate()
    return cfg


def resolved_json(cfg: RunConfig) -> str:
    return json.dumps({**asdict(cfg), "version": VERSION}, indent=2, sort_keys=True) + "\n"


def write_resolved(cfg: RunConfig, directory: Path) -> None:
    with open(directory / RESOLVED_NAME, "w") as f:
        f.write(resolved_json(cfg))


# -----------------------------
# Helpers
# -----------------------------
def _emit(args, payload: Dict, lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif not args.quiet:
        for line in lines:
            print(line)


def _new_run_dir(cfg: RunConfig, explicit: Optional[str]) -> Path:
    if explicit:
        run_dir = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.run_root) / f"{stamp}-{cfg.seed}"
        suffix = 1
        while run_dir.exists():
            run_dir = Path(cfg.run_root) / f"{stamp}-{cfg.seed}-{suffix}"
            suffix += 1
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    return run_dir


def load_subjects(cfg: RunConfig, data: Optional[str]) -> List[dp.RoiTimeSeries]:
    """Dataset directory if one exists, else the synthetic set generated in memory."""
    directory = Path(data or cfg.data_dir)
    if (directory / dp.MANIFEST_NAME).exists():
        subjects = dp.load_dataset(directory)
        logger.info("loaded %d subjects from %s", len(subjects), directory)
        return subjects
    if data:
        raise DataError(f"no {dp.MANIFEST_NAME} in {directory}")
    logger.info("no dataset at %s; generating synthetic subjects (seed %d)", directory, cfg.seed)
    return [dp.normalize_zscore(s) for s in dp.synth_generate(cfg.synth_spec(), cfg.threads)]


def _base_from(run_dir: Path, cfg: RunConfig) -> tk.FrozenSurrogate:
    path = run_dir / "checkpoints" / "surrogate.dyns"
    if path.exists():
        return tk.FrozenSurrogate.from_arrays(ta.load_checkpoint(path), cfg.surrogate_heads)
    return tk.init_surrogate(cfg.surrogate_seed, cfg.d_k, cfg.surrogate_blocks, cfg.surrogate_heads,
                             cfg.vocab_size, cfg.context_cap)


def load_run_config(run_dir) -> RunConfig:
    resolved = Path(run_dir) / RESOLVED_NAME
    if not resolved.exists():
        raise DataError(f"{run_dir} is not a run directory (no {RESOLVED_NAME})")
    return apply_values(RunConfig(), load_config_file(resolved), str(resolved))


def load_trained_model(run_dir, cfg: RunConfig, n_rois: int) -> te.DynsModel:
    run_dir = Path(run_dir)
    checkpoint = run_dir / "checkpoints" / "model.dyns"
    if not checkpoint.exists():
        raise DataError(f"no checkpoint at {checkpoint}")
    model = te.init_model(cfg.model_config(), te.parse_variant(cfg.variant), n_rois, cfg.seed,
                          _base_from(run_dir, cfg))
    te.load_model_parameters(model, ta.load_checkpoint(checkpoint))
    return model


# -----------------------------
# Subcommands
# -----------------------------
def cmd_generate_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    subjects = dp.synth_generate(cfg.synth_spec(), cfg.threads)
    manifest = dp.write_dataset(out, subjects)
    write_resolved(cfg, out)
    _emit(args, {"manifest": str(manifest), "subjects": len(subjects)},
          [f"Wrote {len(subjects)} subjects to {out} (manifest: {manifest.name})"])
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    subjects = load_subjects(cfg, args.data)
    split = dp.split_dataset(subjects, cfg.train_fraction, cfg.seed)
    run_dir = _new_run_dir(cfg, args.run_dir)
    write_resolved(cfg, run_dir)

    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    base = tk.init_surrogate(cfg.surrogate_seed, cfg.d_k, cfg.surrogate_blocks, cfg.surrogate_heads,
                             cfg.vocab_size, cfg.context_cap)
    checksum = tk.frozen_checksum(base)
    result = te.run_variant(cfg.variant, split.train, split.test, train_cfg, model_cfg, base,
                            run_dir / "checkpoints")
    if tk.frozen_checksum(base) != checksum:
        raise ContractError("frozen surrogate weights changed during training")

    model = result.model
    ta.save_checkpoint(run_dir / "checkpoints" / "model.dyns", model.parameters())
    ta.save_checkpoint(run_dir / "checkpoints" / "surrogate.dyns", base.parameters())
    te.write_log_jsonl(result.train.log, run_dir / "logs.jsonl")

    language_side = {**model.surrogate.adapter_parameters(), **model.surrogate.head_parameters()}
    metrics = {
        "version": VERSION,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "test": result.metrics.to_dict(),
        "best_epoch": result.train.best_epoch,
        "best_validation_accuracy": result.train.best_accuracy,
        "train_subjects": len(split.train),
        "test_subjects": len(split.test),
        "frozen_checksum": checksum,
        "trainable_fraction": tk.trainable_fraction(language_side, base.parameters()),
    }
    with open(run_dir / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("frozen checksum %s; trainable fraction %.2f%%", checksum[:12],
                100 * metrics["trainable_fraction"])
    m = result.metrics
    _emit(args, {"run_dir": str(run_dir), **metrics},
          [f"Run directory: {run_dir}",
           f"Test accuracy {m.accuracy:.4f}  precision {m.precision:.4f}  recall {m.recall:.4f}  f1 {m.f1:.4f}"])
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run)
    subjects = load_subjects(cfg, args.data)
    targets = subjects if args.all else dp.split_dataset(subjects, cfg.train_fraction, cfg.seed).test
    model = load_trained_model(run_dir, cfg, targets[0].n_rois)
    predictions = te.predict(model, targets, cfg.batch_size, cfg.threads)
    home = run_dir.resolve()
    out = Path(args.out) if args.out else home.parent / f"{home.name}-evaluation"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "label", "predicted", "confidence", "verdict"])
        for p in predictions:
            writer.writerow([p.subject_id, p.label.name if p.label is not None else "",
                             p.predicted.name, f"{p.confidence:.6f}", p.verdict])

    payload = {"version": VERSION, "run": str(run_dir), "subjects": len(targets)}
    lines = [f"Predictions for {len(targets)} subjects: {out / 'predictions.csv'}"]
    if all(s.label is not None for s in targets):
        metrics = te.evaluate(model, targets, cfg.batch_size, cfg.threads)
        payload["metrics"] = metrics.to_dict()
        lines.append(f"Accuracy {metrics.accuracy:.4f}  precision {metrics.precision:.4f}  "
                     f"recall {metrics.recall:.4f}  f1 {metrics.f1:.4f}")
    with open(out / "metrics.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    variants = args.variants.split(",") if args.variants else list(cfg.variants)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.ablation_seeds)
    for v in variants:
        te.parse_variant(v)
    subjects = load_subjects(cfg, args.data)
    run_dir = _new_run_dir(cfg, args.run_dir)
    write_resolved(cfg, run_dir)
    rows = te.run_ablation(variants, subjects, cfg.train_config(), seeds, cfg.model_config(), cfg.train_fraction)
    te.write_ablation_csv(rows, run_dir / "ablation.csv")
    with open(run_dir / "metrics.json", "w") as f:
        json.dump({"version": VERSION, "seeds": seeds, "rows": rows}, f, indent=2, sort_keys=True)
        f.write("\n")

    lines = [f"{'Variant':<22} {'Accuracy':>16} {'Precision':>16} {'Recall':>16} {'F1':>16}", "-" * 90]
    for row in rows:
        cells = [f"{row[f'{m}_mean']:.4f} ± {row[f'{m}_std']:.4f}" for m in te.METRIC_NAMES]
        lines.append(f"{row['variant']:<22} " + " ".join(f"{c:>16}" for c in cells))
    lines.append(f"Summary: {run_dir / 'ablation.csv'}")
    _emit(args, {"run_dir": str(run_dir), "rows": rows}, lines)
    return EXIT_OK


def cmd_scan_bench(args, cfg: RunConfig) -> int:
    lengths = [int(t) for t in args.lengths.split(",")] if args.lengths else list(cfg.bench_lengths)
    repeats = args.repeats or cfg.bench_repeats
    rows = ssm.benchmark_scan(lengths, ssm.BACKENDS, repeats, cfg.d_h, cfg.seed, cfg.threads)
    out = Path(args.out)
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["T", "backend", "median_ns", "p10_ns", "p90_ns"])
        writer.writeheader()
        writer.writerows(rows)
    lines = [f"{'T':>6} {'backend':<12} {'median ms':>10}"]
    lines += [f"{r['T']:>6} {r['backend']:<12} {r['median_ns'] / 1e6:>10.3f}" for r in rows]
    lines.append(f"Saved to: {out}")
    _emit(args, {"rows": rows, "out": str(out)}, lines)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    tolerance = ta.gradcheck_tolerance()
    errors = te.gradient_suite(cfg.seed)
    failed = sorted(name for name, err in errors.items() if err >= tolerance)
    lines = [f"{name:<24} {err:.3e}{'  FAIL' if name in failed else ''}" for name, err in errors.items()]
    lines.append(f"{len(errors) - len(failed)}/{len(errors)} below {tolerance:g}")
    _emit(args, {"seed": cfg.seed, "tolerance": tolerance, "errors": errors, "failed": failed}, lines)
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


REPORT_COLUMNS = ["run", "variant", "seed", "epoch", "split", "loss", "accuracy", "precision", "recall", "f1"]


def cmd_report(args, cfg: RunConfig) -> int:
    logs = []
    for root in args.runs:
        root = Path(root)
        found = [root / "logs.jsonl"] if (root / "logs.jsonl").exists() else sorted(root.glob("*/logs.jsonl"))
        logs.extend(found)
    if not logs:
        raise DataError(f"no logs.jsonl under {', '.join(args.runs)}")
    rows = []
    for path in logs:
        resolved = load_config_file(path.parent / RESOLVED_NAME) if (path.parent / RESOLVED_NAME).exists() else {}
        for record in te.read_log_jsonl(path):
            rows.append({"run": path.parent.name, "variant": resolved.get("variant", ""),
                         "seed": resolved.get("seed", ""), **record})
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    _emit(args, {"runs": len(logs), "rows": len(rows), "out": args.out},
          [f"Aggregated {len(rows)} records from {len(logs)} run(s) into {args.out}"])
    return EXIT_OK


# -----------------------------
# Argument parsing
# -----------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (or a config.resolved)")
    common.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV})")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("--json", action="store_true", help="print one JSON result object")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--accumulation-steps", type=int)
    training.add_argument("--variant")
    training.add_argument("--backend", choices=ssm.BACKENDS)
    training.add_argument("--data", help="dataset directory with manifest.json")
    training.add_argument("--run-dir", help="explicit output directory")

    parser = _Parser(prog="dyns", description="Dynamic latent graphs + selective SSM + frozen LM classifier")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", help="output directory (default: data_dir)")
    p.set_defaults(handler=cmd_generate_data)

    p = sub.add_parser("train", parents=[common, training], help="train one variant")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, training], help="score a trained run")
    p.add_argument("--run", required=True, help="run directory produced by train")
    p.add_argument("--all", action="store_true", help="score every subject, not just the test split")
    p.add_argument("--out", help="output directory (default: <run>-evaluation beside the run)")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common, training], help="variant x seed matrix")
    p.add_argument("--variants", help="comma-separated variants")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("scan-bench", parents=[common], help="time the scan backends")
    p.add_argument("--lengths", help="comma-separated sequence lengths")
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", default="scan_bench.csv")
    p.set_defaults(handler=cmd_scan_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient sweep")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], help="aggregate run logs into one CSV")
    p.add_argument("runs", nargs="+", help="run directories or a run root")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(handler=cmd_report)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"dyns: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if args.quiet or args.json else logging.INFO,
                        format=LOG_FORMAT, force=True)
    try:
        if args.command == "evaluate" and not args.config:
            resolved = Path(args.run) / RESOLVED_NAME
            if resolved.exists():
                args.config = str(resolved)
        cfg = resolve_config(args)
        ta.set_default_dtype(cfg.precision)
        if args.command == "gradcheck" and cfg.precision != 64:
            raise ConfigError("gradcheck runs at 64-bit precision")
        return args.handler(args, cfg)
    except DynsError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_DATA
    finally:
        ta.set_default_dtype(ta.DEFAULT_PRECISION)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
