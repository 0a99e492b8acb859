"""Command line entry point.

Every subcommand writes its main artifact to ``--out`` and prints a
tab-separated summary to stdout.  Report-producing commands also write the
same table as ``<out>.tsv`` and a PNG figure next to it.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .builder import ConfigurationError
from .chem import ChemError
from .experiments import (
    ABLATION_VARIANTS,
    AblationConfig,
    Combination,
    DatasetError,
    DatasetSpec,
    ExperimentReport,
    NoiseConfig,
    content_hash,
    dumps_dataset,
    generate_dataset,
    noise_table,
    read_dataset,
    run_ablations,
    summarize_noise,
)
from .factorgraph import FactorGraphError
from .learn.model import ModelConfig
from .learn.train import CheckpointError, TrainConfig, evaluate, load_checkpoint, new_model, save_checkpoint, train

logger = logging.getLogger("fgmn")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
DEFAULT_BETAS = (0.1, 0.2, 0.5, 1.0, 2.0)
SECTIONS = ("dataset", "noise", "model", "training", "split", "ablation", "oracles")


class ConfigError(ValueError):
    pass


VALIDATION_ERRORS = (ConfigError, DatasetError, ConfigurationError, ChemError, CheckpointError,
                     FactorGraphError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {list(SECTIONS)}")
    return doc


def build(cls, section: dict | None, name: str, **overrides):
    """Instantiate a config dataclass from a section, rejecting unknown keys."""
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys {sorted(unknown)}; allowed {sorted(known)}")
    section.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _split(dataset, cfg: dict):
    section = dict(cfg.get("split") or {})
    unknown = set(section) - {"test_fraction"}
    if unknown:
        raise ConfigError(f"[split] unknown keys {sorted(unknown)}")
    frac = float(section.get("test_fraction", 0.2))
    if not 0 < frac < 1:
        raise ConfigError("[split] test_fraction must lie in (0, 1)")
    n_test = max(1, int(round(frac * len(dataset))))
    if n_test >= len(dataset):
        raise ConfigError(f"dataset of {len(dataset)} molecules is too small to split")
    return dataset[:-n_test], dataset[-n_test:]


def _load_data(path: str) -> tuple[list, str]:
    data = read_dataset(path)
    if not data:
        raise DatasetError(f"{path}: empty dataset")
    return data, content_hash(Path(path).read_bytes())


def _write_table(rows: Sequence[dict], columns: Sequence[str], out: Path | None) -> str:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    text = "\t".join(columns) + "\n" + "".join("\t".join(fmt(r.get(c)) for c in columns) + "\n" for r in rows)
    if out is not None:
        out.with_suffix(".tsv").write_text(text)
    sys.stdout.write(text)
    return text


def _model_config(cfg: dict, sharing: str | None) -> ModelConfig:
    return build(ModelConfig, cfg.get("model"), "model", sharing_b=sharing, sharing_c=sharing)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    spec = build(DatasetSpec, cfg.get("dataset"), "dataset", seed=args.seed)
    text = dumps_dataset(generate_dataset(spec), spec.ester_anchored)
    out = Path(args.out or "dataset.jsonl")
    out.write_text(text)
    _write_table([{"path": str(out), "molecules": spec.count, "hash": content_hash(text)}],
                 ["path", "molecules", "hash"], None)
    return EXIT_OK


def cmd_decode_noise(args, cfg) -> int:
    data, digest = _load_data(args.data)
    section = dict(cfg.get("noise") or {})
    betas = section.pop("betas", list(DEFAULT_BETAS))
    if args.beta is not None:
        betas = [args.beta]
    # without an explicit combination every mode is reported
    modes = [Combination(section.pop("combination"))] if "combination" in section else list(Combination)
    if not betas or any(not float(b) > 0 for b in betas):
        raise ConfigError("[noise] betas must be positive")
    noise = build(NoiseConfig, {**section, "beta": float(betas[0])}, "noise", seed=args.seed)
    report = noise_table(data, [float(b) for b in betas], noise.trials, noise.decode_rounds, noise.seed,
                         modes, noise.damping)
    report.dataset_hash = digest
    out = Path(args.out or "noise_report.json")
    summary = summarize_noise(report)
    doc = json.loads(report.to_json())
    doc["summary"] = summary
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    _write_table(summary, ["beta", "combination", "accuracy", "valence_rate", "trials"], out)
    if not args.no_figures:
        from .plotting import plot_noise_table

        plot_noise_table(summary, out.with_suffix(".png"))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data, digest = _load_data(args.data)
    model_cfg = _model_config(cfg, args.sharing)
    train_cfg = build(TrainConfig, cfg.get("training"), "training", seed=args.seed)
    train_set, val_set = _split(data, cfg)
    params = new_model(model_cfg, train_set, train_cfg.seed)
    result = train(params, train_set, train_cfg, validation=val_set)
    out = Path(args.out or "model.ckpt.json")
    extra = {"dataset_hash": digest, "best_epoch": result.best_epoch, "diverged": result.diverged,
             "training": asdict(train_cfg)}
    save_checkpoint(out, result.params, extra)
    history_path = out.with_name(out.stem + ".history.json")
    history_path.write_text(json.dumps({"config": {"model": model_cfg.to_dict(), "training": asdict(train_cfg)},
                                        "dataset_hash": digest, "rows": result.history},
                                       indent=2, sort_keys=True))
    rows = [{"epoch": h["epoch"], **{f"train_{k}": v for k, v in h["train"].items() if k != "molecules"},
             **{f"val_{k}": v for k, v in h.get("validation", {}).items() if k != "molecules"}}
            for h in result.history]
    columns = ["epoch", "train_loss", "train_accuracy", "train_valence_rate", "val_loss", "val_accuracy",
               "val_valence_rate"]
    _write_table(rows, columns, history_path)
    if not args.no_figures and result.history:
        from .plotting import plot_training_curves

        plot_training_curves(result.history, history_path.with_suffix(".png"))
    if result.diverged:
        logger.error("training diverged; saved the last good parameters")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    data, digest = _load_data(args.data)
    params = load_checkpoint(args.checkpoint)
    rows = []
    for variant, use_a, use_bc in (("full", None, None), ("no_type_a", False, None)):
        if variant == "no_type_a" and not args.ablate_type_a:
            continue
        rec = evaluate(params, data, use_type_a=use_a, use_type_bc=use_bc)
        rows.append({"variant": variant, **rec.to_dict()})
    report = ExperimentReport(config={"checkpoint": str(args.checkpoint), "model": params.config.to_dict()},
                              rows=rows, dataset_hash=digest)
    out = Path(args.out or "eval_report.json")
    out.write_text(report.to_json())
    _write_table(rows, ["variant", "loss", "accuracy", "valence_rate", "accuracy_heavy", "molecules"], out)
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    data, digest = _load_data(args.data)
    section = dict(cfg.get("ablation") or {})
    unknown = set(section) - {"seeds", "variants"}
    if unknown:
        raise ConfigError(f"[ablation] unknown keys {sorted(unknown)}")
    seeds = tuple(section.get("seeds", [0])) if args.seed is None else (args.seed,)
    variants = tuple(section.get("variants", ABLATION_VARIANTS))
    model_cfg = _model_config(cfg, None)
    train_cfg = build(TrainConfig, cfg.get("training"), "training")
    ablation = AblationConfig(seeds, variants, model_cfg, train_cfg)
    train_set, test_set = _split(data, cfg)
    report = run_ablations(train_set, test_set, ablation,
                           progress=lambda v, s, r: logger.info("%s seed %d: %s", v, s, r))
    report.dataset_hash = digest
    out = Path(args.out or "ablation_report.json")
    out.write_text(report.to_json())
    _write_table(report.rows, ["seed", "variant", "accuracy", "valence_rate", "delta_accuracy",
                               "delta_valence_rate"], out)
    if not args.no_figures:
        from .plotting import plot_ablations

        plot_ablations(report.rows, out.with_suffix(".png"))
    return EXIT_OK


def cmd_oracle_check(args, cfg) -> int:
    from .oracles import run_all

    section = dict(cfg.get("oracles") or {})
    allowed = {"valence_cases", "tree_cases", "lowrank_cases"}
    if set(section) - allowed:
        raise ConfigError(f"[oracles] unknown keys {sorted(set(section) - allowed)}")
    results = run_all(seed=args.seed or 0, **{k: int(v) for k, v in section.items()})
    for r in results:
        print(r.line())
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"config": {"seed": args.seed or 0, **section},
             "rows": [{**asdict(r), "passed": r.passed} for r in results]}, indent=2, sort_keys=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic ester dataset (JSON Lines)"),
    "decode-noise": (cmd_decode_noise, "valence decoding of noisy one-hot edge labels"),
    "train": (cmd_train, "train a model and write a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "ablate": (cmd_ablate, "sharing-level and factor-type ablations"),
    "oracle-check": (cmd_oracle_check, "compare fast message passing with exhaustive oracles"),
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgmn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output path")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("decode-noise", "train", "eval", "ablate"):
            p.add_argument("--data", required=True, help="dataset file (JSON Lines)")
        if name in ("decode-noise", "train", "ablate"):
            p.add_argument("--no-figures", action="store_true", help="skip PNG output")
        if name == "decode-noise":
            p.add_argument("--beta", type=float, help="single noise scale instead of the default sweep")
        if name == "train":
            p.add_argument("--sharing", choices=["low", "medium", "high"], help="weight sharing level")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--ablate-type-a", action="store_true",
                           help="also report metrics with valence factors removed")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config)
        return handler(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
