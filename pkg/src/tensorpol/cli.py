"""Command-line entry point wiring splits, training, evaluation,
equivariance certification, prediction, and synthetic data generation.

Exit codes: 0 success, 2 input/config error, 3 numerical failure.

All randomness flows from one --seed expanded into independent streams via
numpy SeedSequence([seed, k]): k=0 parameter init, k=1 epoch shuffling,
k=2 rotation sampling.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from importlib.resources import files as resource_files

import numpy as np

from . import tensor_algebra as ta
from .data import (
    EmptyDataset,
    InvalidTensor,
    ParseError,
    SplitManifest,
    make_splits,
    parse_dataset,
    synthetic_generator,
    write_xyz,
)
from .evaluation import equiv_test, metrics, param_count, relative_deviatoric_report
from .model import ModelConfig, UnknownElement, load_checkpoint
from .training import DivergenceDetected, TrainConfig, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

BOOLEAN_STATES = configparser.ConfigParser.BOOLEAN_STATES


class CliError(Exception):
    """Input/config problem; maps to exit code 2."""


def rotation_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 2]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# config plumbing


def _preset_path(name: str):
    candidate = resource_files("tensorpol") / "presets" / f"{name}.cfg"
    return candidate if candidate.is_file() else None


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low not in BOOLEAN_STATES:
            raise CliError(f"expected a boolean, got {raw!r}")
        return BOOLEAN_STATES[low]
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def _apply_section(defaults, section: dict, where: str):
    out = {}
    for key, raw in section.items():
        if not hasattr(defaults, key):
            raise CliError(f"{where}: unknown key {key!r}")
        try:
            out[key] = _coerce(raw, getattr(defaults, key))
        except ValueError as exc:
            raise CliError(f"{where}: bad value for {key!r} ({exc})")
    return out


def load_configs(config: str | None, overrides=()) -> tuple[ModelConfig, TrainConfig]:
    """Read [model]/[train] sections from a preset name or file path, then
    apply section.key=value overrides on top."""
    sections = {"model": {}, "train": {}}
    if config is not None:
        path = config
        if not os.path.exists(path):
            preset = _preset_path(config)
            if preset is None:
                raise CliError(f"config {config!r} is neither a file nor a preset")
            path = str(preset)
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for name in parser.sections():
            if name not in sections:
                raise CliError(f"{path}: unknown section [{name}]")
            sections[name].update(dict(parser[name]))
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not section.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise CliError(f"override key {key!r} must be model.<key> or train.<key>")
        section, field = key.split(".", 1)
        if section not in sections:
            raise CliError(f"override section {section!r} must be model or train")
        sections[section][field] = value
    model_kwargs = _apply_section(_MODEL_DEFAULTS, sections["model"], "[model]")
    train_kwargs = _apply_section(_TRAIN_DEFAULTS, sections["train"], "[train]")
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise CliError(str(exc))


_MODEL_DEFAULTS = ModelConfig()
_TRAIN_DEFAULTS = TrainConfig()


def _records_or_fail(path):
    if not os.path.exists(path):
        raise CliError(f"dataset file not found: {path}")
    return parse_dataset(path)


def _molecules(records, require_targets: bool, where: str):
    mols = []
    for rec in records:
        if require_targets and rec.alpha is None:
            raise CliError(f"{where}: record {rec.mol_id} has no polarizability target")
        mols.append(rec.to_molecule())
    return mols


def _out_dir(args) -> str:
    out = args.out or os.environ.get("TENSORPOL_OUT")
    if not out:
        raise CliError("no output directory: pass --out or set TENSORPOL_OUT")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_split(args) -> int:
    records = _records_or_fail(args.dataset)
    try:
        fractions = tuple(float(f) for f in args.fractions.split(","))
    except ValueError:
        raise CliError(f"bad --fractions {args.fractions!r}")
    manifest = make_splits(records, seed=args.seed, fractions=fractions)
    manifest.save(args.out)
    print(
        f"split {len(records)} records / "
        f"{len(manifest.train) + len(manifest.val) + len(manifest.test)} mol_ids -> "
        f"train {len(manifest.train)}, val {len(manifest.val)}, "
        f"test {len(manifest.test)}; wrote {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_configs(args.config, args.set)
    if args.seed is not None:
        train_cfg.seed = args.seed
    workers = args.workers or int(os.environ.get("TENSORPOL_WORKERS", "0")) or None
    if workers:
        train_cfg.workers = workers
    records = _records_or_fail(args.dataset)
    manifest = SplitManifest.load(args.manifest)
    train_mols = _molecules(manifest.select(records, "train"), True, "train split")
    val_mols = _molecules(manifest.select(records, "val"), True, "val split")
    if not train_mols or not val_mols:
        raise CliError("train and val splits must be nonempty")
    out = _out_dir(args)
    print(
        f"training {model_cfg.readout} model: {param_count(model_cfg)} parameters, "
        f"{len(train_mols)} train / {len(val_mols)} val molecules"
    )
    log_path = os.path.join(out, "train_log.jsonl")
    mode = "a" if args.resume else "w"
    try:
        with open(log_path, mode, encoding="utf-8") as log_fh:
            result = train(
                train_mols,
                val_mols,
                model_cfg,
                train_cfg,
                out_dir=out,
                resume_from=args.resume,
                log_fh=log_fh,
            )
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(
        f"best epoch {result.best_epoch}: val_frob_mae {result.best_val:.6f}; "
        f"checkpoints in {out}"
    )
    return EXIT_OK


def _load_model_or_fail(path):
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    try:
        model, meta, _ = load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}")
    return model, meta


def _split_molecules(args, require_targets=True):
    records = _records_or_fail(args.dataset)
    if args.manifest:
        manifest = SplitManifest.load(args.manifest)
        records = manifest.select(records, args.split)
    if not records:
        raise CliError(f"split {args.split!r} selected no records")
    return _molecules(records, require_targets, f"split {args.split!r}")


def cmd_eval(args) -> int:
    model, _ = _load_model_or_fail(args.checkpoint)
    mols = _split_molecules(args)
    out = _out_dir(args)
    preds = [model.predict(m) for m in mols]
    targets = [m.target_alpha for m in mols]
    if not all(np.isfinite(p).all() for p in preds):
        print("error: non-finite predictions", file=sys.stderr)
        return EXIT_NUMERIC
    report = metrics(preds, targets, keep_residuals=True)
    binned = relative_deviatoric_report(
        preds, targets, [m.heavy_atom_count() for m in mols]
    )
    report.save(os.path.join(out, "metric_report.json"))
    binned.save(os.path.join(out, "deviatoric_bins.json"))
    binned.save_table(os.path.join(out, "deviatoric_bins.tsv"))
    print(
        f"evaluated {report.n_samples} molecules: "
        f"frob_mae {report.frob_mae:.6f}, iso_mae {report.iso_mae:.6f}, "
        f"aniso_frob_mae {report.aniso_frob_mae:.6f}; reports in {out}"
    )
    return EXIT_OK


def cmd_equivcheck(args) -> int:
    model, _ = _load_model_or_fail(args.checkpoint)
    mols = _split_molecules(args, require_targets=False)
    if args.limit:
        mols = mols[: args.limit]
    # report file is optional: certification is useful as a printed verdict
    out = args.out or os.environ.get("TENSORPOL_OUT")
    report = equiv_test(
        model,
        mols,
        n_rot=args.rotations,
        seed=rotation_seed(args.seed),
        identity_rotations=args.identity_rotations,
    )
    where = ""
    if out:
        os.makedirs(out, exist_ok=True)
        report.save(os.path.join(out, "equiv_report.json"))
        where = f"; report in {out}"
    target_part = (
        f", eps_target {report.eps_target:.8f}" if report.eps_target is not None else ""
    )
    print(
        f"equivariance over {report.n_samples} molecules x "
        f"{report.n_rotations} rotations: eps_equiv {report.eps_equiv:.8f}"
        f"{target_part}{where}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _load_model_or_fail(args.checkpoint)
    records = _records_or_fail(args.xyz)
    for rec in records:
        mol = rec.to_molecule()
        alpha = model.predict(mol)
        if not np.isfinite(alpha).all():
            print("error: non-finite prediction", file=sys.stderr)
            return EXIT_NUMERIC
        decomp = ta.decompose(alpha)
        print(f"mol_id {rec.mol_id} ({mol.n_atoms} atoms)")
        print("alpha (Bohr^3):")
        for row in alpha:
            print("  " + "  ".join(f"{x:12.6f}" for x in row))
        print(f"isotropic: {decomp.iso:.6f}")
        print("anisotropic part:")
        for row in decomp.aniso:
            print("  " + "  ".join(f"{x:12.6f}" for x in row))
    return EXIT_OK


def cmd_synth(args) -> int:
    records = synthetic_generator(args.n, seed=args.seed, teacher=args.teacher)
    write_xyz(records, args.out)
    print(f"wrote {len(records)} synthetic molecules ({args.teacher} teacher) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorpol",
        description="Tensor-channel equivariant network for molecular polarizability",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="generate a molecule-level split manifest")
    p.add_argument("dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a config preset or file")
    p.add_argument("--config", required=True, help="preset name (full, painn_baseline, toy) or path")
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute test metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("equivcheck", help="rotational equivariance certification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--rotations", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="cap the number of molecules")
    p.add_argument(
        "--identity-rotations",
        action="store_true",
        help="debug: use identity rotations (eps_equiv must be 0)",
    )
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_equivcheck)

    p = sub.add_parser("predict", help="predict the tensor for molecules in an XYZ file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("xyz")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic-teacher dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher", choices=("pairwise", "angular"), default="pairwise")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ParseError, InvalidTensor, EmptyDataset, UnknownElement) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
