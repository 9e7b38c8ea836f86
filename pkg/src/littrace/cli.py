"""Command-line entry point: prep, synth, train, eval, trace, ablate.

Commands read a flat ``key=value`` config file (blank lines and ``#``
comments allowed) plus ``--key value`` overrides for any TrainConfig field;
flags win over file values. Every artifact embeds the effective config and
seed. Exit codes: 0 success, 2 unreadable/malformed input, 1 run failure
(a ``.failed`` marker is left next to partial outputs).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .autodiff import ContractError
from .data import (
    LoadError,
    SynthConfig,
    adapt_assist09,
    generate_synthetic_literacy,
    load_canonical,
    window_and_pad,
    write_canonical,
)
from .model import TlsqktParams, extract_trajectories, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    prepare_run_data,
    run_ablation_suite,
    train,
)


class ConfigError(ValueError):
    """Config file or flag set is malformed."""


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse flat key=value lines; duplicate keys are rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in out:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def effective_train_config(args) -> TrainConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(read_config_file(args.config))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = value
    try:
        return TrainConfig.from_mapping(mapping)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    for f in fields(TrainConfig):
        parser.add_argument(f"--{f.name}", default=None, metavar="V")


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


# ---------------------------------------------------------------------------
# commands


def cmd_prep(args) -> int:
    out = Path(args.out)
    if args.format == "assist09":
        stats = adapt_assist09(args.input, out)
        maps_source = out  # adapter keeps original ids; dense map comes from its output
    else:
        loaded = load_canonical(args.input)
        write_canonical(out, loaded.sequences)
        stats = loaded.stats
        maps_source = Path(args.input)
    if args.id_map:
        load_canonical(maps_source).id_maps.write(args.id_map)
    stats_path = Path(args.stats) if args.stats else out.with_suffix(".stats.json")
    write_json(
        stats_path,
        {
            "config": {"command": "prep", "input": args.input, "format": args.format, "out": str(out)},
            "stats": stats.to_dict(),
        },
    )
    print(f"wrote {out} ({stats.n_interactions} interactions, {stats.n_students} students)")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_students=args.n_students,
        n_questions=args.n_questions,
        n_kcs=args.n_kcs,
        n_literacy=args.n_literacy,
        seq_len=args.seq_len,
        seed=args.seed,
    )
    stats = generate_synthetic_literacy(cfg, args.out, args.truth)
    stats_path = Path(args.stats) if args.stats else Path(args.out).with_suffix(".stats.json")
    write_json(
        stats_path,
        {"config": {"command": "synth", **cfg.__dict__}, "seed": cfg.seed, "stats": stats.to_dict()},
    )
    print(f"wrote {args.out} ({stats.n_interactions} interactions)")
    return 0


def cmd_train(args) -> int:
    config = effective_train_config(args)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / "run.failed"
    marker.unlink(missing_ok=True)
    try:
        report, params = train(config, log_fn=print)
        write_json(out_dir / "report.json", report.to_dict())
        save_checkpoint(
            out_dir / "checkpoint.json",
            params,
            seed=config.seed,
            extra_meta={"train_config": config.to_dict()},
        )
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    print(
        f"done: best epoch {report.best_epoch}, stopped {report.stopped_epoch}, "
        f"test auc {report.test_auc:.4f}, acc {report.test_acc:.4f} "
        f"({report.wall_time:.1f}s)"
    )
    return 0


def _config_for_checkpoint(args, ckpt_meta: dict) -> TrainConfig:
    mapping = dict(ckpt_meta.get("train_config", {}))
    if args.config:
        mapping.update(read_config_file(args.config))
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = value
    if not mapping.get("dataset"):
        raise ConfigError("no dataset: pass --dataset or a config file")
    try:
        return TrainConfig.from_mapping(mapping)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    meta = json.loads(Path(args.checkpoint).read_text(encoding="utf-8"))["meta"]
    config = _config_for_checkpoint(args, meta)
    out = Path(args.out)
    marker = out.with_name(out.name + ".failed")
    marker.unlink(missing_ok=True)
    try:
        prepared = prepare_run_data(config)
        _check_vocab(params, prepared.model_config)
        test_auc, test_acc = evaluate(params, prepared.test, config.batch_size)
        write_json(out, {"auc": test_auc, "acc": test_acc, "config": config.to_dict()})
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    print(f"test auc {test_auc:.4f}, acc {test_acc:.4f}")
    return 0


def _check_vocab(params, model_config) -> None:
    have = params.config
    if isinstance(params, TlsqktParams):
        checks = [
            ("q_table", model_config.n_questions, have.n_questions),
            ("l_table", model_config.n_literacy, have.n_literacy),
        ]
    else:
        checks = [("kc_table", model_config.n_kcs, have.n_kcs)]
    for table, needed, available in checks:
        if needed > available:
            raise ContractError(
                f"dataset needs {needed} ids but checkpoint {table} holds {available}"
            )


def cmd_trace(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if not isinstance(params, TlsqktParams):
        raise ConfigError("trace needs a three-channel checkpoint, not the DKT baseline")
    out = Path(args.out)
    marker = out.with_name(out.name + ".failed")
    marker.unlink(missing_ok=True)
    try:
        loaded = load_canonical(args.data)
        n_lit = loaded.stats.n_literacy if loaded.stats.n_literacy is not None else loaded.stats.n_kcs
        probe_config = params.config
        if loaded.stats.n_questions > probe_config.n_questions:
            raise ContractError(
                f"dataset needs {loaded.stats.n_questions} ids but checkpoint q_table "
                f"holds {probe_config.n_questions}"
            )
        if n_lit > probe_config.n_literacy:
            raise ContractError(
                f"dataset needs {n_lit} ids but checkpoint l_table holds {probe_config.n_literacy}"
            )
        batches = window_and_pad(loaded.sequences, probe_config.max_seq_len)
        if not batches:
            raise ContractError("no sequence long enough to trace (need at least 2 steps)")
        windows = batches[0]
        rows: list[tuple[str, int, int, float]] = []
        for i in range(0, windows.n_rows, args.batch_size):
            chunk = windows.take(range(i, min(i + args.batch_size, windows.n_rows))).trimmed()
            if chunk.n_targets == 0:
                continue
            rows.extend(extract_trajectories(params, chunk))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        meta = json.loads(Path(args.checkpoint).read_text(encoding="utf-8"))["meta"]
        echo = {
            "command": "trace",
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "seed": meta["seed"],
            "config_hash": meta["config_hash"],
        }
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config: {json.dumps(echo, sort_keys=True)}\n")
            fh.write("student_id,step,literacy_id,prob\n")
            for student, step, lit, prob in rows:
                fh.write(f"{student},{step},{lit},{prob!r}\n")
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def cmd_ablate(args) -> int:
    config = effective_train_config(args)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / "run.failed"
    marker.unlink(missing_ok=True)
    try:
        rows = run_ablation_suite(config, log_fn=print)
        out = out_dir / "ablation.csv"
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config: {json.dumps(config.to_dict(), sort_keys=True)}\n")
            fh.write("variant,auc,acc,best_epoch\n")
            for row in rows:
                fh.write(
                    f"{row['variant']},{_fmt(row['auc'])},{_fmt(row['acc'])},{row['best_epoch']}\n"
                )
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="littrace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="convert a raw or canonical log to canonical CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("assist09", "canonical"), default="canonical")
    p.add_argument("--out", required=True)
    p.add_argument("--id_map", default=None)
    p.add_argument("--stats", default=None)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic literacy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--stats", default=None)
    p.add_argument("--n_students", type=int, default=5224)
    p.add_argument("--n_questions", type=int, default=16)
    p.add_argument("--n_kcs", type=int, default=16)
    p.add_argument("--n_literacy", type=int, default=6)
    p.add_argument("--seq_len", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one variant and write report + checkpoint")
    _add_train_config_flags(p)
    p.add_argument("--output_dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the held-out test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_train_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export counterfactual literacy trajectories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch_size", type=int, default=16)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("ablate", help="train all ablation variants and compare")
    _add_train_config_flags(p)
    p.add_argument("--output_dir", required=True)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (LoadError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
