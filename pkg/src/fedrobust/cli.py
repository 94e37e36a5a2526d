"""Command-line entry point.

Verbs: gen (materialize a synthetic benchmark), train (one method, one
fold), loso (full cross-validation), attack (evaluate a checkpoint),
ablate (the 8-row toggle grid), sweep (participation / local-epoch
curves). Configuration comes from an optional JSON file plus
``--set field=value`` overrides; outputs land in a run directory as a
manifest JSON and results CSVs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from . import model as M
from .attacks import AttackSpec


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if current is None or isinstance(current, int):
        return int(value) if value.lower() != "none" else None
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        item = current[0] if current else 0
        return tuple(type(item)(v) for v in value.split(","))
    return value


def _build_attacks(entries) -> tuple[AttackSpec, ...]:
    return tuple(AttackSpec(**e) for e in entries)


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig()
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates: dict = {}
    if path:
        raw = json.loads(Path(path).read_text())
        for key, value in raw.items():
            if key not in fields:
                raise ValueError(f"unknown config field {key!r}")
            if key == "attacks":
                updates[key] = _build_attacks(value)
            elif key == "seeds":
                updates[key] = tuple(value)
            else:
                updates[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be field=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in fields:
            raise ValueError(f"unknown config field {key!r}")
        if key == "attacks":
            updates[key] = _build_attacks(json.loads(value))
        else:
            current = updates.get(key, getattr(cfg, key))
            updates[key] = _coerce(value, current)
    return dataclasses.replace(cfg, **updates)


def _datasets(cfg: H.ExperimentConfig):
    return D.default_benchmark(K=cfg.subjects, L=cfg.classes, c=cfg.channels,
                               t=cfg.samples, n=cfg.trials, seed=cfg.data_seed,
                               align=cfg.align)


def cmd_gen(cfg, args) -> int:
    D.save_benchmark(args.out, _datasets(cfg), L=cfg.classes)
    print(f"wrote {cfg.subjects} subjects to {args.out}")
    return 0


def cmd_train(cfg, args) -> int:
    datasets = _datasets(cfg)
    fold = args.hold_out if args.hold_out is not None else cfg.subjects - 1
    train_sets = [d for k, d in enumerate(datasets) if k != fold]
    seed = cfg.seeds[0]
    ps, batch_stats, _ = H.train_model(cfg, train_sets,
                                       H._fold_seed(seed, fold))
    out = Path(args.out)
    M.save_checkpoint(ps, out / "checkpoint")
    H.write_manifest(out / "manifest.json", cfg,
                     {"held_out_subject": fold, "seed": seed,
                      "eval_batch_stats": batch_stats})
    tx, ty = datasets[fold]
    benign = H.bca(H.predict(ps, tx, batch_stats, cfg.test_batch), ty,
                   cfg.classes)
    print(f"held-out subject {fold}: benign bca {benign:.4f}")
    return 0


def cmd_loso(cfg, args) -> int:
    rows, _ = H.loso_run(cfg)
    out = Path(args.out)
    H.write_csv(out / "results.csv", rows)
    H.write_manifest(out / "manifest.json", cfg, {"rows": len(rows)})
    benign = [r["bca"] for r in rows if r["metric"] == "benign"]
    print(f"{len(rows)} rows; mean benign bca {np.mean(benign):.4f}")
    return 0


def cmd_attack(cfg, args) -> int:
    ps = M.load_checkpoint(args.checkpoint)
    run_manifest = json.loads(
        (Path(args.checkpoint).parent / "manifest.json").read_text())
    batch_stats = bool(run_manifest["eval_batch_stats"])
    fold = run_manifest["held_out_subject"]
    tx, ty = _datasets(cfg)[fold]
    metrics = H.evaluate(ps, tx, ty, cfg.classes, cfg.attacks, batch_stats,
                         cfg.test_batch)
    rows = [{"subject": fold, "metric": k, "bca": round(v, 10),
             "config": H.config_hash(cfg)} for k, v in metrics.items()]
    H.write_csv(Path(args.out) / "attack_results.csv", rows)
    for row in rows:
        print(f"{row['metric']}: {row['bca']:.4f}")
    return 0


def cmd_ablate(cfg, args) -> int:
    rows = H.ablate(cfg)
    out = Path(args.out)
    H.write_csv(out / "ablation_cells.csv", rows)
    H.write_csv(out / "ablation_summary.csv", H.summarize_ablation(rows))
    H.write_manifest(out / "manifest.json", cfg, {"rows": len(rows)})
    print(f"wrote {len(rows)} cells to {out}")
    return 0


def cmd_sweep(cfg, args) -> int:
    values = tuple(int(v) for v in args.values.split(","))
    rows = H.sweep(cfg, args.parameter, values)
    out = Path(args.out)
    H.write_csv(out / f"sweep_{args.parameter}.csv", rows)
    H.write_manifest(out / "manifest.json", cfg,
                     {"parameter": args.parameter, "values": list(values)})
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrobust",
        description="Federated adversarial-training simulator for "
                    "multichannel time-series classification.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        dest="overrides", help="override a config field")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="materialize the synthetic benchmark")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one method on one fold")
    p.add_argument("--out", required=True)
    p.add_argument("--hold-out", type=int, default=None,
                   help="held-out subject (default: last)")

    p = sub.add_parser("loso", help="full leave-one-subject-out run")
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="8-row robustness-toggle grid")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="participation / local-epoch curve")
    p.add_argument("--parameter", choices=("m", "E"), required=True)
    p.add_argument("--values", required=True, help="comma-separated ints")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "loso": cmd_loso,
            "attack": cmd_attack, "ablate": cmd_ablate, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
