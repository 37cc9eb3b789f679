"""Command-line entry point: ``reachaudit {train,audit,geometry,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .audit import AuditConfig, build_action_space, build_model, load_config, load_dataset, run_audit, sample_users, write_report
from .errors import DomainError, ReachError
from .geometry import augment_factors, is_hull_vertex, rich_action_check, verify_augmentation_reachability
from .ingest import dataset_summary, split
from .metrics import read_pairs_csv
from .models import FactorModel, predict_scores, rmse, save_model

__all__ = ["main", "build_parser"]


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _config(args) -> AuditConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["out_dir"] = str(Path(args.out).resolve())
    return cfg.replace(**changes) if changes else cfg


def _out_dir(cfg: AuditConfig) -> Path:
    out = Path(cfg.resolve(cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> dict:
    cfg = _config(args)
    data = load_dataset(cfg)
    train, test = split(data, cfg.test_fraction, cfg.seed)
    model = build_model(cfg.replace(checkpoint_path=None), train)
    out = _out_dir(cfg)
    save_model(model, out / "model.npz")
    summary = {
        "model": cfg.model,
        "checkpoint": str(out / "model.npz"),
        "rmse": rmse(model, test) if test.n_ratings else None,
        "n_train": train.n_ratings,
        "n_test": test.n_ratings,
        "dataset": dataset_summary(data),
    }
    _dump(summary, out / "train.json")
    return summary


def cmd_audit(args) -> dict:
    cfg = _config(args)
    result = run_audit(cfg)
    out = Path(cfg.resolve(cfg.out_dir))
    return {
        "out_dir": str(out),
        "n_pairs": result.report.n_pairs,
        "n_errors": result.report.n_errors,
        "n_users": len(result.users),
        "n_skipped": len(result.skipped),
    }


def cmd_geometry(args) -> dict:
    cfg = _config(args)
    data = load_dataset(cfg)
    model = build_model(cfg, data)
    if not isinstance(model, FactorModel):
        raise DomainError("geometry needs a factor model (model 'mf_sgd' or a factor checkpoint)")
    aug = augment_factors(model.P, model.Q)
    base = model.P @ model.Q.T
    vertices = [is_hull_vertex(aug.Q, i) for i in range(model.n_items)]
    users = []
    for u in sample_users(cfg, data):
        try:
            actions = build_action_space(
                data, u, cfg.action_kind, cfg.action_k, predict_scores(model, u), np.random.default_rng([cfg.seed, 2, u])
            )
        except ReachError as exc:
            users.append({"user": u, "skipped": str(exc)})
            continue
        rep = verify_augmentation_reachability(aug, u, actions.items, cfg.update_config)
        users.append(
            {
                "user": u,
                "rich": rep.rich,
                "fraction_reachable": rep.fraction_reachable,
                "rich_original_rank": bool(rich_action_check(model.Q, actions.items)),
            }
        )
    summary = {
        "C": aug.C,
        "max_prediction_change": float(np.max(np.abs(aug.P @ aug.Q.T - base))),
        "max_norm_error": float(np.max(np.abs(np.linalg.norm(aug.Q, axis=1) - aug.C))),
        "n_items": model.n_items,
        "n_vertices": int(sum(vertices)),
        "non_vertices": [i for i, v in enumerate(vertices) if not v],
        "duplicate_groups": [list(g) for g in aug.duplicates],
        "users": users,
    }
    _dump(summary, _out_dir(cfg) / "geometry.json")
    return {k: v for k, v in summary.items() if k != "users"} | {"n_users": len(users)}


def cmd_report(args) -> dict:
    cfg = _config(args)
    data = load_dataset(cfg)
    rows = read_pairs_csv(args.csv)
    report = write_report(rows, data, _out_dir(cfg), {"source_csv": str(args.csv)})
    return {"n_pairs": report.n_pairs, "n_errors": report.n_errors, "out_dir": str(_out_dir(cfg))}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reachaudit", description="Audit user agency in recommender systems.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if workers:
            p.add_argument("--workers", type=int, help="worker processes for the sweep")
        return p

    common(sub.add_parser("train", help="fit a model, write model.npz and held-out RMSE")).set_defaults(func=cmd_train)
    common(sub.add_parser("audit", help="run the reachability sweep"), workers=True).set_defaults(func=cmd_audit)
    common(sub.add_parser("geometry", help="factor augmentation and hull-vertex report")).set_defaults(
        func=cmd_geometry
    )
    rep = common(sub.add_parser("report", help="recompute aggregates and bias tables from a pairs CSV"))
    rep.add_argument("--csv", required=True, type=Path, help="pairs.csv written by audit")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except ReachError as exc:
        code, message = exc.code, str(exc)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        code, message = type(exc).__name__, str(exc)
    else:
        print(json.dumps({"status": "ok", "command": args.command, **summary}))
        return 0
    print(json.dumps({"status": "error", "command": args.command, "code": code, "message": message}), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
