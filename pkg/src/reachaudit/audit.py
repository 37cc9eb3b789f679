"""End-to-end reachability audit: data in, model, per-pair sweep, report files out."""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import json
import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    ActionKind,
    ActionSpace,
    EpsilonGreedy,
    RatingsDataset,
    Softmax,
    TargetSet,
    rank_of,
)
from .errors import DataError, DomainError, ReachError
from .ingest import FormatDescriptor, implicit_transform, parse_ratings, read_category_map, read_interactions, subsample
from .metrics import AggregateReport, PairMetrics, aggregate, bias_tables, lift, rank_gain, write_pairs_csv
from .models import (
    FactorModel,
    Model,
    UpdateConfig,
    affine_update,
    build_ease,
    build_knn,
    load_external_weights,
    load_model,
    predict_scores,
    train_mf_sgd,
)
from .solver import ReachProblem, Reachable, baseline_rho, epsilon_greedy_rho_star, max_reachability, top1_reachable

__all__ = [
    "AuditConfig",
    "load_config",
    "load_dataset",
    "build_model",
    "build_action_space",
    "build_target_set",
    "audit_user",
    "run_audit",
    "AuditResult",
    "write_report",
]

logger = logging.getLogger(__name__)

MODEL_KINDS = ("mf_sgd", "knn", "ease", "slim")


@dataclass(frozen=True)
class AuditConfig:
    """Flat audit configuration; every key maps one-to-one onto a JSON config key.

    Relative paths are resolved against ``base_dir`` (the config file's folder).
    ``n_users``/``n_targets`` of None mean "all".
    """

    dataset_path: str
    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    value_col: int = 2
    has_header: bool = False
    rating_min: float | None = None
    rating_max: float | None = None
    implicit: bool = False
    implicit_max: float = 10.0
    category_map_path: str | None = None
    user_fraction: float = 1.0
    item_fraction: float = 1.0
    seed: int = 0
    test_fraction: float = 0.1
    model: str = "mf_sgd"
    checkpoint_path: str | None = None
    slim_weights_path: str | None = None
    latent_dim: int = 16
    epochs: int = 50
    learning_rate: float = 0.01
    regularization: float = 0.05
    knn_neighbors: int = 20
    knn_shrink: float = 10.0
    knn_biased: bool = True
    ease_reg: float = 100.0
    update_variant: str = "sgd"
    update_step: float = 0.1
    update_reg: float = 0.0
    action_kind: str = "next"
    action_k: int = 10
    repeatable: bool = False
    betas: tuple[float, ...] = (1.0, 2.0, 4.0, 10.0)
    rule: str = "softmax"
    epsilon: float = 0.1
    n_users: int | None = None
    n_targets: int | None = None
    workers: int = 1
    out_dir: str = "audit_out"
    base_dir: str = "."

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.action_k < 1:
            raise DomainError("action_k must be >= 1")
        if any(b < 0 for b in self.betas) or not self.betas:
            raise DomainError("betas must be a nonempty list of nonnegative numbers")
        for name in ("n_users", "n_targets"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.workers < 1:
            raise DomainError("workers must be >= 1")
        if self.model not in MODEL_KINDS:
            raise DomainError(f"model must be one of {MODEL_KINDS}")
        if self.rule not in ("softmax", "epsilon_greedy"):
            raise DomainError("rule must be 'softmax' or 'epsilon_greedy'")
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError("epsilon must lie in [0, 1]")
        ActionKind(self.action_kind)
        UpdateConfig(self.update_step, self.update_reg, self.update_variant)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> "AuditConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        if "dataset_path" not in raw:
            raise DomainError("config needs dataset_path")
        return cls(**raw, base_dir=str(base_dir))

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **changes) -> "AuditConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["betas"] = list(self.betas)
        return d

    @property
    def update_config(self) -> UpdateConfig:
        return UpdateConfig(self.update_step, self.update_reg, self.update_variant)


def load_config(path: str | Path) -> AuditConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DomainError("config must be a JSON object")
    return AuditConfig.from_mapping(raw, path.parent)


def load_dataset(cfg: AuditConfig) -> RatingsDataset:
    rng_range = None
    if cfg.rating_min is not None and cfg.rating_max is not None:
        rng_range = (cfg.rating_min, cfg.rating_max)
    fmt = FormatDescriptor(cfg.delimiter, cfg.user_col, cfg.item_col, cfg.value_col, cfg.has_header, rng_range)
    path = cfg.resolve(cfg.dataset_path)
    if cfg.implicit:
        cmap = None
        if cfg.category_map_path:
            cmap = read_category_map(cfg.resolve(cfg.category_map_path), cfg.delimiter)
        data = implicit_transform(read_interactions(path, fmt), cfg.implicit_max, category_map=cmap)
    else:
        data = parse_ratings(path, fmt)
    if cfg.user_fraction < 1.0 or cfg.item_fraction < 1.0:
        data = subsample(data, cfg.user_fraction, cfg.item_fraction, cfg.seed)
    return data


def build_model(cfg: AuditConfig, data: RatingsDataset) -> Model:
    """Train (or load) the configured preference model on ``data``."""
    if cfg.checkpoint_path:
        return load_model(cfg.resolve(cfg.checkpoint_path), data)
    if cfg.model == "mf_sgd":
        return train_mf_sgd(data, cfg.latent_dim, cfg.learning_rate, cfg.regularization, cfg.epochs, cfg.seed)
    if cfg.model == "knn":
        return build_knn(data, cfg.knn_neighbors, cfg.knn_shrink, cfg.knn_biased)
    if cfg.model == "ease":
        return build_ease(data, cfg.ease_reg)
    if not cfg.slim_weights_path:
        raise DomainError("model 'slim' needs slim_weights_path")
    return load_external_weights(cfg.resolve(cfg.slim_weights_path), data)


def build_action_space(
    data: RatingsDataset,
    user: int,
    kind: ActionKind | str,
    k: int,
    scores: np.ndarray,
    rng: np.random.Generator,
    bounds: tuple[float, float] | None = None,
) -> ActionSpace:
    """History edits, future edits or next-K action items for one user.

    Raises :class:`DataError` when the user has too few eligible items.
    """
    kind = ActionKind(kind)
    seen = data.observed(user)
    unseen = np.setdiff1d(np.arange(data.n_items), seen)
    bounds = data.rating_range if bounds is None else bounds
    if kind is ActionKind.HISTORY:
        if len(seen) < k:
            raise DataError(f"user {user} has {len(seen)} rated items, needs {k}")
        items = rng.choice(seen, size=k, replace=False)
    else:
        if len(unseen) < k:
            raise DataError(f"user {user} has {len(unseen)} unseen items, needs {k}")
        if kind is ActionKind.FUTURE:
            items = rng.choice(unseen, size=k, replace=False)
        else:
            order = np.lexsort((unseen, -scores[unseen]))
            items = unseen[order[:k]]
    space = ActionSpace(user, kind, tuple(int(i) for i in items), bounds)
    space.check(seen)
    return space


def build_target_set(
    data: RatingsDataset,
    user: int,
    actions: ActionSpace,
    repeatable: bool,
    sample_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> TargetSet:
    """All items except action items (and, unless repeatable, rated items), optionally subsampled."""
    excluded = set(actions.items)
    if not repeatable:
        excluded |= set(int(i) for i in data.observed(user))
    pool = np.array([i for i in range(data.n_items) if i not in excluded], dtype=np.int64)
    if sample_size is not None and sample_size < len(pool):
        rng = rng or np.random.default_rng()
        pool = np.sort(rng.choice(pool, size=sample_size, replace=False))
    if len(pool) < 2:
        raise DataError(f"user {user} has {len(pool)} target items, needs 2")
    return TargetSet(user, tuple(int(i) for i in pool), repeatable)


def _user_rng(seed: int, user: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, user])


def _error_row(user: int, item: int, beta: str, code: str) -> PairMetrics:
    nan = math.nan
    return PairMetrics(user, item, beta, nan, nan, nan, 0, False, 0, nan, code)


def audit_user(
    cfg: AuditConfig, data: RatingsDataset, model: Model, user: int
) -> tuple[list[PairMetrics], str | None]:
    """All result rows for one user, or ``([], reason)`` if the user is skipped."""
    rng = _user_rng(cfg.seed, user)
    scores = predict_scores(model, user)
    try:
        actions = build_action_space(data, user, cfg.action_kind, cfg.action_k, scores, rng)
        targets = build_target_set(data, user, actions, cfg.repeatable, cfg.n_targets, rng)
    except ReachError as exc:
        return [], str(exc)
    update = affine_update(model, actions, cfg.update_config, data if isinstance(model, FactorModel) else None)
    ids = list(targets.items)
    rows: list[PairMetrics] = []

    if cfg.rule == "epsilon_greedy":
        B, c = update.B[ids], update.c[ids]
        lo, hi = actions.bounds
        for goal in ids:
            try:
                cert = top1_reachable(
                    B, c, ids, goal, np.full(len(actions), lo), np.full(len(actions), hi), x0=update.baseline_action
                )
                rho = epsilon_greedy_rho_star(cert, cfg.epsilon, len(ids)).rho
                rho0 = baseline_rho(scores, ids, EpsilonGreedy(cfg.epsilon), goal)
                after = update.scores(cert.action)
                gain = rank_gain(rank_of(scores, ids, goal), rank_of(after, ids, goal))
                rows.append(
                    PairMetrics(
                        user, goal, "", rho, rho0, lift(rho, rho0)[0], gain,
                        cert.reachable is not Reachable.MARGINAL, 0, float(cert.upper - cert.lower),
                    )
                )
            except ReachError as exc:
                rows.append(_error_row(user, goal, "", exc.code))
        return rows, None

    for beta in cfg.betas:
        key = repr(beta)
        for goal in ids:
            try:
                prob = ReachProblem.from_update(update, ids, goal, beta)
                res = max_reachability(prob)
                rho0 = baseline_rho(scores, ids, Softmax(beta), goal)
                after = update.scores(res.action)
                gain = rank_gain(rank_of(scores, ids, goal), rank_of(after, ids, goal))
                rows.append(
                    PairMetrics(
                        user, goal, key, res.rho, rho0, lift(res.rho, rho0)[0], gain,
                        res.converged, res.iterations, res.grad_norm,
                    )
                )
            except ReachError as exc:
                rows.append(_error_row(user, goal, key, exc.code))
    return rows, None


_CTX: dict = {}


def _init_worker(cfg: AuditConfig, data: RatingsDataset, model: Model) -> None:
    _CTX.update(cfg=cfg, data=data, model=model)


def _run_unit(user: int) -> tuple[int, list[PairMetrics], str | None]:
    rows, reason = audit_user(_CTX["cfg"], _CTX["data"], _CTX["model"], user)
    return user, rows, reason


@dataclass
class AuditResult:
    rows: list[PairMetrics]
    report: AggregateReport
    skipped: dict[int, str] = field(default_factory=dict)
    users: list[int] = field(default_factory=list)


def sample_users(cfg: AuditConfig, data: RatingsDataset) -> list[int]:
    if cfg.n_users is None or cfg.n_users >= data.n_users:
        return list(range(data.n_users))
    rng = np.random.default_rng([cfg.seed, 1])
    return sorted(int(u) for u in rng.choice(data.n_users, size=cfg.n_users, replace=False))


def _sweep(cfg: AuditConfig, data: RatingsDataset, model: Model, users: Sequence[int]):
    if cfg.workers == 1 or len(users) <= 1:
        return [(u, *audit_user(cfg, data, model, u)) for u in users]
    ctx = multiprocessing.get_context("fork")
    with cf.ProcessPoolExecutor(cfg.workers, mp_context=ctx, initializer=_init_worker, initargs=(cfg, data, model)) as ex:
        return list(ex.map(_run_unit, users))


def write_report(
    rows: Sequence[PairMetrics],
    data: RatingsDataset,
    out_dir: str | Path,
    meta: Mapping | None = None,
) -> AggregateReport:
    """Aggregate rows and write ``aggregate.json`` and ``bias_tables.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = bias_tables(aggregate(rows), data)
    report.meta = dict(meta or {})
    full = report.to_dict()
    with open(out / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump({k: full[k] for k in ("n_pairs", "n_errors", "meta", "discovery", "availability")}, fh, indent=1)
        fh.write("\n")
    with open(out / "bias_tables.json", "w", encoding="utf-8") as fh:
        json.dump({"correlations": full["correlations"], "bins": full["bins"]}, fh, indent=1)
        fh.write("\n")
    return report


def run_audit(cfg: AuditConfig, data: RatingsDataset | None = None, model: Model | None = None) -> AuditResult:
    """Run the configured audit and write ``pairs.csv``, ``aggregate.json`` and ``bias_tables.json``.

    Output is a pure function of the config: rows are merged in user-id
    order, so the worker count never changes a byte.
    """
    data = load_dataset(cfg) if data is None else data
    model = build_model(cfg, data) if model is None else model
    users = sample_users(cfg, data)
    rows: list[PairMetrics] = []
    skipped: dict[int, str] = {}
    for user, user_rows, reason in sorted(_sweep(cfg, data, model, users), key=lambda t: t[0]):
        if reason is not None:
            logger.info("skipping user %d: %s", user, reason)
            skipped[user] = reason
        rows.extend(user_rows)

    out = Path(cfg.resolve(cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    write_pairs_csv(rows, out / "pairs.csv")
    meta = {
        "n_users_sampled": len(users),
        "n_users_skipped": len(skipped),
        "skipped": {str(u): r for u, r in sorted(skipped.items())},
        "dataset": {"n_users": data.n_users, "n_items": data.n_items, "n_ratings": data.n_ratings},
        "transform": data.meta.get("implicit_transform"),
        "config": cfg.to_dict(),
    }
    report = write_report(rows, data, out, meta)
    return AuditResult(rows, report, skipped, users)
