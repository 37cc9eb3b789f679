"""Per-pair agency metrics, user/item aggregates and bias correlations."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .core import RatingsDataset
from .errors import DomainError

__all__ = [
    "PairMetrics",
    "AggregateReport",
    "CSV_COLUMNS",
    "discovery",
    "availability",
    "lift",
    "rank_gain",
    "average_ranks",
    "spearman",
    "aggregate",
    "bias_tables",
    "quartile_bins",
    "write_pairs_csv",
    "read_pairs_csv",
]

CSV_COLUMNS = (
    "user",
    "item",
    "beta",
    "rho_star",
    "rho_0",
    "lift",
    "rank_gain",
    "converged",
    "iters",
    "grad_norm",
    "error_code",
)


@dataclass(frozen=True)
class PairMetrics:
    """One row of the audit table.

    ``beta`` is the softmax inverse temperature as text, empty for
    epsilon-greedy audits. ``error_code`` is empty when the solve succeeded.
    """

    user: int
    item: int
    beta: str
    rho_star: float
    rho_0: float
    lift: float
    rank_gain: int
    converged: bool
    iters: int
    grad_norm: float
    error_code: str = ""

    @property
    def ok(self) -> bool:
        return not self.error_code

    @property
    def log_lift(self) -> float:
        return math.log(self.lift) if self.lift > 0 else -math.inf


def discovery(rhos: ArrayLike, threshold: float | None = None) -> float:
    """Fraction of a user's targets with probability strictly above ``threshold``.

    The default threshold is better-than-uniform, ``1 / len(rhos)``.
    """
    rhos = np.asarray(rhos, dtype=float).reshape(-1)
    if rhos.size == 0:
        raise DomainError("discovery of an empty target list")
    if threshold is None:
        threshold = 1.0 / rhos.size
    return float(np.count_nonzero(rhos > threshold)) / rhos.size


def availability(rhos: ArrayLike) -> float | None:
    """Mean probability over the users targeting an item; None if nobody does."""
    rhos = np.asarray(rhos, dtype=float).reshape(-1)
    if rhos.size == 0:
        return None
    return float(math.fsum(rhos) / rhos.size)


def lift(rho_star: float, rho_0: float) -> tuple[float, float]:
    """``(rho_star / rho_0, log of it)``; infinite when ``rho_0`` is zero."""
    if rho_0 == 0:
        return math.inf, math.inf
    lam = rho_star / rho_0
    return lam, (math.log(lam) if lam > 0 else -math.inf)


def rank_gain(rank_before: int, rank_after: int) -> int:
    return int(rank_before) - int(rank_after)


def average_ranks(x: ArrayLike) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x: ArrayLike, y: ArrayLike) -> float | None:
    """Spearman rank correlation, or None when undefined (constant or < 3 points)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DomainError("spearman inputs must have equal length")
    if x.size < 3:
        return None
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return None
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


# --------------------------------------------------------------------------
# pair table I/O


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_pairs_csv(rows: Iterable[PairMetrics], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_pairs_csv(path: str | Path) -> list[PairMetrics]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DomainError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            out.append(
                PairMetrics(
                    user=int(row["user"]),
                    item=int(row["item"]),
                    beta=row["beta"],
                    rho_star=float(row["rho_star"]),
                    rho_0=float(row["rho_0"]),
                    lift=float(row["lift"]),
                    rank_gain=int(row["rank_gain"]),
                    converged=row["converged"] == "1",
                    iters=int(row["iters"]),
                    grad_norm=float(row["grad_norm"]),
                    error_code=row["error_code"],
                )
            )
    return out


# --------------------------------------------------------------------------
# aggregates


@dataclass
class AggregateReport:
    """Discovery and availability per beta.

    ``discovery[beta][user] = {"baseline", "best", "n_targets", "threshold"}``;
    ``availability[beta][item] = {"baseline", "best", "n_users"}``.
    Only successfully solved pairs enter the means.
    """

    discovery: dict[str, dict[int, dict]] = field(default_factory=dict)
    availability: dict[str, dict[int, dict]] = field(default_factory=dict)
    n_pairs: int = 0
    n_errors: int = 0
    meta: dict = field(default_factory=dict)
    correlations: dict[str, dict[str, float | None]] = field(default_factory=dict)
    bins: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keyed(d):
            return {b: {str(k): v for k, v in sorted(inner.items())} for b, inner in sorted(d.items())}

        return {
            "n_pairs": self.n_pairs,
            "n_errors": self.n_errors,
            "meta": self.meta,
            "discovery": keyed(self.discovery),
            "availability": keyed(self.availability),
            "correlations": self.correlations,
            "bins": self.bins,
        }


def aggregate(rows: Sequence[PairMetrics], threshold: float | None = None) -> AggregateReport:
    """Discovery per (beta, user) and availability per (beta, item).

    The discovery threshold defaults to ``1 / |targets|`` with the target
    count taken as the number of rows the user has at that beta.
    """
    by_user: dict[tuple[str, int], list[PairMetrics]] = defaultdict(list)
    by_item: dict[tuple[str, int], list[PairMetrics]] = defaultdict(list)
    for r in rows:
        by_user[(r.beta, r.user)].append(r)
        if r.ok:
            by_item[(r.beta, r.item)].append(r)

    rep = AggregateReport(n_pairs=len(rows), n_errors=sum(not r.ok for r in rows))
    for (beta, user), rs in sorted(by_user.items()):
        ok = [r for r in rs if r.ok]
        if not ok:
            continue
        thr = 1.0 / len(rs) if threshold is None else threshold
        rep.discovery.setdefault(beta, {})[user] = {
            "baseline": discovery([r.rho_0 for r in ok], thr),
            "best": discovery([r.rho_star for r in ok], thr),
            "n_targets": len(rs),
            "threshold": thr,
        }
    for (beta, item), rs in sorted(by_item.items()):
        rep.availability.setdefault(beta, {})[item] = {
            "baseline": availability([r.rho_0 for r in rs]),
            "best": availability([r.rho_star for r in rs]),
            "n_users": len(rs),
        }
    return rep


def quartile_bins(stat: ArrayLike, n_bins: int = 4) -> np.ndarray:
    """Equal-count bin labels ``0..n_bins-1`` by rank of ``stat`` (ties by position)."""
    stat = np.asarray(stat, dtype=float)
    order = np.argsort(stat, kind="stable")
    labels = np.empty(len(stat), dtype=int)
    labels[order] = (np.arange(len(stat)) * n_bins) // max(len(stat), 1)
    return labels


def _binned(stat: np.ndarray, base: np.ndarray, best: np.ndarray) -> list[dict]:
    if len(stat) == 0:
        return []
    labels = quartile_bins(stat)
    out = []
    for b in range(4):
        sel = labels == b
        if not sel.any():
            continue
        out.append(
            {
                "bin": b,
                "count": int(sel.sum()),
                "stat_min": float(stat[sel].min()),
                "stat_max": float(stat[sel].max()),
                "baseline_mean": float(base[sel].mean()),
                "baseline_median": float(np.median(base[sel])),
                "best_mean": float(best[sel].mean()),
                "best_median": float(np.median(best[sel])),
            }
        )
    return out


def bias_tables(report: AggregateReport, data: RatingsDataset) -> AggregateReport:
    """Attach popularity and experience correlations and quartile summaries.

    Item popularity is the mean rating, prevalence the rating count, and
    user experience the number of rated items. Fills ``report.correlations``
    and ``report.bins`` per beta and returns the report.
    """
    pop = data.item_means()
    count = data.item_counts().astype(float)
    exp = data.user_counts().astype(float)
    for beta in sorted(set(report.availability) | set(report.discovery)):
        av = report.availability.get(beta, {})
        items = np.array(sorted(i for i in av if np.isfinite(pop[i])), dtype=int)
        a_base = np.array([av[i]["baseline"] for i in items], dtype=float)
        a_best = np.array([av[i]["best"] for i in items], dtype=float)
        disc = report.discovery.get(beta, {})
        users = np.array(sorted(disc), dtype=int)
        d_base = np.array([disc[u]["baseline"] for u in users], dtype=float)
        d_best = np.array([disc[u]["best"] for u in users], dtype=float)
        p = pop[items] if len(items) else np.array([])
        e = exp[users] if len(users) else np.array([])
        report.correlations[beta] = {
            "popularity_vs_baseline_availability": spearman(p, a_base),
            "popularity_vs_max_availability": spearman(p, a_best),
            "popularity_vs_rating_count": spearman(p, count[items] if len(items) else np.array([])),
            "experience_vs_baseline_discovery": spearman(e, d_base),
            "experience_vs_max_discovery": spearman(e, d_best),
            "n_items": int(len(items)),
            "n_users": int(len(users)),
        }
        report.bins[beta] = {
            "popularity": _binned(p, a_base, a_best),
            "experience": _binned(e, d_base, d_best),
        }
    return report
