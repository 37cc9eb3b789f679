"""Reading rating files, implicit-feedback transforms, splits and subsampling."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RatingsDataset
from .errors import DataError, DomainError, ParseError

__all__ = [
    "FormatDescriptor",
    "ML1M_FORMAT",
    "RawInteraction",
    "parse_ratings",
    "read_interactions",
    "read_category_map",
    "write_ratings",
    "implicit_transform",
    "split",
    "subsample",
    "dataset_summary",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FormatDescriptor:
    """How to read one interaction per line.

    ``user_col``, ``item_col`` and ``value_col`` are 0-based field positions;
    extra fields (timestamps, ...) are ignored. When ``rating_range`` is None
    the range is taken from the observed minimum and maximum.
    """

    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    value_col: int = 2
    has_header: bool = False
    rating_range: tuple[float, float] | None = None


ML1M_FORMAT = FormatDescriptor(delimiter="::", rating_range=(1.0, 5.0))


@dataclass(frozen=True)
class RawInteraction:
    """One (user, item, value) record before indexing."""

    user: str
    item: str
    value: float

    def __post_init__(self) -> None:
        if not self.user or not self.item:
            raise DataError("interaction keys must be non-empty")
        if not math.isfinite(self.value):
            raise DataError(f"non-finite value for ({self.user}, {self.item})")


def read_interactions(path: str | Path, fmt: FormatDescriptor = FormatDescriptor()) -> list[RawInteraction]:
    """Parse a delimiter-separated file into raw interactions, in file order."""
    out: list[RawInteraction] = []
    need = max(fmt.user_col, fmt.item_col, fmt.value_col) + 1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if fmt.has_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) < need:
                raise ParseError(f"expected at least {need} fields, got {len(parts)}", lineno)
            user = parts[fmt.user_col].strip()
            item = parts[fmt.item_col].strip()
            try:
                value = float(parts[fmt.value_col])
            except ValueError:
                raise ParseError(f"cannot parse value {parts[fmt.value_col]!r}", lineno) from None
            try:
                out.append(RawInteraction(user, item, value))
            except DataError as exc:
                raise ParseError(str(exc), lineno) from None
    return out


def _index(
    records: Sequence[RawInteraction],
    rating_range: tuple[float, float] | None,
    meta: dict | None = None,
) -> RatingsDataset:
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    u_idx = np.empty(len(records), dtype=np.int64)
    i_idx = np.empty(len(records), dtype=np.int64)
    vals = np.empty(len(records))
    for k, rec in enumerate(records):
        u_idx[k] = users.setdefault(rec.user, len(users))
        i_idx[k] = items.setdefault(rec.item, len(items))
        vals[k] = rec.value
    flat = u_idx * max(len(items), 1) + i_idx
    uniq, first, counts = np.unique(flat, return_index=True, return_counts=True)
    if np.any(counts > 1):
        k = int(np.sort(first[counts > 1])[0])
        raise DataError(f"duplicate (user, item) pair ({records[k].user}, {records[k].item})")
    if rating_range is None:
        if not len(vals):
            raise DataError("no ratings to infer a rating range from")
        rating_range = (float(vals.min()), float(vals.max()))
    return RatingsDataset(
        len(users),
        len(items),
        u_idx,
        i_idx,
        vals,
        rating_range,
        tuple(users),
        tuple(items),
        dict(meta or {}),
    )


def dataset_summary(data: RatingsDataset) -> dict:
    return {
        "n_users": data.n_users,
        "n_items": data.n_items,
        "n_ratings": data.n_ratings,
        "density": data.density,
    }


def parse_ratings(path: str | Path, fmt: FormatDescriptor = FormatDescriptor()) -> RatingsDataset:
    """Read an explicit-rating file.

    Users and items get contiguous 0-based indices in order of first
    appearance. Duplicate (user, item) pairs raise :class:`DataError`.
    """
    records = read_interactions(path, fmt)
    if not records:
        raise DataError(f"{path}: no ratings")
    data = _index(records, fmt.rating_range, {"source": str(path)})
    logger.info("parsed %s: %s", path, dataset_summary(data))
    return data


def write_ratings(data: RatingsDataset, path: str | Path, delimiter: str = ",") -> None:
    """Write the canonical form: one ``user<d>item<d>value`` line, sorted by user then item.

    External keys are written when present so the file re-parses to the same
    dataset; values use ``repr`` so they round-trip exactly.
    """
    ukeys = data.user_keys or tuple(str(u) for u in range(data.n_users))
    ikeys = data.item_keys or tuple(str(i) for i in range(data.n_items))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, r in data.triples():
            fh.write(f"{ukeys[u]}{delimiter}{ikeys[i]}{delimiter}{r!r}\n")


def read_category_map(path: str | Path, delimiter: str = ",") -> dict[str, str]:
    """Two-column ``item<d>category`` file."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if len(parts) != 2:
                raise ParseError(f"expected 2 fields, got {len(parts)}", lineno)
            mapping[parts[0].strip()] = parts[1].strip()
    return mapping


def implicit_transform(
    counts: Iterable[RawInteraction],
    hi: float = 10.0,
    aggregate: bool = False,
    category_map: Mapping[str, str] | None = None,
) -> RatingsDataset:
    """Turn event counts into ratings ``log(count + 1)`` (natural log).

    With ``aggregate`` (or a ``category_map``) counts are first summed per
    (user, item) -- or per (user, category) when items map to categories.
    The rating range is ``[0, hi]``.
    """
    counts = list(counts)
    for rec in counts:
        if rec.value < 0:
            raise DomainError(f"negative count for ({rec.user}, {rec.item})")
    if category_map is not None:
        missing = [r.item for r in counts if r.item not in category_map]
        if missing:
            raise DataError(f"item {missing[0]!r} has no category")
        counts = [RawInteraction(r.user, category_map[r.item], r.value) for r in counts]
        aggregate = True
    if aggregate:
        summed: OrderedDict[tuple[str, str], float] = OrderedDict()
        for r in counts:
            summed[(r.user, r.item)] = summed.get((r.user, r.item), 0.0) + r.value
        counts = [RawInteraction(u, i, v) for (u, i), v in summed.items()]
    records = [RawInteraction(r.user, r.item, math.log(r.value + 1.0)) for r in counts]
    top = max((r.value for r in records), default=0.0)
    if top > hi:
        raise DataError(f"transformed rating {top:.4f} exceeds configured maximum {hi}")
    return _index(records, (0.0, hi), {"implicit_transform": "natural_log1p"})


def split(data: RatingsDataset, test_fraction: float, seed: int) -> tuple[RatingsDataset, RatingsDataset]:
    """Uniform random train/test partition of the rating triples.

    ``floor(test_fraction * n_ratings)`` triples go to the test set. Both
    halves share the input's index space.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = data.n_ratings
    n_test = math.floor(test_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    test_mask = np.zeros(n, dtype=bool)
    test_mask[perm[:n_test]] = True
    return data.select(~test_mask), data.select(test_mask)


def subsample(data: RatingsDataset, user_fraction: float, item_fraction: float, seed: int) -> RatingsDataset:
    """Keep a uniform random subset of users and items and the ratings among them.

    ``floor(fraction * count)`` (at least one) users/items are kept. Kept
    indices are renumbered contiguously, preserving their original order.
    """
    for name, f in (("user_fraction", user_fraction), ("item_fraction", item_fraction)):
        if not 0.0 < f <= 1.0:
            raise DomainError(f"{name} must lie in (0, 1], got {f}")
    rng = np.random.default_rng(seed)
    n_u = max(1, math.floor(user_fraction * data.n_users))
    n_i = max(1, math.floor(item_fraction * data.n_items))
    keep_u = np.sort(rng.choice(data.n_users, size=n_u, replace=False))
    keep_i = np.sort(rng.choice(data.n_items, size=n_i, replace=False))
    u_map = np.full(data.n_users, -1)
    u_map[keep_u] = np.arange(n_u)
    i_map = np.full(data.n_items, -1)
    i_map[keep_i] = np.arange(n_i)
    sel = (u_map[data.users] >= 0) & (i_map[data.items] >= 0)
    if not sel.any():
        raise DataError("subsample retained no ratings")
    return RatingsDataset(
        n_u,
        n_i,
        u_map[data.users[sel]],
        i_map[data.items[sel]],
        data.values[sel],
        data.rating_range,
        None if data.user_keys is None else tuple(data.user_keys[k] for k in keep_u),
        None if data.item_keys is None else tuple(data.item_keys[k] for k in keep_i),
        {**data.meta, "subsample": {"users": user_fraction, "items": item_fraction, "seed": seed}},
    )
