"""Shared vocabulary: rating datasets, action and target sets, selection rules.

Every object here is immutable after construction and every function is pure.
Ties between equal scores are always broken in favour of the lowest item id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DataError, DomainError

__all__ = [
    "RatingsDataset",
    "ActionKind",
    "ActionSpace",
    "TargetSet",
    "Softmax",
    "EpsilonGreedy",
    "Top1",
    "SelectionRule",
    "logsumexp",
    "softmax_distribution",
    "top1_select",
    "epsilon_greedy_distribution",
    "rule_distribution",
    "rank_of",
]


def _frozen(a: ArrayLike, dtype) -> NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Sparse user x item rating table.

    Parameters
    ----------
    n_users, n_items : int
        Sizes of the contiguous 0-based user and item index spaces.
    users, items, values : array-like
        Rating triples ``(u, i, r_ui)``; each ``(u, i)`` pair occurs at most once.
    rating_range : tuple of float
        Closed interval ``[lo, hi]`` containing every rating.
    user_keys, item_keys : tuple of str, optional
        External identifiers for each index, if the data came from a file.
    meta : dict, optional
        Free-form provenance (e.g. which implicit transform was applied).
    """

    n_users: int
    n_items: int
    users: NDArray[np.int64]
    items: NDArray[np.int64]
    values: NDArray[np.float64]
    rating_range: tuple[float, float]
    user_keys: tuple[str, ...] | None = None
    item_keys: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        users = _frozen(self.users, np.int64).reshape(-1)
        items = _frozen(self.items, np.int64).reshape(-1)
        values = _frozen(self.values, np.float64).reshape(-1)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", values)
        lo, hi = (float(x) for x in self.rating_range)
        object.__setattr__(self, "rating_range", (lo, hi))

        if not (len(users) == len(items) == len(values)):
            raise DataError("users, items and values must have equal length")
        if lo > hi:
            raise DataError(f"empty rating range [{lo}, {hi}]")
        if len(users):
            if users.min() < 0 or users.max() >= self.n_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DataError("item index out of range")
            if not np.all(np.isfinite(values)):
                raise DataError("non-finite rating")
            if values.min() < lo or values.max() > hi:
                raise DataError(f"rating outside range [{lo}, {hi}]")
            flat = users * self.n_items + items
            if len(np.unique(flat)) != len(flat):
                raise DataError("duplicate (user, item) pair")
        if self.user_keys is not None and len(self.user_keys) != self.n_users:
            raise DataError("user_keys length does not match n_users")
        if self.item_keys is not None and len(self.item_keys) != self.n_items:
            raise DataError("item_keys length does not match n_items")

        order = np.lexsort((items, users))
        object.__setattr__(self, "_order", order)
        starts = np.searchsorted(users[order], np.arange(self.n_users + 1))
        object.__setattr__(self, "_starts", starts)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_ratings(self) -> int:
        return len(self.values)

    @property
    def density(self) -> float:
        return self.n_ratings / (self.n_users * self.n_items)

    def observed(self, user: int) -> NDArray[np.int64]:
        """Sorted item ids rated by ``user`` (the set Omega_u)."""
        lo, hi = self._starts[user], self._starts[user + 1]
        return self.items[self._order[lo:hi]]

    def user_ratings(self, user: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        """Items rated by ``user`` (sorted) and the matching rating values."""
        lo, hi = self._starts[user], self._starts[user + 1]
        idx = self._order[lo:hi]
        return self.items[idx], self.values[idx]

    def rating_vector(self, user: int) -> NDArray[np.float64]:
        """Dense m-vector of ratings with zeros at unrated items."""
        r = np.zeros(self.n_items)
        items, vals = self.user_ratings(user)
        r[items] = vals
        return r

    def dense(self) -> NDArray[np.float64]:
        """n x m matrix with zeros at unobserved entries."""
        R = np.zeros((self.n_users, self.n_items))
        R[self.users, self.items] = self.values
        return R

    def mask(self) -> NDArray[np.bool_]:
        M = np.zeros((self.n_users, self.n_items), dtype=bool)
        M[self.users, self.items] = True
        return M

    def user_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.users, minlength=self.n_users)

    def item_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.items, minlength=self.n_items)

    def item_means(self) -> NDArray[np.float64]:
        """Mean rating per item; NaN for items nobody rated."""
        sums = np.bincount(self.items, weights=self.values, minlength=self.n_items)
        counts = self.item_counts()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    def triples(self) -> Iterable[tuple[int, int, float]]:
        """Rating triples in canonical (user, item) order."""
        for k in self._order:
            yield int(self.users[k]), int(self.items[k]), float(self.values[k])

    def select(self, mask: ArrayLike) -> "RatingsDataset":
        """Dataset restricted to the ratings where ``mask`` is true (same index space)."""
        mask = np.asarray(mask, dtype=bool)
        return RatingsDataset(
            self.n_users,
            self.n_items,
            self.users[mask],
            self.items[mask],
            self.values[mask],
            self.rating_range,
            self.user_keys,
            self.item_keys,
            dict(self.meta),
        )

    def same_ratings(self, other: "RatingsDataset") -> bool:
        """True if both datasets hold identical triples over identical index spaces."""
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            return False
        return list(self.triples()) == list(other.triples())


class ActionKind(str, enum.Enum):
    HISTORY = "history"
    FUTURE = "future"
    NEXT = "next"


@dataclass(frozen=True)
class ActionSpace:
    """Items whose ratings a user may set, with a box on each rating.

    ``items`` is ordered; it fixes the column order of the action matrix.
    """

    user: int
    kind: ActionKind
    items: tuple[int, ...]
    bounds: tuple[float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        lo, hi = (float(x) for x in self.bounds)
        object.__setattr__(self, "bounds", (lo, hi))
        if len(set(self.items)) != len(self.items):
            raise DomainError("action items must be distinct")
        if lo > hi:
            raise DomainError(f"empty action box [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.items)

    def check(self, observed: Iterable[int]) -> None:
        """Validate the kind against the user's observed set Omega_u."""
        seen = set(int(i) for i in observed)
        acts = set(self.items)
        if self.kind is ActionKind.HISTORY:
            if not acts <= seen:
                raise DomainError("history edits must act on rated items")
        elif acts & seen:
            raise DomainError(f"{self.kind.value} actions must act on unseen items")

    def lower(self) -> NDArray[np.float64]:
        return np.full(len(self.items), self.bounds[0])

    def upper(self) -> NDArray[np.float64]:
        return np.full(len(self.items), self.bounds[1])


@dataclass(frozen=True)
class TargetSet:
    """Candidate items the selection rule chooses among (sorted by id)."""

    user: int
    items: tuple[int, ...]
    repeatable: bool = False

    def __post_init__(self) -> None:
        items = tuple(sorted(set(int(i) for i in self.items)))
        if len(items) != len(self.items):
            raise DomainError("target items must be distinct")
        if len(items) < 2:
            raise DomainError("a target set needs at least two items")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    def check(self, actions: ActionSpace, observed: Iterable[int]) -> None:
        tgt = set(self.items)
        if tgt & set(actions.items):
            raise DomainError("targets overlap action items")
        if not self.repeatable and tgt & set(int(i) for i in observed):
            raise DomainError("non-repeatable targets overlap rated items")


@dataclass(frozen=True)
class Softmax:
    beta: float

    def __post_init__(self) -> None:
        if not self.beta >= 0:
            raise DomainError(f"beta must be nonnegative, got {self.beta}")


@dataclass(frozen=True)
class EpsilonGreedy:
    epsilon: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError(f"epsilon must lie in [0, 1], got {self.epsilon}")


@dataclass(frozen=True)
class Top1:
    pass


SelectionRule = Union[Softmax, EpsilonGreedy, Top1]
Targets = Union[TargetSet, Sequence[int], NDArray]


def _target_ids(targets: Targets) -> NDArray[np.int64]:
    ids = np.asarray(targets.items if isinstance(targets, TargetSet) else targets, dtype=np.int64)
    ids = ids.reshape(-1)
    if ids.size == 0:
        raise DomainError("empty target set")
    return np.sort(ids)


def logsumexp(x: ArrayLike) -> float:
    """``m + log(sum(exp(x - m)))`` with ``m = max(x)``."""
    x = np.asarray(x, dtype=float)
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(x - m))))


def softmax_distribution(scores: ArrayLike, targets: Targets, beta: float) -> NDArray[np.float64]:
    """Boltzmann selection probabilities over ``targets`` (in sorted id order)."""
    if beta < 0:
        raise DomainError(f"beta must be nonnegative, got {beta}")
    ids = _target_ids(targets)
    z = beta * np.asarray(scores, dtype=float)[ids]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def top1_select(scores: ArrayLike, targets: Targets) -> int:
    """Highest-scoring target; lowest id wins ties."""
    ids = _target_ids(targets)
    s = np.asarray(scores, dtype=float)[ids]
    return int(ids[int(np.argmax(s))])


def epsilon_greedy_distribution(
    scores: ArrayLike, targets: Targets, epsilon: float
) -> NDArray[np.float64]:
    """``1 - eps`` on the top-1 target, ``eps / (n - 1)`` on every other one."""
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    ids = _target_ids(targets)
    n = len(ids)
    if n < 2:
        raise DomainError("epsilon-greedy needs at least two targets")
    p = np.full(n, epsilon / (n - 1))
    top = int(np.argmax(np.asarray(scores, dtype=float)[ids]))
    p[top] = 1.0 - epsilon
    return p


def rule_distribution(scores: ArrayLike, targets: Targets, rule: SelectionRule) -> NDArray[np.float64]:
    """Selection distribution over sorted targets for any supported rule."""
    if isinstance(rule, Softmax):
        return softmax_distribution(scores, targets, rule.beta)
    if isinstance(rule, EpsilonGreedy):
        return epsilon_greedy_distribution(scores, targets, rule.epsilon)
    if isinstance(rule, Top1):
        ids = _target_ids(targets)
        p = np.zeros(len(ids))
        p[int(np.searchsorted(ids, top1_select(scores, ids)))] = 1.0
        return p
    raise DomainError(f"unknown selection rule {rule!r}")


def rank_of(scores: ArrayLike, targets: Targets, item: int) -> int:
    """1-based rank of ``item`` among the targets (1 = highest score)."""
    ids = _target_ids(targets)
    pos = np.searchsorted(ids, item)
    if pos >= len(ids) or ids[pos] != item:
        raise DomainError(f"item {item} is not a target")
    s = np.asarray(scores, dtype=float)[ids]
    mine = s[pos]
    return int(1 + np.sum(s > mine) + np.sum(s[:pos] == mine))
