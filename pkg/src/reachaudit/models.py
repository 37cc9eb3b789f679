"""Preference models and their per-user affine score updates.

Every supported model updates a user's score vector affinely in the ratings
the user is allowed to set: ``scores(a) = B @ a + c``. The builders below
return ``(B, c)`` for one user and one :class:`~reachaudit.core.ActionSpace`.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import ActionSpace, RatingsDataset
from .errors import DataError, DomainError, NumericError, ParseError

__all__ = [
    "FactorModel",
    "LinearKind",
    "LinearWeightModel",
    "UpdateVariant",
    "UpdateConfig",
    "AffineUpdate",
    "train_mf_sgd",
    "build_knn",
    "knn_similarity",
    "build_ease",
    "load_external_weights",
    "predict_scores",
    "affine_update",
    "affine_update_factor",
    "affine_update_linear",
    "rmse",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FactorModel:
    """Biased matrix factorization: ``s_ui = p_u . q_i + f_u + g_i + mu``."""

    P: NDArray[np.float64]
    Q: NDArray[np.float64]
    user_bias: NDArray[np.float64]
    item_bias: NDArray[np.float64]
    mu: float = 0.0

    def __post_init__(self) -> None:
        P = np.array(self.P, dtype=float, ndmin=2)
        Q = np.array(self.Q, dtype=float, ndmin=2)
        f = np.array(self.user_bias, dtype=float).reshape(-1)
        g = np.array(self.item_bias, dtype=float).reshape(-1)
        if P.shape[1] != Q.shape[1]:
            raise DomainError(f"latent dims differ: {P.shape[1]} vs {Q.shape[1]}")
        if f.shape != (P.shape[0],) or g.shape != (Q.shape[0],):
            raise DomainError("bias vectors do not match factor shapes")
        for arr in (P, Q, f, g):
            if not np.all(np.isfinite(arr)):
                raise NumericError("non-finite model parameter")
            arr.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "user_bias", f)
        object.__setattr__(self, "item_bias", g)
        object.__setattr__(self, "mu", float(self.mu))

    @classmethod
    def unbiased(cls, P, Q) -> "FactorModel":
        P = np.asarray(P, dtype=float)
        Q = np.asarray(Q, dtype=float)
        return cls(P, Q, np.zeros(len(P)), np.zeros(len(Q)), 0.0)

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def n_items(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.P.shape[1]


class LinearKind(str, enum.Enum):
    KNN = "knn"
    EASE = "ease"
    SLIM = "slim"


@dataclass(frozen=True, eq=False)
class LinearWeightModel:
    """Scores linear in the rating vector: ``s_u = W r_u`` (plus optional biases).

    With biases the scores are ``b_u + W ((r_u - b_u) * observed_u)`` where
    ``b_u = mu + f_u + g`` is the baseline vector, i.e. neighbours contribute
    their deviation from baseline and unrated neighbours contribute nothing.

    ``data`` is the rating table the scores are computed from.
    """

    W: NDArray[np.float64]
    kind: LinearKind
    data: RatingsDataset
    user_bias: NDArray[np.float64] | None = None
    item_bias: NDArray[np.float64] | None = None
    mu: float = 0.0
    neighborhoods: tuple[tuple[int, ...], ...] | None = None
    similarity: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        W = np.array(self.W, dtype=float, ndmin=2)
        m = self.data.n_items
        if W.shape != (m, m):
            raise DomainError(f"W must be {m} x {m}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise NumericError("non-finite weight")
        kind = LinearKind(self.kind)
        if kind in (LinearKind.EASE, LinearKind.SLIM) and np.any(np.diag(W) != 0):
            raise DomainError(f"{kind.value} weights must have a zero diagonal")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "kind", kind)
        if (self.user_bias is None) != (self.item_bias is None):
            raise DomainError("give both user and item biases or neither")
        if self.user_bias is not None:
            f = np.array(self.user_bias, dtype=float).reshape(-1)
            g = np.array(self.item_bias, dtype=float).reshape(-1)
            if f.shape != (self.data.n_users,) or g.shape != (m,):
                raise DomainError("bias vectors do not match the data")
            object.__setattr__(self, "user_bias", f)
            object.__setattr__(self, "item_bias", g)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def biased(self) -> bool:
        return self.user_bias is not None

    @property
    def n_users(self) -> int:
        return self.data.n_users

    @property
    def n_items(self) -> int:
        return self.data.n_items

    def baseline(self, user: int) -> NDArray[np.float64]:
        """Per-item baseline ``mu + f_u + g`` (zeros for unbiased models)."""
        if not self.biased:
            return np.zeros(self.n_items)
        return self.mu + self.user_bias[user] + self.item_bias

    def scores_from(self, user: int, r: NDArray, observed: NDArray[np.bool_]) -> NDArray[np.float64]:
        """Scores for an arbitrary rating vector ``r`` with observation mask."""
        base = self.baseline(user)
        return base + self.W @ np.where(observed, r - base, 0.0)


class UpdateVariant(str, enum.Enum):
    SGD = "sgd"
    ALS = "als"


@dataclass(frozen=True)
class UpdateConfig:
    """How a factor model refreshes a user's factor after new ratings.

    Defaults (one SGD step, ``step=0.1``, ``reg=0``) follow the audit setup.
    """

    step: float = 0.1
    reg: float = 0.0
    variant: UpdateVariant = UpdateVariant.SGD

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", UpdateVariant(self.variant))
        if not self.step > 0:
            raise DomainError(f"step must be positive, got {self.step}")
        if not self.reg >= 0:
            raise DomainError(f"reg must be nonnegative, got {self.reg}")


@dataclass(frozen=True, eq=False)
class AffineUpdate:
    """Post-action scores ``B @ a + c``; column k of ``B`` is action item ``actions.items[k]``.

    ``baseline_action`` is the do-nothing action: current ratings for rated
    action items and current predicted scores for unseen ones.
    """

    user: int
    B: NDArray[np.float64]
    c: NDArray[np.float64]
    actions: ActionSpace
    baseline_action: NDArray[np.float64]

    def __post_init__(self) -> None:
        B = np.array(self.B, dtype=float, ndmin=2)
        c = np.array(self.c, dtype=float).reshape(-1)
        if B.shape != (len(c), len(self.actions)):
            raise DomainError(f"B has shape {B.shape}, expected {(len(c), len(self.actions))}")
        a0 = np.array(self.baseline_action, dtype=float).reshape(-1)
        for arr in (B, c, a0):
            arr.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "baseline_action", a0)

    def scores(self, a) -> NDArray[np.float64]:
        return self.B @ np.asarray(a, dtype=float) + self.c


# --------------------------------------------------------------------------
# training


def train_mf_sgd(
    train: RatingsDataset,
    dim: int = 16,
    step: float = 0.01,
    reg: float = 0.05,
    epochs: int = 50,
    seed: int = 0,
) -> FactorModel:
    """Fit a biased MF model by plain SGD on the squared error.

    Minimizes ``1/2 sum (p_u.q_i + f_u + g_i + mu - r_ui)^2 + reg/2 (|P|^2 + |Q|^2)``
    visiting the ratings in a fresh seeded permutation every epoch. Factors
    start i.i.d. normal with std ``0.1/sqrt(dim)``, biases at zero and ``mu``
    at the global mean.
    """
    if dim < 1:
        raise DomainError("dim must be >= 1")
    if not step > 0:
        raise DomainError("step must be positive")
    if epochs < 1:
        raise DomainError("epochs must be >= 1")
    if train.n_ratings == 0:
        raise DataError("empty training set")

    rng = np.random.default_rng(seed)
    scale = 0.1 / math.sqrt(dim)
    P = rng.normal(0.0, scale, size=(train.n_users, dim))
    Q = rng.normal(0.0, scale, size=(train.n_items, dim))
    f = np.zeros(train.n_users)
    g = np.zeros(train.n_items)
    mu = float(train.values.mean())

    users = train.users
    items = train.items
    vals = train.values
    for _ in range(epochs):
        for k in rng.permutation(train.n_ratings):
            u = users[k]
            i = items[k]
            pu = P[u]
            qi = Q[i]
            err = pu @ qi + f[u] + g[i] + mu - vals[k]
            P[u] = pu - step * (err * qi + reg * pu)
            Q[i] = qi - step * (err * pu + reg * qi)
            f[u] -= step * err
            g[i] -= step * err
            mu -= step * err
        if not np.isfinite(mu):
            raise NumericError("SGD diverged; lower the step size")
    return FactorModel(P, Q, f, g, mu)


def knn_similarity(R: NDArray, observed: NDArray[np.bool_], shrink: float) -> NDArray[np.float64]:
    """Shrunk cosine similarity between item columns of ``R``.

    ``cos(i, j) * n_ij / (n_ij + shrink)`` with ``n_ij`` the co-rating count;
    zero wherever a column is all-zero or ``n_ij = 0``. The diagonal is zeroed.
    """
    R = np.asarray(R, dtype=float)
    norms = np.sqrt(np.einsum("ui,ui->i", R, R))
    dots = R.T @ R
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dots / np.outer(norms, norms)
    cos[~np.isfinite(cos)] = 0.0
    O = observed.astype(float)
    co = O.T @ O
    with np.errstate(invalid="ignore", divide="ignore"):
        damp = np.where(co > 0, co / (co + shrink), 0.0)
    S = cos * damp
    np.fill_diagonal(S, 0.0)
    return S


def _baseline_biases(train: RatingsDataset, damping: float) -> tuple[NDArray, NDArray, float]:
    mu = float(train.values.mean())
    res = train.values - mu
    g = np.bincount(train.items, weights=res, minlength=train.n_items)
    g /= train.item_counts() + damping + (train.item_counts() == 0)
    res = res - g[train.items]
    f = np.bincount(train.users, weights=res, minlength=train.n_users)
    f /= train.user_counts() + damping + (train.user_counts() == 0)
    return f, g, mu


def build_knn(
    train: RatingsDataset,
    k: int = 20,
    shrink: float = 10.0,
    biased: bool = True,
    bias_damping: float = 0.0,
) -> LinearWeightModel:
    """Item-based k-nearest-neighbour model with shrunk cosine similarity.

    Each item keeps its ``k`` most similar other items (lowest id first among
    equal similarities); weights are divided by the neighbourhood's total
    absolute similarity so each nonzero row of ``W`` has unit L1 norm.
    With ``biased`` the model predicts deviations from ``mu + f_u + g_i``
    baselines estimated by (optionally damped) means.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    if shrink < 0:
        raise DomainError("shrink must be nonnegative")
    m = train.n_items
    k = min(k, m - 1)
    S = knn_similarity(train.dense(), train.mask(), shrink)
    W = np.zeros((m, m))
    hoods: list[tuple[int, ...]] = []
    for i in range(m):
        if k == 0:
            hoods.append(())
            continue
        cand = np.array([j for j in range(m) if j != i])
        order = np.lexsort((cand, -S[i, cand]))
        nb = np.sort(cand[order[:k]])
        hoods.append(tuple(int(j) for j in nb))
        total = np.abs(S[i, nb]).sum()
        if total > 0:
            W[i, nb] = S[i, nb] / total
    biases: dict = {}
    if biased:
        f, g, mu = _baseline_biases(train, bias_damping)
        biases = {"user_bias": f, "item_bias": g, "mu": mu}
    return LinearWeightModel(W, LinearKind.KNN, train, neighborhoods=tuple(hoods), similarity=S, **biases)


def build_ease(train: RatingsDataset, reg: float = 100.0) -> LinearWeightModel:
    """Closed-form EASE: ``P = (R'R + reg I)^-1``, ``B = I - P diag(1/diag P)``.

    ``B`` is the minimizer of ``1/2 |R - RB|^2 + reg/2 |B|^2`` with a zero
    diagonal. Scores are ``s_u = W r_u`` with ``W = B'``.
    """
    if not reg > 0:
        raise DomainError("reg must be positive")
    R = train.dense()
    G = R.T @ R + reg * np.eye(train.n_items)
    try:
        P = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular Gram matrix: {exc}") from None
    B = np.eye(train.n_items) - P / np.diag(P)[None, :]
    np.fill_diagonal(B, 0.0)
    return LinearWeightModel(B.T.copy(), LinearKind.EASE, train)


def load_external_weights(path: str | Path, data: RatingsDataset) -> LinearWeightModel:
    """Load an externally trained SLIM weight matrix from ``i j w`` lines.

    Row ``i`` of ``W`` holds the weights used to score item ``i``; indices
    are the dataset's 0-based item indices.
    """
    m = data.n_items
    W = np.zeros((m, m))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 'i j w', got {line.strip()!r}", lineno)
            try:
                i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(f"cannot parse {line.strip()!r}", lineno) from None
            if not (0 <= i < m and 0 <= j < m):
                raise ParseError(f"index out of range for {m} items", lineno)
            W[i, j] = w
    return LinearWeightModel(W, LinearKind.SLIM, data)


# --------------------------------------------------------------------------
# prediction


Model = FactorModel | LinearWeightModel


def predict_scores(model: Model, user: int) -> NDArray[np.float64]:
    """Current score vector ``s_u`` over all items."""
    if not 0 <= user < model.n_users:
        raise DomainError(f"user {user} out of range")
    if isinstance(model, FactorModel):
        return model.Q @ model.P[user] + model.item_bias + (model.mu + model.user_bias[user])
    r = model.data.rating_vector(user)
    obs = np.zeros(model.n_items, dtype=bool)
    obs[model.data.observed(user)] = True
    return model.scores_from(user, r, obs)


def rmse(model: Model, test: RatingsDataset) -> float:
    """Root mean squared error of the model's scores on ``test`` triples."""
    if test.n_ratings == 0:
        raise DomainError("empty test set")
    sq = 0.0
    for u in np.unique(test.users):
        items, vals = test.user_ratings(int(u))
        s = predict_scores(model, int(u))
        sq += float(np.sum((s[items] - vals) ** 2))
    return math.sqrt(sq / test.n_ratings)


# --------------------------------------------------------------------------
# affine updates


def _baseline_action(actions: ActionSpace, r: NDArray, observed: NDArray[np.bool_], s: NDArray) -> NDArray:
    idx = np.asarray(actions.items, dtype=np.int64)
    return np.where(observed[idx], r[idx], s[idx])


def affine_update_factor(
    model: FactorModel,
    actions: ActionSpace,
    cfg: UpdateConfig = UpdateConfig(),
    data: RatingsDataset | None = None,
) -> AffineUpdate:
    """Affine score update for a factor model.

    SGD: one gradient step on the user factor over the action items,
    ``p+ = (1 - step reg) p - step Q_A'(Q_A p + g_A + mu + f_u - a)``, so
    ``B = step Q Q_A'``.

    ALS: the user factor is re-solved by ridge regression on all post-action
    ratings (immutable rated items from ``data`` plus the action items), so
    ``B = Q M^-1 Q_A'`` with ``M = Q_I'Q_I + Q_A'Q_A + reg I``.

    Biases are added back so ``B a + c`` are full predicted scores.
    """
    u = actions.user
    if len(actions) == 0:
        raise DomainError("empty action space")
    Q, g = model.Q, model.item_bias
    p = model.P[u]
    shift = model.mu + model.user_bias[u]
    idx = np.asarray(actions.items, dtype=np.int64)
    QA = Q[idx]
    base_A = g[idx] + shift

    r = np.zeros(model.n_items)
    observed = np.zeros(model.n_items, dtype=bool)
    if data is not None:
        r = data.rating_vector(u)
        observed[data.observed(u)] = True

    if cfg.variant is UpdateVariant.SGD:
        p_fixed = (1.0 - cfg.step * cfg.reg) * p - cfg.step * QA.T @ (QA @ p + base_A)
        B = cfg.step * Q @ QA.T
        c = Q @ p_fixed + g + shift
    else:
        imm = observed.copy()
        imm[idx] = False
        QI = Q[imm]
        M = QI.T @ QI + QA.T @ QA + cfg.reg * np.eye(model.dim)
        if np.linalg.matrix_rank(M) < model.dim:
            raise NumericError("ALS system is rank deficient; use reg > 0 or more action items")
        rhs_fixed = QI.T @ (r[imm] - g[imm] - shift) - QA.T @ base_A
        Minv_QA = np.linalg.solve(M, QA.T)
        B = Q @ Minv_QA
        c = Q @ np.linalg.solve(M, rhs_fixed) + g + shift

    s = predict_scores(model, u)
    return AffineUpdate(u, B, c, actions, _baseline_action(actions, r, observed, s))


def affine_update_linear(
    model: LinearWeightModel,
    actions: ActionSpace,
    r: NDArray | None = None,
    observed: NDArray[np.bool_] | None = None,
) -> AffineUpdate:
    """Affine score update for ``W``-based models.

    Action coordinates are zeroed out of the rating vector before forming
    ``c`` so a history edit replaces (rather than adds to) the old rating.
    For biased models the action items' baselines are folded into ``c``.
    ``r``/``observed`` default to the user's row of ``model.data``.
    """
    u = actions.user
    if len(actions) == 0:
        raise DomainError("empty action space")
    if r is None:
        r = model.data.rating_vector(u)
    r = np.asarray(r, dtype=float)
    if observed is None:
        observed = np.zeros(model.n_items, dtype=bool)
        observed[model.data.observed(u)] = True
    idx = np.asarray(actions.items, dtype=np.int64)
    imm = observed.copy()
    imm[idx] = False
    base = model.baseline(u)
    B = model.W[:, idx]
    c = base + model.W @ np.where(imm, r - base, 0.0) - B @ base[idx]
    s = model.scores_from(u, r, observed)
    return AffineUpdate(u, B, c, actions, _baseline_action(actions, r, observed, s))


def affine_update(
    model: Model,
    actions: ActionSpace,
    cfg: UpdateConfig = UpdateConfig(),
    data: RatingsDataset | None = None,
) -> AffineUpdate:
    """Dispatch to the factor or linear builder."""
    if isinstance(model, FactorModel):
        return affine_update_factor(model, actions, cfg, data)
    return affine_update_linear(model, actions)


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path: str | Path) -> None:
    """Write a ``.npz`` checkpoint.

    Layout: ``kind`` (str), and for factor models ``P``, ``Q``, ``user_bias``,
    ``item_bias``, ``mu``; for linear models ``W`` plus ``user_bias``,
    ``item_bias``, ``mu`` when biased. Linear checkpoints do not embed the
    ratings; :func:`load_model` needs them again.
    """
    if isinstance(model, FactorModel):
        arrays = dict(
            kind=np.array("factor"),
            P=model.P,
            Q=model.Q,
            user_bias=model.user_bias,
            item_bias=model.item_bias,
            mu=np.array(model.mu),
        )
    else:
        arrays = dict(kind=np.array(model.kind.value), W=model.W, mu=np.array(model.mu))
        if model.biased:
            arrays.update(user_bias=model.user_bias, item_bias=model.item_bias)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path, data: RatingsDataset | None = None) -> Model:
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["kind"])
        if kind == "factor":
            return FactorModel(z["P"], z["Q"], z["user_bias"], z["item_bias"], float(z["mu"]))
        if data is None:
            raise DomainError(f"a {kind} checkpoint needs the rating data to score with")
        biases = {}
        if "user_bias" in z:
            biases = dict(user_bias=z["user_bias"], item_bias=z["item_bias"], mu=float(z["mu"]))
        return LinearWeightModel(z["W"], LinearKind(kind), data, **biases)
