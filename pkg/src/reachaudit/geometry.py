"""Convex-hull vertex tests, rich action sets and reachability-preserving factor augmentation.

An item whose action-response row ``b_i`` is a vertex of the hull of all
target rows is top-1 reachable under unbounded actions. Lifting every item
factor onto a common sphere (one extra latent coordinate, zero in the user
factors) keeps every prediction and makes every distinct item a vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import ActionKind, ActionSpace, TargetSet
from .errors import DomainError
from .models import FactorModel, UpdateConfig, affine_update_factor
from .solver import WIDE_BOX, Reachable, Top1Certificate, top1_reachable

__all__ = [
    "project_simplex",
    "hull_distance",
    "is_hull_vertex",
    "rich_action_check",
    "AugmentedFactors",
    "augment_factors",
    "AugmentationReport",
    "verify_augmentation_reachability",
]

VERTEX_TOL = 1e-8
DUPLICATE_TOL = 1e-10


def project_simplex(v: ArrayLike) -> NDArray[np.float64]:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _polish(Y: NDArray, x: NDArray, w: NDArray, rounds: int = 20) -> NDArray | None:
    """Active-set refinement of a simplex-constrained least-squares iterate.

    Solves the equality-constrained problem exactly on the current support,
    dropping negative weights and adding the most KKT-violating point until
    the support is optimal. Returns None if it fails to settle.
    """
    n = len(Y)
    support = w > 1e-12 * max(w.max(), 1.0)
    for _ in range(rounds):
        S = np.flatnonzero(support)
        Ys = Y[S]
        K = np.zeros((len(S) + 1, len(S) + 1))
        K[:-1, :-1] = Ys @ Ys.T
        K[:-1, -1] = 1.0
        K[-1, :-1] = 1.0
        rhs = np.append(Ys @ x, 1.0)
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        ws = sol[:-1]
        if np.any(ws < -1e-14):
            # step back into the feasible region and drop the blocking point
            j = S[int(np.argmin(ws))]
            support[j] = False
            if not support.any():
                return None
            continue
        cand = np.zeros(n)
        cand[S] = np.maximum(ws, 0.0)
        cand /= cand.sum()
        grad = Y @ (Y.T @ cand - x)
        nu = grad[S].min()
        viol = grad < nu - 1e-12 * (1.0 + np.abs(grad).max())
        viol[S] = False
        if not viol.any():
            return cand
        support[int(np.argmin(np.where(viol, grad, np.inf)))] = True
    return None


def hull_distance(others: ArrayLike, x: ArrayLike, max_iter: int = 5000) -> float:
    """Euclidean distance from ``x`` to the convex hull of the rows of ``others``.

    Minimizes ``|others' w - x|^2`` over the simplex by accelerated projected
    gradient, then refines on the active support.
    """
    Y = np.asarray(others, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(Y)
    if n == 0:
        return np.inf
    L = np.linalg.norm(Y, 2) ** 2
    w = np.full(n, 1.0 / n)
    if L == 0:
        return float(np.linalg.norm(x))
    z, t = w.copy(), 1.0

    def obj(w):
        r = Y.T @ w - x
        return float(r @ r)

    best = obj(w)
    for _ in range(max_iter):
        grad = Y @ (Y.T @ z - x)
        w_new = project_simplex(z - grad / L)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = w_new + ((t - 1) / t_new) * (w_new - w)
        if np.max(np.abs(w_new - w)) < 1e-15:
            w = w_new
            break
        w, t = w_new, t_new
    best = min(best, obj(w))
    refined = _polish(Y, x, w)
    if refined is not None:
        best = min(best, obj(refined))
    return float(np.sqrt(max(best, 0.0)))


def is_hull_vertex(points: ArrayLike, index: int, tol: float = VERTEX_TOL) -> bool:
    """True iff ``points[index]`` is not in the convex hull of the other points."""
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise DomainError("need at least two points")
    if not np.all(np.isfinite(X)):
        raise DomainError("points must be finite")
    x = X[index]
    others = np.delete(X, index, axis=0)
    if np.min(np.linalg.norm(others - x, axis=1)) <= DUPLICATE_TOL:
        return False
    return hull_distance(others, x) > tol


def _norm_completion(Q: NDArray, C: float) -> NDArray:
    sq = C * C - np.einsum("ij,ij->i", Q, Q)
    if np.any(sq < -1e-12 * max(C * C, 1.0)):
        raise DomainError("an item factor is longer than C")
    return np.sqrt(np.maximum(sq, 0.0))


def rich_action_check(Q: ArrayLike, action_items, C: float | None = None) -> bool:
    """Whether the action items' factors, lifted onto the radius-C sphere, have rank d+1."""
    Q = np.asarray(Q, dtype=float)
    idx = np.asarray(list(action_items), dtype=np.int64)
    if idx.size == 0:
        raise DomainError("empty action set")
    if C is None:
        C = float(np.max(np.linalg.norm(Q, axis=1)))
    d = Q.shape[1]
    QA = Q[idx]
    A = np.column_stack([QA, _norm_completion(QA, C)])
    if len(idx) < d + 1:
        return False
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0:
        return False
    return int(np.sum(sv > 1e-8 * sv[0])) == d + 1


@dataclass(frozen=True, eq=False)
class AugmentedFactors:
    P: NDArray[np.float64]
    Q: NDArray[np.float64]
    C: float
    v: NDArray[np.float64]
    # groups of items whose original factors coincide (no vertex guarantee)
    duplicates: tuple[tuple[int, ...], ...] = ()

    def model(self) -> FactorModel:
        return FactorModel.unbiased(self.P, self.Q)


def _duplicate_groups(Q: NDArray) -> tuple[tuple[int, ...], ...]:
    m = len(Q)
    seen = np.zeros(m, dtype=bool)
    groups = []
    for i in range(m):
        if seen[i]:
            continue
        close = np.flatnonzero(np.linalg.norm(Q - Q[i], axis=1) < DUPLICATE_TOL)
        seen[close] = True
        if len(close) > 1:
            groups.append(tuple(int(j) for j in close))
    return tuple(groups)


def augment_factors(P: ArrayLike, Q: ArrayLike) -> AugmentedFactors:
    """Append ``sqrt(C^2 - |q_i|^2)`` to each item factor and 0 to each user factor.

    Predictions ``P Q'`` are unchanged and every item factor gets norm ``C``.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    C = float(np.max(np.linalg.norm(Q, axis=1)))
    v = _norm_completion(Q, C)
    Pt = np.column_stack([P, np.zeros(len(P))])
    Qt = np.column_stack([Q, v])
    if np.max(np.abs(Pt @ Qt.T - P @ Q.T), initial=0.0) > 1e-10 * max(1.0, np.abs(P @ Q.T).max()):
        raise AssertionError("augmentation changed predictions")
    if np.max(np.abs(np.linalg.norm(Qt, axis=1) - C)) > 1e-10 * max(1.0, C):
        raise AssertionError("augmented item factors are not on a common sphere")
    return AugmentedFactors(Pt, Qt, C, v, _duplicate_groups(Q))


@dataclass
class AugmentationReport:
    user: int
    rich: bool
    fraction_reachable: float | None = None
    certificates: dict[int, Top1Certificate] = field(default_factory=dict)

    @property
    def precondition_violated(self) -> bool:
        return not self.rich


def verify_augmentation_reachability(
    aug: AugmentedFactors,
    user: int,
    action_items,
    cfg: UpdateConfig = UpdateConfig(),
    box: float = WIDE_BOX,
) -> AugmentationReport:
    """Certify top-1 reachability of every non-action item under the augmented model.

    Returns a report with ``rich=False`` and no solves if the action set
    fails :func:`rich_action_check`.
    """
    action_items = tuple(int(i) for i in action_items)
    if not rich_action_check(aug.Q[:, :-1], action_items, aug.C):
        return AugmentationReport(user, rich=False)
    model = aug.model()
    actions = ActionSpace(user, ActionKind.FUTURE, action_items, (-box, box))
    upd = affine_update_factor(model, actions, cfg)
    targets = TargetSet(user, tuple(i for i in range(model.n_items) if i not in set(action_items)), True)
    ids = list(targets.items)
    B, c = upd.B[ids], upd.c[ids]
    certs = {}
    for goal in ids:
        certs[goal] = top1_reachable(B, c, ids, goal, np.full(len(actions), -box), np.full(len(actions), box))
    frac = sum(cert.reachable is Reachable.YES for cert in certs.values()) / len(certs)
    return AugmentationReport(user, True, frac, certs)
