"""Maximum stochastic reachability over a box of ratings.

For softmax selection the negative log-probability of the goal item,

    g(a) = LSE_j(beta * (b_j . a + c_j)) - beta * (b_i . a + c_i),

is convex in the action ``a``, so the best-case probability is
``exp(-min g)``. We minimize it directly with projected gradient descent
and an Armijo backtracking line search; the box projection is a clip.

The same machinery, applied to the smoothed margin
``(1/beta) LSE_{j != i}(beta * ((b_j - b_i) . a + c_j - c_i))``, bounds the
min-max score margin and so certifies top-1 (deterministic) reachability.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import SelectionRule, Softmax, TargetSet, rule_distribution
from .errors import DomainError, NumericError
from .models import AffineUpdate

__all__ = [
    "SolverSettings",
    "ReachProblem",
    "SolveResult",
    "Reachable",
    "Top1Certificate",
    "GreedyReach",
    "WIDE_BOX",
    "reach_objective",
    "max_reachability",
    "top1_reachable",
    "epsilon_greedy_rho_star",
    "baseline_rho",
]

# stand-in for unbounded (real-valued) actions
WIDE_BOX = 1e6


@dataclass(frozen=True)
class SolverSettings:
    armijo: float = 1e-4
    backtrack: float = 0.5
    grad_tol: float = 1e-8
    stall_tol: float = 1e-12
    stall_window: int = 10
    max_iter: int = 20000
    # trial step: Barzilai-Borwein s.s / s.y when curvature is positive,
    # otherwise `growth` times the last accepted step; Armijo backtracks either
    barzilai_borwein: bool = True
    growth: float = 2.0


@dataclass(frozen=True, eq=False)
class ReachProblem:
    """One (user, goal item) reachability problem restricted to its targets.

    ``B`` and ``c`` are the target rows only, in sorted target-id order;
    ``lower``/``upper`` bound each action coordinate; ``x0`` is the start.
    """

    B: NDArray[np.float64]
    c: NDArray[np.float64]
    targets: tuple[int, ...]
    goal: int
    beta: float
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    x0: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        B = np.array(self.B, dtype=float, ndmin=2)
        c = np.array(self.c, dtype=float).reshape(-1)
        lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (B.shape[1],)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (B.shape[1],)).copy()
        targets = tuple(int(t) for t in self.targets)
        if B.shape[0] != len(c) or len(c) != len(targets):
            raise DomainError("B rows, c entries and targets must agree")
        if list(targets) != sorted(set(targets)):
            raise DomainError("targets must be sorted and distinct")
        if self.goal not in targets:
            raise DomainError(f"goal {self.goal} is not a target")
        if np.any(lower > upper):
            raise DomainError("box lower bound exceeds upper bound")
        if self.beta < 0:
            raise DomainError("beta must be nonnegative")
        x0 = (lower + upper) / 2 if self.x0 is None else np.asarray(self.x0, dtype=float)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "x0", np.clip(x0, lower, upper))
        i = targets.index(self.goal)
        object.__setattr__(self, "_D", B - B[i])
        object.__setattr__(self, "_f", c - c[i])

    @classmethod
    def from_update(
        cls,
        update: AffineUpdate,
        targets: TargetSet | Sequence[int],
        goal: int,
        beta: float,
        bounds: tuple[float, float] | None = None,
    ) -> "ReachProblem":
        ids = sorted(targets.items if isinstance(targets, TargetSet) else targets)
        lo, hi = update.actions.bounds if bounds is None else bounds
        k = len(update.actions)
        return cls(
            update.B[ids],
            update.c[ids],
            tuple(ids),
            int(goal),
            float(beta),
            np.full(k, lo),
            np.full(k, hi),
            update.baseline_action,
        )

    @property
    def goal_pos(self) -> int:
        return self.targets.index(self.goal)

    def margins(self) -> tuple[NDArray, NDArray]:
        """Rows ``b_j - b_i`` and offsets ``c_j - c_i`` for all targets (goal row is 0)."""
        return self._D, self._f


@dataclass(frozen=True, eq=False)
class SolveResult:
    rho: float
    gamma: float
    action: NDArray[np.float64]
    iterations: int
    converged: bool
    grad_norm: float
    # probability at the starting action, a lower bound on rho
    rho_init: float


class Reachable(str, enum.Enum):
    YES = "yes"
    NO = "no"
    MARGINAL = "marginal"


@dataclass(frozen=True, eq=False)
class Top1Certificate:
    """Bounds on ``min_a max_{j != i} (s_j(a) - s_i(a))`` over the box.

    The goal is top-1 reachable (ties included) iff that minimum is <= 0.
    """

    reachable: Reachable
    lower: float
    upper: float
    beta: float
    action: NDArray[np.float64]


@dataclass(frozen=True)
class GreedyReach:
    rho: float
    marginal: bool = False
    # set when eps / (n - 1) > 1 - eps, i.e. exploration beats exploitation
    inverted: bool = False


def _lse_terms(D: NDArray, f: NDArray, beta: float, a: NDArray) -> tuple[float, NDArray]:
    z = beta * (D @ a + f)
    m = z.max()
    e = np.exp(z - m)
    tot = e.sum()
    return float(m + math.log(tot)), e / tot


def reach_objective(problem: ReachProblem, a: ArrayLike) -> tuple[float, NDArray[np.float64]]:
    """Negative log-probability of the goal at ``a`` and its gradient."""
    D, f = problem.margins()
    a = np.asarray(a, dtype=float)
    val, p = _lse_terms(D, f, problem.beta, a)
    return val, problem.beta * (D.T @ p)


def _spectral_sq(D: NDArray) -> float:
    if D.size == 0:
        return 0.0
    return float(np.linalg.norm(D, 2) ** 2)


def _pgd(
    fun: Callable[[NDArray], tuple[float, NDArray]],
    x0: NDArray,
    lower: NDArray,
    upper: NDArray,
    lipschitz: float,
    settings: SolverSettings,
    stop: Callable[[NDArray, float, NDArray], bool] | None = None,
) -> tuple[NDArray, float, int, bool, float]:
    """Projected gradient descent with Armijo backtracking on a box.

    ``stop(x, f, grad)`` may end the run early once the caller has what it needs.
    """
    x = np.clip(x0, lower, upper)
    fx, gx = fun(x)
    if not math.isfinite(fx):
        raise NumericError("non-finite objective at the starting point")
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    history = [fx]
    gmap = float(np.max(np.abs(x - np.clip(x - gx, lower, upper)), initial=0.0))
    it = 0
    converged = gmap <= settings.grad_tol
    s_y = None
    while not converged and it < settings.max_iter:
        it += 1
        if it == 1:
            t = step
        elif settings.barzilai_borwein and s_y is not None and s_y[1] > 0:
            t = s_y[0] / s_y[1]
        else:
            t = step * settings.growth
        while True:
            xn = np.clip(x - t * gx, lower, upper)
            fn, gn = fun(xn)
            if not math.isfinite(fn):
                raise NumericError("non-finite objective")
            if fn <= fx + settings.armijo * float(gx @ (xn - x)):
                break
            t *= settings.backtrack
            if t < 1e-300:
                xn, fn, gn = x, fx, gx
                break
        step = t
        moved = not np.array_equal(xn, x)
        dx, dg = xn - x, gn - gx
        s_y = (float(dx @ dx), float(dx @ dg))
        x, fx, gx = xn, fn, gn
        history.append(fx)
        gmap = float(np.max(np.abs(x - np.clip(x - gx, lower, upper)), initial=0.0))
        if gmap <= settings.grad_tol:
            converged = True
        elif stop is not None and stop(x, fx, gx):
            break
        elif len(history) > settings.stall_window and history[-settings.stall_window - 1] - fx <= settings.stall_tol:
            converged = True
        elif not moved:
            converged = True
    return x, fx, it, converged, gmap


def max_reachability(problem: ReachProblem, settings: SolverSettings = SolverSettings()) -> SolveResult:
    """Largest softmax probability of the goal over the action box."""
    D, _ = problem.margins()
    rho_init = math.exp(-reach_objective(problem, problem.x0)[0])
    if problem.beta == 0 or not np.any(D):
        val, _ = reach_objective(problem, problem.x0)
        return SolveResult(math.exp(-val), val, problem.x0.copy(), 0, True, 0.0, rho_init)
    L = problem.beta**2 * _spectral_sq(D)
    x, fx, it, conv, gmap = _pgd(
        lambda a: reach_objective(problem, a), problem.x0, problem.lower, problem.upper, L, settings
    )
    gamma = max(fx, 0.0)
    return SolveResult(math.exp(-gamma), gamma, x, it, conv, gmap, rho_init)


def _frank_wolfe_gap(x: NDArray, g: NDArray, lower: NDArray, upper: NDArray) -> float:
    # max over the box of g . (x - y), attained at a corner
    corner = np.where(g > 0, lower, upper)
    return float(g @ (x - corner))


def top1_reachable(
    B: ArrayLike,
    c: ArrayLike,
    targets: Sequence[int],
    goal: int,
    lower: ArrayLike,
    upper: ArrayLike,
    tolerance: float = 1e-9,
    bracket: float = 1e-7,
    polish_iters: int = 200,
    betas: Sequence[float] = (10.0, 1e2, 1e3, 1e4),
    x0: ArrayLike | None = None,
    settings: SolverSettings = SolverSettings(),
) -> Top1Certificate:
    """Certify whether some action in the box makes ``goal`` the (tied-)top target.

    ``B``/``c`` are restricted to ``targets`` (sorted). For each smoothing
    ``beta`` the smoothed margin is minimized (warm-started); the exact max
    margin at the iterate is an upper bound on the min-max margin, and the
    smoothed value minus its Frank-Wolfe gap minus ``log(n-1)/beta`` is a
    lower bound. ``yes`` when upper <= tolerance, ``no`` when lower > tolerance.
    Once a witness action with margin <= tolerance is found, a stage runs at
    most ``polish_iters`` more iterations (or until the bracket is within
    ``bracket`` relative) to tighten the reported upper bound.
    """
    prob = ReachProblem(B, c, tuple(targets), goal, 1.0, lower, upper, x0)
    D, f = prob.margins()
    keep = np.arange(len(prob.targets)) != prob.goal_pos
    D, f = D[keep], f[keep]
    n_other = len(f)
    if n_other == 0:
        return Top1Certificate(Reachable.YES, -math.inf, -math.inf, math.inf, prob.x0.copy())

    def exact(a):
        return float(np.max(D @ a + f))

    x = prob.x0.copy()
    best_x, upper_b = x.copy(), exact(x)
    lower_b = -math.inf
    beta_used = betas[0]
    for beta in betas:
        beta_used = beta

        def smooth(a, beta=beta):
            val, p = _lse_terms(D, f, beta, a)
            return val / beta, D.T @ p

        def lower_at(x, val, grad, beta=beta):
            return val - _frank_wolfe_gap(x, grad, prob.lower, prob.upper) - math.log(n_other) / beta

        witnessed = [0]

        def decided(x, val, grad, beta=beta):
            # stop once unreachability is proven; once a reachability witness
            # exists, keep tightening for at most `polish_iters` iterations
            lo = lower_at(x, val, grad)
            if lo > tolerance:
                return True
            up = exact(x)
            if up <= tolerance:
                witnessed[0] += 1
                return witnessed[0] > polish_iters or up - lo <= bracket * max(1.0, abs(up))
            return False

        L = beta * _spectral_sq(D)
        if L > 0:
            x, _, _, _, _ = _pgd(smooth, x, prob.lower, prob.upper, L, settings, decided)
        val, grad = smooth(x)
        ub = exact(x)
        if ub < upper_b:
            upper_b, best_x = ub, x.copy()
        lower_b = max(lower_b, lower_at(x, val, grad))
        if upper_b <= tolerance:
            return Top1Certificate(Reachable.YES, min(lower_b, upper_b), upper_b, beta, best_x)
        if lower_b > tolerance:
            return Top1Certificate(Reachable.NO, lower_b, upper_b, beta, best_x)
    return Top1Certificate(Reachable.MARGINAL, lower_b, upper_b, beta_used, best_x)


def epsilon_greedy_rho_star(cert: Top1Certificate, epsilon: float, n_targets: int) -> GreedyReach:
    """Best-case epsilon-greedy probability from a top-1 certificate.

    ``1 - eps`` if reachable, ``eps / (n - 1)`` if not; for a marginal
    certificate the larger of the two, flagged.
    """
    if n_targets < 2:
        raise DomainError("need at least two targets")
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must lie in [0, 1], got {epsilon}")
    hit = 1.0 - epsilon
    miss = epsilon / (n_targets - 1)
    inverted = miss > hit
    if inverted:
        warnings.warn("epsilon so large that non-top items are favoured", stacklevel=2)
    if cert.reachable is Reachable.YES:
        return GreedyReach(hit, inverted=inverted)
    if cert.reachable is Reachable.NO:
        return GreedyReach(miss, inverted=inverted)
    return GreedyReach(max(hit, miss), marginal=True, inverted=inverted)


def baseline_rho(scores: ArrayLike, targets: TargetSet | Sequence[int], rule: SelectionRule, goal: int) -> float:
    """Probability of recommending ``goal`` with no strategic action."""
    ids = sorted(targets.items if isinstance(targets, TargetSet) else targets)
    if goal not in ids:
        raise DomainError(f"goal {goal} is not a target")
    if isinstance(rule, Softmax):
        # same arithmetic as the solver objective, so a no-agency pair has lift exactly 1
        s = np.asarray(scores, dtype=float)[ids]
        f = s - s[ids.index(goal)]
        val, _ = _lse_terms(np.zeros((len(ids), 1)), f, rule.beta, np.zeros(1))
        return math.exp(-val)
    p = rule_distribution(scores, ids, rule)
    return float(p[ids.index(goal)])
