"""Block coordinate descent on smooth test objectives, with rate-bound checks.

Training one neighborhood at a time is block coordinate descent over the
agents' policy blocks. This module runs BCD on objectives where the
convergence assumptions hold and measures how fast the stationarity gap
closes relative to the summed step bounds w_k.

Everything here minimizes. A reward-maximization problem J maps to the
objective -J; the stationarity gap is unchanged by that flip.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize


class ContractViolation(ValueError):
    pass


class NonFiniteObjective(FloatingPointError):
    def __init__(self, message: str, trace: "BcdTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class SmoothObjective:
    dim: int
    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    hessian: np.ndarray | None = None      # set for quadratics; enables exact block solves
    linear: np.ndarray | None = None
    name: str = "objective"

    def __call__(self, x: np.ndarray) -> float:
        return self.evaluate(x)

    @property
    def bounded(self) -> bool:
        return self.lower is not None or self.upper is not None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.dim, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        hi = np.full(self.dim, np.inf) if self.upper is None else np.asarray(self.upper, float)
        return lo, hi

    def feasible(self, x: np.ndarray, tol: float = 1e-12) -> bool:
        lo, hi = self.bounds()
        return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))

    def project(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(x, lo, hi)

    def negated(self) -> "SmoothObjective":
        """Objective for maximizing ``self`` under the minimization convention."""
        return SmoothObjective(
            self.dim, lambda x: -self.evaluate(x), lambda x: -self.gradient(x),
            self.lower, self.upper,
            None if self.hessian is None else -self.hessian,
            None if self.linear is None else -self.linear,
            name=f"-{self.name}",
        )


def quadratic(Q: np.ndarray, b: np.ndarray, lower=None, upper=None,
              name: str = "quadratic") -> SmoothObjective:
    """``0.5 x^T Q x - b^T x``."""
    Q = np.asarray(Q, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return SmoothObjective(
        dim=len(b),
        evaluate=lambda x: float(0.5 * x @ Q @ x - b @ x),
        gradient=lambda x: Q @ x - b,
        lower=lower, upper=upper, hessian=Q, linear=b, name=name,
    )


def random_spd(dim: int, condition: float, rng: np.random.Generator) -> np.ndarray:
    """SPD matrix with eigenvalues log-spaced in [1, condition] and random eigenvectors."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q *= np.sign(np.diag(r))
    eig = np.logspace(0.0, np.log10(condition), dim) if dim > 1 else np.array([1.0])
    Q = (q * eig) @ q.T
    return 0.5 * (Q + Q.T)


def block_coupled_spd(dim: int, condition: float, blocks: Sequence[np.ndarray],
                      coupling: float, rng: np.random.Generator) -> np.ndarray:
    """SPD matrix whose blocks are random SPD and whose cross-block part is weak.

    The cross-block coupling has spectral norm ``coupling`` times the smallest
    eigenvalue of the block-diagonal part (``coupling < 1`` keeps it SPD). An
    affine map ``a*Q + c*I`` then sets the spectrum to exactly [1, condition]
    without touching the cross-block structure.
    """
    if not 0.0 <= coupling < 1.0:
        raise ValueError("coupling must lie in [0, 1)")
    Q = np.zeros((dim, dim))
    for blk in blocks:
        Q[np.ix_(blk, blk)] = random_spd(len(blk), condition, rng)
    lam_min = np.linalg.eigvalsh(Q)[0]
    E = rng.standard_normal((dim, dim))
    E = 0.5 * (E + E.T)
    for blk in blocks:
        E[np.ix_(blk, blk)] = 0.0
    norm = np.linalg.norm(E, 2)
    if norm > 0:
        Q = Q + E * (coupling * lam_min / norm)
    ev = np.linalg.eigvalsh(Q)
    a = (condition - 1.0) / (ev[-1] - ev[0]) if ev[-1] > ev[0] else 1.0
    Q = a * Q + (1.0 - a * ev[0]) * np.eye(dim)
    return 0.5 * (Q + Q.T)


def quadratic_family(seed: int = 0, conditions=(1, 10, 100), dims=(8, 16, 64),
                     n_blocks: int = 4, coupling: float = 0.5, structure: str = "block"):
    """The SPD test family: one quadratic per (condition number, dimension).

    ``structure="block"`` couples the ``n_blocks`` contiguous blocks weakly
    (see ``block_coupled_spd``); ``"rotated"`` uses a uniformly random
    eigenbasis, where block methods converge markedly slower.
    """
    rng = np.random.default_rng(seed)
    out = []
    for kappa in conditions:
        for d in dims:
            if structure == "block":
                Q = block_coupled_spd(d, kappa, contiguous_blocks(d, n_blocks), coupling, rng)
            elif structure == "rotated":
                Q = random_spd(d, kappa, rng)
            else:
                raise ValueError(f"unknown structure {structure!r}")
            b = rng.standard_normal(d)
            out.append(quadratic(Q, b, name=f"spd-{structure}(kappa={kappa},d={d})"))
    return out


def cosine_objective(dim: int, coupling: float = 0.1) -> SmoothObjective:
    """Non-convex ``sum cos(x_i) + coupling/2 * sum (x_i - x_{i+1})^2``."""

    def evaluate(x):
        return float(np.cos(x).sum() + 0.5 * coupling * np.sum(np.diff(x) ** 2))

    def gradient(x):
        g = -np.sin(x)
        d = np.diff(x)
        g[:-1] -= coupling * d
        g[1:] += coupling * d
        return g

    return SmoothObjective(dim, evaluate, gradient, name=f"cosine(d={dim})")


def stationarity_gap(obj: SmoothObjective, x: np.ndarray) -> float:
    """Norm of the (projected) gradient.

    For box constraints, components whose descent direction points out of an
    active bound are zeroed.
    """
    x = np.asarray(x, dtype=np.float64)
    if not obj.feasible(x):
        raise ContractViolation("stationarity_gap called at an infeasible point")
    g = np.asarray(obj.gradient(x), dtype=np.float64).copy()
    if obj.bounded:
        lo, hi = obj.bounds()
        g[(x <= lo) & (g > 0)] = 0.0
        g[(x >= hi) & (g < 0)] = 0.0
    return float(np.linalg.norm(g))


def contiguous_blocks(dim: int, n_blocks: int) -> list[np.ndarray]:
    return [b for b in np.array_split(np.arange(dim), n_blocks) if len(b)]


def cyclic_partitioner(blocks: Sequence[np.ndarray]) -> Callable[[int], int]:
    return lambda k: k % len(blocks)


def harmonic(k: int) -> float:
    return 1.0 / k


def per_visit(bound: Callable[[int], float], n_blocks: int) -> Callable[[int], float]:
    """Index a bound schedule by block visit: the i-th update of any block gets bound(i).

    Under cyclic blocks, iteration k is visit ceil(k / n_blocks). With
    ``bound=harmonic`` the sequence still has sum w = inf and sum w^2 < inf.
    """
    return lambda k: bound(-(-k // n_blocks))


class ExactBlockMin:
    """Minimize the objective exactly over one block, others frozen.

    Quadratics are solved in closed form; other objectives fall back to
    L-BFGS-B on the block. ``w_k`` is recorded as the length of the move.
    """

    exact = True

    def __call__(self, obj: SmoothObjective, x: np.ndarray, block: np.ndarray, k: int):
        x_new = x.copy()
        if obj.hessian is not None and not obj.bounded:
            Q, b = obj.hessian, obj.linear
            rest = np.setdiff1d(np.arange(obj.dim), block)
            rhs = b[block] - Q[np.ix_(block, rest)] @ x[rest]
            x_new[block] = np.linalg.solve(Q[np.ix_(block, block)], rhs)
        else:
            lo, hi = obj.bounds()

            def f(z):
                y = x_new.copy()
                y[block] = z
                return obj.evaluate(y), obj.gradient(y)[block]

            res = optimize.minimize(
                f, x[block], jac=True, method="L-BFGS-B",
                bounds=list(zip(lo[block], hi[block])),
                options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 1000},
            )
            x_new[block] = res.x
        return x_new, float(np.linalg.norm(x_new - x))


class BoundedGradientStep:
    """Projected block gradient step, each coordinate's move capped at ``w_k``.

    The bound is a vector bound (the same w_k on every coordinate), i.e. an
    infinity-norm cap on the step. The raw step is ``lr * grad``; with
    ``lr=None`` it is 1/L_block when the objective exposes a Hessian, else 1.
    ``bound(k)`` gives w_k for the 1-based iteration k.
    """

    exact = False

    def __init__(self, bound: Callable[[int], float] = harmonic, lr: float | None = None):
        self.bound = bound
        self.lr = lr
        self._block_lr: dict[tuple[int, bytes], float] = {}

    def _lr(self, obj: SmoothObjective, block: np.ndarray) -> float:
        if self.lr is not None:
            return self.lr
        if obj.hessian is None:
            return 1.0
        key = (id(obj), block.tobytes())
        if key not in self._block_lr:
            self._block_lr[key] = 1.0 / np.linalg.eigvalsh(obj.hessian[np.ix_(block, block)])[-1]
        return self._block_lr[key]

    def __call__(self, obj: SmoothObjective, x: np.ndarray, block: np.ndarray, k: int):
        w = float(self.bound(k))
        step = np.clip(self._lr(obj, block) * obj.gradient(x)[block], -w, w)
        x_new = x.copy()
        x_new[block] = x[block] - step
        return obj.project(x_new), w


@dataclass
class BcdTrace:
    iterates: list[np.ndarray] = field(default_factory=list)
    blocks: list[int] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.gaps)

    def bound_products(self) -> np.ndarray:
        """``min_{k<=i} gap_k * sum_{k<=i} w_k`` for every i."""
        return np.minimum.accumulate(self.gaps) * np.cumsum(self.weights)


def bcd_run(obj: SmoothObjective, blocks: Sequence[np.ndarray], step_rule,
            iterations: int, x0: np.ndarray | None = None,
            partitioner: Callable[[int], int] | None = None,
            keep_iterates: bool = True) -> BcdTrace:
    """Run ``iterations`` block updates; one block per iteration.

    Iteration k (1-based) updates ``blocks[partitioner(k-1)]``; the default
    partitioner cycles through the blocks in order. With ``keep_iterates``
    false only the final iterate is stored.
    """
    covered = np.sort(np.concatenate(blocks))
    if not np.array_equal(covered, np.arange(obj.dim)):
        raise ContractViolation("blocks must partition range(dim)")
    partitioner = partitioner or cyclic_partitioner(blocks)
    x = obj.project(np.zeros(obj.dim) if x0 is None else np.asarray(x0, dtype=np.float64))
    trace = BcdTrace()
    for k in range(1, iterations + 1):
        bid = partitioner(k - 1)
        x, w = step_rule(obj, x, blocks[bid], k)
        f = obj.evaluate(x)
        if not (math.isfinite(f) and np.all(np.isfinite(x))):
            raise NonFiniteObjective(f"non-finite objective at iteration {k}", trace)
        if keep_iterates or k == iterations:
            trace.iterates.append(x)
        trace.blocks.append(bid)
        trace.weights.append(w)
        trace.objective.append(f)
        trace.gaps.append(stationarity_gap(obj, x))
    return trace


@dataclass(frozen=True)
class RateBoundResult:
    c: float
    passed: bool
    head_max: float
    tail_max: float


def check_rate_bound(trace: BcdTrace, growth_tolerance: float = 1.1) -> RateBoundResult:
    """Fit the smallest c with ``min_{k<=i} gap_k <= c / sum_{k<=i} w_k`` for all i.

    The products ``g_i * W_i`` must stay bounded: the check fails when the
    largest product over the second half of the trace exceeds the largest
    over the first half by more than ``growth_tolerance``.
    """
    if len(trace) == 0:
        raise ContractViolation("empty trace")
    prod = trace.bound_products()
    c = float(np.max(prod))
    split = math.ceil(len(prod) / 2)
    head_max = float(np.max(prod[:split]))
    tail_max = float(np.max(prod[split:])) if split < len(prod) else head_max
    passed = math.isfinite(c) and tail_max <= growth_tolerance * head_max
    return RateBoundResult(c, passed, head_max, tail_max)


def write_trace_csv(trace: BcdTrace, path) -> None:
    products = trace.bound_products() if len(trace) else []
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "block", "w_k", "objective", "gap", "bound_product"])
            for k in range(len(trace)):
                w.writerow([k + 1, trace.blocks[k], f"{trace.weights[k]:.6g}",
                            f"{trace.objective[k]:.10g}", f"{trace.gaps[k]:.6g}",
                            f"{products[k]:.6g}"])
    except OSError as exc:
        raise OSError(f"cannot write BCD trace to {path}: {exc}") from exc
