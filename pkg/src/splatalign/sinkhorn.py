"""Entropy-regularized optimal transport in the log domain, plus exact oracles.

``sinkhorn_log`` is the production solver: the kernel only ever exists as
``log K = -C / eps`` and the scaling updates are log-sum-exp reductions, so
arbitrarily small eps or large costs cannot overflow. ``sinkhorn_plain`` keeps
the textbook multiplicative recursion for cross-checking on small well-scaled
instances. ``exact_ot_oracle`` solves the unregularized problem exactly:
permutation enumeration in the uniform square regime, a transportation
simplex (north-west corner start, improvement pivots) for general weights.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bures import CostMatrix, build_cost_matrix
from .core import GaussianMixture
from .errors import DimensionMismatchError, NotConvergedWarning, TooLargeError

MARGINAL_TOL = 1e-6

ABSOLUTE = "absolute"
RELATIVE = "relative-to-mean-cost"


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs; ``epsilon`` scales with mean cost unless mode is absolute."""

    epsilon: float = 0.05
    max_iterations: int = 500
    convergence_delta: float = 1e-9
    epsilon_scale_mode: str = RELATIVE

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.epsilon_scale_mode not in (ABSOLUTE, RELATIVE):
            raise ValueError(f"unknown epsilon_scale_mode {self.epsilon_scale_mode!r}")

    def resolve_epsilon(self, C: np.ndarray) -> float:
        if self.epsilon_scale_mode == ABSOLUTE:
            return self.epsilon
        mean = float(np.asarray(C).mean())
        return self.epsilon * max(mean, 1e-30)

    def as_absolute(self, C: np.ndarray) -> "SinkhornConfig":
        """Copy of the config with epsilon frozen to its resolved value."""
        return SinkhornConfig(self.resolve_epsilon(C), self.max_iterations, self.convergence_delta, ABSOLUTE)


@dataclass(frozen=True)
class TransportPlan:
    """Converged (or capped) coupling with its regularized transport cost."""

    coupling: np.ndarray
    cost: float
    iterations_used: int
    marginal_error: float
    converged: bool = True
    epsilon_used: float = 0.0
    log_u: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    log_v: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _entries(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.entries
    return np.asarray(C, dtype=np.float64)


def _check_weights(C: np.ndarray, wA, wB):
    wA = np.asarray(wA, dtype=np.float64)
    wB = np.asarray(wB, dtype=np.float64)
    if C.shape != (wA.shape[0], wB.shape[0]):
        raise DimensionMismatchError(f"cost {C.shape} incompatible with weights {wA.shape[0]}x{wB.shape[0]}")
    for name, w in (("wA", wA), ("wB", wB)):
        if np.any(w <= 0):
            raise ValueError(f"{name} must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} must sum to 1 within 1e-9, got {w.sum()!r}")
    return wA, wB


def _logsumexp(mat: np.ndarray, axis: int) -> np.ndarray:
    mx = mat.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(mat - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _lse_rows(log_k, vec, work):
    """logsumexp of log_k + vec[None, :] over rows, reusing ``work``."""
    np.add(log_k, vec[None, :], out=work)
    mx = work.max(axis=1)
    np.subtract(work, mx[:, None], out=work)
    np.exp(work, out=work)
    s = work.sum(axis=1)
    np.log(s, out=s)
    s += mx
    return s


def _lse_cols(log_k, vec, work):
    np.add(log_k, vec[:, None], out=work)
    mx = work.max(axis=0)
    np.subtract(work, mx[None, :], out=work)
    np.exp(work, out=work)
    s = work.sum(axis=0)
    np.log(s, out=s)
    s += mx
    return s


def sinkhorn_log(C, wA, wB, cfg: SinkhornConfig = SinkhornConfig(), initial_potentials=None,
                 warn: bool = True) -> TransportPlan:
    """Solve the entropic OT problem; all accumulation happens in log space.

    Iterates the scaling updates until the largest change of either
    log-scaling vector drops below ``cfg.convergence_delta`` or the iteration
    cap is hit. The returned cost is sum(plan * C), excluding the entropy
    term. A plan whose marginal error exceeds 1e-6 at the cap is still
    returned, flagged not converged (with a NotConvergedWarning unless
    ``warn`` is off, as in the optimizer's warm-started inner calls).
    """
    C = _entries(C)
    wA, wB = _check_weights(C, wA, wB)
    eps = cfg.resolve_epsilon(C)
    log_k = -C / eps
    log_wa = np.log(wA)
    log_wb = np.log(wB)
    if initial_potentials is not None:
        log_u = np.array(initial_potentials[0], dtype=np.float64)
        log_v = np.array(initial_potentials[1], dtype=np.float64)
    else:
        log_u = np.zeros(C.shape[0])
        log_v = np.zeros(C.shape[1])
    work = np.empty_like(log_k)
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        log_u_next = log_wa - _lse_rows(log_k, log_v, work)
        log_v_next = log_wb - _lse_cols(log_k, log_u_next, work)
        delta = max(np.abs(log_u_next - log_u).max(), np.abs(log_v_next - log_v).max())
        log_u, log_v = log_u_next, log_v_next
        if delta < cfg.convergence_delta:
            break
    np.add(log_k, log_u[:, None], out=work)
    work += log_v[None, :]
    plan = np.exp(work, out=work)
    marginal_error = max(
        float(np.abs(plan.sum(axis=1) - wA).max()),
        float(np.abs(plan.sum(axis=0) - wB).max()),
    )
    converged = marginal_error <= MARGINAL_TOL
    if not converged and warn:
        warnings.warn(
            f"sinkhorn hit {iterations} iterations with marginal error {marginal_error:.3e}",
            NotConvergedWarning,
            stacklevel=2,
        )
    return TransportPlan(
        coupling=plan,
        cost=float((plan * C).sum()),
        iterations_used=iterations,
        marginal_error=marginal_error,
        converged=converged,
        epsilon_used=eps,
        log_u=log_u,
        log_v=log_v,
    )


def sinkhorn_plain(C, wA, wB, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Multiplicative-update reference; only safe on small well-scaled inputs."""
    C = _entries(C)
    wA, wB = _check_weights(C, wA, wB)
    eps = cfg.resolve_epsilon(C)
    K = np.exp(-C / eps)
    u = np.ones(C.shape[0])
    v = np.ones(C.shape[1])
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        u_next = wA / (K @ v)
        v_next = wB / (K.T @ u_next)
        delta = max(
            np.abs(np.log(u_next) - np.log(u)).max(),
            np.abs(np.log(v_next) - np.log(v)).max(),
        )
        u, v = u_next, v_next
        if delta < cfg.convergence_delta:
            break
    plan = u[:, None] * K * v[None, :]
    marginal_error = max(
        float(np.abs(plan.sum(axis=1) - wA).max()),
        float(np.abs(plan.sum(axis=0) - wB).max()),
    )
    converged = marginal_error <= MARGINAL_TOL
    if not converged:
        warnings.warn(
            f"plain sinkhorn hit {iterations} iterations with marginal error {marginal_error:.3e}",
            NotConvergedWarning,
            stacklevel=2,
        )
    return TransportPlan(
        coupling=plan,
        cost=float((plan * C).sum()),
        iterations_used=iterations,
        marginal_error=marginal_error,
        converged=converged,
        epsilon_used=eps,
        log_u=np.log(u),
        log_v=np.log(v),
    )


def _assignment_brute_force(C: np.ndarray):
    n = C.shape[0]
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = C[np.arange(n)[None, :], perms].sum(axis=1)
    best = int(np.argmin(totals))
    coupling = np.zeros_like(C)
    coupling[np.arange(n), perms[best]] = 1.0 / n
    return coupling, float(totals[best]) / n


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Initial basic feasible solution; returns allocations and basis cells."""
    m, n = len(a), len(b)
    supply = a.copy()
    demand = b.copy()
    alloc = np.zeros((m, n))
    basis = []
    i = j = 0
    while i < m and j < n:
        q = min(supply[i], demand[j])
        alloc[i, j] = q
        basis.append((i, j))
        supply[i] -= q
        demand[j] -= q
        if supply[i] <= demand[j] and i + 1 < m:
            i += 1
        else:
            j += 1
    # pad degenerate bases up to the spanning-tree size m + n - 1
    k = 0
    while len(basis) < m + n - 1:
        cell = (k // n, k % n)
        if cell not in basis and _keeps_forest(basis, cell):
            basis.append(cell)
        k += 1
    return alloc, basis


def _keeps_forest(basis, cell) -> bool:
    return _find_cycle(basis + [cell], cell) is None


def _find_cycle(basis, start):
    """Alternating row/column cycle through ``start`` in the basis graph, if any."""
    rows: dict[int, list[int]] = {}
    cols: dict[int, list[int]] = {}
    for r, c in basis:
        rows.setdefault(r, []).append(c)
        cols.setdefault(c, []).append(r)

    def walk(path, move_along_row):
        r, c = path[-1]
        if move_along_row:
            for c2 in rows.get(r, ()):
                if c2 == c:
                    continue
                nxt = (r, c2)
                if nxt == start and len(path) >= 3:
                    return path
                if nxt in path:
                    continue
                res = walk(path + [nxt], False)
                if res is not None:
                    return res
        else:
            for r2 in cols.get(c, ()):
                if r2 == r:
                    continue
                nxt = (r2, c)
                if nxt == start and len(path) >= 3:
                    return path
                if nxt in path:
                    continue
                res = walk(path + [nxt], True)
                if res is not None:
                    return res
        return None

    return walk([start], True) or walk([start], False)


def _transportation_simplex(C: np.ndarray, a: np.ndarray, b: np.ndarray):
    m, n = C.shape
    alloc, basis = _northwest_corner(a, b)
    for _ in range(10000):
        basis_set = set(basis)
        # duals from the basis tree
        u = np.full(m, np.nan)
        v = np.full(n, np.nan)
        u[basis[0][0]] = 0.0
        pending = list(basis)
        while pending:
            progressed = False
            rest = []
            for r, c in pending:
                if not math.isnan(u[r]) and math.isnan(v[c]):
                    v[c] = C[r, c] - u[r]
                    progressed = True
                elif math.isnan(u[r]) and not math.isnan(v[c]):
                    u[r] = C[r, c] - v[c]
                    progressed = True
                elif math.isnan(u[r]) and math.isnan(v[c]):
                    rest.append((r, c))
            pending = rest if progressed else []
        u = np.nan_to_num(u)
        v = np.nan_to_num(v)
        reduced = C - u[:, None] - v[None, :]
        # Bland's rule: first improving cell in row-major order
        entering = None
        for r in range(m):
            for c in range(n):
                if (r, c) not in basis_set and reduced[r, c] < -1e-12:
                    entering = (r, c)
                    break
            if entering:
                break
        if entering is None:
            return alloc, float((alloc * C).sum())
        cycle = _find_cycle(basis + [entering], entering)
        if cycle is None:
            raise RuntimeError("transportation simplex lost the basis tree")
        minus = cycle[1::2]
        step = min(alloc[r, c] for r, c in minus)
        leaving = next((r, c) for r, c in minus if alloc[r, c] == step)
        for idx, (r, c) in enumerate(cycle):
            alloc[r, c] += step if idx % 2 == 0 else -step
        basis.remove(leaving)
        basis.append(entering)
    raise RuntimeError("transportation simplex did not terminate")


def exact_ot_oracle(C, wA, wB):
    """Globally optimal unregularized transport (small instances only).

    Uniform weights with square C up to 8x8 go through permutation
    enumeration; anything else with at most 64 cells is solved by the
    transportation simplex. Returns (coupling, cost).
    """
    C = _entries(C)
    wA = np.asarray(wA, dtype=np.float64)
    wB = np.asarray(wB, dtype=np.float64)
    if C.shape != (len(wA), len(wB)):
        raise DimensionMismatchError(f"cost {C.shape} incompatible with weights")
    m, n = C.shape
    uniform = (
        m == n
        and np.allclose(wA, 1.0 / m, atol=1e-12)
        and np.allclose(wB, 1.0 / n, atol=1e-12)
    )
    if uniform and m <= 8:
        return _assignment_brute_force(C)
    if m * n <= 64:
        alloc, cost = _transportation_simplex(C, wA, wB)
        return alloc, cost
    raise TooLargeError(f"oracle supports uniform M=N<=8 or M*N<=64 cells, got {m}x{n}")


def mw2_distance(A: GaussianMixture, B: GaussianMixture, cfg: SinkhornConfig = SinkhornConfig()):
    """Mixture 2-Wasserstein distance (square root of the transport cost).

    Returns (distance, plan). Both mixtures must carry normalized weights.
    """
    for name, mix in (("A", A), ("B", B)):
        if abs(mix.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture {name} weights must sum to 1 (call normalize_weights)")
    C = build_cost_matrix(A, B)
    plan = sinkhorn_log(C, A.weights, B.weights, cfg)
    return math.sqrt(max(plan.cost, 0.0)), plan


def rescale_potentials(log_u: np.ndarray, log_v: np.ndarray, eps_from: float, eps_to: float):
    """Convert log-scalings between epsilon levels for warm starts.

    The dual potentials f = eps * log_u are the scale-stable objects, so
    log-scalings carry over across an epsilon change via the ratio.
    """
    r = eps_from / eps_to
    return log_u * r, log_v * r


def dump_plan(plan: TransportPlan, path, fmt: str = "text") -> None:
    """Write the dense coupling row-major, as a text grid or an .npy file.

    The text format starts with ``# transport_plan rows=M cols=N
    layout=row-major`` followed by one whitespace-separated row per line.
    """
    if fmt == "npy":
        np.save(path, plan.coupling)
        return
    if fmt != "text":
        raise ValueError(f"unknown dump format {fmt!r}")
    m, n = plan.coupling.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# transport_plan rows={m} cols={n} layout=row-major\n")
        for row in plan.coupling:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
