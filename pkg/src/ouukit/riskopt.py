"""Risk measures, SAA objectives, and a projected L-BFGS optimizer.

The CVaR objective uses the standard reformulation with an auxiliary
scalar t and a C^2 piecewise-polynomial smoothing of max(x, 0). Sample
evaluators map a control vector to all per-sample performance values
and their control gradients in one call; the PDE-backed one counts every
state and adjoint solve it performs.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .forward import SemilinearProblem, performance_gradient, solve_state
from .pod import ReducedTrackingForm
from .util import parallel_map


# ---------------------------------------------------------------------------
# smoothed plus function


def splus(x, eps: float):
    """C^2 approximation of max(x, 0): cubic-quartic blend on [0, eps]."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x >= 0.0) & (x < eps)
    xm = x[mid]
    out[mid] = xm ** 3 / eps ** 2 - xm ** 4 / (2.0 * eps ** 3)
    hi = x >= eps
    out[hi] = x[hi] - eps / 2.0
    return out if out.ndim else float(out)


def splus_d1(x, eps: float):
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x >= 0.0) & (x < eps)
    xm = x[mid]
    out[mid] = 3.0 * xm ** 2 / eps ** 2 - 2.0 * xm ** 3 / eps ** 3
    out[x >= eps] = 1.0
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# unsmoothed sort-based estimators (reporting only)


def _ceil_count(x: float) -> int:
    # tolerant ceiling: 0.9*10 is 9.000000000000002 in floats
    return int(math.ceil(x - 1e-9))


def mc_var(values: np.ndarray, beta: float) -> float:
    """Order-statistic beta-quantile (1-based index ceil(beta*N))."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample set")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    srt = np.sort(values)
    k = max(_ceil_count(beta * values.size), 1)
    return float(srt[k - 1])


def mc_cvar(values: np.ndarray, beta: float) -> float:
    """Mean of the top ceil((1-beta)*N) values."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample set")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    k = max(_ceil_count((1.0 - beta) * values.size), 1)
    srt = np.sort(values)
    return float(srt[-k:].mean())


# ---------------------------------------------------------------------------
# performance function (tracking type)


@dataclass(frozen=True)
class TrackingTarget:
    """Full-space frame of Q(u) = ||u - u_target||_M^2."""
    u_target: np.ndarray
    M: sp.spmatrix = field(repr=False, default=None)


def q_tracking(u: np.ndarray, target):
    """Value and gradient of the tracking performance in either frame."""
    u = np.asarray(u, dtype=float)
    if isinstance(target, ReducedTrackingForm):
        if u.shape != (target.rank,):
            raise ValueError("reduced coefficients do not match the tracking form")
        return target.value_and_grad(u)
    if isinstance(target, TrackingTarget):
        if u.shape != target.u_target.shape:
            raise ValueError("state does not match the tracking target frame")
        diff = u - target.u_target
        mdiff = target.M @ diff
        return float(diff @ mdiff), 2.0 * mdiff
    raise TypeError(f"unsupported tracking frame {type(target)!r}")


# ---------------------------------------------------------------------------
# sample evaluators


class PDEEvaluator:
    """(Q_i, dQ_i/dz) for a frozen field sample set, by Newton + adjoint."""

    def __init__(self, prob: SemilinearProblem, samples, target: TrackingTarget,
                 newton_rtol: float = None, threads: int = 1):
        self.prob = prob
        self.samples = list(samples)
        self.target = target
        self.newton_rtol = newton_rtol
        self.threads = threads
        self.counts = {"state_solves": 0, "adjoint_solves": 0, "newton_iterations": 0}
        # the stiffness of each frozen sample never changes across z
        values = [s.values if hasattr(s, "values") else np.asarray(s, float)
                  for s in self.samples]
        self._stiffness = [prob.stiffness_bc(v) for v in values]

    @property
    def n(self) -> int:
        return len(self.samples)

    def __call__(self, z: np.ndarray):
        def one(i):
            state = solve_state(self.prob, None, z, rtol=self.newton_rtol,
                                stiffness_bc=self._stiffness[i])
            q, qgrad = q_tracking(state.u, self.target)
            g = performance_gradient(self.prob, state, qgrad)
            return q, g, state.iterations

        results = parallel_map(one, self.n, self.threads)
        self.counts["state_solves"] += self.n
        self.counts["adjoint_solves"] += self.n
        self.counts["newton_iterations"] += sum(r[2] for r in results)
        Q = np.array([r[0] for r in results])
        G = np.vstack([r[1] for r in results])
        return Q, G

    def values_only(self, z: np.ndarray) -> np.ndarray:
        def one(i):
            state = solve_state(self.prob, None, z, rtol=self.newton_rtol,
                                stiffness_bc=self._stiffness[i])
            return q_tracking(state.u, self.target)[0]

        vals = parallel_map(one, self.n, self.threads)
        self.counts["state_solves"] += self.n
        return np.array(vals)


class SurrogateEvaluator:
    """Batched surrogate (Q_i, dQ_i/dz) against a reduced tracking form."""

    def __init__(self, model, m_r: np.ndarray, form: ReducedTrackingForm,
                 chunk: int = 256):
        self.model = model
        self.m_r = np.asarray(m_r, dtype=float)
        self.form = form
        self.chunk = chunk
        self.counts = {"batched_evals": 0, "samples_evaluated": 0}

    @property
    def n(self) -> int:
        return self.m_r.shape[0]

    def __call__(self, z: np.ndarray):
        z = np.asarray(z, dtype=float)
        Q = np.empty(self.n)
        G = np.empty((self.n, z.size))
        for start in range(0, self.n, self.chunk):
            mr = self.m_r[start:start + self.chunk]
            Z = np.broadcast_to(z, (mr.shape[0], z.size))
            phi = self.model.forward_batch(mr, Z)
            jac = self.model.z_jacobian_batch(mr, Z)
            Q[start:start + self.chunk] = (
                np.sum(phi * phi, axis=1) + 2.0 * (phi @ self.form.c) + self.form.q0
            )
            dq = 2.0 * (phi + self.form.c)
            G[start:start + self.chunk] = np.einsum("bu,buk->bk", dq, jac)
        self.counts["batched_evals"] += 1
        self.counts["samples_evaluated"] += self.n
        return Q, G

    def values_only(self, z: np.ndarray) -> np.ndarray:
        return self(z)[0]


# ---------------------------------------------------------------------------
# SAA problem and objective


@dataclass(frozen=True)
class RiskSpec:
    kind: str = "cvar"          # "mean" or "cvar"
    beta: float = 0.95
    eps: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("mean", "cvar"):
            raise ValueError(f"unknown risk kind {self.kind!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class SAAProblem:
    evaluator: object            # callable z -> (Q (N,), G (N, d_Z))
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    risk: RiskSpec


def saa_objective(prob: SAAProblem, z: np.ndarray, t: float = None):
    """Value and exact gradients of the SAA risk objective.

    Returns (value, grad_z, grad_t); grad_t is None for the mean risk.
    """
    Q, G = prob.evaluator(z)
    n = Q.size
    if prob.risk.kind == "mean":
        return float(Q.mean()), G.mean(axis=0), None
    if t is None:
        raise ValueError("CVaR objective needs the auxiliary variable t")
    scale = 1.0 / (n * (1.0 - prob.risk.beta))
    d1 = splus_d1(Q - t, prob.risk.eps)
    value = t + scale * float(np.sum(splus(Q - t, prob.risk.eps)))
    grad_z = scale * (d1 @ G)
    grad_t = 1.0 - scale * float(np.sum(d1))
    return value, grad_z, grad_t


# ---------------------------------------------------------------------------
# projected L-BFGS with box bounds


@dataclass
class OptResult:
    z_star: np.ndarray
    t_star: float
    objective: float
    objective_history: list
    pg_norm_history: list
    iterations: int
    converged: bool
    line_search_failed: bool
    evaluator_counts: dict


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize(prob: SAAProblem, z0: np.ndarray, t0: float = None,
             max_iter: int = 500, pg_tol: float = 1e-6,
             memory: int = 10) -> OptResult:
    """Projected L-BFGS over (z, t); t enters only for the CVaR risk.

    Limited-memory pairs from accepted steps, gradient projection onto
    the box, and Armijo backtracking along the projection arc. When t0
    is omitted it starts at the empirical beta-quantile of the initial
    sample values.
    """
    z0 = np.asarray(z0, dtype=float)
    lo, hi = prob.bounds_lo, prob.bounds_hi
    if np.any(z0 < lo - 1e-12) or np.any(z0 > hi + 1e-12):
        raise ValueError("initial control violates the bounds")
    use_t = prob.risk.kind == "cvar"

    if use_t and t0 is None:
        Q0, _ = prob.evaluator(z0)
        t0 = mc_var(Q0, prob.risk.beta)

    if use_t:
        x = np.concatenate([z0, [float(t0)]])
        xlo = np.concatenate([lo, [-np.inf]])
        xhi = np.concatenate([hi, [np.inf]])
    else:
        x, xlo, xhi = z0.copy(), lo, hi

    def fg(xv):
        if use_t:
            v, gz, gt = saa_objective(prob, xv[:-1], xv[-1])
            return v, np.concatenate([gz, [gt]])
        v, gz, _ = saa_objective(prob, xv)
        return v, gz

    f, g = fg(x)
    pairs = deque(maxlen=memory)
    history, pg_history = [f], []
    converged = False
    ls_failed = False
    it = 0
    best = (f, x.copy())

    for it in range(1, max_iter + 1):
        pg = x - np.clip(x - g, xlo, xhi)
        pgnorm = float(np.abs(pg).max())
        pg_history.append(pgnorm)
        if pgnorm <= pg_tol * max(1.0, abs(f)):
            converged = True
            break

        d = -_two_loop(g, list(pairs))
        if g @ d > -1e-12 * np.linalg.norm(g) * np.linalg.norm(d):
            d = -g

        step = 1.0
        accepted = False
        for _ in range(40):
            x_new = np.clip(x + step * d, xlo, xhi)
            dx = x_new - x
            if not np.any(dx):
                break
            f_new, g_new = fg(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * (g @ dx):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            ls_failed = True
            break

        s_vec = x_new - x
        y_vec = g_new - g
        sy = s_vec @ y_vec
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            pairs.append((s_vec, y_vec, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if f < best[0]:
            best = (f, x.copy())

    if ls_failed and best[0] < f:
        f, x = best[0], best[1].copy()

    counts = dict(getattr(prob.evaluator, "counts", {}))
    return OptResult(
        z_star=x[:-1] if use_t else x,
        t_star=float(x[-1]) if use_t else None,
        objective=float(f),
        objective_history=history,
        pg_norm_history=pg_history,
        iterations=it,
        converged=converged,
        line_search_failed=ls_failed,
        evaluator_counts=counts,
    )
