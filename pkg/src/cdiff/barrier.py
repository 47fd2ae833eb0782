"""Log-barrier Hessian geometry on polytopes and its geodesic random walk.

On ``{A x < b}`` with unit rows the barrier ``phi(x) = -sum log s_i(x)``,
``s = b - A x``, has Hessian ``g = A^T S^-2 A``.  The forward noising process
is the Langevin diffusion ``dX = 1/2 div(g^-1) dt + g^-1/2 dB`` (rescaled by
``beta(t)``), discretised by a step-halving retraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    DegenerateMetricError,
    InfeasiblePointError,
    StepFailureError,
    UnsupportedDomainError,
)
from .geometry import ConstraintSet, distance_to_boundary
from .schedule import NoiseSchedule

MAX_HALVINGS = 60
RETRACTION_EPS = 1e-3
_SMALL_D = 12


# ---------------------------------------------------------------------------
# Batched dense linear algebra for stacks of small SPD matrices
# ---------------------------------------------------------------------------

def batched_cholesky(g):
    """Lower Cholesky factors of a stack ``(n, d, d)`` of SPD matrices."""
    n, d, _ = g.shape
    if d > _SMALL_D:
        try:
            return np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateMetricError(str(exc)) from exc
    L = np.zeros_like(g)
    for j in range(d):
        Lj = L[:, j, :j]
        piv = g[:, j, j] - np.einsum("nk,nk->n", Lj, Lj)
        if np.any(~(piv > 0)):
            raise DegenerateMetricError("metric is not positive definite")
        diag = np.sqrt(piv)
        L[:, j, j] = diag
        if j + 1 < d:
            L[:, j + 1:, j] = (g[:, j + 1:, j]
                               - np.einsum("nik,nk->ni", L[:, j + 1:, :j], Lj)) / diag[:, None]
    return L


def solve_lower(L, B):
    """Solve ``L Y = B`` for stacked lower-triangular ``L`` and ``B`` of shape ``(n, d, k)``."""
    n, d, _ = L.shape
    if d > _SMALL_D:
        return np.linalg.solve(L, B)
    Y = np.empty_like(B)
    for i in range(d):
        Y[:, i] = (B[:, i] - np.einsum("nj,njk->nk", L[:, i, :i], Y[:, :i])) / L[:, i, i, None]
    return Y


def solve_lower_t(L, B):
    """Solve ``L^T Y = B``."""
    n, d, _ = L.shape
    if d > _SMALL_D:
        return np.linalg.solve(np.swapaxes(L, -1, -2), B)
    Y = np.empty_like(B)
    for i in reversed(range(d)):
        Y[:, i] = (B[:, i] - np.einsum("nj,njk->nk", L[:, i + 1:, i], Y[:, i + 1:])) / L[:, i, i, None]
    return Y


# ---------------------------------------------------------------------------
# Metric
# ---------------------------------------------------------------------------

def _require_polytope(cset: ConstraintSet):
    if not cset.linear_only:
        raise UnsupportedDomainError("the log-barrier method supports linear constraints only")


def _slacks(X, cset):
    s = cset.b - X @ cset.A.T
    if np.any(~(s > 0)):
        raise InfeasiblePointError("point is not strictly inside the polytope")
    return s


@dataclass
class MetricEval:
    """Hessian metric at ``x`` with its slacks and lower Cholesky factor.

    Fields may carry a leading batch axis.
    """

    x: np.ndarray
    slacks: np.ndarray
    g: np.ndarray
    chol_g: np.ndarray


def log_barrier(x, cset: ConstraintSet):
    """``-sum_i log(b_i - <a_i, x>)``."""
    _require_polytope(cset)
    x = np.asarray(x, dtype=float)
    s = _slacks(np.atleast_2d(x), cset)
    out = -np.sum(np.log(s), axis=-1)
    return float(out[0]) if x.ndim == 1 else out


def _metric(X, s, cset):
    w = s ** -2.0
    return np.einsum("nk,ki,kj->nij", w, cset.A, cset.A)


def metric_at(x, cset: ConstraintSet) -> MetricEval:
    """Evaluate ``g = A^T S^-2 A`` and its Cholesky factor at ``x`` (or a batch)."""
    _require_polytope(cset)
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    s = _slacks(X, cset)
    g = _metric(X, s, cset)
    L = batched_cholesky(g)
    if x.ndim == 1:
        return MetricEval(x, s[0], g[0], L[0])
    return MetricEval(x, s, g, L)


def noise_map(me: MetricEval, z):
    """Map a standard normal draw to one with covariance ``g^-1`` (solves ``L^T u = z``)."""
    L = np.asarray(me.chol_g)
    z = np.asarray(z, dtype=float)
    if L.ndim == 2:
        return solve_lower_t(L[None], z.reshape(1, -1, 1))[0, :, 0]
    return solve_lower_t(L, z[..., None])[..., 0]


def _div_parts(X, cset):
    """Slacks, Cholesky factor, and ``Y = L^-1 A^T`` for a batch."""
    s = _slacks(X, cset)
    L = batched_cholesky(_metric(X, s, cset))
    At = np.broadcast_to(cset.A.T, (X.shape[0],) + cset.A.T.shape)
    Y = solve_lower(L, np.ascontiguousarray(At))
    return s, L, Y


def _div_inner(s, Y):
    """``-2 Y (s^-3 * h)`` with leverages ``h_k = a_k^T g^-1 a_k``; then ``div = L^-T`` of it."""
    h = np.einsum("ndk,ndk->nk", Y, Y)
    return -2.0 * np.einsum("ndk,nk->nd", Y, h * s ** -3.0)


def div_metric_inv(x, cset: ConstraintSet):
    """Row-wise divergence of ``g^-1``: ``sum_j d_j (g^-1)_ij``.

    Uses ``d_j g = 2 A^T diag(s^-3 A[:, j]) A`` and
    ``d_j g^-1 = -g^-1 (d_j g) g^-1``, which collapse to
    ``-2 g^-1 A^T (s^-3 * h)`` with ``h_k = a_k^T g^-1 a_k``.
    """
    _require_polytope(cset)
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    s, L, Y = _div_parts(X, cset)
    out = solve_lower_t(L, _div_inner(s, Y)[..., None])[..., 0]
    return out[0] if x.ndim == 1 else out


def metric_inv_apply(x, v, cset: ConstraintSet):
    """``g(x)^-1 v`` via the Cholesky factor."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    V = np.atleast_2d(np.asarray(v, dtype=float))
    _require_polytope(cset)
    s = _slacks(X, cset)
    L = batched_cholesky(_metric(X, s, cset))
    out = solve_lower_t(L, solve_lower(L, V[..., None]))[..., 0]
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# Geodesic random walk with a step-halving retraction
# ---------------------------------------------------------------------------

def retract(X, W, cset: ConstraintSet, gamma, eps=RETRACTION_EPS):
    """Return ``X + W`` where it keeps a margin, halving ``W`` row-wise otherwise.

    The margin is ``min(eps * sqrt(gamma), dist(X) / 2)`` so that starting
    points already inside the collar can still move.
    """
    X = np.atleast_2d(X)
    W = np.array(np.atleast_2d(W), dtype=float)
    start = distance_to_boundary(X, cset)
    margin = np.minimum(eps * np.sqrt(gamma), 0.5 * start)
    out = X + W
    bad = ~(distance_to_boundary(out, cset, check=False) >= margin)
    halvings = 0
    while np.any(bad):
        halvings += 1
        if halvings > MAX_HALVINGS:
            raise StepFailureError("retraction did not find an interior point")
        W[bad] *= 0.5
        out[bad] = X[bad] + W[bad]
        bad[bad] = ~(distance_to_boundary(out[bad], cset, check=False) >= margin[bad])
    return out


def grw_step(x, drift, gamma, z, cset: ConstraintSet, eps=RETRACTION_EPS):
    """One geodesic-random-walk step ``retract(x + gamma drift + sqrt(gamma) g^-1/2 z)``."""
    _require_polytope(cset)
    x = np.asarray(x, dtype=float)
    me = metric_at(np.atleast_2d(x), cset)
    W = gamma * np.atleast_2d(drift) + np.sqrt(gamma) * noise_map(me, np.atleast_2d(z))
    out = retract(x, W, cset, gamma, eps)
    return out[0] if x.ndim == 1 else out


def barrier_move(X, cset: ConstraintSet, gamma, beta, Z, score=None, score_mult=1.0,
                 noise_scale=1.0, eps=RETRACTION_EPS):
    """Fused barrier update for a batch.

    ``W = gamma beta (1/2 div g^-1 + score_mult g^-1 score)
    + sqrt(gamma beta) noise_scale g^-1/2 Z``, then the retraction.
    ``beta`` may be a scalar or per-row array.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s, L, Y = _div_parts(X, cset)
    gb = gamma * np.broadcast_to(np.asarray(beta, dtype=float), (X.shape[0],))
    inner = gb[:, None] * _div_inner(s, Y) * 0.5
    if score is not None:
        inner = inner + (gb * score_mult)[:, None] * solve_lower(L, np.atleast_2d(score)[..., None])[..., 0]
    inner = inner + (np.sqrt(gb) * noise_scale)[:, None] * Z
    W = solve_lower_t(L, inner[..., None])[..., 0]
    return retract(X, W, cset, gamma, eps)


def raise_kernel_status(status):
    """Translate a compiled-kernel status code into the matching exception."""
    if status == _kernels.INFEASIBLE:
        raise InfeasiblePointError("point is not strictly inside the polytope")
    if status == _kernels.DEGENERATE:
        raise DegenerateMetricError("metric is not positive definite")
    if status == _kernels.STEP_FAILURE:
        raise StepFailureError("retraction did not find an interior point")


def barrier_chain_compiled(X, Z, gb, A, b, gamma, n_periodic=0, score=None, score_mult=1.0,
                           noise_scale=1.0, eps=RETRACTION_EPS, rec_steps=None):
    """Run :func:`cdiff._kernels.barrier_chain` on rows ``X`` (``(n, d)``).

    ``Z`` is ``(steps, d, n)``; ``gb`` holds ``gamma beta`` per step, shared
    ``(steps,)`` or per row ``(n, steps)``.  Returns ``(final, recorded)`` as
    :func:`cdiff.reflected.reflect_chain_compiled` does.
    """
    from .reflected import record_plan

    XT = np.array(np.atleast_2d(X).T, dtype=float, order="C")  # kernel mutates state
    d, n = XT.shape
    Z = np.ascontiguousarray(Z, dtype=float)
    n_steps = Z.shape[0]
    row = lambda v: np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=float), (n,)))  # noqa: E731
    S = (np.zeros((d, n)) if score is None
         else np.ascontiguousarray(np.atleast_2d(score).T, dtype=float))
    gb = np.ascontiguousarray(np.atleast_2d(np.asarray(gb, dtype=float)))
    order, bounds, kk = record_plan(rec_steps, n_steps)
    out = np.empty((len(order), d))
    status = _kernels.barrier_chain(XT, Z, S, gb, row(score_mult), row(noise_scale),
                                    score is not None, n_steps, order, bounds, out, kk, n_periodic,
                                    np.ascontiguousarray(A, dtype=float).reshape(-1, d - n_periodic),
                                    np.ascontiguousarray(b, dtype=float), float(gamma), float(eps),
                                    MAX_HALVINGS)
    raise_kernel_status(status)
    recorded = None if rec_steps is None else out.reshape(n, kk, d)
    return XT.T.copy(), recorded


def barrier_move_compiled(X, cset: ConstraintSet, gamma, beta, Z, score=None, score_mult=1.0,
                          noise_scale=1.0, eps=RETRACTION_EPS):
    """Compiled equivalent of :func:`barrier_move`."""
    _require_polytope(cset)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    gb = gamma * np.broadcast_to(np.asarray(beta, dtype=float), (n,))
    Z = np.broadcast_to(np.asarray(Z, dtype=float), X.shape)
    out, _ = barrier_chain_compiled(X, Z.T[None], gb[:, None], cset.A, cset.b, gamma, 0, score,
                                    score_mult, noise_scale, eps)
    return out


def barrier_forward_step(x, t, schedule: NoiseSchedule, z, cset: ConstraintSet,
                         eps=RETRACTION_EPS):
    """One forward step: drift ``1/2 beta(t) div g^-1``, noise ``sqrt(beta(t)) g^-1/2 z``."""
    _require_polytope(cset)
    x = np.asarray(x, dtype=float)
    beta = float(schedule.beta(t))
    drift = 0.5 * beta * div_metric_inv(x, cset)
    return grw_step(x, drift, schedule.gamma, np.sqrt(beta) * np.asarray(z), cset, eps)


def barrier_forward_path(x0, schedule: NoiseSchedule, cset: ConstraintSet, rng,
                         eps=RETRACTION_EPS, record=None):
    """Simulate forward chains for a batch ``x0``; returns terminal states.

    ``record(k, X)`` is called after step ``k`` when given.
    """
    _require_polytope(cset)
    X = np.array(np.atleast_2d(x0), dtype=float)
    gamma = schedule.gamma
    for k in range(schedule.N):
        beta = float(schedule.beta(k * gamma))
        Z = rng.standard_normal(X.shape)
        X = barrier_move_compiled(X, cset, gamma, beta, Z, eps=eps)
        if record is not None:
            record(k + 1, X)
    return X


def barrier_backward_drift(x, t, score, cset: ConstraintSet):
    """``1/2 div(g^-1)(x) + g(x)^-1 score`` (before beta scaling)."""
    return 0.5 * div_metric_inv(x, cset) + metric_inv_apply(x, score, cset)


def probability_flow_drift(x, t, score, cset: ConstraintSet):
    """``1/2 div(g^-1)(x) - 1/2 g(x)^-1 score``; deterministic, same marginals."""
    return 0.5 * div_metric_inv(x, cset) - 0.5 * metric_inv_apply(x, score, cset)
