"""Reflected random walks on constrained domains.

Steps follow straight segments and bounce off linear and spherical faces by
specular reflection.  Periodic coordinates translate and wrap modulo ``2 pi``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .errors import RunawayReflectionError
from .geometry import (
    GRAZING_TOL,
    ConstraintSet,
    DomainSpec,
    as_domain,
    distance_to_boundary,
    normals_at,
    ray_distances,
    reflect_direction,
)
from .schedule import NoiseSchedule

TWO_PI = 2.0 * np.pi
MAX_BOUNCES = 10 ** 6
CORNER_TOL = 1e-12
NUDGE = 1e-12


@dataclass
class ReflectedStepTrace:
    endpoint: np.ndarray
    bounces: int
    path_length_used: float


def _headon(t, X, S, cset: ConstraintSet):
    """``|<s, n>|`` at each candidate hit (for breaking near-ties at corners)."""
    parts = []
    if cset.n_linear:
        parts.append(np.abs(S @ cset.A.T))
    if cset.spheres:
        diff = X[:, None, :] - cset.centers
        p = np.einsum("nd,nkd->nk", S, diff)
        tk = t[:, cset.n_linear:]
        with np.errstate(invalid="ignore"):
            parts.append(np.abs(np.where(np.isfinite(tk), (p + tk) / cset.radii, 0.0)))
    return np.concatenate(parts, axis=1)


def reflect_batch(X, V, cset: ConstraintSet, max_bounces=MAX_BOUNCES):
    """Reflected straight-line moves for a batch in a constrained block.

    Returns ``(endpoints, bounces, lengths_used)``; all arrays have the batch
    as leading axis.
    """
    X = np.array(np.atleast_2d(X), dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = X.shape[0]
    ell = np.linalg.norm(V, axis=1)
    S = np.zeros_like(V)
    moving = ell > 0
    S[moving] = V[moving] / ell[moving, None]
    bounces = np.zeros(n, dtype=np.int64)
    used = np.zeros(n)
    if cset.n_constraints == 0:
        return X + V, bounces, ell.copy()
    active = np.flatnonzero(moving)
    rounds = 0
    while active.size:
        rounds += 1
        if rounds > max_bounces:
            raise RunawayReflectionError(f"more than {max_bounces} reflections in one step")
        x, s, rem = X[active], S[active], ell[active]
        t = ray_distances(x, s, cset)
        tmin = t.min(axis=1)
        near = t <= tmin[:, None] + CORNER_TOL
        if np.any(near.sum(axis=1) > 1):
            score = np.where(near, _headon(t, x, s, cset), -1.0)
            hit = np.argmax(score, axis=1)
            tmin = np.take_along_axis(t, hit[:, None], axis=1)[:, 0]
        else:
            hit = np.argmin(t, axis=1)
        done = rem <= tmin
        alpha = np.where(done, rem, tmin)
        x = x + alpha[:, None] * s
        used[active] += alpha
        X[active] = x
        ref = ~done
        if np.any(ref):
            rows = active[ref]
            nrm = normals_at(hit[ref], x[ref], cset)
            S[rows] = reflect_direction(s[ref], nrm)
            X[rows] = x[ref] - NUDGE * nrm
            bounces[rows] += 1
            ell[rows] = rem[ref] - tmin[ref]
        active = active[ref]
    return X, bounces, used


def constraint_arrays(domain: DomainSpec):
    """Contiguous ``(A, b, centers, radii)`` of the constrained block (empty when absent)."""
    dc = domain.constrained_dims
    cset = domain.constrained
    if cset is None:
        return np.zeros((0, dc)), np.zeros(0), np.zeros((0, dc)), np.zeros(0)
    return (np.ascontiguousarray(cset.A, dtype=float).reshape(cset.n_linear, dc),
            np.ascontiguousarray(cset.b, dtype=float).reshape(cset.n_linear),
            np.ascontiguousarray(cset.centers, dtype=float).reshape(len(cset.spheres), dc),
            np.ascontiguousarray(cset.radii, dtype=float).reshape(len(cset.spheres)))


def record_plan(steps, n_steps):
    """Slot order and per-step bounds for recording states at ``steps`` (``(n, k)``, 1-based)."""
    if steps is None:
        return np.zeros(0, dtype=np.int64), np.zeros(n_steps + 2, dtype=np.int64), 1
    steps = np.atleast_2d(np.asarray(steps, dtype=np.int64))
    flat = steps.ravel()
    order = np.argsort(flat, kind="stable").astype(np.int64)
    bounds = np.searchsorted(flat[order], np.arange(n_steps + 2)).astype(np.int64)
    return order, bounds, steps.shape[1]


def reflect_chain_compiled(X, V, scale, domain, rec_steps=None, max_bounces=MAX_BOUNCES):
    """Run :func:`cdiff._kernels.reflect_chain` on rows ``X`` (``(n, d)``).

    ``V`` is ``(steps, d, n)`` and step ``k`` moves row ``i`` by
    ``scale[k] V[k, :, i]``.  Returns ``(final, recorded, bounces)`` where
    ``recorded`` is ``(n, k, d)`` for ``rec_steps`` of shape ``(n, k)``.
    """
    domain = as_domain(domain)
    XT = np.array(np.atleast_2d(X).T, dtype=float, order="C")  # kernel mutates state
    V = np.ascontiguousarray(V, dtype=float)
    d, n = XT.shape
    n_steps = V.shape[0]
    order, bounds, kk = record_plan(rec_steps, n_steps)
    out = np.empty((len(order), d))
    bounces = np.zeros(n, dtype=np.int64)
    A, b, C, R = constraint_arrays(domain)
    status = _kernels.reflect_chain(XT, V, np.ascontiguousarray(scale, dtype=float), n_steps,
                                    order, bounds, out, kk, domain.periodic_dims, A, b, C, R,
                                    max_bounces, GRAZING_TOL, CORNER_TOL, NUDGE, bounces)
    if status == _kernels.RUNAWAY:
        raise RunawayReflectionError(f"more than {max_bounces} reflections in one step")
    recorded = None if rec_steps is None else out.reshape(n, kk, d)
    return XT.T.copy(), recorded, bounces


def reflect_domain_batch(X, V, domain):
    """Reflected moves on the constrained block plus periodic wrapping.

    Returns ``(endpoints, bounces)``.
    """
    domain = as_domain(domain)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    shape = np.broadcast_shapes(X.shape, V.shape)
    X = np.broadcast_to(X, shape)
    V = np.broadcast_to(V, shape)
    out, _, bounces = reflect_chain_compiled(X, V.T[None], np.ones(1), domain)
    return out, bounces


def reflect_batch_compiled(X, V, cset: ConstraintSet, max_bounces=MAX_BOUNCES):
    """Compiled equivalent of :func:`reflect_batch`; returns ``(endpoints, bounces)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.broadcast_to(np.asarray(V, dtype=float), X.shape)
    out, _, bounces = reflect_chain_compiled(X, V.T[None], np.ones(1), DomainSpec(cset),
                                             max_bounces=max_bounces)
    return out, bounces


def reflected_step(x, v, domain) -> ReflectedStepTrace:
    """Move ``x`` by ``v``, reflecting at constraint surfaces.

    The full arclength ``|v|`` is consumed; periodic coordinates advance by
    their component of ``v`` and wrap.
    """
    domain = as_domain(domain)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    dc = domain.constrained_dims
    if dc:
        distance_to_boundary(x[:dc], domain.constrained)
    total = float(np.linalg.norm(v))
    end = np.empty_like(x)
    bounces, used = 0, total
    if dc:
        e, b, u = reflect_batch(x[None, :dc], v[None, :dc], domain.constrained)
        end[:dc] = e[0]
        bounces = int(b[0])
        vc = np.linalg.norm(v[:dc])
        if vc > 0:
            # Arclength is measured in the full space; the constrained block
            # covers the fraction |v_c| / |v| of it.
            used = float(u[0]) * total / vc
    if domain.periodic_dims:
        end[dc:] = np.mod(x[dc:] + v[dc:], TWO_PI)
    return ReflectedStepTrace(end, bounces, used)


def reflected_random_walk(x0, drift_fn: Callable, schedule: NoiseSchedule, domain, rng):
    """Discretise ``dX = beta b(t, X) dt + sqrt(beta) dB - dk`` by reflected steps.

    ``x0`` may be a point ``(d,)`` or a batch ``(n, d)``; the result stacks the
    ``N + 1`` states along the first axis.
    """
    domain = as_domain(domain)
    x0 = np.asarray(x0, dtype=float)
    X = np.atleast_2d(x0).copy()
    gamma = schedule.gamma
    path = [X.copy()]
    for k in range(schedule.N):
        t = k * gamma
        gb = gamma * float(schedule.beta(t))
        Z = rng.standard_normal(X.shape)
        V = gb * np.atleast_2d(drift_fn(t, X)) + np.sqrt(gb) * Z
        X, _ = reflect_domain_batch(X, V, domain)
        path.append(X.copy())
    path = np.stack(path)
    return path[:, 0] if x0.ndim == 1 else path


def reflected_forward_path(x0, schedule: NoiseSchedule, domain, rng, record=None):
    """Zero-drift forward chains; returns terminal states.

    ``record(k, X)`` is called after step ``k`` when given.
    """
    domain = as_domain(domain)
    X = np.array(np.atleast_2d(x0), dtype=float)
    gamma = schedule.gamma
    for k in range(schedule.N):
        gb = gamma * float(schedule.beta(k * gamma))
        X, _ = reflect_domain_batch(X, np.sqrt(gb) * rng.standard_normal(X.shape), domain)
        if record is not None:
            record(k + 1, X)
    return X


def reflected_backward_step(x, t, score, schedule: NoiseSchedule, domain, rng,
                            score_mult=1.0, noise_scale=1.0):
    """One reversal step at backward time ``t``.

    ``score`` is the model output at forward time ``T - t``; the move is
    ``gamma beta(T-t) score_mult score + sqrt(gamma beta(T-t)) noise_scale Z``.
    """
    domain = as_domain(domain)
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    gb = schedule.gamma * float(schedule.beta(schedule.T - t))
    Z = rng.standard_normal(X.shape)
    V = gb * score_mult * np.atleast_2d(score) + np.sqrt(gb) * noise_scale * Z
    out, _ = reflect_domain_batch(X, V, domain)
    return out[0] if x.ndim == 1 else out
