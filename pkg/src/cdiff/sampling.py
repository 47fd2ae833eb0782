"""Uniform reference samplers, forward noising, and generative reversal."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .barrier import barrier_chain_compiled
from .errors import (
    InfeasiblePointError,
    ModelDomainMismatchError,
    UnsupportedDomainError,
)
from .geometry import (
    ConstraintSet,
    DomainSpec,
    as_domain,
    bounding_box,
    distance_to_boundary,
    interior_point,
    ray_distances,
)
from .reflected import (
    TWO_PI,
    constraint_arrays,
    reflect_chain_compiled,
    reflect_domain_batch,
)
from .schedule import NoiseSchedule

METHODS = ("barrier", "reflected")
HIT_AND_RUN_BURN_IN = 200
SAMPLE_CHUNK = 4096
FORWARD_BLOCK = 2 ** 20  # noise values drawn per block of rows


@dataclass
class TrajectorySlices:
    """Training pairs ``(t, X_t)`` harvested from forward trajectories."""

    times: np.ndarray
    states: np.ndarray
    origin_index: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.origin_index)):
            raise ValueError("slice fields must have equal lengths")

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class LowTempConfig:
    """``lambda0 >= 1`` sharpens towards ``p0 ** lambda0``; ``psi`` is the corrector strength."""

    lambda0: float = 1.0
    psi: float = 0.0

    def __post_init__(self):
        if not self.lambda0 >= 1:
            raise ValueError("lambda0 must be >= 1")
        if not self.psi >= 0:
            raise ValueError("psi must be >= 0")


def lowtemp_lambda(lowtemp: LowTempConfig, schedule: NoiseSchedule, t):
    """``lambda_t = lambda0 / (alpha_t + (1 - alpha_t) lambda0)``."""
    a = schedule.alpha(t)
    return lowtemp.lambda0 / (a + (1.0 - a) * lowtemp.lambda0)


def score_multiplier(lowtemp: LowTempConfig, schedule: NoiseSchedule, t):
    """Factor applied to the score in the reversal: ``lambda_t + lambda0 psi / 2``."""
    return lowtemp_lambda(lowtemp, schedule, t) + 0.5 * lowtemp.lambda0 * lowtemp.psi


def check_method(method: str, domain: DomainSpec):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "barrier" and domain.constrained is not None and not domain.constrained.linear_only:
        raise UnsupportedDomainError("the barrier method needs a linear-only constraint set")


# ---------------------------------------------------------------------------
# Uniform reference
# ---------------------------------------------------------------------------

def _unit_directions(rng, n, d):
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def hit_and_run(cset: ConstraintSet, x0, n_steps: int, rng):
    """Hit-and-run chains started at ``x0`` (a point or a batch)."""
    x0 = np.asarray(x0, dtype=float)
    X = np.array(np.atleast_2d(x0))
    distance_to_boundary(X, cset)
    n, d = X.shape
    for _ in range(n_steps):
        u = _unit_directions(rng, n, d)
        t_fwd = ray_distances(X, u, cset).min(axis=1)
        t_bwd = ray_distances(X, -u, cset).min(axis=1)
        if not (np.all(np.isfinite(t_fwd)) and np.all(np.isfinite(t_bwd))):
            raise UnsupportedDomainError("hit-and-run needs a bounded set")
        X = X + (rng.uniform(size=n) * (t_fwd + t_bwd) - t_bwd)[:, None] * u
    return X[0] if x0.ndim == 1 else X


def _ball_only(cset: ConstraintSet):
    return cset.n_linear == 0 and len(cset.spheres) == 1


def uniform_ball(center, radius, n, rng):
    """Exact uniform draws from a ball: direction times ``radius * U^(1/d)``."""
    d = len(center)
    r = radius * rng.uniform(size=n) ** (1.0 / d)
    return center + r[:, None] * _unit_directions(rng, n, d)


def uniform_reference(domain, n: int, rng, burn_in: int = HIT_AND_RUN_BURN_IN):
    """``n`` approximately uniform points on the domain.

    The constrained block uses independent hit-and-run chains from an
    interior point (exact radial draws for a single ball); periodic
    coordinates are uniform on ``[0, 2 pi)``.
    """
    domain = as_domain(domain)
    out = np.empty((n, domain.dimension))
    dc = domain.constrained_dims
    if dc:
        cset = domain.constrained
        if _ball_only(cset):
            out[:, :dc] = uniform_ball(cset.centers[0], cset.radii[0], n, rng)
        else:
            lo, hi = bounding_box(cset)
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise UnsupportedDomainError("uniform reference needs a bounded domain")
            x0 = np.broadcast_to(interior_point(cset), (n, dc))
            out[:, :dc] = hit_and_run(cset, x0, burn_in, rng)
    if domain.periodic_dims:
        out[:, dc:] = rng.uniform(0.0, TWO_PI, size=(n, domain.periodic_dims))
    return out


def rejection_uniform(cset: ConstraintSet, n: int, rng, batch: int = 65536):
    """Exact uniform draws by rejection from the bounding box."""
    lo, hi = bounding_box(cset)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnsupportedDomainError("rejection sampling needs a bounded set")
    chunks, have = [], 0
    while have < n:
        X = rng.uniform(lo, hi, size=(batch, cset.dimension))
        X = X[cset.contains(X)]
        chunks.append(X)
        have += len(X)
    return np.concatenate(chunks)[:n]


# ---------------------------------------------------------------------------
# Chains on a product domain
# ---------------------------------------------------------------------------

def domain_move(X, method, domain: DomainSpec, gamma, beta, Z, score=None,
                score_mult=1.0, noise_scale=1.0):
    """One step of either noising process on a product domain.

    The move is ``gamma beta score_mult * drift + sqrt(gamma beta) noise_scale``
    noise; for the barrier method the constrained block uses the Hessian
    metric, and periodic coordinates always move in the flat metric.
    """
    n = X.shape[0]
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (n,))
    score_mult = np.broadcast_to(np.asarray(score_mult, dtype=float), (n,))
    gb = gamma * beta
    if method == "reflected":
        V = (np.sqrt(gb) * noise_scale)[:, None] * Z
        if score is not None:
            V = V + (gb * score_mult)[:, None] * score
        out, _ = reflect_domain_batch(X, V, domain)
        return out
    A, b, _, _ = constraint_arrays(domain)
    out, _ = barrier_chain_compiled(X, Z.T[None], gb[:, None], A, b, gamma, domain.periodic_dims,
                                    score, score_mult, noise_scale)
    return out


def forward_chain(X0, method, domain, schedule: NoiseSchedule, rng, n_steps=None, record=None):
    """Run the forward noising process from ``X0``; returns the final states.

    ``record(k, X)`` is called after each step ``k``.
    """
    domain = as_domain(domain)
    check_method(method, domain)
    X = np.array(np.atleast_2d(X0), dtype=float)
    gamma = schedule.gamma
    n_steps = schedule.N if n_steps is None else n_steps
    for k in range(n_steps):
        beta = float(schedule.beta(k * gamma))
        X = domain_move(X, method, domain, gamma, beta, rng.standard_normal(X.shape))
        if record is not None:
            record(k + 1, X)
    return X


def stratified_steps(n, k, schedule: NoiseSchedule, rng):
    """Step indices ``(n, k)``; slot ``j`` is uniform in the ``j``-th of ``k`` equal time strata."""
    edges = np.arange(k) * schedule.T / k
    t = edges + rng.uniform(size=(n, k)) * schedule.T / k
    return np.clip(np.ceil(t / schedule.gamma - 1e-9).astype(np.int64), 1, schedule.N)


def forward_record(data, method, domain, schedule: NoiseSchedule, steps, rng):
    """States of one compiled forward trajectory per row of ``data``.

    ``steps`` has shape ``(n, k)`` with non-decreasing 1-based step indices
    per row; returns an array ``(n, k, d)`` of the recorded states.
    """
    domain = as_domain(domain)
    check_method(method, domain)
    data = np.ascontiguousarray(np.atleast_2d(data), dtype=float)
    steps = np.ascontiguousarray(np.atleast_2d(steps), dtype=np.int64)
    n, d = data.shape
    if steps.shape[0] != n:
        raise ValueError("one row of step indices per data point")
    if np.any(np.diff(steps, axis=1) < 0) or np.any(steps < 1) or np.any(steps > schedule.N):
        raise ValueError("step indices must be non-decreasing within 1..N")
    out = np.empty((n, steps.shape[1], d))
    gamma = schedule.gamma
    gb = gamma * np.broadcast_to(schedule.beta(np.arange(schedule.N) * gamma), (schedule.N,))
    A, b, _, _ = constraint_arrays(domain)
    rows = max(1, FORWARD_BLOCK // (int(steps[:, -1].max()) * d))
    for lo in range(0, n, rows):
        hi = min(lo + rows, n)
        last = int(steps[lo:hi, -1].max())
        Z = rng.standard_normal((last, d, hi - lo))
        if method == "reflected":
            _, out[lo:hi], _ = reflect_chain_compiled(data[lo:hi], Z, np.sqrt(gb[:last]), domain,
                                                      rec_steps=steps[lo:hi])
        else:
            _, out[lo:hi] = barrier_chain_compiled(data[lo:hi], Z, gb[:last], A, b, gamma,
                                                   domain.periodic_dims, rec_steps=steps[lo:hi])
    return out


def forward_slices(data, method, domain, schedule: NoiseSchedule, k: int, rng):
    """Harvest ``k`` stratified time slices from one forward trajectory per data point."""
    domain = as_domain(domain)
    check_method(method, domain)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.all(domain.contains(data)):
        raise InfeasiblePointError("training data must lie strictly inside the domain")
    steps = stratified_steps(n, k, schedule, rng)
    states = forward_record(data, method, domain, schedule, steps, rng)
    return TrajectorySlices((steps * schedule.gamma).ravel(), states.reshape(n * k, d),
                            np.repeat(np.arange(n), k))


# ---------------------------------------------------------------------------
# Reversal
# ---------------------------------------------------------------------------

def reverse_chain(score_fn, method, domain, schedule: NoiseSchedule, X0, rng,
                  lowtemp: LowTempConfig = LowTempConfig(), t_stop: float = 0.0):
    """Integrate the time-reversed process from ``X0``.

    ``score_fn(tau, X)`` returns the score at forward time ``tau``.  Step
    ``k`` uses forward time ``T - k gamma``; the chain stops at forward time
    ``t_stop``.
    """
    domain = as_domain(domain)
    check_method(method, domain)
    X = np.array(np.atleast_2d(X0), dtype=float)
    gamma = schedule.gamma
    n_steps = int(round((schedule.T - t_stop) / gamma))
    noise = np.sqrt(1.0 + lowtemp.psi)
    for k in range(n_steps):
        tau = schedule.T - k * gamma
        S = score_fn(tau, X)
        mult = float(score_multiplier(lowtemp, schedule, tau))
        X = domain_move(X, method, domain, gamma, float(schedule.beta(tau)),
                        rng.standard_normal(X.shape), score=S, score_mult=mult, noise_scale=noise)
    return X


def _chunk_seeds(rng, n, chunk):
    base = int(rng.integers(2 ** 63))
    starts = list(range(0, n, chunk))
    return [(s, min(s + chunk, n), np.random.SeedSequence([base, i])) for i, s in enumerate(starts)]


def backward_sample(model, method, domain, schedule: NoiseSchedule, n: int,
                    lowtemp: LowTempConfig = LowTempConfig(), rng=None, workers: int = 1,
                    chunk: int = SAMPLE_CHUNK, compute_dtype="float32"):
    """Draw ``n`` samples from a trained model by reversing the noising process.

    Samples are produced in fixed chunks with seeds derived from ``rng`` and
    the chunk index, so results do not depend on ``workers``.  The network
    is evaluated in ``compute_dtype``.
    """
    from .score import score_eval

    domain = as_domain(domain)
    expected = model.meta.get("domain_hash")
    if expected is not None and expected != domain.hash():
        raise ModelDomainMismatchError("model was trained on a different domain")
    if model.domain.hash() != domain.hash():
        raise ModelDomainMismatchError("model domain does not match the sampling domain")
    check_method(method, domain)
    rng = np.random.default_rng() if rng is None else rng
    out = np.empty((n, domain.dimension))
    net = model.astype(np.dtype(compute_dtype))

    def run(job):
        lo, hi, seq = job
        r = np.random.default_rng(seq)
        X0 = uniform_reference(domain, hi - lo, r)
        out[lo:hi] = reverse_chain(lambda tau, X: score_eval(net, tau, X), method, domain,
                                   schedule, X0, r, lowtemp)

    jobs = _chunk_seeds(rng, n, chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    return out


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mixture:
    """Weights and centres of a wrapped-normal mixture with isotropic variance ``sigma2``."""

    centers: tuple
    weights: tuple
    sigma2: float = 0.25

    def to_dict(self):
        return {"centers": [list(map(float, c)) for c in self.centers],
                "weights": list(map(float, self.weights)), "sigma2": float(self.sigma2)}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(tuple(c) for c in doc["centers"]), tuple(doc["weights"]),
                   float(doc.get("sigma2", 0.25)))


def default_mixture(domain: DomainSpec) -> Mixture:
    """Two-component mixtures used for the hypercube and simplex benchmarks;
    a single narrow component at an interior point otherwise."""
    d = domain.dimension
    if domain.name == "hypercube" and domain.periodic_dims == 0:
        return Mixture((tuple([0.5] * d), tuple([-0.5] * d)), (0.7, 0.3), 0.25)
    if domain.name == "simplex" and domain.periodic_dims == 0:
        c1 = np.full(d, 0.2 / d)
        c2 = c1.copy()
        c1[0] += 0.6
        c2[-1] += 0.6
        return Mixture((tuple(c1), tuple(c2)), (0.7, 0.3), 0.01)
    x = np.zeros(d)
    if domain.constrained is not None:
        x[:domain.constrained_dims] = interior_point(domain.constrained)
    x[domain.constrained_dims:] = np.pi
    return Mixture((tuple(x),), (1.0,), 0.01)


def make_synthetic_dataset(domain, mixture: Mixture, n: int, rng, return_labels=False):
    """Wrapped-normal mixture: ``ReflectedStep(center, v)`` with ``v ~ N(0, sigma2 I)``."""
    domain = as_domain(domain)
    centers = np.atleast_2d(np.asarray(mixture.centers, dtype=float))
    w = np.asarray(mixture.weights, dtype=float)
    w = w / w.sum()
    if centers.shape[1] != domain.dimension:
        raise ValueError("mixture centres do not match the domain dimension")
    if not np.all(domain.contains(centers)):
        raise InfeasiblePointError("mixture centres must lie strictly inside the domain")
    labels = rng.choice(len(w), size=n, p=w)
    V = np.sqrt(mixture.sigma2) * rng.standard_normal((n, domain.dimension))
    X, _ = reflect_domain_batch(centers[labels], V, domain)
    return (X, labels) if return_labels else X
