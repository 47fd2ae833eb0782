"""Sine-activated MLP score network with a boundary-vanishing gate.

The score is ``s(t, x) = relu(dist(x) - delta) * NN(t, x)``.  Derivatives are
hand-written: forward-mode tangents give the divergence, and a reverse pass
through the tangent-augmented graph gives parameter gradients of the implicit
score-matching loss ``mean[(t + 1) (1/2 |s|^2 + div s)]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceFailure, EmptyInputError
from .geometry import DomainSpec, as_domain, distance_gradient, slacks
from .schedule import NoiseSchedule


@dataclass
class MlpParams:
    """Dense layers ``[W_1, b_1, ..., W_out, b_out]``; ``W`` has shape ``(out, in)``."""

    weights: list
    biases: list

    @property
    def n_hidden(self):
        return len(self.weights) - 1

    @property
    def width(self):
        return self.weights[0].shape[0] if self.n_hidden else 0

    def arrays(self):
        """Parameter blocks in declared layer order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def shapes(self):
        return [a.shape for a in self.arrays()]

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat, shapes):
        blocks, pos = [], 0
        for shp in shapes:
            size = int(np.prod(shp))
            blocks.append(np.array(flat[pos:pos + size], dtype=float).reshape(shp))
            pos += size
        if pos != len(flat):
            raise ValueError("parameter vector length does not match shapes")
        return cls(blocks[0::2], blocks[1::2])

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return MlpParams([np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def astype(self, dtype):
        return MlpParams([W.astype(dtype) for W in self.weights],
                         [b.astype(dtype) for b in self.biases])


def init_mlp(d_in: int, d_out: int, hidden: int, width: int, rng) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    sizes = [d_in] + [width] * hidden + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _forward(params: MlpParams, U, Udot=None):
    """Run the network on inputs ``U`` (n, d_in), optionally with tangents
    ``Udot`` (K, n, d_in).  Returns outputs, tangent outputs and a cache."""
    a, adot = U, Udot
    cache = []
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ W.T + b
        if adot is not None:
            sz, cz = np.sin(z), np.cos(z)
            zdot = adot @ W.T
            cache.append((a, adot, sz, cz, zdot))
            adot = cz * zdot
            a = sz
        else:
            # inference only; the reverse pass always has tangents
            a = np.sin(z, out=z)
    y = a @ params.weights[-1].T + params.biases[-1]
    ydot = None if adot is None else adot @ params.weights[-1].T
    cache.append((a, adot))
    return y, ydot, cache


def _backward(params: MlpParams, cache, ybar, ydotbar=None):
    """Parameter gradients given adjoints of the outputs and tangent outputs."""
    grads_W = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    a, adot = cache[-1]
    Wo = params.weights[-1]
    gW = ybar.T @ a
    abar = ybar @ Wo
    adotbar = None
    if ydotbar is not None:
        K, n, dout = ydotbar.shape
        gW = gW + ydotbar.reshape(K * n, dout).T @ adot.reshape(K * n, -1)
        adotbar = ydotbar @ Wo
    grads_W[-1] = gW
    grads_b[-1] = ybar.sum(axis=0)
    for layer in range(len(params.weights) - 2, -1, -1):
        W = params.weights[layer]
        a_prev, adot_prev, sz, cz, zdot = cache[layer]
        zbar = abar * cz
        if adotbar is not None:
            zbar = zbar - np.sum(adotbar * zdot, axis=0) * sz
            zdotbar = adotbar * cz
            K, n, w = zdotbar.shape
            gW = zbar.T @ a_prev + zdotbar.reshape(K * n, w).T @ adot_prev.reshape(K * n, -1)
            adotbar = zdotbar @ W
        else:
            gW = zbar.T @ a_prev
        grads_W[layer] = gW
        grads_b[layer] = zbar.sum(axis=0)
        abar = zbar @ W
    return MlpParams(grads_W, grads_b)


def mlp_forward(params: MlpParams, t, x, T: float = 1.0):
    """Plain network output on the input ``(x, t / T)``."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    tt = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:1])
    U = np.concatenate([X, (tt / T)[:, None]], axis=1)
    y, _, _ = _forward(params, U)
    return y[0] if x.ndim == 1 else y


@dataclass
class ScoreModel:
    """Network parameters plus the gate threshold ``delta`` and the domain.

    Periodic coordinates are fed to the network as ``(cos, sin)`` pairs.
    """

    params: MlpParams
    domain: DomainSpec
    delta: float = 0.01
    T: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.domain = as_domain(self.domain)
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def dim(self):
        return self.domain.dimension

    @property
    def dtype(self):
        return self.params.weights[0].dtype

    def astype(self, dtype):
        """Copy whose network runs in ``dtype``."""
        return ScoreModel(self.params.astype(dtype), self.domain, self.delta, self.T,
                          dict(self.meta))

    @property
    def input_dim(self):
        return self.domain.constrained_dims + 2 * self.domain.periodic_dims + 1

    @classmethod
    def init(cls, domain, rng, hidden=6, width=512, delta=0.01, T=1.0):
        domain = as_domain(domain)
        d_in = domain.constrained_dims + 2 * domain.periodic_dims + 1
        params = init_mlp(d_in, domain.dimension, hidden, width, rng)
        return cls(params, domain, delta, T)

    # -- inputs ------------------------------------------------------------

    def features(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        dc = self.domain.constrained_dims
        tt = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:1])
        parts = [X[:, :dc]]
        if self.domain.periodic_dims:
            th = X[:, dc:]
            parts += [np.cos(th), np.sin(th)]
        parts.append((tt / self.T)[:, None])
        return np.concatenate(parts, axis=1).astype(self.dtype, copy=False)

    def feature_tangents(self, X, V):
        """Directional derivatives of :meth:`features` along ``V`` (K, n, d)."""
        X = np.atleast_2d(X)
        K, n, _ = V.shape
        dc = self.domain.constrained_dims
        p = self.domain.periodic_dims
        out = np.zeros((K, n, self.input_dim), dtype=self.dtype)
        out[..., :dc] = V[..., :dc]
        if p:
            th = X[:, dc:]
            out[..., dc:dc + p] = -np.sin(th) * V[..., dc:]
            out[..., dc + p:dc + 2 * p] = np.cos(th) * V[..., dc:]
        return out

    def gate(self, X):
        """``relu(dist - delta)`` and its gradient (zero on the collar)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape
        cset = self.domain.constrained
        if cset is None or cset.n_constraints == 0:
            return np.ones(n), np.zeros((n, d))
        dc = self.domain.constrained_dims
        xc = X[:, :dc]
        dist = np.min(slacks(xc, cset), axis=-1)
        rho = np.maximum(dist - self.delta, 0.0)
        grad = np.zeros((n, d))
        open_ = rho > 0
        if np.any(open_):
            grad[open_, :dc] = distance_gradient(xc[open_], cset)
        return rho, grad


def _probe_directions(n, d, rng=None, n_probes=None):
    if rng is None:
        return np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)), 1.0
    V = rng.choice([-1.0, 1.0], size=(n_probes, n, d))
    return V, 1.0 / n_probes


def score_eval(model: ScoreModel, t, x):
    """Gated score ``relu(dist(x) - delta) * NN(t, x)``."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    y, _, _ = _forward(model.params, model.features(t, X))
    rho, _ = model.gate(X)
    out = rho[:, None] * y.astype(float)
    return out[0] if x.ndim == 1 else out


def score_jacobian(model: ScoreModel, t, x):
    """``J[..., i, j] = d s_i / d x_j`` by forward-mode passes."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    n, d = X.shape
    V, _ = _probe_directions(n, d)
    y, ydot, _ = _forward(model.params, model.features(t, X), model.feature_tangents(X, V))
    rho, grho = model.gate(X)
    J = rho[:, None, None] * np.moveaxis(ydot, 0, 2) + y[:, :, None] * grho[:, None, :]
    return J[0] if x.ndim == 1 else J


def divergence(model: ScoreModel, t, x, rng=None, n_probes=1):
    """``div s(t, x)``.

    Exact (one forward-mode pass per coordinate) by default; with ``rng`` a
    Hutchinson estimate with ``n_probes`` Rademacher probes.
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    n, d = X.shape
    V, w = _probe_directions(n, d, rng, n_probes)
    y, ydot, _ = _forward(model.params, model.features(t, X), model.feature_tangents(X, V))
    rho, grho = model.gate(X)
    trace = w * np.einsum("knd,knd->n", V, ydot)
    out = np.sum(grho * y, axis=1) + rho * trace
    return out[0] if x.ndim == 1 else out


def ism_weight(t):
    return np.asarray(t, dtype=float) + 1.0


def ism_loss(model: ScoreModel, times, states, rng=None, n_probes=1):
    """Batch mean of ``(t + 1) (1/2 |s|^2 + div s)``."""
    loss, _ = ism_loss_and_grad(model, times, states, rng, n_probes, need_grad=False)
    return loss


def ism_loss_gradient(model: ScoreModel, times, states, rng=None, n_probes=1):
    return ism_loss_and_grad(model, times, states, rng, n_probes)[1]


def ism_loss_and_grad(model: ScoreModel, times, states, rng=None, n_probes=1,
                      need_grad=True):
    """Loss and its gradient with respect to every network parameter."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    n, d = X.shape
    if n == 0:
        raise EmptyInputError("ism_loss needs a nonempty batch")
    t = np.broadcast_to(np.asarray(times, dtype=float), (n,))
    V, w = _probe_directions(n, d, rng, n_probes)
    y, ydot, cache = _forward(model.params, model.features(t, X), model.feature_tangents(X, V))
    rho, grho = model.gate(X)
    rho, grho = rho.astype(model.dtype), grho.astype(model.dtype)
    V = V.astype(model.dtype)
    lam = (ism_weight(t) / n).astype(model.dtype)
    trace = w * np.einsum("knd,knd->n", V, ydot)
    per = 0.5 * rho ** 2 * np.sum(y * y, axis=1) + np.sum(grho * y, axis=1) + rho * trace
    loss = float(np.sum(lam * per))
    if not need_grad:
        return loss, None
    ybar = lam[:, None] * (rho[:, None] ** 2 * y + grho)
    ydotbar = (w * lam * rho)[None, :, None] * V
    return loss, _backward(model.params, cache, ybar, ydotbar)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and architecture settings.

    ``n_probes = 0`` selects the exact divergence; a positive value uses that
    many Rademacher probes.  ``compute_dtype`` is the precision of the network
    passes; parameters and Adam moments are always kept in float64.
    ``sim_block`` iterations' worth of forward trajectories are simulated per
    call.
    """

    batch_size: int = 256
    total_iters: int = 100_000
    peak_lr: float = 2e-4
    warmup_iters: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden: int = 6
    width: int = 512
    delta: float = 0.01
    slices: int = 4
    n_probes: int = 0
    compute_dtype: str = "float32"
    sim_block: int = 16

    def __post_init__(self):
        positive = ["batch_size", "peak_lr", "adam_eps", "hidden", "width", "slices", "sim_block"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_iters < 0 or self.warmup_iters < 0 or self.n_probes < 0 or self.delta < 0:
            raise ConfigError("iteration counts, n_probes and delta must be non-negative")
        if self.total_iters > 0 and not self.warmup_iters < self.total_iters:
            raise ConfigError("warmup_iters must be smaller than total_iters")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        if self.compute_dtype not in ("float32", "float64"):
            raise ConfigError("compute_dtype must be float32 or float64")

    @classmethod
    def desk(cls, **overrides):
        """Reduced profile: 3 x 128 network, 20k iterations."""
        base = dict(hidden=3, width=128, total_iters=20_000)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = cls.__dataclass_fields__
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        return cls(**doc)


def learning_rate(it, config: TrainConfig):
    """Linear warm-up to ``peak_lr`` then cosine decay to 0 at ``total_iters``."""
    peak, warm, total = config.peak_lr, config.warmup_iters, config.total_iters
    if it <= warm:
        return peak * it / warm if warm > 0 else peak
    if it >= total:
        return 0.0
    return 0.5 * peak * (1.0 + math.cos(math.pi * (it - warm) / (total - warm)))


class Adam:
    """Adam with bias correction over the blocks of an :class:`MlpParams`."""

    def __init__(self, params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a, dtype=float) for a in params.arrays()]
        self.v = [np.zeros_like(a, dtype=float) for a in params.arrays()]
        self.t = 0

    def step(self, params: MlpParams, grads: MlpParams, lr: float):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            g = g.astype(float, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(dataset, domain, schedule: NoiseSchedule, method: str, config: TrainConfig,
          callback=None, model: ScoreModel | None = None) -> ScoreModel:
    """Fit a score model by implicit score matching on forward-noised data.

    Each iteration draws ``batch_size`` data points, harvests ``slices``
    stratified time slices from one forward trajectory per point and takes an
    Adam step.  ``callback(it, loss, lr)`` is called after every iteration.
    Raises :class:`DivergenceFailure` on a non-finite loss.
    """
    from .sampling import check_method, forward_slices

    domain = as_domain(domain)
    check_method(method, domain)
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    if data.shape[0] == 0:
        raise EmptyInputError("training needs a nonempty dataset")
    if data.shape[1] != domain.dimension:
        raise ConfigError(f"dataset has {data.shape[1]} coordinates, domain has {domain.dimension}")
    init_seq, run_seq = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        model = ScoreModel.init(domain, np.random.default_rng(init_seq), config.hidden,
                                config.width, config.delta, schedule.T)
    model.meta.update({"method": method, "domain_hash": domain.hash(),
                       "schedule": schedule.to_dict(), "config": config.to_dict(),
                       "iteration": 0})
    rng = np.random.default_rng(run_seq)
    opt = Adam(model.params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    dtype = np.dtype(config.compute_dtype)
    n, bs, k = data.shape[0], config.batch_size, config.slices
    pairs = bs * k
    pool = None
    for it in range(config.total_iters):
        j = it % config.sim_block
        if j == 0:
            count = min(config.sim_block, config.total_iters - it)
            idx = rng.integers(0, n, size=count * bs)
            pool = forward_slices(data[idx], method, domain, schedule, k, rng)
        times = pool.times[j * pairs:(j + 1) * pairs]
        states = pool.states[j * pairs:(j + 1) * pairs]
        work = ScoreModel(model.params.astype(dtype), domain, model.delta, model.T)
        probe_rng = rng if config.n_probes else None
        loss, grads = ism_loss_and_grad(work, times, states, probe_rng, max(config.n_probes, 1))
        if not math.isfinite(loss):
            raise DivergenceFailure(it, loss)
        lr = learning_rate(it, config)
        opt.step(model.params, grads, lr)
        model.meta["iteration"] = it + 1
        if callback is not None:
            callback(it, loss, lr)
    return model
