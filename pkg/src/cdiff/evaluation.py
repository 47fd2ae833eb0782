"""Sample-quality metrics and analytic oracles.

Includes the unbiased MMD^2 U-statistic with an RBF kernel, the reflected
(Neumann) heat kernel on the unit interval with its score and CDF, and plain
histogram emitters.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import ndtr

from .errors import InsufficientSamplesError

MEDIAN_MAX_POINTS = 2000
BANDWIDTH_FLOOR = 1e-6
MMD_BLOCK = 2048
HEAT_TERMS = 200
IMAGES_BELOW = 0.25  # the cosine series cancels badly in the tails at small t


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel ``exp(-|x - y|^2 / (2 sigma^2))``; ``bandwidth`` is a
    positive number or ``"median-heuristic"``."""

    kind: str = "rbf"
    bandwidth: float | str = "median-heuristic"

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median-heuristic":
                raise ValueError("bandwidth must be positive or 'median-heuristic'")
        elif not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def resolve(self, X, Y) -> float:
        """Concrete bandwidth for the pair ``(X, Y)``."""
        if isinstance(self.bandwidth, str):
            return median_heuristic_bandwidth(np.concatenate([_as_samples(X), _as_samples(Y)]))
        return float(self.bandwidth)

    def to_dict(self, sigma=None):
        out = {"kind": self.kind, "bandwidth": self.bandwidth}
        if sigma is not None:
            out["sigma"] = float(sigma)
        return out


def _as_samples(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def median_heuristic_bandwidth(Z, max_points: int = MEDIAN_MAX_POINTS) -> float:
    """Median pairwise distance over a stride subsample, floored at ``1e-6``."""
    Z = _as_samples(Z)
    if len(Z) < 2:
        raise InsufficientSamplesError("median heuristic needs at least two points")
    stride = max(1, math.ceil(len(Z) / max_points))
    sub = Z[::stride][:max_points]
    return max(float(np.median(pdist(sub))), BANDWIDTH_FLOOR)


def _kernel_sum(X, Y, sigma, block=MMD_BLOCK, same=False):
    """``sum_ij k(x_i, y_j)``, dropping the diagonal when ``same``."""
    total = 0.0
    scale = -0.5 / sigma ** 2
    for i in range(0, len(X), block):
        Xi = X[i:i + block]
        for j in range(0, len(Y), block):
            K = np.exp(scale * cdist(Xi, Y[j:j + block], "sqeuclidean"))
            if same and i == j:
                np.fill_diagonal(K, 0.0)
            total += K.sum()
    return total


def mmd2(X, Y, kernel: KernelSpec = KernelSpec(), return_sigma=False):
    """Unbiased MMD^2 U-statistic between sample sets ``X`` and ``Y``.

    Unequal sizes use each set's own pair count; the value may be slightly
    negative when both sets come from one distribution.
    """
    X, Y = _as_samples(X), _as_samples(Y)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise InsufficientSamplesError("mmd2 needs at least two samples per set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample sets have different dimensions")
    sigma = kernel.resolve(X, Y)
    kxx = _kernel_sum(X, X, sigma, same=True) / (m * (m - 1))
    kyy = _kernel_sum(Y, Y, sigma, same=True) / (n * (n - 1))
    kxy = _kernel_sum(X, Y, sigma) / (m * n)
    value = float(kxx + kyy - 2.0 * kxy)
    return (value, sigma) if return_sigma else value


def mmd2_permutation_null(X, Y, kernel: KernelSpec, n_perm: int, rng):
    """MMD^2 values after random relabelling of the pooled sample."""
    X, Y = _as_samples(X), _as_samples(Y)
    pooled = np.concatenate([X, Y])
    sigma = kernel.resolve(X, Y)
    fixed = KernelSpec(kernel.kind, sigma)
    out = np.empty(n_perm)
    for r in range(n_perm):
        p = rng.permutation(len(pooled))
        out[r] = mmd2(pooled[p[:len(X)]], pooled[p[len(X):]], fixed)
    return out


def metrics_report(X, Y, kernel: KernelSpec = KernelSpec(), seed=None) -> dict:
    value, sigma = mmd2(X, Y, kernel, return_sigma=True)
    return {"mmd2": value, "kernel": kernel.to_dict(sigma), "m": len(X), "n": len(Y),
            "seed": seed}


# ---------------------------------------------------------------------------
# Reflected heat kernel on (0, 1)
# ---------------------------------------------------------------------------
#
# For unit-rate Brownian motion reflected at 0 and 1 the transition density has
# the cosine (Neumann eigenfunction) expansion and, equivalently, the
# method-of-images sum over reflections of a Gaussian with variance t.  The
# cosine series needs ~1/sqrt(t) terms and loses the far tails to cancellation,
# so small times use the images.

def _use_images(t, terms):
    return t < IMAGES_BELOW or terms * terms * math.pi ** 2 * t / 2.0 < 40.0


def _image_shifts(t):
    reach = int(math.ceil((1.0 + 10.0 * math.sqrt(t)) / 2.0)) + 1
    return 2.0 * np.arange(-reach, reach + 1)


def _series_terms(t, terms):
    k = np.arange(1, terms + 1)
    return k, np.exp(-0.5 * (k * math.pi) ** 2 * t)


def reflected_heat_kernel_1d(x, x0, t, terms: int = HEAT_TERMS):
    """``p_t(x | x0) = 1 + 2 sum_k exp(-k^2 pi^2 t / 2) cos(k pi x) cos(k pi x0)``."""
    x = np.asarray(x, dtype=float)
    if not t > 0:
        raise ValueError("t must be positive")
    if _use_images(t, terms):
        shifts = _image_shifts(t)
        u = x[..., None]
        dens = (np.exp(-0.5 * (u - x0 - shifts) ** 2 / t)
                + np.exp(-0.5 * (u + x0 - shifts) ** 2 / t)).sum(-1)
        return dens / math.sqrt(2.0 * math.pi * t)
    k, decay = _series_terms(t, terms)
    w = decay * np.cos(k * math.pi * x0)
    return 1.0 + 2.0 * (np.cos(np.multiply.outer(x, k) * math.pi) * w).sum(-1)


def heat_kernel_grad_1d(x, x0, t, terms: int = HEAT_TERMS):
    """``d/dx p_t(x | x0)``."""
    x = np.asarray(x, dtype=float)
    if _use_images(t, terms):
        shifts = _image_shifts(t)
        u = x[..., None]
        a, b = u - x0 - shifts, u + x0 - shifts
        g = (-a / t * np.exp(-0.5 * a * a / t) - b / t * np.exp(-0.5 * b * b / t)).sum(-1)
        return g / math.sqrt(2.0 * math.pi * t)
    k, decay = _series_terms(t, terms)
    w = decay * np.cos(k * math.pi * x0) * k * math.pi
    return -2.0 * (np.sin(np.multiply.outer(x, k) * math.pi) * w).sum(-1)


def score_1d(x, x0, t, terms: int = HEAT_TERMS):
    """``d/dx log p_t(x | x0)``."""
    return heat_kernel_grad_1d(x, x0, t, terms) / reflected_heat_kernel_1d(x, x0, t, terms)


def heat_kernel_cdf_1d(x, x0, t, terms: int = HEAT_TERMS):
    """``P(X_t <= x | X_0 = x0)`` for ``x`` in ``[0, 1]``."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    if _use_images(t, terms):
        shifts = _image_shifts(t)
        u = x[..., None]
        s = math.sqrt(t)
        F = (ndtr((u - x0 - shifts) / s) - ndtr((-x0 - shifts) / s)
             + ndtr((u + x0 - shifts) / s) - ndtr((x0 - shifts) / s))
        return F.sum(-1)
    k, decay = _series_terms(t, terms)
    w = decay * np.cos(k * math.pi * x0) / (k * math.pi)
    return x + 2.0 * (np.sin(np.multiply.outer(x, k) * math.pi) * w).sum(-1)


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    """Per-coordinate marginals and, for two coordinates, a joint grid."""

    edges: list
    counts: list
    joint: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("coord,bin,left,right,bin2,left2,right2,count\n")
        for c, (e, n) in enumerate(zip(self.edges, self.counts)):
            for i, cnt in enumerate(n):
                buf.write(f"x{c},{i},{e[i]!r},{e[i + 1]!r},,,,{int(cnt)}\n")
        if self.joint is not None:
            e0, e1 = self.edges
            for i in range(self.joint.shape[0]):
                for j in range(self.joint.shape[1]):
                    buf.write(f"x0:x1,{i},{e0[i]!r},{e0[i + 1]!r},{j},{e1[j]!r},{e1[j + 1]!r},"
                              f"{int(self.joint[i, j])}\n")
        return buf.getvalue()


def histogram(X, bins: int, ranges) -> Histogram:
    """Marginal histograms with ``bins`` equal bins on each ``ranges[c] = (lo, hi)``.

    Samples outside a range are clipped into the end bins so every marginal
    sums to ``len(X)``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    X = _as_samples(X)
    d = X.shape[1]
    ranges = np.broadcast_to(np.asarray(ranges, dtype=float), (d, 2))
    edges, counts, idx = [], [], []
    for c in range(d):
        lo, hi = ranges[c]
        e = np.linspace(lo, hi, bins + 1)
        i = np.clip(np.floor((X[:, c] - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
        edges.append(e)
        counts.append(np.bincount(i, minlength=bins))
        idx.append(i)
    joint = None
    if d == 2:
        joint = np.zeros((bins, bins), dtype=np.int64)
        np.add.at(joint, (idx[0], idx[1]), 1)
    return Histogram(edges, counts, joint)
