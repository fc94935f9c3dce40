"""Hypersphere primitives: normalization, vMF mixture logits, free energy, samplers.

The vMF normalizer C_D(kappa) is never evaluated. It cancels in every softmax
and log-sum-exp used downstream, so only unnormalized exponentials appear here.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyRetainSet, ZeroVector

EPS_NORM = 1e-12
UNIT_TOL = 1e-6


def logsumexp(a, axis=-1, b=None):
    """Max-shifted log-sum-exp along ``axis``; optional nonnegative weights ``b``."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a - m)
    if b is not None:
        e = e * b
    return np.log(np.sum(e, axis=axis)) + np.squeeze(m, axis=axis)


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def normalize(v, eps=EPS_NORM):
    """Project ``v`` (or each row of a 2-D array) onto the unit sphere."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise ZeroVector(f"cannot normalize vector with norm <= {eps:g}")
    return v / norm


def is_unit(v, tol=UNIT_TOL):
    return bool(np.all(np.abs(np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1) - 1.0) <= tol))


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise DimensionMismatch("vMF mean direction must be a vector with D >= 2")
        if not is_unit(mu):
            raise ValueError("vMF mean direction must be unit-norm")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self):
        return self.mu.shape[0]


def class_logit(z, prototypes, kappa, weights):
    """log sum_k w_k exp(kappa * p_k . z) for one class."""
    z = np.asarray(z, dtype=np.float64)
    P = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if P.shape[1] != z.shape[-1]:
        raise DimensionMismatch(f"prototype dim {P.shape[1]} != feature dim {z.shape[-1]}")
    if w.shape != (P.shape[0],):
        raise DimensionMismatch(f"{w.shape[0]} weights for {P.shape[0]} prototypes")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("mixture weights must lie on the simplex")
    return float(logsumexp(kappa * (P @ z), b=w))


def total_free_energy(retained_logits):
    """Negative log-sum-exp of the retained-class logits (low energy = in-distribution)."""
    logits = np.asarray(retained_logits, dtype=np.float64)
    if logits.size == 0:
        raise EmptyRetainSet("free energy needs at least one retained class")
    return -logsumexp(logits)


def _householder_from_e1(mu):
    """Return a callable mapping rows expressed in the e1-frame onto the mu-frame."""
    u = -mu.copy()
    u[0] += 1.0
    nu = u @ u
    if nu < 1e-24:
        return lambda X: X
    return lambda X: X - np.outer(X @ u, u) * (2.0 / nu)


def sample_vmf(params, n, rng_seed):
    """Draw ``n`` samples from vMF(mu, kappa) with Wood's (1994) rejection scheme."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    d = params.dim
    kappa = params.kappa
    # stable form of (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1)
    b = (d - 1) / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + (d - 1) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1) * np.log(1.0 - x0**2)

    w = np.empty(n)
    filled = 0
    while filled < n:
        m = max(16, 2 * (n - filled))
        zb = rng.beta((d - 1) / 2.0, (d - 1) / 2.0, size=m)
        cand = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb)
        u = rng.uniform(size=m)
        ok = kappa * cand + (d - 1) * np.log1p(-x0 * cand) - c >= np.log(u)
        acc = cand[ok][: n - filled]
        w[filled : filled + acc.size] = acc
        filled += acc.size

    v = rng.standard_normal((n, d - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    X = np.empty((n, d))
    X[:, 0] = w
    X[:, 1:] = np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v
    X = _householder_from_e1(params.mu)(X)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def uniform_sphere(d, n, rng_seed):
    """``n`` points uniform on S^{d-1} (normalized isotropic Gaussians)."""
    if d < 2:
        raise DimensionMismatch(f"sphere dimension must be >= 2, got {d}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return normalize(rng.standard_normal((n, d)))
