"""Truncated polynomial bases on the normalized band [-1, 1] and Gauss-Legendre quadrature.

All frequencies handled here are normalized, ``w = omega / wc``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigError, NumericFailure

BASIS_KINDS = ("chebyshev", "legendre", "monomial")
DEFAULT_NQ = 256


@dataclass(frozen=True)
class BasisSpec:
    """Basis family, truncation order ``m`` (functions 0..m), cutoff and node count."""

    kind: str = "chebyshev"
    order: int = 13
    wc: float = 1.0
    n_q: int = DEFAULT_NQ

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"unknown basis kind {self.kind!r}; expected one of {BASIS_KINDS}")
        if int(self.order) != self.order or self.order < 0:
            raise ConfigError(f"basis order must be a non-negative integer, got {self.order}")
        if not self.wc > 0:
            raise ConfigError(f"cutoff wc must be positive, got {self.wc}")
        # products of two basis functions have degree 2m; leave headroom for the
        # rational factors coming from G and its gradients
        min_nq = 2 * (self.order + 1) + 2 * self.order
        if self.n_q < min_nq:
            raise ConfigError(f"n_q={self.n_q} too small for order {self.order}; need >= {min_nq}")

    @property
    def size(self):
        return self.order + 1


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.nodes)


def eval_basis(spec, w):
    """Evaluate w_0..w_m at normalized frequency ``w``.

    ``w`` may be a scalar or an array; the basis index is the trailing axis.
    """
    w = np.asarray(w, dtype=float)
    if np.any(np.abs(w) > 1.0 + 1e-12):
        raise ConfigError("basis evaluated outside the normalized band [-1, 1]")
    m = spec.order
    out = np.empty(w.shape + (m + 1,))
    out[..., 0] = 1.0
    if m == 0:
        return out
    out[..., 1] = w
    if spec.kind == "chebyshev":
        for k in range(1, m):
            out[..., k + 1] = 2.0 * w * out[..., k] - out[..., k - 1]
    elif spec.kind == "legendre":
        for k in range(1, m):
            out[..., k + 1] = ((2 * k + 1) * w * out[..., k] - k * out[..., k - 1]) / (k + 1)
    else:
        for k in range(1, m):
            out[..., k + 1] = w * out[..., k]
    return out


def build_W(spec, w, r):
    """Return ``W(w) = [w_0 I_r, w_1 I_r, ..., w_m I_r]`` (shape ``(..., r, r(m+1))``)."""
    b = eval_basis(spec, w)
    eye = np.eye(r)
    W = b[..., None, :, None] * eye[:, None, :]
    return W.reshape(b.shape[:-1] + (r, r * spec.size))


def _legendre_and_derivative(n, x):
    p0 = np.ones_like(x)
    p1 = x.copy()
    for k in range(1, n):
        p0, p1 = p1, ((2 * k + 1) * x * p1 - k * p0) / (k + 1)
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


@lru_cache(maxsize=32)
def _gauss_legendre(n_q):
    if n_q == 1:
        return np.array([0.0]), np.array([2.0])
    i = np.arange(1, n_q + 1)
    x = np.cos(np.pi * (i - 0.25) / (n_q + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_derivative(n_q, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) <= 1e-14:
            break
    else:
        raise NumericFailure(f"Gauss-Legendre Newton iteration did not converge for n_q={n_q}")
    _, dp = _legendre_and_derivative(n_q, x)
    wts = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    x, wts = x[order], wts[order]
    x.setflags(write=False)
    wts.setflags(write=False)
    return x, wts


def quadrature(n_q):
    """Gauss-Legendre rule on [-1, 1] with ``n_q`` nodes (cached)."""
    if int(n_q) != n_q or n_q < 1:
        raise ConfigError(f"n_q must be a positive integer, got {n_q}")
    nodes, weights = _gauss_legendre(int(n_q))
    return QuadratureRule(nodes, weights)


def integrate_samples(values, rule):
    """Weighted sum over the leading (node) axis of pre-evaluated samples."""
    values = np.asarray(values)
    if values.shape[0] != len(rule):
        raise ConfigError(f"expected {len(rule)} node samples, got {values.shape[0]}")
    return np.tensordot(rule.weights, values, axes=(0, 0))


def integrate_matrix(f, rule):
    """Integrate a matrix-valued function of normalized frequency over [-1, 1]."""
    samples = [np.asarray(f(x)) for x in rule.nodes]
    shape = samples[0].shape
    for s in samples:
        if s.shape != shape:
            raise ConfigError(f"integrand shape changed across nodes: {shape} vs {s.shape}")
    return integrate_samples(np.stack(samples), rule)


def gram(spec, rule=None):
    """Half the flat-weight Gram matrix of the scalar basis, ``0.5 * int b b^T``."""
    rule = rule or quadrature(spec.n_q)
    b = eval_basis(spec, rule.nodes)
    return 0.5 * np.einsum("q,qi,qj->ij", rule.weights, b, b)
