r"""Covariance of infinitely wide fully connected ReLU networks.

For inputs :math:`x, y \in \mathbb{R}^{d_{in}}` the recursion is

.. math::

    K^0(x, y) = \sigma_b^2 + \sigma_w^2 \, x^\top y / d_{in}, \qquad
    K^l(x, y) = \sigma_b^2 + \sigma_w^2 \, F(K^{l-1}(x, x), K^{l-1}(x, y), K^{l-1}(y, y)),

where for ReLU the expectation has the closed (arc-cosine) form

.. math::

    F(k_{xx}, k_{xy}, k_{yy}) = \frac{\sqrt{k_{xx} k_{yy}}}{2\pi}
        \left[\sin\theta + (\pi - \theta)\cos\theta\right], \qquad
    \theta = \arccos\frac{k_{xy}}{\sqrt{k_{xx} k_{yy}}}.

The Monte Carlo routines sample finite-width networks and serve as an
independent check of the closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError

MAX_DEPTH = 64
COS_SLACK = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """Weight variance ``sigma_w2``, bias variance ``sigma_b2`` and depth."""

    sigma_w2: float = 1.6
    sigma_b2: float = 0.1
    depth: int = 10

    def __post_init__(self):
        if not (self.sigma_w2 > 0 and math.isfinite(self.sigma_w2)):
            raise DataError(f"sigma_w2 must be positive, got {self.sigma_w2}")
        if not (self.sigma_b2 >= 0 and math.isfinite(self.sigma_b2)):
            raise DataError(f"sigma_b2 must be nonnegative, got {self.sigma_b2}")
        if int(self.depth) != self.depth or not 1 <= self.depth <= MAX_DEPTH:
            raise DataError(f"depth must be an integer in 1..{MAX_DEPTH}, got {self.depth}")


def _pair(x, y, d_in=None):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DataError(f"input length mismatch: {x.size} vs {y.size}")
    if d_in is not None and x.size != d_in:
        raise DataError(f"inputs have length {x.size}, expected d_in={d_in}")
    return x, y


def k0(x, y, params: KernelParams, d_in: int | None = None) -> float:
    """Input-layer covariance ``sigma_b2 + sigma_w2 * <x, y> / d_in``."""
    x, y = _pair(x, y, d_in)
    return params.sigma_b2 + params.sigma_w2 * float(np.dot(x, y)) / x.size


def relu_f(k_tt, k_ts, k_ss):
    """Closed-form E[relu(u) relu(v)] for (u, v) ~ N(0, [[k_tt, k_ts], [k_ts, k_ss]]).

    Vectorized over array arguments. Raises on nonpositive variances or a
    correlation outside [-1, 1] by more than 1e-12.
    """
    k_tt = np.asarray(k_tt, dtype=np.float64)
    k_ts = np.asarray(k_ts, dtype=np.float64)
    k_ss = np.asarray(k_ss, dtype=np.float64)
    if np.any(k_tt <= 0) or np.any(k_ss <= 0):
        raise NumericalError("relu_f needs strictly positive variances")
    norm = np.sqrt(k_tt * k_ss)
    rho = k_ts / norm
    if np.any(np.abs(rho) > 1.0 + COS_SLACK):
        raise NumericalError(f"correlation {np.max(np.abs(rho))!r} exceeds 1")
    out = _relu_expect(norm, np.clip(rho, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def _relu_expect(norm, rho):
    # sin(arccos rho) == sqrt(1 - rho^2)
    theta = np.arccos(rho)
    return norm * (np.sqrt(1.0 - rho * rho) + (np.pi - theta) * rho) / (2.0 * np.pi)


def _layers(kxx, kxy, kyy, params: KernelParams, keep=False):
    """Run the depth recursion on broadcastable arrays of layer-0 values."""
    sw, sb = params.sigma_w2, params.sigma_b2
    history = [(kxx, kxy, kyy)] if keep else None
    for _ in range(params.depth):
        norm = np.sqrt(kxx * kyy)
        rho = np.clip(kxy / norm, -1.0, 1.0)
        kxy = sb + sw * _relu_expect(norm, rho)
        # relu halves the second moment on the diagonal
        kxx = sb + sw * 0.5 * kxx
        kyy = sb + sw * 0.5 * kyy
        if keep:
            history.append((kxx, kxy, kyy))
    return history if keep else (kxx, kxy, kyy)


def layer_values(x, y, params: KernelParams, d_in: int | None = None):
    """Per-layer ``(K^l(x,x), K^l(x,y), K^l(y,y))`` for l = 0..depth."""
    x, y = _pair(x, y, d_in)
    n = x.size
    base = (params.sigma_b2 + params.sigma_w2 * float(x @ x) / n,
            params.sigma_b2 + params.sigma_w2 * float(x @ y) / n,
            params.sigma_b2 + params.sigma_w2 * float(y @ y) / n)
    _check_positive(base[0], base[2])
    return [tuple(float(v) for v in t) for t in _layers(*base, params, keep=True)]


def _check_positive(*diags):
    for d in diags:
        if np.any(np.asarray(d) <= 0):
            raise NumericalError("zero input-layer variance (zero input with sigma_b2 = 0)")


def kernel_value(x, y, params: KernelParams, d_in: int | None = None) -> float:
    return layer_values(x, y, params, d_in)[-1][1]


def kernel_from_gram(gram, params: KernelParams):
    """Kernel matrix from the (n, n) matrix of scaled inner products ``X X^T / d_in``.

    Only the upper triangle is pushed through the recursion.
    """
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    sb, sw = params.sigma_b2, params.sigma_w2
    diag = sb + sw * np.diag(gram)
    _check_positive(diag)
    iu, ju = np.triu_indices(n)
    kxy = sb + sw * gram[iu, ju]
    scale = sw / (2.0 * np.pi)
    for _ in range(params.depth):
        norm = np.sqrt(diag)
        norm = norm[iu] * norm[ju]
        rho = np.divide(kxy, norm, out=kxy)
        np.clip(rho, -1.0, 1.0, out=rho)
        acc = np.arccos(rho)
        np.subtract(np.pi, acc, out=acc)
        acc *= rho
        np.multiply(rho, rho, out=rho)
        np.subtract(1.0, rho, out=rho)
        np.sqrt(rho, out=rho)
        acc += rho
        acc *= norm
        acc *= scale
        acc += sb
        kxy = acc
        diag = sb + sw * 0.5 * diag
    k = np.empty((n, n))
    k[iu, ju] = kxy
    k[ju, iu] = kxy
    k[np.diag_indices(n)] = diag
    return k


def kernel_cross_from_gram(cross, diag_a, diag_b, params: KernelParams):
    """Kernel block between two input sets given their scaled inner products.

    ``cross`` is (na, nb); ``diag_a``/``diag_b`` are the squared norms / d_in.
    Returns ``(K_ab, K_aa_diag, K_bb_diag)``.
    """
    sb, sw = params.sigma_b2, params.sigma_w2
    da = sb + sw * np.asarray(diag_a, dtype=np.float64)
    db = sb + sw * np.asarray(diag_b, dtype=np.float64)
    _check_positive(da, db)
    kxx, kxy, kyy = _layers(da[:, None], sb + sw * np.asarray(cross, dtype=np.float64),
                            db[None, :], params)
    return kxy, kxx[:, 0], kyy[0, :]


def kernel_matrix(xs, params: KernelParams) -> np.ndarray:
    """Symmetric (n, n) kernel matrix for a list of equal-length inputs."""
    xs = _stack(xs)
    return kernel_from_gram(xs @ xs.T / xs.shape[1], params)


def kernel_cross(xs, ys, params: KernelParams) -> np.ndarray:
    xs, ys = _stack(xs), _stack(ys)
    if xs.shape[1] != ys.shape[1]:
        raise DataError(f"input length mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    d = xs.shape[1]
    kxy, _, _ = kernel_cross_from_gram(xs @ ys.T / d, np.einsum("ij,ij->i", xs, xs) / d,
                                       np.einsum("ij,ij->i", ys, ys) / d, params)
    return kxy


def kernel_diag(xs, params: KernelParams) -> np.ndarray:
    xs = _stack(xs)
    k = params.sigma_b2 + params.sigma_w2 * np.einsum("ij,ij->i", xs, xs) / xs.shape[1]
    _check_positive(k)
    for _ in range(params.depth):
        k = params.sigma_b2 + params.sigma_w2 * 0.5 * k
    return k


def _stack(xs):
    try:
        a = np.asarray(xs, dtype=np.float64)
    except ValueError as exc:
        raise DataError("inputs have inconsistent lengths") from exc
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] == 0:
        raise DataError("inputs must be a list of equal-length nonempty vectors")
    return a


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one Monte Carlo sample.

    The Philox key is the seed and the top counter word is the sample index,
    so streams never overlap and any subset of samples can be drawn alone.
    """
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(index)]))


def _one_network(base, params: KernelParams, width: int, rng: np.random.Generator):
    """Per-layer second moments of one sampled finite-width network.

    Pre-activations of every layer are conditionally Gaussian given the
    previous layer's activations, with covariance set by their 2x2 Gram
    matrix, so each layer is drawn exactly from ``2 * width`` normals.
    The output-layer product is averaged over output units in closed form.
    """
    sb, sw = params.sigma_b2, params.sigma_w2
    cxx, cxy, cyy = base
    out = np.empty(params.depth)
    for l in range(params.depth):
        e = rng.standard_normal((2, width))
        a = math.sqrt(cxx)
        b = cxy / a
        c = math.sqrt(max(cyy - b * b, 0.0))
        zx = a * e[0]
        zy = b * e[0] + c * e[1]
        np.maximum(zx, 0.0, out=zx)
        np.maximum(zy, 0.0, out=zy)
        cxx = sb + sw * float(zx @ zx) / width
        cxy = sb + sw * float(zx @ zy) / width
        cyy = sb + sw * float(zy @ zy) / width
        out[l] = cxy
    return out


def mc_layer_estimates(x, y, params: KernelParams, width: int, samples: int, seed: int):
    """Monte Carlo means and standard errors of K^l(x, y) for l = 1..depth.

    Returns two arrays of length ``depth``.
    """
    x, y = _pair(x, y)
    if width < 1:
        raise DataError("width must be >= 1")
    if samples < 2:
        raise DataError("need at least 2 samples")
    n = x.size
    base = (params.sigma_b2 + params.sigma_w2 * float(x @ x) / n,
            params.sigma_b2 + params.sigma_w2 * float(x @ y) / n,
            params.sigma_b2 + params.sigma_w2 * float(y @ y) / n)
    _check_positive(base[0], base[2])
    draws = np.empty((samples, params.depth))
    for s in range(samples):
        draws[s] = _one_network(base, params, width, sample_rng(seed, s))
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(samples)
    return mean, se


def mc_kernel_estimate(x, y, params: KernelParams, width: int, samples: int, seed: int):
    """Finite-width Monte Carlo estimate of ``kernel_value(x, y)``.

    Returns ``(mean, standard_error)``; deterministic for a given seed.
    """
    mean, se = mc_layer_estimates(x, y, params, width, samples, seed)
    return float(mean[-1]), float(se[-1])
