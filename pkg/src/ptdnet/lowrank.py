"""Ky Fan K-norm penalty with a power-iteration gradient path.

The forward value comes from the leading singular structure of ``A`` (found
with a detached decomposition). Gradients flow through an unrolled power
iteration with deflation on ``B = A^T A``, started from those detached
vectors, so the backward pass never divides by singular-value gaps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericalError

log = logging.getLogger(__name__)

MAX_NODES = 3000


@dataclass(frozen=True)
class SpectralConfig:
    k: int = 4
    pi_iters: int = 20
    pi_tol: float = 1e-7
    max_nodes: int = MAX_NODES

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if self.pi_iters < 1:
            raise ConfigError("pi_iters must be >= 1")


@dataclass
class SpectralResult:
    singular_values: np.ndarray      # power-iteration estimates, sorted descending
    vectors: np.ndarray              # (n, K) converged eigenvectors of A^T A
    detached_values: np.ndarray      # leading singular values from the detached solve
    iterations: list


def _as_array(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def svd_values(a):
    """All singular values (descending) and right singular vectors as rows of ``vt``.

    Works on detached data; the result never joins a tape.
    """
    arr = _as_array(a)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"svd_values expects a square matrix, got {arr.shape}")
    try:
        _, s, vt = np.linalg.svd(arr)
    except np.linalg.LinAlgError as exc:
        finite = bool(np.all(np.isfinite(arr)))
        raise NumericalError(f"SVD did not converge (finite entries: {finite}, "
                             f"max |a|: {np.abs(arr).max():.3e})") from exc
    return s, vt


def leading_right_vectors(a, k: int):
    """Top-k singular values and right singular vectors (as columns) of ``a``.

    Large symmetric inputs go through a Lanczos solve on ``a`` itself, whose
    eigenvectors are the right singular vectors; everything else uses a dense
    SVD. The Lanczos start vector is fixed so results are reproducible.
    """
    arr = _as_array(a)
    n = arr.shape[1]
    if not np.any(arr):
        return np.zeros(k), np.eye(n)[:, :k]
    if n > 300 and 3 * k < n and np.array_equal(arr, arr.T):
        v0 = np.random.default_rng(12345).standard_normal(n)
        try:
            vals, vecs = scipy.sparse.linalg.eigsh(arr, k=k, which="LM", v0=v0)
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise NumericalError(f"Lanczos did not converge for k={k}") from exc
        order = np.argsort(-np.abs(vals), kind="stable")
        return np.abs(vals[order]), vecs[:, order]
    s, vt = svd_values(arr)
    return s[:k], vt[:k].T


def kyfan_pi(a: Tensor, cfg: SpectralConfig, init=None):
    """Sum of the K leading singular values of ``a``, differentiable through PI.

    Returns ``(value, SpectralResult)``. ``value`` is a 1x1 tensor on the
    active tape.
    """
    n = a.cols
    if cfg.k > n:
        raise ContractError(f"K={cfg.k} exceeds matrix size {n}")
    if n > cfg.max_nodes:
        raise ContractError(f"low-rank penalty limited to {cfg.max_nodes} nodes, got {n}")
    if init is None:
        detached, init = leading_right_vectors(a, cfg.k)
    else:
        detached = np.full(cfg.k, np.nan)
    b = ad.transpose(a) @ a
    value = None
    estimates, vectors, iters = [], [], []
    for i in range(cfg.k):
        v = Tensor(init[:, i:i + 1])
        steps = 0
        for steps in range(1, cfg.pi_iters + 1):
            w = b @ v
            norm = ad.sqrt(ad.total(w * w))
            if norm.item() <= 1e-300:
                break
            v_next = ad.div_scalar(w, norm)
            delta = float(np.linalg.norm(v_next.data - v.data))
            v = v_next
            if delta < cfg.pi_tol:
                break
        iters.append(steps)
        rayleigh = (ad.transpose(v) @ (b @ v)) / (ad.transpose(v) @ v)
        if rayleigh.item() <= 0.0:
            if rayleigh.item() < -1e-10:
                log.warning("Rayleigh quotient %.3e < 0 for component %d; clamped to 0",
                            rayleigh.item(), i)
            lam = Tensor(0.0)
        else:
            lam = ad.sqrt(rayleigh)
        term = ad.absolute(lam)
        value = term if value is None else value + term
        estimates.append(lam.item())
        vectors.append(v.data[:, 0])
        # deflation: B <- B - (B v) v^T
        b = b - (b @ v) @ ad.transpose(v)
    result = SpectralResult(np.sort(np.array(estimates))[::-1], np.stack(vectors, axis=1),
                            np.asarray(detached), iters)
    return value, result


def nuclear_norm(a) -> float:
    return float(svd_values(a)[0].sum())


@dataclass(frozen=True)
class GapBound:
    nuclear: float         # R: sum of all singular values
    kyfan: float           # R~: sum of the K largest
    gap_bound: float       # (n - K) * sigma_{K+1}
    upper: float           # ceil(n / K) * R~

    @property
    def gap(self) -> float:
        return self.nuclear - self.kyfan


def gap_bound_check(a, k: int, rtol: float = 1e-12) -> GapBound:
    """Exact nuclear and Ky Fan norms with both sandwich bounds; raises if violated."""
    s, _ = svd_values(a)
    n = s.size
    if not 1 <= k <= n:
        raise ContractError(f"K must lie in [1, {n}]")
    nuc = float(s.sum())
    kf = float(s[:k].sum())
    nxt = float(abs(s[k])) if k < n else 0.0
    res = GapBound(nuc, kf, (n - k) * nxt, math.ceil(n / k) * kf)
    slack = rtol * max(1.0, nuc)
    if not (kf <= nuc + slack and nuc <= res.upper + slack and res.gap <= res.gap_bound + slack):
        raise NumericalError(f"Ky Fan bounds violated: {res}")
    return res


def svd_gradient_coupling(singular_values) -> np.ndarray:
    """Matrix ``1 / (s_i^2 - s_j^2)`` (zero diagonal) that direct SVD backprop needs.

    Diagnostic only: near-degenerate spectra make entries blow up, which is
    why the training path never differentiates through the SVD.
    """
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    diff = s2[:, None] - s2[None, :]
    with np.errstate(divide="ignore"):
        m = np.where(np.eye(s2.size, dtype=bool), 0.0, 1.0 / diff)
    return m


def exact_kyfan(a, k: int) -> float:
    return float(scipy.linalg.svdvals(_as_array(a))[:k].sum())
