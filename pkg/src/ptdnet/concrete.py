"""Edge scoring network and stretched (hard) binary-concrete gates.

Per layer, an MLP maps endpoint representations to a location ``alpha`` per
edge. Training draws a gate

    s    = sigmoid((log eps - log(1 - eps) + alpha) / tau),   eps ~ U(0, 1)
    sbar = s * (zeta - gamma) + gamma
    z    = min(1, max(sbar, 0))

so ``z`` hits exactly 0 or 1 with positive probability. The expected number
of non-zero gates has the closed form used by :func:`reg_c`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class HCConfig:
    tau: float = 0.5
    gamma: float = -0.1
    zeta: float = 1.1
    hidden_width: int = 32
    anneal: bool = False
    init_bias: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (self.gamma < 0 and self.zeta > 1):
            raise ConfigError(f"need gamma < 0 < 1 < zeta, got ({self.gamma}, {self.zeta})")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")

    @property
    def zero_threshold(self) -> float:
        """``tau * log(-gamma / zeta)``: the location at which P(z = 0) is one half."""
        return self.tau * math.log(-self.gamma / self.zeta)


def annealed_tau(epoch: int, total_epochs: int, start: float = 1.0, end: float = 0.05) -> float:
    """Exponential temperature schedule from ``start`` to ``end``."""
    if total_epochs <= 1:
        return end
    frac = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    return start * (end / start) ** frac


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenoiserParams:
    """One-hidden-layer MLP ``[h_u || h_v] -> alpha`` for a single GNN layer."""

    def __init__(self, in_width: int, hidden_width: int, rng=None, init_bias: float = 0.0,
                 weights=None):
        self.in_width = in_width
        if weights is not None:
            w1, b1, w2, b2 = weights
        else:
            rng = np.random.default_rng(rng)
            w1 = _glorot(rng, 2 * in_width, hidden_width)
            b1 = np.zeros((1, hidden_width))
            w2 = _glorot(rng, hidden_width, 1)
            b2 = np.full((1, 1), float(init_bias))
        self.w1 = Tensor(w1, requires_grad=True, name="den.w1")
        self.b1 = Tensor(b1, requires_grad=True, name="den.b1")
        self.w2 = Tensor(w2, requires_grad=True, name="den.w2")
        self.b2 = Tensor(b2, requires_grad=True, name="den.b2")
        if self.w1.rows != 2 * in_width:
            raise DimensionError(f"w1 has {self.w1.rows} rows, expected {2 * in_width}")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def mlp(self, x: Tensor) -> Tensor:
        hidden = ad.relu(ad.add_row(x @ self.w1, self.b1))
        return ad.add_row(hidden @ self.w2, self.b2)


def score_edges(params: DenoiserParams, h: Tensor, edges) -> Tensor:
    """Symmetrised location per edge, shape (E, 1).

    ``alpha(u, v) = (mlp(h_u || h_v) + mlp(h_v || h_u)) / 2``.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if h.cols != params.in_width:
        raise DimensionError(f"denoiser expects width {params.in_width}, got {h.cols}")
    hu = ad.gather_rows(h, edges[:, 0])
    hv = ad.gather_rows(h, edges[:, 1])
    fwd = params.mlp(ad.concat_cols([hu, hv]))
    rev = params.mlp(ad.concat_cols([hv, hu]))
    return ad.scale(fwd + rev, 0.5)


def draw_uniform(rng, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1); exact zeros are redrawn."""
    eps = rng.random(shape)
    bad = eps == 0.0
    while bad.any():
        eps[bad] = rng.random(int(bad.sum()))
        bad = eps == 0.0
    return eps


def _logit(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps <= 0) or np.any(eps >= 1):
        raise DomainError("uniform noise must lie strictly inside (0, 1)")
    return np.log(eps) - np.log1p(-eps)


def _stretch_clip(s: Tensor, cfg: HCConfig) -> Tensor:
    return ad.clip01(ad.shift(ad.scale(s, cfg.zeta - cfg.gamma), cfg.gamma))


def sample_gate(alpha: Tensor, cfg: HCConfig, eps, tau: float | None = None) -> Tensor:
    """Reparameterised hard-concrete sample for each entry of ``alpha``."""
    tau = cfg.tau if tau is None else tau
    noise = _logit(eps).reshape(alpha.shape)
    s = ad.sigmoid(ad.scale(ad.add(alpha, Tensor(noise)), 1.0 / tau))
    return _stretch_clip(s, cfg)


def deterministic_mask(alpha: Tensor, cfg: HCConfig, tau: float | None = None) -> Tensor:
    """Noise-free gate used at inference: :func:`sample_gate` at ``eps = 1/2``."""
    tau = cfg.tau if tau is None else tau
    return _stretch_clip(ad.sigmoid(ad.scale(alpha, 1.0 / tau)), cfg)


def keep_probability(alpha: Tensor, cfg: HCConfig, tau: float | None = None) -> Tensor:
    """``P(z > 0) = 1 - sigmoid(tau * log(-gamma/zeta) - alpha)``, written as a single sigmoid."""
    tau = cfg.tau if tau is None else tau
    return ad.sigmoid(ad.shift(alpha, -tau * math.log(-cfg.gamma / cfg.zeta)))


def reg_c(alphas, cfg: HCConfig, tau: float | None = None) -> Tensor:
    """Expected number of non-zero gates summed over layers and edges."""
    terms = [ad.total(keep_probability(a, cfg, tau)) for a in alphas]
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def cdf_stretched(x, alpha, cfg: HCConfig, tau: float | None = None):
    """CDF of the stretched sample ``sbar`` at ``x`` in (gamma, zeta)."""
    tau = cfg.tau if tau is None else tau
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= cfg.gamma) or np.any(x >= cfg.zeta):
        raise DomainError(f"x must lie in ({cfg.gamma}, {cfg.zeta})")
    arg = (np.log(x - cfg.gamma) - np.log(cfg.zeta - x)) * tau - np.asarray(alpha, dtype=np.float64)
    return ad.sigmoid_np(np.atleast_1d(arg)).reshape(np.shape(arg))


def stretched_samples(alpha, cfg: HCConfig, eps, tau: float | None = None) -> np.ndarray:
    """Unclipped ``sbar`` draws, numpy only (test and diagnostic helper)."""
    tau = cfg.tau if tau is None else tau
    s = ad.sigmoid_np((_logit(eps) + alpha) / tau)
    return s * (cfg.zeta - cfg.gamma) + cfg.gamma
