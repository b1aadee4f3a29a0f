"""GCN backbone operating on per-layer gated adjacencies."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


def masked_adjacency(edges, gates: Tensor | None, n: int) -> Tensor:
    """Symmetric ``A * Z + I``: gate values on edges, ones on the diagonal.

    ``gates=None`` means every edge has weight one.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if gates is None:
        gates = Tensor(np.ones((len(edges), 1)))
    return ad.scatter_symmetric(gates, edges[:, 0], edges[:, 1], n, diag=1.0)


def normalize(adj: Tensor) -> Tensor:
    """``D^{-1/2} adj D^{-1/2}`` with D the row sums of ``adj``.

    ``adj`` must carry its self-loops so every degree is at least one.
    """
    if adj.rows != adj.cols:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    d_inv_sqrt = ad.power(ad.row_sum(adj), -0.5)
    return ad.scale_cols(ad.scale_rows(adj, d_inv_sqrt), d_inv_sqrt)


class GCNParams:
    def __init__(self, widths: Sequence[int], rng=None, weights=None):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        if weights is None:
            rng = np.random.default_rng(rng)
            weights = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self.weights = [Tensor(w, requires_grad=True, name=f"gcn.w{i}")
                        for i, w in enumerate(weights)]
        for i, w in enumerate(self.weights):
            if w.shape != (widths[i], widths[i + 1]):
                raise DimensionError(f"layer {i} weight {w.shape} does not match widths")

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return list(self.weights)


MaskSource = Callable[[int, Tensor], "Tensor | None"]


def forward(params: GCNParams, features: Tensor, edges, n: int,
            masks: "Sequence[Tensor | None] | MaskSource | None" = None,
            dropout: float = 0.0, rng=None, capture: list | None = None) -> Tensor:
    """Stack of ``H <- relu(norm(A * Z_l + I) @ H @ W_l)``; the last layer is linear.

    ``masks`` is a per-layer list of gate tensors (None entries mean ungated)
    or a callable ``(layer, H_prev) -> gates`` so that gates can depend on the
    layer input. Dropout (train-time only, inverted) acts on hidden layers.
    When ``capture`` is a list, each layer's normalized adjacency is appended.
    """
    if features.cols != params.widths[0]:
        raise DimensionError(f"features have {features.cols} columns, expected {params.widths[0]}")
    h = features
    for layer, w in enumerate(params.weights):
        if masks is None:
            gates = None
        elif callable(masks):
            gates = masks(layer, h)
        else:
            gates = masks[layer]
        a_hat = normalize(masked_adjacency(edges, gates, n))
        if capture is not None:
            capture.append(a_hat)
        inp = h
        if layer > 0 and dropout > 0.0 and rng is not None:
            keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            inp = h * Tensor(keep)
        h = a_hat @ (inp @ w)
        if layer < params.depth - 1:
            h = ad.relu(h)
    return h
