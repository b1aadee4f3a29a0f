"""Task heads (node classification, inner-product link decoder) and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .graph import Graph


def node_cls_loss(logits: Tensor, labels, nodes):
    """Mean softmax cross-entropy on ``nodes`` and the argmax accuracy there."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ContractError("node set is empty")
    loss = ad.softmax_xent(logits, labels, nodes)
    return loss, accuracy(logits.data, labels, nodes)


def accuracy(logits: np.ndarray, labels, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ContractError("node set is empty")
    pred = np.argmax(logits[nodes], axis=1)
    return float(np.mean(pred == np.asarray(labels)[nodes]))


def link_logits(h: Tensor, pairs) -> Tensor:
    """Raw inner products ``h_u . h_v`` per pair, shape (P, 1)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return ad.rowwise_dot(ad.gather_rows(h, pairs[:, 0]), ad.gather_rows(h, pairs[:, 1]))


def link_decode(h: Tensor, pairs) -> Tensor:
    """Edge probabilities ``sigmoid(h_u . h_v)``."""
    return ad.sigmoid(link_logits(h, pairs))


def link_loss(h: Tensor, pos_pairs, neg_pairs) -> Tensor:
    """Binary cross-entropy over positives and sampled negatives."""
    pairs = np.concatenate([np.asarray(pos_pairs).reshape(-1, 2),
                            np.asarray(neg_pairs).reshape(-1, 2)])
    targets = np.concatenate([np.ones(len(pos_pairs)), np.zeros(len(neg_pairs))])
    return ad.bce_logits(link_logits(h, pairs), targets)


def _check_scores(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractError("need at least one positive and one negative score")
    return pos, neg


def auc(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC: P(pos > neg) with ties counted as one half."""
    pos, neg = _check_scores(scores_pos, scores_neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def average_precision(scores_pos, scores_neg) -> float:
    """Step-wise AP over the descending ranking.

    Ties keep input order, positives listed before negatives.
    """
    pos, neg = _check_scores(scores_pos, scores_neg)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    hits = is_pos[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / pos.size)


# --------------------------------------------------------------------------
# link prediction split

@dataclass(frozen=True)
class LinkPredSetup:
    train_graph: Graph
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray

    @property
    def train_pos(self) -> np.ndarray:
        return self.train_graph.edges


def sample_non_edges(n: int, forbidden: set, count: int, rng, exclude=()) -> np.ndarray:
    """``count`` distinct unordered pairs (u < v) absent from ``forbidden``."""
    out: list[tuple[int, int]] = []
    taken = set(exclude)
    while len(out) < count:
        uv = rng.integers(0, n, size=(2 * (count - len(out)) + 16, 2))
        for u, v in uv.tolist():
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key in forbidden or key in taken:
                continue
            taken.add(key)
            out.append(key)
            if len(out) == count:
                break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def split_edges(g: Graph, rng, test_frac: float = 0.10, val_frac: float = 0.05) -> LinkPredSetup:
    """Hold out test/val positives and draw equally many fixed negatives."""
    rng = np.random.default_rng(rng)
    perm = rng.permutation(g.num_edges)
    n_test = int(np.floor(test_frac * g.num_edges))
    n_val = int(np.floor(val_frac * g.num_edges))
    test_pos = g.edges[np.sort(perm[:n_test])]
    val_pos = g.edges[np.sort(perm[n_test:n_test + n_val])]
    train = g.edges[np.sort(perm[n_test + n_val:])]
    all_edges = set(map(tuple, g.edges.tolist()))
    test_neg = sample_non_edges(g.n, all_edges, n_test, rng)
    val_neg = sample_non_edges(g.n, all_edges, n_val, rng, exclude=map(tuple, test_neg.tolist()))
    return LinkPredSetup(g.with_edges(train), val_pos, val_neg, test_pos, test_neg)
