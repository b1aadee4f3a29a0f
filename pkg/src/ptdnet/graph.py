"""Graph container, text I/O, synthetic generation and edge noise injection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, RangeError

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


def canonical_edges(pairs, n: int | None = None) -> tuple[np.ndarray, int]:
    """Sort each pair to (min, max), drop self-loops and duplicates.

    Returns the (E, 2) int64 array in lexicographic order and the number of
    self-loops that were discarded.
    """
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if n is not None and arr.size and (arr.min() < 0 or arr.max() >= n):
        bad = arr[(arr < 0).any(axis=1) | (arr >= n).any(axis=1)][0]
        raise RangeError(f"edge {tuple(bad)} has an endpoint outside [0, {n})")
    loops = arr[:, 0] == arr[:, 1]
    arr = np.sort(arr[~loops], axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2), int(loops.sum())


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with a node split.

    ``edges`` holds each undirected pair once as (u, v) with u < v.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n:
                raise RangeError(f"edge endpoint outside [0, {self.n})")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must satisfy u < v (use canonical_edges)")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate edges")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.n:
            raise ValueError(f"features must be ({self.n}, m), got {feats.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (self.n,):
            raise ValueError(f"labels must have length {self.n}")
        if labels.size and labels.min() < 0:
            raise RangeError("labels must be non-negative")
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        seen = np.zeros(self.n, dtype=bool)
        for name, idx in splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= self.n):
                raise RangeError(f"split {name!r} has an index outside [0, {self.n})")
            if seen[idx].any() or len(np.unique(idx)) != idx.size:
                raise ValueError(f"split {name!r} overlaps another split")
            seen[idx] = True
        for arr in (edges, feats, labels, *splits.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", splits)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def with_edges(self, edges) -> "Graph":
        return replace(self, edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def edge_positive(self) -> np.ndarray:
        """Boolean per edge: True when both endpoints share a label."""
        return self.labels[self.edges[:, 0]] == self.labels[self.edges[:, 1]]

    def incident(self, nodes) -> np.ndarray:
        """Boolean per edge: True when at least one endpoint is in ``nodes``."""
        member = np.zeros(self.n, dtype=bool)
        member[np.asarray(nodes, dtype=np.int64)] = True
        return member[self.edges[:, 0]] | member[self.edges[:, 1]]


@dataclass(frozen=True)
class EdgeLabelStats:
    positive_count: int
    negative_count: int

    @property
    def negative_ratio(self) -> float:
        total = self.positive_count + self.negative_count
        return self.negative_count / total if total else 0.0


def edge_label_stats(g: Graph) -> EdgeLabelStats:
    pos = int(g.edge_positive().sum())
    return EdgeLabelStats(pos, g.num_edges - pos)


# --------------------------------------------------------------------------
# text I/O

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield no, line


def read_edges(path) -> np.ndarray:
    pairs = []
    for no, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(path, no, f"expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, no, f"non-integer endpoint in {line!r}") from None
        pairs.append((u, v))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    rows = []
    for no, line in _data_lines(path):
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError:
            raise ParseError(path, no, "non-numeric feature value") from None
        if len(rows[-1]) != len(rows[0]):
            raise ParseError(path, no, f"expected {len(rows[0])} columns, got {len(rows[-1])}")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    out = []
    for no, line in _data_lines(path):
        try:
            out.append(int(line))
        except ValueError:
            raise ParseError(path, no, f"label must be an integer, got {line!r}") from None
    return np.array(out, dtype=np.int64)


def read_splits(path) -> dict:
    splits = {}
    for no, line in _data_lines(path):
        head, sep, rest = line.partition(":")
        name = head.strip()
        if not sep or name not in SPLIT_NAMES:
            raise ParseError(path, no, f"expected one of train:/val:/test:, got {line!r}")
        try:
            splits[name] = np.array([int(x) for x in rest.split()], dtype=np.int64)
        except ValueError:
            raise ParseError(path, no, "non-integer node index") from None
    for name in SPLIT_NAMES:
        splits.setdefault(name, np.zeros(0, dtype=np.int64))
    return splits


def load_graph(edge_file, feature_file, label_file, split_file=None) -> Graph:
    """Read the four-file text format into a validated :class:`Graph`."""
    features = read_features(feature_file)
    labels = read_labels(label_file)
    n = len(labels)
    if features.size == 0:
        features = np.zeros((n, 0))
    if features.shape[0] != n:
        raise RangeError(f"{feature_file}: {features.shape[0]} feature rows for {n} labels")
    raw = read_edges(edge_file)
    edges, loops = canonical_edges(raw, n)
    if loops:
        log.warning("%s: dropped %d self-loop(s)", edge_file, loops)
    splits = read_splits(split_file) if split_file is not None else {}
    return Graph(n, edges, features, labels, splits)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_graph(g: Graph, out_dir) -> dict:
    """Write edges.txt, features.txt, labels.txt and splits.txt; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.txt" for k in ("edges", "features", "labels", "splits")}
    paths["edges"].write_text("".join(f"{u} {v}\n" for u, v in g.edges), encoding="utf-8")
    paths["features"].write_text(
        "".join(" ".join(_fmt(x) for x in row) + "\n" for row in g.features), encoding="utf-8")
    paths["labels"].write_text("".join(f"{y}\n" for y in g.labels), encoding="utf-8")
    paths["splits"].write_text(
        "".join(f"{name}: " + " ".join(str(i) for i in g.splits.get(name, [])) + "\n"
                for name in SPLIT_NAMES), encoding="utf-8")
    return paths


def load_graph_dir(path) -> Graph:
    p = Path(path)
    return load_graph(p / "edges.txt", p / "features.txt", p / "labels.txt", p / "splits.txt")


# --------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SynthConfig:
    num_labels: int = 5
    feature_dim: int = 30
    feature_variance: float = 80.0
    nodes_per_label_mean: float = 200.0
    nodes_per_label_std: float = 5.0
    target_edges: int = 4945
    noise_strength: float = 0.45
    seed: int = 0

    def validate(self):
        if self.num_labels < 1 or self.feature_dim < 1 or self.target_edges < 0:
            raise ConfigError("num_labels, feature_dim must be positive; target_edges >= 0")
        if self.nodes_per_label_mean <= 0 or self.nodes_per_label_std < 0:
            raise ConfigError("nodes_per_label_mean must be > 0 and std >= 0")
        if self.feature_variance < 0:
            raise ConfigError("feature_variance must be >= 0")
        if not 0 <= self.noise_strength <= 1:
            raise ConfigError("noise_strength must lie in [0, 1]")


def stratified_split(labels, rng, fractions=(0.6, 0.2, 0.2)) -> dict:
    """Per-class random split; every class with >= 1 node lands in train."""
    labels = np.asarray(labels)
    parts = {name: [] for name in SPLIT_NAMES}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = max(1, int(round(fractions[0] * idx.size)))
        n_val = int(round(fractions[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in parts.items()}


def feature_quality(features, labels, centroids) -> np.ndarray:
    """Distance of each node to its class centroid, min-max scaled to [0, 1]."""
    d = np.linalg.norm(features - centroids[labels], axis=1)
    span = d.max() - d.min()
    return (d - d.min()) / span if span > 0 else np.zeros_like(d)


def synthesize(cfg: SynthConfig, return_quality: bool = False):
    """Gaussian-cluster features plus a label-aware random edge set.

    Each edge is drawn by picking an endpoint ``u`` uniformly, then a partner
    from a different class with probability ``noise_strength * q(u)`` and
    from the same class otherwise, where ``q`` is :func:`feature_quality`.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    counts = np.maximum(1, np.rint(rng.normal(cfg.nodes_per_label_mean,
                                              cfg.nodes_per_label_std,
                                              size=cfg.num_labels))).astype(np.int64)
    labels = np.repeat(np.arange(cfg.num_labels), counts)
    n = int(labels.size)
    centroids = rng.uniform(0.0, 1.0, size=(cfg.num_labels, cfg.feature_dim))
    features = centroids[labels] + np.sqrt(cfg.feature_variance) * rng.standard_normal(
        (n, cfg.feature_dim))
    q = feature_quality(features, labels, centroids)

    within = int(sum(c * (c - 1) // 2 for c in counts))
    possible = n * (n - 1) // 2 if cfg.noise_strength > 0 and cfg.num_labels > 1 else within
    if cfg.target_edges > possible:
        raise ConfigError(f"target_edges={cfg.target_edges} exceeds {possible} attainable pairs")

    members = [np.flatnonzero(labels == c) for c in range(cfg.num_labels)]
    others = [np.flatnonzero(labels != c) for c in range(cfg.num_labels)]
    seen: set[tuple[int, int]] = set()
    edges = []
    batch = max(1024, cfg.target_edges)
    attempts, max_attempts = 0, 200 * max(cfg.target_edges, 1) + 10_000
    while len(edges) < cfg.target_edges:
        us = rng.integers(0, n, size=batch)
        coins = rng.random(batch)
        picks = rng.random(batch)
        for u, coin, pick in zip(us.tolist(), coins.tolist(), picks.tolist()):
            attempts += 1
            lab = labels[u]
            pool = others[lab] if coin < cfg.noise_strength * q[u] else members[lab]
            if pool.size == 0:
                continue
            v = int(pool[int(pick * pool.size)])
            if v == u:
                continue
            key = (u, v) if u < v else (v, u)
            if key in seen:
                continue
            seen.add(key)
            edges.append(key)
            if len(edges) == cfg.target_edges:
                break
        if attempts > max_attempts:
            raise ConfigError("edge sampling stalled; target_edges too close to the attainable maximum")

    edge_arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    splits = stratified_split(labels, rng)
    g = Graph(n, edge_arr, features, labels, splits)
    return (g, q) if return_quality else g


def calibrate_noise(cfg: SynthConfig, target_positive_ratio: float, seeds=(0,),
                    tol: float = 0.005, max_iter: int = 30) -> float:
    """Bisection over ``noise_strength`` so the mean positive-edge ratio hits a target."""
    def pos_ratio(strength):
        vals = [1.0 - edge_label_stats(synthesize(replace(cfg, noise_strength=strength,
                                                          seed=s))).negative_ratio
                for s in seeds]
        return float(np.mean(vals))

    lo, hi = 0.0, 1.0
    if pos_ratio(hi) > target_positive_ratio:
        raise ConfigError(f"positive ratio {target_positive_ratio} unreachable with noise_strength <= 1")
    mid = 0.5
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = pos_ratio(mid)
        if abs(r - target_positive_ratio) <= tol:
            break
        if r > target_positive_ratio:
            lo = mid
        else:
            hi = mid
    return mid


# --------------------------------------------------------------------------
# noise injection

def inject_noise(g: Graph, count: int, seed) -> Graph:
    """Add exactly ``count`` new edges between previously unlinked pairs."""
    n = g.n
    absent = n * (n - 1) // 2 - g.num_edges
    if count < 0 or count > absent:
        raise RangeError(f"cannot add {count} edges; only {absent} absent pairs")
    if count == 0:
        return g
    rng = np.random.default_rng(seed)
    existing = set(map(tuple, g.edges.tolist()))
    if count > absent // 4:
        iu, iv = np.triu_indices(n, k=1)
        keep = np.ones(iu.size, dtype=bool)
        # position of (u, v) in the row-major upper triangle
        eu, ev = g.edges[:, 0], g.edges[:, 1]
        keep[eu * n - eu * (eu + 1) // 2 + (ev - eu - 1)] = False
        cand = np.flatnonzero(keep)
        chosen = rng.choice(cand, size=count, replace=False)
        new = np.stack([iu[chosen], iv[chosen]], axis=1)
    else:
        added: set[tuple[int, int]] = set()
        while len(added) < count:
            need = count - len(added)
            uv = rng.integers(0, n, size=(2 * need + 16, 2))
            for u, v in uv.tolist():
                if u == v:
                    continue
                key = (u, v) if u < v else (v, u)
                if key in existing or key in added:
                    continue
                added.add(key)
                if len(added) == count:
                    break
        new = np.array(sorted(added), dtype=np.int64)
    edges, _ = canonical_edges(np.concatenate([g.edges, new]), n)
    return g.with_edges(edges)


# --------------------------------------------------------------------------
# communities

def spectral_communities(g: Graph, k: int = 5, seed: int = 0) -> np.ndarray:
    """Community id per node from spectral clustering of the adjacency."""
    from sklearn.cluster import SpectralClustering

    adj = g.adjacency() + np.eye(g.n) * 1e-9
    model = SpectralClustering(n_clusters=k, affinity="precomputed", random_state=seed,
                               assign_labels="kmeans")
    return model.fit_predict(adj).astype(np.int64)


def cross_community_ratio(edges, communities, weights=None) -> float:
    """Share of (weighted) edges whose endpoints lie in different communities."""
    edges = np.asarray(edges).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0
    cross = communities[edges[:, 0]] != communities[edges[:, 1]]
    return float(w[cross].sum() / total)
