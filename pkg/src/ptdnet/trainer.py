"""Joint training of the edge denoisers, GCN backbone and both regularisers.

Three modes share one code path:

* ``ptdnet``   learned hard-concrete gates, loss = task + beta1*Rc + beta2*Rlr
* ``plain``    every gate fixed to one
* ``dropedge`` independent Bernoulli(1 - rate) gates while training, full graph at evaluation

Each run owns separate random streams (initialisation, dropout, gates,
DropEdge, negative sampling) derived from the seed, so switching modes never
perturbs the streams the modes have in common.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .concrete import (DenoiserParams, HCConfig, annealed_tau, deterministic_mask, draw_uniform,
                       sample_gate, score_edges)
from .errors import ConfigError, NumericalError
from .gcn import GCNParams, forward
from .graph import Graph, cross_community_ratio
from .lowrank import SpectralConfig, kyfan_pi, leading_right_vectors
from .tasks import LinkPredSetup, auc, average_precision, link_decode, link_loss, node_cls_loss, \
    sample_non_edges

log = logging.getLogger(__name__)

MODES = ("ptdnet", "plain", "dropedge")
TASKS = ("node", "link")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ptdnet"
    task: str = "node"
    beta1: float = 0.05
    beta2: float = 0.05
    lr: float = 0.01
    denoiser_lr: float | None = 0.003
    weight_decay: float = 5e-4
    denoiser_decay: float = 0.0
    denoiser_warmup: int = 50
    max_epochs: int = 500
    patience: int = 50
    fixed_epochs: bool = False
    seed: int = 0
    dropedge_rate: float = 0.3
    layers: int = 2
    hidden: int = 64
    embed: int = 16
    dropout: float = 0.5
    standardize: bool = True
    hc: HCConfig = field(default_factory=HCConfig)
    lowrank: SpectralConfig = field(default_factory=SpectralConfig)
    lowrank_enabled: bool = True
    lowrank_stride: int = 1
    gate_clamp: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta1 and beta2 must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.dropedge_rate <= 1:
            raise ConfigError("dropedge_rate must lie in [0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.layers < 1 or self.hidden < 1 or self.max_epochs < 1:
            raise ConfigError("layers, hidden and max_epochs must be >= 1")
        if self.lowrank_stride < 1:
            raise ConfigError("lowrank_stride must be >= 1")

    @property
    def uses_lowrank(self) -> bool:
        return self.mode == "ptdnet" and self.lowrank_enabled and self.beta2 > 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    task_loss: float
    rc: float
    rlr: float
    train_acc: float
    val_acc: float | None
    val_auc: float | None
    mean_z_pos: float
    mean_z_neg: float
    edges_retained_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8, decay=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay = decay or [0.0] * len(self.params)
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.steps = [0] * len(self.params)
        self.lrs = [lr] * len(self.params)

    def step(self, grads, frozen=()):
        """One update; parameters listed in ``frozen`` (indices) keep value and moments."""
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if i in frozen:
                continue
            self.steps[i] += 1
            c1 = 1.0 - self.b1 ** self.steps[i]
            c2 = 1.0 - self.b2 ** self.steps[i]
            if self.decay[i]:
                g = g + self.decay[i] * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = self.lrs[i] * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.data - update
            new.setflags(write=False)
            p.data = new


def dropedge_mask(num_edges: int, rate: float, rng) -> np.ndarray:
    """Keep each undirected edge independently with probability ``1 - rate``."""
    if not 0 <= rate <= 1:
        raise ConfigError("rate must lie in [0, 1]")
    return (rng.random(num_edges) >= rate).astype(np.float64)


# --------------------------------------------------------------------------
# state

class TrainState:
    """Parameters, optimiser and random streams of one run."""

    def __init__(self, graph: Graph, cfg: TrainConfig, link: LinkPredSetup | None = None,
                 communities=None):
        self.cfg = cfg
        self.full_graph = graph
        self.link = link
        if cfg.task == "link":
            if link is None:
                raise ConfigError("link task needs a LinkPredSetup")
            self.graph = link.train_graph
        else:
            self.graph = graph
            for name in ("train", "val", "test"):
                if graph.splits.get(name) is None or graph.splits[name].size == 0:
                    raise ConfigError(f"node task needs a non-empty {name!r} split")
        self.communities = communities
        self.edges = self.graph.edges
        self.n = self.graph.n
        self.positive = self.graph.edge_positive()

        streams = np.random.SeedSequence(cfg.seed).spawn(6)
        init_rng, den_rng, self.dropout_rng, self.gate_rng, self.dropedge_rng, self.neg_rng = \
            [np.random.default_rng(s) for s in streams]

        x = graph.features
        if cfg.standardize and x.size:
            std = x.std(axis=0)
            x = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
        self.x = Tensor(x)

        out_width = graph.num_classes if cfg.task == "node" else cfg.embed
        widths = [x.shape[1]] + [cfg.hidden] * (cfg.layers - 1) + [out_width]
        self.gcn = GCNParams(widths, rng=init_rng)
        self.denoisers = []
        if cfg.mode == "ptdnet":
            self.denoisers = [DenoiserParams(w, cfg.hc.hidden_width, rng=den_rng,
                                             init_bias=cfg.hc.init_bias)
                              for w in widths[:-1]]
        params = self.parameters()
        decay = [cfg.weight_decay] * len(self.gcn.weights)
        for d in self.denoisers:
            decay += [cfg.denoiser_decay, 0.0, cfg.denoiser_decay, 0.0]
        self.optimizer = Adam(params, lr=cfg.lr, decay=decay)
        den_lr = cfg.lr if cfg.denoiser_lr is None else cfg.denoiser_lr
        self.optimizer.lrs = [cfg.lr] * len(self.gcn.weights) + \
            [den_lr] * (len(params) - len(self.gcn.weights))
        self.epoch = 0
        self._rlr_cache = 0.0
        # Ky Fan norm of the ungated adjacency: R_lr enters the loss as a fraction of it
        self.rlr_scale = 1.0
        if cfg.uses_lowrank and len(self.edges):
            k = min(cfg.lowrank.k, self.n)
            self.rlr_scale = float(leading_right_vectors(self.graph.adjacency(), k)[0].sum())

    def parameters(self) -> list[Tensor]:
        out = self.gcn.parameters()
        for d in self.denoisers:
            out.extend(d.parameters())
        return out

    def denoising(self) -> bool:
        """Whether the gates are live; during warm-up they are held open."""
        return self.cfg.mode == "ptdnet" and self.epoch >= self.cfg.denoiser_warmup

    def tau(self) -> float:
        if self.cfg.hc.anneal:
            return annealed_tau(self.epoch, self.cfg.max_epochs)
        return self.cfg.hc.tau

    def snapshot(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def restore(self, arrays):
        for p, a in zip(self.parameters(), arrays):
            p.data = a

    def alpha(self, layer: int, h: Tensor) -> Tensor:
        if self.cfg.gate_clamp is not None:
            return Tensor(np.full((len(self.edges), 1), float(self.cfg.gate_clamp)))
        return score_edges(self.denoisers[layer], h, self.edges)


# --------------------------------------------------------------------------
# train / evaluate

def _keep_probs(alpha_arr: np.ndarray, cfg: HCConfig, tau: float) -> np.ndarray:
    return ad.sigmoid_np(alpha_arr - tau * math.log(-cfg.gamma / cfg.zeta))


def train_step(state: TrainState) -> EpochRecord:
    """One full-batch Adam update; returns the diagnostics of this epoch."""
    cfg = state.cfg
    tau = state.tau()
    n_edges = len(state.edges)
    alphas: list[Tensor] = []
    gates: list[Tensor] = []

    def ptd_masks(layer, h):
        a = state.alpha(layer, h)
        eps = draw_uniform(state.gate_rng, (n_edges, 1))
        z = sample_gate(a, cfg.hc, eps, tau)
        alphas.append(a)
        gates.append(z)
        return z

    if cfg.mode == "ptdnet":
        masks = ptd_masks if state.denoising() else None
    elif cfg.mode == "dropedge":
        masks = []
        for _ in range(cfg.layers):
            z = Tensor(dropedge_mask(n_edges, cfg.dropedge_rate, state.dropedge_rng)[:, None])
            masks.append(z)
            gates.append(z)
    else:
        masks = None

    with Tape() as tape:
        h = forward(state.gcn, state.x, state.edges, state.n, masks,
                    dropout=cfg.dropout, rng=state.dropout_rng)
        if cfg.task == "node":
            task_loss, train_acc = node_cls_loss(h, state.graph.labels,
                                                 state.graph.splits["train"])
        else:
            pos = state.edges
            neg = sample_non_edges(state.n, _edge_set(state), len(pos), state.neg_rng)
            task_loss = link_loss(h, pos, neg)
            train_acc = float("nan")
        loss = task_loss
        rc_val = rlr_val = 0.0
        if cfg.mode == "ptdnet":
            keep = [_keep_probs(a.data, cfg.hc, tau) for a in alphas]
            rc_val = float(sum(k.sum() for k in keep))
            if cfg.beta1 > 0 and alphas:
                # per-layer mean keep probability so beta1 is independent of |E|
                penalty = None
                for a in alphas:
                    term = ad.scale(ad.total(ad.sigmoid(ad.shift(
                        a, -tau * math.log(-cfg.hc.gamma / cfg.hc.zeta)))), 1.0 / max(n_edges, 1))
                    penalty = term if penalty is None else penalty + term
                loss = loss + ad.scale(penalty, cfg.beta1)
            if cfg.uses_lowrank and gates:
                if state.epoch % cfg.lowrank_stride == 0:
                    rlr = None
                    for z in gates:
                        adj = ad.scatter_symmetric(z, state.edges[:, 0], state.edges[:, 1], state.n)
                        value, _ = kyfan_pi(adj, cfg.lowrank)
                        rlr = value if rlr is None else rlr + value
                    rlr_val = rlr.item()
                    state._rlr_cache = rlr_val
                    loss = loss + ad.scale(rlr, cfg.beta2 / state.rlr_scale)
                else:
                    rlr_val = state._rlr_cache
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        raise NumericalError(f"non-finite loss at epoch {state.epoch}")
    params = state.parameters()
    grads = tape.backward(loss, params)
    frozen = ()
    if state.epoch < cfg.denoiser_warmup:
        frozen = range(len(state.gcn.weights), len(params))
    state.optimizer.step(grads, frozen)

    if gates:
        z0 = gates[0].data[:, 0]
        mean_pos = float(z0[state.positive].mean()) if state.positive.any() else float("nan")
        mean_neg = float(z0[~state.positive].mean()) if (~state.positive).any() else float("nan")
    else:
        mean_pos = mean_neg = 1.0
    if cfg.mode == "ptdnet":
        retained = float(np.mean([k.mean() for k in keep])) if n_edges and keep else 1.0
    elif cfg.mode == "dropedge":
        retained = float(np.mean([g.data.mean() for g in gates])) if n_edges else 1.0
    else:
        retained = 1.0

    record = EpochRecord(
        epoch=state.epoch, loss=loss_val, task_loss=task_loss.item(), rc=rc_val, rlr=rlr_val,
        train_acc=train_acc, val_acc=None, val_auc=None,
        mean_z_pos=mean_pos, mean_z_neg=mean_neg, edges_retained_fraction=retained)
    state.epoch += 1
    return record


def _edge_set(state: TrainState) -> set:
    cache = getattr(state, "_edge_set_cache", None)
    if cache is None:
        cache = set(map(tuple, state.edges.tolist()))
        state._edge_set_cache = cache
    return cache


def inference_gates(state: TrainState):
    """Deterministic per-layer gates and the resulting output representations."""
    cfg = state.cfg
    tau = state.tau()
    gates: list[np.ndarray] = []
    alphas: list[np.ndarray] = []

    def masks(layer, h):
        a = state.alpha(layer, h)
        z = deterministic_mask(a, cfg.hc, tau)
        alphas.append(a.data[:, 0])
        gates.append(z.data[:, 0])
        return z

    h = forward(state.gcn, state.x, state.edges, state.n,
                masks if state.denoising() else None)
    return h, gates, alphas


def evaluate(state: TrainState, split: str = "val") -> dict:
    """Task metrics on ``split`` plus mask diagnostics, with no randomness."""
    cfg = state.cfg
    h, gates, alphas = inference_gates(state)
    out: dict = {"split": split}
    if cfg.task == "node":
        loss, acc = node_cls_loss(h, state.graph.labels, state.graph.splits[split])
        out.update(loss=loss.item(), acc=acc)
    else:
        link = state.link
        pos, neg = (link.val_pos, link.val_neg) if split == "val" else (link.test_pos, link.test_neg)
        sp = link_decode(h, pos).data[:, 0]
        sn = link_decode(h, neg).data[:, 0]
        out.update(auc=auc(sp, sn), ap=average_precision(sp, sn))
    out.update(mask_diagnostics(state, gates, alphas))
    return out


def mask_diagnostics(state: TrainState, gates, alphas) -> dict:
    g = state.graph
    pos = state.positive
    n_layers = state.cfg.layers
    if not gates:
        gates = [np.ones(len(state.edges))] * n_layers
    z0 = gates[0]
    diag = {
        "mean_z_pos": _masked_mean(z0, pos),
        "mean_z_neg": _masked_mean(z0, ~pos),
        "retained_fraction": float(np.mean([(z > 0).mean() for z in gates])) if len(z0) else 1.0,
        "layer_mean_z": [float(z.mean()) if len(z) else 1.0 for z in gates],
        "layer_mean_z_pos": [_masked_mean(z, pos) for z in gates],
        "layer_mean_z_neg": [_masked_mean(z, ~pos) for z in gates],
    }
    if state.cfg.mode == "ptdnet" and alphas:
        keep = [_keep_probs(a, state.cfg.hc, state.tau()) for a in alphas]
        diag["expected_retained_fraction"] = float(np.mean([k.mean() for k in keep]))
    else:
        diag["expected_retained_fraction"] = 1.0
    if state.cfg.task == "node":
        for name in ("train", "test"):
            inc = g.incident(g.splits[name])
            diag[f"mean_z_pos_{name}"] = _masked_mean(z0, pos & inc)
            diag[f"mean_z_neg_{name}"] = _masked_mean(z0, ~pos & inc)
            diag[f"layer_mean_z_pos_{name}"] = [_masked_mean(z, pos & inc) for z in gates]
            diag[f"layer_mean_z_neg_{name}"] = [_masked_mean(z, ~pos & inc) for z in gates]
    if state.communities is not None:
        diag["cross_comm_ratio"] = cross_community_ratio(state.edges, state.communities, z0)
        diag["cross_comm_ratio_count"] = cross_community_ratio(state.edges, state.communities,
                                                               (z0 > 0).astype(float))
    return diag


def _masked_mean(z, mask) -> float:
    return float(z[mask].mean()) if np.any(mask) else float("nan")


# --------------------------------------------------------------------------
# full run

def run_training(graph: Graph, cfg: TrainConfig, out_dir=None, link: LinkPredSetup | None = None,
                 communities=None, resolved_config: dict | None = None) -> dict:
    """Train with early stopping (or a fixed epoch budget) and report the best-validation model.

    When ``out_dir`` is given, writes ``metrics.jsonl``, ``result.json`` and
    ``checkpoint.bin`` there.
    """
    state = TrainState(graph, cfg, link=link, communities=communities)
    out_path = Path(out_dir) if out_dir is not None else None
    lines = []
    best_val, best_epoch, best_params, since = -math.inf, -1, None, 0
    metric = "acc" if cfg.task == "node" else "auc"
    fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        fh = open(out_path / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for _ in range(cfg.max_epochs):
            try:
                rec = train_step(state)
                val = evaluate(state, "val")
            except NumericalError as exc:
                _dump_failure(out_path, state, exc, lines)
                raise
            if cfg.task == "node":
                rec.val_acc = val["acc"]
            else:
                rec.val_auc = val["auc"]
            line = rec.to_json()
            lines.append(line)
            if fh is not None:
                fh.write(line + "\n")
            if cfg.mode == "ptdnet" and not state.denoising():
                continue
            if val[metric] > best_val:
                best_val, best_epoch, since = val[metric], rec.epoch, 0
                best_params = state.snapshot()
            else:
                since += 1
            if not cfg.fixed_epochs and since >= cfg.patience:
                break
    finally:
        if fh is not None:
            fh.close()
    final_val = evaluate(state, "val")
    final_test = evaluate(state, "test")
    if not cfg.fixed_epochs and best_params is not None:
        state.restore(best_params)
    val = evaluate(state, "val")
    test = evaluate(state, "test")
    result = {
        "mode": cfg.mode,
        "task": cfg.task,
        "seed": cfg.seed,
        "epochs_run": state.epoch,
        "best_epoch": best_epoch if not cfg.fixed_epochs else state.epoch - 1,
        "val": val,
        "test": test,
        "final_val": final_val,
        "final_test": final_test,
        "config": resolved_config if resolved_config is not None else config_dict(cfg),
    }
    if out_path is not None:
        (out_path / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        save_checkpoint(out_path / "checkpoint.bin", state.snapshot())
    result["_state"] = state
    return result


def _dump_failure(out_path, state, exc, lines):
    if out_path is None:
        return
    info = {
        "error": str(exc),
        "epoch": state.epoch,
        "param_max_abs": [float(np.abs(p.data).max()) for p in state.parameters()],
        "last_records": [json.loads(x) for x in lines[-5:]],
    }
    (out_path / "failure.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


# --------------------------------------------------------------------------
# checkpoint format: b"PTDN1", u32 count, then per array u32 rows, u32 cols, rows*cols f64 (LE)

MAGIC = b"PTDN1"


def save_checkpoint(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype="<f8")
            if a.ndim != 2:
                a = a.reshape(1, -1)
            fh.write(struct.pack("<II", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a PTDN1 checkpoint")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        size = rows * cols * 8
        out.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
                   .reshape(rows, cols).astype(np.float64))
        off += size
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out
