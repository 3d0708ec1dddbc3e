"""Pretrain -> regress -> fine-tune pipeline for the contrastive predictor, plus
the end-to-end GNN baseline and SRCC evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .contrastive import TAU, TAU_ALPHA, LossStats, cl_loss, neighbor_pools, select_positive, srcc
from .encoder import (EncoderConfig, GraphBatch, baseline_features, baseline_head, embed_graphs,
                      encode, gnn_baseline, head_names, init_baseline, init_encoder, predict,
                      project)
from .oracle import ArchRecord, OracleConfig, dataset_digest, oracle_accuracy
from .spectral import DistanceCache, distance_matrix

log = logging.getLogger(__name__)

Estimator = Callable[[Sequence[ArchRecord]], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    pool_size: int = 5
    finetune_size: int = 50
    regressor_epochs: int = 10
    regressor_lr: float = 1e-3
    regressor_batch: int = 128
    finetune_epochs: int = 100
    finetune_lr: float = 3e-4
    baseline_epochs: int = 60
    baseline_lr: float = 1e-3
    baseline_batch: int = 64
    tau: float = TAU
    tau_alpha: float = TAU_ALPHA
    pretrain_families: Optional[tuple] = None   # None: pretrain on every family given

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be at least 1")
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def finetune_size_for(dialect: str) -> int:
    return 40 if str(getattr(dialect, "value", dialect)) == "nb201" else 50


# ------------------------------------------------------------------ pretraining

@dataclass
class PretrainResult:
    store: ParamStore
    losses: list[float]
    stats: LossStats
    excluded: list[str] = field(default_factory=list)


def _family_pools(records: Sequence[ArchRecord], pool_size: int,
                  cache_dir: Optional[Path]) -> tuple[list[ArchRecord], np.ndarray, list[str]]:
    """Drop singleton families and build each member's nearest-neighbour pool (global indices)."""
    groups: dict[str, list[ArchRecord]] = defaultdict(list)
    for r in records:
        groups[r.family].append(r)
    kept: list[ArchRecord] = []
    pools, excluded = [], []
    for fam in sorted(groups):
        members = groups[fam]
        if len(members) < 2:
            log.warning("family %s has a single graph and is excluded from pretraining", fam)
            excluded.append(fam)
            continue
        values = np.stack([r.signature.values for r in members])
        if cache_dir is not None:
            dist = DistanceCache.load_or_build(cache_dir, dataset_digest(members), values).matrix
        else:
            dist = distance_matrix(values)
        local = neighbor_pools(dist, pool_size)
        pools.append(local + len(kept))
        kept.extend(members)
    if not kept:
        raise ValueError("no family has two or more graphs to pretrain on")
    k = min(p.shape[1] for p in pools)
    return kept, np.vstack([p[:, :k] for p in pools]), excluded


def pretrain(records: Sequence[ArchRecord], config: TrainConfig = TrainConfig(),
             enc_cfg: EncoderConfig = EncoderConfig(), cache_dir: Optional[str | Path] = None,
             store: Optional[ParamStore] = None,
             on_epoch: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """Contrastive pretraining of the encoder and projection head (labels unused).

    Each batch holds ``batch_size // 2`` anchors and one positive per anchor,
    drawn among its ``pool_size`` spectrally nearest same-family graphs.
    """
    if config.pretrain_families is not None:
        records = [r for r in records if r.family in config.pretrain_families]
    kept, pools, excluded = _family_pools(records, config.pool_size,
                                          None if cache_dir is None else Path(cache_dir))
    store = store if store is not None else init_encoder(enc_cfg)
    names = store.names("enc.") + store.names("proj.")
    feats = [r.features for r in kept]
    sigs = np.stack([r.signature.values for r in kept])
    fams = [r.family for r in kept]
    rng = np.random.default_rng(config.seed)
    half = config.batch_size // 2
    stats = LossStats()
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(kept))
        batch_losses = []
        for start in range(0, len(order), half):
            anchors = order[start:start + half]
            if 2 * len(anchors) < 4:
                continue
            positives = np.array([select_positive(a, pools, rng) for a in anchors])
            members = np.concatenate([anchors, positives])
            batch = GraphBatch.from_graphs([kept[i].cg for i in members], [feats[i] for i in members])
            z = project(encode(batch, store, enc_cfg), store)
            loss = cl_loss(z, [fams[i] for i in members], distance_matrix(sigs[members]),
                           config.tau, config.tau_alpha, stats)
            store.zero_grad()
            ad.backward(loss)
            store.adam_step(config.lr, names=names)
            batch_losses.append(loss.item() / len(members))
        losses.append(float(np.mean(batch_losses)))
        log.info("pretrain epoch %d: loss %.5f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return PretrainResult(store, losses, stats, excluded)


# ------------------------------------------------------------------ regression heads

def _set_const(store: ParamStore, name: str, value) -> None:
    value = np.asarray(value, dtype=float)
    if name in store:
        store[name].data = value.copy()
    else:
        store.add(name, value).requires_grad = False


def _fit_head(x_fn: Callable[[np.ndarray], ad.Tensor], n: int, y: np.ndarray, store: ParamStore,
              names: list[str], epochs: int, lr: float, batch: int, seed: int,
              out_mu: float, out_sd: float) -> list[float]:
    """Minibatch MSE in standardized label units; returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    target = (y - out_mu) / out_sd
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            pred = x_fn(idx)
            z = ad.scale(pred - out_mu, 1.0 / out_sd)
            loss = ad.mean(ad.square(z - target[idx]))
            store.zero_grad()
            ad.backward(loss)
            store.adam_step(lr, names=names)
            total += loss.item() * len(idx)
        curve.append(total / n)
    return curve


def _labels(records: Sequence[ArchRecord]) -> np.ndarray:
    if any(r.accuracy is None for r in records):
        raise ValueError("regression needs labelled records")
    return np.array([r.accuracy for r in records], dtype=float)


def embed_records(records: Sequence[ArchRecord], store: ParamStore,
                  enc_cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    return embed_graphs([r.cg for r in records], store, enc_cfg, [r.features for r in records])


def _moments(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sd = h.std(axis=0)
    return h.mean(axis=0), np.where(sd > 1e-12, sd, 1.0)


def family_standardize(h: np.ndarray, families: Sequence[str]) -> np.ndarray:
    """Centre and scale embeddings within each family separately."""
    fam = np.asarray(families, dtype=object)
    out = np.empty_like(h)
    for f in dict.fromkeys(families):
        rows = fam == f
        mu, sd = _moments(h[rows])
        out[rows] = (h[rows] - mu) / sd
    return out


def adapt_normalization(store: ParamStore, reference: np.ndarray) -> ParamStore:
    """Point the head's input standardization at one family's (unlabelled) embeddings."""
    mu, sd = _moments(np.asarray(reference, dtype=float))
    _set_const(store, "pred.norm.in_mu", mu)
    _set_const(store, "pred.norm.in_sd", sd)
    return store


def _standardized_labels(records: Sequence[ArchRecord]) -> tuple[np.ndarray, float, float]:
    """Labels standardized within each family, plus a typical (mean, spread) to report in."""
    y = _labels(records)
    fams = [r.family for r in records]
    yn = family_standardize(y[:, None], fams)[:, 0]
    groups = [y[np.asarray(fams, dtype=object) == f] for f in dict.fromkeys(fams)]
    return yn, float(np.mean([g.mean() for g in groups])), float(np.mean([g.std() for g in groups]))


def _target_scale(y: np.ndarray) -> tuple[float, float]:
    sd = float(y.std())
    return float(y.mean()), sd if sd > 1e-12 else 1.0


def train_regressor(records: Sequence[ArchRecord], store: ParamStore,
                    config: TrainConfig = TrainConfig(), enc_cfg: EncoderConfig = EncoderConfig(),
                    embeddings: Optional[np.ndarray] = None) -> ParamStore:
    """Fit the prediction head on frozen encoder embeddings of labelled source graphs.

    Embeddings and labels are standardized within each source family, so the
    head learns family-relative quality; :func:`adapt_normalization` later
    points the input standardization at the target family.
    """
    store = store.copy()
    yn, mu, sd = _standardized_labels(records)
    h = embeddings if embeddings is not None else embed_records(records, store, enc_cfg)
    hn = family_standardize(h, [r.family for r in records])
    _set_const(store, "pred.norm.in_mu", np.zeros(h.shape[1]))
    _set_const(store, "pred.norm.in_sd", np.ones(h.shape[1]))
    _set_const(store, "pred.norm.out_mu", 0.0)
    _set_const(store, "pred.norm.out_sd", 1.0)
    store.reset_optimizer()
    _fit_head(lambda idx: predict(hn[idx], store), len(h), yn, store, head_names(store, "pred"),
              config.regressor_epochs, config.regressor_lr, config.regressor_batch, config.seed,
              0.0, 1.0)
    _set_const(store, "pred.norm.out_mu", mu)
    _set_const(store, "pred.norm.out_sd", sd)
    return adapt_normalization(store, h)


def fine_tune(records: Sequence[ArchRecord], store: ParamStore,
              config: TrainConfig = TrainConfig(), enc_cfg: EncoderConfig = EncoderConfig(),
              embeddings: Optional[np.ndarray] = None,
              reference: Optional[np.ndarray] = None) -> ParamStore:
    """Adapt the prediction head to a few labelled target graphs; the encoder is untouched.

    ``reference`` holds embeddings of unlabelled target-family graphs used for
    input standardization (default: the fine-tuning graphs themselves).  The
    output scale is re-fitted to the target labels.
    """
    if "pred.norm.out_mu" not in store:
        raise ValueError("fine_tune needs a store produced by train_regressor")
    store = store.copy()
    y = _labels(records)
    h = embeddings if embeddings is not None else embed_records(records, store, enc_cfg)
    adapt_normalization(store, h if reference is None else reference)
    mu, sd = _target_scale(y)
    _set_const(store, "pred.norm.out_mu", mu)
    _set_const(store, "pred.norm.out_sd", sd)
    store.reset_optimizer()
    _fit_head(lambda idx: predict(h[idx], store), len(h), y, store, head_names(store, "pred"),
              config.finetune_epochs, config.finetune_lr, len(h), config.seed + 1, mu, sd)
    return store


# ------------------------------------------------------------------ GNN baseline

def _baseline_fn(records: Sequence[ArchRecord], store: ParamStore, enc_cfg: EncoderConfig):
    feats = [r.features for r in records]

    def fn(idx):
        batch = GraphBatch.from_graphs([records[i].cg for i in idx], [feats[i] for i in idx])
        return gnn_baseline(batch, store, enc_cfg)
    return fn


def train_baseline(records: Sequence[ArchRecord], config: TrainConfig = TrainConfig(),
                   enc_cfg: EncoderConfig = EncoderConfig()) -> ParamStore:
    """End-to-end GNN regressor on labelled source graphs (labels standardized per family)."""
    yn, mu, sd = _standardized_labels(records)
    store = init_baseline(enc_cfg)
    _set_const(store, "base.mlp.norm.out_mu", 0.0)
    _set_const(store, "base.mlp.norm.out_sd", 1.0)
    names = [n for n in store.names("base.") if not n.startswith("base.mlp.norm.")]
    _fit_head(_baseline_fn(records, store, enc_cfg), len(records), yn, store, names,
              config.baseline_epochs, config.baseline_lr, config.baseline_batch, config.seed,
              0.0, 1.0)
    _set_const(store, "base.mlp.norm.out_mu", mu)
    _set_const(store, "base.mlp.norm.out_sd", sd)
    return store


def fine_tune_baseline(records: Sequence[ArchRecord], store: ParamStore,
                       config: TrainConfig = TrainConfig(),
                       enc_cfg: EncoderConfig = EncoderConfig()) -> ParamStore:
    """Same protocol as :func:`fine_tune`: message passing frozen, only the MLP head moves."""
    store = store.copy()
    y = _labels(records)
    pooled = baseline_features([r.cg for r in records], store, enc_cfg, [r.features for r in records])
    mu, sd = _target_scale(y)
    _set_const(store, "base.mlp.norm.out_mu", mu)
    _set_const(store, "base.mlp.norm.out_sd", sd)
    store.reset_optimizer()
    _fit_head(lambda idx: baseline_head(pooled[idx], store), len(records), y, store,
              head_names(store, "base.mlp"), config.finetune_epochs, config.finetune_lr,
              len(records), config.seed + 1, mu, sd)
    return store


# ------------------------------------------------------------------ estimators

def random_estimator(seed: int = 0) -> Estimator:
    """Scores drawn uniformly at random; reproducible for a fixed seed."""
    rng = np.random.default_rng(seed)
    return lambda records: rng.random(len(records))


def oracle_estimator(config: OracleConfig) -> Estimator:
    return lambda records: np.array([oracle_accuracy(r.cg, config, r.signature) for r in records])


def cl_estimator(store: ParamStore, enc_cfg: EncoderConfig = EncoderConfig()) -> Estimator:
    def estimate(records):
        if not records:
            return np.zeros(0)
        return predict(embed_records(records, store, enc_cfg), store).data.copy()
    return estimate


def baseline_estimator(store: ParamStore, enc_cfg: EncoderConfig = EncoderConfig()) -> Estimator:
    def estimate(records):
        pooled = baseline_features([r.cg for r in records], store, enc_cfg,
                                   [r.features for r in records])
        return baseline_head(pooled, store).data.copy() if len(records) else np.zeros(0)
    return estimate


def evaluate(estimator: Estimator, records: Sequence[ArchRecord]) -> float:
    """SRCC between estimated and true accuracies."""
    return srcc(estimator(records), _labels(records))


def write_metrics(path: str | Path, rows: Sequence[dict], config_digest: str) -> None:
    """CSV of metric rows; the first line records the producing config digest."""
    fields = ["stage", "epoch", "loss", "srcc"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={config_digest}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)
