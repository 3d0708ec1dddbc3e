"""Node featurization and the graph encoder / heads used by the predictor.

Graphs are processed in batches.  The message-passing branch runs on the
stacked node list (gather + scatter-mean over the undirected skeleton), the
attention branch on zero-padded ``(b, n, width)`` buckets of similar-sized
graphs with key masking.  Both branches are mean-pooled per graph and
concatenated.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import OP_KINDS, ComputationGraph

NUMERIC_FIELDS = ("H_in", "W_in", "C_in", "H_out", "W_out", "C_out",
                  "kernel_h", "kernel_w", "groups", "dilation")
POS_DIM = 16
FEATURE_DIM = len(OP_KINDS) + len(NUMERIC_FIELDS) + 1 + POS_DIM
_KIND_INDEX = {k: i for i, k in enumerate(OP_KINDS)}


def positional_encoding(depth: Sequence[int], dim: int = POS_DIM) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    pe = np.zeros((len(depth), dim))
    pe[:, 0::2] = np.sin(depth * freq)
    pe[:, 1::2] = np.cos(depth * freq)
    return pe


def featurize(g: ComputationGraph) -> np.ndarray:
    """``n x 41`` matrix: op one-hot, log2(1+x) sizes, bias flag, depth encoding."""
    n = len(g.nodes)
    onehot = np.zeros((n, len(OP_KINDS)))
    numeric = np.zeros((n, len(NUMERIC_FIELDS)))
    bias = np.zeros((n, 1))
    for node in g.nodes:
        onehot[node.id, _KIND_INDEX[node.kind]] = 1.0
        op = node.op
        numeric[node.id] = [*node.in_shape, *node.out_shape, op.attr("kernel_h"),
                            op.attr("kernel_w"), op.attr("groups"), op.attr("dilation")]
        bias[node.id, 0] = op.attr("has_bias")
    return np.hstack([onehot, np.log2(1.0 + numeric), bias,
                      positional_encoding(g.topological_depth())])


@dataclass
class AttentionBucket:
    """Graphs of similar size padded together for self-attention."""
    pad_index: np.ndarray      # padded slot -> stacked row (total_nodes means "padding")
    unpad_index: np.ndarray    # valid padded slots, in stacked-row order
    local_index: np.ndarray    # stacked row -> graph position within the bucket
    key_mask: np.ndarray       # (b, 1, n)
    num_graphs: int
    max_nodes: int


@dataclass
class GraphBatch:
    x: np.ndarray              # (total_nodes, FEATURE_DIM)
    src: np.ndarray            # message sources, both directions of each skeleton edge
    dst: np.ndarray
    graph_index: np.ndarray    # node -> graph
    buckets: list[AttentionBucket]
    bucket_order: np.ndarray   # graph -> row of the concatenated bucket outputs
    num_graphs: int

    @classmethod
    def from_graphs(cls, graphs: Sequence[ComputationGraph],
                    features: Optional[Sequence[np.ndarray]] = None,
                    bucket_size: int = 16) -> "GraphBatch":
        if features is None:
            features = [featurize(g) for g in graphs]
        sizes = np.array([len(g.nodes) for g in graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        total = int(sizes.sum())
        src, dst = [], []
        for off, g in zip(offsets, graphs):
            e = np.array(g.undirected_edges(), dtype=np.int64).reshape(-1, 2) + off
            src += [e[:, 0], e[:, 1]]
            dst += [e[:, 1], e[:, 0]]
        by_size = np.argsort(sizes, kind="stable")
        buckets = []
        for start in range(0, len(graphs), bucket_size):
            members = by_size[start:start + bucket_size]
            b, nmax = len(members), int(sizes[members].max())
            pad_index = np.full(b * nmax, total, dtype=np.int64)
            mask = np.zeros((b, 1, nmax), dtype=bool)
            unpad, local = [], []
            for k, gi in enumerate(members):
                n, off = sizes[gi], offsets[gi]
                pad_index[k * nmax:k * nmax + n] = np.arange(off, off + n)
                unpad.append(np.arange(k * nmax, k * nmax + n))
                local.append(np.full(n, k))
                mask[k, 0, :n] = True
            buckets.append(AttentionBucket(pad_index, np.concatenate(unpad), np.concatenate(local),
                                           mask, b, nmax))
        bucket_order = np.empty(len(graphs), dtype=np.int64)
        bucket_order[by_size] = np.arange(len(graphs))
        return cls(np.vstack(features), np.concatenate(src), np.concatenate(dst),
                   np.repeat(np.arange(len(graphs)), sizes), buckets, bucket_order, len(graphs))


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = FEATURE_DIM
    width: int = 64
    gnn_layers: int = 4
    attn_layers: int = 2
    heads: int = 2
    proj_hidden: int = 128
    proj_hidden_layers: int = 4
    proj_dim: int = 64
    pred_hidden: int = 200
    pred_layers: int = 5
    baseline_layers: int = 4
    baseline_hidden: int = 128
    baseline_hidden_layers: int = 4
    seed: int = 0

    @property
    def embedding_dim(self) -> int:
        return 2 * self.width

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_mlp(store: ParamStore, rng, prefix: str, dims: Sequence[int]) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"{prefix}.{i}.W", _uniform(rng, a, (a, b)))
        store.add(f"{prefix}.{i}.b", np.zeros(b))


def _add_gnn(store: ParamStore, rng, prefix: str, cfg: EncoderConfig, layers: int) -> None:
    w = cfg.width
    store.add(f"{prefix}.emb.W", _uniform(rng, cfg.feature_dim, (cfg.feature_dim, w)))
    store.add(f"{prefix}.emb.b", np.zeros(w))
    for i in range(layers):
        store.add(f"{prefix}.gnn{i}.W_self", _uniform(rng, w, (w, w)))
        store.add(f"{prefix}.gnn{i}.W_neigh", _uniform(rng, w, (w, w)))
        store.add(f"{prefix}.gnn{i}.b", np.zeros(w))


def proj_dims(cfg: EncoderConfig) -> list[int]:
    return [cfg.embedding_dim] + [cfg.proj_hidden] * cfg.proj_hidden_layers + [cfg.proj_dim]


def pred_dims(cfg: EncoderConfig) -> list[int]:
    return [cfg.embedding_dim] + [cfg.pred_hidden] * (cfg.pred_layers - 1) + [1]


def baseline_dims(cfg: EncoderConfig) -> list[int]:
    return [cfg.width] + [cfg.baseline_hidden] * cfg.baseline_hidden_layers + [1]


def init_encoder(cfg: EncoderConfig = EncoderConfig()) -> ParamStore:
    """Parameters of the contrastive predictor: ``enc.*``, ``proj.*`` and ``pred.*``."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    _add_gnn(store, rng, "enc", cfg, cfg.gnn_layers)
    w, dh = cfg.width, cfg.width // cfg.heads
    for layer in range(cfg.attn_layers):
        for h in range(cfg.heads):
            for m in ("Wq", "Wk", "Wv"):
                store.add(f"enc.attn{layer}.h{h}.{m}", _uniform(rng, w, (w, dh)))
        store.add(f"enc.attn{layer}.Wo", _uniform(rng, w, (w, w)))
        store.add(f"enc.attn{layer}.bo", np.zeros(w))
    _add_mlp(store, rng, "proj", proj_dims(cfg))
    _add_mlp(store, rng, "pred", pred_dims(cfg))
    return store


def init_baseline(cfg: EncoderConfig = EncoderConfig()) -> ParamStore:
    """Parameters of the GNN-only regression baseline (``base.*``)."""
    rng = np.random.default_rng(cfg.seed + 1)
    store = ParamStore()
    _add_gnn(store, rng, "base", cfg, cfg.baseline_layers)
    _add_mlp(store, rng, "base.mlp", baseline_dims(cfg))
    return store


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Linear layers ``prefix.0 .. prefix.k`` with ReLU between them (none after the last)."""
    i = 0
    while f"{prefix}.{i + 1}.W" in store:
        x = ad.relu(x @ store[f"{prefix}.{i}.W"] + store[f"{prefix}.{i}.b"])
        i += 1
    return x @ store[f"{prefix}.{i}.W"] + store[f"{prefix}.{i}.b"]


def _gnn_branch(batch: GraphBatch, store: ParamStore, prefix: str, layers: int):
    n = len(batch.x)
    emb = ad.relu(Tensor(batch.x) @ store[f"{prefix}.emb.W"] + store[f"{prefix}.emb.b"])
    h = emb
    for i in range(layers):
        neigh = ad.scatter_mean_rows(ad.gather_rows(h, batch.src), batch.dst, n)
        h = ad.relu(h @ store[f"{prefix}.gnn{i}.W_self"] + neigh @ store[f"{prefix}.gnn{i}.W_neigh"]
                    + store[f"{prefix}.gnn{i}.b"])
    return emb, ad.scatter_mean_rows(h, batch.graph_index, batch.num_graphs)


def _attention_branch(emb: Tensor, batch: GraphBatch, store: ParamStore, cfg: EncoderConfig):
    w = cfg.width
    dh = w // cfg.heads
    rows = ad.concat([emb, Tensor(np.zeros((1, w)))], axis=0)
    pooled = []
    for bucket in batch.buckets:
        x = ad.reshape(ad.gather_rows(rows, bucket.pad_index),
                       (bucket.num_graphs, bucket.max_nodes, w))
        for layer in range(cfg.attn_layers):
            heads = []
            for h in range(cfg.heads):
                p = f"enc.attn{layer}.h{h}"
                q, k, v = (x @ store[f"{p}.{m}"] for m in ("Wq", "Wk", "Wv"))
                scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(dh))
                heads.append(ad.softmax(scores, mask=bucket.key_mask) @ v)
            out = ad.concat(heads, axis=-1) @ store[f"enc.attn{layer}.Wo"] + store[f"enc.attn{layer}.bo"]
            x = ad.relu(x + out)
        flat = ad.gather_rows(ad.reshape(x, (bucket.num_graphs * bucket.max_nodes, w)),
                              bucket.unpad_index)
        pooled.append(ad.scatter_mean_rows(flat, bucket.local_index, bucket.num_graphs))
    return ad.gather_rows(ad.concat(pooled, axis=0), batch.bucket_order)


def encode(batch: GraphBatch, store: ParamStore, cfg: EncoderConfig = EncoderConfig()) -> Tensor:
    """Graph embeddings ``h`` of shape ``(B, 2 * width)``."""
    emb, local = _gnn_branch(batch, store, "enc", cfg.gnn_layers)
    return ad.concat([local, _attention_branch(emb, batch, store, cfg)], axis=-1)


def project(h: Tensor, store: ParamStore) -> Tensor:
    """Unit-norm contrastive representation ``z``."""
    return ad.l2_normalize(mlp(h, store, "proj"))


def _normalized_head(x, store: ParamStore, prefix: str) -> Tensor:
    """MLP head with optional fixed input/output standardization (``prefix.norm.*``)."""
    x = ad.as_tensor(x)
    norm = f"{prefix}.norm"
    if f"{norm}.in_mu" in store:
        x = (x - store[f"{norm}.in_mu"].data) * (1.0 / store[f"{norm}.in_sd"].data)
    out = mlp(x, store, prefix)
    out = ad.reshape(out, (out.shape[0],))
    if f"{norm}.out_mu" in store:
        out = ad.scale(out, float(store[f"{norm}.out_sd"].data)) + float(store[f"{norm}.out_mu"].data)
    return out


def head_names(store: ParamStore, prefix: str) -> list[str]:
    """Trainable weights of a head (normalization constants excluded)."""
    return [n for n in store.names(prefix + ".") if not n.startswith(prefix + ".norm.")]


def predict(h, store: ParamStore) -> Tensor:
    """Predicted accuracy per row of ``h``, shape ``(B,)``."""
    return _normalized_head(h, store, "pred")


def baseline_pool(batch: GraphBatch, store: ParamStore, cfg: EncoderConfig = EncoderConfig()) -> Tensor:
    """Mean-pooled output of the baseline's message-passing stack, ``(B, width)``."""
    return _gnn_branch(batch, store, "base", cfg.baseline_layers)[1]


def baseline_head(pooled, store: ParamStore) -> Tensor:
    return _normalized_head(pooled, store, "base.mlp")


def gnn_baseline(batch: GraphBatch, store: ParamStore, cfg: EncoderConfig = EncoderConfig()) -> Tensor:
    return baseline_head(baseline_pool(batch, store, cfg), store)


def _inference(fn, graphs: Sequence[ComputationGraph], store: ParamStore, features, batch_size: int,
               width: int) -> np.ndarray:
    trainable = {n: store[n].requires_grad for n in store}
    store.set_trainable(False)
    try:
        out = []
        for i in range(0, len(graphs), batch_size):
            feats = None if features is None else features[i:i + batch_size]
            out.append(fn(GraphBatch.from_graphs(graphs[i:i + batch_size], feats)).data)
    finally:
        for n, flag in trainable.items():
            store[n].requires_grad = flag
    return np.concatenate(out) if out else np.zeros((0, width))


def embed_graphs(graphs: Sequence[ComputationGraph], store: ParamStore,
                 cfg: EncoderConfig = EncoderConfig(), features=None,
                 batch_size: int = 64) -> np.ndarray:
    """Inference-only embeddings as a plain array (gradients are not recorded)."""
    return _inference(lambda b: encode(b, store, cfg), graphs, store, features, batch_size,
                      cfg.embedding_dim)


def baseline_features(graphs: Sequence[ComputationGraph], store: ParamStore,
                      cfg: EncoderConfig = EncoderConfig(), features=None,
                      batch_size: int = 64) -> np.ndarray:
    return _inference(lambda b: baseline_pool(b, store, cfg), graphs, store, features, batch_size,
                      cfg.width)
