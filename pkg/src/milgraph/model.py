"""End-to-end bag scoring model with hand-derived gradients.

Pipeline per bag: optional MLP encoder -> stacked degree-normalized graph
convolutions -> graph-attention pooling into a single bag embedding ->
linear classifier head (sigmoid for binary, softmax otherwise).

The graph convolution aggregates each node's neighborhood average of
linearly mapped features:

    z_k = (sum_{j in N(k)} h_j^T W) / d_k

and the attention pool scores each node from its neighborhood-averaged
projection:

    score_k = u^T tanh( (sum_{j in N(k)} V z_j) / d_k )
    alpha   = softmax(score),  Z = sum_k alpha_k z_k

Both stages can independently fall back to a self-only graph
(``conv_uses_graph`` / ``attention_uses_graph``), which turns the conv
stack into plain dense layers and the pool into ordinary attention; that
is how the ablation baselines are expressed.

``backward`` computes the exact analytic gradient of the cross-entropy
loss with respect to every parameter; no autodiff is involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bags import Bag, BagGraph, GraphConfig
from .linalg import Matrix, ShapeError, Vector, softmax, stable_sigmoid, xavier_init

CHECKPOINT_VERSION = 1


class TraceError(ValueError):
    """A trace does not match the inputs it is being replayed against."""


@dataclass
class ModelConfig:
    input_dim: int
    conv_dims: Tuple[int, ...] = (256, 128, 64)
    attention_dim: int = 64
    num_classes: int = 2
    encoder_dims: Optional[Tuple[int, ...]] = None
    conv_uses_graph: bool = True
    attention_uses_graph: bool = True

    def __post_init__(self):
        self.conv_dims = tuple(int(d) for d in self.conv_dims)
        if self.encoder_dims is not None:
            self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        dims = (self.input_dim, self.attention_dim, *self.conv_dims,
                *(self.encoder_dims or ()))
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        if not self.conv_dims:
            raise ShapeError("at least one conv layer is required")
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def embed_dim(self) -> int:
        """Width of the final instance embeddings fed to attention."""
        return self.conv_dims[-1]

    @property
    def conv_input_dim(self) -> int:
        return self.encoder_dims[-1] if self.encoder_dims else self.input_dim

    @property
    def head_rows(self) -> int:
        return 1 if self.num_classes == 2 else self.num_classes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "conv_dims": list(self.conv_dims),
            "attention_dim": self.attention_dim,
            "num_classes": self.num_classes,
            "encoder_dims": list(self.encoder_dims) if self.encoder_dims else None,
            "conv_uses_graph": self.conv_uses_graph,
            "attention_uses_graph": self.attention_uses_graph,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = d.get("encoder_dims")
        return cls(
            input_dim=d["input_dim"],
            conv_dims=tuple(d["conv_dims"]),
            attention_dim=d["attention_dim"],
            num_classes=d["num_classes"],
            encoder_dims=tuple(enc) if enc else None,
            conv_uses_graph=d.get("conv_uses_graph", True),
            attention_uses_graph=d.get("attention_uses_graph", True),
        )


@dataclass
class ModelParams:
    """All trainable tensors. Also serves as the gradient container."""

    encoder_ws: List[Matrix]
    encoder_bs: List[Vector]
    conv_ws: List[Matrix]
    u: Vector            # attention query, length L
    v: Matrix            # attention projection, L x F2
    head_w: Matrix       # classifier weight, head_rows x F2
    head_b: Vector

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every tensor (shared storage)."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.encoder_ws, self.encoder_bs)):
            out[f"encoder.{i}.w"] = w
            out[f"encoder.{i}.b"] = b
        for i, w in enumerate(self.conv_ws):
            out[f"conv.{i}.w"] = w
        out["attention.u"] = self.u
        out["attention.v"] = self.v
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder_ws=[w.copy() for w in self.encoder_ws],
            encoder_bs=[b.copy() for b in self.encoder_bs],
            conv_ws=[w.copy() for w in self.conv_ws],
            u=self.u.copy(),
            v=self.v.copy(),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


Gradients = ModelParams


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Xavier-uniform weights, zero biases. Draw order is fixed."""
    encoder_ws, encoder_bs = [], []
    fan_in = config.input_dim
    for dim in config.encoder_dims or ():
        encoder_ws.append(xavier_init(fan_in, dim, rng))
        encoder_bs.append(np.zeros(dim))
        fan_in = dim
    conv_ws = []
    for dim in config.conv_dims:
        conv_ws.append(xavier_init(fan_in, dim, rng))
        fan_in = dim
    f2, ell = config.embed_dim, config.attention_dim
    v = xavier_init(ell, f2, rng)
    u = xavier_init(ell, 1, rng)[:, 0]
    head_w = xavier_init(config.head_rows, f2, rng)
    head_b = np.zeros(config.head_rows)
    return ModelParams(encoder_ws, encoder_bs, conv_ws, u, v, head_w, head_b)


@dataclass
class ForwardTrace:
    """Every intermediate the analytic backward pass needs."""

    encoder_ins: List[Matrix]    # input to each encoder layer
    encoder_pres: List[Matrix]   # encoder pre-activations
    encoded: Matrix              # f(x): conv input, K x F1'
    p_conv: Matrix               # D^-1 A used by conv (or identity)
    p_att: Matrix                # D^-1 A used by attention (or identity)
    conv_ins: List[Matrix]       # P @ H_{l-1} per conv layer
    conv_pres: List[Matrix]      # aggregated pre-activations per conv layer
    z: Matrix                    # final instance embeddings, K x F2
    pooled_z: Matrix             # P_att @ z
    att_pre: Matrix              # pooled_z @ V^T, pre-tanh, K x L
    scores: Vector               # pre-softmax attention scores
    alpha: Vector                # attention weights
    z_bag: Vector                # bag embedding
    logits: Vector
    probs: Vector                # class probabilities (length num_classes)


def _propagation_matrix(graph: BagGraph, size: int, use_graph: bool) -> Matrix:
    if not use_graph:
        return np.eye(size)
    if graph.size != size:
        raise ShapeError(f"graph size {graph.size} != bag size {size}")
    return graph.adjacency / graph.degrees[:, None]


def graph_conv(features: Matrix, graph: BagGraph, w: Matrix) -> Matrix:
    """Degree-normalized neighborhood aggregation through a linear map."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != w.shape[0]:
        raise ShapeError(f"graph_conv: features {features.shape} vs W {w.shape}")
    if graph.size != features.shape[0]:
        raise ShapeError(f"graph_conv: graph size {graph.size} vs {features.shape[0]} rows")
    p = graph.adjacency / graph.degrees[:, None]
    return p @ (features @ w)


def graph_attention_pool(z: Matrix, graph: BagGraph, u: Vector,
                         v: Matrix) -> Tuple[Vector, Vector]:
    """Attention weights and bag embedding from neighborhood-averaged projections."""
    z = np.asarray(z, dtype=np.float64)
    if v.shape[1] != z.shape[1] or u.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes: z {z.shape}, u {u.shape}, V {v.shape}")
    if graph.size != z.shape[0]:
        raise ShapeError(f"attention: graph size {graph.size} vs {z.shape[0]} rows")
    p = graph.adjacency / graph.degrees[:, None]
    scores = np.tanh((p @ z) @ v.T) @ u
    alpha = softmax(scores)
    return alpha, z.T @ alpha


def forward(bag: Bag, graph: Optional[BagGraph], params: ModelParams,
            config: ModelConfig) -> ForwardTrace:
    h = bag.feature_matrix()
    if h.shape[1] != config.input_dim:
        raise ShapeError(f"bag dim {h.shape[1]} != model input_dim {config.input_dim}")
    k = h.shape[0]
    if graph is None and (config.conv_uses_graph or config.attention_uses_graph):
        raise ShapeError("model uses a graph but none was given")

    encoder_ins, encoder_pres = [], []
    for w, b in zip(params.encoder_ws, params.encoder_bs):
        encoder_ins.append(h)
        pre = h @ w + b
        encoder_pres.append(pre)
        h = np.maximum(pre, 0.0)
    encoded = h

    p_conv = _propagation_matrix(graph, k, config.conv_uses_graph)
    p_att = _propagation_matrix(graph, k, config.attention_uses_graph)

    conv_ins, conv_pres = [], []
    last = len(params.conv_ws) - 1
    for l, w in enumerate(params.conv_ws):
        agg_in = p_conv @ h
        conv_ins.append(agg_in)
        pre = agg_in @ w
        conv_pres.append(pre)
        h = pre if l == last else np.maximum(pre, 0.0)
    z = h

    pooled_z = p_att @ z
    att_pre = pooled_z @ params.v.T
    scores = np.tanh(att_pre) @ params.u
    alpha = softmax(scores)
    z_bag = z.T @ alpha

    logits = params.head_w @ z_bag + params.head_b
    if config.num_classes == 2:
        p1 = stable_sigmoid(float(logits[0]))
        probs = np.array([1.0 - p1, p1])
    else:
        probs = softmax(logits)

    return ForwardTrace(
        encoder_ins=encoder_ins, encoder_pres=encoder_pres, encoded=encoded,
        p_conv=p_conv, p_att=p_att, conv_ins=conv_ins, conv_pres=conv_pres,
        z=z, pooled_z=pooled_z, att_pre=att_pre, scores=scores, alpha=alpha,
        z_bag=z_bag, logits=logits, probs=probs,
    )


def backward(trace: ForwardTrace, bag: Bag, graph: Optional[BagGraph],
             params: ModelParams, config: ModelConfig, label: int) -> Gradients:
    """Analytic gradient of the cross-entropy loss for one bag."""
    if trace.z.shape != (bag.size, config.embed_dim):
        raise TraceError(
            f"trace embeddings {trace.z.shape} do not match bag of size {bag.size}"
        )

    # head: d loss / d logits is probs - onehot(label) for both head types
    if config.num_classes == 2:
        d_logits = np.array([trace.probs[1] - float(label)])
    else:
        d_logits = trace.probs.copy()
        d_logits[label] -= 1.0
    g_head_w = np.outer(d_logits, trace.z_bag)
    g_head_b = d_logits
    g_zbag = params.head_w.T @ d_logits

    # pooling: z_bag = z^T alpha
    g_alpha = trace.z @ g_zbag
    g_z = np.outer(trace.alpha, g_zbag)

    # softmax over attention scores
    g_scores = trace.alpha * (g_alpha - float(trace.alpha @ g_alpha))

    # scores = tanh(pooled_z V^T) u
    t = np.tanh(trace.att_pre)
    g_u = t.T @ g_scores
    g_att_pre = np.outer(g_scores, params.u) * (1.0 - t * t)
    g_v = g_att_pre.T @ trace.pooled_z
    g_z += trace.p_att.T @ g_att_pre @ params.v

    # conv stack, last layer unactivated
    g_conv_ws: List[Matrix] = [None] * len(params.conv_ws)
    g_h = g_z
    last = len(params.conv_ws) - 1
    for l in range(last, -1, -1):
        g_pre = g_h if l == last else g_h * (trace.conv_pres[l] > 0)
        g_conv_ws[l] = trace.conv_ins[l].T @ g_pre
        g_h = trace.p_conv.T @ g_pre @ params.conv_ws[l].T

    # encoder (ReLU MLP)
    g_enc_ws: List[Matrix] = [None] * len(params.encoder_ws)
    g_enc_bs: List[Vector] = [None] * len(params.encoder_ws)
    for e in range(len(params.encoder_ws) - 1, -1, -1):
        g_pre = g_h * (trace.encoder_pres[e] > 0)
        g_enc_ws[e] = trace.encoder_ins[e].T @ g_pre
        g_enc_bs[e] = g_pre.sum(axis=0)
        g_h = g_pre @ params.encoder_ws[e].T

    return Gradients(
        encoder_ws=g_enc_ws, encoder_bs=g_enc_bs, conv_ws=g_conv_ws,
        u=g_u, v=g_v, head_w=g_head_w, head_b=g_head_b,
    )


def bag_probs(bag: Bag, params: ModelParams, config: ModelConfig,
              graph_cfg: GraphConfig) -> Vector:
    """Class probabilities for a bag, building its graph from scratch."""
    graph = graph_cfg.build(bag)
    return forward(bag, graph, params, config).probs


def score_is_permutation_invariant(bag: Bag, params: ModelParams,
                                   config: ModelConfig, perm: Sequence[int],
                                   graph_cfg: GraphConfig,
                                   tol: float = 1e-9) -> bool:
    """Check the bag score survives reordering instances (graph rebuilt)."""
    base = bag_probs(bag, params, config, graph_cfg)
    permuted = Bag(
        id=bag.id, label=bag.label,
        instances=tuple(bag.instances[i] for i in perm),
    )
    other = bag_probs(permuted, params, config, graph_cfg)
    return bool(np.max(np.abs(base - other)) <= tol)


def save_checkpoint(path, config: ModelConfig, params: ModelParams,
                    standardizer: Optional[Tuple[Vector, Vector]] = None,
                    metadata: Optional[dict] = None) -> None:
    """JSON checkpoint; float64 values round-trip bit-exactly via repr."""
    payload = {
        "metadata": metadata or {},
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {
            "encoder_ws": [w.tolist() for w in params.encoder_ws],
            "encoder_bs": [b.tolist() for b in params.encoder_bs],
            "conv_ws": [w.tolist() for w in params.conv_ws],
            "u": params.u.tolist(),
            "v": params.v.tolist(),
            "head_w": params.head_w.tolist(),
            "head_b": params.head_b.tolist(),
        },
        "standardizer": None if standardizer is None else {
            "mean": standardizer[0].tolist(),
            "std": standardizer[1].tolist(),
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path):
    """Returns (config, params, standardizer-or-None, metadata)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["config"])
    raw = payload["params"]
    params = ModelParams(
        encoder_ws=[np.array(w, dtype=np.float64).reshape(len(w), -1)
                    for w in raw["encoder_ws"]],
        encoder_bs=[np.array(b, dtype=np.float64) for b in raw["encoder_bs"]],
        conv_ws=[np.array(w, dtype=np.float64) for w in raw["conv_ws"]],
        u=np.array(raw["u"], dtype=np.float64),
        v=np.array(raw["v"], dtype=np.float64),
        head_w=np.array(raw["head_w"], dtype=np.float64),
        head_b=np.array(raw["head_b"], dtype=np.float64),
    )
    std = payload.get("standardizer")
    standardizer = None
    if std is not None:
        standardizer = (np.array(std["mean"], dtype=np.float64),
                        np.array(std["std"], dtype=np.float64))
    return config, params, standardizer, payload.get("metadata", {})
