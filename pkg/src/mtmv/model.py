"""Multi-task multi-view graph model.

Per view, a stack of graph convolutions with weights shared across views
produces Z_i. Two attention mechanisms fuse the views:

  * view attention: per-node softmax over views, query = mean of projected
    view embeddings, keys = projected view embeddings, values = graph-encoded
    view embeddings (self-looped adjacency times Z times W_V);
  * task attention: per-task trainable query/key variables give one scalar
    weight per view and head, shared value tensors.

The two results blend by a convex mix ``alpha`` into one representation per
task, feeding a multi-label link head, a node-classification head, and an
optional per-view reconstruction decoder trained under Frobenius MSE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tensor

LINK = "link_prediction"
CLS = "node_classification"
RECON = "view_reconstruction"
SUPERVISED_KINDS = (LINK, CLS)

PROB_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    weight: float

    def __post_init__(self):
        if self.kind not in (LINK, CLS, RECON):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ValueError("task weight must be finite and non-negative")


@dataclass
class ModelConfig:
    views: int
    layers: int
    hidden: int
    heads: int
    alpha: float
    tasks: list[TaskSpec]
    feature_mode: str = "identity"
    dropout_rate: float = 0.5
    literal_post_softmax_scaling: bool = False
    recon_stop_gradient: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by the head count")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.feature_mode not in ("identity", "provided"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")
        if not any(t.kind in SUPERVISED_KINDS for t in self.tasks):
            raise ValueError("at least one supervised task required")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def supervised_kinds(self) -> list[str]:
        return [t.kind for t in self.tasks if t.kind in SUPERVISED_KINDS]

    def task_weight(self, kind: str) -> float:
        for t in self.tasks:
            if t.kind == kind:
                return t.weight
        return 0.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class ModelParameters:
    """All trainable weights. The GCN trunk and W_Q/W_K/W_V are shared across
    views; task attention variables, heads, and decoders are task/view scoped."""
    gcn: list[Tensor]
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    task_query: dict[str, list[Tensor]]   # kind -> per head [1, dh]
    task_key: dict[str, list[Tensor]]     # kind -> per head [k, dh]
    head_w: dict[str, Tensor]
    head_b: dict[str, Tensor]
    decoders: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: ModelConfig, n_nodes: int, link_out: int,
             n_classes: int | None, rng: np.random.Generator,
             feature_dim: int | None = None) -> "ModelParameters":
        d, dh = cfg.hidden, cfg.head_dim
        in_dim = n_nodes if cfg.feature_mode == "identity" else int(feature_dim)
        gcn = [Tensor(glorot(rng, in_dim, d), requires_grad=True)]
        for _ in range(cfg.layers - 1):
            gcn.append(Tensor(glorot(rng, d, d), requires_grad=True))
        w_q = Tensor(glorot(rng, d, d), requires_grad=True)
        w_k = Tensor(glorot(rng, d, d), requires_grad=True)
        w_v = Tensor(glorot(rng, d, d), requires_grad=True)
        task_query, task_key = {}, {}
        for kind in cfg.supervised_kinds():
            task_query[kind] = [Tensor(glorot(rng, 1, dh), requires_grad=True)
                                for _ in range(cfg.heads)]
            task_key[kind] = [Tensor(glorot(rng, cfg.views, dh, (cfg.views, dh)),
                                     requires_grad=True) for _ in range(cfg.heads)]
        head_w, head_b = {}, {}
        for kind in cfg.supervised_kinds():
            out = link_out if kind == LINK else int(n_classes)
            if kind == LINK:
                # start as a plain cosine scorer (the Hadamard features sum to
                # the cosine similarity); a Glorot start leaves this head in a
                # long near-zero-gradient plateau
                head_w[kind] = Tensor(np.ones((d, out)), requires_grad=True)
            else:
                head_w[kind] = Tensor(glorot(rng, d, out), requires_grad=True)
            head_b[kind] = Tensor(np.zeros((1, out)), requires_grad=True)
        decoders = [Tensor(glorot(rng, d, d), requires_grad=True)
                    for _ in range(cfg.views)]
        return cls(gcn=gcn, w_q=w_q, w_k=w_k, w_v=w_v, task_query=task_query,
                   task_key=task_key, head_w=head_w, head_b=head_b, decoders=decoders)

    def named(self) -> list[tuple[str, Tensor]]:
        out = [(f"gcn.{i}", t) for i, t in enumerate(self.gcn)]
        out += [("attn.w_q", self.w_q), ("attn.w_k", self.w_k), ("attn.w_v", self.w_v)]
        for kind in sorted(self.task_query):
            out += [(f"task_attn.{kind}.q.{h}", t)
                    for h, t in enumerate(self.task_query[kind])]
            out += [(f"task_attn.{kind}.k.{h}", t)
                    for h, t in enumerate(self.task_key[kind])]
        for kind in sorted(self.head_w):
            out += [(f"head.{kind}.w", self.head_w[kind]),
                    (f"head.{kind}.b", self.head_b[kind])]
        out += [(f"decoder.{i}", t) for i, t in enumerate(self.decoders)]
        return out

    def all(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def clone(self) -> "ModelParameters":
        import copy
        new = copy.copy(self)
        clone_t = lambda t: Tensor(t.data.copy(), requires_grad=True)
        new.gcn = [clone_t(t) for t in self.gcn]
        new.w_q, new.w_k, new.w_v = clone_t(self.w_q), clone_t(self.w_k), clone_t(self.w_v)
        new.task_query = {k: [clone_t(t) for t in v] for k, v in self.task_query.items()}
        new.task_key = {k: [clone_t(t) for t in v] for k, v in self.task_key.items()}
        new.head_w = {k: clone_t(t) for k, t in self.head_w.items()}
        new.head_b = {k: clone_t(t) for k, t in self.head_b.items()}
        new.decoders = [clone_t(t) for t in self.decoders]
        return new

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            t.data[...] = arrays[name]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def gcn_layer(norm_adj: SparseMatrix, z_prev: Tensor, w: Tensor,
              dropout_rate: float, training: bool, rng) -> Tensor:
    """tanh(A_norm . dropout(z_prev) . w)"""
    h = ad.dropout(z_prev, dropout_rate, training, rng)
    return ad.tanh(ad.matmul(ad.spmm(norm_adj, h), w))


def multiview_forward(norm_adjs: list[SparseMatrix], params: ModelParameters,
                      cfg: ModelConfig, training: bool, rng,
                      features: Tensor | None = None) -> list[Tensor]:
    """Stacked shared-weight convolutions per view.

    Identity features are never materialized: the first layer's product
    I . W reduces to the weight table itself, so layer one becomes
    tanh(A_norm . dropout(W1)) with dropout applied to the effective input.
    """
    zs = []
    for adj in norm_adjs:
        if cfg.feature_mode == "identity":
            h = ad.tanh(ad.spmm(adj, ad.dropout(params.gcn[0], cfg.dropout_rate,
                                                training, rng)))
        else:
            h = gcn_layer(adj, features, params.gcn[0], cfg.dropout_rate, training, rng)
        for w in params.gcn[1:]:
            h = gcn_layer(adj, h, w, cfg.dropout_rate, training, rng)
        zs.append(h)
    return zs


def _mean_tensors(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(ts))


def compute_values(zs: list[Tensor], raw_adjs: list[SparseMatrix],
                   params: ModelParameters) -> list[Tensor]:
    """Graph-encoded value tensors V_i = (A_i + I) Z_i W_V, shared by both mechanisms."""
    return [ad.matmul(ad.spmm(a, z), params.w_v) for a, z in zip(raw_adjs, zs)]


def view_attention(zs: list[Tensor], values: list[Tensor], params: ModelParameters,
                   cfg: ModelConfig, equal_weights: bool = False
                   ) -> tuple[Tensor, list[np.ndarray]]:
    """Per-node multi-head softmax over views; returns (Z_v, weights per head [n, k])."""
    k = len(zs)
    n = zs[0].shape[0]
    dh = cfg.head_dim
    q = _mean_tensors([ad.matmul(z, params.w_q) for z in zs])
    ks = [ad.matmul(z, params.w_k) for z in zs]
    head_outputs, head_weights = [], []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        if equal_weights:
            weights = Tensor(np.full((n, k), 1.0 / k))
        else:
            logits = ad.stack_columns(
                [ad.row_dot(ad.slice_cols(q, lo, hi), ad.slice_cols(ks[i], lo, hi))
                 for i in range(k)])
            if not cfg.literal_post_softmax_scaling:
                logits = ad.scale(logits, 1.0 / math.sqrt(dh))
            weights = ad.softmax(logits, axis=1)
        blended = None
        for i in range(k):
            part = ad.scale_rows(ad.slice_cols(values[i], lo, hi), ad.column(weights, i))
            blended = part if blended is None else ad.add(blended, part)
        if cfg.literal_post_softmax_scaling and not equal_weights:
            blended = ad.scale(blended, 1.0 / math.sqrt(dh))
        head_outputs.append(blended)
        head_weights.append(weights.data.copy())
    z_v = head_outputs[0] if cfg.heads == 1 else ad.concat(head_outputs, axis=1)
    return z_v, head_weights


def task_attention(values: list[Tensor], kind: str, params: ModelParameters,
                   cfg: ModelConfig, equal_weights: bool = False
                   ) -> tuple[Tensor, list[np.ndarray]]:
    """Node-independent softmax over views per head, driven by trainable
    query/key variables specific to the task; returns (Z_t, weights per head [k])."""
    if kind not in params.task_query:
        raise KeyError(f"no task attention variables for task {kind!r}")
    k = len(values)
    dh = cfg.head_dim
    ones_k = Tensor(np.ones((k, 1)))
    head_outputs, head_weights = [], []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        if equal_weights:
            weights = Tensor(np.full(k, 1.0 / k))
        else:
            expanded_q = ad.matmul(ones_k, params.task_query[kind][h])
            logits = ad.row_dot(params.task_key[kind][h], expanded_q)
            scaled = ad.scale(logits, 1.0 / math.sqrt(dh))
            weights = ad.softmax(scaled, axis=0)
        blended = None
        for i in range(k):
            part = ad.mul_scalar(ad.slice_cols(values[i], lo, hi), ad.get(weights, i))
            blended = part if blended is None else ad.add(blended, part)
        if cfg.literal_post_softmax_scaling and not equal_weights:
            blended = ad.scale(blended, 1.0 / math.sqrt(dh))
        head_outputs.append(blended)
        head_weights.append(weights.data.copy())
    z_t = head_outputs[0] if cfg.heads == 1 else ad.concat(head_outputs, axis=1)
    return z_t, head_weights


def fuse(z_v: Tensor | None, z_t: Tensor | None, alpha: float) -> Tensor:
    """Convex blend alpha * Z_t + (1 - alpha) * Z_v; boundary values short-circuit."""
    if alpha == 0.0:
        return z_v
    if alpha == 1.0:
        return z_t
    return ad.add(ad.scale(z_t, alpha), ad.scale(z_v, 1.0 - alpha))


def link_head(z: Tensor, pairs: np.ndarray, params: ModelParameters) -> Tensor:
    """Per-pair existence probabilities, one per view (multi-label).

    Edge features are the Hadamard product of the row-normalized endpoint
    embeddings, whose coordinate sum is exactly the cosine similarity.
    """
    norms = ad.power(ad.row_dot(z, z), 0.5)
    inv = ad.power(ad.shift(norms, NORM_EPS), -1.0)
    z_hat = ad.scale_rows(z, inv)
    e = ad.mul(ad.gather_rows(z_hat, pairs[:, 0]), ad.gather_rows(z_hat, pairs[:, 1]))
    logits = ad.add_rowvec(ad.matmul(e, params.head_w[LINK]), params.head_b[LINK])
    return ad.sigmoid(logits)


def node_head(z: Tensor, params: ModelParameters) -> Tensor:
    """Row-wise class probabilities."""
    logits = ad.add_rowvec(ad.matmul(z, params.head_w[CLS]), params.head_b[CLS])
    return ad.softmax(logits, axis=1)


def reconstruct(z_prime: Tensor, raw_adjs: list[SparseMatrix],
                params: ModelParameters) -> list[Tensor]:
    """Per-view decoding of the summed task representations."""
    return [ad.matmul(ad.spmm(a, z_prime), w)
            for a, w in zip(raw_adjs, params.decoders)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE over all cells; probabilities clamped away from {0, 1}."""
    if probs.data.size == 0:
        raise ValueError("empty batch")
    y = np.asarray(targets, dtype=np.float64)
    p = ad.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(Tensor(y), ad.log(p))
    neg = ad.mul(Tensor(1.0 - y), ad.log(ad.shift(ad.scale(p, -1.0), 1.0)))
    return ad.scale(ad.reduce_mean(ad.add(pos, neg)), -1.0)


def categorical_cross_entropy(probs: Tensor, node_idx: np.ndarray,
                              labels: np.ndarray) -> Tensor:
    """Mean CE over the given labeled nodes."""
    if len(node_idx) == 0:
        raise ValueError("empty batch")
    mask = np.zeros(probs.shape)
    mask[node_idx, labels[node_idx]] = 1.0
    p = ad.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    picked = ad.mul(Tensor(mask), ad.log(p))
    return ad.scale(ad.reduce_sum(picked), -1.0 / len(node_idx))


def reconstruction_loss(zs: list[Tensor], recons: list[Tensor],
                        stop_gradient: bool = False) -> Tensor:
    """(1/k)(1/N) sum_i ||Z_i - Z~_i||_F^2"""
    k = len(zs)
    n = zs[0].shape[0]
    total = None
    for z, r in zip(zs, recons):
        target = Tensor(z.data.copy()) if stop_gradient else z
        diff = ad.sub(target, r)
        term = ad.reduce_sum(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (k * n))


def total_loss(parts: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    """Weighted sum of per-task loss terms (missing/zero-weight terms skipped)."""
    total = None
    for kind, term in parts.items():
        lam = weights.get(kind, 0.0)
        if term is None or lam == 0.0:
            continue
        weighted = ad.scale(term, lam)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        raise ValueError("no active loss terms")
    return total


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    z_views: list[Tensor]
    z_consensus: Tensor | None
    z_task: dict[str, Tensor]
    z_fused: dict[str, Tensor]
    link_probs: Tensor | None
    cls_probs: Tensor | None
    recons: list[Tensor] | None
    view_weights: list[np.ndarray] | None     # per head [n, k]
    task_weights: dict[str, list[np.ndarray]]  # kind -> per head [k]
    equal_weights: bool = False


def forward_pass(params: ModelParameters, norm_adjs: list[SparseMatrix],
                 raw_adjs: list[SparseMatrix], cfg: ModelConfig, *,
                 link_pairs: np.ndarray | None = None,
                 alpha: float | None = None,
                 equal_weights: bool = False,
                 need_recon: bool = False,
                 training: bool = False,
                 rng: np.random.Generator | None = None,
                 features: Tensor | None = None) -> ForwardResult:
    """Run the whole model once; task branches not requested are skipped."""
    alpha = cfg.alpha if alpha is None else alpha
    zs = multiview_forward(norm_adjs, params, cfg, training, rng, features)
    values = compute_values(zs, raw_adjs, params)
    z_v, view_w = (None, None)
    if alpha < 1.0:
        z_v, view_w = view_attention(zs, values, params, cfg, equal_weights)
    z_task, task_w, z_fused = {}, {}, {}
    for kind in cfg.supervised_kinds():
        z_t = None
        if alpha > 0.0:
            z_t, task_w[kind] = task_attention(values, kind, params, cfg, equal_weights)
        z_task[kind] = z_t
        z_fused[kind] = fuse(z_v, z_t, alpha)
    link_probs = None
    if LINK in z_fused and link_pairs is not None:
        link_probs = link_head(z_fused[LINK], link_pairs, params)
    cls_probs = node_head(z_fused[CLS], params) if CLS in z_fused else None
    recons = None
    if need_recon:
        z_prime = None
        for kind in cfg.supervised_kinds():
            z_prime = z_fused[kind] if z_prime is None else ad.add(z_prime, z_fused[kind])
        recons = reconstruct(z_prime, raw_adjs, params)
    return ForwardResult(z_views=zs, z_consensus=z_v, z_task=z_task, z_fused=z_fused,
                         link_probs=link_probs, cls_probs=cls_probs, recons=recons,
                         view_weights=view_w, task_weights=task_w,
                         equal_weights=equal_weights)
