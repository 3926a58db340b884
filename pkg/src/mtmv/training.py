"""Optimization and run orchestration: data splits, Adam, the epoch loop with
early stopping, evaluation, attention-weight export, and ablation sweeps.

All randomness in a run flows through one counter-based generator (Philox)
seeded from the config, covering splits, parameter initialization, and
dropout, so identical (seed, config, dataset) triples give bit-identical loss
histories on one machine.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import graph as gr
from . import metrics as mt
from . import model as md
from .autodiff import SparseMatrix, Tensor
from .graph import MultiViewGraph
from .model import CLS, LINK, RECON, ModelConfig, ModelParameters, TaskSpec

log = logging.getLogger(__name__)

MODES = ("multi", "single-link", "single-cls", "nva", "nta", "equ")


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite; message names the epoch/parameter."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    dropout: float = 0.5
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    link_train_fraction: float = 0.5
    label_train_fraction: float = 0.5
    lambda_link: float = 1.0
    lambda_cls: float = 0.1
    lambda_recon: float = 0.01
    mode: str = "multi"
    binarize_adjacency: bool = False
    batch_edges: int | None = None
    sample_nonedges: bool = False
    baseline_view: int | None = None   # restrict message passing to one view

    def __post_init__(self):
        if not (0.0 < self.link_train_fraction < 1.0):
            raise ValueError("link_train_fraction must lie in the open interval (0, 1)")
        if not (0.0 < self.label_train_fraction < 1.0):
            raise ValueError("label_train_fraction must lie in the open interval (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        for lam in (self.lambda_link, self.lambda_cls, self.lambda_recon):
            if not (np.isfinite(lam) and lam >= 0):
                raise ValueError("task weights must be finite and non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose one of {MODES}")


@dataclass
class SplitPlan:
    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    train_bits: np.ndarray
    val_bits: np.ndarray
    test_bits: np.ndarray
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    test_nodes: np.ndarray
    train_views: list[SparseMatrix]
    # sampled never-connected pairs with all-zero labels, one block per partition
    # (only under sample_nonedges; they extend supervision and evaluation cells)
    extra_train_pairs: np.ndarray | None = None
    extra_val_pairs: np.ndarray | None = None
    extra_test_pairs: np.ndarray | None = None

    def supervision(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        """(pairs, bit labels) for a partition, non-edge block appended."""
        pairs = getattr(self, f"{part}_edges")
        bits = getattr(self, f"{part}_bits").astype(float)
        extra = getattr(self, f"extra_{part}_pairs")
        if extra is not None and len(extra):
            pairs = np.concatenate([pairs, extra])
            bits = np.concatenate([bits, np.zeros((len(extra), bits.shape[1]))])
        return pairs, bits


def split(g: MultiViewGraph, cfg: TrainConfig, rng: np.random.Generator) -> SplitPlan:
    """Shuffle union edges into train/val/test, rebuild per-view message-passing
    adjacencies from train edges only, and split labeled nodes independently."""
    edges, bits = gr.union_edges(g)
    m = len(edges)
    f = cfg.link_train_fraction
    perm = rng.permutation(m)
    n_train = int(round(f * m))
    n_val = (m - n_train) // 2
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    tr, va, te = np.sort(tr), np.sort(va), np.sort(te)

    weight_maps = []
    for view in g.views:
        rows = np.repeat(np.arange(view.rows), np.diff(view.row_offsets))
        weight_maps.append({(int(u), int(v)): w for u, v, w in
                            zip(rows, view.col_indices, view.entry_values) if u < v})
    train_views = []
    for i in range(g.k):
        rows, cols, vals = [], [], []
        for e in tr:
            if bits[e, i]:
                u, v = int(edges[e, 0]), int(edges[e, 1])
                w = weight_maps[i][(u, v)]
                rows += [u, v]
                cols += [v, u]
                vals += [w, w]
        if not rows:
            log.warning("view %d has no train edges; kept with self-loops only", i)
        train_views.append(SparseMatrix.from_coo(g.n, g.n, rows, cols, vals))

    labeled = g.labeled_nodes
    if labeled.size:
        nperm = rng.permutation(labeled.size)
        n_tr = int(round(cfg.label_train_fraction * labeled.size))
        n_va = (labeled.size - n_tr) // 2
        train_nodes = np.sort(labeled[nperm[:n_tr]])
        val_nodes = np.sort(labeled[nperm[n_tr:n_tr + n_va]])
        test_nodes = np.sort(labeled[nperm[n_tr + n_va:]])
    else:
        train_nodes = val_nodes = test_nodes = np.empty(0, dtype=np.int64)

    extras = {"train": None, "val": None, "test": None}
    if cfg.sample_nonedges:
        existing = set(map(tuple, edges.tolist()))
        for part, count in (("train", len(tr)), ("val", len(va)), ("test", len(te))):
            pairs = []
            while len(pairs) < count:
                u, v = rng.integers(0, g.n, size=2)
                if u == v:
                    continue
                key = (min(int(u), int(v)), max(int(u), int(v)))
                if key not in existing:
                    pairs.append(key)
                    existing.add(key)
            extras[part] = np.array(pairs, dtype=np.int64)

    return SplitPlan(train_edges=edges[tr], val_edges=edges[va], test_edges=edges[te],
                     train_bits=bits[tr], val_bits=bits[va], test_bits=bits[te],
                     train_nodes=train_nodes, val_nodes=val_nodes, test_nodes=test_nodes,
                     train_views=train_views, extra_train_pairs=extras["train"],
                     extra_val_pairs=extras["val"], extra_test_pairs=extras["test"])


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = named_params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in named_params]
        self.v = [np.zeros_like(p.data) for _, p in named_params]

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParameters                        # best-validation parameters
    history: list[dict]
    report: mt.MetricsReport
    plan: SplitPlan
    epoch_times: list[float]
    attention: list[tuple[str, int, int, float]]   # (mechanism, head, view, weight)
    best_epoch: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    final_state: dict | None = None                # last-epoch parameter arrays


def resolve_mode(mode: str, model_cfg: ModelConfig, train_cfg: TrainConfig
                 ) -> tuple[float, bool, dict[str, float]]:
    """Map a run mode onto (alpha, equal-weight flag, active task weights).

    A task weighs in only when it is declared in the model's task list."""
    kinds = {t.kind for t in model_cfg.tasks}
    weights = {LINK: train_cfg.lambda_link if LINK in kinds else 0.0,
               CLS: train_cfg.lambda_cls if CLS in kinds else 0.0,
               RECON: train_cfg.lambda_recon if RECON in kinds else 0.0}
    alpha = model_cfg.alpha
    equal = False
    if mode == "single-link":
        weights = {LINK: train_cfg.lambda_link, CLS: 0.0, RECON: 0.0}
    elif mode == "single-cls":
        weights = {LINK: 0.0, CLS: train_cfg.lambda_cls, RECON: 0.0}
    elif mode == "nva":
        alpha = 1.0
    elif mode == "nta":
        alpha = 0.0
    elif mode == "equ":
        equal = True
    return alpha, equal, weights


def _prepare_adjacencies(views: list[SparseMatrix], binarize: bool
                         ) -> tuple[list[SparseMatrix], list[SparseMatrix]]:
    eff = [gr.binarize(v) for v in views] if binarize else views
    norm = [gr.normalize(v).matrix for v in eff]
    raw = [gr.add_self_loops(v) for v in eff]
    return norm, raw


def _check_attention_sums(fwd: md.ForwardResult) -> None:
    if fwd.view_weights is not None:
        for w in fwd.view_weights:
            if np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
                raise AssertionError("view attention weights lost normalization")
    for per_head in fwd.task_weights.values():
        for w in per_head:
            if abs(w.sum() - 1.0) > 1e-9:
                raise AssertionError("task attention weights lost normalization")


def _loss_parts(fwd: md.ForwardResult, pairs, bits, nodes, labels, weights, cfg
                ) -> md.Tensor:
    parts = {}
    if weights.get(LINK, 0.0) > 0.0 and fwd.link_probs is not None:
        parts[LINK] = md.binary_cross_entropy(fwd.link_probs, bits)
    if weights.get(CLS, 0.0) > 0.0 and fwd.cls_probs is not None and len(nodes):
        parts[CLS] = md.categorical_cross_entropy(fwd.cls_probs, nodes, labels)
    if weights.get(RECON, 0.0) > 0.0 and fwd.recons is not None:
        parts[RECON] = md.reconstruction_loss(fwd.z_views, fwd.recons,
                                              cfg.recon_stop_gradient)
    return parts


def attention_table(fwd: md.ForwardResult, k: int) -> list[tuple[str, int, int, float]]:
    """Rows (mechanism, head, view, weight); view-attention weights are node means.

    In equal-weight mode the constant 1/k is exported directly rather than a
    floating mean of identical values.
    """
    rows: list[tuple[str, int, int, float]] = []
    if fwd.view_weights is not None:
        for h, w in enumerate(fwd.view_weights):
            for i in range(k):
                val = 1.0 / k if fwd.equal_weights else float(w[:, i].mean())
                rows.append(("view", h, i, val))
    names = {LINK: "task:link", CLS: "task:cls"}
    for kind, per_head in fwd.task_weights.items():
        for h, w in enumerate(per_head):
            for i in range(k):
                val = 1.0 / k if fwd.equal_weights else float(w[i])
                rows.append((names[kind], h, i, val))
    return rows


def train(g: MultiViewGraph, model_cfg: ModelConfig, train_cfg: TrainConfig
          ) -> TrainResult:
    """Full-batch training with early stopping on validation loss.

    Per epoch: one forward over the train-edge graph, one backward, one Adam
    step; the wall clock covers exactly those three (evaluation excluded).
    The parameters of the best validation epoch are restored at the end.
    """
    rng = np.random.default_rng(np.random.Philox(train_cfg.seed))
    if any(t.kind == CLS for t in model_cfg.tasks) and (
            g.labels is None or g.n_classes is None):
        raise ValueError("classification task configured but the dataset has no labels")
    if model_cfg.feature_mode != "identity":
        raise ValueError("the training loop supports identity features only; "
                         "provided features are a library-level model option")
    plan = split(g, train_cfg, rng)
    alpha, equal, weights = resolve_mode(train_cfg.mode, model_cfg, train_cfg)

    enc_views = plan.train_views
    if train_cfg.baseline_view is not None:
        enc_views = [plan.train_views[train_cfg.baseline_view]]
        model_cfg = replace(model_cfg, views=1)
    norm_adjs, raw_adjs = _prepare_adjacencies(enc_views, train_cfg.binarize_adjacency)

    model_cfg = replace(model_cfg, dropout_rate=train_cfg.dropout)
    params = ModelParameters.init(model_cfg, g.n, link_out=g.k,
                                  n_classes=g.n_classes, rng=rng)
    named = params.named()
    adam = Adam(named, lr=train_cfg.learning_rate)

    train_pairs, train_bits = plan.supervision("train")
    val_pairs, val_bits = plan.supervision("val")

    need_recon = weights.get(RECON, 0.0) > 0.0
    use_link = weights.get(LINK, 0.0) > 0.0
    labels = g.labels if g.labels is not None else np.empty(0, dtype=np.int64)

    def eval_loss(pairs, bits, nodes) -> float:
        fwd = md.forward_pass(params, norm_adjs, raw_adjs, model_cfg,
                              link_pairs=pairs if use_link and len(pairs) else None,
                              alpha=alpha, equal_weights=equal,
                              need_recon=need_recon, training=False)
        parts = _loss_parts(fwd, pairs, bits, nodes, labels, weights, model_cfg)
        total = md.total_loss(parts, weights)
        return float(total.data)

    history: list[dict] = []
    epoch_times: list[float] = []
    best_val = np.inf
    best_state = params.state()
    best_epoch = -1
    bad_epochs = 0

    for epoch in range(train_cfg.max_epochs):
        epoch_pairs, epoch_bits = train_pairs, train_bits
        if train_cfg.batch_edges is not None and train_cfg.batch_edges < len(train_pairs):
            pick = rng.choice(len(train_pairs), size=train_cfg.batch_edges, replace=False)
            pick.sort()
            epoch_pairs, epoch_bits = train_pairs[pick], train_bits[pick]

        t0 = time.perf_counter()
        ad.zero_grad([p for _, p in named])
        fwd = md.forward_pass(params, norm_adjs, raw_adjs, model_cfg,
                              link_pairs=epoch_pairs if use_link else None,
                              alpha=alpha, equal_weights=equal,
                              need_recon=need_recon, training=True, rng=rng)
        parts = _loss_parts(fwd, epoch_pairs, epoch_bits, plan.train_nodes,
                            labels, weights, model_cfg)
        loss = md.total_loss(parts, weights)
        if not np.isfinite(loss.data):
            raise DivergenceError(
                f"loss diverged at epoch {epoch} (seed {train_cfg.seed})")
        ad.backward(loss)
        adam.step()
        epoch_times.append(time.perf_counter() - t0)

        _check_attention_sums(fwd)
        val_loss = eval_loss(val_pairs, val_bits, plan.val_nodes)
        record = {"epoch": epoch, "train_loss": float(loss.data), "val_loss": val_loss}
        for kind, key in ((LINK, "train_link"), (CLS, "train_cls"), (RECON, "train_recon")):
            record[key] = float(parts[kind].data) if kind in parts else None
        history.append(record)

        if val_loss < best_val:
            best_val = val_loss
            best_state = params.state()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break

    final_state = params.state()
    params.load_state(best_state)
    report, attn = evaluate(g, params, model_cfg, train_cfg, plan,
                            alpha=alpha, equal_weights=equal, weights=weights)
    times = np.asarray(epoch_times)
    report.epoch_time_seconds = {"mean": float(times.mean()), "std": float(times.std())}
    return TrainResult(params=params, history=history, report=report, plan=plan,
                       epoch_times=epoch_times, attention=attn, best_epoch=best_epoch,
                       model_cfg=model_cfg, train_cfg=train_cfg,
                       final_state=final_state)


def evaluate(g: MultiViewGraph, params: ModelParameters, model_cfg: ModelConfig,
             train_cfg: TrainConfig, plan: SplitPlan, *, alpha=None,
             equal_weights=None, weights=None, per_view_metrics: bool = False,
             micro: bool = False) -> tuple[mt.MetricsReport, list]:
    """Test metrics on held-out edges/nodes with train-edge message passing."""
    if alpha is None or equal_weights is None or weights is None:
        alpha, equal_weights, weights = resolve_mode(train_cfg.mode, model_cfg, train_cfg)
    enc_views = plan.train_views
    if train_cfg.baseline_view is not None:
        enc_views = [plan.train_views[train_cfg.baseline_view]]
    norm_adjs, raw_adjs = _prepare_adjacencies(enc_views, train_cfg.binarize_adjacency)

    test_pairs, test_bits = plan.supervision("test")
    use_link = weights.get(LINK, 0.0) > 0.0 and len(test_pairs)
    need_recon = weights.get(RECON, 0.0) > 0.0
    fwd = md.forward_pass(params, norm_adjs, raw_adjs, model_cfg,
                          link_pairs=test_pairs if use_link else None,
                          alpha=alpha, equal_weights=equal_weights,
                          need_recon=need_recon, training=False)

    report = mt.MetricsReport()
    extras = {}
    if use_link and fwd.link_probs is not None:
        ap, auc = mt.link_metrics(fwd.link_probs.data, test_bits)
        report.link = {"ap": ap, "auc": auc}
        if per_view_metrics:
            per_view = []
            for i in range(g.k):
                col_bits = test_bits[:, i]
                if 0 < col_bits.sum() < len(col_bits):
                    vap, vauc = mt.link_metrics(fwd.link_probs.data[:, i], col_bits)
                    per_view.append({"view": i, "ap": vap, "auc": vauc})
                else:
                    per_view.append({"view": i, "ap": None, "auc": None})
            extras["link_per_view"] = per_view
    if weights.get(CLS, 0.0) > 0.0 and fwd.cls_probs is not None and len(plan.test_nodes):
        pred = np.argmax(fwd.cls_probs.data[plan.test_nodes], axis=1)
        true = g.labels[plan.test_nodes]
        acc, prec, f1 = mt.classification_metrics(pred, true, g.n_classes)
        report.classification = {"accuracy": acc, "precision_macro": prec,
                                 "f1_macro": f1}
        if micro:
            acc_mi, prec_mi, f1_mi = mt.classification_metrics(
                pred, true, g.n_classes, average="micro")
            extras["classification_micro"] = {"accuracy": acc_mi,
                                              "precision_micro": prec_mi,
                                              "f1_micro": f1_mi}
    if need_recon and fwd.recons is not None:
        total = 0.0
        for z, r in zip(fwd.z_views, fwd.recons):
            total += float(((z.data - r.data) ** 2).sum())
        report.reconstruction_mse = total / (len(fwd.z_views) * g.n)
    if extras:
        report.extras = extras
    enc_k = 1 if train_cfg.baseline_view is not None else g.k
    return report, attention_table(fwd, enc_k)


ABLATION_VARIANTS = ("full", "nva", "nta", "equ", "single")


def run_ablation(g: MultiViewGraph, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 variants=ABLATION_VARIANTS, max_threads: int = 1) -> list[dict]:
    """Train each variant with the shared seed/split; one result row per variant.

    The 'single' variant trains each supervised task separately and reports
    the summed mean epoch time (the joint-vs-separate cost convention).
    """
    def run_one(variant: str) -> dict:
        if variant == "single":
            link_res = train(g, model_cfg, replace(train_cfg, mode="single-link"))
            cls_res = train(g, model_cfg, replace(train_cfg, mode="single-cls"))
            link_time = float(np.mean(link_res.epoch_times))
            cls_time = float(np.mean(cls_res.epoch_times))
            return {"variant": "single",
                    "link": link_res.report.link,
                    "classification": cls_res.report.classification,
                    "reconstruction_mse": None,
                    "mean_epoch_seconds": link_time + cls_time,
                    "results": {"link": link_res, "cls": cls_res}}
        mode = "multi" if variant == "full" else variant
        res = train(g, model_cfg, replace(train_cfg, mode=mode))
        return {"variant": variant,
                "link": res.report.link,
                "classification": res.report.classification,
                "reconstruction_mse": res.report.reconstruction_mse,
                "mean_epoch_seconds": float(np.mean(res.epoch_times)),
                "results": {"run": res}}

    if max_threads > 1 and len(variants) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_threads) as pool:
            rows = list(pool.map(run_one, variants))
    else:
        rows = [run_one(v) for v in variants]
    rows.sort(key=lambda r: r["variant"])
    return rows


def train_single_view_baseline(g: MultiViewGraph, model_cfg: ModelConfig,
                               train_cfg: TrainConfig, view: int, task: str
                               ) -> TrainResult:
    """Single-task GCN over one view's structure, evaluated on the shared
    full-graph split (the link head still predicts all k view bits so its
    metrics are comparable with multi-view runs)."""
    mode = "single-link" if task == LINK else "single-cls"
    cfg = replace(train_cfg, mode=mode, baseline_view=view)
    return train(g, model_cfg, cfg)
