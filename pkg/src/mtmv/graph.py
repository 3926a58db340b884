"""Multi-view graph data model, symmetric normalization, and structural diagnostics.

A multi-view graph is one node set observed under k relations, each stored as
its own symmetric sparse adjacency. Self-loops are never stored; they are added
during normalization. Node labels, when present, mark a subset of nodes with a
single class id each (unlabeled nodes carry -1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, SparseMatrix

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class MultiViewGraph:
    n: int
    views: list[SparseMatrix]
    view_names: list[str] = field(default_factory=list)
    labels: np.ndarray | None = None   # length n, class id or -1 for unlabeled
    n_classes: int | None = None

    def __post_init__(self):
        if not self.views:
            raise ValueError("graph needs at least one view")
        if not self.view_names:
            object.__setattr__(self, "view_names", [f"view_{i}" for i in range(self.k)])
        if len(self.view_names) != self.k:
            raise ValueError("view_names length must match view count")
        for i, v in enumerate(self.views):
            if v.shape != (self.n, self.n):
                raise ShapeError(f"view {i} has shape {v.shape}, expected ({self.n}, {self.n})")
            if v.max_abs_asymmetry() > SYMMETRY_TOL:
                raise ValueError(f"view {i} is asymmetric beyond {SYMMETRY_TOL}")
            if v.nnz and v.entry_values.min() < 0:
                raise ValueError(f"view {i} has negative edge weights")
            if _has_diagonal(v):
                raise ValueError(f"view {i} stores self-loops")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", lab)
            if lab.shape != (self.n,):
                raise ShapeError("labels must be one entry per node")
            present = lab[lab >= 0]
            if present.size and self.n_classes is not None and present.max() >= self.n_classes:
                raise ValueError("label id outside [0, n_classes)")

    @property
    def k(self) -> int:
        return len(self.views)

    @property
    def labeled_nodes(self) -> np.ndarray:
        if self.labels is None:
            return np.empty(0, dtype=np.int64)
        return np.nonzero(self.labels >= 0)[0]


@dataclass(frozen=True)
class NormalizedView:
    """Sparse D^{-1/2} (A + I) D^{-1/2} with degrees taken from the self-looped matrix."""
    matrix: SparseMatrix
    self_loop_weight: float = 1.0


def _has_diagonal(s: SparseMatrix) -> bool:
    for r in range(s.rows):
        lo, hi = s.row_offsets[r], s.row_offsets[r + 1]
        if np.any(s.col_indices[lo:hi] == r):
            return True
    return False


def add_self_loops(view: SparseMatrix, weight: float = 1.0) -> SparseMatrix:
    """Return A + weight*I (the view must not already store a diagonal)."""
    n = view.rows
    rows = np.repeat(np.arange(n), np.diff(view.row_offsets))
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([view.col_indices, np.arange(n)])
    vals = np.concatenate([view.entry_values, np.full(n, weight)])
    return SparseMatrix.from_coo(n, n, rows, cols, vals)


def binarize(view: SparseMatrix) -> SparseMatrix:
    return SparseMatrix(view.rows, view.cols, view.row_offsets, view.col_indices,
                        np.ones_like(view.entry_values))


def normalize(view: SparseMatrix, weighted: bool = True) -> NormalizedView:
    """Symmetric normalization of a square adjacency with an added self-loop.

    Degrees come from the weighted or binarized self-looped matrix. Isolated
    nodes end up with a single diagonal entry of 1.
    """
    if view.rows != view.cols:
        raise ShapeError(f"normalize expects a square matrix, got {view.shape}")
    if view.max_abs_asymmetry() > SYMMETRY_TOL:
        raise ValueError(f"adjacency asymmetric beyond {SYMMETRY_TOL}")
    if view.nnz and view.entry_values.min() < 0:
        raise ValueError("negative edge weight")
    base = view if weighted else binarize(view)
    looped = add_self_loops(base)
    deg = np.zeros(looped.rows)
    np.add.at(deg, np.repeat(np.arange(looped.rows), np.diff(looped.row_offsets)),
              looped.entry_values)
    dinv = 1.0 / np.sqrt(deg)
    rows = np.repeat(np.arange(looped.rows), np.diff(looped.row_offsets))
    vals = dinv[rows] * looped.entry_values * dinv[looped.col_indices]
    out = SparseMatrix(looped.rows, looped.cols, looped.row_offsets,
                       looped.col_indices, vals)
    return NormalizedView(matrix=out)


def pad_unobserved(view: SparseMatrix, n_total: int) -> SparseMatrix:
    """Grow a view to n_total nodes; the new nodes have no edges."""
    if n_total < view.rows:
        raise ShapeError(f"cannot pad {view.rows} nodes down to {n_total}")
    if n_total == view.rows:
        return view
    offsets = np.concatenate([view.row_offsets,
                              np.full(n_total - view.rows, view.row_offsets[-1])])
    return SparseMatrix(n_total, n_total, offsets, view.col_indices, view.entry_values)


def union_edges(g: MultiViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """All undirected pairs present in at least one view, with per-view indicator bits.

    Returns (edges [m, 2] with u < v in lexicographic order, bits [m, k]).
    """
    membership: dict[tuple[int, int], np.ndarray] = {}
    for i, view in enumerate(g.views):
        rows = np.repeat(np.arange(view.rows), np.diff(view.row_offsets))
        for u, v in zip(rows, view.col_indices):
            if u < v:
                key = (int(u), int(v))
                bits = membership.get(key)
                if bits is None:
                    bits = np.zeros(g.k, dtype=np.int64)
                    membership[key] = bits
                bits[i] = 1
    keys = sorted(membership)
    edges = np.array(keys, dtype=np.int64).reshape(len(keys), 2)
    bits = (np.stack([membership[k] for k in keys]) if keys
            else np.zeros((0, g.k), dtype=np.int64))
    return edges, bits


def neighbor_sets(view: SparseMatrix) -> list[set[int]]:
    out = []
    for r in range(view.rows):
        lo, hi = view.row_offsets[r], view.row_offsets[r + 1]
        out.append(set(int(c) for c in view.col_indices[lo:hi]))
    return out


def jaccard_agreement(g: MultiViewGraph, view_a: int, view_b: int,
                      threshold: float = 0.5) -> tuple[float, float]:
    """Fraction of nodes whose neighbor sets in two views agree (Jaccard > threshold).

    Nodes with no neighbors in either view are excluded from the denominator.
    """
    if not (0 <= view_a < g.k and 0 <= view_b < g.k):
        raise IndexError(f"view index out of range (k={g.k})")
    na, nb = neighbor_sets(g.views[view_a]), neighbor_sets(g.views[view_b])
    agree = included = 0
    for u in range(g.n):
        union = na[u] | nb[u]
        if not union:
            continue
        included += 1
        if len(na[u] & nb[u]) / len(union) > threshold:
            agree += 1
    if included == 0:
        return 0.0, 0.0
    return agree / included, (included - agree) / included


def task_correlation(g: MultiViewGraph, view: int) -> float:
    """Fraction of a view's edges whose two endpoints share a class label.

    Edges with an unlabeled endpoint are excluded from the denominator.
    """
    if g.labels is None:
        raise ValueError("task_correlation requires node labels")
    if not 0 <= view < g.k:
        raise IndexError(f"view index out of range (k={g.k})")
    s = g.views[view]
    rows = np.repeat(np.arange(s.rows), np.diff(s.row_offsets))
    same = total = 0
    for u, v in zip(rows, s.col_indices):
        if u < v and g.labels[u] >= 0 and g.labels[v] >= 0:
            total += 1
            if g.labels[u] == g.labels[v]:
                same += 1
    return same / total if total else 0.0
