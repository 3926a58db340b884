"""Canonical dataset directory format and a correlated multi-view SBM generator.

A dataset directory contains:
  meta            JSON: {"nodes", "views", "view_names", "classes"}
  view_<i>.edges  one line per undirected edge: "u v w", u < v, sorted, w in
                  shortest round-trippable decimal form (integral weights as ints)
  labels          optional, one line per labeled node: "u c", sorted by u

Loading is tolerant of directed raw input (both orientations of a pair merge
by max weight) but rejects a repeated identical orientation as a duplicate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import SparseMatrix
from .graph import MultiViewGraph

log = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the file and line."""


@dataclass(frozen=True)
class SyntheticConfig:
    n: int
    communities: int
    k: int
    p_in: float
    p_out: float
    rho: float
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.p_out < self.p_in <= 1):
            raise ValueError("need p_in > p_out > 0")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.communities < 1 or self.k < 1 or self.n < 1:
            raise ValueError("counts must be positive")


def format_weight(w: float) -> str:
    """Shortest decimal that round-trips; integral values print without a point."""
    return str(int(w)) if float(w).is_integer() and abs(w) < 1e15 else repr(float(w))


def _parse_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON ({e})") from e
    for key in ("nodes", "views", "view_names"):
        if key not in meta:
            raise DatasetFormatError(f"{path}: missing key '{key}'")
    if len(meta["view_names"]) != meta["views"]:
        raise DatasetFormatError(f"{path}: view_names length != views")
    return meta


def _parse_edge_file(path: Path, n: int) -> SparseMatrix:
    weights: dict[tuple[int, int], float] = {}
    seen_oriented: set[tuple[int, int]] = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DatasetFormatError(f"{path}:{lineno}: expected 'u v w', got {line!r}")
            try:
                u, v, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric field in {line!r}")
            if u == v:
                raise DatasetFormatError(f"{path}:{lineno}: self-loop on node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise DatasetFormatError(f"{path}:{lineno}: node id outside [0, {n})")
            if not (w > 0 and np.isfinite(w)):
                raise DatasetFormatError(f"{path}:{lineno}: weight must be positive finite")
            if (u, v) in seen_oriented:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate edge ({u}, {v})")
            seen_oriented.add((u, v))
            key = (min(u, v), max(u, v))
            weights[key] = max(weights.get(key, 0.0), w)  # max rule symmetrizes
    if not weights:
        return SparseMatrix.from_coo(n, n, [], [], [])
    rows, cols, vals = [], [], []
    for (u, v), w in weights.items():
        rows += [u, v]
        cols += [v, u]
        vals += [w, w]
    return SparseMatrix.from_coo(n, n, rows, cols, vals)


def _parse_labels(path: Path, n: int, n_classes: int | None) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetFormatError(f"{path}:{lineno}: expected 'u c', got {line!r}")
            try:
                u, c = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric field in {line!r}")
            if not 0 <= u < n:
                raise DatasetFormatError(f"{path}:{lineno}: node id outside [0, {n})")
            if labels[u] != -1:
                raise DatasetFormatError(f"{path}:{lineno}: node {u} labeled twice")
            if c < 0 or (n_classes is not None and c >= n_classes):
                raise DatasetFormatError(f"{path}:{lineno}: class id outside [0, {n_classes})")
            labels[u] = c
    return labels


def load(directory) -> MultiViewGraph:
    """Load and validate a canonical dataset directory."""
    directory = Path(directory)
    meta_path = directory / "meta"
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset meta file not found: {meta_path}")
    meta = _parse_meta(meta_path)
    n, k = int(meta["nodes"]), int(meta["views"])
    n_classes = meta.get("classes")
    views = []
    for i in range(k):
        path = directory / f"view_{i}.edges"
        if not path.exists():
            raise FileNotFoundError(f"missing edge file: {path}")
        views.append(_parse_edge_file(path, n))
    labels = None
    labels_path = directory / "labels"
    if labels_path.exists():
        labels = _parse_labels(labels_path, n, n_classes)
    return MultiViewGraph(n=n, views=views, view_names=list(meta["view_names"]),
                          labels=labels, n_classes=n_classes)


def save(g: MultiViewGraph, directory) -> None:
    """Write the canonical byte-exact form (sorted u < v lines)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "classes": g.n_classes,
        "nodes": g.n,
        "view_names": list(g.view_names),
        "views": g.k,
    }
    (directory / "meta").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")
    for i, view in enumerate(g.views):
        rows = np.repeat(np.arange(view.rows), np.diff(view.row_offsets))
        lines = []
        for u, v, w in zip(rows, view.col_indices, view.entry_values):
            if u < v:
                lines.append((int(u), int(v), float(w)))
        lines.sort()
        text = "".join(f"{u} {v} {format_weight(w)}\n" for u, v, w in lines)
        (directory / f"view_{i}.edges").write_text(text)
    if g.labels is not None and (g.labels >= 0).any():
        text = "".join(f"{u} {int(g.labels[u])}\n" for u in np.nonzero(g.labels >= 0)[0])
        (directory / "labels").write_text(text)


def generate(cfg: SyntheticConfig) -> MultiViewGraph:
    """Correlated multi-view stochastic block model.

    Nodes join communities round-robin (labels = community). A base SBM is
    drawn once; per view, each node pair independently inherits the base
    decision with probability rho and takes a fresh SBM draw otherwise, so
    every view is marginally the same SBM and rho tunes cross-view agreement.
    """
    rng = np.random.default_rng(np.random.Philox(cfg.seed))
    n = cfg.n
    labels = np.arange(n, dtype=np.int64) % cfg.communities
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, cfg.p_in, cfg.p_out)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    base = (rng.random((n, n)) < prob) & upper
    views = []
    for _ in range(cfg.k):
        inherit = (rng.random((n, n)) < cfg.rho) & upper
        fresh = (rng.random((n, n)) < prob) & upper
        chosen = np.where(inherit, base, fresh)
        dense = chosen | chosen.T
        views.append(SparseMatrix.from_dense(dense.astype(float)))
    return MultiViewGraph(n=n, views=views, labels=labels, n_classes=cfg.communities)
