"""Assignment graph construction.

Three pieces feed the matching network: a directed instance graph whose
edges link each instance to its k nearest neighbours by box center, a
complete directed label graph over word embeddings, and one matching edge
per (instance, label) pair. Aggregation during convolution is expressed as
small dense row-normalized incidence matrices built once per graph; a node
aggregates over its incoming typed edges, and a kNN edge points from the
node that selected the neighbour to that neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .activation import InstanceSet
from .autodiff import Var


@dataclass
class InstanceGraph:
    feats: Var               # (n, D) node attributes
    boxes: np.ndarray        # (n, 4)
    edge_src: np.ndarray     # (e,)
    edge_dst: np.ndarray
    edge_attr: np.ndarray    # (e, 8) = [box_src, box_dst]


@dataclass
class LabelGraph:
    feats: np.ndarray        # (C, E) word embeddings
    edge_src: np.ndarray     # (C*(C-1),)
    edge_dst: np.ndarray
    edge_attr: np.ndarray    # (C*(C-1), 2E) = [emb_src, emb_dst]


@dataclass
class AssignmentGraph:
    inst: InstanceGraph
    labels: LabelGraph
    match_inst: np.ndarray   # (n*C,) instance index, instance-major order
    match_label: np.ndarray  # (n*C,)
    match_attr: Var          # (n*C, D+E) = [inst_feat, label_emb]
    # row-normalized incidence matrices: rows aggregate incoming messages
    agg_inst_from_inst: np.ndarray    # (n, e)
    agg_inst_from_match: np.ndarray   # (n, n*C)
    agg_label_from_label: np.ndarray  # (C, C*(C-1))
    agg_label_from_match: np.ndarray  # (C, n*C)

    @property
    def n_instances(self) -> int:
        return self.inst.boxes.shape[0]

    @property
    def n_labels(self) -> int:
        return self.labels.feats.shape[0]

    def with_attributes(self, inst_feats: Var, match_attr: Var) -> "AssignmentGraph":
        """Same structure, new differentiable attributes (fast re-forward)."""
        return replace(self, inst=replace(self.inst, feats=inst_feats), match_attr=match_attr)


def box_centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2.0


def knn_edges(boxes: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges i -> j for each of i's k nearest neighbours.

    Distance is Euclidean between box centers; ties prefer the smaller node
    index; k clamps to n-1. Edges are emitted source-major, neighbours in
    ascending (distance, index) order.
    """
    n = boxes.shape[0]
    kk = min(k, n - 1)
    if kk <= 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    c = box_centers(boxes)
    diff = c[:, None, :] - c[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    src, dst = [], []
    order_idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((order_idx, d2[i]))
        for j in order[:kk]:
            src.append(i)
            dst.append(j)
    return np.array(src), np.array(dst)


def build_instance_graph(instances: InstanceSet, k: int) -> InstanceGraph:
    if k < 1:
        raise ValueError("k must be positive")
    src, dst = knn_edges(instances.boxes, k)
    attr = (np.hstack([instances.boxes[src], instances.boxes[dst]])
            if len(src) else np.empty((0, 8)))
    return InstanceGraph(feats=instances.features, boxes=instances.boxes,
                         edge_src=src, edge_dst=dst, edge_attr=attr)


def build_label_graph(embeddings: np.ndarray) -> LabelGraph:
    emb = np.asarray(ad._value(embeddings), dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ad.ShapeError(f"embeddings must be (C, E), got {emb.shape}")
    c = emb.shape[0]
    src = np.repeat(np.arange(c), c - 1) if c > 1 else np.empty(0, dtype=int)
    dst = (np.concatenate([np.delete(np.arange(c), i) for i in range(c)])
           if c > 1 else np.empty(0, dtype=int))
    attr = np.hstack([emb[src], emb[dst]]) if c > 1 else np.empty((0, 2 * emb.shape[1]))
    return LabelGraph(feats=emb, edge_src=src, edge_dst=dst, edge_attr=attr)


def _incidence(dst: np.ndarray, n_rows: int, n_edges: int) -> np.ndarray:
    a = np.zeros((n_rows, n_edges))
    if n_edges:
        a[dst, np.arange(n_edges)] = 1.0
        counts = a.sum(axis=1, keepdims=True)
        a /= np.maximum(counts, 1.0)
    return a


def build_assignment_graph(inst_graph: InstanceGraph, label_graph: LabelGraph) -> AssignmentGraph:
    """Union both subgraphs and connect every instance to every label.

    Matching edge (i, j) carries [v_i_inst, v_j_label]; it is stored once
    and serves aggregation at both endpoints.
    """
    n = inst_graph.boxes.shape[0]
    c = label_graph.feats.shape[0]
    match_inst = np.repeat(np.arange(n), c)
    match_label = np.tile(np.arange(c), n)
    match_attr = ad.concat_cols([
        ad.gather_rows(inst_graph.feats, match_inst),
        label_graph.feats[match_label],
    ])
    return AssignmentGraph(
        inst=inst_graph,
        labels=label_graph,
        match_inst=match_inst,
        match_label=match_label,
        match_attr=match_attr,
        agg_inst_from_inst=_incidence(inst_graph.edge_dst, n, len(inst_graph.edge_src)),
        agg_inst_from_match=_incidence(match_inst, n, n * c),
        agg_label_from_label=_incidence(label_graph.edge_dst, c, len(label_graph.edge_src)),
        agg_label_from_match=_incidence(match_label, c, n * c),
    )
