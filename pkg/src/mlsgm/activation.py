"""Content-aware semantic activation: feature map -> semantic instances.

A 1x1-convolution classifier turns a (D, H, W) feature map into per-class
activation maps squashed through a logistic. Classes whose pooled score
clears a threshold become instances: their feature is the activation-weighted
sum of the feature map, their box the largest bright segment of the map. A
global instance (whole-image mean, full box) is always prepended.

Gradients flow through the maps and the pooled features; box localization
and the selection decision are piecewise constant and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import ShapeError, Var

GLOBAL_CLASS = -1

_EIGHT_CONNECTED = np.ones((3, 3), dtype=np.int8)


@dataclass
class ActivationMaps:
    """Per-class activation maps (C, H, W) in [0,1] plus pooled class scores."""

    maps: Var | np.ndarray                # (C, H, W)
    class_scores: Var | np.ndarray        # (C,)
    maps_flat: Var | np.ndarray = field(repr=False)  # (C, H*W) view used by pooling


@dataclass(frozen=True)
class Instance:
    feature: np.ndarray      # (D,)
    bbox: tuple[float, float, float, float]  # (x, y, w, h), normalized
    score: float
    class_id: int            # GLOBAL_CLASS for the whole-image instance

    def __post_init__(self):
        x, y, w, h = self.bbox
        if not (0.0 <= x and 0.0 <= y and w > 0.0 and h > 0.0
                and x + w <= 1.0 + 1e-9 and y + h <= 1.0 + 1e-9):
            raise ValueError(f"bad bbox {self.bbox}")


@dataclass
class InstanceSet:
    """Selected instances; row 0 is always the global instance."""

    features: Var | np.ndarray   # (n, D)
    boxes: np.ndarray        # (n, 4)
    scores: np.ndarray       # (n,)
    class_ids: np.ndarray    # (n,), GLOBAL_CLASS first

    def __post_init__(self):
        n = self.boxes.shape[0]
        if not (ad._value(self.features).shape[0] == n == len(self.scores) == len(self.class_ids)):
            raise ShapeError("instance arrays disagree on length")
        if n < 1 or self.class_ids[0] != GLOBAL_CLASS:
            raise ValueError("instance set must start with the global instance")
        non_global = self.class_ids[1:]
        if len(set(non_global.tolist())) != len(non_global):
            raise ValueError("duplicate class ids among instances")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def instance(self, i: int) -> Instance:
        return Instance(
            feature=np.array(ad._value(self.features)[i]),
            bbox=tuple(float(v) for v in self.boxes[i]),
            score=float(self.scores[i]),
            class_id=int(self.class_ids[i]),
        )


def activate(feature_map, w_cls, b_cls, score_pool: str = "mean") -> ActivationMaps:
    """maps[c] = sigmoid(w_cls[c] . F[:, x, y] + b_cls[c]); scores pool the maps.

    `score_pool` is "mean" (default) or "max" over the spatial grid.
    """
    fv = ad._value(feature_map)
    wv = ad._value(w_cls)
    if fv.ndim != 3 or wv.ndim != 2 or wv.shape[1] != fv.shape[0]:
        raise ShapeError(f"activate shapes F{fv.shape} W{wv.shape}")
    d, h, w = fv.shape
    flat = ad.reshape(feature_map, (d, h * w)) if isinstance(feature_map, Var) else fv.reshape(d, h * w)
    cols = ad.transpose(flat)                       # (HW, D)
    logits = ad.affine(cols, w_cls, b_cls)          # (HW, C)
    maps_flat = ad.transpose(ad.sigmoid(logits))    # (C, HW)
    maps = ad.reshape(maps_flat, (wv.shape[0], h, w))
    if score_pool == "mean":
        scores = ad.mean_axis1(maps_flat)
    elif score_pool == "max":
        scores = ad.max_axis1(maps_flat)
    else:
        raise ValueError(f"unknown score_pool {score_pool!r}")
    return ActivationMaps(maps=maps, class_scores=scores, maps_flat=maps_flat)


def pool_instance(feature_map, map_c) -> Var:
    """feature[d] = sum_{x,y} map_c[x,y] * F[d,x,y]."""
    fv = ad._value(feature_map)
    mv = ad._value(map_c)
    if fv.ndim != 3 or mv.shape != fv.shape[1:]:
        raise ShapeError(f"pool shapes F{fv.shape} map{mv.shape}")
    d, h, w = fv.shape
    m_row = ad.reshape(map_c, (1, h * w)) if isinstance(map_c, Var) else mv.reshape(1, h * w)
    f_cols = ad.reshape(feature_map, (d, h * w)) if isinstance(feature_map, Var) else fv.reshape(d, h * w)
    return ad.reshape(ad.matmul(m_row, ad.transpose(f_cols)), (d,))


def localize(map_c: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box around the largest bright segment of one activation map.

    Cells at or above 20% of the map maximum are kept, segments use
    8-connectivity, and the biggest segment wins (ties: the segment whose
    lexicographically smallest (row, col) cell comes first). Coordinates are
    normalized: x = min_col/W, y = min_row/H, w and h likewise. A map with
    no strictly positive entry falls back to the full-grid box.
    """
    m = np.asarray(map_c, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"localize expects a 2-D map, got {m.shape}")
    h, w = m.shape
    peak = m.max() if m.size else 0.0
    if peak <= 0.0:
        return (0.0, 0.0, 1.0, 1.0)
    mask = m >= 0.2 * peak
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return (0.0, 0.0, 1.0, 1.0)
    sizes = np.bincount(labels.ravel())[1:]
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size) + 1
    if len(candidates) == 1:
        winner = candidates[0]
    else:
        def top_left(lab):
            rows, cols = np.nonzero(labels == lab)
            order = np.lexsort((cols, rows))
            return (rows[order[0]], cols[order[0]])
        winner = min(candidates, key=top_left)
    rows, cols = np.nonzero(labels == winner)
    r0, r1 = rows.min(), rows.max()
    c0, c1 = cols.min(), cols.max()
    return (c0 / w, r0 / h, (c1 - c0 + 1) / w, (r1 - r0 + 1) / h)


def select_instances(acts: ActivationMaps, feature_map, gamma: float,
                     class_ids: np.ndarray | None = None) -> InstanceSet:
    """Instances for every class with score strictly above gamma.

    Row 0 is the global instance (spatial mean of F, full box, score 1);
    the rest follow in ascending class id. `class_ids` maps map rows to
    global category ids when only a subset of classes is active.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0,1], got {gamma}")
    scores = ad._value(acts.class_scores)
    fv = ad._value(feature_map)
    d, h, w = fv.shape
    ids = np.arange(len(scores)) if class_ids is None else np.asarray(class_ids)
    sel = np.flatnonzero(scores > gamma)

    global_feat = fv.reshape(d, h * w).mean(axis=1)
    if len(sel):
        picked = ad.gather_rows(acts.maps_flat, sel)          # (m, HW)
        f_cols = fv.reshape(d, h * w).T                        # (HW, D)
        pooled = ad.matmul(picked, f_cols)                     # (m, D)
        features = ad.concat_rows([global_feat[None, :], pooled])
        maps_value = ad._value(acts.maps)
        boxes = np.array([localize(maps_value[c]) for c in sel])
    else:
        features = ad.constant(global_feat[None, :])
        boxes = np.empty((0, 4))
    return InstanceSet(
        features=features,
        boxes=np.vstack([np.array([[0.0, 0.0, 1.0, 1.0]]), boxes]),
        scores=np.concatenate([[1.0], scores[sel]]),
        class_ids=np.concatenate([[GLOBAL_CLASS], ids[sel]]).astype(int),
    )
