"""Pipeline assembly: classifier + instance extraction + matching network.

One `Pipeline` owns every trainable tensor (the activation classifier and
all matching MLPs) inside a single ParamStore. `forward_image` runs the
whole differentiable chain for one image; `freeze_structure` captures the
gradient-opaque decisions (class selection, boxes, kNN edges) so repeated
re-evaluations -- as in finite-difference checks, where thresholding must
stay piecewise constant -- can skip and pin them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .activation import GLOBAL_CLASS, ActivationMaps, InstanceSet, activate, select_instances
from .autodiff import ParamStore, Var, no_grad
from .data import load_tensor, save_tensor
from .graphs import AssignmentGraph, build_assignment_graph, build_instance_graph, build_label_graph
from .losses import max_pool
from .matching import IlmsParams, forward as ilms_forward, init_ilms_params
from .rng import SplitMix64


class CheckpointError(ValueError):
    """Checkpoint directory and index disagree with the model."""


@dataclass
class ForwardResult:
    scores: Var              # (n_instances, n_active_classes)
    instances: InstanceSet
    acts: ActivationMaps
    graph: AssignmentGraph


@dataclass
class FrozenStructure:
    """Gradient-opaque decisions captured from one reference forward pass."""

    sel: np.ndarray              # selected rows of the active class maps
    template: AssignmentGraph    # structure + constant attributes
    match_label_part: np.ndarray  # (n*C, E) label half of the matching attrs


class Pipeline:
    def __init__(self, store: ParamStore, w_cls, b_cls, ilms: IlmsParams, *,
                 num_classes: int, feat_dim: int, embed_dim: int,
                 gamma: float, k_nn: int, score_pool: str):
        self.store = store
        self.w_cls = w_cls
        self.b_cls = b_cls
        self.ilms = ilms
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        self.embed_dim = embed_dim
        self.gamma = gamma
        self.k_nn = k_nn
        self.score_pool = score_pool

    @classmethod
    def build(cls, *, num_classes: int, feat_dim: int, embed_dim: int,
              widths=(16, 8), gamma: float = 0.5, k_nn: int = 3,
              score_pool: str = "mean", seed: int = 0) -> "Pipeline":
        """Register and initialize every parameter from one seeded stream.

        Draw order: classifier weights first (bias is zero), then the
        matching MLPs in their registration order.
        """
        store = ParamStore()
        rng = SplitMix64(seed)
        limit = math.sqrt(6.0 / (feat_dim + num_classes))
        w_cls = store.add("csac.w", rng.fill_uniform((num_classes, feat_dim), -limit, limit))
        b_cls = store.add("csac.b", np.zeros(num_classes))
        ilms = init_ilms_params(store, rng, feat_dim, embed_dim, widths)
        return cls(store, w_cls, b_cls, ilms, num_classes=num_classes,
                   feat_dim=feat_dim, embed_dim=embed_dim, gamma=gamma,
                   k_nn=k_nn, score_pool=score_pool)

    # ------------------------------------------------------------- forward

    def _classifier_heads(self, active):
        if active is None:
            return self.w_cls, self.b_cls
        return ad.gather_rows(self.w_cls, active), ad.gather_rows(self.b_cls, active)

    def forward_image(self, feats: np.ndarray, embeddings: np.ndarray,
                      active: np.ndarray | None = None,
                      frozen: FrozenStructure | None = None) -> ForwardResult:
        """Scores for one image: activate -> select -> graphs -> matching.

        `active` restricts the classifier rows and label set to a subset of
        global class ids (the few-shot stages train on such subsets). With
        `frozen`, selection, boxes and graph structure are reused from the
        capture instead of recomputed, and only differentiable attributes
        are rebuilt.
        """
        feats = np.ascontiguousarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[0] != self.feat_dim:
            raise ad.ShapeError(f"feature map {feats.shape} does not match feat_dim {self.feat_dim}")
        w, b = self._classifier_heads(active)
        acts = activate(feats, w, b, self.score_pool)

        if frozen is None:
            class_ids = np.arange(self.num_classes) if active is None else np.asarray(active)
            instances = select_instances(acts, feats, self.gamma, class_ids=class_ids)
            graph = build_assignment_graph(
                build_instance_graph(instances, self.k_nn),
                build_label_graph(embeddings),
            )
        else:
            d, h, wd = feats.shape
            flat = feats.reshape(d, h * wd)
            global_feat = flat.mean(axis=1)
            if len(frozen.sel):
                pooled = ad.matmul(ad.gather_rows(acts.maps_flat, frozen.sel), flat.T)
                features = ad.concat_rows([global_feat[None, :], pooled])
            else:
                features = ad.constant(global_feat[None, :])
            t = frozen.template
            match_attr = ad.concat_cols([
                ad.gather_rows(features, t.match_inst), frozen.match_label_part])
            graph = t.with_attributes(features, match_attr)
            instances = InstanceSet(
                features=features,
                boxes=t.inst.boxes,
                scores=np.concatenate([[1.0], ad._value(acts.class_scores)[frozen.sel]]),
                class_ids=np.concatenate(
                    [[GLOBAL_CLASS],
                     (np.arange(self.num_classes) if active is None
                      else np.asarray(active))[frozen.sel]]).astype(int),
            )

        scores = ilms_forward(graph, self.ilms)
        return ForwardResult(scores=scores, instances=instances, acts=acts, graph=graph)

    def freeze_structure(self, feats: np.ndarray, embeddings: np.ndarray,
                         active: np.ndarray | None = None) -> FrozenStructure:
        """Capture selection, boxes and graph structure at the current
        parameters (one recording-free forward pass)."""
        with no_grad():
            res = self.forward_image(feats, embeddings, active=active)
            sel = np.flatnonzero(ad._value(res.acts.class_scores) > self.gamma)
        graph = res.graph
        label_part = graph.labels.feats[graph.match_label]
        return FrozenStructure(sel=sel, template=graph, match_label_part=label_part)

    def predict(self, feats: np.ndarray, embeddings: np.ndarray,
                active: np.ndarray | None = None) -> np.ndarray:
        """Fused per-class scores: max over instances of the matching scores."""
        with no_grad():
            res = self.forward_image(feats, embeddings, active=active)
            return ad._value(max_pool(res.scores))

    # ---------------------------------------------------------- checkpoints

    def round_to_storage(self) -> None:
        """Snap every parameter to its float32-representable value, so live
        evaluation agrees bit-exactly with a saved-and-reloaded checkpoint."""
        for p in self.store.params():
            p.value[...] = p.value.astype(np.float32).astype(np.float64)

    def save_checkpoint(self, directory) -> Path:
        """Write every parameter tensor (MLSG format) plus a JSON index.

        Parameters are canonicalized to float32 precision first (see
        `round_to_storage`); evaluating before saving and after reloading
        then produces identical numbers.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.round_to_storage()
        index = {
            "format": "mlsgm-checkpoint",
            "version": 1,
            "model": {
                "num_classes": self.num_classes,
                "feat_dim": self.feat_dim,
                "embed_dim": self.embed_dim,
                "widths": list(self.ilms.widths),
                "gamma": self.gamma,
                "k_nn": self.k_nn,
                "score_pool": self.score_pool,
            },
            "params": {name: f"{name}.mlsg" for name in self.store.names()},
        }
        for name, fname in index["params"].items():
            save_tensor(self.store[name].value, directory / fname)
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load_checkpoint(cls, directory) -> "Pipeline":
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.exists():
            raise CheckpointError(f"no index.json under {directory}")
        try:
            index = json.loads(index_path.read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"unreadable checkpoint index: {e}") from e
        if index.get("format") != "mlsgm-checkpoint" or index.get("version") != 1:
            raise CheckpointError("not a version-1 mlsgm checkpoint")
        m = index["model"]
        model = cls.build(num_classes=m["num_classes"], feat_dim=m["feat_dim"],
                          embed_dim=m["embed_dim"], widths=tuple(m["widths"]),
                          gamma=m["gamma"], k_nn=m["k_nn"],
                          score_pool=m["score_pool"], seed=0)
        arrays = {}
        for name, fname in index["params"].items():
            path = directory / fname
            if not path.exists():
                raise CheckpointError(f"missing parameter file {fname}")
            arrays[name] = load_tensor(path)
        try:
            model.store.load_state(arrays)
        except ValueError as e:
            raise CheckpointError(f"checkpoint/index mismatch: {e}") from e
        return model
