"""Training loops for the three regimes, evaluation, and report emission.

Seed derivation (base seed S from the config):
  S       parameter initialization,
  S + 2   epoch shuffling (stage 1 / single stage),
  S + 3   partial-label dropping,
  S + 4   few-shot support selection,
  S + 5   epoch shuffling in few-shot stage 2.

Everything emitted (reports, curves, checkpoints) is a pure function of
(config, seed); no timestamps are written.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, backward, finite_diff_check, sgd_step
from .config import RunConfig
from .data import (
    Manifest,
    drop_labels,
    fewshot_split,
    load_embeddings,
    load_manifest,
    load_tensor,
    synth_dataset,
    synthesize_embeddings,
)
from .losses import (
    ClassPriors,
    DegenerateLabelsError,
    asymmetric_focal,
    max_pool,
    partial_bce,
    tri_to_binary,
    weighted_bce,
)
from .metrics import EvalBatch, full_report
from .model import Pipeline
from .rng import SplitMix64

log = logging.getLogger("mlsgm")

SHUFFLE_OFFSET = 2
DROP_OFFSET = 3
SPLIT_OFFSET = 4
STAGE2_SHUFFLE_OFFSET = 5


@dataclass
class Dataset:
    manifest: Manifest
    features: list[np.ndarray]   # one (D, H, W) array per record
    labels: np.ndarray           # (N, C) tri-state
    embeddings: np.ndarray       # (C, E)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def __len__(self) -> int:
        return len(self.features)


def load_dataset(manifest: Manifest | str | Path, embed_dim: int, seed: int) -> Dataset:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    features = []
    for r in manifest.records:
        try:
            features.append(load_tensor(manifest.resolve(r.feature_path)))
        except Exception as e:
            raise type(e)(f"record {r.id!r}: {e}") from e
    if manifest.embedding_source == "synthetic":
        emb = synthesize_embeddings(manifest.num_classes, embed_dim, seed + 1)
    else:
        emb = load_embeddings(manifest.resolve(manifest.embedding_source), manifest.categories)
    return Dataset(manifest=manifest, features=features,
                   labels=manifest.labels_matrix(), embeddings=emb)


def evaluate_scores(model: Pipeline, dataset: Dataset,
                    active: np.ndarray | None = None) -> np.ndarray:
    """Fused predictions for every record, in manifest order."""
    emb = dataset.embeddings
    rows = []
    for r, feats in zip(dataset.manifest.records, dataset.features):
        try:
            rows.append(model.predict(feats, emb, active=active))
        except Exception as e:
            raise type(e)(f"record {r.id!r}: {e}") from e
    return np.vstack(rows)


def evaluate_model(model: Pipeline, dataset: Dataset,
                   active: np.ndarray | None = None,
                   truth: np.ndarray | None = None) -> dict:
    scores = evaluate_scores(model, dataset, active=active)
    truth = dataset.labels if truth is None else truth
    return full_report(EvalBatch(scores=scores, truth=truth))


# ------------------------------------------------------------ training loop

def train_images(model: Pipeline, dataset: Dataset, objective, cfg: RunConfig,
                 *, labels: np.ndarray | None = None, epochs: int | None = None,
                 lr: float | None = None, shuffle_seed: int,
                 active: np.ndarray | None = None,
                 eval_dataset: Dataset | None = None,
                 stage: str = "train") -> list[dict]:
    """Shared epoch loop: per-image forward, batch-mean gradients, SGD.

    `objective(pred, class_scores, label_row)` returns the per-image loss
    Var (main plus any auxiliary term) or None to skip the image (logged).
    Returns one row per epoch: epoch, lr, mean train loss, eval mAP.
    """
    labels = dataset.labels if labels is None else labels
    epochs = cfg.epochs if epochs is None else epochs
    lr_now = cfg.lr if lr is None else lr
    order = list(range(len(dataset)))
    shuffle_gen = SplitMix64(shuffle_seed)
    rows = []
    for epoch in range(epochs):
        if epoch > 0 and epoch % cfg.lr_decay_every == 0:
            lr_now *= cfg.lr_decay_factor
        shuffle_gen.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            window = order[start:start + cfg.batch_size]
            pending = []
            for idx in window:
                row = labels[idx]
                if not row.any():
                    log.warning("skipping %s %r: no known labels",
                                stage, dataset.manifest.records[idx].id)
                    continue
                pending.append(idx)
            if not pending:
                continue
            scale = 1.0 / len(pending)
            for idx in pending:
                rec = dataset.manifest.records[idx]
                try:
                    res = model.forward_image(dataset.features[idx], dataset.embeddings,
                                              active=active)
                    pred = max_pool(res.scores)
                    loss = objective(pred, res.acts.class_scores, labels[idx])
                except (ad.ShapeError, DegenerateLabelsError) as e:
                    raise type(e)(f"record {rec.id!r}: {e}") from e
                epoch_losses.append(float(loss.value))
                backward(model.store, ad.mul(loss, scale))
            sgd_step(model.store, lr_now, cfg.momentum, cfg.weight_decay)
        row = {"stage": stage, "epoch": epoch, "lr": lr_now,
               "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
        if eval_dataset is not None:
            row["mAP"] = evaluate_model(model, eval_dataset, active=active)["mAP"]
        rows.append(row)
    return rows


def make_full_label_objective(cfg: RunConfig, priors: ClassPriors):
    def objective(pred, class_scores, label_row):
        y = tri_to_binary(label_row)
        loss = weighted_bce(pred, y, priors, cfg.beta)
        if cfg.lambda_aux > 0:
            aux = weighted_bce(class_scores, y, priors, cfg.beta)
            loss = ad.add(loss, ad.mul(aux, cfg.lambda_aux))
        return loss
    return objective


def make_partial_objective(cfg: RunConfig):
    def objective(pred, class_scores, label_row):
        loss = partial_bce(pred, label_row, cfg.alpha, cfg.theta, cfg.mu)
        if cfg.lambda_aux > 0:
            aux = partial_bce(class_scores, label_row, cfg.alpha, cfg.theta, cfg.mu)
            loss = ad.add(loss, ad.mul(aux, cfg.lambda_aux))
        return loss
    return objective


def make_focal_objective(cfg: RunConfig):
    def objective(pred, class_scores, label_row):
        y = tri_to_binary(label_row)
        loss = asymmetric_focal(pred, y, cfg.gamma_pos, cfg.gamma_neg, cfg.margin)
        if cfg.lambda_aux > 0:
            aux = asymmetric_focal(class_scores, y, cfg.gamma_pos, cfg.gamma_neg, cfg.margin)
            loss = ad.add(loss, ad.mul(aux, cfg.lambda_aux))
        return loss
    return objective


# ----------------------------------------------------------------- reports

def _write_report(out_dir: Path, report: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _write_per_class_ap(out_dir: Path, categories: list[str], per_class) -> None:
    with open(out_dir / "per_class_ap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "ap"])
        for name, ap in zip(categories, per_class):
            writer.writerow([name, "" if ap is None else repr(ap)])


def _write_curve(out_dir: Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = ["stage", "epoch", "lr", "train_loss"] + (["mAP"] if "mAP" in rows[0] else [])
    with open(out_dir / "loss_curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([row["stage"], row["epoch"], repr(row["lr"]),
                             repr(row["train_loss"])]
                            + ([repr(row["mAP"])] if "mAP" in row else []))


def _build_model(cfg: RunConfig, num_classes: int, feat_dim: int,
                 embed_dim: int, seed: int) -> Pipeline:
    return Pipeline.build(num_classes=num_classes, feat_dim=feat_dim,
                          embed_dim=embed_dim, widths=tuple(cfg.widths),
                          gamma=cfg.gamma, k_nn=cfg.k_nn,
                          score_pool=cfg.score_pool, seed=seed)


# ------------------------------------------------------------------- modes

def run_train(cfg: RunConfig) -> dict:
    seed = cfg.resolved_seed()
    out_dir = Path(cfg.out_dir)
    dataset = load_dataset(cfg.train_manifest, cfg.embed_dim, seed)
    eval_dataset = (load_dataset(cfg.eval_manifest, cfg.embed_dim, seed)
                    if cfg.eval_manifest else dataset)
    model = _build_model(cfg, dataset.num_classes, dataset.features[0].shape[0],
                         dataset.embeddings.shape[1], seed)
    priors = ClassPriors.from_labels(dataset.labels)
    rows = train_images(model, dataset, make_full_label_objective(cfg, priors), cfg,
                        shuffle_seed=seed + SHUFFLE_OFFSET, eval_dataset=eval_dataset)
    model.save_checkpoint(out_dir / "checkpoint")
    metrics = evaluate_model(model, eval_dataset)
    report = {"mode": "train", "seed": seed, "epochs": cfg.epochs, "metrics": metrics}
    _write_report(out_dir, report)
    _write_per_class_ap(out_dir, eval_dataset.manifest.categories, metrics["per_class_ap"])
    _write_curve(out_dir, rows)
    return report


def run_partial(cfg: RunConfig) -> dict:
    seed = cfg.resolved_seed()
    out_dir = Path(cfg.out_dir)
    full = load_manifest(cfg.train_manifest)
    dropped = (drop_labels(full, cfg.known_fraction, seed + DROP_OFFSET)
               if cfg.known_fraction < 1.0 else full)
    dataset = load_dataset(dropped, cfg.embed_dim, seed)
    eval_dataset = (load_dataset(cfg.eval_manifest, cfg.embed_dim, seed)
                    if cfg.eval_manifest
                    else load_dataset(full, cfg.embed_dim, seed))
    model = _build_model(cfg, dataset.num_classes, dataset.features[0].shape[0],
                         dataset.embeddings.shape[1], seed)
    rows = train_images(model, dataset, make_partial_objective(cfg), cfg,
                        shuffle_seed=seed + SHUFFLE_OFFSET, eval_dataset=eval_dataset,
                        stage="partial")
    model.save_checkpoint(out_dir / "checkpoint")
    metrics = evaluate_model(model, eval_dataset)
    report = {"mode": "partial", "seed": seed, "epochs": cfg.epochs,
              "known_fraction": cfg.known_fraction, "metrics": metrics}
    _write_report(out_dir, report)
    _write_per_class_ap(out_dir, eval_dataset.manifest.categories, metrics["per_class_ap"])
    _write_curve(out_dir, rows)
    return report


def run_fewshot(cfg: RunConfig) -> dict:
    seed = cfg.resolved_seed()
    out_dir = Path(cfg.out_dir)
    full = load_manifest(cfg.train_manifest)
    base_set, support, novel_test = fewshot_split(
        full, cfg.base_classes, cfg.novel_classes, cfg.k_shot, seed + SPLIT_OFFSET)
    base_ids = np.asarray(cfg.base_classes, dtype=int)
    novel_ids = np.asarray(cfg.novel_classes, dtype=int)

    base_data = load_dataset(base_set, cfg.embed_dim, seed)
    support_data = load_dataset(support, cfg.embed_dim, seed)
    test_data = load_dataset(novel_test, cfg.embed_dim, seed)

    model = _build_model(cfg, full.num_classes, base_data.features[0].shape[0],
                         base_data.embeddings.shape[1], seed)

    # stage 1: full-label training restricted to the base label columns
    priors = ClassPriors.from_labels(base_data.labels)
    rows = train_images(model, base_data, make_full_label_objective(cfg, priors), cfg,
                        shuffle_seed=seed + SHUFFLE_OFFSET, active=base_ids,
                        stage="stage1")

    # stage 2: adapt on the K-shot support; base classifier rows frozen
    frozen_w = np.ones(model.w_cls.value.shape[0], dtype=bool)
    frozen_w[novel_ids] = False
    model.w_cls.frozen = np.repeat(frozen_w[:, None], model.w_cls.value.shape[1], axis=1)
    model.b_cls.frozen = frozen_w.copy()
    stage2_epochs = cfg.stage2_epochs if cfg.stage2_epochs is not None else cfg.epochs
    stage2_lr = cfg.stage2_lr if cfg.stage2_lr is not None else cfg.lr
    rows += train_images(model, support_data, make_focal_objective(cfg), cfg,
                         epochs=stage2_epochs, lr=stage2_lr,
                         shuffle_seed=seed + STAGE2_SHUFFLE_OFFSET, active=novel_ids,
                         eval_dataset=test_data, stage="stage2")

    model.save_checkpoint(out_dir / "checkpoint")
    metrics = evaluate_model(model, test_data, active=novel_ids)
    report = {"mode": "fewshot", "seed": seed, "k_shot": cfg.k_shot,
              "epochs": cfg.epochs, "stage2_epochs": stage2_epochs,
              "support_size": len(support_data), "metrics": metrics}
    _write_report(out_dir, report)
    _write_per_class_ap(out_dir, test_data.manifest.categories, metrics["per_class_ap"])
    _write_curve(out_dir, rows)
    return report


def run_evaluate(cfg: RunConfig) -> dict:
    seed = cfg.resolved_seed()
    out_dir = Path(cfg.out_dir)
    model = Pipeline.load_checkpoint(cfg.checkpoint)
    dataset = load_dataset(cfg.eval_manifest, cfg.embed_dim, seed)
    metrics = evaluate_model(model, dataset)
    _write_report(out_dir, metrics)
    _write_per_class_ap(out_dir, dataset.manifest.categories, metrics["per_class_ap"])
    return metrics


def run_gradcheck(cfg: RunConfig) -> dict:
    """Finite-difference check of the full pipeline on a seeded mini-setup:
    2 images, D=8, C=4, 4x4 grids, widths 16/8, loss = weighted BCE of the
    max-pooled matching scores.

    Selection, boxes and graph structure are frozen at the reference
    parameters (the thresholded decisions are piecewise constant, so this is
    exact away from their boundaries).
    """
    seed = cfg.resolved_seed()
    gen = SplitMix64(seed)
    feat_dim, num_classes, h, w = 8, 4, 4, 4
    images = [gen.fill_uniform((feat_dim, h, w), -1.0, 1.0) for _ in range(2)]
    labels = np.array([[1, -1, 1, -1], [-1, 1, -1, 1]], dtype=float)
    y = (labels == 1).astype(float)
    embeddings = synthesize_embeddings(num_classes, cfg.embed_dim, seed + 1)
    model = Pipeline.build(num_classes=num_classes, feat_dim=feat_dim,
                           embed_dim=cfg.embed_dim, widths=tuple(cfg.widths),
                           gamma=cfg.gamma, k_nn=cfg.k_nn,
                           score_pool=cfg.score_pool, seed=seed)
    priors = ClassPriors(r=np.array([0.25, 0.5, 0.5, 0.75]))
    frozen = [model.freeze_structure(img, embeddings) for img in images]

    def loss_fn():
        total = None
        for img, yy, fz in zip(images, y, frozen):
            res = model.forward_image(img, embeddings, frozen=fz)
            term = weighted_bce(max_pool(res.scores), yy, priors, beta=0.4)
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 0.5)

    err = finite_diff_check(model.store, loss_fn, step=cfg.fd_step)
    result = {"mode": "gradcheck", "seed": seed, "step": cfg.fd_step,
              "parameters": model.store.param_count(), "max_rel_error": err}
    out_dir = Path(cfg.out_dir)
    _write_report(out_dir, result)
    return result


def run_synth(cfg: RunConfig, n: int = 16, c: int = 4, d: int = 8, h: int = 4,
              w: int = 4) -> dict:
    seed = cfg.resolved_seed()
    out_dir = Path(cfg.out_dir)
    manifest = synth_dataset(out_dir, n=n, c=c, d=d, h=h, w=w, seed=seed,
                             embed_dim=cfg.embed_dim)
    return {"mode": "synth", "seed": seed, "records": len(manifest.records),
            "manifest": str(out_dir / "manifest.jsonl")}
