"""Metrics and protocols: per-level and flat accuracy, confusion matrices,
mean path distance, grayscale/OOD evaluation, and the few-shot harness."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import hiergat as hg
from .dataio import DatasetManifest, EncoderHandle, FeatureCache, read_image
from .taxonomy import HierarchicalLabel, Taxonomy, label_of, path_distance

__all__ = [
    "EvalError",
    "EvalReport",
    "FewShotConfig",
    "per_level_accuracy",
    "mean_path_distance",
    "confusion_matrices",
    "run_eval",
    "few_shot_run",
    "grayscale",
]


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    level_names: tuple[str, ...]
    per_level_top1: list[float]
    confusion: list[dict]  # per level: {"classes": [...], "matrix": [[...]]}
    flat_top1: float
    mean_path_distance: float
    sample_count: int
    split: str = ""
    grayscale: bool = False

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "grayscale": self.grayscale,
            "sample_count": self.sample_count,
            "level_names": list(self.level_names),
            "per_level_top1": self.per_level_top1,
            "flat_top1": self.flat_top1,
            "mean_path_distance": self.mean_path_distance,
            "confusion": self.confusion,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)


@dataclass(frozen=True)
class FewShotConfig:
    held_out_class: str
    reintroduced_counts: tuple[int, ...] = (1, 2, 4, 8, 16)
    seed: int = 0
    finetune_epochs: int = 10

    def __post_init__(self):
        counts = self.reintroduced_counts
        if not counts or any(c <= 0 for c in counts):
            raise EvalError("reintroduced counts must be positive")
        if list(counts) != sorted(counts):
            raise EvalError("reintroduced counts must be non-decreasing")


def per_level_accuracy(
    predictions: Sequence[Sequence[str]],
    labels: Sequence[HierarchicalLabel],
) -> list[float]:
    """Fraction correct at each level independently.

    `predictions[d]` holds the level-d argmax node ids for every sample; no
    hierarchical consistency between levels is assumed or enforced.
    """
    if not labels:
        raise EvalError("no samples to evaluate")
    depth = len(predictions)
    out = []
    for d in range(depth):
        preds = predictions[d]
        if len(preds) != len(labels):
            raise EvalError(
                f"level {d}: {len(preds)} predictions vs {len(labels)} labels"
            )
        hits = sum(p == lab.path[d] for p, lab in zip(preds, labels) if len(lab.path) > d)
        total = sum(1 for lab in labels if len(lab.path) > d)
        out.append(hits / total if total else 0.0)
    return out


def mean_path_distance(
    predicted: Sequence[str], actual: Sequence[str], taxonomy: Taxonomy
) -> float:
    if len(predicted) != len(actual):
        raise EvalError(f"{len(predicted)} predictions vs {len(actual)} labels")
    if not predicted:
        raise EvalError("no samples to evaluate")
    return float(
        np.mean([path_distance(taxonomy, p, a) for p, a in zip(predicted, actual)])
    )


def confusion_matrices(
    predictions: Sequence[Sequence[str]],
    labels: Sequence[HierarchicalLabel],
    taxonomy: Taxonomy,
) -> list[dict]:
    out = []
    graph_levels = [
        [nid for nid in taxonomy.preorder if taxonomy.level_index(nid) == d]
        for d in range(len(taxonomy.level_names))
    ]
    for d, classes in enumerate(graph_levels):
        rank = {c: i for i, c in enumerate(classes)}
        mat = np.zeros((len(classes), len(classes)), dtype=int)
        for p, lab in zip(predictions[d], labels):
            if len(lab.path) > d:
                mat[rank[lab.path[d]], rank[p]] += 1
        out.append({"classes": classes, "matrix": mat.tolist()})
    return out


def grayscale(image: np.ndarray) -> np.ndarray:
    """Linear-light BT.709 luminance replicated across channels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        y = img[:, :, 0]
    else:
        y = img[:, :, :3] @ np.array([0.2126, 0.7152, 0.0722])
    return np.repeat(y[:, :, None], 3, axis=2)


def _features_for_split(
    manifest: DatasetManifest,
    split: str,
    encoder: EncoderHandle,
    cache: Optional[FeatureCache],
    use_grayscale: bool,
):
    from .renderer.filters import resample_image

    records = manifest.split_records(split)
    feats, leaf_ids = [], []
    for rec in records:
        if cache is not None and not use_grayscale and rec.id in cache.ids:
            feats.append(cache.vector(rec.id))
        else:
            img = read_image(manifest.path(rec.appearance))
            if use_grayscale:
                img = grayscale(img)
            size = encoder.input_size
            if img.shape[0] != size or img.shape[1] != size:
                img = resample_image(img, (size, size))
            feats.append(encoder.encode(img))
        leaf_ids.append(rec.label)
    return np.asarray(feats), leaf_ids


def run_eval(
    model: hg.HierGatModel,
    manifest: DatasetManifest,
    split: str,
    taxonomy: Taxonomy,
    encoder: EncoderHandle,
    cache: Optional[FeatureCache] = None,
    use_grayscale: bool = False,
    batch_size: int = 64,
) -> EvalReport:
    """Deterministic evaluation of one split; optional grayscale conversion
    happens in linear light before encoding."""
    for rec in manifest.split_records(split):
        if rec.label not in taxonomy.nodes:
            raise EvalError(f"record {rec.id!r}: unknown label {rec.label!r}")
    feats, leaf_ids = _features_for_split(manifest, split, encoder, cache, use_grayscale)
    if len(leaf_ids) == 0:
        raise EvalError(f"split {split!r} is empty")
    labels = [label_of(taxonomy, leaf) for leaf in leaf_ids]

    depth = len(taxonomy.level_names)
    per_level_preds: list[list[str]] = [[] for _ in range(depth)]
    flat_preds: list[str] = []
    for start in range(0, len(feats), batch_size):
        chunk = feats[start : start + batch_size]
        level_ids = hg.predict_levels(model, chunk)
        for d in range(depth):
            per_level_preds[d].extend(level_ids[d])
        logits = hg.forward(model, chunk).data
        members = model.graph.level_members[-1]
        picks = np.argmax(logits[:, list(members)], axis=-1)
        flat_preds.extend(model.graph.node_ids[members[p]] for p in picks)

    acc = per_level_accuracy(per_level_preds, labels)
    flat = float(np.mean([p == l for p, l in zip(flat_preds, leaf_ids)]))
    mpd = mean_path_distance(flat_preds, leaf_ids, taxonomy)
    return EvalReport(
        level_names=taxonomy.level_names,
        per_level_top1=acc,
        confusion=confusion_matrices(per_level_preds, labels, taxonomy),
        flat_top1=flat,
        mean_path_distance=mpd,
        sample_count=len(leaf_ids),
        split=split,
        grayscale=use_grayscale,
    )


def save_predictions_csv(path, sample_ids, predicted, actual) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "predicted", "actual"])
        for row in zip(sample_ids, predicted, actual):
            w.writerow(row)


def few_shot_run(
    train_features: np.ndarray,
    train_leaf_ids: list[str],
    test_features: np.ndarray,
    test_leaf_ids: list[str],
    taxonomy: Taxonomy,
    fs_cfg: FewShotConfig,
    pretrain_cfg: hg.TrainingConfig,
    model_cfg: hg.GatConfig,
    encoder_name: str = "trivial",
) -> list[dict]:
    """Pretrain with the held-out class absent, then for each n reintroduce n
    seeded samples, re-init the held-out prototype from their mean, finetune,
    and evaluate on the held-out class's test split.

    Returns [{"n", "accuracy", "path_distance"}...], one row per count.
    """
    held = fs_cfg.held_out_class
    if held not in taxonomy.nodes:
        raise EvalError(f"held-out class {held!r} not in taxonomy")
    held_idx = [i for i, l in enumerate(train_leaf_ids) if l == held]
    rest_idx = [i for i, l in enumerate(train_leaf_ids) if l != held]
    max_n = max(fs_cfg.reintroduced_counts)
    if len(held_idx) < max_n:
        raise EvalError(
            f"held-out class has {len(held_idx)} training samples, need {max_n}"
        )
    test_held = [i for i, l in enumerate(test_leaf_ids) if l == held]
    if not test_held:
        raise EvalError("held-out class has no test samples")

    base = hg.HierGatModel.create(taxonomy, model_cfg, encoder_name, seed=pretrain_cfg.seed)
    rest_feats = train_features[rest_idx]
    rest_ids = [train_leaf_ids[i] for i in rest_idx]
    groups = hg.group_features_by_node(rest_feats, rest_ids, taxonomy)
    hg.apply_prototypes(base, hg.init_prototypes(groups, strict=False))
    hg.fit(base, hg.LabeledFeatures(rest_feats, rest_ids, taxonomy), pretrain_cfg)

    import copy

    rng = np.random.default_rng(fs_cfg.seed)
    rows = []
    for n in fs_cfg.reintroduced_counts:
        chosen = rng.choice(held_idx, size=n, replace=False)
        model = copy.deepcopy(base)
        proto = train_features[chosen].mean(axis=0)
        model.prototypes.data[model.graph.index_of(held)] = proto
        ft_idx = rest_idx + list(chosen)
        ft_feats = train_features[ft_idx]
        ft_ids = [train_leaf_ids[i] for i in ft_idx]
        ft_cfg = hg.TrainingConfig(
            batch_size=pretrain_cfg.batch_size,
            epochs=fs_cfg.finetune_epochs,
            learning_rate=pretrain_cfg.learning_rate,
            weight_decay=pretrain_cfg.weight_decay,
            schedule=pretrain_cfg.schedule,
            sampling=pretrain_cfg.sampling,
            seed=fs_cfg.seed + n,
        )
        hg.fit(model, hg.LabeledFeatures(ft_feats, ft_ids, taxonomy), ft_cfg)
        preds = [hg.predict_flat(model, test_features[i]) for i in test_held]
        actual = [held] * len(test_held)
        acc = float(np.mean([p == a for p, a in zip(preds, actual)]))
        mpd = mean_path_distance(preds, actual, taxonomy)
        rows.append({"n": int(n), "accuracy": acc, "path_distance": mpd})
    return rows


def save_fewshot_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["n", "accuracy", "path_distance"])
        for r in rows:
            w.writerow([r["n"], r["accuracy"], r["path_distance"]])
